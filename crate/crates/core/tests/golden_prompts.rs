use std::path::PathBuf;

use sap_core::coarse::SceneCandidate;
use sap_core::ranker::{build_description_prompt, build_prompt, wire::RankRequest, PromptVariant};
use sap_core::{BBox, GalleryImage};

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(path).unwrap()
}

fn candidates(k: u32) -> Vec<SceneCandidate> {
    (1..=k)
        .map(|m| SceneCandidate {
            index: m as usize,
            image: GalleryImage {
                image_id: format!("img{m}"),
                uri: format!("scenes/img{m}.jpg"),
                width: 640,
                height: 480,
            },
            bbox: BBox::new(10 * m, 5 * m, 40, 90),
            crop_id: format!("c{m}"),
        })
        .collect()
}

const TEXT: &str = "A man in a red jacket waiting at the bus stop, holding a coffee cup.";

#[test]
fn bep_k10_matches_golden() {
    let bundle = build_prompt(PromptVariant::Bep, &candidates(10), TEXT).unwrap();
    assert_eq!(bundle.render_text() + "\n", golden("bep_k10.txt"));
}

#[test]
fn description_prompt_matches_golden() {
    let image = GalleryImage {
        image_id: "img".into(),
        uri: "scenes/img.jpg".into(),
        width: 640,
        height: 480,
    };
    let bundle = build_description_prompt(&image, BBox::new(100, 50, 80, 200)).unwrap();
    assert_eq!(bundle.render_text() + "\n", golden("description.txt"));
    let overlay = bundle.attachments[0].overlay.unwrap();
    assert_eq!(overlay.color, [255, 0, 0]);
    assert_eq!(overlay.bbox, BBox::new(100, 50, 80, 200));
}

#[test]
fn np_and_bop_drop_box_tags_only() {
    let bep = build_prompt(PromptVariant::Bep, &candidates(3), TEXT).unwrap();
    for variant in [PromptVariant::Np, PromptVariant::Bop] {
        let b = build_prompt(variant, &candidates(3), TEXT).unwrap();
        assert_eq!(b.text_blocks.last(), bep.text_blocks.last());
        assert!(!b.render_text().contains("<box>"));
        assert_eq!(b.attachments.iter().all(|a| a.overlay.is_some()), variant == PromptVariant::Bop);
    }
}

#[test]
fn wire_request_carries_the_golden_text() {
    let bundle = build_prompt(PromptVariant::Bep, &candidates(10), TEXT).unwrap();
    let req = RankRequest::from_bundle(&bundle, "test-model", 128);
    assert_eq!(req.image_count(), 10);
    assert_eq!(req.rendered_text() + "\n", golden("bep_k10.txt"));
    assert_eq!(req.query_text().as_deref(), Some(TEXT));
    let json = serde_json::to_value(&req).unwrap();
    assert_eq!(json["temperature"], 0);
    assert_eq!(json["max_tokens"], 128);
    assert!(!json.to_string().contains("\"c1\""), "crop ids must not leak into the request");
}
