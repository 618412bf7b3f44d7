use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::SceneCandidate;
use crate::gallery::{BBox, GalleryImage};

pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Ranking instruction; `{T}` is the full description, `{K}` the candidate count.
pub const INSTRUCTION_TEMPLATE: &str = "Instruction: For the text description: \"{T}\", order the images based on how accurately they reflect the overall context in the text, starting with the most faithful match. Please output only a Python list format like this: [4, 2, 8, 1, 5, 3, 6, 9, 10, 7, ..., {K}].";

/// Prompt used to caption a single highlighted person.
pub const DESCRIPTION_PROMPT: &str = "Generate a description of the individual within the red bounding box and the connection with the surroundings. Ensure that the description is a natural, fluent paragraph (under 50 words) that a real witness would actually say to police or friends when trying to help find this exact person. Do not include text details or labels, and strictly avoid any punctuation other than commas and periods.";

const INSTRUCTION_HEAD: &str = "Instruction: For the text description: \"";
const INSTRUCTION_TAIL: &str = "\", order the images based on how accurately they reflect";

pub const OVERLAY_RED: [u8; 3] = [255, 0, 0];
pub const DEFAULT_STROKE_PX: u32 = 4;

/// How each candidate's region is conveyed to the ranker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    /// Naive: scene image only, no region information.
    Np,
    /// Box overlay: a red rectangle is drawn around the candidate.
    Bop,
    /// Box embedded: coordinates inside `<box>` tags.
    #[default]
    Bep,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [PromptVariant::Np, PromptVariant::Bop, PromptVariant::Bep];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Np => "np",
            PromptVariant::Bop => "bop",
            PromptVariant::Bep => "bep",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "np" => Ok(PromptVariant::Np),
            "bop" => Ok(PromptVariant::Bop),
            "bep" => Ok(PromptVariant::Bep),
            other => Err(PromptError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PromptError {
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("query text must not be empty")]
    EmptyText,
    #[error("unknown prompt variant {0:?} (expected np, bop or bep)")]
    UnknownVariant(String),
    #[error("bbox {bbox} out of bounds for {width}x{height} image {image_id}")]
    BboxOutOfBounds {
        image_id: String,
        bbox: BBox,
        width: u32,
        height: u32,
    },
}

/// Instruction to draw a rectangle on an image before it reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    pub bbox: BBox,
    pub color: [u8; 3],
    pub stroke_px: u32,
}

impl Overlay {
    pub fn red(bbox: BBox) -> Self {
        Self {
            bbox,
            color: OVERLAY_RED,
            stroke_px: DEFAULT_STROKE_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub uri: String,
    pub overlay: Option<Overlay>,
}

/// A rendered multimodal prompt.
///
/// `text_blocks` joined with `\n` give the full prompt text; each
/// `<image>` placeholder stands for the next entry of `attachments`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub variant: PromptVariant,
    pub text_blocks: Vec<String>,
    pub attachments: Vec<Attachment>,
    pub embedded_boxes: Vec<Option<BBox>>,
    /// The description being ranked against (empty for caption prompts).
    pub query_text: String,
    /// Crop behind each attachment. Bookkeeping only, never sent to the model.
    pub candidate_ids: Vec<String>,
}

impl PromptBundle {
    pub fn render_text(&self) -> String {
        self.text_blocks.join("\n")
    }

    /// Number of candidates being ranked.
    pub fn k(&self) -> usize {
        self.attachments.len()
    }
}

/// The instruction paragraph with `text` and `k` substituted.
pub fn instruction_text(text: &str, k: usize) -> String {
    INSTRUCTION_TEMPLATE
        .replacen("{T}", text, 1)
        .replacen("{K}", &k.to_string(), 1)
}

/// Recovers the description from a rendered instruction paragraph.
pub fn extract_query_text(rendered: &str) -> Option<&str> {
    let start = rendered.find(INSTRUCTION_HEAD)? + INSTRUCTION_HEAD.len();
    let end = rendered.rfind(INSTRUCTION_TAIL)?;
    rendered.get(start..end)
}

/// Builds the ranking prompt over `candidates` (in candidate order).
pub fn build_prompt(
    variant: PromptVariant,
    candidates: &[SceneCandidate],
    text: &str,
) -> Result<PromptBundle, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    if text.trim().is_empty() {
        return Err(PromptError::EmptyText);
    }
    let mut text_blocks = Vec::with_capacity(candidates.len() + 1);
    let mut attachments = Vec::with_capacity(candidates.len());
    let mut embedded_boxes = Vec::with_capacity(candidates.len());
    for (m, cand) in candidates.iter().enumerate() {
        let index = m + 1;
        match variant {
            PromptVariant::Bep => {
                text_blocks.push(format!("Image-{index}: {IMAGE_PLACEHOLDER} <box>{}</box>", cand.bbox));
                embedded_boxes.push(Some(cand.bbox));
            }
            PromptVariant::Np | PromptVariant::Bop => {
                text_blocks.push(format!("Image-{index}: {IMAGE_PLACEHOLDER}"));
                embedded_boxes.push(None);
            }
        }
        attachments.push(Attachment {
            uri: cand.image.uri.clone(),
            overlay: (variant == PromptVariant::Bop).then(|| Overlay::red(cand.bbox)),
        });
    }
    text_blocks.push(instruction_text(text, candidates.len()));
    Ok(PromptBundle {
        variant,
        text_blocks,
        attachments,
        embedded_boxes,
        query_text: text.to_string(),
        candidate_ids: candidates.iter().map(|c| c.crop_id.clone()).collect(),
    })
}

/// Single-image caption prompt: the person is highlighted with a red box.
pub fn build_description_prompt(image: &GalleryImage, bbox: BBox) -> Result<PromptBundle, PromptError> {
    if !bbox.fits_within(image.width, image.height) {
        return Err(PromptError::BboxOutOfBounds {
            image_id: image.image_id.clone(),
            bbox,
            width: image.width,
            height: image.height,
        });
    }
    Ok(PromptBundle {
        variant: PromptVariant::Bop,
        text_blocks: vec![DESCRIPTION_PROMPT.to_string()],
        attachments: vec![Attachment {
            uri: image.uri.clone(),
            overlay: Some(Overlay::red(bbox)),
        }],
        embedded_boxes: vec![None],
        query_text: String::new(),
        candidate_ids: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(boxes: &[BBox]) -> Vec<SceneCandidate> {
        boxes
            .iter()
            .enumerate()
            .map(|(i, b)| SceneCandidate {
                index: i + 1,
                image: GalleryImage {
                    image_id: format!("img{i}"),
                    uri: format!("scenes/img{i}.jpg"),
                    width: 640,
                    height: 480,
                },
                bbox: *b,
                crop_id: format!("c{i}"),
            })
            .collect()
    }

    #[test]
    fn bep_two_candidates() {
        let c = cands(&[BBox::new(1, 2, 3, 4), BBox::new(5, 6, 7, 8)]);
        let p = build_prompt(PromptVariant::Bep, &c, "a man in red").unwrap();
        assert_eq!(p.text_blocks.len(), 3);
        assert_eq!(p.text_blocks[0], "Image-1: <image> <box>[1, 2, 3, 4]</box>");
        assert_eq!(p.text_blocks[1], "Image-2: <image> <box>[5, 6, 7, 8]</box>");
        assert!(p.text_blocks[2].ends_with("like this: [4, 2, 8, 1, 5, 3, 6, 9, 10, 7, ..., 2]."));
        assert!(p.text_blocks[2].starts_with("Instruction: For the text description: \"a man in red\", order"));
        assert!(p.attachments.iter().all(|a| a.overlay.is_none()));
        assert_eq!(p.embedded_boxes, vec![Some(c[0].bbox), Some(c[1].bbox)]);
        assert_eq!(p.attachments[1].uri, "scenes/img1.jpg");
    }

    #[test]
    fn np_has_no_region_information() {
        let c = cands(&[BBox::new(1, 2, 3, 4); 5]);
        let p = build_prompt(PromptVariant::Np, &c, "someone").unwrap();
        assert!(!p.render_text().contains("<box>"));
        assert!(p.attachments.iter().all(|a| a.overlay.is_none()));
        assert!(p.embedded_boxes.iter().all(Option::is_none));
    }

    #[test]
    fn bop_attaches_overlay() {
        let c = cands(&[BBox::new(10, 20, 30, 40)]);
        let p = build_prompt(PromptVariant::Bop, &c, "someone").unwrap();
        assert_eq!(p.attachments.len(), 1);
        assert_eq!(p.attachments[0].overlay, Some(Overlay::red(BBox::new(10, 20, 30, 40))));
        assert_eq!(p.attachments[0].overlay.unwrap().color, [255, 0, 0]);
        assert!(!p.render_text().contains("<box>"));
        assert_eq!(p.embedded_boxes, vec![None]);
    }

    #[test]
    fn rejects_empty_inputs() {
        assert_eq!(build_prompt(PromptVariant::Bep, &[], "x"), Err(PromptError::EmptyCandidates));
        let c = cands(&[BBox::new(0, 0, 1, 1)]);
        assert_eq!(build_prompt(PromptVariant::Bep, &c, " "), Err(PromptError::EmptyText));
    }

    #[test]
    fn query_text_round_trips_through_instruction() {
        let t = "she said \"wait\", order the images based on nothing";
        let rendered = instruction_text(t, 3);
        assert_eq!(extract_query_text(&rendered), Some(t));
        assert_eq!(extract_query_text("nothing here"), None);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("BEP".parse::<PromptVariant>().unwrap(), PromptVariant::Bep);
        assert_eq!("np".parse::<PromptVariant>().unwrap(), PromptVariant::Np);
        assert!("xyz".parse::<PromptVariant>().is_err());
        assert_eq!(PromptVariant::default(), PromptVariant::Bep);
    }

    #[test]
    fn description_prompt() {
        let img = GalleryImage {
            image_id: "i".into(),
            uri: "i.jpg".into(),
            width: 100,
            height: 100,
        };
        let p = build_description_prompt(&img, BBox::new(10, 10, 20, 20)).unwrap();
        assert_eq!(p.text_blocks, vec![DESCRIPTION_PROMPT.to_string()]);
        assert!(p.render_text().contains("under 50 words"));
        assert_eq!(p.attachments.len(), 1);
        assert!(p.attachments[0].overlay.is_some());
        assert!(build_description_prompt(&img, BBox::new(90, 0, 20, 20)).is_err());
    }
}
