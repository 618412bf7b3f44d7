//! JSON wire format spoken with a remote ranker.
//!
//! Request:
//!
//! ```json
//! {"model": "...", "max_tokens": 128, "temperature": 0,
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "Image-1: "},
//!     {"type": "image", "uri": "scene.jpg", "box": [x, y, w, h]},
//!     {"type": "text", "text": " <box>[x, y, w, h]</box>\n"},
//!     ...
//!     {"type": "text", "text": "Instruction: ..."}]}]}
//! ```
//!
//! Response: `{"text": "[4, 2, 8, ...]"}`.

use serde::{Deserialize, Serialize};

use super::prompt::{extract_query_text, Overlay, PromptBundle, IMAGE_PLACEHOLDER};
use crate::gallery::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub model: String,
    pub max_tokens: u32,
    pub temperature: u32,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text {
        text: String,
    },
    Image {
        uri: String,
        #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
        bbox: Option<BBox>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        overlay: Option<Overlay>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResponse {
    pub text: String,
}

fn push_text(parts: &mut Vec<ContentPart>, text: &str) {
    if text.is_empty() {
        return;
    }
    if let Some(ContentPart::Text { text: last }) = parts.last_mut() {
        last.push_str(text);
    } else {
        parts.push(ContentPart::Text { text: text.to_string() });
    }
}

/// Interleaves text and image parts. Each `<image>` placeholder consumes the
/// next attachment; attachments without a placeholder lead the message.
pub fn content_parts(bundle: &PromptBundle) -> Vec<ContentPart> {
    let image_part = |i: usize| {
        let att = &bundle.attachments[i];
        ContentPart::Image {
            uri: att.uri.clone(),
            bbox: bundle.embedded_boxes.get(i).copied().flatten(),
            overlay: att.overlay,
        }
    };
    let placeholders: usize = bundle
        .text_blocks
        .iter()
        .map(|b| b.matches(IMAGE_PLACEHOLDER).count())
        .sum();
    let leading = bundle.attachments.len().saturating_sub(placeholders);

    let mut parts: Vec<ContentPart> = (0..leading).map(image_part).collect();
    let mut next = leading;
    for (bi, block) in bundle.text_blocks.iter().enumerate() {
        let mut pieces = block.split(IMAGE_PLACEHOLDER).peekable();
        while let Some(piece) = pieces.next() {
            push_text(&mut parts, piece);
            if pieces.peek().is_some() && next < bundle.attachments.len() {
                parts.push(image_part(next));
                next += 1;
            }
        }
        if bi + 1 < bundle.text_blocks.len() {
            push_text(&mut parts, "\n");
        }
    }
    parts
}

impl RankRequest {
    pub fn from_bundle(bundle: &PromptBundle, model: &str, max_tokens: u32) -> Self {
        Self {
            model: model.to_string(),
            max_tokens,
            temperature: 0,
            messages: vec![Message {
                role: "user".into(),
                content: content_parts(bundle),
            }],
        }
    }

    pub fn image_count(&self) -> usize {
        self.parts()
            .filter(|p| matches!(p, ContentPart::Image { .. }))
            .count()
    }

    /// All text parts concatenated, with `<image>` where images sat.
    pub fn rendered_text(&self) -> String {
        let mut out = String::new();
        for part in self.parts() {
            match part {
                ContentPart::Text { text } => out.push_str(text),
                ContentPart::Image { .. } => out.push_str(IMAGE_PLACEHOLDER),
            }
        }
        out
    }

    /// The description being ranked against, recovered from the instruction.
    pub fn query_text(&self) -> Option<String> {
        extract_query_text(&self.rendered_text()).map(str::to_string)
    }

    fn parts(&self) -> impl Iterator<Item = &ContentPart> {
        self.messages.iter().flat_map(|m| m.content.iter())
    }
}
