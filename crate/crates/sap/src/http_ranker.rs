//! Blocking HTTP client for a remote ranker speaking the JSON wire format
//! in [`sap_core::ranker::wire`].

use reqwest::blocking::Client;
use sap_core::ranker::wire::{RankRequest, RankResponse};
use sap_core::ranker::{PromptBundle, RankerConfig};
use sap_core::{Ranker, RankerError};

/// Keep the body of a failed response short in error messages.
const MAX_ERROR_BODY: usize = 512;

#[derive(Debug, Clone)]
pub struct HttpRanker {
    client: Client,
    config: RankerConfig,
}

impl HttpRanker {
    /// Must not be called from inside an async runtime.
    pub fn new(config: RankerConfig) -> Result<Self, RankerError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| RankerError::Transport(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }
}

fn classify(err: reqwest::Error) -> RankerError {
    if err.is_timeout() {
        RankerError::Timeout
    } else {
        RankerError::Transport(err.to_string())
    }
}

impl Ranker for HttpRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        let body = RankRequest::from_bundle(prompt, &self.config.model, self.config.max_output_tokens);
        let resp = self
            .client
            .post(&self.config.endpoint)
            .json(&body)
            .send()
            .map_err(classify)?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(classify)?;
        if !status.is_success() {
            let mut body = String::from_utf8_lossy(&bytes).into_owned();
            if body.len() > MAX_ERROR_BODY {
                let mut cut = MAX_ERROR_BODY;
                while !body.is_char_boundary(cut) {
                    cut -= 1;
                }
                body.truncate(cut);
            }
            return Err(RankerError::Status {
                code: status.as_u16(),
                body,
            });
        }
        let parsed: RankResponse =
            serde_json::from_slice(&bytes).map_err(|e| RankerError::InvalidResponse(e.to_string()))?;
        Ok(parsed.text)
    }
}
