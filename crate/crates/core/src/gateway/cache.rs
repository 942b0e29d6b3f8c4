use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{BackendReply, CompletionRequest};
use crate::jsonl;
use crate::prompt::ChatTranscript;

#[derive(Serialize)]
struct KeyMaterial<'a> {
    messages: &'a ChatTranscript,
    model_name: &'a str,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "is_zero")]
    sample_index: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

/// Hex SHA-256 over the request content (messages, model, temperature,
/// max tokens, and the sample index when non-zero).
pub fn cache_key(req: &CompletionRequest) -> String {
    let material = KeyMaterial {
        messages: &req.messages,
        model_name: &req.model_name,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
        sample_index: req.sample_index,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Content-addressed response files under a directory.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries count as misses.
    pub fn get(&self, key: &str) -> Option<BackendReply> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(reply) => Some(reply),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, reply: &BackendReply) -> Result<(), jsonl::JsonlError> {
        let bytes = serde_json::to_vec(reply).expect("reply serializes");
        jsonl::write_atomic(&self.path(key), &bytes)
    }
}
