//! Scripted mock backend.
//!
//! A script is JSON-lines, one entry per expected request, consumed in
//! order: `{"match": "optional substring", "reply": "text"}`. An entry may
//! instead carry `"error": "rate_limited" | "transport" | "auth"` to
//! simulate a failure.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatBackend, CompletionRequest, FinishReason, GatewayError, Usage};
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    RateLimited,
    Transport,
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
}

impl MockEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            pattern: None,
            reply: Some(text.into()),
            error: None,
        }
    }

    pub fn matching(pattern: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            pattern: Some(pattern.into()),
            ..Self::reply(text)
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    entries: Mutex<VecDeque<MockEntry>>,
}

impl MockBackend {
    pub fn new(entries: impl IntoIterator<Item = MockEntry>) -> Self {
        Self {
            entries: Mutex::new(entries.into_iter().collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().len()
    }
}

pub fn load_mock_script(path: &Path) -> Result<MockBackend, GatewayError> {
    let entries: Vec<MockEntry> = jsonl::read_jsonl(path).map_err(|e| match e {
        JsonlError::Io { path, source } => GatewayError::ScriptParse {
            path,
            line: 0,
            message: source.to_string(),
        },
        JsonlError::Parse {
            path,
            line,
            message,
        } => GatewayError::ScriptParse {
            path,
            line,
            message,
        },
    })?;
    for (i, e) in entries.iter().enumerate() {
        if e.reply.is_some() == e.error.is_some() {
            return Err(GatewayError::ScriptParse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "entry needs exactly one of reply or error".into(),
            });
        }
    }
    Ok(MockBackend::new(entries))
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ChatBackend for MockBackend {
    fn send(&self, req: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        let Some(entry) = entries.front() else {
            return Err(GatewayError::ScriptExhausted {
                request_tag: req.request_tag.clone(),
            });
        };
        if let Some(pattern) = &entry.pattern {
            let human = req.messages.final_human_text().unwrap_or("");
            if !human.contains(pattern.as_str()) {
                return Err(GatewayError::MockMismatch {
                    request_tag: req.request_tag.clone(),
                    expected: pattern.clone(),
                });
            }
        }
        let entry = entries.pop_front().expect("front exists");
        match (entry.reply, entry.error) {
            (_, Some(MockFailure::RateLimited)) => Err(GatewayError::RateLimited { attempts: 1 }),
            (_, Some(MockFailure::Transport)) => {
                Err(GatewayError::TransportError("scripted transport failure".into()))
            }
            (_, Some(MockFailure::Auth)) => Err(GatewayError::AuthError("scripted auth failure".into())),
            (Some(text), None) => {
                let prompt_tokens = req.messages.messages.iter().map(|m| word_count(&m.text)).sum();
                Ok(BackendReply {
                    usage: Usage {
                        prompt_tokens,
                        completion_tokens: word_count(&text),
                    },
                    text,
                    finish_reason: FinishReason::Stop,
                })
            }
            (None, None) => unreachable!("validated at load"),
        }
    }

    fn requires_ordered_dispatch(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayConfig, RetryPolicy};
    use crate::prompt::{ChatMessage, ChatTranscript, Role};

    fn req(text: &str, tag: &str) -> CompletionRequest {
        GatewayConfig::mock("x").request(
            ChatTranscript {
                messages: vec![
                    ChatMessage::new(Role::System, "s"),
                    ChatMessage::new(Role::Human, text),
                ],
            },
            tag,
        )
    }

    fn write_script(entries: &[MockEntry]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        jsonl::write_jsonl(&path, entries).unwrap();
        (dir, path)
    }

    #[test]
    fn replies_consumed_in_order() {
        let (_d, path) = write_script(&[
            MockEntry::reply("one"),
            MockEntry::reply("two"),
            MockEntry::reply("three"),
        ]);
        let gw = Gateway::from_config(&GatewayConfig::mock(&path)).unwrap();
        let texts: Vec<_> = (0..3)
            .map(|i| gw.complete(&req(&format!("q{i}"), "t")).unwrap().text)
            .collect();
        assert_eq!(texts, ["one", "two", "three"]);
        assert!(matches!(
            gw.complete(&req("q3", "t4")),
            Err(GatewayError::ScriptExhausted { request_tag }) if request_tag == "t4"
        ));
        assert_eq!(gw.concurrency(), 1);
    }

    #[test]
    fn cache_hit_on_repeat_and_distinct_temperature_keys() {
        let (dir, path) = write_script(&[MockEntry::reply("first"), MockEntry::reply("second")]);
        let mut cfg = GatewayConfig::mock(&path);
        cfg.cache_dir = Some(dir.path().join("cache"));
        let gw = Gateway::from_config(&cfg).unwrap();
        let a = gw.complete(&req("same", "t")).unwrap();
        let b = gw.complete(&req("same", "t")).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.text, b.text);
        let mut hot = req("same", "t");
        hot.temperature = 1.0;
        let c = gw.complete(&hot).unwrap();
        assert_eq!((c.text.as_str(), c.cached), ("second", false));
        let s = gw.stats();
        assert_eq!((s.cache_hits, s.cache_misses, s.backend_requests), (1, 2, 2));
    }

    #[test]
    fn match_checks_final_human_message() {
        let (_d, path) = write_script(&[
            MockEntry::matching("beside clock", "ok"),
            MockEntry::matching("elephant", "never"),
        ]);
        let gw = Gateway::from_config(&GatewayConfig::mock(&path)).unwrap();
        let seed = "people (with bounding box [0.106, 0.121, 0.412, 0.800]) beside clock (with bounding box [0.406, 0.228, 0.612, 0.754])";
        assert_eq!(gw.complete(&req(seed, "t1")).unwrap().text, "ok");
        match gw.complete(&req(seed, "rel_002")) {
            Err(GatewayError::MockMismatch { request_tag, expected }) => {
                assert_eq!(request_tag, "rel_002");
                assert_eq!(expected, "elephant");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripted_rate_limit_is_retried() {
        let (_d, path) = write_script(&[
            MockEntry {
                pattern: None,
                reply: None,
                error: Some(MockFailure::RateLimited),
            },
            MockEntry::reply("after retry"),
        ]);
        let mut cfg = GatewayConfig::mock(&path);
        cfg.retry = RetryPolicy {
            max_attempts: 2,
            backoff_base_ms: 1,
        };
        let gw = Gateway::from_config(&cfg).unwrap();
        assert_eq!(gw.complete(&req("x", "t")).unwrap().text, "after retry");
    }

    #[test]
    fn script_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"reply\": \"a\"}\n{\"nope\": 1}\n").unwrap();
        assert!(matches!(
            load_mock_script(&path),
            Err(GatewayError::ScriptParse { line: 2, .. })
        ));
        std::fs::write(&path, "{\"match\": \"a\"}\n").unwrap();
        assert!(matches!(
            load_mock_script(&path),
            Err(GatewayError::ScriptParse { line: 1, .. })
        ));
    }

    #[test]
    fn usage_ledger_lines_written() {
        let (dir, path) = write_script(&[MockEntry::reply("a b c")]);
        let mut cfg = GatewayConfig::mock(&path);
        cfg.usage_ledger = Some(dir.path().join("usage.jsonl"));
        let gw = Gateway::from_config(&cfg).unwrap();
        gw.complete(&req("four words right here", "tag-1")).unwrap();
        let lines: Vec<serde_json::Value> = jsonl::read_jsonl(&dir.path().join("usage.jsonl")).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0]["request_tag"], "tag-1");
        assert_eq!(lines[0]["completion_tokens"], 3);
        assert_eq!(lines[0]["prompt_tokens"], 5);
    }
}
