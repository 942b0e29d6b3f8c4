//! Prompt templates and chat transcript rendering.
//!
//! Templates are TOML assets (see `assets/templates/`) with a `system`
//! string and an ordered `[[few_shot]]` array of `human`/`ai` pairs. The
//! builtin set is compiled in from those files; [`TemplateSet::load_dir`]
//! reads replacements from disk.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{ImageContext, RelationAnnotation};
use crate::geometry::BoundingBox;

pub const IMAGE_CONTENT_HEADER: &str = "IMAGE_CONTENT";
pub const CAPTIONS_HEADER: &str = "1. The image can be generally describe as:";
pub const OBJECTS_HEADER: &str = "2. There are some objects in this image:";
pub const REGIONS_HEADER: &str =
    "3. There are some regional description that are overlapped with the subject and the object";
pub const SEED_LEAD_IN: &str =
    "Please generate the question-answer pair based on the following relation ship:";

const BULLET_INDENT: &str = "   - ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template pool is empty")]
    EmptyPool,
    #[error("unknown template kind {0:?}")]
    UnknownKind(String),
    #[error("template {path}: {message}")]
    InvalidTemplate { path: String, message: String },
    #[error("reading template {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Yesno,
    Wh,
    Classifier,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [Self::Yesno, Self::Wh, Self::Classifier];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Yesno => "yesno",
            Self::Wh => "wh",
            Self::Classifier => "classifier",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PromptError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub human: String,
    pub ai: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub template_id: TemplateKind,
    pub version: u32,
    #[serde(rename = "system")]
    pub system_text: String,
    #[serde(default)]
    pub few_shot: Vec<FewShotExample>,
}

impl PromptTemplate {
    pub fn parse(source_name: &str, text: &str) -> Result<Self, PromptError> {
        let invalid = |message: String| PromptError::InvalidTemplate {
            path: source_name.to_string(),
            message,
        };
        let t: PromptTemplate = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        if t.system_text.trim().is_empty() {
            return Err(invalid("system text is empty".into()));
        }
        for (i, ex) in t.few_shot.iter().enumerate() {
            if ex.human.trim().is_empty() || ex.ai.trim().is_empty() {
                return Err(invalid(format!("few-shot example {i} has an empty side")));
            }
            if t.template_id == TemplateKind::Classifier
                && !["1.", "2.", "3."].iter().any(|p| ex.ai.starts_with(p))
            {
                return Err(invalid(format!(
                    "classifier example {i} must start with 1., 2. or 3."
                )));
            }
        }
        Ok(t)
    }
}

/// The three templates a pipeline run uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub yesno: PromptTemplate,
    pub wh: PromptTemplate,
    pub classifier: PromptTemplate,
}

const BUILTIN_YESNO: &str = include_str!("../assets/templates/yesno.toml");
const BUILTIN_WH: &str = include_str!("../assets/templates/wh.toml");
const BUILTIN_CLASSIFIER: &str = include_str!("../assets/templates/classifier.toml");

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            yesno: PromptTemplate::parse("yesno.toml", BUILTIN_YESNO).expect("builtin yesno"),
            wh: PromptTemplate::parse("wh.toml", BUILTIN_WH).expect("builtin wh"),
            classifier: PromptTemplate::parse("classifier.toml", BUILTIN_CLASSIFIER)
                .expect("builtin classifier"),
        }
    }

    /// Reads `yesno.toml`, `wh.toml` and `classifier.toml` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |kind: TemplateKind| -> Result<PromptTemplate, PromptError> {
            let path = dir.join(format!("{kind}.toml"));
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.clone(),
                source,
            })?;
            let t = PromptTemplate::parse(&path.display().to_string(), &text)?;
            if t.template_id != kind {
                return Err(PromptError::InvalidTemplate {
                    path: path.display().to_string(),
                    message: format!("declares template_id {} but expected {kind}", t.template_id),
                });
            }
            Ok(t)
        };
        Ok(Self {
            yesno: load(TemplateKind::Yesno)?,
            wh: load(TemplateKind::Wh)?,
            classifier: load(TemplateKind::Classifier)?,
        })
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        match kind {
            TemplateKind::Yesno => &self.yesno,
            TemplateKind::Wh => &self.wh,
            TemplateKind::Classifier => &self.classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
    Ai,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::Human => "human",
            Role::Ai => "ai",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    /// Image attached to a human message, for endpoints that accept one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

impl ChatMessage {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            image_url: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("transcript is empty")]
    Empty,
    #[error("message {0} has an unexpected role")]
    RoleOrder(usize),
    #[error("transcript must end with a human message")]
    NotEndingWithHuman,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChatTranscript {
    pub messages: Vec<ChatMessage>,
}

impl ChatTranscript {
    /// A system message (optional only for bare single-question requests),
    /// then strictly alternating human/ai turns ending on a human turn.
    pub fn validate(&self) -> Result<(), TranscriptError> {
        let first = self.messages.first().ok_or(TranscriptError::Empty)?;
        let offset = usize::from(first.role == Role::System);
        for (i, m) in self.messages.iter().enumerate().skip(offset) {
            let expected = if (i - offset) % 2 == 0 {
                Role::Human
            } else {
                Role::Ai
            };
            if m.role != expected {
                return Err(TranscriptError::RoleOrder(i));
            }
        }
        if self.messages.last().map(|m| m.role) != Some(Role::Human) {
            return Err(TranscriptError::NotEndingWithHuman);
        }
        Ok(())
    }

    pub fn final_human_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Human)
            .map(|m| m.text.as_str())
    }

    /// Plain-text dump used for golden files: each message as a
    /// `=== role ===` header line followed by its text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str("=== ");
            out.push_str(m.role.as_str());
            out.push_str(" ===\n");
            out.push_str(&m.text);
            out.push('\n');
        }
        out
    }
}

/// Formats a coordinate with exactly three decimals, rounding half up.
pub fn format_coord(v: f64) -> String {
    let milli = (v * 1000.0 + 0.5 + 1e-9).floor() as i64;
    format!("{}.{:03}", milli / 1000, milli % 1000)
}

pub fn format_box(b: &BoundingBox) -> String {
    let [x1, y1, x2, y2] = b.coords();
    format!(
        "[{}, {}, {}, {}]",
        format_coord(x1),
        format_coord(y1),
        format_coord(x2),
        format_coord(y2)
    )
}

fn push_section<'a>(out: &mut String, header: &str, bullets: impl Iterator<Item = String> + 'a) {
    out.push_str("\n\n");
    out.push_str(header);
    for b in bullets {
        out.push_str("\n\n");
        out.push_str(BULLET_INDENT);
        out.push_str(&b);
    }
}

/// The `IMAGE_CONTENT` block with its three numbered sections.
pub fn render_image_content(ctx: &ImageContext) -> String {
    let mut out = String::from(IMAGE_CONTENT_HEADER);
    push_section(&mut out, CAPTIONS_HEADER, ctx.captions.iter().cloned());
    push_section(
        &mut out,
        OBJECTS_HEADER,
        ctx.objects
            .iter()
            .map(|o| format!("{} {}", o.category, format_box(&o.bbox))),
    );
    push_section(
        &mut out,
        REGIONS_HEADER,
        ctx.regions
            .iter()
            .map(|r| format!("{} {}", r.text, format_box(&r.bbox))),
    );
    out
}

/// `{subject} (with bounding box [...]) {predicate} {object} (with bounding box [...])`
pub fn render_relation_line(rel: &RelationAnnotation) -> String {
    format!(
        "{} (with bounding box {}) {} {} (with bounding box {})",
        rel.subject.category,
        format_box(&rel.subject.bbox),
        rel.predicate,
        rel.object.category,
        format_box(&rel.object.bbox)
    )
}

/// The seed request lead-in followed by the relation line.
pub fn render_seed_request(rel: &RelationAnnotation) -> String {
    format!("{SEED_LEAD_IN}\n\n{}", render_relation_line(rel))
}

/// The final human message of a generator transcript.
pub fn render_generation_input(ctx: &ImageContext, rel: &RelationAnnotation) -> String {
    format!("{}\n\n{}", render_image_content(ctx), render_seed_request(rel))
}

/// The final human message of a classifier transcript.
pub fn render_qa_pair(question: &str, answer: &str) -> String {
    format!("Question: {question}\n\nAnswer: {answer}")
}

/// Uniform seeded draw from `kinds` (taken in their canonical order).
pub fn select_template(kinds: &BTreeSet<TemplateKind>, seed: u64) -> Result<TemplateKind, PromptError> {
    if kinds.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rng.random_range(0..kinds.len());
    Ok(*kinds.iter().nth(idx).expect("index in range"))
}

fn with_few_shot(template: &PromptTemplate, final_human: String) -> ChatTranscript {
    let mut messages = vec![ChatMessage::new(Role::System, template.system_text.clone())];
    for ex in &template.few_shot {
        messages.push(ChatMessage::new(Role::Human, ex.human.clone()));
        messages.push(ChatMessage::new(Role::Ai, ex.ai.clone()));
    }
    messages.push(ChatMessage::new(Role::Human, final_human));
    ChatTranscript { messages }
}

/// System prompt, few-shot pairs, then the image content and seed relation.
pub fn render_chat(
    template: &PromptTemplate,
    ctx: &ImageContext,
    rel: &RelationAnnotation,
) -> ChatTranscript {
    with_few_shot(template, render_generation_input(ctx, rel))
}

/// Classifier transcript whose final human message is the QA pair.
pub fn render_classifier_chat(template: &PromptTemplate, question: &str, answer: &str) -> ChatTranscript {
    with_few_shot(template, render_qa_pair(question, answer))
}
