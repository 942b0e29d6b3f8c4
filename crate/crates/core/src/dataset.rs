//! Instruction-sample generation, multi-round augmentation, model template
//! rendering and JSON-lines export.
//!
//! Exported sample schema (one object per line):
//!
//! ```json
//! {"schema_version": 1, "sample_id": "rel_001", "image_id": "img_0001",
//!  "turns": [{"role": "human", "text": "...", "supervised": false},
//!            {"role": "ai", "text": "...", "supervised": true}],
//!  "seed_relation": {...}, "generator": "yesno",
//!  "provenance": "gen-dataset/rel_001"}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{build_image_context, Corpus, RelationAnnotation};
use crate::gateway::{Gateway, ModelParams};
use crate::jsonl::{self, JsonlError};
use crate::prompt::{render_chat, select_template, PromptError, TemplateKind, TemplateSet};
use crate::qa::{detect_bbox_leak, GenerationOutcome, MalformedReason, QaParser};
use crate::workers::map_bounded;

pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("companion conversation for image {image_id} is malformed: {reason}")]
    MalformedCompanion { image_id: String, reason: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    Human,
    Ai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub role: TurnRole,
    pub text: String,
    /// Only answer turns carry training loss.
    #[serde(default)]
    pub supervised: bool,
}

impl ConversationTurn {
    pub fn human(text: impl Into<String>) -> Self {
        Self {
            role: TurnRole::Human,
            text: text.into(),
            supervised: false,
        }
    }

    pub fn ai(text: impl Into<String>) -> Self {
        Self {
            role: TurnRole::Ai,
            text: text.into(),
            supervised: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub schema_version: u32,
    pub sample_id: String,
    pub image_id: String,
    pub turns: Vec<ConversationTurn>,
    pub seed_relation: RelationAnnotation,
    pub generator: TemplateKind,
    pub provenance: String,
}

impl InstructionSample {
    /// Consecutive (question, answer) pairs.
    pub fn rounds(&self) -> Vec<(&str, &str)> {
        self.turns
            .chunks(2)
            .filter_map(|pair| match pair {
                [q, a] if q.role == TurnRole::Human && a.role == TurnRole::Ai => {
                    Some((q.text.as_str(), a.text.as_str()))
                }
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkipReason {
    #[serde(rename = "llm_skip")]
    LlmSkip,
    #[serde(rename = "malformed")]
    Malformed,
    #[serde(rename = "bbox_leak")]
    BboxLeak,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LlmSkip => "llm_skip",
            Self::Malformed => "malformed",
            Self::BboxLeak => "bbox_leak",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum SampleOutcome {
    Generated(InstructionSample),
    Skipped {
        reason: SkipReason,
        detail: Option<MalformedReason>,
    },
    /// Gateway failure; the relation belongs in the retry manifest.
    Retryable { error: String },
}

/// Settings for one generation stage.
#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub kinds: BTreeSet<TemplateKind>,
    pub overlap_threshold: f64,
    pub run_seed: u64,
    pub templates: TemplateSet,
    pub parser: QaParser,
    pub model: ModelParams,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            kinds: BTreeSet::from([TemplateKind::Yesno, TemplateKind::Wh]),
            overlap_threshold: crate::annotation::DEFAULT_OVERLAP_THRESHOLD,
            run_seed: 0,
            templates: TemplateSet::builtin(),
            parser: QaParser::default(),
            model: ModelParams::default(),
        }
    }
}

/// First eight bytes of SHA-256 of `s`, little endian.
pub fn stable_hash64(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-relation seed, independent of processing order.
pub fn relation_seed(relation_id: &str, run_seed: u64) -> u64 {
    stable_hash64(relation_id) ^ run_seed
}

/// Outcome of sending a generator prompt for one relation.
pub(crate) enum Generation {
    Qa {
        kind: TemplateKind,
        question: String,
        answer: String,
        request_tag: String,
    },
    Skipped {
        reason: SkipReason,
        detail: Option<MalformedReason>,
    },
    Failed(String),
}

pub(crate) fn request_generation(
    rel: &RelationAnnotation,
    corpus: &Corpus,
    cfg: &GenerationConfig,
    kind: TemplateKind,
    gateway: &Gateway,
    request_tag: String,
    sample_index: u32,
) -> Generation {
    let ctx = build_image_context(corpus, rel, cfg.overlap_threshold);
    let transcript = render_chat(cfg.templates.get(kind), &ctx, rel);
    let mut req = cfg.model.request(transcript, request_tag.clone());
    req.sample_index = sample_index;
    let resp = match gateway.complete(&req) {
        Ok(r) => r,
        Err(e) => return Generation::Failed(e.to_string()),
    };
    match cfg.parser.parse_generation(&resp.text) {
        GenerationOutcome::Skip => Generation::Skipped {
            reason: SkipReason::LlmSkip,
            detail: None,
        },
        GenerationOutcome::Malformed(m) => Generation::Skipped {
            reason: SkipReason::Malformed,
            detail: Some(m),
        },
        GenerationOutcome::Parsed(p) if detect_bbox_leak(&p.question) || detect_bbox_leak(&p.answer) => {
            Generation::Skipped {
                reason: SkipReason::BboxLeak,
                detail: None,
            }
        }
        GenerationOutcome::Parsed(p) => Generation::Qa {
            kind,
            question: p.question,
            answer: p.answer,
            request_tag,
        },
    }
}

/// Builds one two-turn sample (question, supervised answer) for `rel`.
pub fn generate_sample(
    rel: &RelationAnnotation,
    corpus: &Corpus,
    cfg: &GenerationConfig,
    gateway: &Gateway,
) -> Result<SampleOutcome, DatasetError> {
    let kind = select_template(&cfg.kinds, relation_seed(&rel.relation_id, cfg.run_seed))?;
    let tag = format!("gen-dataset/{}", rel.relation_id);
    Ok(match request_generation(rel, corpus, cfg, kind, gateway, tag, 0) {
        Generation::Qa {
            kind,
            question,
            answer,
            request_tag,
        } => SampleOutcome::Generated(InstructionSample {
            schema_version: SAMPLE_SCHEMA_VERSION,
            sample_id: rel.relation_id.clone(),
            image_id: rel.image_id.clone(),
            turns: vec![ConversationTurn::human(question), ConversationTurn::ai(answer)],
            seed_relation: rel.clone(),
            generator: kind,
            provenance: request_tag,
        }),
        Generation::Skipped { reason, detail } => SampleOutcome::Skipped { reason, detail },
        Generation::Failed(error) => SampleOutcome::Retryable { error },
    })
}

/// Companion conversations keyed by image id.
pub type Companions = BTreeMap<String, Vec<Vec<ConversationTurn>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompanionLine {
    image_id: String,
    turns: Vec<ConversationTurn>,
}

fn check_companion(image_id: &str, turns: &[ConversationTurn]) -> Result<(), DatasetError> {
    let fail = |reason: &str| {
        Err(DatasetError::MalformedCompanion {
            image_id: image_id.to_string(),
            reason: reason.to_string(),
        })
    };
    if turns.is_empty() {
        return fail("no turns");
    }
    for (i, t) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { TurnRole::Human } else { TurnRole::Ai };
        if t.role != expected {
            return fail(&format!("turn {i} should be {expected:?}"));
        }
    }
    if !turns.len().is_multiple_of(2) {
        return fail("ends with an unanswered human turn");
    }
    Ok(())
}

/// Reads a companion file: one `{"image_id", "turns"}` object per line.
pub fn load_companions(path: &Path) -> Result<Companions, DatasetError> {
    let lines: Vec<CompanionLine> = jsonl::read_jsonl(path)?;
    let mut out = Companions::new();
    for line in lines {
        check_companion(&line.image_id, &line.turns)?;
        out.entry(line.image_id).or_default().push(line.turns);
    }
    Ok(out)
}

/// Appends the image's companion conversations after the generated turns,
/// supervising answer turns only.
pub fn augment_with_multiround(
    mut sample: InstructionSample,
    companions: &Companions,
) -> Result<InstructionSample, DatasetError> {
    let Some(convs) = companions.get(&sample.image_id) else {
        return Ok(sample);
    };
    for conv in convs {
        check_companion(&sample.image_id, conv)?;
        sample.turns.extend(conv.iter().map(|t| ConversationTurn {
            role: t.role,
            text: t.text.clone(),
            supervised: t.role == TurnRole::Ai,
        }));
    }
    Ok(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTemplateId {
    LlavaLlama2,
    MplugOwl,
    Instructblip,
}

impl ModelTemplateId {
    pub const ALL: [ModelTemplateId; 3] = [Self::LlavaLlama2, Self::MplugOwl, Self::Instructblip];
}

pub const IMAGE_TOKEN: &str = "<image>";

const LLAVA_SYSTEM: &str = "You are a helpful language and vision assistant. You are able to understand the visual content that the user provides, and assist the user with a variety of tasks using natural language.";
const MPLUG_PREAMBLE: &str = "The following is a conversation between a curious human and AI assistant. The assistant gives helpful, detailed, and polite answers to the user's questions.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedConversation {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Substitutes the sample's rounds into the model's conversation template.
///
/// InstructBLIP only takes a single round; extra rounds are dropped and
/// reported in `warnings`.
pub fn render_for_model(sample: &InstructionSample, template: ModelTemplateId) -> RenderedConversation {
    let rounds = sample.rounds();
    let mut warnings = Vec::new();
    let text = match template {
        ModelTemplateId::LlavaLlama2 => {
            let mut out = String::new();
            for (i, (q, a)) in rounds.iter().enumerate() {
                if i == 0 {
                    out.push_str(&format!(
                        "[INST] <<SYS>> {LLAVA_SYSTEM} <</SYS>> {IMAGE_TOKEN} {q} [/INST] {a} </s>"
                    ));
                } else {
                    out.push_str(&format!("<s>[INST] {q} [/INST] {a} </s>"));
                }
            }
            out
        }
        ModelTemplateId::MplugOwl => {
            let mut out = format!("{MPLUG_PREAMBLE}\nHuman: {IMAGE_TOKEN}");
            for (q, a) in &rounds {
                out.push_str(&format!("\nHuman: {q}\nAI: {a}"));
            }
            out
        }
        ModelTemplateId::Instructblip => {
            if rounds.len() > 1 {
                let msg = format!(
                    "instructblip supports a single round; dropped {} extra round(s) of sample {}",
                    rounds.len() - 1,
                    sample.sample_id
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            match rounds.first() {
                Some((q, a)) => format!("{IMAGE_TOKEN} {q} {a}"),
                None => String::new(),
            }
        }
    };
    RenderedConversation { text, warnings }
}

pub fn export_jsonl(samples: &[InstructionSample], path: &Path) -> Result<usize, DatasetError> {
    Ok(jsonl::write_jsonl(path, samples)?)
}

pub fn import_jsonl(path: &Path) -> Result<Vec<InstructionSample>, DatasetError> {
    Ok(jsonl::read_jsonl(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryEntry {
    pub id: String,
    pub request_tag: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetRun {
    /// Sorted by sample id.
    pub samples: Vec<InstructionSample>,
    pub skipped: BTreeMap<String, usize>,
    pub retry: Vec<RetryEntry>,
    pub processed: usize,
}

/// Generates a sample for every relation in the corpus using the gateway's
/// concurrency, then augments and sorts the results.
pub fn generate_dataset(
    corpus: &Corpus,
    cfg: &GenerationConfig,
    gateway: &Gateway,
    companions: Option<&Companions>,
) -> Result<DatasetRun, DatasetError> {
    if cfg.kinds.is_empty() {
        return Err(PromptError::EmptyPool.into());
    }
    let outcomes = map_bounded(&corpus.relations, gateway.concurrency(), |rel| {
        generate_sample(rel, corpus, cfg, gateway)
    });
    let mut run = DatasetRun {
        processed: corpus.relations.len(),
        ..DatasetRun::default()
    };
    for (rel, outcome) in corpus.relations.iter().zip(outcomes) {
        match outcome? {
            SampleOutcome::Generated(sample) => {
                let sample = match companions {
                    Some(c) => augment_with_multiround(sample, c)?,
                    None => sample,
                };
                run.samples.push(sample);
            }
            SampleOutcome::Skipped { reason, .. } => {
                *run.skipped.entry(reason.to_string()).or_default() += 1;
            }
            SampleOutcome::Retryable { error } => {
                *run.skipped.entry("retryable".into()).or_default() += 1;
                run.retry.push(RetryEntry {
                    id: rel.relation_id.clone(),
                    request_tag: format!("gen-dataset/{}", rel.relation_id),
                    error,
                });
            }
        }
    }
    run.samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(run)
}
