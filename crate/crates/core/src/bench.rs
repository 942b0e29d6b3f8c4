//! Yes/no benchmark construction: candidate generation, negative-type
//! classification and seeded subset sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Corpus;
use crate::dataset::{request_generation, Generation, GenerationConfig, RetryEntry};
use crate::gateway::Gateway;
use crate::jsonl::{self, JsonlError};
use crate::prompt::{render_classifier_chat, TemplateKind};
use crate::qa::{normalize_yesno, parse_classification, HallucinationType};
use crate::review::{apply_decisions, ReviewDecision, ReviewStatus};
use crate::workers::map_bounded;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("insufficient {subset} pool: have {have} kept, need {need}")]
    InsufficientPool { subset: Subset, have: usize, need: usize },
    #[error("candidate {0} violates the label/subset invariant")]
    InvalidCandidate(String),
    #[error("duplicate candidate id {0}")]
    DuplicateCandidate(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtLabel {
    Yes,
    No,
}

/// Benchmark subsets. `External` marks items imported from other
/// yes/no benchmarks and never appears in a review pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Positive,
    Category,
    Attribute,
    Relation,
    Unclassified,
    External,
}

impl Subset {
    /// Subsets shown in the review tool, in display order.
    pub const REVIEW: [Subset; 5] = [
        Self::Positive,
        Self::Category,
        Self::Attribute,
        Self::Relation,
        Self::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Category => "category",
            Self::Attribute => "attribute",
            Self::Relation => "relation",
            Self::Unclassified => "unclassified",
            Self::External => "external",
        }
    }
}

impl From<HallucinationType> for Subset {
    fn from(t: HallucinationType) -> Self {
        match t {
            HallucinationType::Category => Self::Category,
            HallucinationType::Attribute => Self::Attribute,
            HallucinationType::Relation => Self::Relation,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::REVIEW.as_slice(), &[Self::External]]
            .concat()
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown subset {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkCandidate {
    pub candidate_id: String,
    pub image_id: String,
    pub question: String,
    /// Reference answer from generation time.
    pub answer: String,
    pub gt_label: GtLabel,
    pub proposed_subset: Subset,
    #[serde(default)]
    pub review_status: ReviewStatus,
}

impl BenchmarkCandidate {
    pub fn is_consistent(&self) -> bool {
        match self.gt_label {
            GtLabel::Yes => self.proposed_subset == Subset::Positive,
            GtLabel::No => matches!(
                self.proposed_subset,
                Subset::Category | Subset::Attribute | Subset::Relation | Subset::Unclassified
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub image_id: String,
    pub question: String,
    pub gt_label: GtLabel,
    pub subset: Subset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub name: String,
    pub seed: u64,
    pub items: Vec<BenchmarkItem>,
}

impl Benchmark {
    pub fn subset_counts(&self) -> BTreeMap<Subset, usize> {
        let mut out = BTreeMap::new();
        for item in &self.items {
            *out.entry(item.subset).or_default() += 1;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<usize, BenchError> {
        Ok(jsonl::write_jsonl(path, &self.items)?)
    }

    /// Loads benchmark items; the name is the file stem.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let items = jsonl::read_jsonl(path)?;
        Ok(Self {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            seed: 0,
            items,
        })
    }
}

pub fn save_pool(path: &Path, pool: &[BenchmarkCandidate]) -> Result<usize, BenchError> {
    Ok(jsonl::write_jsonl(path, pool)?)
}

pub fn load_pool(path: &Path) -> Result<Vec<BenchmarkCandidate>, BenchError> {
    let pool: Vec<BenchmarkCandidate> = jsonl::read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for c in &pool {
        if !c.is_consistent() {
            return Err(BenchError::InvalidCandidate(c.candidate_id.clone()));
        }
        if !seen.insert(c.candidate_id.as_str()) {
            return Err(BenchError::DuplicateCandidate(c.candidate_id.clone()));
        }
    }
    Ok(pool)
}

pub fn candidate_id(relation_id: &str, k: u32) -> String {
    format!("{relation_id}-q{k}")
}

#[derive(Debug, Clone, Default)]
pub struct CandidateRun {
    /// Sorted by candidate id.
    pub candidates: Vec<BenchmarkCandidate>,
    pub dropped: BTreeMap<String, usize>,
    pub retry: Vec<RetryEntry>,
}

/// Draws `per_relation` yes/no questions for every relation. Draw `k` is
/// sent with sample index `k + 1`, so it never shares a cache entry with
/// the single dataset draw of the same prompt.
pub fn generate_candidates(
    corpus: &Corpus,
    cfg: &GenerationConfig,
    gateway: &Gateway,
    per_relation: u32,
) -> CandidateRun {
    let jobs: Vec<(usize, u32)> = (0..corpus.relations.len())
        .flat_map(|i| (0..per_relation).map(move |k| (i, k)))
        .collect();
    let outcomes = map_bounded(&jobs, gateway.concurrency(), |&(i, k)| {
        let rel = &corpus.relations[i];
        let id = candidate_id(&rel.relation_id, k);
        let tag = format!("gen-bench/{id}");
        request_generation(rel, corpus, cfg, TemplateKind::Yesno, gateway, tag, k + 1)
    });
    let mut run = CandidateRun::default();
    for (&(i, k), outcome) in jobs.iter().zip(outcomes) {
        let rel = &corpus.relations[i];
        let id = candidate_id(&rel.relation_id, k);
        match outcome {
            Generation::Qa { question, answer, .. } => {
                let v = normalize_yesno(&answer);
                if !v.confident {
                    *run.dropped.entry("ambiguous_reference".into()).or_default() += 1;
                    continue;
                }
                let (gt_label, proposed_subset) = if v.is_positive() {
                    (GtLabel::Yes, Subset::Positive)
                } else {
                    (GtLabel::No, Subset::Unclassified)
                };
                run.candidates.push(BenchmarkCandidate {
                    candidate_id: id,
                    image_id: rel.image_id.clone(),
                    question,
                    answer,
                    gt_label,
                    proposed_subset,
                    review_status: ReviewStatus::Pending,
                });
            }
            Generation::Skipped { reason, .. } => {
                *run.dropped.entry(reason.to_string()).or_default() += 1;
            }
            Generation::Failed(error) => {
                *run.dropped.entry("retryable".into()).or_default() += 1;
                run.retry.push(RetryEntry {
                    request_tag: format!("gen-bench/{id}"),
                    id,
                    error,
                });
            }
        }
    }
    run.candidates.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    run
}

#[derive(Debug, Clone, Default)]
pub struct ClassifyRun {
    pub pool: Vec<BenchmarkCandidate>,
    pub retry: Vec<RetryEntry>,
}

/// Sends every `no` candidate to the classifier in candidate-id order and
/// records the parsed type. Unparseable replies leave the candidate
/// unclassified; gateway failures leave it untouched and listed for retry.
pub fn classify_candidates(
    pool: Vec<BenchmarkCandidate>,
    cfg: &GenerationConfig,
    gateway: &Gateway,
) -> ClassifyRun {
    let mut pool = pool;
    pool.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
    let negatives: Vec<usize> = (0..pool.len())
        .filter(|&i| pool[i].gt_label == GtLabel::No)
        .collect();
    let template = cfg.templates.get(TemplateKind::Classifier);
    let replies = map_bounded(&negatives, gateway.concurrency(), |&i| {
        let c = &pool[i];
        let transcript = render_classifier_chat(template, &c.question, &c.answer);
        let req = cfg
            .model
            .request(transcript, format!("classify/{}", c.candidate_id));
        gateway.complete(&req).map(|r| r.text)
    });
    let mut retry = Vec::new();
    for (&i, reply) in negatives.iter().zip(replies) {
        match reply {
            Ok(text) => {
                pool[i].proposed_subset = parse_classification(&text)
                    .map(Subset::from)
                    .unwrap_or(Subset::Unclassified);
            }
            Err(e) => retry.push(RetryEntry {
                id: pool[i].candidate_id.clone(),
                request_tag: format!("classify/{}", pool[i].candidate_id),
                error: e.to_string(),
            }),
        }
    }
    ClassifyRun { pool, retry }
}

/// Sampling order over subsets; one RNG stream is consumed in this order.
const FINAL_ORDER: [Subset; 4] = [
    Subset::Positive,
    Subset::Category,
    Subset::Attribute,
    Subset::Relation,
];

/// Samples the final benchmark from candidates whose `review_status` is
/// already resolved. Only kept candidates are eligible.
pub fn select_benchmark(
    name: &str,
    candidates: &[BenchmarkCandidate],
    n_per_subset: usize,
    n_positive: usize,
    seed: u64,
) -> Result<Benchmark, BenchError> {
    let mut kept: BTreeMap<Subset, Vec<&BenchmarkCandidate>> = BTreeMap::new();
    for c in candidates.iter().filter(|c| c.review_status == ReviewStatus::Kept) {
        kept.entry(c.proposed_subset).or_default().push(c);
    }
    for (subset, need) in FINAL_ORDER.iter().map(|&s| (s, if s == Subset::Positive { n_positive } else { n_per_subset })) {
        let have = kept.get(&subset).map_or(0, Vec::len);
        if have < need {
            return Err(BenchError::InsufficientPool { subset, have, need });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_positive + 3 * n_per_subset);
    for subset in FINAL_ORDER {
        let need = if subset == Subset::Positive { n_positive } else { n_per_subset };
        let mut pool = kept.remove(&subset).unwrap_or_default();
        pool.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        let (chosen, _) = pool.partial_shuffle(&mut rng, need);
        let mut chosen: Vec<_> = chosen.to_vec();
        chosen.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        items.extend(chosen.into_iter().map(|c| BenchmarkItem {
            item_id: c.candidate_id.clone(),
            image_id: c.image_id.clone(),
            question: c.question.clone(),
            gt_label: c.gt_label,
            subset,
        }));
    }
    Ok(Benchmark {
        name: name.to_string(),
        seed,
        items,
    })
}

/// Applies `decisions` (last write wins) to the pool and samples the
/// benchmark. Rejected and pending candidates are never selected.
pub fn finalize(
    name: &str,
    pool: &[BenchmarkCandidate],
    decisions: &[ReviewDecision],
    n_per_subset: usize,
    n_positive: usize,
    seed: u64,
) -> Result<Benchmark, BenchError> {
    let resolved = apply_decisions(pool, decisions);
    select_benchmark(name, &resolved, n_per_subset, n_positive, seed)
}

/// Default positive count when none is configured.
pub fn default_positive_count(n_per_subset: usize) -> usize {
    3 * n_per_subset
}
