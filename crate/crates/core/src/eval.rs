//! Scoring yes/no responses against a benchmark.
//!
//! "yes" is the positive class. A per-subset FP rate is the share of that
//! subset's items answered "yes"; every item in the category, attribute and
//! relation subsets has ground truth "no".

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{Benchmark, BenchmarkItem, GtLabel, Subset};
use crate::dataset::RetryEntry;
use crate::gateway::{Gateway, ModelParams};
use crate::jsonl::{self, JsonlError};
use crate::prompt::{ChatMessage, ChatTranscript, Role};
use crate::qa::normalize_yesno;
use crate::workers::map_bounded;

/// Subsets with an FP column, in report order.
pub const FP_SUBSETS: [Subset; 3] = [Subset::Category, Subset::Attribute, Subset::Relation];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no response for item {0}")]
    MissingResponse(String),
    #[error("more than one response for item {0}")]
    DuplicateResponse(String),
    #[error("response for unknown item {0}")]
    UnknownItem(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("external benchmark line {line}: {message}")]
    External { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub item_id: String,
    pub response_text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Responses that did not open with yes/no; scored by fallback.
    pub ambiguous: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_subset_fp: BTreeMap<Subset, f64>,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(benchmark: &Benchmark, responses: &[ResponseRecord], model: &str) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(responses.len());
    for r in responses {
        if by_id.insert(&r.item_id, &r.response_text).is_some() {
            return Err(EvalError::DuplicateResponse(r.item_id.clone()));
        }
    }
    let known: std::collections::HashSet<&str> = benchmark.items.iter().map(|i| i.item_id.as_str()).collect();
    if let Some(r) = responses.iter().find(|r| !known.contains(r.item_id.as_str())) {
        return Err(EvalError::UnknownItem(r.item_id.clone()));
    }

    let mut counts = ConfusionCounts::default();
    let mut subset_yes: BTreeMap<Subset, (u64, u64)> = FP_SUBSETS.iter().map(|&s| (s, (0, 0))).collect();
    for item in &benchmark.items {
        let text = by_id
            .get(item.item_id.as_str())
            .ok_or_else(|| EvalError::MissingResponse(item.item_id.clone()))?;
        let v = normalize_yesno(text);
        if !v.confident {
            counts.ambiguous += 1;
        }
        let said_yes = v.is_positive();
        match (item.gt_label, said_yes) {
            (GtLabel::Yes, true) => counts.tp += 1,
            (GtLabel::Yes, false) => counts.fn_ += 1,
            (GtLabel::No, true) => counts.fp += 1,
            (GtLabel::No, false) => counts.tn += 1,
        }
        if let Some((yes, n)) = subset_yes.get_mut(&item.subset) {
            *n += 1;
            *yes += u64::from(said_yes);
        }
    }
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        benchmark: benchmark.name.clone(),
        model: model.to_string(),
        precision,
        recall,
        f1,
        per_subset_fp: subset_yes.into_iter().map(|(s, (yes, n))| (s, ratio(yes, n))).collect(),
        counts,
    })
}

/// A fraction as a percentage with one decimal, rounded half up
/// (0.812 → "81.2", 0.0 → "0.0").
pub fn display_percent(x: f64) -> String {
    let tenths = (x * 1000.0 + 0.5 + 1e-9).floor() as i64;
    let sign = if tenths < 0 { "-" } else { "" };
    let t = tenths.abs();
    format!("{sign}{}.{}", t / 10, t % 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStyle {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

fn fp_of(r: &EvalReport, s: Subset) -> f64 {
    r.per_subset_fp.get(&s).copied().unwrap_or(0.0)
}

pub fn format_report(r: &EvalReport, style: ReportStyle) -> String {
    format_reports(std::slice::from_ref(r), style)
}

/// Renders one row per report.
pub fn format_reports(reports: &[EvalReport], style: ReportStyle) -> String {
    match style {
        ReportStyle::Markdown => {
            let mut out = String::from("| Model | FP_cat | FP_attr | FP_rela | F1 |\n|---|---|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    r.model,
                    display_percent(fp_of(r, Subset::Category)),
                    display_percent(fp_of(r, Subset::Attribute)),
                    display_percent(fp_of(r, Subset::Relation)),
                    display_percent(r.f1),
                ));
            }
            out.push('\n');
            for r in reports {
                out.push_str(&format!("Ambiguous responses ({}): {}\n", r.model, r.counts.ambiguous));
            }
            out
        }
        ReportStyle::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in reports {
                w.serialize(CsvRow::from(r)).expect("in-memory csv write");
            }
            String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf8")
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    model: String,
    benchmark: String,
    precision: f64,
    recall: f64,
    f1: f64,
    fp_category: f64,
    fp_attribute: f64,
    fp_relation: f64,
    tp: u64,
    fp: u64,
    tn: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    ambiguous: u64,
    #[serde(rename = "FP_cat")]
    fp_cat_display: String,
    #[serde(rename = "FP_attr")]
    fp_attr_display: String,
    #[serde(rename = "FP_rela")]
    fp_rela_display: String,
    #[serde(rename = "F1")]
    f1_display: String,
}

impl From<&EvalReport> for CsvRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            model: r.model.clone(),
            benchmark: r.benchmark.clone(),
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            fp_category: fp_of(r, Subset::Category),
            fp_attribute: fp_of(r, Subset::Attribute),
            fp_relation: fp_of(r, Subset::Relation),
            tp: r.counts.tp,
            fp: r.counts.fp,
            tn: r.counts.tn,
            fn_: r.counts.fn_,
            ambiguous: r.counts.ambiguous,
            fp_cat_display: display_percent(fp_of(r, Subset::Category)),
            fp_attr_display: display_percent(fp_of(r, Subset::Attribute)),
            fp_rela_display: display_percent(fp_of(r, Subset::Relation)),
            f1_display: display_percent(r.f1),
        }
    }
}

/// Parses CSV produced by [`format_reports`].
pub fn parse_csv_reports(text: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
            Ok(EvalReport {
                benchmark: row.benchmark,
                model: row.model,
                precision: row.precision,
                recall: row.recall,
                f1: row.f1,
                per_subset_fp: BTreeMap::from([
                    (Subset::Category, row.fp_category),
                    (Subset::Attribute, row.fp_attribute),
                    (Subset::Relation, row.fp_relation),
                ]),
                counts: ConfusionCounts {
                    tp: row.tp,
                    fp: row.fp,
                    tn: row.tn,
                    fn_: row.fn_,
                    ambiguous: row.ambiguous,
                },
            })
        })
        .collect()
}

pub fn load_responses(path: &Path) -> Result<Vec<ResponseRecord>, EvalError> {
    Ok(jsonl::read_jsonl(path)?)
}

pub fn save_responses(path: &Path, records: &[ResponseRecord]) -> Result<usize, EvalError> {
    Ok(jsonl::write_jsonl(path, records)?)
}

#[derive(Debug, Deserialize)]
struct ExternalLine {
    question_id: serde_json::Value,
    image: String,
    text: String,
    label: String,
}

/// Imports a POPE-style file (`question_id`, `image`, `text`, `label`
/// per line). Every item lands in the `external` subset.
pub fn import_external(path: &Path) -> Result<Benchmark, EvalError> {
    let lines: Vec<ExternalLine> = jsonl::read_jsonl(path)?;
    let items = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let gt_label = match l.label.trim().to_lowercase().as_str() {
                "yes" => GtLabel::Yes,
                "no" => GtLabel::No,
                other => {
                    return Err(EvalError::External {
                        line: i + 1,
                        message: format!("label {other:?} is not yes/no"),
                    })
                }
            };
            let item_id = match l.question_id {
                serde_json::Value::String(s) => s,
                v => v.to_string(),
            };
            let image_id = Path::new(&l.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(l.image);
            Ok(BenchmarkItem {
                item_id,
                image_id,
                question: l.text,
                gt_label,
                subset: Subset::External,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Benchmark {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: 0,
        items,
    })
}

/// How the evaluated model is queried. `image_url_template` has
/// `{image_id}` substituted and is attached to the question message.
#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub model: ModelParams,
    pub image_url_template: String,
}

#[derive(Debug, Clone, Default)]
pub struct CollectRun {
    /// Sorted by item id.
    pub records: Vec<ResponseRecord>,
    pub retry: Vec<RetryEntry>,
}

pub fn collect_responses(benchmark: &Benchmark, cfg: &CollectConfig, gateway: &Gateway) -> CollectRun {
    let mut items: Vec<&BenchmarkItem> = benchmark.items.iter().collect();
    items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let replies = map_bounded(&items, gateway.concurrency(), |item| {
        let mut msg = ChatMessage::new(Role::Human, item.question.clone());
        msg.image_url = Some(cfg.image_url_template.replace("{image_id}", &item.image_id));
        let req = cfg
            .model
            .request(ChatTranscript { messages: vec![msg] }, format!("collect/{}", item.item_id));
        gateway.complete(&req).map(|r| r.text)
    });
    let mut run = CollectRun::default();
    for (item, reply) in items.into_iter().zip(replies) {
        match reply {
            Ok(response_text) => run.records.push(ResponseRecord {
                item_id: item.item_id.clone(),
                response_text,
            }),
            Err(e) => run.retry.push(RetryEntry {
                id: item.item_id.clone(),
                request_tag: format!("collect/{}", item.item_id),
                error: e.to_string(),
            }),
        }
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, gt: GtLabel, subset: Subset) -> BenchmarkItem {
        BenchmarkItem {
            item_id: id.into(),
            image_id: "img".into(),
            question: "q?".into(),
            gt_label: gt,
            subset,
        }
    }

    fn resp(id: &str, text: &str) -> ResponseRecord {
        ResponseRecord {
            item_id: id.into(),
            response_text: text.into(),
        }
    }

    fn bench(items: Vec<BenchmarkItem>) -> Benchmark {
        Benchmark {
            name: "b".into(),
            seed: 0,
            items,
        }
    }

    #[test]
    fn hand_counted_case() {
        let b = bench(vec![
            item("1", GtLabel::Yes, Subset::Positive),
            item("2", GtLabel::Yes, Subset::Positive),
            item("3", GtLabel::No, Subset::Category),
            item("4", GtLabel::No, Subset::Relation),
        ]);
        let rs = [resp("1", "Yes."), resp("2", "yes"), resp("3", "No."), resp("4", "Yes, it is.")];
        let r = score(&b, &rs, "m").unwrap();
        assert_eq!(
            (r.counts.tp, r.counts.fn_, r.counts.tn, r.counts.fp),
            (2, 0, 1, 1)
        );
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert_eq!(r.per_subset_fp[&Subset::Relation], 1.0);
        assert_eq!(r.per_subset_fp[&Subset::Category], 0.0);
        assert_eq!(r.per_subset_fp[&Subset::Attribute], 0.0);
    }

    #[test]
    fn response_set_errors() {
        let b = bench(vec![item("1", GtLabel::Yes, Subset::Positive)]);
        assert!(matches!(score(&b, &[], "m"), Err(EvalError::MissingResponse(_))));
        assert!(matches!(
            score(&b, &[resp("1", "yes"), resp("1", "no")], "m"),
            Err(EvalError::DuplicateResponse(_))
        ));
        assert!(matches!(
            score(&b, &[resp("1", "yes"), resp("2", "no")], "m"),
            Err(EvalError::UnknownItem(_))
        ));
    }

    #[test]
    fn display_rounding() {
        assert_eq!(display_percent(406.0 / 500.0), "81.2");
        assert_eq!(display_percent(0.718), "71.8");
        assert_eq!(display_percent(0.0), "0.0");
        assert_eq!(display_percent(1.0), "100.0");
        assert_eq!(display_percent(0.0005), "0.1");
        assert_eq!(display_percent(0.00049), "0.0");
    }

    #[test]
    fn csv_round_trip() {
        let b = bench(vec![
            item("1", GtLabel::Yes, Subset::Positive),
            item("2", GtLabel::No, Subset::Attribute),
            item("3", GtLabel::No, Subset::Attribute),
        ]);
        let r = score(&b, &[resp("1", "maybe"), resp("2", "yes"), resp("3", "no")], "model, v2").unwrap();
        let text = format_report(&r, ReportStyle::Csv);
        assert_eq!(parse_csv_reports(&text).unwrap(), vec![r]);
    }

    #[test]
    fn empty_report_renders_zeros() {
        let r = score(&bench(vec![]), &[], "m").unwrap();
        let md = format_report(&r, ReportStyle::Markdown);
        assert!(md.contains("| m | 0.0 | 0.0 | 0.0 | 0.0 |"));
    }
}
