//! Parsing of generator output, classifier replies and yes/no answers.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Phrases treated as a refusal when a generation carries no question.
pub const DEFAULT_REFUSAL_PHRASES: &[&str] = &[
    "refuse to ask",
    "not worth a question",
    "i will not ask",
    "i won't ask",
    "i cannot ask",
    "i can't ask",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedGeneration {
    pub analysis: String,
    pub question: String,
    pub answer: String,
}

impl ParsedGeneration {
    /// Renders back into the fixed `Question:` / `Answer:` format.
    pub fn to_fixed_format(&self) -> String {
        let qa = format!("Question: {}\n\nAnswer: {}", self.question, self.answer);
        if self.analysis.is_empty() {
            qa
        } else {
            format!("{}\n\n{qa}", self.analysis)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedReason {
    NoQuestion,
    NoAnswer,
    EmptyField,
}

impl MalformedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoQuestion => "no question",
            Self::NoAnswer => "no answer",
            Self::EmptyField => "empty field",
        }
    }
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerationOutcome {
    Parsed(ParsedGeneration),
    Skip,
    Malformed(MalformedReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationType {
    Category,
    Attribute,
    Relation,
}

impl HallucinationType {
    pub const ALL: [HallucinationType; 3] = [Self::Category, Self::Attribute, Self::Relation];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Category => "category",
            Self::Attribute => "attribute",
            Self::Relation => "relation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YesNoVerdict {
    pub verdict: Verdict,
    /// False when the verdict was inferred from text not opening with yes/no.
    pub confident: bool,
}

impl YesNoVerdict {
    pub fn is_positive(&self) -> bool {
        self.verdict == Verdict::Positive
    }
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let trimmed = line.trim_start();
    let head = trimmed.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix)
        .then(|| &trimmed[prefix.len()..])
}

fn is_skip_line(line: &str) -> bool {
    let core = line.trim().trim_matches(|c: char| !c.is_alphanumeric());
    core.eq_ignore_ascii_case("skip")
}

/// Generation parser with a configurable refusal phrase list.
#[derive(Debug, Clone)]
pub struct QaParser {
    refusal_phrases: Vec<String>,
}

impl Default for QaParser {
    fn default() -> Self {
        Self::new(DEFAULT_REFUSAL_PHRASES.iter().map(|s| s.to_string()))
    }
}

impl QaParser {
    pub fn new(phrases: impl IntoIterator<Item = String>) -> Self {
        Self {
            refusal_phrases: phrases.into_iter().map(|p| p.to_lowercase()).collect(),
        }
    }

    /// Extracts the analysis and the final `Question:`/`Answer:` pair.
    ///
    /// A standalone `skip` line anywhere means skip. A text with no
    /// question line that contains a refusal phrase is also a skip.
    pub fn parse_generation(&self, text: &str) -> GenerationOutcome {
        let lines: Vec<&str> = text.lines().collect();
        if lines.iter().any(|l| is_skip_line(l)) {
            return GenerationOutcome::Skip;
        }
        let Some(q_idx) = lines
            .iter()
            .rposition(|l| strip_prefix_ci(l, "question:").is_some())
        else {
            let lower = text.to_lowercase();
            if self.refusal_phrases.iter().any(|p| lower.contains(p.as_str())) {
                return GenerationOutcome::Skip;
            }
            return GenerationOutcome::Malformed(MalformedReason::NoQuestion);
        };
        let Some(a_off) = lines[q_idx + 1..]
            .iter()
            .position(|l| strip_prefix_ci(l, "answer:").is_some())
        else {
            return GenerationOutcome::Malformed(MalformedReason::NoAnswer);
        };
        let a_idx = q_idx + 1 + a_off;

        let mut question_parts = vec![strip_prefix_ci(lines[q_idx], "question:").unwrap().trim()];
        question_parts.extend(lines[q_idx + 1..a_idx].iter().map(|l| l.trim()));
        let question = join_words(&question_parts);

        let first = strip_prefix_ci(lines[a_idx], "answer:").unwrap().trim();
        let mut answer_parts = Vec::new();
        let mut rest = lines[a_idx + 1..].iter().map(|l| l.trim());
        if first.is_empty() {
            // Answer text starts on a following line.
            answer_parts.extend(rest.by_ref().skip_while(|l| l.is_empty()).take_while(|l| !l.is_empty()));
        } else {
            answer_parts.push(first);
            answer_parts.extend(rest.take_while(|l| !l.is_empty()));
        }
        let answer = join_words(&answer_parts);

        if question.is_empty() || answer.is_empty() {
            return GenerationOutcome::Malformed(MalformedReason::EmptyField);
        }
        let analysis = lines[..q_idx].join("\n").trim().to_string();
        GenerationOutcome::Parsed(ParsedGeneration {
            analysis,
            question,
            answer,
        })
    }
}

fn join_words(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

/// [`QaParser::parse_generation`] with the default refusal phrases.
pub fn parse_generation(text: &str) -> GenerationOutcome {
    QaParser::default().parse_generation(text)
}

static BRACKETED_NUMBERS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\[\s*\d+(?:\.\d+)?(?:\s*,\s*\d+(?:\.\d+)?){1,3}\s*\]").expect("valid regex")
});

/// True when the text contains a bracketed list of 2-4 numbers with at least
/// one decimal, i.e. something shaped like box coordinates.
pub fn detect_bbox_leak(text: &str) -> bool {
    BRACKETED_NUMBERS
        .find_iter(text)
        .any(|m| m.as_str().contains('.'))
}

/// Maps the first line starting with `1.`, `2.` or `3.` to its type.
pub fn parse_classification(text: &str) -> Option<HallucinationType> {
    text.lines().find_map(|line| {
        let t = line.trim_start();
        let mut chars = t.chars();
        let kind = match chars.next()? {
            '1' => HallucinationType::Category,
            '2' => HallucinationType::Attribute,
            '3' => HallucinationType::Relation,
            _ => return None,
        };
        if chars.next()? != '.' || chars.next().is_some_and(|c| c.is_ascii_digit()) {
            return None;
        }
        Some(kind)
    })
}

/// Binary verdict for a free-form model answer; "yes" is the positive class.
pub fn normalize_yesno(response: &str) -> YesNoVerdict {
    // Round-trip through uppercase so the result ignores case mapping quirks.
    let text = response.to_uppercase().to_lowercase();
    let text = text.trim();
    let first = text
        .split_whitespace()
        .next()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .unwrap_or("");
    match first {
        "yes" => {
            return YesNoVerdict {
                verdict: Verdict::Positive,
                confident: true,
            }
        }
        "no" => {
            return YesNoVerdict {
                verdict: Verdict::Negative,
                confident: true,
            }
        }
        _ => {}
    }
    let mut has_yes = false;
    let mut has_no = false;
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        match word {
            "yes" => has_yes = true,
            "no" => has_no = true,
            _ => {}
        }
    }
    let verdict = if has_yes && !has_no {
        Verdict::Positive
    } else {
        Verdict::Negative
    };
    YesNoVerdict {
        verdict,
        confident: false,
    }
}
