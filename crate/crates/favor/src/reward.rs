//! Rule-based verifiable rewards for tagged classification responses.
//!
//! A well-formed response is, up to surrounding whitespace, exactly one
//! `<think>...</think>` block followed by one `<answer>...</answer>`
//! block with nothing after it. The four tags are atomic delimiters:
//! payloads may not contain tags, duplicated or nested blocks are
//! malformed. Tag spelling is exact and case-sensitive; whitespace
//! around the blocks is tolerated.
//!
//! Two independent {0, 1} rewards are computed from a response:
//! an accuracy reward (the extracted answer index equals the ground
//! truth) and a format reward (the response is well-formed). The total
//! classification reward is their sum. Answer extraction is attempted
//! even on malformed responses, so a correct answer inside broken
//! formatting still earns the accuracy point.
//!
//! The answer payload is either a JSON object with an integer `answer`
//! field or, as a lenient fallback, a bare integer. Accuracy matches the
//! class index, never class-name strings.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TokenSequence;
use crate::vocab::Vocabulary;

static THINK_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<think>(.*?)</think>").unwrap());
static ANSWER_BLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
}

const TAG_LITERALS: [(&str, Tag); 4] = [
    ("<think>", Tag::ThinkOpen),
    ("</think>", Tag::ThinkClose),
    ("<answer>", Tag::AnswerOpen),
    ("</answer>", Tag::AnswerClose),
];

/// Splits `text` at tag literals. Returns the tags in order and the
/// text runs around them (`texts.len() == tags.len() + 1`).
fn lex_tags(text: &str) -> (Vec<Tag>, Vec<&str>) {
    let bytes = text.as_bytes();
    let mut tags = Vec::new();
    let mut texts = Vec::new();
    let mut last = 0;
    let mut i = 0;
    while i < bytes.len() {
        // Tags start with ASCII '<', so `i` is a char boundary here.
        if bytes[i] == b'<' {
            if let Some((literal, tag)) =
                TAG_LITERALS.iter().find(|(l, _)| text[i..].starts_with(l))
            {
                texts.push(&text[last..i]);
                tags.push(*tag);
                i += literal.len();
                last = i;
                continue;
            }
        }
        i += 1;
    }
    texts.push(&text[last..]);
    (tags, texts)
}

/// Structured view of one response string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub think_text: Option<String>,
    /// Raw text between the answer tags.
    pub answer_payload: Option<String>,
    /// Class index extracted from the payload, when it parses.
    pub answer_index: Option<i64>,
    pub well_formed: bool,
}

/// Renders a token sequence to its surface string. Tags render as their
/// literal markers; EOS renders as the empty string.
pub fn render(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.ids {
        if id == Vocabulary::EOS {
            vocab.surface(id)?; // still validates the id
            continue;
        }
        out.push_str(vocab.surface(id)?);
    }
    Ok(out)
}

/// Extracts an integer class index from an answer payload.
/// Accepts `{"answer": <int>}` (extra fields tolerated) or a bare integer.
fn parse_answer_payload(payload: &str) -> Option<i64> {
    let value: serde_json::Value = serde_json::from_str(payload.trim()).ok()?;
    match value {
        serde_json::Value::Object(map) => map.get("answer")?.as_i64(),
        serde_json::Value::Number(n) => n.as_i64(),
        _ => None,
    }
}

/// Total function: never fails, malformed input yields `well_formed =
/// false` with whatever fields could still be extracted.
pub fn parse_response(text: &str) -> ParsedResponse {
    let (tags, texts) = lex_tags(text);
    let well_formed = tags
        == [
            Tag::ThinkOpen,
            Tag::ThinkClose,
            Tag::AnswerOpen,
            Tag::AnswerClose,
        ]
        && texts[0].trim().is_empty()
        && texts[2].trim().is_empty()
        && texts[4].trim().is_empty();
    if well_formed {
        let payload = texts[3].to_string();
        return ParsedResponse {
            think_text: Some(texts[1].to_string()),
            answer_index: parse_answer_payload(&payload),
            answer_payload: Some(payload),
            well_formed: true,
        };
    }
    // Not well-formed: extract the first think/answer blocks wherever
    // they appear, so graders can still score the content.
    let think_text = THINK_BLOCK.captures(text).map(|c| c[1].to_string());
    let answer_payload = ANSWER_BLOCK.captures(text).map(|c| c[1].to_string());
    ParsedResponse {
        think_text,
        answer_index: answer_payload.as_deref().and_then(parse_answer_payload),
        answer_payload,
        well_formed: false,
    }
}

/// 1 iff the extracted answer index equals the ground-truth class index.
pub fn accuracy_reward(parsed: &ParsedResponse, ground_truth: usize) -> u8 {
    u8::from(parsed.answer_index == Some(ground_truth as i64))
}

/// 1 iff the response is well-formed.
pub fn format_reward(parsed: &ParsedResponse) -> u8 {
    u8::from(parsed.well_formed)
}

/// The two reward components and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: u8,
    pub format: u8,
    pub total: u8,
}

impl RewardBreakdown {
    pub fn new(accuracy: u8, format: u8) -> Self {
        Self {
            accuracy,
            format,
            total: accuracy + format,
        }
    }
}

/// Parses `text` and scores both reward components against the ground
/// truth. Total on any input, never fails.
pub fn classification_reward(text: &str, ground_truth: usize) -> RewardBreakdown {
    let parsed = parse_response(text);
    RewardBreakdown::new(
        accuracy_reward(&parsed, ground_truth),
        format_reward(&parsed),
    )
}

/// One labeled record of the parser-test corpus: a JSON object per line
/// with fields `input`, `r_acc`, `r_format`, and `ground_truth`. Newline
/// is the record delimiter; JSON string escaping covers embedded newlines
/// and quotes inside `input`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub input: String,
    pub r_acc: u8,
    pub r_format: u8,
    pub ground_truth: usize,
}

/// Loads a reward-corpus file (one JSON record per line, blank lines
/// ignored).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| {
            Error::Manifest(format!(
                "{}: line {}: invalid corpus record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    Ok(records)
}
