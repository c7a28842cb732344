//! PubMedQA-format ingestion, deterministic splitting, byte-level
//! tokenization, and QA-to-training-sequence formatting.
//!
//! The input file follows the upstream labeled-set schema: a top-level JSON
//! map from PMID to an object with `QUESTION`, `CONTEXTS`, `LONG_ANSWER`,
//! and `final_decision` fields. Records are returned sorted by PMID, so
//! downstream shuffling depends only on the seed.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset parse failure at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("record {pmid}: field {field} missing or malformed")]
    RecordField { pmid: String, field: &'static str },
    #[error("record {pmid}: final_decision {label:?} is not yes/no/maybe")]
    InvalidLabel { pmid: String, label: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: question and answer alone need {needed} tokens, capacity is {max}")]
    Oversize { id: String, needed: usize, max: usize },
    #[error("token id {0} has no byte value")]
    InvalidTokenId(TokenId),
    #[error("split manifest mismatch: {0}")]
    ManifestMismatch(String),
}

/// The three-way final decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
    Maybe,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Yes, Label::No, Label::Maybe];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Yes => "yes",
            Label::No => "no",
            Label::Maybe => "maybe",
        }
    }

    /// Case-insensitive parse of a (possibly padded) label string.
    pub fn parse_normalized(s: &str) -> Option<Label> {
        match s.trim().to_lowercase().as_str() {
            "yes" => Some(Label::Yes),
            "no" => Some(Label::No),
            "maybe" => Some(Label::Maybe),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PubMedQARecord {
    pub id: String,
    pub question: String,
    pub contexts: Vec<String>,
    pub long_answer: String,
    pub final_decision: Label,
}

fn byte_offset_of(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    offset
}

/// Parses the upstream labeled-set schema. Unknown per-record fields are
/// ignored; labels are normalized to lowercase; records arrive sorted by
/// PMID.
pub fn parse_pubmedqa(text: &str) -> Result<Vec<PubMedQARecord>, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CorpusError::Format {
        offset: byte_offset_of(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let map = value.as_object().ok_or_else(|| CorpusError::Format {
        offset: 0,
        message: "top level is not an object keyed by PMID".into(),
    })?;

    let mut records = Vec::with_capacity(map.len());
    for (pmid, entry) in map {
        let obj = entry.as_object().ok_or_else(|| CorpusError::RecordField {
            pmid: pmid.clone(),
            field: "record",
        })?;
        let question = obj
            .get("QUESTION")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CorpusError::RecordField {
                pmid: pmid.clone(),
                field: "QUESTION",
            })?
            .to_string();
        if question.is_empty() {
            return Err(CorpusError::RecordField {
                pmid: pmid.clone(),
                field: "QUESTION",
            });
        }
        let contexts = obj
            .get("CONTEXTS")
            .and_then(|v| v.as_array())
            .ok_or_else(|| CorpusError::RecordField {
                pmid: pmid.clone(),
                field: "CONTEXTS",
            })?
            .iter()
            .map(|v| {
                v.as_str().map(str::to_string).ok_or_else(|| CorpusError::RecordField {
                    pmid: pmid.clone(),
                    field: "CONTEXTS",
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let long_answer = obj
            .get("LONG_ANSWER")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CorpusError::RecordField {
                pmid: pmid.clone(),
                field: "LONG_ANSWER",
            })?
            .to_string();
        let raw_label = obj
            .get("final_decision")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CorpusError::RecordField {
                pmid: pmid.clone(),
                field: "final_decision",
            })?;
        let final_decision =
            Label::parse_normalized(raw_label).ok_or_else(|| CorpusError::InvalidLabel {
                pmid: pmid.clone(),
                label: raw_label.to_string(),
            })?;
        records.push(PubMedQARecord {
            id: pmid.clone(),
            question,
            contexts,
            long_answer,
            final_decision,
        });
    }
    Ok(records)
}

pub fn load_pubmedqa(path: &Path) -> Result<Vec<PubMedQARecord>, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_pubmedqa(&text)
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PubMedQARecord>,
    pub validation: Vec<PubMedQARecord>,
    pub test: Vec<PubMedQARecord>,
    pub seed: u64,
}

/// 450/50/500 on the canonical 1000-record set; otherwise 45%/5% rounded
/// down with the remainder going to test. Shuffle order depends only on
/// the seed because records arrive sorted by id.
pub fn split(mut records: Vec<PubMedQARecord>, seed: u64) -> Result<DatasetSplit, CorpusError> {
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }
    let n = records.len();
    let (n_train, n_val) = if n == 1000 {
        (450, 50)
    } else {
        (n * 45 / 100, n * 5 / 100)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let test = records.split_off(n_train + n_val);
    let validation = records.split_off(n_train);
    Ok(DatasetSplit {
        train: records,
        validation,
        test,
        seed,
    })
}

/// Auditable record of which PMIDs landed in which split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit) -> Self {
        let ids = |records: &[PubMedQARecord]| records.iter().map(|r| r.id.clone()).collect();
        Self {
            seed: split.seed,
            train: ids(&split.train),
            validation: ids(&split.validation),
            test: ids(&split.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Format {
            offset: byte_offset_of(&text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    /// Rebuilds the split from source records, enforcing that the manifest
    /// and the record set cover each other exactly.
    pub fn apply(&self, records: Vec<PubMedQARecord>) -> Result<DatasetSplit, CorpusError> {
        let mut by_id: std::collections::BTreeMap<String, PubMedQARecord> =
            records.into_iter().map(|r| (r.id.clone(), r)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<PubMedQARecord>, CorpusError> {
            ids.iter()
                .map(|id| {
                    by_id.remove(id).ok_or_else(|| {
                        CorpusError::ManifestMismatch(format!("id {id} not in the dataset"))
                    })
                })
                .collect()
        };
        let train = take(&self.train)?;
        let validation = take(&self.validation)?;
        let test = take(&self.test)?;
        if let Some(extra) = by_id.keys().next() {
            return Err(CorpusError::ManifestMismatch(format!(
                "dataset record {extra} missing from the manifest"
            )));
        }
        Ok(DatasetSplit {
            train,
            validation,
            test,
            seed: self.seed,
        })
    }
}

/// 256 byte values plus BOS/EOS/PAD.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const PAD: TokenId = 258;
    pub const VOCAB_SIZE: usize = 259;

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    /// Inverse of `encode_bytes`; special tokens are skipped, ids beyond
    /// the vocabulary are errors.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, CorpusError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                Self::BOS | Self::EOS | Self::PAD => {}
                other => return Err(CorpusError::InvalidTokenId(other)),
            }
        }
        Ok(out)
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String, CorpusError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

/// One training sequence: `BOS context: ... question: ... answer: <label> EOS`
/// with the loss mask true over the label bytes and EOS only.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub question_start: usize,
    pub gold: Label,
    pub source_id: String,
}

const CTX_LEAD: &str = "context: ";
const QUESTION_LEAD: &str = "question: ";
const ANSWER_LEAD: &str = "answer: ";

struct RenderedParts {
    ids: Vec<TokenId>,
    question_start: usize,
    answer_text_start: usize,
}

/// Renders the template, left-truncating the joined contexts so the total
/// (with BOS and optionally EOS) fits `max_len`. The question and answer
/// never shrink.
fn render(
    record: &PubMedQARecord,
    tokenizer: &ByteTokenizer,
    max_len: usize,
    include_answer: bool,
) -> Result<RenderedParts, CorpusError> {
    let ctx = record.contexts.join(" ");
    let ctx_bytes = ctx.as_bytes();
    let label = record.final_decision.as_str();

    // "context: {ctx} question: {q} answer: {label}" -> BOS bytes [EOS]
    let tail_text = if include_answer {
        format!(" {QUESTION_LEAD}{} {ANSWER_LEAD}{label}", record.question)
    } else {
        format!(" {QUESTION_LEAD}{} {ANSWER_LEAD}", record.question)
    };
    let specials = if include_answer { 2 } else { 1 };
    let full = CTX_LEAD.len() + ctx_bytes.len() + tail_text.len() + specials;
    let keep_from = if full > max_len {
        let drop = full - max_len;
        if drop > ctx_bytes.len() {
            return Err(CorpusError::Oversize {
                id: record.id.clone(),
                needed: full - ctx_bytes.len(),
                max: max_len,
            });
        }
        drop
    } else {
        0
    };

    let mut bytes = Vec::with_capacity(full - keep_from);
    bytes.extend_from_slice(CTX_LEAD.as_bytes());
    bytes.extend_from_slice(&ctx_bytes[keep_from..]);
    bytes.extend_from_slice(tail_text.as_bytes());

    // token index of the 'q' in "question:", accounting for BOS
    let question_start = 1 + CTX_LEAD.len() + (ctx_bytes.len() - keep_from) + 1;
    let answer_text_start = bytes.len() - if include_answer { label.len() } else { 0 };

    let mut ids = Vec::with_capacity(bytes.len() + specials);
    ids.push(ByteTokenizer::BOS);
    ids.extend(tokenizer.encode_bytes(&bytes));
    if include_answer {
        ids.push(ByteTokenizer::EOS);
    }
    Ok(RenderedParts {
        ids,
        question_start,
        answer_text_start,
    })
}

/// Full training sequence with the loss mask over label bytes plus EOS.
pub fn format_example(
    record: &PubMedQARecord,
    tokenizer: &ByteTokenizer,
    max_len: usize,
) -> Result<SequenceExample, CorpusError> {
    let parts = render(record, tokenizer, max_len, true)?;
    let n = parts.ids.len();
    let mut loss_mask = vec![false; n];
    // label bytes start at answer_text_start (+1 for BOS); EOS is last
    for i in (1 + parts.answer_text_start)..n {
        loss_mask[i] = true;
    }
    Ok(SequenceExample {
        ids: parts.ids,
        loss_mask,
        question_start: parts.question_start,
        gold: record.final_decision,
        source_id: record.id.clone(),
    })
}

/// Decode-time prompt: the same rendering with the label and EOS omitted
/// (the trailing space after "answer:" stays).
pub fn format_prompt(
    record: &PubMedQARecord,
    tokenizer: &ByteTokenizer,
    max_len: usize,
) -> Result<(Vec<TokenId>, usize), CorpusError> {
    let parts = render(record, tokenizer, max_len, false)?;
    Ok((parts.ids, parts.question_start))
}

pub mod synthetic {
    //! Deterministic synthetic QA records for tests and demos. Each record
    //! carries a copyable answer cue ("analysis points to <label>") in its
    //! second context sentence, so small adapters can actually learn the
    //! task at desk scale.

    use super::{Label, PubMedQARecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    const AGENTS: [&str; 8] = [
        "alphazine", "betamol", "curcavine", "dextrafen", "ergomide", "folatrex", "galvamin",
        "histarel",
    ];
    const CONDITIONS: [&str; 8] = [
        "anemia", "bronchitis", "colitis", "dermatitis", "edema", "fibrosis", "gastritis",
        "hepatitis",
    ];

    pub fn synthetic_records(n: usize, seed: u64) -> Vec<PubMedQARecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let agent = AGENTS[rng.gen_range(0..AGENTS.len())];
                let condition = CONDITIONS[rng.gen_range(0..CONDITIONS.len())];
                let label = Label::ALL[i % Label::ALL.len()];
                PubMedQARecord {
                    id: format!("SYN{i:06}"),
                    question: format!("does {agent} improve {condition} in study {i}?"),
                    contexts: vec![
                        format!("study {i} examined {agent} for {condition}."),
                        format!("analysis points to {label}."),
                    ],
                    long_answer: format!("overall the findings point to {label}."),
                    final_decision: label,
                }
            })
            .collect()
    }

    /// Writes records in the upstream file schema so the CLI can ingest
    /// them like a real dataset.
    pub fn write_dataset(path: &Path, records: &[PubMedQARecord]) -> std::io::Result<()> {
        let mut map = serde_json::Map::new();
        for r in records {
            map.insert(
                r.id.clone(),
                serde_json::json!({
                    "QUESTION": r.question,
                    "CONTEXTS": r.contexts,
                    "LONG_ANSWER": r.long_answer,
                    "final_decision": r.final_decision.as_str(),
                }),
            );
        }
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(map))?;
        text.push('\n');
        std::fs::write(path, text)
    }
}
