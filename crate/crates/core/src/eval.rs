//! Hard-match answer extraction, accuracy and macro-F1, and report
//! emission.
//!
//! Two evaluation modes share the decoder's scoring rule:
//!
//! * `constrained`: each of the three label continuations (label bytes
//!   plus EOS) is scored under the processed per-step distributions and
//!   the best length-normalized candidate wins. This is the pipeline
//!   default; an untrained model lands near chance instead of emitting
//!   unparseable bytes.
//! * `free`: plain beam search; the label is extracted from the generated
//!   text by first-class-token scanning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::Adapter;
use crate::corpus::{format_prompt, ByteTokenizer, Label, PubMedQARecord};
use crate::decode::{beam_search, constrained_choice, DecodeConfig, ModelScorer};
use crate::model::ModelWeights;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty record list")]
    Degenerate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Extraction outcome; `Invalid` means no class token occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractedLabel {
    Yes,
    No,
    Maybe,
    Invalid,
}

impl From<Label> for ExtractedLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Yes => ExtractedLabel::Yes,
            Label::No => ExtractedLabel::No,
            Label::Maybe => ExtractedLabel::Maybe,
        }
    }
}

impl ExtractedLabel {
    fn column(self) -> usize {
        match self {
            ExtractedLabel::Yes => 0,
            ExtractedLabel::No => 1,
            ExtractedLabel::Maybe => 2,
            ExtractedLabel::Invalid => 3,
        }
    }
}

fn row_of(label: Label) -> usize {
    match label {
        Label::Yes => 0,
        Label::No => 1,
        Label::Maybe => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub decoded_text: String,
    pub extracted: ExtractedLabel,
    pub gold: Label,
}

/// Lowercases, strips punctuation, and returns the first whitespace token
/// equal to a class name.
pub fn hard_match_label(decoded: &str) -> ExtractedLabel {
    let normalized = normalize_for_match(decoded);
    for token in normalized.split_whitespace() {
        match token {
            "yes" => return ExtractedLabel::Yes,
            "no" => return ExtractedLabel::No,
            "maybe" => return ExtractedLabel::Maybe,
            _ => {}
        }
    }
    ExtractedLabel::Invalid
}

pub fn normalize_for_match(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect()
}

/// Gold (yes/no/maybe) by predicted (yes/no/maybe/invalid) counts.
pub type Confusion = [[u64; 4]; 3];

pub fn confusion_matrix(predictions: &[Prediction]) -> Result<Confusion, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Degenerate);
    }
    let mut confusion = [[0u64; 4]; 3];
    for p in predictions {
        confusion[row_of(p.gold)][p.extracted.column()] += 1;
    }
    Ok(confusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub yes: ClassMetrics,
    pub no: ClassMetrics,
    pub maybe: ClassMetrics,
}

/// Per-class precision/recall/F1 from the confusion counts. An invalid
/// prediction is a false negative for its gold class and a false positive
/// for no class; zero-denominator precision, recall, and F1 are 0.
pub fn class_metrics(confusion: &Confusion) -> PerClass {
    let metric = |c: usize| {
        let tp = confusion[c][c] as f64;
        let fn_ = (confusion[c].iter().sum::<u64>() as f64) - tp;
        let fp = (0..3)
            .filter(|&g| g != c)
            .map(|g| confusion[g][c])
            .sum::<u64>() as f64;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
        }
    };
    PerClass {
        yes: metric(0),
        no: metric(1),
        maybe: metric(2),
    }
}

pub fn accuracy_from(confusion: &Confusion) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let correct = confusion[0][0] + confusion[1][1] + confusion[2][2];
    correct as f64 / total as f64
}

/// Unweighted mean of the three class F1 scores.
pub fn macro_f1(predictions: &[Prediction]) -> Result<f64, EvalError> {
    let confusion = confusion_matrix(predictions)?;
    let per_class = class_metrics(&confusion);
    Ok((per_class.yes.f1 + per_class.no.f1 + per_class.maybe.f1) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Constrained,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    #[serde(default)]
    pub mode: EvalMode,
}

/// Run identification carried into every report; no wall-clock fields, so
/// identical runs emit identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: String,
    pub adapter: String,
    pub strategy: String,
    pub decode: DecodeConfig,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: PerClass,
    pub confusion: Confusion,
    pub total: u64,
    pub decode_failures: u64,
    pub meta: RunMeta,
}

impl EvalReport {
    pub fn from_predictions(
        predictions: &[Prediction],
        decode_failures: u64,
        meta: RunMeta,
    ) -> Result<Self, EvalError> {
        let confusion = confusion_matrix(predictions)?;
        let per_class = class_metrics(&confusion);
        Ok(Self {
            accuracy: accuracy_from(&confusion),
            macro_f1: (per_class.yes.f1 + per_class.no.f1 + per_class.maybe.f1) / 3.0,
            per_class,
            confusion,
            total: predictions.len() as u64,
            decode_failures,
            meta,
        })
    }
}

/// The three candidate continuations scored in constrained mode: label
/// bytes plus EOS, exactly the span the training loss covers.
pub fn label_candidates(tokenizer: &ByteTokenizer) -> Vec<(Label, Vec<TokenId>)> {
    Label::ALL
        .iter()
        .map(|&l| {
            let mut ids = tokenizer.encode(l.as_str());
            ids.push(ByteTokenizer::EOS);
            (l, ids)
        })
        .collect()
}

/// Decodes every record and accumulates the confusion matrix. A record
/// whose formatting or decoding fails is marked invalid and counted; the
/// run continues.
pub fn evaluate(
    weights: &ModelWeights<f32>,
    adapter: Option<&Adapter<f32>>,
    records: &[PubMedQARecord],
    options: &EvalOptions,
    meta: RunMeta,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Degenerate);
    }
    let tokenizer = ByteTokenizer;
    let candidates = label_candidates(&tokenizer);
    let longest_candidate = candidates.iter().map(|(_, ids)| ids.len()).max().unwrap();
    let reserve = match options.mode {
        EvalMode::Constrained => longest_candidate,
        EvalMode::Free => options.decode.max_new_tokens,
    };
    let prefix_len = match adapter {
        Some(Adapter::Prefix { params, .. }) => params.len(),
        _ => 0,
    };
    let budget = weights
        .config
        .max_seq_len
        .saturating_sub(prefix_len + reserve);

    let predictions: Vec<(Prediction, bool)> = records
        .par_iter()
        .map(|record| {
            let gold = record.final_decision;
            let fallback = |text: &str| Prediction {
                id: record.id.clone(),
                decoded_text: text.to_string(),
                extracted: ExtractedLabel::Invalid,
                gold,
            };
            let Ok((prompt, question_start)) = format_prompt(record, &tokenizer, budget) else {
                return (fallback(""), true);
            };
            let scorer = ModelScorer {
                weights,
                lora: adapter.and_then(Adapter::lora_set),
                prefix: match adapter {
                    Some(Adapter::Prefix { params, .. }) => Some((params, question_start)),
                    _ => None,
                },
            };
            match options.mode {
                EvalMode::Constrained => {
                    let seqs: Vec<Vec<TokenId>> =
                        candidates.iter().map(|(_, ids)| ids.clone()).collect();
                    match constrained_choice(&scorer, &prompt, &seqs, &options.decode) {
                        Ok(idx) => {
                            let label = candidates[idx].0;
                            let text = label.as_str().to_string();
                            (
                                Prediction {
                                    id: record.id.clone(),
                                    extracted: hard_match_label(&text),
                                    decoded_text: text,
                                    gold,
                                },
                                false,
                            )
                        }
                        Err(_) => (fallback(""), true),
                    }
                }
                EvalMode::Free => match beam_search(&scorer, &prompt, &options.decode) {
                    Ok(result) => {
                        let text = tokenizer
                            .decode_text(&result.tokens)
                            .unwrap_or_default();
                        (
                            Prediction {
                                id: record.id.clone(),
                                extracted: hard_match_label(&text),
                                decoded_text: text,
                                gold,
                            },
                            false,
                        )
                    }
                    Err(_) => (fallback(""), true),
                },
            }
        })
        .collect();

    let decode_failures = predictions.iter().filter(|(_, failed)| *failed).count() as u64;
    let preds: Vec<Prediction> = predictions.into_iter().map(|(p, _)| p).collect();
    EvalReport::from_predictions(&preds, decode_failures, meta)
}

/// Human-readable table with one row per report: (model, strategy) against
/// (accuracy, macro-F1). An empty strategy renders as "none".
pub fn render_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            let strategy = if r.meta.strategy.is_empty() {
                "none".to_string()
            } else {
                r.meta.strategy.clone()
            };
            [
                r.meta.model.clone(),
                strategy,
                format!("{:.3}", r.accuracy),
                format!("{:.3}", r.macro_f1),
            ]
        })
        .collect();
    let header = ["model", "strategy", "accuracy", "macro-f1"];
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String]| -> String {
        let mut line = String::from("|");
        for (cell, w) in cells.iter().zip(&widths) {
            line.push(' ');
            line.push_str(cell);
            line.push_str(&" ".repeat(w - cell.len()));
            line.push_str(" |");
        }
        line.push('\n');
        line
    };
    out.push_str(&fmt_row(&header.map(String::from)));
    let mut rule = String::from("|");
    for w in &widths {
        rule.push_str(&"-".repeat(w + 2));
        rule.push('|');
    }
    rule.push('\n');
    out.push_str(&rule);
    for row in &rows {
        out.push_str(&fmt_row(row));
    }
    out
}

/// Writes the machine-readable report list and the rendered table.
pub fn write_reports(
    reports: &[EvalReport],
    json_path: &std::path::Path,
    table_path: &std::path::Path,
) -> Result<(), EvalError> {
    let mut json = serde_json::to_string_pretty(reports).expect("reports serialize");
    json.push('\n');
    std::fs::write(json_path, json)?;
    std::fs::write(table_path, render_table(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(gold: Label, extracted: ExtractedLabel) -> Prediction {
        Prediction {
            id: String::new(),
            decoded_text: String::new(),
            extracted,
            gold,
        }
    }

    #[test]
    fn hard_match_examples() {
        assert_eq!(hard_match_label("yes"), ExtractedLabel::Yes);
        assert_eq!(
            hard_match_label("Maybe, the evidence is mixed."),
            ExtractedLabel::Maybe
        );
        assert_eq!(
            hard_match_label("the study is inconclusive"),
            ExtractedLabel::Invalid
        );
        // first class token wins
        assert_eq!(hard_match_label("no, maybe yes"), ExtractedLabel::No);
    }

    #[test]
    fn normalization_is_idempotent() {
        let samples = ["Maybe, the evidence is mixed.", "YES!!", "a-b c_d 1.5"];
        for s in samples {
            let once = normalize_for_match(s);
            assert_eq!(normalize_for_match(&once), once);
        }
    }

    #[test]
    fn hand_fixture_confusion_and_macro() {
        // golds [yes,yes,no,maybe], preds [yes,no,no,maybe]
        let preds = vec![
            pred(Label::Yes, ExtractedLabel::Yes),
            pred(Label::Yes, ExtractedLabel::No),
            pred(Label::No, ExtractedLabel::No),
            pred(Label::Maybe, ExtractedLabel::Maybe),
        ];
        let confusion = confusion_matrix(&preds).unwrap();
        assert_eq!(accuracy_from(&confusion), 0.75);
        let per_class = class_metrics(&confusion);
        assert!((per_class.yes.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((per_class.no.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(per_class.maybe.f1, 1.0);
        let macro_score = macro_f1(&preds).unwrap();
        assert!((macro_score - 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn all_correct_is_one() {
        let preds: Vec<Prediction> = Label::ALL
            .iter()
            .map(|&l| pred(l, l.into()))
            .collect();
        assert_eq!(macro_f1(&preds).unwrap(), 1.0);
    }

    #[test]
    fn empty_predictions_error() {
        assert!(matches!(macro_f1(&[]), Err(EvalError::Degenerate)));
    }

    // Brute-force oracle coded independently: walks the prediction list per
    // class and counts outcomes directly rather than through the shared
    // confusion matrix.
    fn oracle_macro_f1(preds: &[Prediction]) -> f64 {
        let mut sum = 0.0;
        for class in Label::ALL {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fn_ = 0.0;
            for p in preds {
                let is_gold = p.gold == class;
                let is_pred = p.extracted == ExtractedLabel::from(class);
                if is_gold && is_pred {
                    tp += 1.0;
                } else if !is_gold && is_pred {
                    fp += 1.0;
                } else if is_gold && !is_pred {
                    fn_ += 1.0;
                }
            }
            let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            sum += f1;
        }
        sum / 3.0
    }

    fn oracle_accuracy(preds: &[Prediction]) -> f64 {
        let correct = preds
            .iter()
            .filter(|p| p.extracted == ExtractedLabel::from(p.gold))
            .count();
        correct as f64 / preds.len() as f64
    }

    #[test]
    fn metrics_match_brute_force_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let extracted_pool = [
            ExtractedLabel::Yes,
            ExtractedLabel::No,
            ExtractedLabel::Maybe,
            ExtractedLabel::Invalid,
        ];
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let preds: Vec<Prediction> = (0..n)
                .map(|_| {
                    pred(
                        Label::ALL[rng.gen_range(0..3)],
                        extracted_pool[rng.gen_range(0..4)],
                    )
                })
                .collect();
            assert_eq!(macro_f1(&preds).unwrap(), oracle_macro_f1(&preds));
            let confusion = confusion_matrix(&preds).unwrap();
            assert_eq!(accuracy_from(&confusion), oracle_accuracy(&preds));
        }
    }

    #[test]
    fn accuracy_plus_error_rate_is_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let extracted_pool = [
            ExtractedLabel::Yes,
            ExtractedLabel::No,
            ExtractedLabel::Maybe,
            ExtractedLabel::Invalid,
        ];
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let preds: Vec<Prediction> = (0..n)
                .map(|_| {
                    pred(
                        Label::ALL[rng.gen_range(0..3)],
                        extracted_pool[rng.gen_range(0..4)],
                    )
                })
                .collect();
            let confusion = confusion_matrix(&preds).unwrap();
            let acc = accuracy_from(&confusion);
            let wrong = preds
                .iter()
                .filter(|p| p.extracted != ExtractedLabel::from(p.gold))
                .count() as f64;
            assert!((acc + wrong / n as f64 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_renders_empty_strategy_as_none() {
        let meta = RunMeta {
            model: "m".into(),
            adapter: "lora".into(),
            strategy: String::new(),
            decode: DecodeConfig::default(),
            eval_mode: EvalMode::Constrained,
            seed: 0,
        };
        let preds = vec![pred(Label::Yes, ExtractedLabel::Yes)];
        let report = EvalReport::from_predictions(&preds, 0, meta).unwrap();
        let table = render_table(&[report]);
        assert!(table.contains("| none"));
    }
}
