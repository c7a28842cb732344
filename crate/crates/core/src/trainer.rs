//! The fine-tuning loop: AdamW with linear warmup, token-budgeted
//! micro-batches, gradient accumulation, periodic validation, and
//! best-checkpoint retention.
//!
//! Only adapter parameters train; the base weights are borrowed immutably
//! for the whole run, so the frozen-base guarantee holds structurally.
//! Each accumulated micro-batch loss is the mean over its masked positions
//! divided by `grad_accum_steps`, which makes one optimizer step over G
//! accumulated micro-batches approximate one step over their
//! concatenation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{Adapter, AdapterConfig, AdapterError};
use crate::checkpoint::{Checkpoint, CheckpointError, OptimizerSnapshot, FORMAT_VERSION};
use crate::corpus::{PubMedQARecord, SequenceExample};
use crate::eval::{evaluate, EvalError, EvalOptions, RunMeta};
use crate::model::{ModelError, ModelWeights, ParamBinder, PrefixInjection};
use crate::optim::{adamw_step, lr_at, AdamWHyper, OptimError, OptimizerState};
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at optimizer step {step} (batch: {batch_ids:?})")]
    NonFiniteLoss {
        step: u64,
        batch_ids: Vec<String>,
        loss: f64,
    },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Named sub-stream of a global seed; all pipeline randomness flows from
/// one seed through these.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest long enough"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub grad_accum_steps: usize,
    pub micro_batch_tokens: usize,
    pub warmup_steps: u64,
    pub max_optimizer_steps: u64,
    /// Validation cadence in optimizer steps.
    pub eval_every: u64,
    pub seed: u64,
    pub adapter: AdapterConfig,
    /// Optional full-parameter language-modeling warm phase on context
    /// passages before the adapter run (simulated pretraining).
    pub warm_lm_steps: u64,
    pub warm_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            grad_accum_steps: 32,
            micro_batch_tokens: 1024,
            warmup_steps: 100,
            max_optimizer_steps: 500,
            eval_every: 20,
            seed: 0,
            adapter: AdapterConfig::Lora(crate::adapters::LoraConfig::default()),
            warm_lm_steps: 0,
            warm_learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.grad_accum_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "grad_accum_steps must be >= 1".into(),
            ));
        }
        if self.max_optimizer_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "max_optimizer_steps must be >= 1".into(),
            ));
        }
        self.adapter.validate()?;
        Ok(())
    }
}

/// One line of the metrics history, emitted per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_macro_f1: Option<f64>,
}

/// Line-delimited JSON, one record per optimizer step.
pub fn write_metrics_log(
    history: &[StepRecord],
    path: &std::path::Path,
) -> std::io::Result<()> {
    let mut out = String::new();
    for record in history {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<SequenceExample>,
    pub validation: Vec<PubMedQARecord>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The retained checkpoint: best validation accuracy (ties: higher
    /// macro-F1, then earlier step), or the final state when no
    /// validation ran.
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub best: Option<BestMark>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMark {
    pub step: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Greedy packing of shuffled example indices into micro-batches of at
/// most `budget` tokens.
fn pack_micro_batches(
    order: &[usize],
    examples: &[SequenceExample],
    budget: usize,
) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for &idx in order {
        let len = examples[idx].ids.len();
        if !current.is_empty() && used + len > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

struct MicroBatcher<'a> {
    examples: &'a [SequenceExample],
    budget: usize,
    rng: ChaCha8Rng,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl<'a> MicroBatcher<'a> {
    fn new(examples: &'a [SequenceExample], budget: usize, rng: ChaCha8Rng) -> Self {
        Self {
            examples,
            budget,
            rng,
            queue: Default::default(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..self.examples.len()).collect();
            order.shuffle(&mut self.rng);
            self.queue = pack_micro_batches(&order, self.examples, self.budget).into();
        }
        self.queue.pop_front().expect("nonempty epoch")
    }
}

/// Builds the loss for one micro-batch on `tape`: the mean masked
/// cross-entropy over all sequences, each sequence weighted by its masked
/// count.
fn micro_batch_loss(
    tape: &mut Tape<f32>,
    weights: &ModelWeights<f32>,
    adapter: &Adapter<f32>,
    examples: &[&SequenceExample],
    binder: &mut ParamBinder,
) -> Result<crate::tape::Var, TrainError> {
    let mut weighted: Vec<(crate::tape::Var, usize)> = Vec::with_capacity(examples.len());
    let mut total_masked = 0usize;
    for ex in examples {
        let n = ex.ids.len();
        let inputs = &ex.ids[..n - 1];
        let targets = &ex.ids[1..];
        let shifted_mask: Vec<bool> = ex.loss_mask[1..].to_vec();
        let prefix = match adapter {
            Adapter::Prefix { params, .. } => Some(PrefixInjection {
                params,
                question_start: ex.question_start,
            }),
            Adapter::Lora(_) => None,
        };
        let logits = weights.forward_on_tape(
            tape,
            inputs,
            prefix,
            adapter.lora_set(),
            Some(binder),
        )?;
        let ce = tape.cross_entropy(logits, targets, &shifted_mask)?;
        let n_masked = shifted_mask.iter().filter(|m| **m).count();
        weighted.push((ce, n_masked));
        total_masked += n_masked;
    }
    let mut loss = None;
    for (ce, n_masked) in weighted {
        let scaled = tape.scale(ce, n_masked as f32 / total_masked as f32);
        loss = Some(match loss {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    Ok(loss.expect("micro-batch nonempty"))
}

fn harvest_adapter_grads(
    tape: &Tape<f32>,
    binder: &ParamBinder,
    adapter: &mut Adapter<f32>,
) {
    let mut params = adapter.named_params_mut();
    for (name, var) in binder.entries() {
        if let Some((_, tensor)) = params.iter_mut().find(|(n, _)| n == name) {
            tape.write_grad_to(*var, tensor);
        }
    }
}

fn snapshot(
    weights: &ModelWeights<f32>,
    adapter: &Adapter<f32>,
    optimizer: &OptimizerState<f32>,
    config: &TrainConfig,
    rng: &ChaCha8Rng,
    metrics: Vec<StepRecord>,
    step: u64,
) -> Checkpoint {
    Checkpoint {
        version: FORMAT_VERSION,
        model_config: weights.config.clone(),
        base: weights.clone(),
        adapter: adapter.clone(),
        optimizer: OptimizerSnapshot {
            step: optimizer.step(),
            slots: optimizer.export(),
        },
        step,
        rng_seed: config.seed,
        rng_word_pos: rng.get_word_pos(),
        metrics,
    }
}

/// Fine-tunes an adapter over a frozen base. See the module docs for the
/// batching and retention rules.
pub fn train(
    weights: &ModelWeights<f32>,
    data: &TrainData,
    config: &TrainConfig,
    eval_options: &EvalOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let longest = data.train.iter().map(|e| e.ids.len()).max().unwrap();
    if config.micro_batch_tokens < longest {
        return Err(TrainError::InvalidConfig(format!(
            "micro_batch_tokens {} below longest sequence {longest}",
            config.micro_batch_tokens
        )));
    }
    let prefix_len = match &config.adapter {
        AdapterConfig::Prefix(c) => c.num_virtual_tokens,
        AdapterConfig::Lora(_) => 0,
    };
    if longest - 1 + prefix_len > weights.config.max_seq_len {
        return Err(TrainError::InvalidConfig(format!(
            "longest sequence {longest} plus prefix {prefix_len} exceeds max_seq_len {}",
            weights.config.max_seq_len
        )));
    }

    let mut adapter = Adapter::<f32>::init(
        &config.adapter,
        &weights.config,
        sub_seed(config.seed, "adapter-init"),
    )?;
    let order_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "batch-order"));
    let mut batcher = MicroBatcher::new(&data.train, config.micro_batch_tokens, order_rng);

    let hyper = config.hyper();
    let mut optimizer = OptimizerState::<f32>::new();
    let mut history: Vec<StepRecord> = Vec::new();
    let mut best: Option<BestMark> = None;
    let mut retained: Option<Checkpoint> = None;

    for step in 0..config.max_optimizer_steps {
        let mut loss_sum = 0.0f64;
        for _ in 0..config.grad_accum_steps {
            let batch = batcher.next_batch();
            let examples: Vec<&SequenceExample> = batch.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::<f32>::new();
            let mut binder = ParamBinder::new();
            let loss = micro_batch_loss(&mut tape, weights, &adapter, &examples, &mut binder)?;
            let loss_value = f64::from(tape.value(loss)[0]);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    batch_ids: examples.iter().map(|e| e.source_id.clone()).collect(),
                    loss: loss_value,
                });
            }
            loss_sum += loss_value;
            let scaled = tape.scale(loss, 1.0 / config.grad_accum_steps as f32);
            tape.backward(scaled)?;
            harvest_adapter_grads(&tape, &binder, &mut adapter);
        }

        let lr = lr_at(optimizer.step(), config.warmup_steps, config.learning_rate);
        let mut params = adapter.named_params_mut();
        adamw_step(&mut params, &mut optimizer, &hyper, lr)?;
        for (_, t) in adapter.named_params_mut() {
            t.zero_grad();
        }

        let mut record = StepRecord {
            step,
            lr,
            train_loss: loss_sum / config.grad_accum_steps as f64,
            val_accuracy: None,
            val_macro_f1: None,
        };

        let due = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if due && !data.validation.is_empty() {
            let report = evaluate(
                weights,
                Some(&adapter),
                &data.validation,
                eval_options,
                RunMeta {
                    model: "validation".into(),
                    adapter: adapter.mode_tag().into(),
                    strategy: String::new(),
                    decode: eval_options.decode.clone(),
                    eval_mode: eval_options.mode,
                    seed: config.seed,
                },
            )?;
            record.val_accuracy = Some(report.accuracy);
            record.val_macro_f1 = Some(report.macro_f1);
            let improved = match best {
                None => true,
                Some(b) => {
                    report.accuracy > b.accuracy
                        || (report.accuracy == b.accuracy && report.macro_f1 > b.macro_f1)
                }
            };
            if improved {
                best = Some(BestMark {
                    step,
                    accuracy: report.accuracy,
                    macro_f1: report.macro_f1,
                });
                let mut metrics = history.clone();
                metrics.push(record.clone());
                retained = Some(snapshot(
                    weights,
                    &adapter,
                    &optimizer,
                    config,
                    &batcher.rng,
                    metrics,
                    step + 1,
                ));
            }
        }
        history.push(record);
    }

    let checkpoint = match retained {
        Some(c) => c,
        None => snapshot(
            weights,
            &adapter,
            &optimizer,
            config,
            &batcher.rng,
            history.clone(),
            config.max_optimizer_steps,
        ),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        best,
    })
}

/// Optional full-parameter language-modeling warm phase over raw token
/// passages; loss covers every position. Mutates the base weights and
/// restores the frozen flag afterwards.
pub fn warm_pretrain(
    weights: &mut ModelWeights<f32>,
    passages: &[Vec<TokenId>],
    steps: u64,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    if passages.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for p in passages {
        if p.len() < 2 {
            return Err(TrainError::InvalidConfig(
                "warm passages need at least two tokens".into(),
            ));
        }
    }
    weights.set_trainable(true);
    let mut optimizer = OptimizerState::<f32>::new();
    let hyper = AdamWHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "warm-order"));
    let mut losses = Vec::with_capacity(steps as usize);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if order.is_empty() {
            use rand::seq::SliceRandom;
            order = (0..passages.len()).collect();
            order.shuffle(&mut rng);
        }
        let passage = &passages[order.pop().expect("nonempty order")];
        let inputs = &passage[..passage.len() - 1];
        let targets = &passage[1..];
        let mask = vec![true; targets.len()];

        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new();
        let logits = weights.forward_on_tape(&mut tape, inputs, None, None, Some(&mut binder))?;
        let loss = tape.cross_entropy(logits, targets, &mask)?;
        let loss_value = f64::from(tape.value(loss)[0]);
        if !loss_value.is_finite() {
            weights.set_trainable(false);
            return Err(TrainError::NonFiniteLoss {
                step,
                batch_ids: vec![format!("warm-passage-{step}")],
                loss: loss_value,
            });
        }
        losses.push(loss_value);
        tape.backward(loss)?;
        {
            let mut params = weights.named_params_mut();
            for (name, var) in binder.entries() {
                if let Some((_, tensor)) = params.iter_mut().find(|(n, _)| n == name) {
                    tape.write_grad_to(*var, tensor);
                }
            }
            let lr = lr_at(optimizer.step(), 10, learning_rate);
            adamw_step(&mut params, &mut optimizer, &hyper, lr)?;
        }
        for (_, t) in weights.named_params_mut() {
            t.zero_grad();
        }
    }
    weights.set_trainable(false);
    Ok(losses)
}
