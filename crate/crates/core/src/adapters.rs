//! Parameter-efficient fine-tuning adapters over a frozen base model.
//!
//! Two mechanisms, each an independently trainable parameter set:
//!
//! * LoRA: an additive low-rank delta `(alpha/r) * B * A` on selected
//!   attention projections. `B` starts at zero so a freshly attached
//!   adapter is a no-op; the training path never materializes the merged
//!   matrix.
//! * Prefix tuning: trainable embedding rows injected into the input
//!   stream before the question segment. No per-layer key/value prefixes
//!   and no reparameterization network; the virtual rows live purely at
//!   the embedding level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ParamBinder};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Projections that can receive a LoRA adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub fn field_name(self) -> &'static str {
        match self {
            LoraTarget::Q => "attn_q",
            LoraTarget::K => "attn_k",
            LoraTarget::V => "attn_v",
            LoraTarget::O => "attn_o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projections adapted in every layer.
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 16.0,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::InvalidConfig("LoRA rank must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(AdapterError::InvalidConfig("LoRA alpha must be > 0".into()));
        }
        if self.targets.is_empty() {
            return Err(AdapterError::InvalidConfig("LoRA target set is empty".into()));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One adapted projection: `A[r, d_in]` Gaussian, `B[d_out, r]` zero.
#[derive(Debug, Clone)]
pub struct LoraLayer<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub scaling: S,
}

impl<S: Scalar> LoraLayer<S> {
    pub fn init<R: rand::Rng>(
        d_in: usize,
        d_out: usize,
        config: &LoraConfig,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut a = Tensor::randn(vec![config.rank, d_in], crate::model::INIT_STD, rng);
        a.set_requires_grad(true);
        let mut b = Tensor::zeros(vec![d_out, config.rank]);
        b.set_requires_grad(true);
        Ok(Self {
            a,
            b,
            scaling: S::from_f64c(config.scaling()),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Adapter-path projection `x * (W + (alpha/r) * B * A)^T`, computed as the
/// base projection plus the low-rank path.
pub fn lora_linear_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    layer: &LoraLayer<S>,
    name: &str,
    binder: &mut Option<&mut ParamBinder>,
) -> Result<Var, TensorError> {
    let a = tape.leaf(&layer.a);
    let b = tape.leaf(&layer.b);
    if let Some(binder) = binder.as_mut() {
        binder.record(format!("{name}.a"), a);
        binder.record(format!("{name}.b"), b);
    }
    let base = tape.linear(x, w)?;
    let down = tape.linear(x, a)?;
    let up = tape.linear(down, b)?;
    let scaled = tape.scale(up, layer.scaling);
    tape.add(base, scaled)
}

/// Standalone adapter-path forward over plain tensors.
pub fn lora_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    layer: &LoraLayer<S>,
) -> Result<Tensor<S>, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let out = lora_linear_on_tape(&mut tape, xv, wv, layer, "lora", &mut None)?;
    Ok(tape.tensor_of(out))
}

/// Dense merge `W + (alpha/r) * B * A`. Merging twice with the same layer
/// double-counts the delta; callers merge once.
pub fn lora_merge<S: Scalar>(
    w: &Tensor<S>,
    layer: &LoraLayer<S>,
) -> Result<Tensor<S>, TensorError> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = layer.rank();
    if layer.a.shape() != [r, d_in] || layer.b.shape() != [d_out, r] {
        return Err(TensorError::DimensionMismatch {
            op: "lora_merge",
            lhs: w.shape().to_vec(),
            rhs: layer.a.shape().to_vec(),
        });
    }
    let mut merged = w.data().to_vec();
    // merged += scaling * B[d_out, r] * A[r, d_in]
    S::gemm(
        false,
        false,
        d_out,
        r,
        d_in,
        layer.scaling,
        layer.b.data(),
        layer.a.data(),
        S::one(),
        &mut merged,
    );
    Tensor::new(vec![d_out, d_in], merged)
}

/// Per-layer optional adapters, one slot per projection.
#[derive(Debug, Clone, Default)]
pub struct LayerAdapters<S> {
    pub q: Option<LoraLayer<S>>,
    pub k: Option<LoraLayer<S>>,
    pub v: Option<LoraLayer<S>>,
    pub o: Option<LoraLayer<S>>,
}

#[derive(Debug, Clone)]
pub struct LoraSet<S> {
    pub config: LoraConfig,
    pub layers: Vec<LayerAdapters<S>>,
}

impl<S: Scalar> LoraSet<S> {
    pub fn init(
        config: &LoraConfig,
        model: &ModelConfig,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model;
        let mut layers = Vec::with_capacity(model.n_layers);
        for _ in 0..model.n_layers {
            let mut slot = LayerAdapters::default();
            for target in &config.targets {
                let layer = LoraLayer::init(d, d, config, &mut rng)?;
                match target {
                    LoraTarget::Q => slot.q = Some(layer),
                    LoraTarget::K => slot.k = Some(layer),
                    LoraTarget::V => slot.v = Some(layer),
                    LoraTarget::O => slot.o = Some(layer),
                }
            }
            layers.push(slot);
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, slot) in self.layers.iter().enumerate() {
            for (target, layer) in [
                (LoraTarget::Q, &slot.q),
                (LoraTarget::K, &slot.k),
                (LoraTarget::V, &slot.v),
                (LoraTarget::O, &slot.o),
            ] {
                if let Some(l) = layer {
                    let base = format!("adapter.lora.{i}.{}", target.field_name());
                    out.push((format!("{base}.a"), &l.a));
                    out.push((format!("{base}.b"), &l.b));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        for (i, slot) in self.layers.iter_mut().enumerate() {
            for (target, layer) in [
                (LoraTarget::Q, &mut slot.q),
                (LoraTarget::K, &mut slot.k),
                (LoraTarget::V, &mut slot.v),
                (LoraTarget::O, &mut slot.o),
            ] {
                if let Some(l) = layer {
                    let base = format!("adapter.lora.{i}.{}", target.field_name());
                    out.push((format!("{base}.a"), &mut l.a));
                    out.push((format!("{base}.b"), &mut l.b));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InsertPosition {
    #[default]
    #[serde(rename = "before-question")]
    BeforeQuestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub num_virtual_tokens: usize,
    pub insert_position: InsertPosition,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            num_virtual_tokens: 16,
            insert_position: InsertPosition::BeforeQuestion,
        }
    }
}

impl PrefixConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.num_virtual_tokens == 0 {
            return Err(AdapterError::InvalidConfig(
                "prefix needs at least one virtual token".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable virtual-token rows `P[m, d_model]`.
#[derive(Debug, Clone)]
pub struct PrefixParams<S> {
    pub p: Tensor<S>,
}

impl<S: Scalar> PrefixParams<S> {
    pub fn init(config: &PrefixConfig, model: &ModelConfig, seed: u64) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Tensor::randn(
            vec![config.num_virtual_tokens, model.d_model],
            crate::model::INIT_STD,
            &mut rng,
        );
        p.set_requires_grad(true);
        Ok(Self { p })
    }

    /// Construct from raw rows, used by tests and checkpoint loading.
    pub fn from_tensor(p: Tensor<S>) -> Self {
        Self { p }
    }

    pub fn len(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.p.numel()
    }
}

/// `embedded[0..question_start] ++ P ++ embedded[question_start..]`.
pub fn prefix_inject_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    embedded: Var,
    p: Var,
    question_start: usize,
) -> Result<Var, TensorError> {
    let t = tape.shape_of(embedded)[0];
    if question_start > t {
        return Err(TensorError::IndexOutOfRange {
            op: "prefix_inject",
            index: question_start,
            len: t,
        });
    }
    let before = tape.slice_rows(embedded, 0, question_start)?;
    let after = tape.slice_rows(embedded, question_start, t)?;
    tape.concat_rows(&[before, p, after])
}

/// Standalone injection over plain tensors.
pub fn prefix_inject<S: Scalar>(
    embedded: &Tensor<S>,
    prefix: &PrefixParams<S>,
    question_start: usize,
) -> Result<Tensor<S>, TensorError> {
    let mut tape = Tape::new();
    let e = tape.leaf(embedded);
    let p = tape.leaf(&prefix.p);
    let out = prefix_inject_on_tape(&mut tape, e, p, question_start)?;
    Ok(tape.tensor_of(out))
}

/// Adapter mode + config, the serializable half of an [`Adapter`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AdapterConfig {
    Lora(LoraConfig),
    Prefix(PrefixConfig),
}

impl AdapterConfig {
    pub fn mode_tag(&self) -> &'static str {
        match self {
            AdapterConfig::Lora(_) => "lora",
            AdapterConfig::Prefix(_) => "prefix",
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        match self {
            AdapterConfig::Lora(c) => c.validate(),
            AdapterConfig::Prefix(c) => c.validate(),
        }
    }

    /// Closed-form trainable parameter count for this adapter on the given
    /// model: LoRA contributes `r * (d_in + d_out)` per target per layer,
    /// prefix contributes `m * d_model`.
    pub fn param_count(&self, model: &ModelConfig) -> Result<usize, AdapterError> {
        self.validate()?;
        Ok(match self {
            AdapterConfig::Lora(c) => {
                let d = model.d_model;
                model.n_layers * c.targets.len() * c.rank * (d + d)
            }
            AdapterConfig::Prefix(c) => c.num_virtual_tokens * model.d_model,
        })
    }
}

/// A live adapter: trainable state plus its config.
#[derive(Debug, Clone)]
pub enum Adapter<S> {
    Lora(LoraSet<S>),
    Prefix {
        config: PrefixConfig,
        params: PrefixParams<S>,
    },
}

impl<S: Scalar> Adapter<S> {
    pub fn init(config: &AdapterConfig, model: &ModelConfig, seed: u64) -> Result<Self, AdapterError> {
        match config {
            AdapterConfig::Lora(c) => Ok(Adapter::Lora(LoraSet::init(c, model, seed)?)),
            AdapterConfig::Prefix(c) => Ok(Adapter::Prefix {
                config: c.clone(),
                params: PrefixParams::init(c, model, seed)?,
            }),
        }
    }

    pub fn config(&self) -> AdapterConfig {
        match self {
            Adapter::Lora(set) => AdapterConfig::Lora(set.config.clone()),
            Adapter::Prefix { config, .. } => AdapterConfig::Prefix(config.clone()),
        }
    }

    pub fn mode_tag(&self) -> &'static str {
        match self {
            Adapter::Lora(_) => "lora",
            Adapter::Prefix { .. } => "prefix",
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        match self {
            Adapter::Lora(set) => set.named_params(),
            Adapter::Prefix { params, .. } => vec![("adapter.prefix.p".into(), &params.p)],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        match self {
            Adapter::Lora(set) => set.named_params_mut(),
            Adapter::Prefix { params, .. } => vec![("adapter.prefix.p".into(), &mut params.p)],
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn lora_set(&self) -> Option<&LoraSet<S>> {
        match self {
            Adapter::Lora(set) => Some(set),
            Adapter::Prefix { .. } => None,
        }
    }
}

/// Trainable-parameter accounting for an attached adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableCount {
    pub count: usize,
    pub ratio: f64,
}

pub fn trainable_params<S: Scalar>(
    model: &crate::model::ModelWeights<S>,
    adapter: &Adapter<S>,
) -> TrainableCount {
    let count = adapter.num_params();
    TrainableCount {
        count,
        ratio: count as f64 / model.num_params() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, PrefixInjection};
    use rand::SeedableRng;

    fn ident2() -> Tensor<f32> {
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_init_b_makes_adapter_a_exact_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LoraConfig::default();
        let layer = LoraLayer::<f32>::init(8, 8, &cfg, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let w = Tensor::randn(vec![8, 8], 1.0, &mut rng);

        let adapted = lora_forward(&x, &w, &layer).unwrap();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let plain = tape.linear(xv, wv).unwrap();
        let base = tape.tensor_of(plain);

        for (a, b) in adapted.data().iter().zip(base.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lora_forward_hand_case() {
        // x=[1,0], W=I, r=1, alpha=1, A=[[1,1]], B=[[1],[0]] -> [2,0]
        let layer = LoraLayer {
            a: Tensor::new(vec![1, 2], vec![1.0f32, 1.0]).unwrap(),
            b: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
            scaling: 1.0,
        };
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let out = lora_forward(&x, &ident2(), &layer).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
    }

    #[test]
    fn alpha_equal_rank_gives_unit_scaling() {
        let cfg = LoraConfig {
            rank: 4,
            alpha: 4.0,
            ..LoraConfig::default()
        };
        assert_eq!(cfg.scaling(), 1.0);
    }

    #[test]
    fn merge_with_zero_b_returns_w_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = LoraConfig::default();
        let layer = LoraLayer::<f32>::init(6, 5, &cfg, &mut rng).unwrap();
        let w = Tensor::randn(vec![5, 6], 0.3, &mut rng);
        let merged = lora_merge(&w, &layer).unwrap();
        for (a, b) in merged.data().iter().zip(w.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn merge_equivalence_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let cfg = LoraConfig {
                rank: 4,
                alpha: 16.0,
                ..LoraConfig::default()
            };
            let mut layer = LoraLayer::<f32>::init(8, 8, &cfg, &mut rng).unwrap();
            layer.b = Tensor::randn(vec![8, 4], 0.2, &mut rng);
            let w = Tensor::randn(vec![8, 8], 0.3, &mut rng);
            let x = Tensor::randn(vec![4, 8], 1.0, &mut rng);

            let adapter_path = lora_forward(&x, &w, &layer).unwrap();
            let merged = lora_merge(&w, &layer).unwrap();
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(&x);
            let mv = tape.leaf(&merged);
            let out = tape.linear(xv, mv).unwrap();
            let merged_path = tape.tensor_of(out);

            assert!(adapter_path.max_abs_diff(&merged_path) < 1e-5);
        }
    }

    #[test]
    fn merging_twice_double_counts_the_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LoraConfig {
            rank: 2,
            alpha: 2.0,
            ..LoraConfig::default()
        };
        let mut layer = LoraLayer::<f64>::init(3, 3, &cfg, &mut rng).unwrap();
        layer.b = Tensor::randn(vec![3, 2], 0.5, &mut rng);
        let w = Tensor::<f64>::zeros(vec![3, 3]);
        let once = lora_merge(&w, &layer).unwrap();
        let twice = lora_merge(&once, &layer).unwrap();
        for (two, one) in twice.data().iter().zip(once.data()) {
            assert!((two - 2.0 * one).abs() < 1e-12);
        }
    }

    #[test]
    fn prefix_inject_with_zero_rows_is_identity() {
        let embedded = Tensor::<f32>::randn(
            vec![4, 3],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let prefix = PrefixParams::from_tensor(Tensor::zeros(vec![0, 3]));
        let out = prefix_inject(&embedded, &prefix, 2).unwrap();
        assert_eq!(out.data(), embedded.data());
    }

    #[test]
    fn prefix_inject_concatenation_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let embedded = Tensor::<f32>::randn(vec![10, 4], 1.0, &mut rng);
        let p = Tensor::<f32>::randn(vec![16, 4], 1.0, &mut rng);
        let prefix = PrefixParams::from_tensor(p.clone());
        let out = prefix_inject(&embedded, &prefix, 0).unwrap();
        assert_eq!(out.shape(), &[26, 4]);
        assert_eq!(&out.data()[..16 * 4], p.data());
        assert_eq!(&out.data()[16 * 4..], embedded.data());
    }

    #[test]
    fn prefix_grads_flow_while_base_stays_frozen() {
        let model_cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 12,
            d_ff: 24,
            vocab_size: 11,
            max_seq_len: 32,
        };
        let weights = init_weights::<f32>(&model_cfg, 7).unwrap();
        let prefix_cfg = PrefixConfig {
            num_virtual_tokens: 3,
            insert_position: InsertPosition::BeforeQuestion,
        };
        let params = PrefixParams::init(&prefix_cfg, &model_cfg, 8).unwrap();

        let mut tape = Tape::<f32>::new();
        let mut binder = ParamBinder::new();
        let logits = weights
            .forward_on_tape(
                &mut tape,
                &[1, 2, 3, 4],
                Some(PrefixInjection {
                    params: &params,
                    question_start: 1,
                }),
                None,
                Some(&mut binder),
            )
            .unwrap();
        let loss = tape
            .cross_entropy(logits, &[2, 3, 4, 5], &[true; 4])
            .unwrap();
        tape.backward(loss).unwrap();

        let mut saw_prefix = false;
        for (name, var) in binder.entries() {
            let grad = tape.grad(*var);
            if name == "adapter.prefix.p" {
                saw_prefix = true;
                let g = grad.expect("prefix gradient populated");
                assert!(g.iter().any(|v| *v != 0.0));
            } else {
                assert!(grad.is_none(), "frozen base weight {name} got a gradient");
            }
        }
        assert!(saw_prefix);
    }

    #[test]
    fn trainable_counts_match_closed_forms() {
        let model_cfg = ModelConfig::default();
        let weights = init_weights::<f32>(&model_cfg, 0).unwrap();

        let lora_cfg = AdapterConfig::Lora(LoraConfig::default());
        // 4 layers x 2 targets x 4 * (64 + 64) = 4096
        assert_eq!(lora_cfg.param_count(&model_cfg).unwrap(), 4096);
        let lora = Adapter::init(&lora_cfg, &model_cfg, 1).unwrap();
        let counted = trainable_params(&weights, &lora);
        assert_eq!(counted.count, 4096);
        assert!((counted.ratio - 4096.0 / weights.num_params() as f64).abs() < 1e-12);

        let prefix_cfg = AdapterConfig::Prefix(PrefixConfig::default());
        // 16 * 64 = 1024
        assert_eq!(prefix_cfg.param_count(&model_cfg).unwrap(), 1024);
        let prefix = Adapter::init(&prefix_cfg, &model_cfg, 1).unwrap();
        assert_eq!(trainable_params(&weights, &prefix).count, 1024);
    }

    #[test]
    fn zero_rank_is_a_configuration_error() {
        let cfg = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(AdapterError::InvalidConfig(_))));
        let ac = AdapterConfig::Lora(cfg);
        assert!(ac.param_count(&ModelConfig::default()).is_err());
    }

    #[test]
    fn zero_b_lora_leaves_model_logits_unchanged() {
        let model_cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 17,
            max_seq_len: 16,
        };
        let weights = init_weights::<f32>(&model_cfg, 3).unwrap();
        let lora = LoraSet::<f32>::init(&LoraConfig::default(), &model_cfg, 4).unwrap();
        let tokens = [5, 1, 9, 2];
        let plain = weights.forward(&tokens, None, None).unwrap();
        let adapted = weights.forward(&tokens, None, Some(&lora)).unwrap();
        assert!(plain.max_abs_diff(&adapted) <= 1e-7);
    }
}
