//! Finite-difference gradient verification.
//!
//! The oracle never touches the backward pass: it evaluates the forward
//! graph twice per probed coordinate in `f64` (a central difference with
//! the configured step) and compares against the `f32` analytic gradient
//! from [`Tape::backward`].
//!
//! [`run_standard_suite`] exercises every differentiable tape operation on
//! randomized small shapes; the loss is `sum(output * r)` with a fixed
//! random, non-trainable `r` so that uniform-gradient blind spots (for
//! example a plain sum over a softmax row) cannot hide errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::TokenId;

/// A graph builder instantiable at any scalar type. The same builder runs
/// the `f32` analytic path and the `f64` finite-difference path.
pub trait GraphFn {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradReport {
    fn fold(&mut self, other: GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.coords_checked += other.coords_checked;
    }
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (eval(x + h) - eval(x - h)) / (2.0 * h)
}

fn loss_value<G: GraphFn>(builder: &G, inputs: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = builder.build(&mut tape, &vars)?;
    Ok(tape.value(loss)[0])
}

/// Checks the `f32` analytic gradient of every `requires_grad` input
/// against an `f64` central-difference oracle.
///
/// The relative error uses a unit floor: `|a - fd| / max(|a|, |fd|, 1)`.
pub fn check_gradients<G: GraphFn>(
    builder: &G,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<GradReport, TensorError> {
    // Analytic path in f32.
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast::<f32>).collect();
    let mut tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs32.iter().map(|t| tape.leaf(t)).collect();
    let loss = builder.build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradReport::default();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(vars[idx])
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for coord in 0..input.numel() {
            let base = input.data()[coord];
            let fd = central_difference(
                |v| {
                    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
                    probe[idx].data_mut()[coord] = v;
                    loss_value(builder, &probe).expect("probe graph builds")
                },
                base,
                step,
            );
            let a = f64::from(analytic[coord]);
            let scale = a.abs().max(fd.abs()).max(1.0);
            report.max_rel_err = report.max_rel_err.max((a - fd).abs() / scale);
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

// ── standard randomized op suite ─────────────────────────────────────

enum CaseKind {
    Matmul,
    Linear,
    Add,
    AddRow,
    Mul,
    Scale(f64),
    Softmax { axis: usize },
    MaskedRowSoftmax { mask: Arc<Vec<bool>> },
    CrossEntropy { targets: Vec<TokenId>, mask: Vec<bool> },
    LayerNorm,
    Gelu,
    Embedding { ids: Vec<TokenId> },
    Transpose,
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Composite { targets: Vec<TokenId>, mask: Vec<bool> },
}

struct Case {
    kind: CaseKind,
    /// All differentiable inputs, followed by one frozen weighting tensor
    /// unless the case already ends in a scalar.
    inputs: Vec<Tensor<f64>>,
}

impl GraphFn for Case {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, v: &[Var]) -> Result<Var, TensorError> {
        let out = match &self.kind {
            CaseKind::Matmul => tape.matmul(v[0], v[1])?,
            CaseKind::Linear => tape.linear(v[0], v[1])?,
            CaseKind::Add => tape.add(v[0], v[1])?,
            CaseKind::AddRow => tape.add_row(v[0], v[1])?,
            CaseKind::Mul => tape.mul(v[0], v[1])?,
            CaseKind::Scale(c) => tape.scale(v[0], S::from_f64c(*c)),
            CaseKind::Softmax { axis } => tape.softmax(v[0], *axis)?,
            CaseKind::MaskedRowSoftmax { mask } => tape.masked_row_softmax(v[0], mask.clone())?,
            CaseKind::CrossEntropy { targets, mask } => {
                return tape.cross_entropy(v[0], targets, mask);
            }
            CaseKind::LayerNorm => tape.layer_norm(v[0], v[1], v[2], S::from_f64c(1e-5))?,
            CaseKind::Gelu => tape.gelu(v[0]),
            CaseKind::Embedding { ids } => tape.embedding_lookup(v[0], ids)?,
            CaseKind::Transpose => tape.transpose(v[0])?,
            CaseKind::ConcatRows => tape.concat_rows(&[v[0], v[1]])?,
            CaseKind::ConcatCols => tape.concat_cols(&[v[0], v[1]])?,
            CaseKind::SliceRows { start, end } => tape.slice_rows(v[0], *start, *end)?,
            CaseKind::SliceCols { start, end } => tape.slice_cols(v[0], *start, *end)?,
            CaseKind::Composite { targets, mask } => {
                let h = tape.matmul(v[0], v[1])?;
                let s = tape.softmax(h, 1)?;
                return tape.cross_entropy(s, targets, mask);
            }
        };
        let weights = *v.last().expect("weighting tensor present");
        let weighted = tape.mul(out, weights)?;
        Ok(tape.sum(weighted))
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, trainable: bool) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, 1.0, rng);
    t.set_requires_grad(trainable);
    t
}

fn rand_dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

fn rand_mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
    if !mask.iter().any(|m| *m) {
        mask[rng.gen_range(0..len)] = true;
    }
    mask
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (rand_dim(rng), rand_dim(rng), rand_dim(rng));
    match op {
        "matmul" => Case {
            kind: CaseKind::Matmul,
            inputs: vec![
                rand_tensor(rng, vec![m, k], true),
                rand_tensor(rng, vec![k, n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "linear" => Case {
            kind: CaseKind::Linear,
            inputs: vec![
                rand_tensor(rng, vec![m, k], true),
                rand_tensor(rng, vec![n, k], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "add" => Case {
            kind: CaseKind::Add,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "add_row" => Case {
            kind: CaseKind::AddRow,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "multiply" => Case {
            kind: CaseKind::Mul,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "scale" => Case {
            kind: CaseKind::Scale(rng.gen_range(-2.0..2.0)),
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "softmax" => {
            let axis = rng.gen_range(0..2);
            Case {
                kind: CaseKind::Softmax { axis },
                inputs: vec![
                    rand_tensor(rng, vec![m, n], true),
                    rand_tensor(rng, vec![m, n], false),
                ],
            }
        }
        "masked_row_softmax" => {
            let mut mask = Vec::with_capacity(m * n);
            for _ in 0..m {
                let row = rand_mask(rng, n);
                mask.extend(row);
            }
            Case {
                kind: CaseKind::MaskedRowSoftmax {
                    mask: Arc::new(mask),
                },
                inputs: vec![
                    rand_tensor(rng, vec![m, n], true),
                    rand_tensor(rng, vec![m, n], false),
                ],
            }
        }
        "cross_entropy" => {
            let v = rand_dim(rng).max(2);
            let targets = (0..m).map(|_| rng.gen_range(0..v) as TokenId).collect();
            let mask = rand_mask(rng, m);
            Case {
                kind: CaseKind::CrossEntropy { targets, mask },
                inputs: vec![rand_tensor(rng, vec![m, v], true)],
            }
        }
        "layer_norm" => Case {
            kind: CaseKind::LayerNorm,
            inputs: vec![
                rand_tensor(rng, vec![m, n.max(2)], true),
                rand_tensor(rng, vec![n.max(2)], true),
                rand_tensor(rng, vec![n.max(2)], true),
                rand_tensor(rng, vec![m, n.max(2)], false),
            ],
        },
        "gelu" => Case {
            kind: CaseKind::Gelu,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, n], false),
            ],
        },
        "embedding_lookup" => {
            let vocab = rand_dim(rng);
            let t = rand_dim(rng);
            let ids = (0..t).map(|_| rng.gen_range(0..vocab) as TokenId).collect();
            Case {
                kind: CaseKind::Embedding { ids },
                inputs: vec![
                    rand_tensor(rng, vec![vocab, n], true),
                    rand_tensor(rng, vec![t, n], false),
                ],
            }
        }
        "transpose" => Case {
            kind: CaseKind::Transpose,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![n, m], false),
            ],
        },
        "concat_rows" => Case {
            kind: CaseKind::ConcatRows,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![k, n], true),
                rand_tensor(rng, vec![m + k, n], false),
            ],
        },
        "concat_cols" => Case {
            kind: CaseKind::ConcatCols,
            inputs: vec![
                rand_tensor(rng, vec![m, n], true),
                rand_tensor(rng, vec![m, k], true),
                rand_tensor(rng, vec![m, n + k], false),
            ],
        },
        "slice_rows" => {
            let start = rng.gen_range(0..m);
            let end = rng.gen_range(start + 1..=m);
            Case {
                kind: CaseKind::SliceRows { start, end },
                inputs: vec![
                    rand_tensor(rng, vec![m, n], true),
                    rand_tensor(rng, vec![end - start, n], false),
                ],
            }
        }
        "slice_cols" => {
            let start = rng.gen_range(0..n);
            let end = rng.gen_range(start + 1..=n);
            Case {
                kind: CaseKind::SliceCols { start, end },
                inputs: vec![
                    rand_tensor(rng, vec![m, n], true),
                    rand_tensor(rng, vec![m, end - start], false),
                ],
            }
        }
        "composite" => {
            let v = n.max(2);
            let targets = (0..m).map(|_| rng.gen_range(0..v) as TokenId).collect();
            let mask = rand_mask(rng, m);
            Case {
                kind: CaseKind::Composite { targets, mask },
                inputs: vec![
                    rand_tensor(rng, vec![m, k], true),
                    rand_tensor(rng, vec![k, v], true),
                ],
            }
        }
        other => panic!("unknown op case {other}"),
    }
}

pub const STANDARD_OPS: &[&str] = &[
    "matmul",
    "linear",
    "add",
    "add_row",
    "multiply",
    "scale",
    "softmax",
    "masked_row_softmax",
    "cross_entropy",
    "layer_norm",
    "gelu",
    "embedding_lookup",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "composite",
];

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub report: GradReport,
}

/// Runs `trials_per_op` randomized gradient checks for every tape op at
/// step `1e-3` and returns the per-op worst relative error.
pub fn run_standard_suite(seed: u64, trials_per_op: usize) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    STANDARD_OPS
        .iter()
        .map(|op| {
            let mut folded = GradReport::default();
            for _ in 0..trials_per_op {
                let case = make_case(op, &mut rng);
                let report =
                    check_gradients(&case, &case.inputs, 1e-3).expect("suite graphs build");
                folded.fold(report);
            }
            OpReport {
                op,
                trials: trials_per_op,
                report: folded,
            }
        })
        .collect()
}
