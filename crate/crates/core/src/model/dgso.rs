//! Dynamic feature-graph learning over the `d` fused dimensions.
//!
//! Each dimension is a graph node whose state is its own last `n` values.
//! Per layer a row-stochastic relation matrix is built from the node states,
//! smoothed over time with an exponential moving average, and used for a
//! residual graph convolution followed by layer normalization.

use crate::autodiff::{Tape, Var};
use crate::error::{KgcmError, Result};
use crate::params::{Binder, ModelParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn layer_name(layer: usize, field: &str) -> String {
    format!("dgso.l{layer}.{field}")
}

pub fn init(params: &mut ModelParams, layers: usize, n: usize, n_proj: usize, rng: &mut SeededRng) {
    for l in 0..layers {
        params.init_glorot(&layer_name(l, "w_q"), n, n_proj, rng);
        params.init_glorot(&layer_name(l, "w_k"), n, n_proj, rng);
        params.init_glorot(&layer_name(l, "w"), n, n, rng);
        params.init_constant(&layer_name(l, "ln_gamma"), &[n], 1.0);
        params.init_constant(&layer_name(l, "ln_beta"), &[n], 0.0);
    }
}

/// A `d x d` row-stochastic feature relation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralMatrix {
    matrix: Tensor,
}

impl StructuralMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn new(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.as_matrix("StructuralMatrix")?;
        if r != c {
            return Err(KgcmError::shape(
                "StructuralMatrix",
                format!("expected square matrix, got {r}x{c}"),
            ));
        }
        let s = Self { matrix };
        let dev = s.max_row_deviation();
        if dev > Self::ROW_TOLERANCE || s.matrix.data().iter().any(|v| *v < 0.0) {
            return Err(KgcmError::contract(
                "StructuralMatrix",
                format!("not row-stochastic (max row-sum deviation {dev:e})"),
            ));
        }
        Ok(s)
    }

    /// Every entry `1/d`.
    pub fn uniform(d: usize) -> Self {
        Self {
            matrix: Tensor::filled(&[d, d], 1.0 / d as f64),
        }
    }

    /// Divides each row by its sum.
    pub fn renormalized(mut matrix: Tensor) -> Result<Self> {
        let c = matrix.last_dim();
        for row in matrix.data_mut().chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(KgcmError::contract("StructuralMatrix", "row with zero mass"));
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self::new(matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn max_row_deviation(&self) -> f64 {
        max_row_deviation(&self.matrix)
    }
}

/// Largest `|row sum - 1|` over the rows of a rank-2 or rank-3 array.
pub fn max_row_deviation(t: &Tensor) -> f64 {
    t.data()
        .chunks(t.last_dim())
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn check_lambda(ema_lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ema_lambda) {
        return Err(KgcmError::Config(format!(
            "ema_lambda must lie in [0, 1], got {ema_lambda}"
        )));
    }
    Ok(())
}

/// `lambda * prev + (1 - lambda) * raw`.
pub fn ema_update(
    prev: &StructuralMatrix,
    raw: &StructuralMatrix,
    ema_lambda: f64,
) -> Result<StructuralMatrix> {
    check_lambda(ema_lambda)?;
    if prev.dim() != raw.dim() {
        return Err(KgcmError::shape(
            "ema_update",
            format!("dims {} and {}", prev.dim(), raw.dim()),
        ));
    }
    let data = ema_values(prev.matrix.data(), raw.matrix.data(), ema_lambda);
    Ok(StructuralMatrix {
        matrix: Tensor::from_parts(raw.matrix.dims().to_vec(), data),
    })
}

fn ema_values(prev: &[f64], raw: &[f64], ema_lambda: f64) -> Vec<f64> {
    prev.iter()
        .zip(raw)
        .map(|(p, r)| ema_lambda * p + (1.0 - ema_lambda) * r)
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct DgsoLayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl DgsoLayerVars {
    pub fn bind(tape: &mut Tape, binder: &mut Binder<'_>, layer: usize) -> Result<Self> {
        Ok(Self {
            w_q: binder.get(tape, &layer_name(layer, "w_q"))?,
            w_k: binder.get(tape, &layer_name(layer, "w_k"))?,
            w: binder.get(tape, &layer_name(layer, "w"))?,
            gamma: binder.get(tape, &layer_name(layer, "ln_gamma"))?,
            beta: binder.get(tape, &layer_name(layer, "ln_beta"))?,
        })
    }
}

/// Node states for every step: `out[t]` is `d x n` with row `i` holding the
/// last `n` values of fused dimension `i` up to step `t`. Returns the states
/// and the number of padded (repeated earliest) entries per dimension at the
/// first step.
pub fn lift_to_nodes(tape: &mut Tape, fused: Var, n: usize) -> Result<(Var, usize)> {
    let lifted = tape.lift_history(fused, n)?;
    Ok((lifted, n.saturating_sub(1)))
}

/// `softmax_rows(ReLU((H W_Q)(H W_K)^T))` for states of shape `d x n` or
/// `T x d x n`.
pub fn build_relation_matrix(tape: &mut Tape, states: Var, w_q: Var, w_k: Var) -> Result<Var> {
    let q = tape.matmul(states, w_q)?;
    let k = tape.matmul(states, w_k)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.relu(scores)?;
    tape.softmax(scores)
}

/// Time-smooths a `T x d x d` stack of raw relation matrices, starting from
/// the uniform matrix. Returns the smoothed stack and a copy of its values.
pub fn smooth_relations(tape: &mut Tape, raw: Var, ema_lambda: f64) -> Result<(Var, Tensor)> {
    check_lambda(ema_lambda)?;
    let dims = tape.dims(raw).to_vec();
    let [_, d, d2] = dims[..] else {
        return Err(KgcmError::shape(
            "smooth_relations",
            format!("expected T x d x d, got {dims:?}"),
        ));
    };
    if d != d2 {
        return Err(KgcmError::shape("smooth_relations", "relations must be square"));
    }
    let uniform = vec![1.0 / d as f64; d * d];
    let out = tape.ema_scan(raw, &uniform, ema_lambda)?;
    let values = tape.value(out).clone();
    Ok((out, values))
}

/// `LN(ReLU(A H W) + H)` with normalization over each node's `n` entries.
pub fn graph_conv_layer(tape: &mut Tape, states: Var, relation: Var, vars: &DgsoLayerVars) -> Result<Var> {
    let mixed = tape.matmul(relation, states)?;
    let mixed = tape.matmul(mixed, vars.w)?;
    let activated = tape.relu(mixed)?;
    let residual = tape.add(activated, states)?;
    tape.layer_norm(residual, vars.gamma, vars.beta, LN_EPS)
}

#[derive(Debug)]
pub struct DgsoOutput {
    /// Final node states, `T x d x n`.
    pub states: Var,
    /// Per-step summary `fused + states[.., .., n-1]`, `T x d`.
    pub readout: Var,
    /// Raw relation matrices per layer (`T x d x d`).
    pub raw: Vec<Var>,
    /// Smoothed relation matrices per layer (`T x d x d`, values only).
    pub smoothed: Vec<Tensor>,
    pub pad_count: usize,
}

/// Lift, then per layer: relation matrix, time smoothing, graph convolution.
pub fn run_dgso(
    tape: &mut Tape,
    fused: Var,
    layers: &[DgsoLayerVars],
    n: usize,
    ema_lambda: f64,
) -> Result<DgsoOutput> {
    if layers.is_empty() {
        return Err(KgcmError::Config("graph stage needs at least one layer".into()));
    }
    let (mut states, pad_count) = lift_to_nodes(tape, fused, n)?;
    let mut raw = Vec::with_capacity(layers.len());
    let mut smoothed = Vec::with_capacity(layers.len());
    for vars in layers {
        let r = build_relation_matrix(tape, states, vars.w_q, vars.w_k)?;
        let (a, values) = smooth_relations(tape, r, ema_lambda)?;
        states = graph_conv_layer(tape, states, a, vars)?;
        raw.push(r);
        smoothed.push(values);
    }
    let current = tape.select_last(states, n - 1)?;
    let readout = tape.add(fused, current)?;
    Ok(DgsoOutput {
        states,
        readout,
        raw,
        smoothed,
        pad_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn lift_definition() {
        let mut tape = Tape::new();
        let h = tape.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let (lifted, _) = lift_to_nodes(&mut tape, h, 2).unwrap();
        let v = tape.value(lifted);
        assert_eq!(v.dims(), &[2, 2, 2]);
        // step 1: rows [[1,3],[2,4]]
        assert_eq!(&v.data()[4..], &[1.0, 3.0, 2.0, 4.0]);

        let (lifted, _) = lift_to_nodes(&mut tape, h, 1).unwrap();
        assert_eq!(&tape.value(lifted).data()[2..], &[3.0, 4.0]);
    }

    #[test]
    fn identical_states_give_uniform_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::filled(&[3, 2], 0.7)).unwrap();
        let wq = tape.constant(m(&[vec![1.0, 0.5], vec![-0.3, 2.0]])).unwrap();
        let wk = tape.constant(m(&[vec![0.2, 0.1], vec![1.0, -1.0]])).unwrap();
        let a = build_relation_matrix(&mut tape, h, wq, wk).unwrap();
        for v in tape.value(a).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_scores_give_uniform_rows() {
        let mut tape = Tape::new();
        // Q = [1, -1]^T-ish rows, K rows positive: Q K^T has negative entries
        // for node 1 only; node 0 row is positive. Use W_K = -W_Q to make all
        // scores q_i . (-q_j) <= 0 when states are all positive multiples.
        let h = tape.constant(m(&[vec![1.0], vec![2.0]])).unwrap();
        let wq = tape.constant(m(&[vec![1.0]])).unwrap();
        let wk = tape.constant(m(&[vec![-1.0]])).unwrap();
        let a = build_relation_matrix(&mut tape, h, wq, wk).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5; 4]);
    }

    #[test]
    fn ema_examples() {
        let id = StructuralMatrix::new(Tensor::identity(2)).unwrap();
        let swap = StructuralMatrix::new(m(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(ema_update(&id, &swap, 1.0).unwrap(), id);
        assert_eq!(ema_update(&id, &swap, 0.0).unwrap(), swap);
        assert_eq!(
            ema_update(&id, &swap, 0.5).unwrap().matrix().data(),
            &[0.5; 4]
        );
        assert!(matches!(
            ema_update(&id, &swap, 1.5),
            Err(KgcmError::Config(_))
        ));
    }

    #[test]
    fn conv_with_identity_relation_and_zero_weight_is_layer_norm() {
        let mut tape = Tape::new();
        let h = tape
            .constant(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 4.0, -1.0, 0.0, 5.0]).unwrap())
            .unwrap();
        let a = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let vars = DgsoLayerVars {
            w_q: h,
            w_k: h,
            w: tape.constant(Tensor::zeros(&[3, 3])).unwrap(),
            gamma: tape.constant(Tensor::filled(&[3], 1.0)).unwrap(),
            beta: tape.constant(Tensor::zeros(&[3])).unwrap(),
        };
        let out = graph_conv_layer(&mut tape, h, a, &vars).unwrap();
        let expected = tape.layer_norm(h, vars.gamma, vars.beta, LN_EPS).unwrap();
        assert_eq!(tape.value(out), tape.value(expected));
    }

    #[test]
    fn conv_hand_oracle_single_history() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap()).unwrap();
        let a = tape.constant(Tensor::new(&[1, 2, 2], vec![0.5; 4]).unwrap()).unwrap();
        let w = tape.constant(m(&[vec![1.0]])).unwrap();
        let mixed = tape.matmul(a, h).unwrap();
        let mixed = tape.matmul(mixed, w).unwrap();
        assert_eq!(tape.value(mixed).data(), &[3.0, 3.0]);
        let vars = DgsoLayerVars {
            w_q: w,
            w_k: w,
            w,
            gamma: tape.constant(Tensor::filled(&[1], 1.0)).unwrap(),
            beta: tape.constant(Tensor::zeros(&[1])).unwrap(),
        };
        let out = graph_conv_layer(&mut tape, h, a, &vars).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn smoothing_matches_ema_update() {
        let mut tape = Tape::new();
        let raw_values = vec![
            0.2, 0.8, 0.6, 0.4, //
            0.9, 0.1, 0.3, 0.7, //
            0.5, 0.5, 0.0, 1.0,
        ];
        let raw = tape.leaf(Tensor::new(&[3, 2, 2], raw_values.clone()).unwrap(), true).unwrap();
        let (a, values) = smooth_relations(&mut tape, raw, 0.9).unwrap();
        assert_eq!(tape.value(a), &values);
        let mut prev = StructuralMatrix::uniform(2);
        for t in 0..3 {
            let r = StructuralMatrix::new(Tensor::new(&[2, 2], raw_values[t * 4..t * 4 + 4].to_vec()).unwrap()).unwrap();
            prev = ema_update(&prev, &r, 0.9).unwrap();
            assert_eq!(prev.matrix().data(), &values.data()[t * 4..t * 4 + 4]);
        }
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        // raw[t] reaches every later step: 1 - lambda^(T - t)
        let expect = [1.0 - 0.9f64.powi(3), 1.0 - 0.9f64.powi(2), 1.0 - 0.9];
        for (i, v) in g.get(raw).unwrap().data().iter().enumerate() {
            assert!((v - expect[i / 4]).abs() < 1e-12, "{i}: {v}");
        }
    }
}
