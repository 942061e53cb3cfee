//! Structure-aware sequence predictor.
//!
//! Each block has a temporal attention sublayer (tokens are time steps), an
//! optional feature attention sublayer (tokens are the `d` dimensions, with
//! the additive structural bias on its scores), and a position-wise
//! feedforward. Every sublayer is residual and layer-normalized.

use crate::autodiff::{Tape, Var};
use crate::error::{KgcmError, Result};
use crate::model::dgso::StructuralMatrix;
use crate::params::{Binder, ModelParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const TOD: &str = "ssa.tod";
pub const DOW: &str = "ssa.dow";
pub const HEAD_W: &str = "ssa.head_w";
pub const HEAD_B: &str = "ssa.head_b";
pub const LN_EPS: f64 = 1e-5;

pub fn block_name(block: usize, field: &str) -> String {
    format!("ssa.block{block}.{field}")
}

pub fn init(
    params: &mut ModelParams,
    d: usize,
    window: usize,
    horizon: usize,
    blocks: usize,
    slots_per_day: usize,
    rng: &mut SeededRng,
) {
    params.init_normal(TOD, &[slots_per_day, d], 0.02, rng);
    params.init_normal(DOW, &[7, d], 0.02, rng);
    for b in 0..blocks {
        for f in ["t_wq", "t_wk", "t_wv", "t_wo"] {
            params.init_glorot(&block_name(b, f), d, d, rng);
        }
        for f in ["f_wq", "f_wk", "f_wv"] {
            params.init_glorot(&block_name(b, f), window, window, rng);
        }
        // Zero output projection: the feature sublayer starts as a no-op.
        params.init_constant(&block_name(b, "f_wo"), &[window, window], 0.0);
        for ln in ["ln1", "ln2", "ln3"] {
            params.init_constant(&block_name(b, &format!("{ln}_gamma")), &[d], 1.0);
            params.init_constant(&block_name(b, &format!("{ln}_beta")), &[d], 0.0);
        }
        params.init_glorot(&block_name(b, "ffn_w1"), 4 * d, d, rng);
        params.init_constant(&block_name(b, "ffn_b1"), &[4 * d], 0.0);
        params.init_glorot(&block_name(b, "ffn_w2"), d, 4 * d, rng);
        params.init_constant(&block_name(b, "ffn_b2"), &[d], 0.0);
    }
    params.init_glorot(HEAD_W, horizon, d, rng);
    params.init_constant(HEAD_B, &[horizon], 0.0);
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(steps: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; steps * d];
    for pos in 0..steps {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            pe[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![steps, d], pe)
}

/// Calendar position of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepTime {
    pub slot: usize,
    /// 0 = Monday.
    pub weekday: usize,
}

/// `e_t = h_t + tod[slot_t] + dow[weekday_t] + PE[t]`.
pub fn embed_sequence(tape: &mut Tape, h: Var, times: &[StepTime], tod: Var, dow: Var) -> Result<Var> {
    let (steps, d) = tape.value(h).as_matrix("embed_sequence")?;
    if times.len() != steps {
        return Err(KgcmError::shape(
            "embed_sequence",
            format!("{} timestamps for {steps} steps", times.len()),
        ));
    }
    let slots = tape.value(tod).rows();
    if let Some(bad) = times.iter().find(|s| s.slot >= slots || s.weekday >= 7) {
        return Err(KgcmError::Data(format!(
            "step time out of range: slot {} of {slots}, weekday {}",
            bad.slot, bad.weekday
        )));
    }
    let slot_idx: Vec<usize> = times.iter().map(|s| s.slot).collect();
    let dow_idx: Vec<usize> = times.iter().map(|s| s.weekday).collect();
    let te = tape.gather_rows(tod, &slot_idx)?;
    let we = tape.gather_rows(dow, &dow_idx)?;
    let e = tape.add(h, te)?;
    let e = tape.add(e, we)?;
    tape.add_const(e, &positional_encoding(steps, d))
}

/// `ln(1 + A)` elementwise.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralBias {
    bias: Tensor,
}

impl StructuralBias {
    pub fn tensor(&self) -> &Tensor {
        &self.bias
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            bias: Tensor::zeros(&[d, d]),
        }
    }
}

/// Maps any nonnegative matrix; negative entries are rejected.
pub fn structural_bias_raw(a: &Tensor) -> Result<StructuralBias> {
    if let Some(v) = a.data().iter().find(|v| **v < 0.0) {
        return Err(KgcmError::contract(
            "structural_bias",
            format!("negative relation entry {v}"),
        ));
    }
    Ok(StructuralBias {
        bias: a.map(f64::ln_1p),
    })
}

pub fn structural_bias(a: &StructuralMatrix) -> Result<StructuralBias> {
    structural_bias_raw(a.matrix())
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub t_wq: Var,
    pub t_wk: Var,
    pub t_wv: Var,
    pub t_wo: Var,
    pub f_wq: Var,
    pub f_wk: Var,
    pub f_wv: Var,
    pub f_wo: Var,
    pub ln: [(Var, Var); 3],
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl BlockVars {
    /// Binds one block. Feature-attention and its norm are bound only when
    /// `feature_axis` is set, so they stay off the tape otherwise.
    pub fn bind(tape: &mut Tape, binder: &mut Binder<'_>, block: usize, feature_axis: bool) -> Result<Self> {
        let mut get = |f: &str| binder.get(tape, &block_name(block, f));
        let t_wq = get("t_wq")?;
        let t_wk = get("t_wk")?;
        let t_wv = get("t_wv")?;
        let t_wo = get("t_wo")?;
        let ln1 = (get("ln1_gamma")?, get("ln1_beta")?);
        let (f_wq, f_wk, f_wv, f_wo, ln2) = if feature_axis {
            (
                get("f_wq")?,
                get("f_wk")?,
                get("f_wv")?,
                get("f_wo")?,
                (get("ln2_gamma")?, get("ln2_beta")?),
            )
        } else {
            (t_wq, t_wq, t_wq, t_wq, ln1)
        };
        let ln3 = (get("ln3_gamma")?, get("ln3_beta")?);
        Ok(Self {
            t_wq,
            t_wk,
            t_wv,
            t_wo,
            f_wq,
            f_wk,
            f_wv,
            f_wo,
            ln: [ln1, ln2, ln3],
            ffn_w1: get("ffn_w1")?,
            ffn_b1: get("ffn_b1")?,
            ffn_w2: get("ffn_w2")?,
            ffn_b2: get("ffn_b2")?,
        })
    }
}

/// Weights produced by one block, kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// Per head, `T x T`.
    pub temporal: Vec<Var>,
    /// `d x d`; absent when the feature sublayer is off.
    pub feature: Option<Var>,
}

/// Single-head scaled dot-product attention with an optional additive bias
/// on the scores. `x` is `tokens x width`; projections are `width x width`.
fn attention(
    tape: &mut Tape,
    x: Var,
    w: (Var, Var, Var, Var),
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<(Var, Vec<Var>)> {
    let width = tape.value(x).last_dim();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(KgcmError::Config(format!(
            "attention width {width} is not divisible by {heads} heads"
        )));
    }
    let hw = width / heads;
    let q = tape.matmul_nt(x, w.0)?;
    let k = tape.matmul_nt(x, w.1)?;
    let v = tape.matmul_nt(x, w.2)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_last(q, h * hw, hw)?,
                tape.slice_last(k, h * hw, hw)?,
                tape.slice_last(v, h * hw, hw)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let mut s = tape.scale(s, 1.0 / (hw as f64).sqrt())?;
        if let Some(b) = bias {
            s = tape.add_const(s, b)?;
        }
        let a = tape.softmax(s)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let mut joined = outs[0];
    for &o in &outs[1..] {
        joined = tape.concat_last(joined, o)?;
    }
    Ok((tape.matmul_nt(joined, w.3)?, weights))
}

fn residual_norm(tape: &mut Tape, x: Var, update: Var, ln: (Var, Var)) -> Result<Var> {
    let r = tape.add(x, update)?;
    tape.layer_norm(r, ln.0, ln.1, LN_EPS)
}

/// One encoder block over `e` (`T x d`). `bias` selects the feature-axis
/// sublayer: `None` skips it, `Some(None)` runs it unbiased, `Some(Some(b))`
/// adds `b` to its scores.
pub fn ssa_block(
    tape: &mut Tape,
    e: Var,
    vars: &BlockVars,
    heads: usize,
    bias: Option<Option<&StructuralBias>>,
) -> Result<(Var, BlockTrace)> {
    let (temporal_out, temporal) = attention(tape, e, (vars.t_wq, vars.t_wk, vars.t_wv, vars.t_wo), heads, None)?;
    let mut x = residual_norm(tape, e, temporal_out, vars.ln[0])?;
    let mut feature = None;
    if let Some(b) = bias {
        let xt = tape.transpose(x)?;
        let (f_out, mut w) = attention(
            tape,
            xt,
            (vars.f_wq, vars.f_wk, vars.f_wv, vars.f_wo),
            1,
            b.map(StructuralBias::tensor),
        )?;
        let f_out = tape.transpose(f_out)?;
        x = residual_norm(tape, x, f_out, vars.ln[1])?;
        feature = w.pop();
    }
    let hidden = tape.matmul_nt(x, vars.ffn_w1)?;
    let hidden = tape.add_bias(hidden, vars.ffn_b1)?;
    let hidden = tape.relu(hidden)?;
    let ff = tape.matmul_nt(hidden, vars.ffn_w2)?;
    let ff = tape.add_bias(ff, vars.ffn_b2)?;
    let out = residual_norm(tape, x, ff, vars.ln[2])?;
    Ok((out, BlockTrace { temporal, feature }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

/// Stacks the blocks, pools, and applies the per-horizon heads. Returns a
/// `1 x T'` row of predictions.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    tape: &mut Tape,
    e: Var,
    blocks: &[BlockVars],
    heads: usize,
    bias: Option<Option<&StructuralBias>>,
    pooling: Pooling,
    head_w: Var,
    head_b: Var,
) -> Result<(Var, Vec<BlockTrace>)> {
    if blocks.is_empty() {
        return Err(KgcmError::Config("predictor needs at least one block".into()));
    }
    let mut x = e;
    let mut traces = Vec::with_capacity(blocks.len());
    for vars in blocks {
        let (out, trace) = ssa_block(tape, x, vars, heads, bias)?;
        x = out;
        traces.push(trace);
    }
    let steps = tape.value(x).rows();
    let pooled = match pooling {
        Pooling::Last => tape.slice_rows(x, steps - 1, 1)?,
        Pooling::Mean => tape.mean_rows(x)?,
    };
    let y = tape.matmul_nt(pooled, head_w)?;
    let y = tape.add_bias(y, head_b)?;
    Ok((y, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(2, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get2(1, 0) - 0.841471).abs() < 1e-6);
        assert_eq!(pe.get2(1, 0), 1f64.sin());
        assert_eq!(pe.get2(1, 3), (1.0 / 100f64).cos());
    }

    #[test]
    fn zero_tables_give_pe() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let tod = tape.constant(Tensor::zeros(&[5, 4])).unwrap();
        let dow = tape.constant(Tensor::zeros(&[7, 4])).unwrap();
        let times = [StepTime { slot: 4, weekday: 6 }; 3];
        let e = embed_sequence(&mut tape, h, &times, tod, dow).unwrap();
        assert_eq!(tape.value(e), &positional_encoding(3, 4));
        let bad = [StepTime { slot: 5, weekday: 0 }; 3];
        assert!(matches!(
            embed_sequence(&mut tape, h, &bad, tod, dow),
            Err(KgcmError::Data(_))
        ));
    }

    #[test]
    fn bias_map_values() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![std::f64::consts::E - 1.0, 0.5]]).unwrap();
        let b = structural_bias_raw(&a).unwrap();
        assert_eq!(b.tensor().get2(0, 0), 0.0);
        assert!((b.tensor().get2(0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((b.tensor().get2(1, 0) - 1.0).abs() < 1e-15);
        let neg = Tensor::from_rows(&[vec![-0.1, 1.1]]).unwrap();
        assert!(structural_bias_raw(&neg).is_err());
    }

    #[test]
    fn biased_softmax_oracle() {
        // Zero queries make every score zero, so the weights are softmax(bias).
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let z = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let id = tape.constant(Tensor::identity(2)).unwrap();
        let bias = Tensor::from_rows(&[vec![3f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        let (_, w) = attention(&mut tape, x, (z, id, id, id), 1, Some(&bias)).unwrap();
        let w = tape.value(w[0]).data();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert_eq!(&w[2..], &[0.5, 0.5]);
    }
}
