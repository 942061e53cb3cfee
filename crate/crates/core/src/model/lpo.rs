//! Local prompt optimization: structured embedding, prompt-guided cross
//! attention against the local text tokens, and gated fusion.
//!
//! All functions operate on a whole window at once: row `t` of every `T x d`
//! array is time step `t`.

use crate::autodiff::{Tape, Var};
use crate::error::{KgcmError, Result};
use crate::params::{Binder, ModelParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::text::TokenEmbeddings;

pub const W_S: &str = "embed.w_s";
pub const B_S: &str = "embed.b_s";
pub const P_S: &str = "lpo.p_s";
pub const P_T: &str = "lpo.p_t";
pub const W_Q: &str = "lpo.w_q";
pub const W_K: &str = "lpo.w_k";
pub const W_V: &str = "lpo.w_v";
pub const W_G: &str = "lpo.w_g";

pub fn init_embedding(params: &mut ModelParams, d: usize, features: usize, rng: &mut SeededRng) {
    params.init_glorot(W_S, d, features, rng);
    params.init_constant(B_S, &[d], 0.0);
}

pub fn init(params: &mut ModelParams, d: usize, rng: &mut SeededRng) {
    params.init_normal(P_S, &[d], 0.02, rng);
    params.init_normal(P_T, &[d], 0.02, rng);
    params.init_glorot(W_Q, d, d, rng);
    params.init_glorot(W_K, d, d, rng);
    params.init_glorot(W_V, d, d, rng);
    params.init_glorot(W_G, d, 2 * d, rng);
}

/// Text tokens of every step in a window, stacked into one `M x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTexts {
    steps: usize,
    dim: usize,
    tokens: Option<Tensor>,
    owner: Vec<usize>,
}

impl StepTexts {
    pub fn new(per_step: &[&TokenEmbeddings], dim: usize) -> Result<Self> {
        let mut data = Vec::new();
        let mut owner = Vec::new();
        for (t, e) in per_step.iter().enumerate() {
            if e.num_tokens() > 0 && e.dim() != dim {
                return Err(KgcmError::shape(
                    "StepTexts::new",
                    format!("token dim {} at step {t}, expected {dim}", e.dim()),
                ));
            }
            data.extend_from_slice(e.token_rows());
            owner.extend(std::iter::repeat_n(t, e.num_tokens()));
        }
        let tokens = (!owner.is_empty()).then(|| Tensor::from_parts(vec![owner.len(), dim], data));
        Ok(Self {
            steps: per_step.len(),
            dim,
            tokens,
            owner,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_tokens(&self) -> usize {
        self.owner.len()
    }

    pub fn tokens_at(&self, step: usize) -> usize {
        self.owner.iter().filter(|&&o| o == step).count()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `T x M` mask: true where token `j` belongs to step `t`.
    fn mask(&self) -> Vec<bool> {
        let m = self.owner.len();
        let mut mask = vec![false; self.steps * m];
        for (j, &t) in self.owner.iter().enumerate() {
            mask[t * m + j] = true;
        }
        mask
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LpoVars {
    pub p_s: Var,
    pub p_t: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_g: Var,
}

impl LpoVars {
    pub fn bind(tape: &mut Tape, binder: &mut Binder<'_>) -> Result<Self> {
        Ok(Self {
            p_s: binder.get(tape, P_S)?,
            p_t: binder.get(tape, P_T)?,
            w_q: binder.get(tape, W_Q)?,
            w_k: binder.get(tape, W_K)?,
            w_v: binder.get(tape, W_V)?,
            w_g: binder.get(tape, W_G)?,
        })
    }
}

/// `ReLU(x W_s^T + b_s)` for `x` of shape `T x F`.
pub fn embed_structured(tape: &mut Tape, x: Var, w_s: Var, b_s: Var) -> Result<Var> {
    let lin = tape.matmul_nt(x, w_s)?;
    let lin = tape.add_bias(lin, b_s)?;
    tape.relu(lin)
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub z: Var,
    /// `T x M` attention weights; `None` when the window has no tokens.
    pub weights: Option<Var>,
}

/// Structured queries attend over the local text tokens of the same step:
/// `Q = h_s W_Q^T + p_s`, `K = tok W_K^T + p_t`, `V = tok W_V^T`,
/// `z = softmax(Q K^T / sqrt d) V`. Steps without text get `z = 0`.
pub fn guided_cross_attention(
    tape: &mut Tape,
    h_s: Var,
    text: &StepTexts,
    vars: &LpoVars,
) -> Result<CrossAttention> {
    let (steps, d) = tape.value(h_s).as_matrix("guided_cross_attention")?;
    if steps != text.steps() {
        return Err(KgcmError::shape(
            "guided_cross_attention",
            format!("{steps} query steps but texts for {}", text.steps()),
        ));
    }
    let Some(tokens) = &text.tokens else {
        log::debug!("cross attention: no local text in any of {steps} steps");
        let z = tape.constant(Tensor::zeros(&[steps, d]))?;
        return Ok(CrossAttention { z, weights: None });
    };
    let empty = (0..steps).filter(|&t| text.tokens_at(t) == 0).count();
    if empty > 0 {
        log::trace!("cross attention: {empty} of {steps} steps have empty text");
    }
    let tok = tape.constant(tokens.clone())?;
    let q = tape.matmul_nt(h_s, vars.w_q)?;
    let q = tape.add_bias(q, vars.p_s)?;
    let k = tape.matmul_nt(tok, vars.w_k)?;
    let k = tape.add_bias(k, vars.p_t)?;
    let v = tape.matmul_nt(tok, vars.w_v)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.masked_softmax(scores, &text.mask())?;
    let z = tape.matmul(weights, v)?;
    Ok(CrossAttention {
        z,
        weights: Some(weights),
    })
}

/// `g = sigmoid(W_g [h_s; z])`, `h = g * h_s + (1 - g) * z`. Returns `(g, h)`.
pub fn gated_fuse(tape: &mut Tape, h_s: Var, z: Var, w_g: Var) -> Result<(Var, Var)> {
    let cat = tape.concat_last(h_s, z)?;
    let logits = tape.matmul_nt(cat, w_g)?;
    let g = tape.sigmoid(logits)?;
    let fused = convex_mix(tape, g, h_s, z)?;
    Ok((g, fused))
}

/// `g * a + (1 - g) * b`.
pub(crate) fn convex_mix(tape: &mut Tape, g: Var, a: Var, b: Var) -> Result<Var> {
    let ga = tape.mul(g, a)?;
    let one_minus = tape.one_minus(g)?;
    let gb = tape.mul(one_minus, b)?;
    tape.add(ga, gb)
}

/// `||p_s - p_t||^2`.
pub fn prompt_loss(tape: &mut Tape, p_s: Var, p_t: Var) -> Result<Var> {
    let diff = tape.sub(p_s, p_t)?;
    tape.sum_squares(diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::encode_hashed;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    fn identity_vars(tape: &mut Tape, d: usize) -> LpoVars {
        let i = || Tensor::identity(d);
        LpoVars {
            p_s: tape.constant(Tensor::zeros(&[d])).unwrap(),
            p_t: tape.constant(Tensor::zeros(&[d])).unwrap(),
            w_q: tape.constant(i()).unwrap(),
            w_k: tape.constant(i()).unwrap(),
            w_v: tape.constant(i()).unwrap(),
            w_g: tape.constant(Tensor::zeros(&[d, 2 * d])).unwrap(),
        }
    }

    #[test]
    fn embed_structured_examples() {
        let mut tape = Tape::new();
        let w = tape
            .constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.0]]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();
        let x = tape.constant(row(&[3.0, 5.0])).unwrap();
        let h = embed_structured(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 7.0]);

        // identity block padded with zero rows
        let w = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap())
            .unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let x = tape.constant(row(&[0.5, 2.0])).unwrap();
        let h = embed_structured(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(h).data(), &[0.5, 2.0, 0.0]);

        let bneg = tape.constant(Tensor::filled(&[3], -10.0)).unwrap();
        let h = embed_structured(&mut tape, x, w, bneg).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 3]);
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let e = TokenEmbeddings::from_rows(vec![0.3, -0.7], vec![0.3, -0.7]);
        let texts = StepTexts::new(&[&e], 2).unwrap();
        let h = tape.constant(row(&[5.0, -4.0])).unwrap();
        let out = guided_cross_attention(&mut tape, h, &texts, &vars).unwrap();
        assert_eq!(tape.value(out.z).data(), &[0.3, -0.7]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let mut vars = identity_vars(&mut tape, 2);
        // W_K = 0 makes every key equal to p_t.
        vars.w_k = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let e = TokenEmbeddings::from_rows(vec![1.0, 0.0, 0.0, 3.0], vec![0.0, 0.0]);
        let texts = StepTexts::new(&[&e], 2).unwrap();
        let h = tape.constant(row(&[1.0, 2.0])).unwrap();
        let out = guided_cross_attention(&mut tape, h, &texts, &vars).unwrap();
        assert_eq!(tape.value(out.z).data(), &[0.5, 1.5]);
    }

    #[test]
    fn two_token_softmax_oracle() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 2);
        let e = TokenEmbeddings::from_rows(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let texts = StepTexts::new(&[&e], 2).unwrap();
        let h = tape.constant(row(&[10.0, 0.0])).unwrap();
        let out = guided_cross_attention(&mut tape, h, &texts, &vars).unwrap();
        let s = 10.0 / 2f64.sqrt();
        let w0 = 1.0 / (1.0 + (-s).exp());
        let z = tape.value(out.z).data();
        assert!((z[0] - w0).abs() < 1e-15 && (z[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((z[0] - 0.99915).abs() < 1e-5);
    }

    #[test]
    fn empty_text_gives_zero_context() {
        let mut tape = Tape::new();
        let vars = identity_vars(&mut tape, 4);
        let empty = encode_hashed("", 4).unwrap();
        let full = encode_hashed("concert tonight", 4).unwrap();
        let texts = StepTexts::new(&[&empty, &empty], 4).unwrap();
        let h = tape.constant(Tensor::filled(&[2, 4], 1.0)).unwrap();
        let out = guided_cross_attention(&mut tape, h, &texts, &vars).unwrap();
        assert!(out.weights.is_none());
        assert_eq!(tape.value(out.z).data(), &[0.0; 8]);

        let texts = StepTexts::new(&[&empty, &full], 4).unwrap();
        let out = guided_cross_attention(&mut tape, h, &texts, &vars).unwrap();
        let z = tape.value(out.z);
        assert_eq!(z.row(0), &[0.0; 4]);
        assert!(z.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gate_examples() {
        let mut tape = Tape::new();
        let w0 = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let hs = tape.constant(row(&[1.0, 3.0])).unwrap();
        let z = tape.constant(row(&[3.0, -1.0])).unwrap();
        let (g, h) = gated_fuse(&mut tape, hs, z, w0).unwrap();
        assert_eq!(tape.value(g).data(), &[0.5, 0.5]);
        assert_eq!(tape.value(h).data(), &[2.0, 1.0]);

        let wbig = tape
            .constant(Tensor::from_rows(&[vec![100.0, 0.0, 0.0, 0.0], vec![0.0, 100.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let hs_pos = tape.constant(row(&[1.0, 1.0])).unwrap();
        let (_, h) = gated_fuse(&mut tape, hs_pos, z, wbig).unwrap();
        let v = tape.value(h).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

        let (_, h) = gated_fuse(&mut tape, hs, hs, wbig).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 3.0]);
    }

    #[test]
    fn prompt_loss_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();
        let l = prompt_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        let l = prompt_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }
}
