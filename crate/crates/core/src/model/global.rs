//! Global prior knowledge: a shared text prompt gated into every step, and
//! feature weighting by the frozen relation matrix.

use crate::autodiff::{Tape, Var};
use crate::error::{KgcmError, Result};
use crate::model::dgso::StructuralMatrix;
use crate::model::lpo::convex_mix;
use crate::params::ModelParams;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextRecord};

pub const W_GAMMA: &str = "global.w_gamma";
pub const B_GAMMA: &str = "global.b_gamma";

pub fn init(params: &mut ModelParams, d: usize, rng: &mut SeededRng) {
    params.init_glorot(W_GAMMA, d, 2 * d, rng);
    params.init_constant(B_GAMMA, &[d], 0.0);
}

/// Pooled encoding of the global text, length `d`.
pub fn encode_global_prompt(encoder: &TextEncoder, text: &TextRecord) -> Result<Vec<f64>> {
    Ok(encoder.encode(text)?.pooled().to_vec())
}

/// `g = sigmoid(W_gamma [h; p] + b_gamma)`, `h~ = g * h + (1 - g) * p`.
/// `fused` is `T x d`; `prompt` is `T x d` (one row per step) or length `d`.
pub fn conditional_gate(
    tape: &mut Tape,
    fused: Var,
    prompt: Var,
    w_gamma: Var,
    b_gamma: Var,
) -> Result<Var> {
    let (steps, d) = tape.value(fused).as_matrix("conditional_gate")?;
    let prompt = match tape.dims(prompt) {
        [len] if *len == d => {
            let zeros = tape.constant(Tensor::zeros(&[steps, d]))?;
            tape.add_bias(zeros, prompt)?
        }
        [r, c] if *r == steps && *c == d => prompt,
        other => {
            return Err(KgcmError::shape(
                "conditional_gate",
                format!("prompt {other:?} for fused {steps}x{d}"),
            ))
        }
    };
    let cat = tape.concat_last(fused, prompt)?;
    let logits = tape.matmul_nt(cat, w_gamma)?;
    let logits = tape.add_bias(logits, b_gamma)?;
    let g = tape.sigmoid(logits)?;
    convex_mix(tape, g, fused, prompt)
}

/// The relation matrix frozen at the end of stage 1, with a note on where
/// it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenStructure {
    matrix: StructuralMatrix,
    provenance: String,
}

impl FrozenStructure {
    pub fn new(matrix: StructuralMatrix, provenance: impl Into<String>) -> Self {
        Self {
            matrix,
            provenance: provenance.into(),
        }
    }

    pub fn matrix(&self) -> &StructuralMatrix {
        &self.matrix
    }

    pub fn tensor(&self) -> &Tensor {
        self.matrix.matrix()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// FNV-1a of the little-endian bytes of every entry.
    pub fn content_hash(&self) -> u64 {
        let bytes: Vec<u8> = self
            .tensor()
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        crate::text::fnv1a64(&bytes)
    }
}

/// `h^ = A h~` applied to every row of a `T x d` array.
pub fn acmfw_weight(tape: &mut Tape, h_tilde: Var, structure: &StructuralMatrix) -> Result<Var> {
    let d = tape.value(h_tilde).last_dim();
    if d != structure.dim() {
        return Err(KgcmError::shape(
            "acmfw_weight",
            format!("input dim {d}, matrix {0}x{0}", structure.dim()),
        ));
    }
    let a = tape.constant(structure.matrix().clone())?;
    tape.matmul_nt(h_tilde, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tape: &mut Tape, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.constant(Tensor::matrix(1, n, v).unwrap()).unwrap()
    }

    #[test]
    fn zero_gate_averages() {
        let mut tape = Tape::new();
        let h = row(&mut tape, vec![1.0, 3.0]);
        let p = tape.constant(Tensor::vector(vec![3.0, -1.0]).unwrap()).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let out = conditional_gate(&mut tape, h, p, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 1.0]);
    }

    #[test]
    fn saturated_gate_keeps_fused() {
        let mut tape = Tape::new();
        let h = row(&mut tape, vec![1.0, 3.0]);
        let p = tape.constant(Tensor::vector(vec![3.0, -1.0]).unwrap()).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let b = tape.constant(Tensor::filled(&[2], 60.0)).unwrap();
        let out = conditional_gate(&mut tape, h, p, w, b).unwrap();
        for (o, e) in tape.value(out).data().iter().zip([1.0, 3.0]) {
            assert!((o - e).abs() < 1e-20_f64.max(1e-12));
        }
    }

    #[test]
    fn equal_inputs_pass_through() {
        let mut tape = Tape::new();
        let h = row(&mut tape, vec![0.4, -2.5]);
        let p = row(&mut tape, vec![0.4, -2.5]);
        let w = tape.constant(Tensor::filled(&[2, 4], 0.3)).unwrap();
        let b = tape.constant(Tensor::filled(&[2], -0.7)).unwrap();
        let out = conditional_gate(&mut tape, h, p, w, b).unwrap();
        for (o, e) in tape.value(out).data().iter().zip([0.4, -2.5]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn acmfw_examples() {
        let mut tape = Tape::new();
        let h = row(&mut tape, vec![1.0, 2.0]);
        let a = StructuralMatrix::new(Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap()).unwrap();
        let out = acmfw_weight(&mut tape, h, &a).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 1.3).abs() < 1e-12 && (v[1] - 1.8).abs() < 1e-12);

        let id = StructuralMatrix::new(Tensor::identity(2)).unwrap();
        let out = acmfw_weight(&mut tape, h, &id).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);

        let h3 = row(&mut tape, vec![1.0, 2.0, 6.0]);
        let out = acmfw_weight(&mut tape, h3, &StructuralMatrix::uniform(3)).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!(acmfw_weight(&mut tape, h3, &id).is_err());
    }

    #[test]
    fn global_prompt_of_empty_text_is_zero() {
        let enc = TextEncoder::hashed(6).unwrap();
        let p = encode_global_prompt(&enc, &TextRecord::anonymous("")).unwrap();
        assert_eq!(p, vec![0.0; 6]);
        let a = encode_global_prompt(&enc, &TextRecord::anonymous("holiday surge citywide")).unwrap();
        let b = encode_global_prompt(&enc, &TextRecord::anonymous("holiday surge citywide")).unwrap();
        assert_eq!(a, b);
    }
}
