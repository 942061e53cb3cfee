//! The full forecaster and its parts.
//!
//! Data flow for one window:
//! structured embedding, local text fusion, feature-graph readout, global
//! prompt gate, feature weighting, then the sequence predictor. Each of the
//! five optional stages can be switched off through [`ComponentSet`]; with
//! all of them off the model is the plain backbone.

pub mod dgso;
pub mod global;
pub mod lpo;
pub mod ssa;

use crate::autodiff::{Tape, Var};
use crate::config::{ComponentSet, TrainConfig};
use crate::data::windows::SeriesWindow;
use crate::error::Result;
use crate::params::{Binder, ModelParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use dgso::{DgsoLayerVars, DgsoOutput, StructuralMatrix};
use global::FrozenStructure;
use lpo::{CrossAttention, LpoVars, StepTexts};
use ssa::{BlockTrace, BlockVars, StructuralBias};

pub const AUX_W: &str = "aux.w";
pub const AUX_B: &str = "aux.b";

/// Creates every parameter of the model, in a fixed order, whatever the
/// enabled components.
pub fn init_params(cfg: &TrainConfig, features: usize, rng: &mut SeededRng) -> ModelParams {
    let mut p = ModelParams::new();
    lpo::init_embedding(&mut p, cfg.d, features, rng);
    lpo::init(&mut p, cfg.d, rng);
    dgso::init(&mut p, cfg.layers, cfg.n, cfg.n_proj(), rng);
    p.init_glorot(AUX_W, 1, cfg.d, rng);
    p.init_constant(AUX_B, &[1], 0.0);
    global::init(&mut p, cfg.d, rng);
    ssa::init(&mut p, cfg.d, cfg.window, cfg.horizon, cfg.blocks, cfg.slots_per_day, rng);
    p
}

/// Parameters updated in the first stage.
pub fn stage1_trainable(name: &str) -> bool {
    ["embed.", "lpo.", "dgso.", "aux."].iter().any(|p| name.starts_with(p))
}

/// Parameters updated in the second stage.
pub fn stage2_trainable(name: &str) -> bool {
    !name.starts_with("aux.") && !name.starts_with("scaler.")
}

/// Intermediate values of the local part of the model.
#[derive(Debug)]
pub struct LocalPass {
    pub h_s: Var,
    /// Structured embedding fused with the local text (`h_s` without LPO).
    pub fused: Var,
    /// Per-step representation handed to the global stage.
    pub readout: Var,
    pub prompt_loss: Option<Var>,
    pub cross: Option<CrossAttention>,
    pub gate: Option<Var>,
    pub dgso: Option<DgsoOutput>,
}

pub fn forward_local(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &TrainConfig,
    components: ComponentSet,
    window: &SeriesWindow,
) -> Result<LocalPass> {
    let x = tape.constant(window.features.clone())?;
    let w_s = binder.get(tape, lpo::W_S)?;
    let b_s = binder.get(tape, lpo::B_S)?;
    let h_s = lpo::embed_structured(tape, x, w_s, b_s)?;

    let (fused, prompt_loss, cross, gate) = if components.lpo {
        let vars = LpoVars::bind(tape, binder)?;
        let texts = StepTexts::new(&window.local_refs(), cfg.d)?;
        let cross = lpo::guided_cross_attention(tape, h_s, &texts, &vars)?;
        let (g, fused) = lpo::gated_fuse(tape, h_s, cross.z, vars.w_g)?;
        let pl = lpo::prompt_loss(tape, vars.p_s, vars.p_t)?;
        (fused, Some(pl), Some(cross), Some(g))
    } else {
        (h_s, None, None, None)
    };

    let (readout, dgso_out) = if components.dgso {
        let layers = (0..cfg.layers)
            .map(|l| DgsoLayerVars::bind(tape, binder, l))
            .collect::<Result<Vec<_>>>()?;
        let out = dgso::run_dgso(tape, fused, &layers, cfg.n, cfg.ema_lambda)?;
        (out.readout, Some(out))
    } else {
        (fused, None)
    };

    Ok(LocalPass {
        h_s,
        fused,
        readout,
        prompt_loss,
        cross,
        gate,
        dgso: dgso_out,
    })
}

/// First-stage pass: `T x 1` one-step-ahead predictions from the readout.
pub fn forward_stage1(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &TrainConfig,
    window: &SeriesWindow,
) -> Result<(Var, LocalPass)> {
    let local = forward_local(tape, binder, cfg, cfg.components, window)?;
    let w = binder.get(tape, AUX_W)?;
    let b = binder.get(tape, AUX_B)?;
    let y = tape.matmul_nt(local.readout, w)?;
    let y = tape.add_bias(y, b)?;
    Ok((y, local))
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `1 x T'`, normalized scale.
    pub prediction: Var,
    pub local: LocalPass,
    pub h_tilde: Var,
    pub h_hat: Var,
    pub encoder_input: Var,
    pub blocks: Vec<BlockTrace>,
}

impl ForwardOutput {
    pub fn prompt_loss(&self) -> Option<Var> {
        self.local.prompt_loss
    }
}

/// The relation matrix used by feature weighting and the structural bias:
/// the frozen one when available, uniform otherwise.
pub fn effective_structure(cfg: &TrainConfig, frozen: Option<&FrozenStructure>) -> StructuralMatrix {
    match frozen {
        Some(f) if cfg.components.dgso => f.matrix().clone(),
        _ => StructuralMatrix::uniform(cfg.d),
    }
}

/// Full second-stage forward pass.
pub fn forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &TrainConfig,
    window: &SeriesWindow,
    frozen: Option<&FrozenStructure>,
) -> Result<ForwardOutput> {
    let c = cfg.components;
    let local = forward_local(tape, binder, cfg, c, window)?;
    let structure = effective_structure(cfg, frozen);

    let h_tilde = if c.rcpg {
        let p = tape.constant(Tensor::from_parts(vec![cfg.d], window.global.as_ref().clone()))?;
        let w = binder.get(tape, global::W_GAMMA)?;
        let b = binder.get(tape, global::B_GAMMA)?;
        global::conditional_gate(tape, local.readout, p, w, b)?
    } else {
        local.readout
    };
    let h_hat = if c.acmfw {
        global::acmfw_weight(tape, h_tilde, &structure)?
    } else {
        h_tilde
    };

    let bias = if c.ssa { Some(ssa::structural_bias(&structure)?) } else { None };
    let (prediction, encoder_input, blocks) = predictor(tape, binder, cfg, window, h_hat, bias.as_ref().map(Some))?;
    Ok(ForwardOutput {
        prediction,
        local,
        h_tilde,
        h_hat,
        encoder_input,
        blocks,
    })
}

/// Time encodings, encoder blocks, pooling, and heads.
pub fn predictor(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &TrainConfig,
    window: &SeriesWindow,
    h_hat: Var,
    bias: Option<Option<&StructuralBias>>,
) -> Result<(Var, Var, Vec<BlockTrace>)> {
    let tod = binder.get(tape, ssa::TOD)?;
    let dow = binder.get(tape, ssa::DOW)?;
    let e = ssa::embed_sequence(tape, h_hat, &window.times, tod, dow)?;
    let blocks = (0..cfg.blocks)
        .map(|b| BlockVars::bind(tape, binder, b, bias.is_some()))
        .collect::<Result<Vec<_>>>()?;
    let head_w = binder.get(tape, ssa::HEAD_W)?;
    let head_b = binder.get(tape, ssa::HEAD_B)?;
    let (y, traces) = ssa::forecast(tape, e, &blocks, cfg.heads, bias, cfg.pooling, head_w, head_b)?;
    Ok((y, e, traces))
}

/// The ablation baseline built directly: structured embedding, time
/// encodings, temporal-only encoder, heads.
pub fn backbone_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    cfg: &TrainConfig,
    window: &SeriesWindow,
) -> Result<Var> {
    let x = tape.constant(window.features.clone())?;
    let w_s = binder.get(tape, lpo::W_S)?;
    let b_s = binder.get(tape, lpo::B_S)?;
    let h = lpo::embed_structured(tape, x, w_s, b_s)?;
    Ok(predictor(tape, binder, cfg, window, h, None)?.0)
}
