//! Two-stage training and inference.
//!
//! Stage 1 trains the local fusion and feature graph against a one-step-ahead
//! auxiliary head and then freezes the averaged relation matrix. Stage 2
//! trains everything except the auxiliary head end to end on the horizon
//! loss, with the relation matrix held fixed.

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::dataset::{DemandDataset, NUM_FEATURES};
use crate::data::windows::{PreparedData, Scaler, SeriesWindow, Split};
use crate::error::{KgcmError, Result};
use crate::model::dgso::StructuralMatrix;
use crate::model::global::FrozenStructure;
use crate::model::{self, stage1_trainable, stage2_trainable};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Binder, ModelParams};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;
use crate::text::{EncoderKind, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One = 1,
    Two = 2,
}

/// Called after every epoch with the stage, the 1-based epoch and its mean
/// window loss.
pub type EpochObserver<'o> = &'o mut dyn FnMut(Stage, usize, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub structure: Option<FrozenStructure>,
    pub config: TrainConfig,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

/// `sum_k (y_k - t_k)^2 + lambda * prompt`. `prediction` holds the `T'`
/// forecasts in any rank-2 layout.
pub fn joint_loss(
    tape: &mut Tape,
    prediction: Var,
    targets: &[f64],
    prompt: Option<Var>,
    lambda_prompt: f64,
) -> Result<Var> {
    let dims = tape.dims(prediction).to_vec();
    if tape.value(prediction).len() != targets.len() {
        return Err(KgcmError::shape(
            "joint_loss",
            format!("{} predictions for {} targets", tape.value(prediction).len(), targets.len()),
        ));
    }
    let t = Tensor::new(&dims, targets.to_vec())?;
    let neg = t.map(|v| -v);
    let err = tape.add_const(prediction, &neg)?;
    let sq = tape.sum_squares(err)?;
    match prompt {
        Some(p) if lambda_prompt != 0.0 => {
            let reg = tape.scale(p, lambda_prompt)?;
            tape.add(sq, reg)
        }
        _ => Ok(sq),
    }
}

/// Mean squared one-step error plus `lambda * prompt`.
pub fn stage1_loss(
    tape: &mut Tape,
    prediction: Var,
    targets: &[f64],
    prompt: Option<Var>,
    lambda_prompt: f64,
) -> Result<Var> {
    let sq = joint_loss(tape, prediction, targets, None, 0.0)?;
    let mse = tape.scale(sq, 1.0 / targets.len() as f64)?;
    match prompt {
        Some(p) if lambda_prompt != 0.0 => {
            let reg = tape.scale(p, lambda_prompt)?;
            tape.add(mse, reg)
        }
        _ => Ok(mse),
    }
}

pub fn make_encoder(cfg: &TrainConfig) -> Result<TextEncoder> {
    TextEncoder::from_kind(&cfg.encoder, cfg.d)
}

fn training_error(stage: Stage, epoch: usize, batch: usize, e: KgcmError) -> KgcmError {
    match e {
        KgcmError::NonFinite { op } => KgcmError::Training(format!(
            "stage {} epoch {epoch} batch {batch}: non-finite value in {op}",
            stage as u8
        )),
        KgcmError::Training(msg) => KgcmError::Training(format!(
            "stage {} epoch {epoch} batch {batch}: {msg}",
            stage as u8
        )),
        other => other,
    }
}

/// Shared minibatch loop. `window_loss` builds one window's loss on a fresh
/// tape; `last_epoch` lets it collect statistics on the final pass.
#[allow(clippy::too_many_arguments)]
fn run_stage<F>(
    params: &mut ModelParams,
    windows: &[SeriesWindow],
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    trainable: &dyn Fn(&str) -> bool,
    mut window_loss: F,
    observer: EpochObserver<'_>,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &mut Binder<'_>, &SeriesWindow, bool) -> Result<Var>,
{
    if windows.is_empty() {
        return Err(KgcmError::Data(format!(
            "no training windows of {} + {} rows fit in the training split",
            cfg.window, cfg.horizon
        )));
    }
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.clip_norm),
        ..AdamConfig::default()
    });
    let mut rng = SeededRng::stream(cfg.seed ^ (stage as u64) << 32, Stream::Batching);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: std::collections::BTreeMap<String, Tensor> = Default::default();
            for &i in chunk {
                let mut tape = Tape::new();
                let mut binder = Binder::new(params, Some(trainable));
                let loss = window_loss(&mut tape, &mut binder, &windows[i], epoch == epochs)
                    .map_err(|e| training_error(stage, epoch, batch, e))?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(training_error(stage, epoch, batch, KgcmError::Training("non-finite loss".into())));
                }
                total += value;
                let g = tape.backward(loss)?;
                for (name, t) in binder.collect(g) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&t),
                        None => {
                            grads.insert(name, t);
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                g.scale_in_place(scale);
            }
            adam.step(params, &grads)
                .map_err(|e| training_error(stage, epoch, batch, e))?;
        }
        let mean = total / windows.len() as f64;
        log::info!("stage {} epoch {epoch}: loss {mean:.6}", stage as u8);
        observer(stage, epoch, mean);
        history.push(mean);
    }
    Ok(history)
}

/// Fresh parameters plus the fitted scaler.
pub fn initial_params(cfg: &TrainConfig, scaler: &Scaler) -> ModelParams {
    let mut rng = SeededRng::stream(cfg.seed, Stream::Init);
    let mut params = model::init_params(cfg, NUM_FEATURES, &mut rng);
    scaler.store(&mut params);
    params
}

/// Runs the first stage in place on `params`. Returns the loss history and,
/// when the graph stage is on, the frozen relation matrix.
pub fn train_stage1(
    params: &mut ModelParams,
    windows: &[SeriesWindow],
    cfg: &TrainConfig,
    observer: EpochObserver<'_>,
) -> Result<(Vec<f64>, Option<FrozenStructure>)> {
    let d = cfg.d;
    let mut relation_sum = vec![0.0; d * d];
    let mut relation_count = 0usize;
    let history = run_stage(
        params,
        windows,
        cfg,
        Stage::One,
        cfg.epochs_stage1,
        &stage1_trainable,
        |tape, binder, w, last| {
            let (pred, local) = model::forward_stage1(tape, binder, cfg, w)?;
            if last {
                if let Some(out) = &local.dgso {
                    let smoothed = out.smoothed.last().expect("at least one layer");
                    let last = &smoothed.data()[smoothed.len() - d * d..];
                    for (acc, v) in relation_sum.iter_mut().zip(last) {
                        *acc += v;
                    }
                    relation_count += 1;
                }
            }
            stage1_loss(tape, pred, &w.next_step, local.prompt_loss, cfg.lambda_prompt)
        },
        observer,
    )?;
    let structure = if cfg.components.dgso && relation_count > 0 {
        let mean: Vec<f64> = relation_sum.iter().map(|v| v / relation_count as f64).collect();
        let matrix = StructuralMatrix::renormalized(Tensor::from_parts(vec![d, d], mean))?;
        Some(FrozenStructure::new(
            matrix,
            format!(
                "stage1 seed={} epochs={} windows={}",
                cfg.seed,
                cfg.epochs_stage1,
                windows.len()
            ),
        ))
    } else {
        None
    };
    Ok((history, structure))
}

/// Runs the second stage in place on `params` with `structure` frozen.
pub fn train_stage2(
    params: &mut ModelParams,
    windows: &[SeriesWindow],
    cfg: &TrainConfig,
    structure: Option<&FrozenStructure>,
    observer: EpochObserver<'_>,
) -> Result<Vec<f64>> {
    run_stage(
        params,
        windows,
        cfg,
        Stage::Two,
        cfg.epochs_stage2,
        &stage2_trainable,
        |tape, binder, w, _| {
            let out = model::forward(tape, binder, cfg, w, structure)?;
            joint_loss(tape, out.prediction, &w.targets, out.prompt_loss(), cfg.lambda_prompt)
        },
        observer,
    )
}

/// Which stages a call to [`fit_stages`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Both,
}

/// Trains on the training split of `dataset`. The number of slots per day is
/// taken from the data.
pub fn fit(dataset: &DemandDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    fit_stages(dataset, cfg, StageSelection::Both, None, &mut |_, _, _| {})
}

pub fn fit_stages(
    dataset: &DemandDataset,
    cfg: &TrainConfig,
    stages: StageSelection,
    init: Option<TrainedModel>,
    observer: EpochObserver<'_>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    dataset.validate()?;
    let mut cfg = cfg.clone();
    cfg.slots_per_day = dataset.slots_per_day();

    let mut model = match (stages, init) {
        (StageSelection::Two, None) => {
            return Err(KgcmError::Config("stage 2 needs a model trained by stage 1".into()))
        }
        (_, Some(mut m)) => {
            if m.config.d != cfg.d || m.config.window != cfg.window || m.config.horizon != cfg.horizon {
                return Err(KgcmError::Config(
                    "initial model dimensions differ from the config".into(),
                ));
            }
            m.config.epochs_stage2 = cfg.epochs_stage2;
            m.config.lr = cfg.lr;
            m
        }
        (_, None) => {
            let scaler = Scaler::fit(dataset)?;
            TrainedModel {
                params: initial_params(&cfg, &scaler),
                structure: None,
                config: cfg.clone(),
                stage1_losses: Vec::new(),
                stage2_losses: Vec::new(),
            }
        }
    };
    let cfg = model.config.clone();
    let scaler = Scaler::load(&model.params)?;
    let encoder = make_encoder(&cfg)?;
    let prepared = PreparedData::new(
        dataset,
        scaler,
        &encoder,
        matches!(cfg.encoder, EncoderKind::File(_)),
        cfg.window,
        cfg.horizon,
    )?;
    let windows = prepared.windows(Split::Train)?;

    if matches!(stages, StageSelection::One | StageSelection::Both) && cfg.components.has_stage1() {
        let (hist, structure) = train_stage1(&mut model.params, &windows, &cfg, observer)?;
        model.stage1_losses = hist;
        model.structure = structure;
    }
    if matches!(stages, StageSelection::Two | StageSelection::Both) {
        let before = model.structure.as_ref().map(FrozenStructure::content_hash);
        let hist = train_stage2(&mut model.params, &windows, &cfg, model.structure.as_ref(), observer)?;
        debug_assert_eq!(before, model.structure.as_ref().map(FrozenStructure::content_hash));
        model.stage2_losses = hist;
    }
    Ok(model)
}

impl TrainedModel {
    pub fn scaler(&self) -> Result<Scaler> {
        Scaler::load(&self.params)
    }

    pub fn encoder(&self) -> Result<TextEncoder> {
        make_encoder(&self.config)
    }

    /// Normalizes and encodes `dataset` the way this model was trained.
    pub fn prepare<'a>(&self, dataset: &'a DemandDataset) -> Result<PreparedData<'a>> {
        if dataset.slots_per_day() != self.config.slots_per_day {
            return Err(KgcmError::Data(format!(
                "dataset has {} slots per day, model expects {}",
                dataset.slots_per_day(),
                self.config.slots_per_day
            )));
        }
        PreparedData::new(
            dataset,
            self.scaler()?,
            &self.encoder()?,
            matches!(self.config.encoder, EncoderKind::File(_)),
            self.config.window,
            self.config.horizon,
        )
    }

    /// Normalized `T'` forecast.
    pub fn predict_normalized(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        if window.steps() != self.config.window || window.features.dims() != [self.config.window, NUM_FEATURES] {
            return Err(KgcmError::Data(format!(
                "window has {} steps, model expects {}",
                window.steps(),
                self.config.window
            )));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, None);
        let out = model::forward(&mut tape, &mut binder, &self.config, window, self.structure.as_ref())?;
        Ok(tape.value(out.prediction).data().to_vec())
    }

    /// `T'` forecast in demand units.
    pub fn predict(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        let scaler = self.scaler()?;
        Ok(self
            .predict_normalized(window)?
            .into_iter()
            .map(|z| scaler.denormalize_target(z))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_examples() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap()).unwrap();
        let l = joint_loss(&mut tape, y, &[2.0, 3.0], None, 0.1).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let l = joint_loss(&mut tape, y, &[1.0, 2.0], None, 0.0).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        let p = tape.constant(Tensor::scalar(4.0)).unwrap();
        let l = joint_loss(&mut tape, y, &[2.0, 3.0], Some(p), 0.5).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        assert!(joint_loss(&mut tape, y, &[1.0], None, 0.0).is_err());
    }
}
