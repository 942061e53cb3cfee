//! Central-difference verification of tape gradients.

use std::sync::Arc;

use chrono::{TimeZone, Utc};

use crate::autodiff::{Tape, Var};
use crate::config::{ComponentSet, TrainConfig};
use crate::data::dataset::NUM_FEATURES;
use crate::data::windows::SeriesWindow;
use crate::error::{KgcmError, Result};
use crate::model::dgso::StructuralMatrix;
use crate::model::global::FrozenStructure;
use crate::model::ssa::StepTime;
use crate::model::{self, stage2_trainable};
use crate::params::{Binder, ModelParams};
use crate::pipeline::{joint_loss, stage1_loss};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;
use crate::text::encode_hashed;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f` at `x` against central
/// differences with step `h` and returns the worst relative error over all
/// coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, leaf)?;
    let analytic = tape
        .backward(out)?
        .take(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.dims()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(probe.clone())?;
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(KgcmError::NonFinite {
                op: "grad_check probe".into(),
            });
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One row of the verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn random(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_parts(dims.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
}

/// Entries bounded away from zero, so kinks are never straddled.
fn random_off_zero(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    random(rng, dims).map(|v| if v < 0.0 { v - 0.1 } else { v + 0.1 })
}

/// `sum(out * weights)` with fixed random weights, so that ops whose plain
/// sum is constant (softmax, layer norm) still get a nontrivial gradient.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type UnaryCase = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Checks `op` with respect to its (single differentiated) input on three
/// random shapes and keeps the worst error.
fn check_op(
    rng: &mut SeededRng,
    shapes: &[Vec<usize>],
    off_zero: bool,
    build: &dyn Fn(&mut SeededRng, &[usize]) -> UnaryCase,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for dims in shapes {
        let x = if off_zero { random_off_zero(rng, dims) } else { random(rng, dims) };
        let op = build(rng, dims);
        // weights sized from one forward pass.
        let mut probe = Tape::new();
        let v = probe.constant(x.clone())?;
        let out = op(&mut probe, v)?;
        let weights = random(rng, probe.dims(out));
        let err = grad_check(
            |tape, leaf| {
                let out = op(tape, leaf)?;
                project(tape, out, &weights)
            },
            &x,
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn mats(a: &[(usize, usize)]) -> Vec<Vec<usize>> {
    a.iter().map(|&(r, c)| vec![r, c]).collect()
}

/// Every differentiable tape operation, each over three random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SeededRng::stream(seed, Stream::Probe);
    let m3 = mats(&[(2, 3), (4, 1), (3, 5)]);
    let mut rows = Vec::new();
    let mut push = |op: &str, err: f64| rows.push(CheckResult { op: op.into(), max_rel_error: err });

    type Case = (&'static str, Vec<Vec<usize>>, bool, Box<dyn Fn(&mut SeededRng, &[usize]) -> UnaryCase>);
    let cases: Vec<Case> = vec![
        ("matmul.lhs", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, &[d[1], 3]);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; t.matmul(x, b) })
        })),
        ("matmul.rhs", m3.clone(), false, Box::new(|rng, d| {
            let a = random(rng, &[2, d[0]]);
            Box::new(move |t, x| { let a = t.constant(a.clone())?; t.matmul(a, x) })
        })),
        ("matmul.batched", vec![vec![2, 2, 3], vec![3, 1, 2], vec![1, 3, 3]], false, Box::new(|rng, d| {
            let b = random(rng, &[d[2], 2]);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; t.matmul(x, b) })
        })),
        ("matmul_nt.lhs", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, &[4, d[1]]);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; t.matmul_nt(x, b) })
        })),
        ("matmul_nt.rhs", m3.clone(), false, Box::new(|rng, d| {
            let a = random(rng, &[3, d[1]]);
            Box::new(move |t, x| { let a = t.constant(a.clone())?; t.matmul_nt(a, x) })
        })),
        ("transpose", vec![vec![2, 3], vec![1, 4], vec![2, 3, 2]], false, Box::new(|_, _| {
            Box::new(|t, x| t.transpose(x))
        })),
        ("add", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, d);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; t.add(x, b) })
        })),
        ("sub", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, d);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; let y = t.sub(b, x)?; t.sub(y, x) })
        })),
        ("mul", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, d);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; let y = t.mul(x, b)?; t.mul(y, x) })
        })),
        ("add_bias.input", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, &[d[1]]);
            Box::new(move |t, x| { let b = t.constant(b.clone())?; t.add_bias(x, b) })
        })),
        ("add_bias.bias", vec![vec![3], vec![1], vec![5]], false, Box::new(|rng, d| {
            let a = random(rng, &[2, d[0]]);
            Box::new(move |t, x| { let a = t.constant(a.clone())?; t.add_bias(a, x) })
        })),
        ("add_const", m3.clone(), false, Box::new(|rng, d| {
            let c = random(rng, d);
            Box::new(move |t, x| t.add_const(x, &c))
        })),
        ("add_scalar", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.add_scalar(x, 0.7)))),
        ("scale", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.scale(x, -1.3)))),
        ("one_minus", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.one_minus(x)))),
        ("relu", m3.clone(), true, Box::new(|_, _| Box::new(|t, x| t.relu(x)))),
        ("sigmoid", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.sigmoid(x)))),
        ("softmax", vec![vec![2, 3], vec![1, 4], vec![2, 2, 3]], false, Box::new(|_, _| {
            Box::new(|t, x| t.softmax(x))
        })),
        ("masked_softmax", mats(&[(2, 3), (3, 4), (2, 5)]), false, Box::new(|rng, d| {
            // keep one entry per row so no row is fully masked
            let mask: Vec<bool> = (0..d[0] * d[1]).map(|i| i % d[1] == 0 || rng.bernoulli(0.6)).collect();
            Box::new(move |t, x| t.masked_softmax(x, &mask))
        })),
        ("layer_norm.input", m3.iter().filter(|d| d[1] > 1).cloned().chain([vec![3, 4]]).collect(), false, Box::new(|rng, d| {
            let g = random(rng, &[d[1]]);
            let b = random(rng, &[d[1]]);
            Box::new(move |t, x| {
                let g = t.constant(g.clone())?;
                let b = t.constant(b.clone())?;
                t.layer_norm(x, g, b, 1e-5)
            })
        })),
        ("layer_norm.gamma", vec![vec![3], vec![2], vec![5]], false, Box::new(|rng, d| {
            let a = random(rng, &[2, d[0]]);
            let b = random(rng, &[d[0]]);
            Box::new(move |t, x| {
                let a = t.constant(a.clone())?;
                let b = t.constant(b.clone())?;
                t.layer_norm(a, x, b, 1e-5)
            })
        })),
        ("layer_norm.beta", vec![vec![3], vec![2], vec![5]], false, Box::new(|rng, d| {
            let a = random(rng, &[2, d[0]]);
            let g = random(rng, &[d[0]]);
            Box::new(move |t, x| {
                let a = t.constant(a.clone())?;
                let g = t.constant(g.clone())?;
                t.layer_norm(a, g, x, 1e-5)
            })
        })),
        ("concat_last", m3.clone(), false, Box::new(|rng, d| {
            let b = random(rng, &[d[0], 2]);
            Box::new(move |t, x| {
                let b = t.constant(b.clone())?;
                let y = t.concat_last(x, b)?;
                let z = t.concat_last(b, x)?;
                t.add(y, z)
            })
        })),
        ("slice_last", mats(&[(2, 3), (3, 4), (1, 5)]), false, Box::new(|_, d| {
            let len = d[1] - 1;
            Box::new(move |t, x| t.slice_last(x, 1, len))
        })),
        ("slice_rows", mats(&[(3, 2), (4, 3), (2, 5)]), false, Box::new(|_, d| {
            let len = d[0] - 1;
            Box::new(move |t, x| t.slice_rows(x, 1, len))
        })),
        ("gather_rows", m3.clone(), false, Box::new(|rng, d| {
            let idx: Vec<usize> = (0..4).map(|_| rng.int_in(0, d[0] - 1)).collect();
            Box::new(move |t, x| t.gather_rows(x, &idx))
        })),
        ("lift_history", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.lift_history(x, 3)))),
        ("select_last", vec![vec![2, 3, 2], vec![1, 2, 3], vec![3, 1, 4]], false, Box::new(|_, d| {
            let k = d[2] - 1;
            Box::new(move |t, x| t.select_last(x, k))
        })),
        ("ema_scan", vec![vec![3, 2, 2], vec![5, 3], vec![1, 2, 3]], false, Box::new(|rng, d| {
            let block: usize = d[1..].iter().product();
            let init: Vec<f64> = (0..block).map(|_| rng.uniform()).collect();
            Box::new(move |t, x| t.ema_scan(x, &init, 0.8))
        })),
        ("sum", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.sum(x)))),
        ("mean_rows", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.mean_rows(x)))),
        ("sum_squares", m3.clone(), false, Box::new(|_, _| Box::new(|t, x| t.sum_squares(x)))),
    ];
    for (name, shapes, off_zero, build) in &cases {
        let err = check_op(&mut rng, shapes, *off_zero, build.as_ref())?;
        push(name, err);
    }
    Ok(rows)
}

/// The smallest full model: `d = 4`, `n = 2`, `T = 4`, `T' = 2`, three
/// tokens of text per step, every component on.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        d: 4,
        n: 2,
        // Two stacked node norms over n = 2 entries are too ill-conditioned
        // for central differences; one layer keeps every op on the path.
        layers: 1,
        window: 4,
        horizon: 2,
        blocks: 1,
        heads: 1,
        slots_per_day: 4,
        components: ComponentSet::all(),
        lambda_prompt: 0.5,
        ..TrainConfig::default()
    }
}

/// A hand-built window for [`tiny_config`].
pub fn tiny_window(cfg: &TrainConfig, rng: &mut SeededRng) -> Result<SeriesWindow> {
    let texts = ["rush hour demand", "large concert tonight", "rain near station", "stadium event crowd"];
    let local = (0..cfg.window)
        .map(|t| encode_hashed(texts[t % texts.len()], cfg.d).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let global = encode_hashed("citywide holiday parade", cfg.d)?.pooled().to_vec();
    let start = Utc.with_ymd_and_hms(2024, 10, 1, 0, 0, 0).unwrap();
    Ok(SeriesWindow {
        region: 0,
        region_id: "r0".into(),
        start: 0,
        features: random(rng, &[cfg.window, NUM_FEATURES]),
        times: (0..cfg.window)
            .map(|t| StepTime { slot: t % cfg.slots_per_day, weekday: t % 7 })
            .collect(),
        local,
        global: Arc::new(global),
        next_step: (0..cfg.window).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        targets: (0..cfg.horizon).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        targets_raw: vec![0.0; cfg.horizon],
        target_times: (0..cfg.horizon).map(|k| start + chrono::Duration::hours(k as i64)).collect(),
    })
}

/// Initial parameters with every entry nudged by noise, so zero-initialized
/// branches do not hide gradients.
fn perturbed_params(cfg: &TrainConfig, rng: &mut SeededRng) -> ModelParams {
    let mut params = model::init_params(cfg, NUM_FEATURES, rng);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let t = params.get_mut(&name).expect("listed name");
        for v in t.data_mut() {
            *v += rng.uniform_in(-0.3, 0.3);
        }
    }
    params
}

fn random_structure(d: usize, rng: &mut SeededRng) -> Result<FrozenStructure> {
    let raw = Tensor::from_parts(vec![d, d], (0..d * d).map(|_| rng.uniform_in(0.1, 1.0)).collect());
    Ok(FrozenStructure::new(StructuralMatrix::renormalized(raw)?, "gradcheck"))
}

/// Parameter groups reported by the end-to-end check.
const GROUPS: [&str; 6] = ["embed.", "lpo.", "dgso.", "global.", "ssa.", "aux."];

/// End-to-end checks: the horizon loss of the full forward pass and the
/// first-stage loss, each differentiated with respect to every parameter
/// and reported per parameter group.
pub fn loss_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = tiny_config();
    let mut rng = SeededRng::stream(seed, Stream::Probe);
    let params = perturbed_params(&cfg, &mut rng);
    let window = tiny_window(&cfg, &mut rng)?;
    let frozen = random_structure(cfg.d, &mut rng)?;

    let joint = |tape: &mut Tape, binder: &mut Binder<'_>| -> Result<Var> {
        let out = model::forward(tape, binder, &cfg, &window, Some(&frozen))?;
        joint_loss(tape, out.prediction, &window.targets, out.prompt_loss(), cfg.lambda_prompt)
    };
    let first = |tape: &mut Tape, binder: &mut Binder<'_>| -> Result<Var> {
        let (pred, local) = model::forward_stage1(tape, binder, &cfg, &window)?;
        stage1_loss(tape, pred, &window.next_step, local.prompt_loss, cfg.lambda_prompt)
    };

    let mut rows = Vec::new();
    type Loss<'a> = &'a dyn Fn(&mut Tape, &mut Binder<'_>) -> Result<Var>;
    type Named<'a> = (&'a str, Loss<'a>, &'a dyn Fn(&str) -> bool);
    let losses: [Named<'_>; 2] = [
        ("joint_loss", &joint, &stage2_trainable),
        ("stage1_loss", &first, &model::stage1_trainable),
    ];
    for (label, loss, trainable) in losses {
        for group in GROUPS {
            let names: Vec<&str> = params.names().filter(|n| n.starts_with(group) && trainable(n)).collect();
            if names.is_empty() {
                continue;
            }
            let mut worst: f64 = 0.0;
            for name in names {
                let err = grad_check(
                    |tape, leaf| {
                        let mut binder = Binder::new(&params, None);
                        binder.bind_as(name, leaf);
                        loss(tape, &mut binder)
                    },
                    params.get(name)?,
                    DEFAULT_STEP,
                )?;
                worst = worst.max(err);
            }
            rows.push(CheckResult {
                op: format!("{label}[{}]", group.trim_end_matches('.')),
                max_rel_error: worst,
            });
        }
    }
    Ok(rows)
}

/// Operation table followed by the end-to-end rows.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rows = op_suite(seed)?;
    rows.extend(loss_suite(seed)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let err = grad_check(|t, v| t.sum_squares(v), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative; the probe straddles it.
        let x = Tensor::vector(vec![0.0]).unwrap();
        let err = grad_check(|t, v| {
            let r = t.relu(v)?;
            t.sum(r)
        }, &x, DEFAULT_STEP)
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn full_suite_passes() {
        let rows = suite(0).unwrap();
        for r in &rows {
            eprintln!("{},{:.3e}", r.op, r.max_rel_error);
        }
        assert!(rows.iter().all(|r| r.passes(1e-4)));
        assert!(rows.iter().any(|r| r.op == "joint_loss[dgso]"));
    }
}
