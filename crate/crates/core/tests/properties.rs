use proptest::prelude::*;

use kgcm::autodiff::Tape;
use kgcm::eval::{mae, mape, rmse};
use kgcm::model::dgso::{build_relation_matrix, ema_update, max_row_deviation, smooth_relations, StructuralMatrix};
use kgcm::model::global::acmfw_weight;
use kgcm::text::encode_hashed;
use kgcm::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn stochastic(d: usize) -> impl Strategy<Value = StructuralMatrix> {
    prop::collection::vec(0.0f64..1.0, d * d)
        .prop_map(move |v| StructuralMatrix::renormalized(Tensor::new(&[d, d], v.iter().map(|x| x + 1e-3).collect()).unwrap()).unwrap())
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..30).prop_flat_map(|n| (prop::collection::vec(-50.0f64..50.0, n), prop::collection::vec(-50.0f64..50.0, n)))
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-zA-Z0-9]{1,8}", 0..12)
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(m in (1usize..6, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::new();
        let x = tape.constant(m).unwrap();
        let s = tape.softmax(x).unwrap();
        prop_assert!(max_row_deviation(tape.value(s)) < 1e-12);
        prop_assert!(tape.value(s).data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn relation_matrices_stay_stochastic(
        d in 2usize..5,
        n in 1usize..4,
        seed in any::<u64>(),
        lambda in 0.0f64..=1.0,
    ) {
        let mut rng = kgcm::rng::SeededRng::new(seed);
        let mut draw = |dims: &[usize]| {
            let len = dims.iter().product();
            Tensor::new(dims, (0..len).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).unwrap()
        };
        let mut tape = Tape::new();
        let states = tape.constant(draw(&[3, d, n])).unwrap();
        let wq = tape.constant(draw(&[n, 2])).unwrap();
        let wk = tape.constant(draw(&[n, 2])).unwrap();
        let raw = build_relation_matrix(&mut tape, states, wq, wk).unwrap();
        prop_assert!(max_row_deviation(tape.value(raw)) < 1e-9);
        let (_, smoothed) = smooth_relations(&mut tape, raw, lambda).unwrap();
        prop_assert!(max_row_deviation(&smoothed) < 1e-9);
    }

    #[test]
    fn ema_of_stochastic_is_stochastic(a in stochastic(4), b in stochastic(4), lambda in 0.0f64..=1.0) {
        let m = ema_update(&a, &b, lambda).unwrap();
        prop_assert!(m.max_row_deviation() < 1e-9);
    }

    #[test]
    fn feature_weighting_is_linear_and_contracts(
        a in stochastic(3),
        u in prop::collection::vec(-5.0f64..5.0, 3),
        v in prop::collection::vec(-5.0f64..5.0, 3),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let apply = |x: &[f64]| {
            let mut tape = Tape::new();
            let h = tape.constant(Tensor::new(&[1, 3], x.to_vec()).unwrap()).unwrap();
            let y = acmfw_weight(&mut tape, h, &a).unwrap();
            tape.value(y).data().to_vec()
        };
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
        let lhs = apply(&mix);
        let (fu, fv) = (apply(&u), apply(&v));
        for i in 0..3 {
            prop_assert!((lhs[i] - (alpha * fu[i] + beta * fv[i])).abs() < 1e-12);
        }
        let (lo, hi) = u.iter().fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(*x), h.max(*x)));
        prop_assert!(fu.iter().all(|y| *y >= lo - 1e-12 && *y <= hi + 1e-12));
    }

    #[test]
    fn rmse_dominates_mae((p, t) in pairs()) {
        prop_assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-12);
    }

    #[test]
    fn mape_is_floor_monotone((p, t) in pairs(), f1 in 0.01f64..10.0, extra in 0.0f64..10.0) {
        let (low, n_low) = mape(&p, &t, f1).unwrap();
        let (high, n_high) = mape(&p, &t, f1 + extra).unwrap();
        prop_assert!(high <= low + 1e-9);
        prop_assert!(n_high >= n_low);
    }

    #[test]
    fn metrics_ignore_point_order((p, t) in pairs(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        kgcm::rng::SeededRng::new(seed).shuffle(&mut idx);
        let ps: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let ts: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        prop_assert!((mae(&p, &t).unwrap() - mae(&ps, &ts).unwrap()).abs() < 1e-9);
        prop_assert!((rmse(&p, &t).unwrap() - rmse(&ps, &ts).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn hashed_encoding_ignores_token_order(w in words(), seed in any::<u64>(), d in 2usize..40) {
        let mut shuffled = w.clone();
        kgcm::rng::SeededRng::new(seed).shuffle(&mut shuffled);
        let a = encode_hashed(&w.join(" "), d).unwrap();
        let b = encode_hashed(&shuffled.join(" "), d).unwrap();
        prop_assert_eq!(a.pooled(), b.pooled());
        let rows = |e: &kgcm::text::TokenEmbeddings| {
            let mut r: Vec<Vec<u64>> = (0..e.num_tokens()).map(|i| e.token(i).iter().map(|x| x.to_bits()).collect()).collect();
            r.sort();
            r
        };
        prop_assert_eq!(rows(&a), rows(&b));
        let norm = a.pooled().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm.abs() < 1e-12 || (norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows(m in (1usize..4, 2usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let c = m.last_dim();
        let mut tape = Tape::new();
        let x = tape.constant(m.clone()).unwrap();
        let g = tape.constant(Tensor::filled(&[c], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[c])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for (row, src) in tape.value(y).data().chunks(c).zip(m.data().chunks(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
            let src_mean = src.iter().sum::<f64>() / c as f64;
            let src_var = src.iter().map(|v| (v - src_mean).powi(2)).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            // eps shrinks the variance of nearly constant rows
            prop_assume!(src_var > 1e-2);
            prop_assert!((var - 1.0).abs() < 1e-3 * (1.0 + 1e-5 / src_var) );
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_identity(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let mut params = kgcm::params::ModelParams::new();
        params.insert("w", Tensor::vector(v.clone()).unwrap());
        let before = params.clone();
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[v.len()]));
        let mut adam = kgcm::optim::AdamState::new(kgcm::optim::AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        prop_assert_eq!(params, before);
    }
}
