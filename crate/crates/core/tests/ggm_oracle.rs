mod common;

use collabdict::consensus::Aggregator;
use collabdict::ggm::{
    anomaly_score, fit, fit_from, graphical_lasso, initialize, kkt_residual, logdet_weight,
    off_diagonal_nonzeros, GgmCheckpoint, GgmConfig, GgmError, GgmGlobal, GgmHyper, GgmScorer,
    GlassoOptions,
};
use collabdict::harness::PlantedConfig;
use collabdict::topology::{Graph, WeightMatrix};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn rounds_match_centralized_em_exact_aggregation() {
    for seed in 0..6 {
        let inst = ggm_instance(100 + seed);
        let cmp = compare_with_oracle(&inst, &Aggregator::Exact, 6, seed);
        assert!(cmp.max_diff < 1e-8, "seed {seed}: {}", cmp.max_diff);
        assert!(non_decreasing(&cmp.objectives), "seed {seed}: {:?}", cmp.objectives);
    }
}

#[test]
fn rounds_match_centralized_em_gossip() {
    for seed in 0..4 {
        let inst = ggm_instance(200 + seed);
        let cmp = compare_with_oracle(&inst, &tight_gossip(), 5, seed);
        assert!(cmp.max_diff < 1e-5, "seed {seed}: {}", cmp.max_diff);
    }
}

#[test]
fn single_participant_fit_equals_centralized_loop() {
    let data = mixture_data(1, 2, 2, 120, 7);
    let mut config = GgmConfig::<f64>::new(2, 2);
    config.hyper.delta = 1e-3;
    config.max_rounds = 15;
    config.tol = 0.0;
    let w = WeightMatrix::from_graph(&Graph::empty(1));
    let (g0, l0) = initialize(&data, 2, &config.hyper, 1e-2, 5).unwrap();
    let fitted = fit_from(&data, &w, &config, &Aggregator::Exact, g0.clone(), l0.clone(), 1).unwrap();

    let mut means = g0.means.clone();
    let mut precisions = g0.precisions.clone();
    let mut weights = local_weights(&l0);
    for _ in 0..15 {
        let r = centralized_em_round(&data, &means, &precisions, &weights, &config.hyper);
        means = r.means;
        precisions = r.precisions;
        weights = r.weights;
    }
    assert!(max_param_diff(fitted.global(), &means, &precisions) < 1e-8);
}

#[test]
fn planted_means_recovered() {
    let planted = PlantedConfig {
        participants: 4,
        dim: 2,
        clusters: 2,
        samples_per_participant: 400,
        separation: 8.0,
        correlation: 0.3,
        anomaly_rate: 0.0,
        anomaly_shift: 5.0,
    };
    let spec = planted.to_spec(3).unwrap();
    let data = spec.generate().unwrap();
    let w = WeightMatrix::from_graph(&Graph::cycle(4).unwrap());
    let config = GgmConfig::<f64>::new(2, 2);
    let fitted = fit(&data.datasets, &w, &config, &tight_gossip(), 9).unwrap();
    assert!(fitted.converged);
    let truth: Vec<DVector<f64>> = spec.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
    let err = matched_max_distance(&fitted.global().means, &truth);
    assert!(err < 0.1, "matched distance {err}");
    assert!(non_decreasing(&fitted.history.iter().map(|h| h.objective).collect::<Vec<_>>()));
    assert!(fitted.history.iter().all(|h| h.view_spread < 1e-6));
}

#[test]
fn fitted_precisions_satisfy_kkt() {
    let inst = ggm_instance(31);
    let cmp = compare_with_oracle(&inst, &Aggregator::Exact, 3, 0);
    assert!(cmp.max_diff < 1e-8);
    for seed in 0..5 {
        let sigma = random_spd(4, seed);
        for rho in [0.0, 0.05, 0.5] {
            let n = 40.0;
            let sol = graphical_lasso(&sigma, rho, n, &GlassoOptions::default()).unwrap();
            assert!(kkt_violation(&sol.precision, &sigma, rho, n) < 1e-7);
            assert!(kkt_residual(&sol.precision, &sigma, rho, n) < 1e-7);
        }
    }
}

#[test]
fn glasso_unpenalized_is_scaled_inverse() {
    for seed in 0..5 {
        let sigma = random_spd(5, 50 + seed);
        let n = 17.0;
        let sol = graphical_lasso(&sigma, 0.0, n, &GlassoOptions::default()).unwrap();
        let expected = sigma.clone().try_inverse().unwrap() * logdet_weight(n);
        assert!((&sol.precision - expected).amax() < 1e-8);
    }
}

#[test]
fn glasso_sparsity_monotone_in_penalty() {
    let sigma = random_spd(6, 77);
    let mut last = usize::MAX;
    for rho in [0.0, 0.5, 2.0, 5.0, 20.0, 100.0] {
        let sol = graphical_lasso(&sigma, rho, 10.0, &GlassoOptions::default()).unwrap();
        let nz = off_diagonal_nonzeros(&sol.precision, 0.0);
        assert!(nz <= last);
        last = nz;
    }
    assert_eq!(last, 0);
}

#[test]
fn anomaly_score_of_standard_normal_origin() {
    let global = GgmGlobal {
        means: vec![DVector::zeros(1)],
        precisions: vec![DMatrix::identity(1, 1)],
        hyper: GgmHyper::with_dim(1),
    };
    let w = DVector::from_element(1, 1.0);
    let v: f64 = anomaly_score(&DVector::zeros(1), &w, &global).unwrap();
    assert!((v - 0.918939).abs() < 1e-6);
}

#[test]
fn score_is_responsibility_weighted_negative_log_density() {
    let inst = ggm_instance(5);
    let m = inst.hyper.m0.len();
    let (global, _) = initialize(&inst.datasets, inst.k, &inst.hyper, 0.5, 3).unwrap();
    let pi = DVector::from_element(inst.k, 1.0 / inst.k as f64);
    let scorer = GgmScorer::new(&pi, &global).unwrap();
    let x = DVector::from_element(m, 0.7);
    let logs: Vec<f64> = (0..inst.k)
        .map(|k| pi[k].ln() + log_gauss(&x, &global.means[k], &global.precisions[k]))
        .collect();
    let z = lse(&logs);
    let expected: f64 = (0..inst.k)
        .map(|k| -(logs[k] - z).exp() * log_gauss(&x, &global.means[k], &global.precisions[k]))
        .sum();
    assert!((scorer.score(&x) - expected).abs() < 1e-9 * (1.0 + expected.abs()));
}

#[test]
fn checkpoint_round_trip() {
    let data = mixture_data(3, 3, 2, 60, 8);
    let w = WeightMatrix::from_graph(&Graph::cycle(3).unwrap());
    let mut config = GgmConfig::<f64>::new(2, 3);
    config.max_rounds = 10;
    let fitted = fit(&data, &w, &config, &Aggregator::Exact, 2).unwrap();
    let ckpt = GgmCheckpoint::from_model(fitted.global(), &fitted.weights());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let (g, weights) = GgmCheckpoint::load(&path).unwrap().to_model::<f64>().unwrap();
    assert!(max_param_diff(&g, &fitted.global().means, &fitted.global().precisions) == 0.0);
    assert_eq!(weights, fitted.weights());
}

#[test]
fn invalid_inputs_are_rejected() {
    let data = mixture_data(2, 2, 1, 20, 1);
    let w = WeightMatrix::from_graph(&graph_for(2));
    let config = GgmConfig::<f64>::new(0, 2);
    assert!(matches!(
        fit(&data, &w, &config, &Aggregator::Exact, 0),
        Err(GgmError::InvalidConfig(_))
    ));
    let mut config = GgmConfig::<f64>::new(2, 2);
    config.hyper.delta = 1e9;
    assert!(matches!(
        fit(&data, &w, &config, &Aggregator::Exact, 0),
        Err(GgmError::ModelCollapse { .. })
    ));
    let config = GgmConfig::<f64>::new(2, 3);
    assert!(fit(&data, &w, &config, &Aggregator::Exact, 0).is_err());
    let empty = vec![DMatrix::<f64>::zeros(0, 2), data[1].clone()];
    let config = GgmConfig::<f64>::new(2, 2);
    assert!(fit(&empty, &w, &config, &Aggregator::Exact, 0).is_err());
}

#[test]
fn f32_fit_runs() {
    let data: Vec<DMatrix<f32>> = mixture_data(3, 2, 2, 50, 4)
        .into_iter()
        .map(|d| d.map(|v| v as f32))
        .collect();
    let w = WeightMatrix::<f32>::from_graph(&Graph::cycle(3).unwrap());
    let mut config = GgmConfig::<f32>::new(2, 2);
    config.max_rounds = 20;
    config.tol = 1e-3;
    config.glasso.tol = 1e-6;
    let fitted = fit(&data, &w, &config, &Aggregator::Exact, 0).unwrap();
    assert!(fitted.global().means.iter().all(|m| m.iter().all(|v| v.is_finite())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn responsibilities_on_simplex(seed in 0u64..10_000, x in prop::collection::vec(-50.0f64..50.0, 3)) {
        let data = mixture_data(1, 3, 3, 10, seed);
        let hyper = GgmHyper::with_dim(3);
        let (global, _) = initialize(&data, 3, &hyper, 1.0, seed).unwrap();
        let comps = global.components().unwrap();
        let pi = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let r = collabdict::ggm::responsibilities(&DVector::from_vec(x), &pi, &comps);
        prop_assert!((r.sum() - 1.0).abs() < 1e-12);
        prop_assert!(r.iter().all(|v| *v >= 0.0 && *v <= 1.0));
    }

    #[test]
    fn rounds_keep_weights_on_simplex_and_precisions_pd(seed in 0u64..1000) {
        let inst = ggm_instance(seed);
        let s = inst.datasets.len();
        let w = WeightMatrix::from_graph(&graph_for(s));
        let mut config = GgmConfig::<f64>::new(inst.k, inst.hyper.m0.len());
        config.hyper = inst.hyper.clone();
        config.max_rounds = 3;
        let fitted = fit(&inst.datasets, &w, &config, &Aggregator::Exact, seed).unwrap();
        for pi in fitted.weights() {
            prop_assert!((pi.sum() - 1.0).abs() < 1e-12);
            prop_assert!(pi.iter().all(|v| *v >= 0.0));
        }
        for p in &fitted.global().precisions {
            prop_assert!(p.clone().cholesky().is_some());
            prop_assert!((p - p.transpose()).amax() < 1e-12);
        }
    }
}
