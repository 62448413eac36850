mod common;

use saveri::config::Config;
use saveri::dynamics::{rollout_batch, ClosedLoopSystem, Variant};
use saveri::eval::probe_brier;
use saveri::grid::{BeliefParams, DecayMode, GridModel, GridSpec};
use saveri::metric::DistanceMatrix;
use saveri::embedding::joint_probabilities;

use common::*;

// With prior weight w = (1 - mu_prior) / mu_prior, the combined belief sits
// w mu_f / (1 - mu_f + w mu_f) of the way from the feedback belief to the prior.
#[test]
fn feedback_overrides_a_contradicting_prior() {
    let params = BeliefParams {
        k_min: 5,
        alpha: 0.4,
        beta: 0.3,
        decay: DecayMode::Global,
    };
    let spec = GridSpec::new([0.0, 0.0], 1.0, [2, 2]).unwrap();
    let points = vec![vec![0.5, 0.5]; 10];
    let mut model = GridModel::new(spec, params, &points, &[0.0; 10], 0.3).unwrap();
    let prior = model.cell([0, 0]).prior;
    let w = (1.0 - prior.mu) / prior.mu;
    let mut last = f64::INFINITY;
    for n in 1..=60 {
        model.add_feedback(&[0.5, 0.5], 1.0, 0.0).unwrap();
        model.recompute_feedback();
        model.recompute_combined();
        let cell = model.cell([0, 0]);
        let mu_f = cell.feedback.mu;
        let gap = cell.combined.max_diff(&cell.feedback);
        let bound = w * mu_f * prior.max_diff(&cell.feedback) / (1.0 - mu_f + w * mu_f);
        assert!(gap <= bound + 1e-12, "step {n}: {gap} > {bound}");
        assert!(gap <= last + 1e-15);
        last = gap;
    }
    assert!(last < 1e-9);
}

#[test]
fn adaptation_without_a_gap_does_no_harm() {
    let mut bundle = build("point-mass", 128, 21, Config::default());
    let mut cfg = bundle.meta.system.with_variant(Variant::Real);
    cfg.gap.scale = 0.0;
    let same = ClosedLoopSystem::from_config(&cfg).unwrap();
    let probes = rollout_batch(&same, EPISODE_STEPS, 22, 150).unwrap();
    let pre = probe_brier(&assessor(&bundle), &probes).unwrap();
    let k_u = bundle.config.adapt.k_u;
    saveri::cli::adapt_bundle(&mut bundle, &same, 60, k_u, 23).unwrap();
    let post = probe_brier(&assessor(&bundle), &probes).unwrap();
    assert!(post <= pre + 0.02, "{pre} -> {post}");
}

#[test]
fn every_row_reaches_the_target_perplexity() {
    let n = 90;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = ((i as f64).sqrt() - (j as f64).sqrt()).abs() + 0.01 * ((i != j) as u8 * ((i * j) % 7) as u8) as f64;
        }
    }
    for i in 0..n {
        for j in 0..i {
            values[i * n + j] = values[j * n + i];
        }
    }
    let dist = DistanceMatrix::from_values(n, values, 1.0).unwrap();
    for perplexity in [5.0, 15.0, 30.0] {
        let (p, achieved) = joint_probabilities(&dist, perplexity).unwrap();
        for (i, a) in achieved.iter().enumerate() {
            assert!((a - perplexity).abs() <= 1e-3, "row {i}: {a} vs {perplexity}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
