//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported, not hidden; the process exits non-zero
//! only if a check cannot be run at all.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saveri::adapt::{reweighted_uncertainty, AdaptConfig, DiscrepancyGp, GpHyper, Prediction};
use saveri::belief::{bba_from_feedback, fuse_f, fuse_g, Bba, EMPTY};
use saveri::config::Config;
use saveri::dataset::{discount, nominal_replay, unsafety_score};
use saveri::dynamics::{rollout_batch, DesiredTrajectory, Episode};
use saveri::embedding::{joint_probabilities, tsne_embed, Activation, EmbeddingConfig, MappingNetwork};
use saveri::eval::{evaluate, first_trigger, lead_time, probe_brier, LeadTimes};
use saveri::grid::{BeliefParams, DecayMode, GridModel, GridSpec};
use saveri::metric::{distance_matrix_from, dtw, DistanceMatrix};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {tag} {name}: {}", o.detail);
}

fn main() {
    let started = Instant::now();
    let mut passed = 0;
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("cart-pole per-class accuracy", accuracy),
        ("point-mass Brier improvement", brier_improvement),
        ("feedback convergence bound", convergence),
        ("belief algebra", belief_algebra),
        ("scoring and metric oracles", scoring_and_metric),
        ("embedding checks", embedding),
        ("regression checks", regression),
        ("recovery trigger", trigger),
        ("determinism", determinism),
    ];
    for (i, (name, check)) in checks.iter().enumerate() {
        let o = check();
        passed += o.pass as usize;
        report(i + 1, name, &o);
    }
    println!("{passed}/9 criteria pass ({:.0} s)", started.elapsed().as_secs_f64());
}

// 512 nominal episodes, 200 real adaptation episodes, 500 fresh real episodes
// at threshold 0.5. Shared with the trigger check.
fn cart_pole_model() -> &'static (saveri::bundle::ModelBundle, f64) {
    static MODEL: std::sync::OnceLock<(saveri::bundle::ModelBundle, f64)> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| {
        let t = Instant::now();
        let mut bundle = build("cart-pole", 512, 1, cart_pole_config());
        adapt(&mut bundle, 200, 3);
        (bundle, t.elapsed().as_secs_f64())
    })
}

fn accuracy() -> Outcome {
    let t = Instant::now();
    let (bundle, build_secs) = cart_pole_model();
    let real = real_system(bundle);
    let (rep, _, _) = evaluate(&assessor(bundle), &real, EPISODE_STEPS, 500, 7, 0.5).unwrap();
    let secs = build_secs + t.elapsed().as_secs_f64();
    let safe = rep.safe_accuracy.unwrap_or(0.0);
    let unsafe_ = rep.unsafe_accuracy.unwrap_or(0.0);
    Outcome {
        pass: safe >= 0.85 && unsafe_ >= 0.85 && secs <= 600.0,
        detail: format!(
            "safe {safe:.3}, unsafe {unsafe_:.3} (need >= 0.850 each); {} safe / {} unsafe episodes; {secs:.0} s on {} thread(s) (limit 600 s)",
            rep.confusion.safe_predicted_safe + rep.confusion.safe_predicted_unsafe,
            rep.confusion.unsafe_predicted_unsafe + rep.confusion.unsafe_predicted_safe,
            rayon::current_num_threads()
        ),
    }
}

fn brier_improvement() -> Outcome {
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for s in 0..5u64 {
        let mut bundle = build("point-mass", 256, 100 + s, Config::default());
        let probes = rollout_batch(&real_system(&bundle), EPISODE_STEPS, 200 + s, 300).unwrap();
        pre.push(probe_brier(&assessor(&bundle), &probes).unwrap());
        adapt(&mut bundle, 200, 300 + s);
        post.push(probe_brier(&assessor(&bundle), &probes).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let drop = 1.0 - mean(&post) / mean(&pre);
    Outcome {
        pass: drop >= 0.10,
        detail: format!(
            "mean Brier {:.4} -> {:.4}, relative drop {drop:.3} (need >= 0.100); per seed {}",
            mean(&pre),
            mean(&post),
            pre.iter()
                .zip(&post)
                .map(|(a, b)| format!("{a:.3}->{b:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    }
}

fn convergence() -> Outcome {
    let params = BeliefParams {
        k_min: 5,
        alpha: 0.4,
        beta: 0.3,
        decay: DecayMode::Global,
    };
    let spec = GridSpec::new([0.0, 0.0], 1.0, [2, 2]).unwrap();
    let points = vec![vec![0.5, 0.5]; 10];
    let mut model = GridModel::new(spec, params, &points, &[0.0; 10], 0.3).unwrap();
    let mut worst = f64::NEG_INFINITY;
    let mut first_violation = None;
    let mut last_gap = 0.0;
    for n in 1..=50 {
        model.add_feedback(&[0.5, 0.5], 1.0, 0.0).unwrap();
        model.recompute_feedback();
        model.recompute_combined();
        let cell = model.cell([0, 0]);
        let gap = cell.combined.max_diff(&cell.feedback);
        let bound = 0.3 * (-0.4 * (n - 1) as f64).exp() + 1e-9;
        if gap > bound && first_violation.is_none() {
            first_violation = Some((n, gap, bound));
        }
        worst = worst.max(gap - bound);
        last_gap = gap;
    }
    let detail = match first_violation {
        None => format!("gap within the bound at all 50 steps; final gap {last_gap:.2e}"),
        Some((n, gap, bound)) => format!(
            "bound exceeded from step {n} (gap {gap:.4} > {bound:.4}); worst excess {worst:.4}; gap still shrinks to {last_gap:.2e} at step 50"
        ),
    };
    Outcome {
        pass: first_violation.is_none(),
        detail,
    }
}

fn random_bba(rng: &mut ChaCha8Rng) -> Bba {
    let mu: f64 = rng.random_range(0.0..=1.0);
    let share: f64 = rng.random_range(0.0..=1.0);
    Bba::new((1.0 - mu) * share, (1.0 - mu) * (1.0 - share), mu).unwrap()
}

fn belief_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_norm: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=12);
        let mut set: Vec<Bba> = (0..k).map(|_| random_bba(&mut rng)).collect();
        let fused = fuse_f(&set);
        worst_norm = worst_norm.max((fused.sum() - 1.0).abs());
        set.shuffle(&mut rng);
        worst_perm = worst_perm.max(fuse_f(&set).max_diff(&fused));

        let b = random_bba(&mut rng);
        let copies = vec![b; k];
        if b.mu < 1.0 {
            worst_idem = worst_idem.max(fuse_f(&copies).max_diff(&b));
            worst_identity = worst_identity.max(fuse_f(&[b, EMPTY]).max_diff(&b));
        }
        worst_identity = worst_identity.max(fuse_f(&[b]).max_diff(&b));

        let fb: Vec<Bba> = (0..k).map(|_| bba_from_feedback(rng.random_range(0.0..=1.0)).unwrap()).collect();
        let g = fuse_g(&fb, rng.random_range(1..=200), 0.4, 0.3);
        worst_g = worst_g.max((g.sum() - 1.0).abs());
    }
    let one = [bba_from_feedback(0.0).unwrap()];
    let at_one = fuse_g(&one, 1, 0.4, 0.3).mu;
    let end = 1 + ((1000.0f64 * 0.3).ln() / 0.4).ceil() as usize;
    let at_end = fuse_g(&one, end, 0.4, 0.3).mu;
    let pass = worst_norm <= 1e-9
        && worst_idem <= 1e-12
        && worst_identity <= 1e-12
        && worst_perm == 0.0
        && worst_g <= 1e-9
        && at_one == 0.3
        && at_end <= 1e-3;
    Outcome {
        pass,
        detail: format!(
            "10^4 sets: |sum-1| {worst_norm:.1e}, idempotence {worst_idem:.1e}, identities {worst_identity:.1e}, permutation {worst_perm:.1e}, fuse_G |sum-1| {worst_g:.1e}; mu at count 1 = {at_one}, at count {end} = {at_end:.2e}"
        ),
    }
}

fn walk_all_paths(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64) -> f64 {
    let cost = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let acc = acc + cost;
    if i + 1 == a.len() && j + 1 == b.len() {
        return acc;
    }
    let mut best = f64::INFINITY;
    if i + 1 < a.len() {
        best = best.min(walk_all_paths(a, b, i + 1, j, acc));
    }
    if j + 1 < b.len() {
        best = best.min(walk_all_paths(a, b, i, j + 1, acc));
    }
    if i + 1 < a.len() && j + 1 < b.len() {
        best = best.min(walk_all_paths(a, b, i + 1, j + 1, acc));
    }
    best
}

fn scoring_and_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut score_mismatch = 0;
    for _ in 0..1000 {
        let termination = rng.random_range(0..=200);
        let start = rng.random_range(0..=termination);
        let gamma: f64 = rng.random_range(0.0..=1.0);
        let ep = Episode {
            id: 0,
            seed: 0,
            initial_state: Vec::new(),
            desired: DesiredTrajectory(Vec::new()),
            states: Vec::new(),
            outputs: Vec::new(),
            termination,
            safe: false,
            disturbances: Vec::new(),
            diverged: false,
        };
        let mut direct = 1.0;
        for _ in 0..termination - start {
            direct *= gamma;
        }
        if unsafety_score(&ep, start, gamma).unwrap() != direct || discount(gamma, termination - start) != direct {
            score_mismatch += 1;
        }
    }

    let mut dtw_mismatch = 0;
    let mut pairs = 0;
    let seq = |rng: &mut ChaCha8Rng, len: usize, dim: usize| -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    };
    let mut cases: Vec<(usize, usize, usize)> = vec![(12, 12, 1), (12, 12, 2)];
    for _ in 0..300 {
        cases.push((rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=3)));
    }
    for (n, m, dim) in cases {
        let a = seq(&mut rng, n, dim);
        let b = seq(&mut rng, m, dim);
        pairs += 1;
        if dtw(&a, &b).unwrap() != walk_all_paths(&a, &b, 0, 0, 0.0) {
            dtw_mismatch += 1;
        }
    }

    let errors: Vec<Vec<Vec<f64>>> = (0..40).map(|i| seq(&mut rng, 3 + i % 7, 2)).collect();
    let lambdas: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..=1.0)).collect();
    let m: DistanceMatrix = distance_matrix_from(&errors, &lambdas, 0.01).unwrap();
    let mut asymmetric = 0;
    let mut nonzero_diagonal = 0;
    for i in 0..m.len() {
        nonzero_diagonal += (m.get(i, i) != 0.0) as usize;
        for j in 0..m.len() {
            asymmetric += (m.get(i, j) != m.get(j, i)) as usize;
        }
    }
    Outcome {
        pass: score_mismatch == 0 && dtw_mismatch == 0 && asymmetric == 0 && nonzero_diagonal == 0,
        detail: format!(
            "score mismatches {score_mismatch}/1000; DTW mismatches {dtw_mismatch}/{pairs} pairs up to 12x12; asymmetric entries {asymmetric}, non-zero diagonal {nonzero_diagonal}"
        ),
    }
}

fn embedding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = MappingNetwork::random(&[6, 16, 16, 2], Activation::Tanh, 2);
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<Vec<f64>> = (0..8).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let (_, grad) = net.loss_and_gradient(&xs, &ys).unwrap();
    let base = net.flat_params();
    let mut probe = net.clone();
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] += h;
        probe.set_flat_params(&p);
        let up = probe.loss_and_gradient(&xs, &ys).unwrap().0;
        p[k] -= 2.0 * h;
        probe.set_flat_params(&p);
        let down = probe.loss_and_gradient(&xs, &ys).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        worst_rel = worst_rel.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4));
    }

    let per = 60;
    let n = 2 * per;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let same = (i < per) == (j < per);
                values[i * n + j] = if same { rng.random_range(0.05..0.3) } else { rng.random_range(0.8..1.0) };
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            values[i * n + j] = values[j * n + i];
        }
    }
    let dist = DistanceMatrix::from_values(n, values, 1.0).unwrap();
    let cfg = EmbeddingConfig {
        perplexity: 20.0,
        seed: 1,
        ..EmbeddingConfig::default()
    };
    let emb = tsne_embed(&dist, &cfg).unwrap();
    let mut agree = 0;
    for i in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| {
                    let (p, q) = (emb.point(i), emb.point(j));
                    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
                };
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        agree += ((nearest < per) == (i < per)) as usize;
    }
    let nn = agree as f64 / n as f64;
    let (p, _) = joint_probabilities(&dist, cfg.perplexity).unwrap();
    let p_sum: f64 = p.iter().sum();
    let pass = worst_rel <= 1e-4 && nn >= 0.95 && emb.kl <= emb.kl_at_exaggeration_end && (p_sum - 1.0).abs() <= 1e-9;
    Outcome {
        pass,
        detail: format!(
            "gradient relative error {worst_rel:.1e}; two-cluster 1-NN agreement {nn:.3}; KL {:.4} vs {:.4} at end of exaggeration; P sums to 1 {:+.1e}",
            emb.kl,
            emb.kl_at_exaggeration_end,
            p_sum - 1.0
        ),
    }
}

fn regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hyper = GpHyper {
        length_scale: 0.7,
        signal_variance: 0.25,
        noise_variance: 1e-8,
    };
    let inputs: Vec<[f64; 2]> = (0..40)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let targets: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..=1.0)).collect();
    let gp = DiscrepancyGp::fit(&inputs, &targets, hyper).unwrap();
    let interp = inputs
        .iter()
        .zip(&targets)
        .map(|(x, t)| (gp.raw_mean(x) - t).abs())
        .fold(0.0, f64::max);
    let mut above_prior = 0;
    for _ in 0..1000 {
        let q = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        above_prior += (gp.variance(&q) > hyper.signal_variance) as usize;
    }
    let cfg = AdaptConfig::default();
    let mut branch_mismatch = 0;
    for _ in 0..1000 {
        let mean: f64 = rng.random_range(0.0..=1.0);
        let std: f64 = rng.random_range(0.0..0.6);
        let mu = reweighted_uncertainty(Prediction { mean, std }, &cfg);
        let expected = if std > 0.3 { 0.3 } else { 0.1 + 0.9 * mean };
        branch_mismatch += (mu != expected) as usize;
    }
    Outcome {
        pass: interp <= 1e-3 && above_prior == 0 && branch_mismatch == 0,
        detail: format!(
            "max interpolation error {interp:.1e} at noise 1e-8; variance above prior at {above_prior}/1000 queries; uncertainty branch mismatches {branch_mismatch}/1000"
        ),
    }
}

fn trigger() -> Outcome {
    let (bundle, _) = cart_pole_model();
    let real = real_system(bundle);
    let asr = assessor(bundle);
    let threshold = 0.6;
    let episodes = rollout_batch(&real, EPISODE_STEPS, 5000, 6000).unwrap();
    let mut leads = Vec::new();
    // subset whose failure the disturbances caused: the undisturbed replay stays safe
    let mut caused = Vec::new();
    let mut undisturbed = Vec::new();
    for ep in &episodes {
        if !ep.disturbances.is_empty() && !ep.safe && (leads.len() < 100 || caused.len() < 100) {
            let lead = lead_time(&asr.trace(ep).unwrap(), ep.termination, threshold);
            if leads.len() < 100 {
                leads.push(lead);
            }
            if caused.len() < 100 && nominal_replay(ep, &real).unwrap().safe {
                caused.push(lead);
            }
        }
        if ep.disturbances.is_empty() && undisturbed.len() < 100 {
            undisturbed.push((ep.safe, first_trigger(&asr.trace(ep).unwrap(), threshold).is_some()));
        }
    }
    let lt = LeadTimes::from_leads(&leads);
    let lt_caused = LeadTimes::from_leads(&caused);
    let warned = lt.warned as f64 / leads.len().max(1) as f64;
    let median = lt.median.unwrap_or(0.0);
    let safe_runs = undisturbed.iter().filter(|(safe, _)| *safe).count();
    let false_triggers = undisturbed.iter().filter(|(safe, fired)| *safe && *fired).count();
    let any_triggers = undisturbed.iter().filter(|(_, fired)| *fired).count();
    // a trigger in an episode that stays safe is false; rate over the safe ones
    let false_rate = false_triggers as f64 / safe_runs.max(1) as f64;
    Outcome {
        pass: leads.len() == 100 && undisturbed.len() == 100 && warned >= 0.8 && median >= 3.0 && false_rate <= 0.1,
        detail: format!(
            "warned before violation in {}/{} disturbed unsafe episodes (need >= 80%), median lead {median} steps (need >= 3); \
             false triggers in {false_triggers}/{safe_runs} safe episodes among {} undisturbed, rate {false_rate:.2} (need <= 0.10); \
             for reference: {any_triggers}/{} undisturbed episodes trigger at all, disturbance-caused failures warned {}/{} with median lead {}",
            lt.warned,
            leads.len(),
            undisturbed.len(),
            undisturbed.len(),
            lt_caused.warned,
            caused.len(),
            lt_caused.median.unwrap_or(0.0)
        ),
    }
}

fn run_cli(args: &[&str], threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_saveri"))
        .args(args)
        .env("SAVERI_THREADS", threads)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let mut ok = true;
    for (run, threads) in [("a", "1"), ("b", "3")] {
        ok &= run_cli(
            &["gen", "--system", "cart-pole", "--episodes", "96", "--seed", "11", "--out", &p(&format!("data_{run}.json"))],
            threads,
        );
        ok &= run_cli(&["init", "--data", &p(&format!("data_{run}.json")), "--out", &p(&format!("model_{run}"))], threads);
        ok &= run_cli(
            &["adapt", "--model", &p(&format!("model_{run}")), "--system", "cart-pole", "--episodes", "40", "--seed", "12"],
            threads,
        );
    }
    if !ok {
        return Outcome {
            pass: false,
            detail: "a command failed".into(),
        };
    }
    let same_data = std::fs::read(p("data_a.json")).unwrap() == std::fs::read(p("data_b.json")).unwrap();
    let a = dir_bytes(&tmp.path().join("model_a"));
    let b = dir_bytes(&tmp.path().join("model_b"));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_files = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0);
    Outcome {
        pass: same_data && same_files && differing.is_empty(),
        detail: format!(
            "gen output identical: {same_data}; {} bundle files after init and adapt, differing: {:?} (runs used 1 and 3 threads)",
            a.len(),
            differing
        ),
    }
}
