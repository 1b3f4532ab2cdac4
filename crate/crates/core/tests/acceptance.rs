//! Acceptance checks, one line per criterion.
//!
//! Criteria 7 to 10 run the full synthetic benchmark (10 classes, 16 dims,
//! 500 per class, 5 tasks, buffer 500, batch 32, 10 epochs, seeds 0..4) and
//! take a few minutes on one core.

use std::path::Path;
use std::process::{Command, ExitCode};

use aer::buffer::{abs_select, insertion_candidates, lass_scores, BufferEntry, MemoryBuffer};
use aer::config::ExperimentConfig;
use aer::consolidation::fit_gmm_em;
use aer::engine::Method;
use aer::eval::{faa, final_forgetting, median, AccuracyMatrix, EpochMode};
use aer::runner::{ablation_in_memory, run_experiment, Experiment, ABLATION_ROWS};
use aer::seed;
use aer::tensor::{consistency_mse, cross_entropy, soft_cross_entropy, Matrix, MlpConfig, ModelState};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn entry(id: usize, task: usize, loss: f64) -> BufferEntry {
    BufferEntry {
        features: vec![id as f64],
        label: task,
        truth: task,
        task,
        loss,
        tick: 0,
    }
}

// Loss of a random MLP under one of three objectives, with the analytic
// parameter gradient.
fn objective(model: &ModelState, x: &Matrix, labels: &[usize], targets: &Matrix, kind: usize) -> (f64, Vec<f64>) {
    let acts = model.forward_cached(x).unwrap();
    let out = match kind {
        0 => cross_entropy(acts.logits(), labels, None, 1.0),
        1 => soft_cross_entropy(acts.logits(), targets, None, 1.0),
        _ => consistency_mse(acts.logits(), targets, None, 1.0),
    }
    .unwrap();
    let grads = model.backward(&acts, &out.grad);
    let flat = grads
        .layers
        .iter()
        .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
        .collect();
    (out.mean(), flat)
}

fn param_mut(model: &mut ModelState, mut k: usize) -> &mut f64 {
    for l in model.layers_mut() {
        let w = l.weights.as_slice().len();
        if k < w {
            return &mut l.weights.as_mut_slice()[k];
        }
        k -= w;
        if k < l.bias.len() {
            return &mut l.bias[k];
        }
        k -= l.bias.len();
    }
    panic!("parameter index out of range")
}

fn gradient_oracle() -> Outcome {
    let h = 1e-5;
    let mut rng = seed::rng(11, &[]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let instances = 120;
    for i in 0..instances {
        let dims = rng.random_range(2..5);
        let classes = rng.random_range(2..5);
        let hidden = vec![rng.random_range(2..6); rng.random_range(0..3)];
        let mut model = ModelState::new(&MlpConfig::new(dims, hidden, classes), i as u64, 0.1, 0.0).unwrap();
        // zero biases put dead rows exactly on the ReLU kink
        for l in model.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let rows = rng.random_range(1..5);
        let x = Matrix::from_vec(rows, dims, (0..rows * dims).map(|_| rng.random_range(-2.0..2.0)).collect());
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let mut t: Vec<f64> = (0..rows * classes).map(|_| rng.random::<f64>()).collect();
        for r in t.chunks_mut(classes) {
            let z: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= z);
        }
        let targets = Matrix::from_vec(rows, classes, t);
        let kind = i % 3;
        let (_, analytic) = objective(&model, &x, &labels, &targets, kind);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = *param_mut(&mut model, k);
            *param_mut(&mut model, k) = orig + h;
            let plus = objective(&model, &x, &labels, &targets, kind).0;
            *param_mut(&mut model, k) = orig - h;
            let minus = objective(&model, &x, &labels, &targets, kind).0;
            *param_mut(&mut model, k) = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!("{instances} instances, {checked} parameters, max relative error {worst:.2e} (< 1e-4)"),
    )
}

fn base_config(method: Method, rate: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.diversity = false;
    cfg.noise.rate = rate;
    cfg.train.method = method;
    cfg
}

fn neutrality(aer: &Experiment) -> Outcome {
    let mut forgetting = 0;
    let mut learning = 0;
    let mut bad = 0;
    for run in &aer.runs {
        for line in &run.record.trace {
            match line.mode {
                EpochMode::Forgetting => {
                    forgetting += 1;
                    bad += usize::from(line.params_restored != Some(true));
                }
                EpochMode::Learning => {
                    learning += 1;
                    bad += usize::from(line.buffer_frozen != Some(true));
                }
            }
        }
    }
    outcome(
        bad == 0 && forgetting > 0 && learning > 0,
        format!("{forgetting} forgetting epochs restored, {learning} learning epochs frozen, {bad} violations"),
    )
}

fn reservoir_uniformity() -> Outcome {
    let (m, n, trials) = (10, 100, 10_000);
    let mut counts = vec![0u64; n];
    let mut rng = seed::rng(3, &[]);
    for _ in 0..trials {
        let mut b = MemoryBuffer::new(m).unwrap();
        for id in 0..n {
            b.reservoir_update(entry(id, 0, 0.0), &mut rng);
        }
        for e in b.entries() {
            counts[e.features[0] as usize] += 1;
        }
    }
    let expected = (trials * m) as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.99 quantile of chi-square with 99 degrees of freedom
    let critical = 134.6416;
    outcome(chi2 < critical, format!("chi2 = {chi2:.2} over {n} items (critical {critical} at p = 0.01)"))
}

fn sampler_contracts() -> Outcome {
    let mut rng = seed::rng(4, &[]);
    let mut b = MemoryBuffer::new(500).unwrap();
    for i in 0..500 {
        b.push(entry(i, usize::from(i >= 250), rng.random_range(0.0..3.0)));
    }
    let draws = 10_000;
    let current = (0..draws)
        .filter(|_| b.entries()[abs_select(&b, 1, &mut rng).unwrap()].task == 1)
        .count();
    let freq = current as f64 / draws as f64;
    let abs_ok = (freq - 0.5).abs() <= 0.02;

    let mut two = MemoryBuffer::new(2).unwrap();
    two.push(entry(0, 0, 1.0));
    two.push(entry(1, 0, 3.0));
    let p = lass_scores(&two);
    let lass_ok = (p[0] - 0.25).abs() <= 1e-9 && (p[1] - 0.75).abs() <= 1e-9;

    let losses: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
    let k = insertion_candidates(&losses, 75.0).len();
    outcome(
        abs_ok && lass_ok && k == 8,
        format!(
            "ABS current-partition frequency {freq:.4} (target 0.5 +/- 0.02), LASS [{:.12}, {:.12}], {k} candidates of 32 at alpha 75",
            p[0], p[1]
        ),
    )
}

fn gmm_recovery() -> Outcome {
    let mut rng = seed::rng(5, &[]);
    let low = Normal::<f64>::new(0.1, 0.05).unwrap();
    let high = Normal::<f64>::new(2.0, 0.2).unwrap();
    // losses are non-negative, so the low component is clipped at zero
    let mut losses: Vec<f64> = (0..500).map(|_| low.sample(&mut rng).max(0.0)).collect();
    losses.extend((0..500).map(|_| high.sample(&mut rng).max(0.0)));
    let fit = fit_gmm_em(&losses, 200, 1e-12).unwrap();
    let means_ok = (fit.means[0] - 0.1).abs() <= 0.1 && (fit.means[1] - 2.0).abs() <= 0.1;
    let worst_drop = fit
        .log_likelihood
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0f64, f64::max);
    outcome(
        means_ok && worst_drop <= 1e-9,
        format!(
            "means [{:.4}, {:.4}] (targets 0.1, 2.0 within 0.1), largest log-likelihood decrease {worst_drop:.1e}",
            fit.means[0], fit.means[1]
        ),
    )
}

fn metric_oracles(joint: &Experiment) -> Outcome {
    let a2 = 0.4;
    let m = AccuracyMatrix::from_columns(&[vec![0.9, 0.8, 0.5], vec![0.7, 0.6], vec![a2]]).unwrap();
    let ff = final_forgetting(&m).unwrap();
    let acc = faa(&m).unwrap();
    let hand_ok = ff == 0.25 && acc == (0.5 + 0.6 + a2) / 3.0;
    let joint_ff: Vec<f64> = joint.runs.iter().map(|r| r.record.final_forgetting().unwrap()).collect();
    let joint_ok = joint_ff.iter().all(|&f| f == 0.0);
    outcome(
        hand_ok && joint_ok,
        format!("hand matrix FF {ff} FAA {acc}, joint FF per seed {joint_ff:?}"),
    )
}

fn mean_gap(exp: &Experiment, seed_index: usize, epochs: &[usize]) -> Option<f64> {
    let trace = &exp.runs[seed_index].record.trace;
    let gaps: Vec<f64> = epochs
        .iter()
        .filter_map(|&g| trace.iter().find(|l| l.global_epoch == g))
        .filter_map(|l| Some(l.noisy_loss? - l.clean_loss?))
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

fn loss_separation(aer: &Experiment, ace: &Experiment) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in 0..aer.runs.len() {
        let epochs: Vec<usize> = aer.runs[s]
            .record
            .trace
            .iter()
            .filter(|l| l.mode == EpochMode::Forgetting)
            .map(|l| l.global_epoch)
            .collect();
        let (a, c) = (mean_gap(aer, s, &epochs), mean_gap(ace, s, &epochs));
        if let (Some(a), Some(c)) = (a, c) {
            wins += usize::from(a > c);
            pairs.push(format!("{a:.3}/{c:.3}"));
        }
    }
    outcome(
        wins >= 4,
        format!("AER gap beats ER-ACE in {wins}/{} seeds (need 4), AER/ER-ACE gaps {}", aer.runs.len(), pairs.join(" ")),
    )
}

fn median_purity(exp: &Experiment) -> f64 {
    median(&exp.runs.iter().map(|r| r.outcome.purity).collect::<Vec<_>>()).unwrap()
}

fn purity(abs: &Experiment, er: &Experiment, lass: &Experiment, rate: f64) -> Outcome {
    let (a, r, l) = (median_purity(abs), median_purity(er), median_purity(lass));
    let reservoir_ok = (r - (1.0 - rate)).abs() <= 0.05;
    outcome(
        a > r && a > l && reservoir_ok,
        format!("median purity AER+ABS {a:.3}, reservoir ER {r:.3} (1-r = {:.2} +/- 0.05), LASS {l:.3}", 1.0 - rate),
    )
}

fn ablation_direction() -> Outcome {
    let rows: Vec<_> = [0, 2, 5, 7].iter().map(|&i| ABLATION_ROWS[i]).collect();
    let results = ablation_in_memory(&base_config(Method::AerAbs, 0.6), &rows).unwrap();
    let med: Vec<f64> = results.iter().map(|r| r.experiment.median_faa()).collect();
    let (er, alpha, full, cons) = (med[0], med[1], med[2], med[3]);
    outcome(
        er <= alpha && alpha <= full && cons >= full,
        format!("median FAA ER {er:.3}, ER+ACE+alpha {alpha:.3}, full {full:.3}, full+consolidation {cons:.3}"),
    )
}

fn alpha_direction() -> Outcome {
    let faa_at = |alpha: f64| {
        let mut cfg = base_config(Method::AerAbs, 0.6);
        cfg.train.alpha = alpha;
        run_experiment(&cfg, None).unwrap().median_faa()
    };
    let (a0, a90) = (faa_at(0.0), faa_at(90.0));
    outcome(a90 >= a0, format!("median FAA alpha=90 {a90:.3}, alpha=0 {a0:.3}"))
}

fn cli_summary(config: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_aer"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn aer");
    assert!(status.success(), "aer run failed: {status}");
    std::fs::read(out.join("summary.csv")).expect("summary.csv")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        "[run]\nname = \"det\"\nseeds = [0, 1]\n\n[data]\nclasses = 4\ndims = 6\nper_class = 60\ntasks = 2\n\n\
         [train]\nmethod = \"aer_abs\"\nbuffer_size = 40\nepochs = 4\nhidden = [16]\nbatch_size = 16\n",
    )
    .unwrap();
    let a = cli_summary(&config, &dir.path().join("a"));
    let b = cli_summary(&config, &dir.path().join("b"));
    outcome(a == b && !a.is_empty(), format!("two runs, summary.csv {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 gradient oracle", gradient_oracle());

    let rate = 0.4;
    let aer = run_experiment(&base_config(Method::AerAbs, rate), None).unwrap();
    report("2 checkpoint neutrality", neutrality(&aer));
    report("3 reservoir uniformity", reservoir_uniformity());
    report("4 sampler contracts", sampler_contracts());
    report("5 GMM-EM recovery", gmm_recovery());

    let joint = run_experiment(&base_config(Method::Joint, rate), None).unwrap();
    report("6 FF/FAA oracles", metric_oracles(&joint));

    let ace = run_experiment(&base_config(Method::ErAce, rate), None).unwrap();
    report("7 loss separation", loss_separation(&aer, &ace));

    let er = run_experiment(&base_config(Method::Er, rate), None).unwrap();
    let lass = run_experiment(&base_config(Method::AerLass, rate), None).unwrap();
    report("8 buffer purity", purity(&aer, &er, &lass, rate));

    report("9 ablation direction", ablation_direction());
    report("10 alpha-sweep direction", alpha_direction());
    report("11 determinism", determinism());

    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
