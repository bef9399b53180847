//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Thresholds and tolerances are pinned here and in the
//! default experiment configs, not deferred to later calibration.
//!
//! Run with `cargo test -p neuroctl --test acceptance -- --nocapture`.

use neuroctl_cli::config::ExperimentConfig;
use neuroctl_cli::experiments;
use std::path::PathBuf;
use std::time::Instant;

fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ── A1: decoder dynamics equal an independent scalar reference ─────

/// Plain-f64 re-implementation of the membrane update, no shared code with
/// the library path.
fn scalar_reference(
    beta: f64,
    theta: f64,
    currents: &[Vec<f64>],
    immediate: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = currents[0].len();
    let mut u = vec![0.0f64; n];
    let mut s_prev = vec![0.0f64; n];
    let mut spikes = Vec::new();
    for row in currents {
        let mut s_now = vec![0.0f64; n];
        for (i, &drive) in row.iter().enumerate() {
            if immediate {
                let pre = beta * u[i] + drive;
                s_now[i] = if pre >= theta { 1.0 } else { 0.0 };
                u[i] = pre - s_now[i] * theta;
            } else {
                u[i] = beta * u[i] + drive - s_prev[i] * theta;
                s_now[i] = if u[i] >= theta { 1.0 } else { 0.0 };
            }
        }
        s_prev = s_now.clone();
        spikes.push(s_now);
    }
    (spikes, u)
}

#[test]
fn a1_lif_matches_scalar_oracle_exactly() {
    use neuroctl_core::lif::{lif_window, reset_state, LifConfig, ResetMode};
    use neuroctl_core::rng::Rng;
    use neuroctl_core::tensor::Tensor;

    let started = Instant::now();
    let mut rng = Rng::seed_from(0xA1);
    let sequences = 10_000;
    for case in 0..sequences {
        let beta = rng.uniform_in(0.05, 0.99);
        let theta = rng.uniform_in(0.2, 2.5);
        let steps = 1 + rng.index(12);
        let n = 1 + rng.index(4);
        let immediate = rng.chance(0.5);
        let currents: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| rng.uniform_in(-1.0, 2.0)).collect())
            .collect();
        let (ref_spikes, ref_u) = scalar_reference(beta, theta, &currents, immediate);

        let cfg = LifConfig {
            beta,
            theta,
            window: steps,
            reset_mode: if immediate {
                ResetMode::ImmediateSoft
            } else {
                ResetMode::DelayedSoft
            },
            surrogate_scale: 1.0,
        };
        let flat: Vec<f64> = currents.iter().flatten().copied().collect();
        let mat = Tensor::from_vec(&[steps, n], flat).unwrap();
        let (spk, end) = lif_window(&reset_state::<f64>(n).unwrap(), &mat, &cfg).unwrap();
        for (tau, row) in ref_spikes.iter().enumerate() {
            for (i, &expect) in row.iter().enumerate() {
                assert_eq!(spk.spikes.at2(tau, i), expect, "case {case}");
            }
        }
        for (i, &expect) in ref_u.iter().enumerate() {
            assert_eq!(end.u.at(i), expect, "case {case}");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("A1 PASS — {sequences} random sequences bit-identical to the scalar reference in {elapsed:.2?}");
}

// ── A2: full-stack gradient fidelity ────────────────────────────────

#[test]
fn a2_full_stack_gradients_match_finite_differences() {
    let started = Instant::now();
    let worst = neuroctl_core::trainer::full_stack_gradient_check(0xA2, 20).unwrap();
    let elapsed = started.elapsed();
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "A2 PASS — 20 probes per module, worst relative error {worst:.3e} in {elapsed:.2?}"
    );
}

// ── A3: tremor smoothing, modulated stack vs bypass baseline ───────

#[test]
fn a3_smoothing_reductions_meet_thresholds() {
    let started = Instant::now();
    let cfg = ExperimentConfig::defaults_for("smoothing");
    let doc = experiments::run("smoothing", &cfg, None, &out_dir("a3")).unwrap();
    let elapsed = started.elapsed();
    let maj = doc.metrics["mean_maj_reduction_pct"].as_f64().unwrap();
    let maca = doc.metrics["mean_maca_reduction_pct"].as_f64().unwrap();
    assert!(doc.pass, "maj {maj:.1}% maca {maca:.1}%");
    assert!(maj >= 50.0 && maca >= 25.0);
    assert!(elapsed.as_secs_f64() < 900.0, "took {elapsed:?}");
    println!(
        "A3 PASS — jerk reduced {maj:.1}% (≥50%), acceleration {maca:.1}% (≥25%) over 5 seeds in {elapsed:.2?}"
    );
}

// ── A4: event-driven sparsity across phases ────────────────────────

#[test]
fn a4_static_hold_rates_stay_below_half_of_dynamic() {
    let cfg = ExperimentConfig::defaults_for("sparsity");
    let doc = experiments::run("sparsity", &cfg, None, &out_dir("a4")).unwrap();
    assert!(doc.pass, "{}", doc.metrics);
    let per_seed = doc.metrics["per_seed"].as_array().unwrap();
    assert_eq!(per_seed.len(), 5);
    for s in per_seed {
        assert!(s["pass"].as_bool().unwrap(), "{s}");
    }
    println!(
        "A4 PASS — 5/5 seeds: static-phase rate ≤ 0.5× dynamic ({})",
        per_seed
            .iter()
            .map(|s| format!(
                "{:.4}/{:.4}",
                s["rate_static"].as_f64().unwrap(),
                s["rate_dynamic"].as_f64().unwrap()
            ))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

// ── A5: temporal memory vs single-step ablation ────────────────────

#[test]
fn a5_multi_step_memory_beats_single_step_ablation() {
    let cfg = ExperimentConfig::defaults_for("multistep");
    let doc = experiments::run("multistep", &cfg, None, &out_dir("a5")).unwrap();
    let multi = doc.metrics["mean_multi_step"].as_f64().unwrap();
    let single = doc.metrics["mean_single_step"].as_f64().unwrap();
    assert!(doc.pass, "multi {multi} single {single}");
    assert!(single <= 0.60 && multi >= 0.80);
    println!(
        "A5 PASS — delayed-cue success: multi-step {multi:.2} (≥0.80), single-step {single:.2} (≤0.60) over 5 seeds"
    );
}

// ── A6: reflex latency through the fast path ───────────────────────

#[test]
fn a6_reflex_fires_in_one_tick_vs_delayed_planner() {
    let cfg = ExperimentConfig::defaults_for("reflex");
    let doc = experiments::run("reflex", &cfg, None, &out_dir("a6")).unwrap();
    let reflex = doc.metrics["reflex_latency_ticks"].as_u64().unwrap();
    let cortical = doc.metrics["cortical_latency_ticks"].as_u64().unwrap();
    assert!(doc.pass);
    assert_eq!(reflex, 1);
    assert!(cortical >= 10);
    println!(
        "A6 PASS — contact-to-retraction: {reflex} tick via reflex path, {cortical} ticks via the 200 ms planner path"
    );
}

// ── A7: rhythm maintained under a frozen intent stream ──────────────

#[test]
fn a7_shake_keeps_three_cycles_with_frozen_intent() {
    let cfg = ExperimentConfig::defaults_for("rhythm");
    let doc = experiments::run("rhythm", &cfg, None, &out_dir("a7")).unwrap();
    assert!(doc.pass, "{}", doc.metrics);
    let per_seed = doc.metrics["per_seed"].as_array().unwrap();
    for s in per_seed {
        assert_eq!(s["cycles"].as_u64().unwrap(), 3, "{s}");
        let p = s["period"].as_f64().unwrap();
        assert!((p - 16.0).abs() <= 1.0, "period {p}");
    }
    println!(
        "A7 PASS — 5/5 seeds: exactly 3 cycles, periods {} (16 ± 1 tick), intent frozen mid-episode",
        per_seed
            .iter()
            .map(|s| format!("{:.1}", s["period"].as_f64().unwrap()))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

// ── A8: processor calibration point ─────────────────────────────────

#[test]
fn a8_array_calibration_reproduces_latency_and_energy() {
    let cfg = ExperimentConfig::defaults_for("systolic");
    let doc = experiments::run("systolic", &cfg, None, &out_dir("a8")).unwrap();
    let latency = doc.metrics["calibration"]["latency_s"].as_f64().unwrap();
    let energy = doc.metrics["calibration"]["energy_j"].as_f64().unwrap();
    assert!(doc.pass);
    assert!((latency - 2.19e-3).abs() / 2.19e-3 <= 5e-3);
    assert!((energy - 0.87e-3).abs() / 0.87e-3 <= 5e-3);
    println!(
        "A8 PASS — calibrated array reports {:.4} ms / {:.4} mJ (targets 2.19 ms / 0.87 mJ, ±0.5%)",
        latency * 1e3,
        energy * 1e3
    );
}

// ── A9: attentional selectivity of the trained bottleneck ──────────

#[test]
fn a9_trained_bottleneck_attends_the_instructed_token() {
    let cfg = ExperimentConfig::defaults_for("attention");
    let doc = experiments::run("attention", &cfg, None, &out_dir("a9")).unwrap();
    let frac = doc.metrics["fraction_over_mass_bar"].as_f64().unwrap();
    let mass = doc.metrics["mean_instructed_mass"].as_f64().unwrap();
    assert!(doc.pass);
    assert!(frac >= 0.9);
    println!(
        "A9 PASS — {:.0}% of held-out scenes put >60% attention mass on the instructed token (mean mass {mass:.3})",
        frac * 100.0
    );
}

// ── A10: byte-identical reruns ──────────────────────────────────────

#[test]
fn a10_identical_seeds_produce_identical_bytes() {
    use neuroctl_cli::commands::run_train;

    // Fast checkpointed training, twice.
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.epochs = 4;
    cfg.trainer.seed = 7;
    cfg.demos.n = 2;
    cfg.stack.n_hidden = 16;
    cfg.stack.gru_hidden = 12;
    cfg.stack.history = 4;
    let d1 = out_dir("a10_train_1");
    let d2 = out_dir("a10_train_2");
    run_train(&cfg, &d1).unwrap();
    run_train(&cfg, &d2).unwrap();
    for file in ["checkpoint.nckp", "loss.csv", "metrics.json"] {
        let b1 = std::fs::read(d1.join(file)).unwrap();
        let b2 = std::fs::read(d2.join(file)).unwrap();
        assert_eq!(b1, b2, "{file} differs between identical runs");
    }

    // A deterministic experiment with CSV output, twice.
    let rcfg = ExperimentConfig::defaults_for("reflex");
    let e1 = out_dir("a10_reflex_1");
    let e2 = out_dir("a10_reflex_2");
    experiments::run("reflex", &rcfg, None, &e1).unwrap();
    experiments::run("reflex", &rcfg, None, &e2).unwrap();
    for file in ["wrench_log.csv", "metrics.json"] {
        let b1 = std::fs::read(e1.join(file)).unwrap();
        let b2 = std::fs::read(e2.join(file)).unwrap();
        assert_eq!(b1, b2, "{file} differs between identical runs");
    }
    println!("A10 PASS — checkpoint, loss curve, metrics, and CSV logs byte-identical across reruns");
}
