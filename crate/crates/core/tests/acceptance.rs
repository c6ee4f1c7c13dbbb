//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion names as arguments to run a subset.

use mspn::baseline::{average_probs, PatchPrediction};
use mspn::data::{load_dataset, save_dataset, synth_generate, Sample, Split, SynthSpec, SIW10_CLASSES, SIW10_TEST_COUNTS, SIW10_TRAIN_COUNTS};
use mspn::experiment::{run_baseline, run_variant, ExperimentConfig};
use mspn::gradcheck::{run_gradcheck, TOLERANCE};
use mspn::graph::{read_checkpoint, stage_heights, write_checkpoint};
use mspn::layers::SspLayer;
use mspn::optim::{schedule_update, train_with_callback, ScheduleAction, ScheduleState, TrainConfig};
use mspn::{Error, FeatureMapStack, MspnConfig, NetworkGraph, PatchNetConfig, PoolMode, Variant, VariantOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Conv and fc sizes used for the training criteria on a single CPU core.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        base: MspnConfig {
            channels: [16, 32, 48, 64],
            fc_widths: [128, 128],
            ..MspnConfig::default()
        },
        variant_options: VariantOptions {
            starred_fc2: 64,
            ..VariantOptions::default()
        },
        train: TrainConfig {
            batch_size: 8,
            max_epochs: 40,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

const DESK_SEEDS: [u64; 3] = [11, 12, 13];

fn desk_corpus() -> mspn::data::SynthCorpus {
    synth_generate(&SynthSpec {
        n_classes: 10,
        train_per_class: 200,
        test_per_class: 50,
        shared_fraction: 0.3,
        seed: 2024,
        ..SynthSpec::default()
    })
    .expect("valid corpus settings")
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let report = match run_gradcheck(20, 1) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck failed to run: {e}")),
    };
    let elapsed = t.elapsed();
    let parts: Vec<String> = report
        .entries
        .iter()
        .map(|e| match e.skipped {
            0 => format!("{}={:.1e}", e.kind, e.max_rel_error),
            k => format!("{}={:.1e} ({k} kinked probes resampled)", e.kind, e.max_rel_error),
        })
        .collect();
    let shapes_ok = report.entries.iter().filter(|e| !e.kind.starts_with("graph")).all(|e| e.shapes >= 20);
    outcome(
        report.passed() && shapes_ok && elapsed < Duration::from_secs(120),
        format!("max rel err {:.2e} < {TOLERANCE:e} [{}] in {:.1}s", report.max_rel_error(), parts.join(" "), elapsed.as_secs_f64()),
    )
}

fn shape_oracle() -> Outcome {
    let cfg = MspnConfig::default();
    if cfg.concat_dim() != 3456 || stage_heights(32) != Some([15, 7, 3, 1]) {
        return outcome(false, format!("concat dim {} heights {:?}", cfg.concat_dim(), stage_heights(32)));
    }
    let net = match NetworkGraph::<f32>::mspn(cfg, 0) {
        Ok(n) => n,
        Err(e) => return outcome(false, e.to_string()),
    };
    for w in [26, 30, 32, 50, 100, 200] {
        let x = FeatureMapStack::filled(1, 32, w, 0.5f32).unwrap();
        let pass = match net.forward(&x) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("width {w}: {e}")),
        };
        let heights: Vec<usize> = ["relu1", "relu2", "relu3", "relu4"]
            .iter()
            .map(|n| pass.value(n).and_then(|v| v.as_maps()).map_or(0, |m| m.height()))
            .collect();
        let concat = pass.value("concat").and_then(|v| v.as_flat()).map_or(0, |v| v.len());
        if heights != [30, 15, 7, 1] {
            return outcome(false, format!("width {w}: conv heights {heights:?}"));
        }
        let pooled: Vec<usize> = ["pool1", "pool2", "pool3", "relu4"]
            .iter()
            .map(|n| pass.value(n).and_then(|v| v.as_maps()).map_or(0, |m| m.height()))
            .collect();
        if pooled != [15, 7, 3, 1] || concat != 3456 {
            return outcome(false, format!("width {w}: stage heights {pooled:?}, concat {concat}"));
        }
    }
    outcome(true, "heights (15, 7, 3, 1) and descriptor 3456 for widths 26..200")
}

fn ssp_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (max, avg) = (SspLayer::new(PoolMode::Max), SspLayer::new(PoolMode::Average));
    let mut worst_avg = 0.0f64;
    for case in 0..1000 {
        let (n, h, w) = (rng.gen_range(1..9), rng.gen_range(1..8), rng.gen_range(1..64));
        let data: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = FeatureMapStack::from_vec(n, h, w, data).unwrap();
        let mut perm: Vec<usize> = (0..w).collect();
        perm.shuffle(&mut rng);
        let y = x.permute_columns(&perm).unwrap();
        let (a, b) = (max.forward(&x).0, max.forward(&y).0);
        if a != b {
            return outcome(false, format!("case {case}: max pooling changed under permutation"));
        }
        if a.len() != n * h || max.output_len(n, h) != n * h {
            return outcome(false, format!("case {case}: length {} != {}", a.len(), n * h));
        }
        let (a, b) = (avg.forward(&x).0, avg.forward(&y).0);
        if a.len() != n * h {
            return outcome(false, format!("case {case}: average length {}", a.len()));
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            worst_avg = worst_avg.max((p - q).abs() / p.abs().max(q.abs()).max(f64::MIN_POSITIVE));
        }
    }
    outcome(worst_avg <= 1e-9, format!("1000 stacks: max exact, average rel err {worst_avg:.1e}"))
}

fn schedule_oracle() -> Outcome {
    let cfg = TrainConfig::default();
    let mut state = ScheduleState::new(&cfg);
    let mut trace = vec![state.lr()];
    let mut decays = 0;
    let mut terminated = false;
    for _ in 0..1000 {
        let (next, action) = schedule_update(state, 0.5);
        state = next;
        match action {
            ScheduleAction::Continue => {}
            ScheduleAction::Decayed => {
                decays += 1;
                trace.push(state.lr());
            }
            ScheduleAction::Terminate => {
                decays += 1;
                terminated = true;
                break;
            }
        }
    }
    let pass = trace == [1e-2, 1e-3, 1e-4, 1e-5] && decays == 4 && terminated;
    let shown: Vec<String> = trace.iter().map(|v| format!("{v:e}")).collect();
    outcome(pass, format!("lr trace {} then terminate after {decays} decays", shown.join(" -> ")))
}

fn averaging_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let (y, class) = average_probs(&PatchPrediction { rows: rows.clone() }).unwrap();
        // column-wise sum of pre-divided terms
        let brute: Vec<f64> = (0..10).map(|k| rows.iter().map(|r| r[k] / n as f64).sum()).collect();
        for (a, b) in y.iter().zip(&brute) {
            worst = worst.max((a - b).abs());
        }
        let best = (0..10).fold(0, |b, k| if brute[k] > brute[b] { k } else { b });
        if class != best && (brute[class] - brute[best]).abs() > 1e-12 {
            return outcome(false, format!("argmax {class} vs brute force {best}"));
        }
    }
    outcome(worst <= 1e-12, format!("100 cases, max abs diff {worst:.1e}"))
}

fn overfit_sanity() -> Outcome {
    let t = Instant::now();
    let corpus = synth_generate(&SynthSpec {
        train_per_class: 2,
        test_per_class: 1,
        seed: 99,
        ..SynthSpec::default()
    })
    .unwrap();
    let data: Vec<(FeatureMapStack<f32>, usize)> = corpus.train.iter().map(Sample::to_input).collect();
    let cfg = desk_config();
    let mut net = NetworkGraph::<f32>::mspn(cfg.base.clone(), 7).unwrap();
    // no schedule: patience equals the epoch cap
    let train = TrainConfig {
        batch_size: 4,
        max_epochs: 200,
        plateau_patience: 200,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut first_below = None;
    let res = train_with_callback(&mut net, &data, &data, &train, |r| {
        if r.train_loss < 0.01 && first_below.is_none() {
            first_below = Some(r.epoch);
        }
    });
    let elapsed = t.elapsed();
    let (_, history) = match res {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let final_loss = {
        let mut total = 0.0;
        for (x, y) in &data {
            total += net.forward(x).and_then(|p| p.loss(*y)).map_or(f64::NAN, |l| l as f64);
        }
        total / data.len() as f64
    };
    let pass = first_below.is_some() && final_loss < 0.01 && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "20 samples: loss < 0.01 first at epoch {:?}, after {} epochs {final_loss:.2e}, {:.1}s",
            first_below,
            history.epochs.len(),
            elapsed.as_secs_f64()
        ),
    )
}

struct DeskResults {
    mspn: Vec<f64>,
    singles: Vec<(Variant, Vec<f64>)>,
    baseline: Vec<f64>,
    /// MSPN and single-tap runs only.
    elapsed: Duration,
    baseline_elapsed: Duration,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_runs() -> Result<DeskResults, Error> {
    let t = Instant::now();
    let corpus = desk_corpus();
    let cfg = desk_config();
    let mut res = DeskResults {
        mspn: vec![],
        singles: vec![(Variant::Variant1, vec![]), (Variant::Variant2, vec![]), (Variant::Variant3, vec![])],
        baseline: vec![],
        elapsed: Duration::ZERO,
        baseline_elapsed: Duration::ZERO,
    };
    let mut baseline_time = Duration::ZERO;
    for seed in DESK_SEEDS {
        let c = cfg.with_seed(seed);
        let run = |v: Variant| -> Result<f64, Error> {
            let r = run_variant(v, &corpus.train, &corpus.test, &corpus.class_names, &c, |_| {})?;
            eprintln!(
                "  seed {seed} {v}: accuracy {:.4} after {} epochs ({:.0}s)",
                r.evaluation.accuracy,
                r.history.epochs.len(),
                t.elapsed().as_secs_f64()
            );
            Ok(r.evaluation.accuracy)
        };
        res.mspn.push(run(Variant::Mspn)?);
        for (v, accs) in &mut res.singles {
            accs.push(run(*v)?);
        }
        let tb = Instant::now();
        let b = run_baseline(&corpus.train, &corpus.test, &corpus.class_names, &c, |_| {})?;
        baseline_time += tb.elapsed();
        eprintln!(
            "  seed {seed} CNN-Simple: accuracy {:.4} after {} epochs ({:.0}s)",
            b.evaluation.accuracy,
            b.history.epochs.len(),
            t.elapsed().as_secs_f64()
        );
        res.baseline.push(b.evaluation.accuracy);
    }
    res.elapsed = t.elapsed().saturating_sub(baseline_time);
    res.baseline_elapsed = baseline_time;
    Ok(res)
}

fn desk_scale(r: &DeskResults) -> Outcome {
    let m = mean(&r.mspn);
    let (best_v, best) = r
        .singles
        .iter()
        .map(|(v, a)| (*v, mean(a)))
        .fold((Variant::Variant1, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    let min_mspn = r.mspn.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = min_mspn >= 0.90 && m >= best && r.elapsed < Duration::from_secs(45 * 60);
    outcome(
        pass,
        format!(
            "MSPN accuracies {:?} (mean {m:.4}), best single-stage {best_v} mean {best:.4}, total {:.0}s",
            r.mspn,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn baseline_comparison(r: &DeskResults) -> Outcome {
    let (b, m) = (mean(&r.baseline), mean(&r.mspn));
    outcome(
        b <= m,
        format!("CNN-Simple mean {b:.4} vs MSPN mean {m:.4} ({:?}, {:.0}s)", r.baseline, r.baseline_elapsed.as_secs_f64()),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = NetworkGraph::<f32>::mspn(cfg.base.clone(), 4).unwrap();
    net.set_class_names(SIW10_CLASSES.iter().map(|s| s.to_string()).collect()).unwrap();
    let patch = NetworkGraph::<f32>::patch_net(PatchNetConfig::mirroring(&cfg.base), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, g) in [("mspn", &net), ("patch", &patch)] {
        let path = dir.path().join(format!("{name}.mspn"));
        if let Err(e) = mspn::save_checkpoint(g, &path) {
            return outcome(false, e.to_string());
        }
        let back: NetworkGraph<f32> = match mspn::load_checkpoint(&path) {
            Ok(b) => b,
            Err(e) => return outcome(false, e.to_string()),
        };
        let w = if name == "patch" { 32 } else { rng.gen_range(26..160) };
        let x = FeatureMapStack::from_vec(1, 32, w, (0..32 * w).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).unwrap();
        let (a, b) = (g.predict(&x).unwrap(), back.predict(&x).unwrap());
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) || back.class_names() != g.class_names() {
            return outcome(false, format!("{name}: outputs differ after reload"));
        }
    }
    let mut bytes = Vec::new();
    write_checkpoint(&net, &mut bytes).unwrap();
    let corruptions: Vec<(&str, Vec<u8>)> = vec![
        ("truncated", bytes[..bytes.len() - 3].to_vec()),
        ("bad magic", [b"XSPN".as_slice(), &bytes[4..]].concat()),
        ("bad version", [&bytes[..4], &[9u8][..], &bytes[5..]].concat()),
        ("trailing", [bytes.as_slice(), &[0u8]].concat()),
        ("empty", vec![]),
    ];
    for (what, b) in corruptions {
        if !matches!(read_checkpoint::<f32, _>(b.as_slice()), Err(Error::Checkpoint { .. })) {
            return outcome(false, format!("{what} checkpoint accepted"));
        }
    }
    outcome(true, "bit-identical outputs for both formats; 5 corruptions rejected")
}

fn siw10_readiness() -> Outcome {
    let t = Instant::now();
    let max_count = SIW10_TRAIN_COUNTS.iter().chain(&SIW10_TEST_COUNTS).copied().max().unwrap();
    let corpus = synth_generate(&SynthSpec {
        train_per_class: max_count,
        test_per_class: 0,
        max_len: 4,
        seed: 10,
        ..SynthSpec::default()
    })
    .unwrap();
    let names: Vec<String> = SIW10_CLASSES.iter().map(|s| s.to_string()).collect();
    let pick = |counts: &[usize], offset: usize| -> Vec<Sample> {
        (0..10)
            .flat_map(|c| {
                corpus
                    .train
                    .iter()
                    .filter(move |s| s.label == c)
                    .cycle()
                    .skip(offset)
                    .take(counts[c])
                    .enumerate()
                    .map(|(i, s)| Sample {
                        source_id: format!("{i:05}.png"),
                        ..s.clone()
                    })
            })
            .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let write = save_dataset(dir.path(), Split::Train, &pick(&SIW10_TRAIN_COUNTS, 0), &names)
        .and_then(|_| save_dataset(dir.path(), Split::Test, &pick(&SIW10_TEST_COUNTS, 7), &names));
    if let Err(e) = write {
        return outcome(false, e.to_string());
    }
    let pipeline = || -> Result<(bool, bool, usize, f64), Error> {
        let (train, mt) = load_dataset(dir.path(), Split::Train)?;
        let (test, ms) = load_dataset(dir.path(), Split::Test)?;
        let cfg = ExperimentConfig {
            base: MspnConfig {
                channels: [4, 8, 8, 8],
                fc_widths: [16, 16],
                ..MspnConfig::default()
            },
            train: TrainConfig {
                max_epochs: 1,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let run = run_variant(Variant::Mspn, &train, &test, &mt.class_names, &cfg, |_| {})?;
        let reports = tempfile::tempdir().map_err(|e| Error::Io {
            path: "tmp".into(),
            source: e,
        })?;
        run.evaluation.write_reports(reports.path())?;
        let ckpt = reports.path().join("model.mspn");
        mspn::save_checkpoint(&run.model, &ckpt)?;
        let back: NetworkGraph<f32> = mspn::load_checkpoint(&ckpt)?;
        let again = mspn::evaluate(&back, &mspn::data::to_inputs(&test))?;
        Ok((mt.siw10_verified && ms.siw10_verified, again == run.evaluation, test.len(), run.evaluation.avg_error))
    };
    match pipeline() {
        Ok((verified, same, n_test, err)) => {
            // one file fewer must clear the flag
            let victim = dir.path().join("train").join("Arabic").join("00000.png");
            let _ = std::fs::remove_file(&victim);
            let cleared = load_dataset(dir.path(), Split::Train).map(|(_, m)| !m.siw10_verified).unwrap_or(false);
            outcome(
                verified && same && cleared && n_test == 5000,
                format!(
                    "flag set={verified}, cleared on count mismatch={cleared}; train/eval/report/reload ran ({n_test} test images, avg error {err:.3}) in {:.0}s",
                    t.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failures = 0;
    let mut report = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    let cheap: [(&str, fn() -> Outcome); 8] = [
        ("gradient-correctness", gradient_correctness),
        ("shape-oracle", shape_oracle),
        ("ssp-invariance", ssp_invariance),
        ("schedule-oracle", schedule_oracle),
        ("patch-averaging-oracle", averaging_oracle),
        ("overfit-sanity", overfit_sanity),
        ("checkpoint-round-trip", checkpoint_round_trip),
        ("siw10-readiness", siw10_readiness),
    ];
    for (name, f) in cheap {
        if wanted(name) {
            report(name, f());
        }
    }
    if wanted("desk-scale") || wanted("baseline-comparison") {
        match desk_runs() {
            Ok(r) => {
                report("desk-scale-synthetic", desk_scale(&r));
                report("baseline-comparison", baseline_comparison(&r));
            }
            Err(e) => {
                report("desk-scale-synthetic", outcome(false, e.to_string()));
                report("baseline-comparison", outcome(false, e.to_string()));
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
