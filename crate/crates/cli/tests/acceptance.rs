//! Acceptance criteria, run in order in a single test so the timed
//! training criteria are not competing with other tests for the CPU.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sma_core::config::RunConfig;
use sma_core::data::{generate_synthetic, split_grouped, SequenceSample};
use sma_core::format::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor};
use sma_core::gradsuite::{run_suite, PASS_THRESHOLD};
use sma_core::loss::{loss_2d, loss_3d, loss_sv};
use sma_core::metrics::{balanced_accuracy, cohen_kappa, roc_auc, weighted_f1, weighted_sen_spe, ConfusionMatrix, ScoredSample};
use sma_core::model::Inference;
use sma_core::train::train_run;
use sma_core::{reference, ConvSpec, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let rows = run_suite(None).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let blocks = ["se_gate", "msda_block", "convlstm_step", "convlstm_unroll", "full_model"];
    let covered = blocks.iter().all(|b| rows.iter().any(|r| r.name == *b));
    let pass = covered && rows.iter().all(|r| r.passed()) && worst < PASS_THRESHOLD && secs < 60.0;
    verdict(pass, format!("{} checks, worst relative error {worst:.3e}, {secs:.1}s", rows.len()))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rand_tensor = |dims: &[usize]| Tensor::<f64>::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap();
    let (mut worst, mut cases) = (0.0f64, 0);
    for n in [1, 2] {
        for cin in [1, 2, 4] {
            for hw in [5, 8] {
                for stride in [1, 2] {
                    for padding in [0, 1, 2] {
                        for dilation in [1, 2, 3] {
                            for (groups, cout) in [(1, 3), (cin, cin)] {
                                let spec = ConvSpec::new(stride, padding, dilation, groups);
                                if spec.output_extent(hw, 3).filter(|&e| e > 0).is_none() {
                                    continue;
                                }
                                let x = rand_tensor(&[n, cin, hw, hw]);
                                let w = rand_tensor(&[cout, cin / groups, 3, 3]);
                                let x1 = rand_tensor(&[n, cin, hw]);
                                let w1 = rand_tensor(&[cout, cin / groups, 3]);
                                let mut tape = Tape::<f64>::new();
                                let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
                                let (x1v, w1v) = (tape.constant(x1.clone()), tape.constant(w1.clone()));
                                let y = tape.conv2d(xv, wv, None, spec).unwrap();
                                let y1 = tape.conv1d(x1v, w1v, None, spec).unwrap();
                                let (r2, _, _) = reference::conv2d(x.data(), (n, cin, hw, hw), w.data(), (cout, 3), None, stride, padding, dilation, groups);
                                let (r1, _) = reference::conv1d(x1.data(), (n, cin, hw), w1.data(), (cout, 3), None, stride, padding, dilation, groups);
                                let got = tape.value(y).unwrap().data().iter().chain(tape.value(y1).unwrap().data());
                                for (a, b) in got.zip(r2.iter().chain(&r1)) {
                                    worst = worst.max((a - b).abs());
                                }
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-6 && secs < 30.0, format!("{cases} shapes, worst abs diff {worst:.2e}, {secs:.2}s"))
}

fn criterion_3() -> Verdict {
    let cm = ConfusionMatrix::from_rows(&[vec![4, 1, 0], vec![1, 3, 1], vec![0, 1, 4]]).unwrap();
    let (sen, spe) = weighted_sen_spe(&cm).unwrap();
    let got = [cohen_kappa(&cm).unwrap(), weighted_f1(&cm).unwrap(), balanced_accuracy(&cm).unwrap(), sen, spe];
    let want = [0.600000, 0.733333, 0.733333, 0.733333, 0.866667];
    let fixture_ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-6);
    let four: Vec<ScoredSample> = [(0.1, false), (0.4, false), (0.35, true), (0.8, true)]
        .iter()
        .map(|&(s, l)| ScoredSample::new(s, l))
        .collect();
    let auc4 = roc_auc(&four).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for round in 0..200 {
        let n = rng.random_range(2..50);
        let levels = if round % 2 == 0 { 6 } else { 1 << 20 };
        let mut samples: Vec<ScoredSample> = (0..n)
            .map(|_| ScoredSample::new(rng.random_range(0..levels) as f64, rng.random_bool(0.5)))
            .collect();
        samples[0].label = true;
        samples[1].label = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in samples.iter().filter(|s| s.label) {
            for q in samples.iter().filter(|s| !s.label) {
                pairs += 1.0;
                wins += if p.score > q.score { 1.0 } else if p.score == q.score { 0.5 } else { 0.0 };
            }
        }
        worst = worst.max((roc_auc(&samples).unwrap() - wins / pairs).abs());
    }
    let pass = fixture_ok && (auc4 - 0.75).abs() < 1e-12 && worst <= 1e-9;
    verdict(
        pass,
        format!(
            "kappa {:.6} f1 {:.6} b_acc {:.6} sen {:.6} spe {:.6}, fixture auc {auc4:.6}, brute-force gap {worst:.1e}",
            got[0], got[1], got[2], got[3], got[4]
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    for _ in 0..100 {
        let (b, t, k) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(2..4));
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut logits = |rows: usize| Tensor::<f32>::from_fn(&[rows, k], |_| rng.random_range(-5.0..5.0)).unwrap();
        let (slice, seq, fin) = (logits(b * t), (0..t).map(|_| logits(b)).collect::<Vec<_>>(), logits(b));
        let mut tape = Tape::<f32>::new();
        let sv = tape.constant(slice);
        let qv: Vec<_> = seq.into_iter().map(|s| tape.constant(s)).collect();
        let fv = tape.constant(fin);
        let l2 = loss_2d(&mut tape, sv, &targets, t).unwrap();
        let l3 = loss_3d(&mut tape, &qv, fv, &targets).unwrap();
        let total = loss_sv(&mut tape, l2, l3, 0.0).unwrap();
        let (a, c) = (tape.value(l2).unwrap().item().unwrap(), tape.value(total).unwrap().item().unwrap());
        exact += (a.to_bits() == c.to_bits()) as usize;
    }
    let mut worst = 0.0f64;
    for (t, k) in [(5usize, 3usize), (11, 3), (4, 2)] {
        let mut tape = Tape::<f32>::new();
        let sv = tape.constant(Tensor::zeros(&[t, k]).unwrap());
        let qv: Vec<_> = (0..t).map(|_| tape.constant(Tensor::zeros(&[1, k]).unwrap())).collect();
        let fv = tape.constant(Tensor::zeros(&[1, k]).unwrap());
        let l2 = loss_2d(&mut tape, sv, &[0], t).unwrap();
        let l3 = loss_3d(&mut tape, &qv, fv, &[0]).unwrap();
        let ln_k = (k as f64).ln();
        worst = worst.max((tape.value(l2).unwrap().item().unwrap() as f64 - t as f64 * ln_k).abs());
        worst = worst.max((tape.value(l3).unwrap().item().unwrap() as f64 - (t + 1) as f64 * ln_k).abs());
    }
    verdict(exact == 100 && worst < 1e-5, format!("{exact}/100 bit-exact, uniform-loss gap {worst:.1e}"))
}

struct RunResult {
    bacc: f64,
    loss_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn train_seed(cfg: &RunConfig, seed: u64, train: &[SequenceSample], val: &[SequenceSample], dir: &Path) -> RunResult {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let (_, summary) = train_run(dir, &cfg, train, val, None).expect("training run");
    let last = *summary.val_bacc.last().expect("at least one epoch");
    let ratio = summary.train_losses.get(9).map_or(f64::NAN, |l10| l10 / summary.train_losses[0]);
    RunResult { bacc: last, loss_ratio: ratio }
}

fn default_splits(cfg: &RunConfig) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
    let ds = generate_synthetic(&cfg.data).unwrap();
    let (train, test) = split_grouped(&ds.manifest, cfg.test_fraction, cfg.split_seed).unwrap();
    let pick = |m: &sma_core::data::DatasetManifest| m.entries.iter().map(|e| ds.samples[e.sequence_id].clone()).collect::<Vec<_>>();
    (pick(&train), pick(&test))
}

fn criteria_5_and_6() -> (Verdict, Verdict) {
    let cfg = RunConfig::default();
    let (train, test) = default_splits(&cfg);
    let tmp = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let full: Vec<RunResult> = (0..3).map(|s| train_seed(&cfg, s, &train, &test, &tmp.path().join(format!("full{s}")))).collect();
    let secs = start.elapsed().as_secs_f64();
    for (s, r) in full.iter().enumerate() {
        say(&format!("  seed {s}: held-out b_acc {:.4}, epoch-10/epoch-1 loss {:.3}", r.bacc, r.loss_ratio));
    }
    let bacc = median(full.iter().map(|r| r.bacc).collect());
    let ratio = median(full.iter().map(|r| r.loss_ratio).collect());
    let c5 = verdict(
        bacc >= 0.90 && ratio <= 0.5 && secs < 600.0,
        format!(
            "median held-out b_acc {bacc:.4}, median loss ratio {ratio:.3}, {} train / {} test sequences, {secs:.0}s for 3 seeds",
            train.len(),
            test.len()
        ),
    );

    let mut slice_cfg = cfg.clone();
    slice_cfg.train.lambda = 0.0;
    slice_cfg.model.inference = Inference::SliceVote;
    let slice: Vec<f64> = (0..3)
        .map(|s| train_seed(&slice_cfg, s, &train, &test, &tmp.path().join(format!("slice{s}"))).bacc)
        .collect();
    let slice_median = median(slice.clone());
    let c6 = verdict(
        bacc >= slice_median,
        format!("full median b_acc {bacc:.4} vs slice-only {slice_median:.4} (slice-only seeds {slice:.4?})"),
    );
    (c5, c6)
}

fn smanet(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_smanet"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_7() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.cfg");
    fs::write(&cfg, "data.num_eyes = 6\ndata.sequences_per_eye = 6\ntrain.epochs = 2\n").unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let cfg_s = p("run.cfg");
    let data = p("data");
    let mut ok = smanet(&["gen-data", "--config", &cfg_s, "--out", &data]);
    for run in ["a", "b"] {
        ok &= smanet(&["train", "--config", &cfg_s, "--data", &data, "--out", &p(run)]);
    }
    let same = |x: &str, y: &str| fs::read(root.join(x)).ok().is_some_and(|a| fs::read(root.join(y)).ok() == Some(a));
    let identical = same("a/last.smck", "b/last.smck") && same("a/metrics.tsv", "b/metrics.tsv") && same("a/best.smck", "b/best.smck");

    ok &= smanet(&["train", "--config", &cfg_s, "--data", &data, "--out", &p("c"), "--epochs", "1"]);
    ok &= fs::copy(root.join("c/last.smck"), root.join("c/epoch1.smck")).is_ok();
    ok &= smanet(&["train", "--config", &cfg_s, "--data", &data, "--out", &p("c"), "--resume", &p("c/epoch1.smck")]);
    let resumed = same("a/last.smck", "c/last.smck") && same("a/metrics.tsv", "c/metrics.tsv");

    let smat = fs::read(root.join("data/sequences/seq_000000.smat")).unwrap();
    let smat_ok = encode_tensor(&decode_tensor(&smat).unwrap()) == smat;
    let smck = fs::read(root.join("a/last.smck")).unwrap();
    let smck_ok = encode_checkpoint(&decode_checkpoint(&smck).unwrap()).unwrap() == smck;

    verdict(
        ok && identical && resumed && smat_ok && smck_ok,
        format!("commands ok {ok}, identical runs {identical}, resume bit-exact {resumed}, SMAT {smat_ok}, SMCK {smck_ok}"),
    )
}

fn criterion_8() -> Verdict {
    let cfg = RunConfig::default();
    let ds = generate_synthetic(&cfg.data).unwrap();
    let mut leaks = 0;
    for seed in 0..100 {
        let (train, test) = split_grouped(&ds.manifest, cfg.test_fraction, seed).unwrap();
        let a: HashSet<u32> = train.entries.iter().map(|e| e.eye_id).collect();
        leaks += test.entries.iter().filter(|e| a.contains(&e.eye_id)).count();
    }
    verdict(leaks == 0, format!("{leaks} shared-eye sequences over 100 seeds"))
}

/// Writes to the stdout handle directly so lines show without --nocapture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
}

fn report(results: &mut Vec<(usize, Verdict)>, n: usize, name: &str, v: Verdict) {
    say(&format!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail));
    results.push((n, v));
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient correctness", criterion_1());
    report(&mut results, 2, "convolution oracle", criterion_2());
    report(&mut results, 3, "metric oracles", criterion_3());
    report(&mut results, 4, "loss identities", criterion_4());
    let (c5, c6) = criteria_5_and_6();
    report(&mut results, 5, "synthetic learnability", c5);
    report(&mut results, 6, "ablation ordering", c6);
    report(&mut results, 7, "determinism and persistence", criterion_7());
    report(&mut results, 8, "grouped split integrity", criterion_8());

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
