//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The tests take a shared lock so that wall-clock limits are measured on an
//! otherwise idle process.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use owis_core::eval::EMPTY_BUCKET;
use owis_core::experiment::{run_incompleteness_sweep, run_semi_comparison, IncompletenessConfig, SemiConfig};
use owis_core::gradcheck::GradCheckSuite;
use owis_core::mask::PROB_EPS;
use owis_core::pseudo_label::{filter_by_iou, generate_pseudo_labels, PseudoProposal};
use owis_core::synth::generate_dataset;
use owis_core::trainer::train_fully;
use owis_core::{
    evaluate, evaluate_detections, evaluate_oracle, hungarian, soft_union_estimate, union_foreground, BinaryMask,
    CostMatrix, DatasetManifest, Detection, EvalConfig, EvalReport, FeatureGrid, SceneSpec, SoftMask, SoftUnionMode,
    TeacherState, ToyModel, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(name: &str, ok: bool, elapsed: Duration, detail: &str) -> bool {
    println!(
        "{} {name} ({:.1}s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

#[test]
fn gradient_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let results = GradCheckSuite::default().run().unwrap();
    let elapsed = start.elapsed();
    let mut detail = String::new();
    let mut ok = elapsed < Duration::from_secs(60);
    for term in ["mask", "foreground", "consistency", "objectness", "full"] {
        let rows: Vec<_> = results.iter().filter(|r| r.case == term && r.labeled).collect();
        let passed = rows.iter().filter(|r| r.report.passed).count();
        let worst = rows.iter().map(|r| r.report.max_error).fold(0.0, f64::max);
        ok &= rows.len() >= 20 && passed == rows.len() && rows.iter().all(|r| r.instances >= 1);
        detail += &format!("{term} {passed}/{} (worst {worst:.1e}); ", rows.len());
    }
    let others = results.iter().filter(|r| !r.report.passed).count();
    ok &= others == 0;
    detail += &format!("{} checks in total, {others} failed", results.len());
    assert!(report("gradient correctness", ok, elapsed, &detail));
}

/// Minimum over every injective assignment of the smaller side into the larger.
fn brute_force(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, col: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if col == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for r in 0..cost.rows() {
            if !used[r] {
                used[r] = true;
                go(cost, col + 1, used, acc + cost.get(r, col), best);
                used[r] = false;
            }
        }
    }
    if cost.rows() >= cost.cols() {
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
        best
    } else {
        let t: Vec<f64> = (0..cost.cols() * cost.rows())
            .map(|i| cost.get(i % cost.rows(), i / cost.rows()))
            .collect();
        brute_force(&CostMatrix::new(cost.cols(), cost.rows(), t).unwrap())
    }
}

#[test]
fn matching_optimality() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for rows in 1..=7 {
        for cols in 1..=7 {
            for trial in 0..1000 {
                // half integer-valued with many ties, half continuous
                let entries: Vec<f64> = (0..rows * cols)
                    .map(|_| if trial % 2 == 0 { rng.gen_range(0..10) as f64 } else { rng.gen_range(-5.0..5.0) })
                    .collect();
                let cost = CostMatrix::new(rows, cols, entries).unwrap();
                let pairs = hungarian(&cost).unwrap();
                let distinct_rows = pairs.iter().map(|p| p.0).collect::<std::collections::BTreeSet<_>>().len();
                let valid = pairs.len() == rows.min(cols) && distinct_rows == pairs.len();
                let got = if rows >= cols {
                    cost.total(&pairs)
                } else {
                    // the brute force sums in row order when it transposes
                    let mut by_row = pairs.clone();
                    by_row.sort_unstable();
                    by_row.iter().map(|&(r, c)| cost.get(r, c)).sum()
                };
                if !valid || got != brute_force(&cost) {
                    mismatches.push((rows, cols, trial));
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches.is_empty() && elapsed < Duration::from_secs(60);
    let detail = format!("{checked} matrices over every shape up to 7x7, {} mismatches", mismatches.len());
    assert!(report("matching optimality", ok, elapsed, &detail), "{mismatches:?}");
}

fn random_binary(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let p = rng.gen_range(0.0..0.6);
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn foreground_union_and_filter_oracles() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut union_bad, mut soft_worst, mut filter_bad) = (0, 0.0f64, 0);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));

        let masks: Vec<BinaryMask> = (0..rng.gen_range(0..6)).map(|_| random_binary(&mut rng, h, w)).collect();
        let got = union_foreground(&masks, (h, w)).unwrap();
        for r in 0..h {
            for c in 0..w {
                if got.get(r, c) != masks.iter().any(|m| m.get(r, c)) {
                    union_bad += 1;
                }
            }
        }

        let k = rng.gen_range(1..6);
        let soft: Vec<SoftMask> = (0..k)
            .map(|_| {
                let v = (0..h * w)
                    .map(|_| match rng.gen_range(0..10) {
                        0 => 0.0,
                        1 => 1.0,
                        _ => rng.gen_range(0.0..1.0),
                    })
                    .collect();
                SoftMask::new(h, w, v).unwrap()
            })
            .collect();
        for mode in [SoftUnionMode::SigmoidOfConfidences, SoftUnionMode::SigmoidOfLogits] {
            let got = soft_union_estimate(&soft, mode).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let mut z = 0.0;
                    for m in &soft {
                        let v = m.get(r, c);
                        z += match mode {
                            SoftUnionMode::SigmoidOfConfidences => v,
                            SoftUnionMode::SigmoidOfLogits => {
                                let p = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
                                (p / (1.0 - p)).ln()
                            }
                        };
                    }
                    soft_worst = soft_worst.max((got.get(r, c) - logistic(z)).abs());
                }
            }
        }

        let gts: Vec<BinaryMask> = (0..rng.gen_range(0..4)).map(|_| random_binary(&mut rng, h, w)).collect();
        let proposals: Vec<PseudoProposal> = (0..rng.gen_range(0..6))
            .map(|q| PseudoProposal {
                query: q,
                mask: random_binary(&mut rng, h, w),
                confidence: 0.9,
                accepted: false,
            })
            .collect();
        let eps = rng.gen_range(0.0..1.0);
        let kept: Vec<usize> = filter_by_iou(&proposals, &gts, eps).unwrap().iter().map(|p| p.query).collect();
        let mut expected = Vec::new();
        for p in &proposals {
            let mut max_iou = 0.0f64;
            for g in &gts {
                let (mut inter, mut uni) = (0usize, 0usize);
                for r in 0..h {
                    for c in 0..w {
                        let (a, b) = (p.mask.get(r, c), g.get(r, c));
                        inter += (a && b) as usize;
                        uni += (a || b) as usize;
                    }
                }
                let iou = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
                max_iou = max_iou.max(iou);
            }
            if max_iou <= eps {
                expected.push(p.query);
            }
        }
        if kept != expected {
            filter_bad += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = union_bad == 0 && soft_worst <= 1e-12 && filter_bad == 0 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "1000 cases: union mismatched pixels {union_bad}, soft union max deviation {soft_worst:.1e}, filter mismatches {filter_bad}"
    );
    assert!(report("foreground union and overlap filter oracles", ok, elapsed, &detail));
}

fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        max_instances: 3,
        min_scale: 3.0,
        max_scale: 6.0,
        ..SceneSpec::default()
    }
}

fn recall_ordered(r: &EvalReport) -> bool {
    r.ar100 >= r.ar10 && r.ar10 >= r.ar1
}

#[test]
fn metric_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let manifest = DatasetManifest {
        seed: 8,
        samples: 40,
        ..DatasetManifest::default()
    };
    let ds = generate_dataset(&manifest).unwrap();
    let cfg = EvalConfig::default();
    let oracle = evaluate_oracle(&ds.samples, &cfg).unwrap();
    let oracle_ok = oracle.ap100 == 1.0 && oracle.ar100 == 1.0;

    // one true positive ranked above one false positive, two ground truths
    let (h, w) = (10, 10);
    let g1 = rect(h, w, 0, 4, 0, 4);
    let g2 = rect(h, w, 6, 10, 6, 10);
    let dets = vec![
        Detection { mask: g1.clone(), score: 0.9 },
        Detection { mask: rect(h, w, 0, 3, 6, 10), score: 0.8 },
    ];
    let single = EvalConfig {
        iou_thresholds: vec![0.5],
        ..EvalConfig::default()
    };
    let crafted = evaluate_detections(&[(dets, vec![g1, g2])], &single).unwrap();
    let hand: f64 = (0..101).map(|i| if i <= 50 { 1.0 } else { 0.0 }).sum::<f64>() / 101.0;
    let crafted_ok = (crafted.ap100 - hand).abs() <= 1e-9;

    let mut reports = vec![oracle, crafted];
    let train_set = generate_dataset(&DatasetManifest {
        seed: 1,
        samples: 24,
        scene: small_scene(),
        ..DatasetManifest::default()
    })
    .unwrap();
    let eval_set = generate_dataset(&DatasetManifest {
        seed: 2,
        samples: 12,
        scene: small_scene(),
        ..DatasetManifest::default()
    })
    .unwrap();
    for iterations in [0, 50, 200] {
        let tc = TrainConfig {
            learning_rate: 0.05,
            iterations,
            batch_size: 4,
            num_queries: 8,
            ..TrainConfig::default()
        };
        let model = train_fully(&train_set.samples, false, &tc).unwrap().model;
        reports.push(evaluate(&model, &eval_set.samples, &cfg).unwrap());
    }
    let ordered = reports.iter().all(recall_ordered);
    let formed = reports.iter().all(|r| r.is_well_formed() && r.ap100 != EMPTY_BUCKET);

    let elapsed = start.elapsed();
    let ok = oracle_ok && crafted_ok && ordered && formed;
    let detail = format!(
        "oracle AP100 {} AR100 {}; crafted AP {:.12} vs 101-point sum {hand:.12} (continuous area 0.5); \
         AR100 >= AR10 on {}/{} runs",
        reports[0].ap100,
        reports[0].ar100,
        reports[1].ap100,
        reports.iter().filter(|r| r.ar100 >= r.ar10).count(),
        reports.len()
    );
    assert!(report("metric correctness", ok, elapsed, &detail));
}

#[test]
fn incompleteness_trend() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let out = run_incompleteness_sweep(&IncompletenessConfig::default()).unwrap();
    let elapsed = start.elapsed();
    print!("{}", out.verdict());
    let in_time = elapsed < Duration::from_secs(15 * 60);
    let detail = format!(
        "sois >= baseline under dropout: {}; gap grows from drop1 to drop3: {}; within 15 minutes: {in_time}",
        out.sois_not_worse, out.gap_grows
    );
    assert!(report("incompleteness trend", out.passed() && in_time, elapsed, &detail));
}

#[test]
fn semi_supervised_trend() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let out = run_semi_comparison(&SemiConfig::default()).unwrap();
    let elapsed = start.elapsed();
    print!("{}", out.verdict());
    let in_time = elapsed < Duration::from_secs(20 * 60);
    let detail = format!(
        "semi > fully at every split: {}; semi-30 >= fully-50 (reported): {:?}; within 20 minutes: {in_time}",
        out.semi_beats_fully, out.semi_small_matches_fully_large
    );
    assert!(report("semi-supervised trend", out.passed() && in_time, elapsed, &detail));
}

#[test]
fn pseudo_label_pipeline() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    // channel 0 marks object A, channel 1 object B, channel 2 is the bias
    let (h, w) = (12, 12);
    let a = rect(h, w, 1, 5, 1, 5);
    let b = rect(h, w, 7, 11, 6, 11);
    let data: Vec<f64> = (0..h * w)
        .flat_map(|p| [a.bits()[p] as f64, b.bits()[p] as f64, 1.0])
        .collect();
    let features = FeatureGrid::new(h, w, 3, data).unwrap();
    #[rustfmt::skip]
    let params = vec![
        20.0, -20.0, -10.0,
        -20.0, 20.0, -10.0,
        0.0, 0.0, 10.0,
        0.0, 0.0, 10.0,
        0.0, 0.0, 0.0,
    ];
    let teacher = TeacherState::new(&ToyModel::from_params(2, 3, params).unwrap(), 0.999).unwrap();
    // B's annotation is dropped; only A remains
    let gts = [a.clone()];
    let merged = generate_pseudo_labels(&teacher, &features, &gts, 0.8, 0.2).unwrap();
    let open = generate_pseudo_labels(&teacher, &features, &gts, 0.8, 1.0).unwrap();
    let strict = generate_pseudo_labels(&teacher, &features, &gts, 1.0 - 1e-12, 0.2).unwrap();
    let ok = merged == vec![a.clone(), b.clone()] && open == vec![a.clone(), a.clone(), b] && strict == vec![a];
    let detail = format!(
        "merged {} masks at (0.8, 0.2); eps 1.0 keeps the duplicate ({} masks); threshold near 1 keeps only the annotation ({} mask)",
        merged.len(),
        open.len(),
        strict.len()
    );
    assert!(report("pseudo-label pipeline", ok, start.elapsed(), &detail));
}

const RUN: &str = r#"{
  "dataset": {"samples": 12, "labeled_fraction": 0.5, "sparse_annotations": true,
              "dropout": {"type": "fraction", "keep": 0.6},
              "scene": {"height": 32, "width": 32, "max_instances": 3, "min_scale": 3, "max_scale": 6}},
  "train": {"iterations": 30, "batch_size": 2, "num_queries": 6,
            "pseudo_label": {"confidence_threshold": 0.5}},
  "eval_samples": 6,
  "gradcheck": {"cases": 2},
  "incompleteness": {"scene": {"height": 24, "width": 24, "max_instances": 2, "min_scale": 3, "max_scale": 5},
                     "train_samples": 6, "eval_samples": 3, "seeds": [0, 1],
                     "train": {"iterations": 6, "batch_size": 2, "num_queries": 4}},
  "semi": {"scene": {"height": 24, "width": 24, "max_instances": 2, "min_scale": 3, "max_scale": 5},
           "train_samples": 6, "eval_samples": 3, "seeds": [0, 1],
           "train": {"iterations": 6, "batch_size": 2, "num_queries": 4}}
}"#;

const STEPS: &[&[&str]] = &[
    &["generate"],
    &["train"],
    &["eval"],
    &["train-semi"],
    &["eval"],
    &["eval", "--oracle-detections"],
    &["gradcheck"],
    &["experiment", "--which", "incompleteness"],
    &["experiment", "--which", "semi"],
];

/// Runs every command into `dir`, returning each step's exit code and a snapshot
/// of every output file after it.
fn run_all(dir: &Path) -> Vec<(i32, Vec<(String, Vec<u8>)>)> {
    let cfg = dir.join("config.json");
    fs::write(&cfg, RUN).unwrap();
    let out = dir.join("out");
    STEPS
        .iter()
        .map(|args| {
            let status = Command::new(env!("CARGO_BIN_EXE_owis-lab"))
                .args(*args)
                .arg("--config")
                .arg(&cfg)
                .arg("--output-dir")
                .arg(&out)
                .output()
                .unwrap()
                .status
                .code()
                .unwrap();
            // the resolved config records the output directory itself
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
                .unwrap()
                .filter(|e| e.as_ref().unwrap().file_name() != "resolved_config.json")
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
                })
                .collect();
            files.sort();
            (status, files)
        })
        .collect()
}

#[test]
fn determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all(a.path());
    let second = run_all(b.path());
    let ran = first.iter().all(|(code, _)| matches!(code, 0 | 4));
    let identical = first == second;
    let files: std::collections::BTreeSet<&str> = first
        .iter()
        .flat_map(|(_, f)| f.iter().map(|(n, _)| n.as_str()))
        .collect();
    let covered = ["model.json", "metrics.csv", "report.json", "gradcheck.csv", "incompleteness.csv", "semi.csv"]
        .iter()
        .all(|f| files.contains(f));
    let detail = format!(
        "{} commands run twice, outputs byte-identical: {identical}; files compared: {}",
        STEPS.len(),
        files.into_iter().collect::<Vec<_>>().join(" ")
    );
    assert!(report("determinism", ran && identical && covered, start.elapsed(), &detail));
}
