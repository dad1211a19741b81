//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! The synthetic benchmark trains three models (full loss and two
//! ablations) with the settings in `configs/benchmark.json`, so this takes
//! tens of minutes on one core.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bonet::association::{hungarian_assign, CostMatrix};
use bonet::checkpoint::Checkpoint;
use bonet::data::{
    generate_scene, sample_block_points, scene_from_json, scene_to_json, split_blocks, GenConfig, Sample, Scene,
};
use bonet::evaluation::{average_precision, evaluate, mask_iou, EvalConfig, EvalReport, InstanceSet};
use bonet::geometry::{soft_point, BBox, SoftClampParams};
use bonet::gradcheck::{self, Corruption, GradCheckConfig};
use bonet::losses::{focal_loss, loss_bbox, loss_bbs, FocalParams};
use bonet::network::{associate, reference_losses, LossConfig, Model, ModelConfig, Prediction};
use bonet::training::{train, TrainConfig, Trainer};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- 1

fn brute_force_min(c: &Array2<f64>) -> f64 {
    fn go(c: &Array2<f64>, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == c.ncols() {
            *best = best.min(acc);
            return;
        }
        for row in 0..c.nrows() {
            if !used[row] {
                used[row] = true;
                go(c, col + 1, used, acc + c[[row, col]], best);
                used[row] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.nrows()], 0.0, &mut best);
    best
}

fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=5);
        let h = rng.random_range(t..=7);
        // Integer costs keep every sum exact, so equality is meaningful.
        let c = Array2::from_shape_fn((h, t), |_| rng.random_range(-50..100) as f64);
        let a = hungarian_assign(&CostMatrix::new(c.clone()).unwrap()).unwrap();
        let total: f64 = a.gt_to_pred().iter().enumerate().map(|(j, &i)| c[[i, j]]).sum();
        if total != brute_force_min(&c) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 matrices, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn membership_fidelity() -> Outcome {
    let clamp = SoftClampParams::default();
    let unit = BBox::new([0.0; 3], [1.0; 3]);
    let centre = soft_point([0.5; 3], &unit, &clamp).q;
    let far = soft_point([3.0, 0.5, 0.5], &unit, &clamp).q;
    let face = soft_point([1.0, 0.5, 0.5], &unit, &clamp).q;
    let fixtures_ok = (centre - sigmoid(20.0)).abs() < 1e-12
        && (far - sigmoid(-20.0)).abs() < 1e-12
        && (face - 0.5).abs() < 1e-12;

    let margin = clamp.theta2 / clamp.theta1;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 10_000 {
        let mut lo = [0.0f64; 3];
        let mut hi = [0.0f64; 3];
        let mut p = [0.0f64; 3];
        for a in 0..3 {
            lo[a] = rng.random_range(-1.0..1.0);
            hi[a] = lo[a] + rng.random_range(0.1..2.0);
            p[a] = rng.random_range(-2.0..3.0);
        }
        if (0..3).any(|a| ((lo[a] - p[a]) * (p[a] - hi[a])).abs() < margin) {
            continue;
        }
        let b = BBox::new(lo, hi);
        let hard = if b.contains(p) { 1.0 } else { 0.0 };
        worst = worst.max((soft_point(p, &b, &clamp).q - hard).abs());
        checked += 1;
    }
    outcome(
        fixtures_ok && worst <= 2.1e-9,
        format!(
            "centre 1-{:.3e}, far {:.3e}, face {face}; max |q - hard| {worst:.3e} over {checked} pairs",
            1.0 - centre,
            far
        ),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_checks() -> Outcome {
    let cfg = GradCheckConfig::default();
    let mut rows = gradcheck::check_losses(&cfg, Corruption::None).unwrap();
    let model_cfg = gradcheck::tiny_model_config();
    let model = Model::new(model_cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = gradcheck::model_sample(&model, &mut rng, 16).unwrap();
    rows.push(gradcheck::check_model(&model, &sample, &cfg, Corruption::None).unwrap());
    let detail = rows
        .iter()
        .map(|r| {
            let skipped = if r.skipped > 0 { format!(", {} kinks skipped", r.skipped) } else { String::new() };
            format!("{} {:.1e}{skipped}", r.name, r.max_rel_error)
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(rows.iter().all(|r| r.passed), detail)
}

// ---------------------------------------------------------------- 4

fn loss_algebra() -> Outcome {
    let bbs = loss_bbs(&[0.9, 0.1], 1).unwrap();
    let bbs_ok = (bbs - -(0.9f64.ln() * 2.0) / 2.0).abs() < 1e-9 && (bbs - 0.105361).abs() < 1e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut focal_ok = true;
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.0..1.0);
        let y = rng.random_bool(0.5);
        let bce = if y {
            -p.clamp(1e-8, 1.0 - 1e-8).ln()
        } else {
            -(1.0 - p).clamp(1e-8, 1.0 - 1e-8).ln()
        };
        focal_ok &= focal_loss(p, y, &FocalParams::CROSS_ENTROPY) == bce;
    }

    // Same paired costs, different numbers of unpaired predictions.
    let pairs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(-1.0..0.0), rng.random_range(0.0..2.0)))
        .collect();
    let base = loss_bbox(&pairs).unwrap();
    let mut h_ok = true;
    for h in 3..10 {
        let mut c = Array2::from_elem((h, 3), 100.0);
        for (j, p) in pairs.iter().enumerate() {
            c[[h - 1 - j, j]] = p.0 + p.1 + p.2;
        }
        let a = hungarian_assign(&CostMatrix::new(c.clone()).unwrap()).unwrap();
        let paired: Vec<_> = a.gt_to_pred().iter().enumerate().map(|(j, &i)| (c[[i, j]], 0.0, 0.0)).collect();
        h_ok &= loss_bbox(&paired).unwrap() == base;
    }
    outcome(
        bbs_ok && focal_ok && h_ok,
        format!("score fixture {bbs:.6}; focal==BCE {focal_ok}; box loss independent of H {h_ok}"),
    )
}

// ---------------------------------------------------------------- 5

fn noisy_prediction(sample: &Sample, h: usize, k: usize, rng: &mut impl Rng) -> Prediction {
    let mut boxes: Vec<BBox> = sample
        .gt_boxes
        .iter()
        .map(|b| {
            let mut v = b.to_array();
            v.iter_mut().for_each(|x| *x += rng.random_range(-0.08..0.08));
            BBox::from_slice(&v)
        })
        .collect();
    while boxes.len() < h {
        let lo = [rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(0.0..1.5)];
        boxes.push(BBox::new(lo, [lo[0] + 0.4, lo[1] + 0.4, lo[2] + 0.4]));
    }
    boxes.shuffle(rng);
    let n = sample.n_points();
    Prediction {
        boxes,
        scores: (0..h).map(|_| rng.random_range(0.05..0.95)).collect(),
        masks: Array2::from_shape_fn((h, n), |_| rng.random_range(0.01..0.99)),
        logits: Array2::from_shape_fn((n, k), |_| rng.random_range(-2.0..2.0)),
    }
}

fn second_best_gap(c: &Array2<f64>) -> f64 {
    let best = brute_force_min(c);
    let mut gap = f64::INFINITY;
    fn go(c: &Array2<f64>, col: usize, used: &mut Vec<bool>, acc: f64, best: f64, gap: &mut f64, seen_best: &mut bool) {
        if col == c.ncols() {
            if acc == best && !*seen_best {
                *seen_best = true;
            } else {
                *gap = gap.min(acc - best);
            }
            return;
        }
        for row in 0..c.nrows() {
            if !used[row] {
                used[row] = true;
                go(c, col + 1, used, acc + c[[row, col]], best, gap, seen_best);
                used[row] = false;
            }
        }
    }
    go(c, 0, &mut vec![false; c.nrows()], 0.0, best, &mut gap, &mut false);
    gap
}

fn permutation_invariance() -> Outcome {
    let gen = GenConfig::default();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut scenes, mut index, mut worst) = (0, 0u64, 0.0f64);
    while scenes < 100 {
        let scene = generate_scene(&gen, index).unwrap();
        index += 1;
        let block = &split_blocks(&scene, 2.0, 2.0).unwrap()[0];
        let sample = Sample::from_block(&sample_block_points(block, 256, true, &mut rng).unwrap()).unwrap();
        if sample.t_gt() < 2 {
            continue;
        }
        let pred = noisy_prediction(&sample, 8, gen.num_classes, &mut rng);
        let (c, _) = associate(&pred, &sample, &cfg).unwrap().unwrap();
        if second_best_gap(c.costs()) < 1e-6 {
            continue;
        }
        let base = reference_losses(&pred, &sample, &cfg, None).unwrap().l_all;
        let mut order: Vec<usize> = (0..sample.t_gt()).collect();
        while order.iter().enumerate().all(|(i, &o)| i == o) {
            order.shuffle(&mut rng);
        }
        let shuffled = reference_losses(&pred, &sample.permute_instances(&order), &cfg, None).unwrap().l_all;
        worst = worst.max((base - shuffled).abs());
        scenes += 1;
    }
    outcome(worst < 1e-9, format!("{scenes} scenes, max |Δ l_all| {worst:.2e}"))
}

// ---------------------------------------------------------------- 6, 7

#[derive(Deserialize)]
struct BenchmarkFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Deserialize)]
struct BenchmarkGen {
    gen: GenConfig,
    train_scenes: usize,
    test_scenes: usize,
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn read_json<T: for<'de> Deserialize<'de>>(name: &str) -> T {
    let text = std::fs::read_to_string(config_path(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

struct BenchmarkRun {
    report: EvalReport,
    trainer: Trainer,
    elapsed: Duration,
}

fn benchmark_run(train_scenes: &[Scene], test_scenes: &[Scene], bench: &BenchmarkFile, tweak: impl Fn(&mut TrainConfig)) -> BenchmarkRun {
    let mut cfg = bench.train.clone();
    tweak(&mut cfg);
    let start = Instant::now();
    let trainer = train(train_scenes, bench.model.clone(), cfg.clone()).unwrap();
    let elapsed = start.elapsed();
    let eval_cfg = EvalConfig {
        blocking: cfg.blocking,
        ..EvalConfig::default()
    };
    let report = evaluate(trainer.model(), test_scenes, &eval_cfg).unwrap();
    BenchmarkRun { report, trainer, elapsed }
}

fn benchmark() -> (Outcome, Outcome) {
    let bench: BenchmarkFile = read_json("benchmark.json");
    let data: BenchmarkGen = read_json("benchmark_gen.json");
    let total = (data.train_scenes + data.test_scenes) as u64;
    let scenes: Vec<Scene> = (0..total).map(|i| generate_scene(&data.gen, i).unwrap()).collect();
    let (train_scenes, test_scenes) = scenes.split_at(data.train_scenes);

    let full = benchmark_run(train_scenes, test_scenes, &bench, |_| {});
    let h = full.trainer.history();
    let (first, last) = (&h[0].losses, &h[h.len() - 1].losses);
    let decreased = last.l_sem < first.l_sem
        && last.l_bbox < first.l_bbox
        && last.l_bbs < first.l_bbs
        && last.l_pmask < first.l_pmask;
    let r = &full.report;
    let c6 = outcome(
        h.len() <= 100
            && full.elapsed < Duration::from_secs(15 * 60)
            && r.mean_ap >= 0.8
            && r.mprec >= 0.8
            && decreased,
        format!(
            "{} epochs in {:.0}s; mAP {:.3}, mPrec {:.3}, mRec {:.3}; losses epoch 1 -> {}: \
             sem {:.4}->{:.4} bbox {:.4}->{:.4} bbs {:.4}->{:.4} pmask {:.5}->{:.5}",
            h.len(),
            full.elapsed.as_secs_f64(),
            r.mean_ap,
            r.mprec,
            r.mrec,
            h.len(),
            first.l_sem,
            last.l_sem,
            first.l_bbox,
            last.l_bbox,
            first.l_bbs,
            last.l_bbs,
            first.l_pmask,
            last.l_pmask
        ),
    );

    let no_box = benchmark_run(train_scenes, test_scenes, &bench, |c| c.loss.terms.bbox = false);
    let no_score = benchmark_run(train_scenes, test_scenes, &bench, |c| c.loss.terms.bbs = false);
    let ap_drop = r.mean_ap - no_box.report.mean_ap;
    let prec_drop = r.mprec - no_score.report.mprec;
    let c7 = outcome(
        ap_drop >= 0.10 && prec_drop >= 0.02,
        format!(
            "(a) no box loss mAP {:.3} (drop {ap_drop:.3}); (b) no score loss mPrec {:.3} (drop {prec_drop:.3})",
            no_box.report.mean_ap, no_score.report.mprec
        ),
    );
    (c6, c7)
}

// ---------------------------------------------------------------- 8

fn complexity() -> Outcome {
    let bench: BenchmarkFile = read_json("benchmark.json");
    let model = Model::new(bench.model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let small = Array2::from_shape_fn((4096, 9), |_| rng.random_range(0.0..1.0));
    let large = Array2::from_shape_fn((8192, 9), |_| rng.random_range(0.0..1.0));
    model.predict_features(&small).unwrap();
    model.predict_features(&large).unwrap();
    let (mut t_small, mut t_large) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..20 {
        let s = Instant::now();
        model.predict_features(&small).unwrap();
        t_small += s.elapsed();
        let s = Instant::now();
        model.predict_features(&large).unwrap();
        t_large += s.elapsed();
    }
    let ratio = t_large.as_secs_f64() / t_small.as_secs_f64();
    outcome(
        (1.5..=2.5).contains(&ratio),
        format!(
            "H={}, mean forward {:.1} ms (N=4096) vs {:.1} ms (N=8192), ratio {ratio:.2}",
            model.config().h_max,
            t_small.as_secs_f64() * 50.0,
            t_large.as_secs_f64() * 50.0
        ),
    )
}

// ---------------------------------------------------------------- 9

fn inst(points: &[usize], score: f64) -> InstanceSet {
    InstanceSet {
        points: points.to_vec(),
        class: 1,
        score,
    }
}

fn metric_fixtures() -> Outcome {
    let gts = vec![vec![inst(&[0, 1, 2, 3], 1.0), inst(&[4, 5, 6, 7], 1.0)]];
    let ap = |p: &[Vec<InstanceSet>]| average_precision(p, &gts, 1, 0.5).unwrap();
    let half = vec![vec![inst(&[0, 1, 2, 3], 0.9), inst(&[8, 9], 0.8)]];
    let checks = [
        ap(&gts) == Some(1.0),
        ap(&[vec![]]) == Some(0.0),
        ap(&half) == Some(0.5),
        mask_iou(&[0, 1, 2], &[1, 2, 3]).unwrap() == 0.5,
        mask_iou(&[0, 1], &[0, 1]).unwrap() == 1.0,
        mask_iou(&[0, 1], &[2, 3]).unwrap() == 0.0,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!("{}/{} fixtures exact", checks.iter().filter(|&&c| c).count(), checks.len()),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let gen = GenConfig::default();
    let scenes: Vec<Scene> = (0..4).map(|i| generate_scene(&gen, i).unwrap()).collect();
    let model = ModelConfig {
        backbone_hidden: vec![8, 16],
        k: 16,
        h_max: 8,
        box_hidden: vec![16, 16],
        mask_compress: 8,
        mask_fused: 8,
        mask_hidden: vec![8, 4],
        sem_hidden: 8,
        semantic_classes: 4,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        blocking: bonet::data::BlockingConfig {
            block_size: 2.0,
            stride: 2.0,
            train_points: 128,
        },
        ..TrainConfig::default()
    };
    let a = train(&scenes, model.clone(), cfg.clone()).unwrap();
    let b = train(&scenes, model, cfg).unwrap();
    let bits = |t: &Trainer| -> Vec<u64> {
        t.history()
            .iter()
            .flat_map(|r| [r.losses.l_sem, r.losses.l_bbox, r.losses.l_bbs, r.losses.l_pmask, r.losses.l_all])
            .map(f64::to_bits)
            .collect()
    };
    let history_ok = bits(&a) == bits(&b);

    let ck = Checkpoint::from_trainer(&a);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("memory")).unwrap();
    let ckpt_ok = back == ck && back.to_bytes().unwrap() == bytes && back.model().unwrap().params() == a.model().params();

    let scene_ok = scenes
        .iter()
        .all(|s| scene_from_json(&scene_to_json(s).unwrap(), std::path::Path::new("memory")).unwrap() == *s);
    outcome(
        history_ok && ckpt_ok && scene_ok,
        format!("history bit-identical {history_ok}; checkpoint round-trip {ckpt_ok}; scene round-trip {scene_ok}"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "Hungarian vs brute force", hungarian_oracle()),
        (2, "soft membership fidelity", membership_fidelity()),
        (3, "gradient checks", gradient_checks()),
        (4, "loss algebra", loss_algebra()),
        (5, "GT permutation invariance", permutation_invariance()),
    ];
    let (c6, c7) = benchmark();
    results.push((6, "synthetic benchmark", c6));
    results.push((7, "ablation direction", c7));
    results.push((8, "forward-time scaling", complexity()));
    results.push((9, "metric fixtures", metric_fixtures()));
    results.push((10, "determinism and round-trips", determinism()));

    let mut all = true;
    for (n, name, o) in &results {
        all &= o.passed;
        println!("criterion {n:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
