//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any criterion fails. Pass criterion names (or their
//! numbers) as arguments to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bline_core::aggregate::{
    fuse_decisions, postprocess_heatmap, Aggregation, FusionMode, Level, PredictionRecord,
};
use bline_core::data::io::read_jsonl;
use bline_core::data::{build_patient_split, compute_sample_weights, make_epoch_schedule, Point, Polarity, Unit, UnitId};
use bline_core::evaluation::{evaluate_detection, evaluate_localization, match_points, roc_auc, Report};
use bline_core::labelmap::render_disc_mask;
use bline_core::objectives::{
    bce_grad, bce_loss, dice_loss, dice_loss_grad, focal_loss, focal_loss_grad, seg_loss, seg_loss_grad, LossConfig,
};
use bline_core::phantom::{generate_dataset, DatasetConfig};
use bline_core::Grid;
use bline_models::inference::{predict_subsets, predict_video, InferenceConfig};
use bline_models::trainer::{run_schedule, train, videos_of, EpochRunner, History, ScheduleConfig, TrainConfig};
use bline_models::zoo::{ArchConfig, TINY_CLIP_CNN3D, TINY_FRAME_CNN, TINY_PIXEL_UNET};
use bline_models::build_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let y = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
    let p = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    (y, p)
}

fn loss_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (y, p) = random_map(&mut r, 256, 0.01, 0.99);
        let cfg = LossConfig {
            gamma: 0.0,
            beta: 1.0,
            ..LossConfig::default()
        };
        let focal = focal_loss(&y, &p, 1.0, &cfg).map_err(|e| e.to_string())?;
        let bce = -y
            .iter()
            .zip(&p)
            .map(|(&t, &q)| t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            .sum::<f64>()
            / y.len() as f64;
        worst = worst.max((focal - bce).abs());

        let mask: Vec<f64> = y.clone();
        check(dice_loss(&mask, &mask, 1.0, 1.0).unwrap() == 0.0, "dice of identical maps is not 0")?;
        let zeros = vec![0.0; 256];
        check(dice_loss(&zeros, &zeros, 1.0, 1.0).unwrap() == 0.0, "dice of empty maps is not 0")?;

        let base = LossConfig::default();
        let w = r.random_range(0.1..3.0);
        let only_focal = seg_loss(&y, &p, w, &LossConfig { alpha: 0.0, ..base }).unwrap();
        let only_dice = seg_loss(&y, &p, w, &LossConfig { alpha: 1.0, ..base }).unwrap();
        check(only_focal == focal_loss(&y, &p, w, &base).unwrap(), "seg(alpha=0) != focal")?;
        check(only_dice == dice_loss(&y, &p, w, base.epsilon).unwrap(), "seg(alpha=1) != dice")?;
    }
    check(worst < 1e-9, format!("focal(gamma=0, beta=1) vs BCE differs by {worst:e}"))?;
    within(start.elapsed(), 1.0, "loss suite")?;
    Ok(format!("max |focal - bce| = {worst:.1e}, {:.3}s", start.elapsed().as_secs_f64()))
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut r = rng(2);
    let cfg = LossConfig::default();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    type Loss<'a> = Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>;
    type Grad<'a> = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + 'a>;
    let w = 0.7;
    let suite: Vec<(&str, Loss, Grad)> = vec![
        (
            "bce",
            Box::new(|y: &[f64], p: &[f64]| y.iter().zip(p).map(|(&t, &q)| bce_loss(t, q, w).unwrap()).sum()),
            Box::new(|y: &[f64], p: &[f64]| y.iter().zip(p).map(|(&t, &q)| bce_grad(t, q, w).unwrap()).collect()),
        ),
        (
            "focal",
            Box::new(|y: &[f64], p: &[f64]| focal_loss(y, p, w, &cfg).unwrap()),
            Box::new(|y: &[f64], p: &[f64]| focal_loss_grad(y, p, w, &cfg).unwrap().1),
        ),
        (
            "dice",
            Box::new(|y: &[f64], p: &[f64]| dice_loss(y, p, w, cfg.epsilon).unwrap()),
            Box::new(|y: &[f64], p: &[f64]| dice_loss_grad(y, p, w, cfg.epsilon).unwrap().1),
        ),
        (
            "seg",
            Box::new(|y: &[f64], p: &[f64]| seg_loss(y, p, w, &cfg).unwrap()),
            Box::new(|y: &[f64], p: &[f64]| seg_loss_grad(y, p, w, &cfg).unwrap().1),
        ),
    ];
    for (name, loss, grad) in &suite {
        let mut max_err = 0.0f64;
        for _ in 0..20 {
            let (y, p) = random_map(&mut r, 64, 0.02, 0.98);
            let analytic = grad(&y, &p);
            for i in 0..p.len() {
                let mut up = p.clone();
                let mut down = p.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (loss(&y, &up) - loss(&y, &down)) / (2.0 * h);
                max_err = max_err.max(relative_error(analytic[i], fd));
            }
        }
        worst.insert(name, max_err);
    }
    for (name, err) in &worst {
        check(*err < 1e-4, format!("{name} gradient relative error {err:e}"))?;
    }
    within(start.elapsed(), 30.0, "gradient checks")?;
    Ok(format!(
        "max relative error {}",
        worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

/// Largest matching by trying every partial assignment.
fn exhaustive_matching(edges: &[Vec<bool>], i: usize, used: &mut Vec<bool>) -> usize {
    if i == edges.len() {
        return 0;
    }
    let mut best = exhaustive_matching(edges, i + 1, used);
    for j in 0..used.len() {
        if edges[i][j] && !used[j] {
            used[j] = true;
            best = best.max(1 + exhaustive_matching(edges, i + 1, used));
            used[j] = false;
        }
    }
    best
}

fn matching_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let mut total_tp = 0;
    for _ in 0..500 {
        let spacing = r.random_range(0.235..=0.8);
        let extent = r.random_range(20.0..80.0);
        let n_a = r.random_range(0..9);
        let n_d = r.random_range(0..9);
        let mut points = |n: usize| -> Vec<Point> {
            (0..n)
                .map(|_| Point::new(r.random_range(0.0..extent), r.random_range(0.0..extent)))
                .collect()
        };
        let ann = points(n_a);
        let det = points(n_d);
        let edges: Vec<Vec<bool>> = ann
            .iter()
            .map(|a| {
                det.iter()
                    .map(|d| ((a.row - d.row).powi(2) + (a.col - d.col).powi(2)).sqrt() * spacing < 5.0)
                    .collect()
            })
            .collect();
        let expected = exhaustive_matching(&edges, 0, &mut vec![false; det.len()]);
        let got = match_points(&ann, &det, spacing, 5.0);
        check(
            got.tp == expected && got.fp == det.len() - expected && got.fn_ == ann.len() - expected,
            format!("match_points {got:?} vs oracle tp {expected}"),
        )?;
        total_tp += expected;
    }
    within(start.elapsed(), 30.0, "matching")?;
    Ok(format!("500 instances agree ({total_tp} matches), {:.2}s", start.elapsed().as_secs_f64()))
}

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut done = 0;
    while done < 200 {
        let n = r.random_range(2..=200);
        let levels = r.random_range(2..30);
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / 7.0).collect();
        let (pos, neg) = (labels.iter().filter(|&&l| l).count(), labels.iter().filter(|&&l| !l).count());
        if pos == 0 || neg == 0 {
            check(roc_auc(&labels, &scores).is_err(), "single-class AUC must be an error")?;
            continue;
        }
        let mut wins = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let expected = wins / (pos * neg) as f64;
        let got = roc_auc(&labels, &scores).map_err(|e| e.to_string())?;
        check((got - expected).abs() <= 1e-12, format!("AUC {got} vs pairwise {expected}"))?;
        done += 1;
    }
    within(start.elapsed(), 10.0, "AUC")?;
    Ok(format!("200 tied instances agree, {:.3}s", start.elapsed().as_secs_f64()))
}

/// Components by explicit-stack flood fill, sorted by centroid.
fn flood_fill_components(mask: &[Vec<bool>]) -> Vec<(usize, f64, f64)> {
    let (rows, cols) = (mask.len(), mask[0].len());
    let mut seen = vec![vec![false; cols]; rows];
    let mut out = Vec::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask[r0][c0] || seen[r0][c0] {
                continue;
            }
            let mut stack = vec![(r0, c0)];
            seen[r0][c0] = true;
            let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
            while let Some((r, c)) = stack.pop() {
                n += 1;
                sr += r as f64;
                sc += c as f64;
                for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                        if mask[nr][nc] && !seen[nr][nc] {
                            seen[nr][nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            out.push((n, sr / n as f64, sc / n as f64));
        }
    }
    out.sort_by(|a, b| (a.1, a.2).partial_cmp(&(b.1, b.2)).unwrap());
    out
}

fn postprocess_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut components = 0;
    for _ in 0..100 {
        let (rows, cols) = (256, 384);
        let spacing = r.random_range(0.235..=0.8);
        let n = r.random_range(0..=6);
        let origins: Vec<Point> = (0..n)
            .map(|_| Point::new(r.random_range(0.0..255.0), r.random_range(0.0..383.0)))
            .collect();
        let discs = render_disc_mask(&origins, spacing, rows, cols).map_err(|e| e.to_string())?;
        let heatmap = Grid::from_fn(rows, cols, |y, x| {
            if discs.get(y, x) != 0 {
                0.5 + 0.5 * ((y * 31 + x * 17) % 97) as f32 / 97.0
            } else {
                0.49 * ((y * 13 + x * 7) % 89) as f32 / 89.0
            }
        });
        let mask: Vec<Vec<bool>> = (0..rows)
            .map(|y| (0..cols).map(|x| f64::from(heatmap.get(y, x)) >= 0.5).collect())
            .collect();
        let expected = flood_fill_components(&mask);
        let mut got: Vec<(usize, f64, f64)> = postprocess_heatmap(&heatmap, 0.5, 0)
            .iter()
            .map(|d| (d.component_size_px, d.row, d.col))
            .collect();
        got.sort_by(|a, b| (a.1, a.2).partial_cmp(&(b.1, b.2)).unwrap());
        check(got == expected, format!("components {got:?} vs oracle {expected:?}"))?;
        check(got.len() <= origins.len(), "more components than discs")?;
        components += got.len();
    }
    within(start.elapsed(), 20.0, "post-processing")?;
    Ok(format!("100 heatmaps, {components} components agree, {:.2}s", start.elapsed().as_secs_f64()))
}

fn sampling_balance() -> Outcome {
    let mut r = rng(6);
    let catalog: Vec<String> = (0..20).map(|i| format!("video{i:02}")).collect();
    let mut units = Vec::new();
    for v in &catalog {
        let (n_pos, n_neg) = (r.random_range(0..15), r.random_range(1..60));
        for k in 0..n_pos {
            units.push(Unit {
                id: UnitId::new(v.clone(), k),
                polarity: Polarity::Positive,
            });
        }
        for k in 0..n_neg {
            units.push(Unit {
                id: UnitId::new(v.clone(), 100 + k),
                polarity: Polarity::Negative,
            });
        }
    }
    let table = compute_sample_weights(&units, &catalog).map_err(|e| e.to_string())?;
    let pos = table.total(Polarity::Positive);
    let neg = table.total(Polarity::Negative);
    let rel = (pos - neg).abs() / pos.max(neg);
    check(rel <= 1e-9, format!("positive {pos} vs negative {neg} weight"))?;

    let positives: Vec<&UnitId> = units.iter().filter(|u| u.polarity == Polarity::Positive).map(|u| &u.id).collect();
    let negatives: Vec<&UnitId> = units.iter().filter(|u| u.polarity == Polarity::Negative).map(|u| &u.id).collect();
    let batches = make_epoch_schedule(&positives, &negatives, 32, 6).map_err(|e| e.to_string())?;
    let mut seen: Vec<&UnitId> = batches.iter().flat_map(|b| b.positives.iter().copied()).collect();
    seen.sort();
    let mut all = positives.clone();
    all.sort();
    check(seen == all, "epoch does not cover every positive exactly once")?;
    check(
        batches.iter().all(|b| b.positives.len() == b.negatives.len()),
        "unbalanced batch",
    )?;
    Ok(format!(
        "{} positives / {} negatives, relative gap {rel:.1e}, {} batches",
        positives.len(),
        negatives.len(),
        batches.len()
    ))
}

struct Scripted {
    losses: Vec<f64>,
    epoch: usize,
}

impl EpochRunner for Scripted {
    type Snapshot = usize;

    fn run_epoch(&mut self, epoch: usize, _lr: f64) -> bline_models::Result<f64> {
        self.epoch = epoch;
        Ok(0.0)
    }

    fn validation_loss(&mut self) -> bline_models::Result<f64> {
        Ok(self.losses[(self.epoch - 1).min(self.losses.len() - 1)])
    }

    fn snapshot(&self) -> usize {
        self.epoch
    }
}

/// Flat losses except for improvements at the given epochs.
fn improving_at(epochs: &[usize]) -> Vec<f64> {
    let mut level = 1.0;
    (1..=100)
        .map(|e| {
            if epochs.contains(&e) {
                level *= 0.5;
            }
            level
        })
        .collect()
}

fn schedule_semantics() -> Outcome {
    struct Case {
        name: &'static str,
        losses: Vec<f64>,
        max_epochs: usize,
        halved: Vec<usize>,
        last: usize,
        best: usize,
    }
    let mut tiny_gains = vec![1.0];
    tiny_gains.extend([1.0 - 5e-7; 40]);
    let cases = [
        Case { name: "plateau after 3", losses: improving_at(&[1, 2, 3]), max_epochs: 100, halved: vec![8], last: 13, best: 3 },
        Case { name: "late improvement", losses: improving_at(&[1, 7]), max_epochs: 100, halved: vec![6, 12], last: 17, best: 7 },
        Case { name: "two halvings", losses: improving_at(&[1, 2, 3, 12]), max_epochs: 100, halved: vec![8, 17], last: 22, best: 12 },
        Case { name: "sub-threshold gains", losses: tiny_gains, max_epochs: 100, halved: vec![6], last: 11, best: 1 },
        Case { name: "epoch cap", losses: improving_at(&(1..=4).chain(10..=12).collect::<Vec<_>>()), max_epochs: 20, halved: vec![9, 17], last: 20, best: 12 },
    ];
    for c in &cases {
        let sched = ScheduleConfig {
            learning_rate: 1e-3,
            max_epochs: c.max_epochs,
            lr_halving_patience: 5,
            early_stop_patience: 10,
        };
        let mut runner = Scripted { losses: c.losses.clone(), epoch: 0 };
        let (h, best): (History, Option<usize>) = run_schedule(&mut runner, &sched).map_err(|e| e.to_string())?;
        let got = (h.lr_halved_after.clone(), h.last_epoch(), best);
        let want = (c.halved.clone(), c.last, Some(c.best));
        check(got == want, format!("{}: got {got:?}, expected {want:?}", c.name))?;
        for rec in &h.epochs {
            let n = h.lr_halved_after.iter().filter(|&&e| e < rec.epoch).count();
            check(rec.learning_rate == 1e-3 / 2f64.powi(n as i32), format!("{}: lr trace", c.name))?;
        }
    }
    Ok(format!("{} scripted scenarios reproduce halving, stop and checkpoint epochs", cases.len()))
}

const E2E_SEED: u64 = 2024;
const E2E_FRAME_EPOCHS: usize = 6;
const E2E_PIXEL_EPOCHS: usize = 4;

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut cfg = DatasetConfig::new(40, 5, 0.5, E2E_SEED);
    cfg.frames_per_video = Some(40);
    let (dataset, _) = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    check(dataset.videos.len() == 200, "expected 200 videos")?;
    check(dataset.videos.iter().filter(|v| v.label).count() == 100, "expected 100 positive videos")?;
    check(dataset.videos.iter().all(|v| v.n_frames() == 40), "expected 40 frames per video")?;
    let split = build_patient_split(&dataset.patient_ids(), E2E_SEED).map_err(|e| e.to_string())?;
    let fold = 0;
    let subsets = [
        ("validation", videos_of(&dataset, &split.validation_patients(fold))),
        ("test", videos_of(&dataset, &split.test_set())),
    ];
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for (level, arch, epochs) in [
        (Level::Frame, TINY_FRAME_CNN, E2E_FRAME_EPOCHS),
        (Level::Pixel, TINY_PIXEL_UNET, E2E_PIXEL_EPOCHS),
    ] {
        let mut tc = TrainConfig::new(level, arch, arch);
        tc.learning_rate = 1e-3;
        tc.max_epochs = epochs;
        tc.seed = 7;
        let ckpt = train(&tc, &dataset, &split, fold).map_err(|e| e.to_string())?;
        let (records, detections) =
            predict_subsets(&[&ckpt.predictor], &subsets, arch, &InferenceConfig::default()).map_err(|e| e.to_string())?;
        let report = evaluate_detection(&records, None).map_err(|e| e.to_string())?;
        summary.push(format!("{level} AUC {:.3}", report.auc));
        if report.auc < 0.95 {
            failures.push(format!("{level} AUC {:.3} < 0.95", report.auc));
        }
        if level == Level::Pixel {
            let ids: Vec<String> = subsets[1].1.iter().map(|v| v.video_id.clone()).collect();
            let (_, loc) = evaluate_localization(&dataset, &detections, &ids).map_err(|e| e.to_string())?;
            summary.push(format!("localization F1 {:.3} (P {:.3}, R {:.3})", loc.f1, loc.precision, loc.recall));
            if loc.f1 < 0.80 {
                failures.push(format!("localization F1 {:.3} < 0.80", loc.f1));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    summary.push(format!("{:.0}s", elapsed));
    if elapsed > 1800.0 {
        failures.push(format!("runtime {elapsed:.0}s exceeds 30 min"));
    }
    if failures.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(format!("{} [{}]", failures.join("; "), summary.join(", ")))
    }
}

fn ensemble_and_fusion() -> Outcome {
    let mut cfg = DatasetConfig::new(6, 1, 1.0, 9);
    cfg.frames_per_video = Some(20);
    let (dataset, _) = generate_dataset(&cfg).map_err(|e| e.to_string())?;
    let video = &dataset.videos[0];
    let inference = InferenceConfig::default();
    for (level, arch) in [
        (Level::Clip, TINY_CLIP_CNN3D),
        (Level::Frame, TINY_FRAME_CNN),
        (Level::Pixel, TINY_PIXEL_UNET),
    ] {
        let model = build_model(level, arch, &ArchConfig::default(), 31).map_err(|e| e.to_string())?;
        let single = predict_video(&[&model], video, "m", Some("test"), &inference).map_err(|e| e.to_string())?;
        let five = predict_video(&[&model; 5], video, "m", Some("test"), &inference).map_err(|e| e.to_string())?;
        check(single == five, format!("{level}: five-copy ensemble differs from the single model"))?;
    }
    let mut rows = 0;
    for bits in 0..8u8 {
        let d = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
        let yes = d.iter().filter(|&&b| b).count();
        let majority = Some(yes >= 2);
        let unanimous = match yes {
            0 => Some(false),
            3 => Some(true),
            _ => None,
        };
        check(fuse_decisions(d, FusionMode::Majority) == majority, format!("majority {d:?}"))?;
        check(fuse_decisions(d, FusionMode::Unanimous) == unanimous, format!("unanimous {d:?}"))?;
        rows += 2;
    }
    Ok(format!("clip/frame/pixel ensembles exact, {rows} fusion truth-table rows"))
}

fn bline(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bline"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`bline {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn cli_pipeline(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let data = p("data");
    bline(&["synth", "--out", &data, "--patients", "12", "--videos-per-patient", "2", "--frames-per-video", "16", "--seed", "3"])?;
    bline(&["split", "--data", &data, "--seed", "3"])?;
    for (level, arch) in [("clip", TINY_CLIP_CNN3D), ("frame", TINY_FRAME_CNN), ("pixel", TINY_PIXEL_UNET)] {
        let model = p(&format!("models/{level}"));
        bline(&[
            "train", "--data", &data, "--level", level, "--arch", arch, "--out", &model, "--fold", "0", "--max-epochs",
            "1", "--batch-size", "4", "--learning-rate", "1e-3", "--seed", "5",
        ])?;
        let pred = p(&format!("pred/{level}"));
        bline(&["predict", "--data", &data, "--model", &format!("{model}/fold0"), "--out", &pred])?;
        let mut eval = vec!["evaluate", "--predictions"];
        let records = format!("{pred}/predictions.jsonl");
        eval.push(&records);
        let detections = format!("{pred}/detections.jsonl");
        if level == "pixel" {
            eval.extend(["--detections", &detections, "--data", &data]);
        }
        let report = p(&format!("reports/{level}"));
        eval.extend(["--out", &report]);
        bline(&eval)?;
    }
    bline(&[
        "fuse", "--clip", &p("pred/clip/predictions.jsonl"), "--frame", &p("pred/frame/predictions.jsonl"), "--pixel",
        &p("pred/pixel/predictions.jsonl"), "--mode", "unanimous", "--out", &p("fused"),
    ])?;
    bline(&["report", &p("reports/clip"), &p("reports/frame"), &p("reports/pixel")])
}

fn format_fidelity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli_pipeline(&a)?;
    cli_pipeline(&b)?;
    let mut compared = 0;
    for level in ["clip", "frame", "pixel"] {
        for file in ["reports/{}/report.json", "reports/{}/report.csv", "pred/{}/predictions.jsonl"] {
            let rel = file.replace("{}", level);
            let x = std::fs::read(a.join(&rel)).map_err(|e| format!("{rel}: {e}"))?;
            let y = std::fs::read(b.join(&rel)).map_err(|e| format!("{rel}: {e}"))?;
            check(x == y, format!("{rel} differs between identical runs"))?;
            compared += 1;
        }
        let records: Vec<PredictionRecord> =
            read_jsonl(&a.join(format!("pred/{level}/predictions.jsonl"))).map_err(|e| e.to_string())?;
        let report: Report = serde_json::from_slice(
            &std::fs::read(a.join(format!("reports/{level}/report.json"))).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let recomputed = evaluate_detection(&records, None).map_err(|e| e.to_string())?;
        check(
            (recomputed.auc, recomputed.f1, recomputed.threshold) == (report.auc, report.f1, report.threshold)
                && recomputed.per_video == report.per_video,
            format!("{level}: report disagrees with predictions.jsonl"),
        )?;
        check(records.iter().all(|r| r.validate().is_ok()), format!("{level}: invalid record"))?;
        let levels: BTreeSet<Level> = records.iter().map(|r| r.level).collect();
        check(levels.len() == 1, format!("{level}: mixed levels"))?;
        check(records.iter().all(|r| r.aggregation == Aggregation::Max || level == "pixel"), "aggregation")?;
    }
    for file in ["fused/fused.csv", "fused/summary.json"] {
        let x = std::fs::read(a.join(file)).map_err(|e| format!("{file}: {e}"))?;
        check(x == std::fs::read(b.join(file)).map_err(|e| e.to_string())?, format!("{file} differs"))?;
        compared += 1;
    }
    Ok(format!("two CLI runs byte-identical across {compared} artifacts; reports recomputed from predictions"))
}

fn main() {
    type Criterion = (usize, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "loss suite exactness", loss_exactness),
        (2, "gradient correctness", gradient_correctness),
        (3, "matching oracle equivalence", matching_oracle),
        (4, "AUC oracle equivalence", auc_oracle),
        (5, "post-processing determinism", postprocess_oracle),
        (6, "sampling balance", sampling_balance),
        (7, "schedule semantics", schedule_semantics),
        (8, "synthetic end-to-end", synthetic_end_to_end),
        (9, "ensemble and fusion identities", ensemble_and_fusion),
        (10, "format fidelity", format_fidelity),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |n: usize, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f == &n.to_string() || name.contains(f.as_str()))
    };
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected(n, name) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    if selected(11, "inter-observer agreement") {
        println!("criterion 11 inter-observer agreement: SKIPPED (optional; needs the clinical inter-observer subset, not available)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
