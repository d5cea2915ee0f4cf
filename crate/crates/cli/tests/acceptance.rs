//! Acceptance suite. One line per criterion; exits nonzero if any fails.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reefcond::ensemble::{ensemble_average, threshold_decide, DecisionConfig, PredictionSet, ProbabilityMatrix};
use reefcond::eval::{self, ClassCounts, ConfusionCounts};
use reefcond::fsutil::sha256_file;
use reefcond::ingest::{tile_grid, TilingConfig, PATCH_DIR};
use reefcond::manifest::{Manifest, PatchRecord, Split};
use reefcond::synthetic::write_synthetic_dataset;
use reefcond::train::{self, bce_multilabel_loss, bce_multilabel_loss_grad, BackboneRegistry, TrainConfig, TINY_NAME};
use reefcond::{LabelSchema, LabelVector};
use reefcond_pretrained::{architecture_parameter_count, head_shape, IMAGENET_CLASSES};

const METRIC_INSTANCES: usize = 1000;
const METRIC_ABS_TOL: f64 = 1e-12;
const METRIC_TIME_LIMIT: Duration = Duration::from_secs(10);
const ENSEMBLE_TRIPLES: usize = 500;
const ENSEMBLE_FIXED_POINT_TOL: f64 = 1e-12;
const LOSS_ANCHOR_TOL: f64 = 1e-12;
const SATURATED_LOSS_MAX: f64 = 1e-12;
const GRAD_INSTANCES: usize = 100;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const OVERFIT_PATCHES: usize = 32;
const OVERFIT_ITERATIONS: u64 = 2000;
const OVERFIT_MIN_MICRO_F1: f64 = 0.99;
const OVERFIT_TIME_LIMIT: Duration = Duration::from_secs(300);
/// Desk-scale learning rate for the tiny network.
const OVERFIT_LR: f64 = 3e-3;
const TILING_TUPLES: usize = 1000;
const ROUND_TRIP_CASES: usize = 200;
const PARAM_REL_TOL: f64 = 0.02;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_reefcond")
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(bin()).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`reefcond {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<LabelVector> {
    (0..n)
        .map(|_| LabelVector::from_bools(&(0..8).map(|_| rng.gen_bool(density)).collect::<Vec<_>>()))
        .collect()
}

// independent brute-force oracle over raw 0/1 cells
fn oracle(pred: &[LabelVector], truth: &[LabelVector]) -> (f64, f64, f64) {
    let f1 = |tp: u64, fp: u64, fnn: u64| {
        let den = 2 * tp + fp + fnn;
        if den == 0 {
            0.0
        } else {
            2.0 * tp as f64 / den as f64
        }
    };
    let (mut stp, mut sfp, mut sfn) = (0, 0, 0);
    let mut macro_sum = 0.0;
    for c in 0..8 {
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        for (p, t) in pred.iter().zip(truth) {
            match (p.flags()[c], t.flags()[c]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fnn += 1,
                _ => {}
            }
        }
        macro_sum += f1(tp, fp, fnn);
        stp += tp;
        sfp += fp;
        sfn += fnn;
    }
    let exact = pred.iter().zip(truth).filter(|(p, t)| (0..8).all(|c| p.flags()[c] == t.flags()[c])).count();
    (macro_sum / 8.0, f1(stp, sfp, sfn), exact as f64 / truth.len() as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..METRIC_INSTANCES {
        let n = rng.gen_range(1..=16);
        let density = rng.gen_range(0.05..0.95);
        let truth = random_labels(&mut rng, n, density);
        let pred = random_labels(&mut rng, n, density);
        let counts = eval::confusion_counts(&pred, &truth).map_err(|e| e.to_string())?;
        let got = (
            eval::macro_f1(&eval::class_f1(&counts)),
            eval::micro_f1(&counts).f1,
            eval::match_ratio(&pred, &truth).map_err(|e| e.to_string())?,
        );
        let want = oracle(&pred, &truth);
        for (g, w) in [(got.0, want.0), (got.1, want.1), (got.2, want.2)] {
            worst = worst.max((g - w).abs());
            check((g - w).abs() <= METRIC_ABS_TOL, || format!("instance {i}: {got:?} vs oracle {want:?}"))?;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < METRIC_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("{METRIC_INSTANCES} instances, max |diff| {worst:.1e} <= {METRIC_ABS_TOL:e}, {elapsed:.2?}"))
}

fn fn_fp_ratios() -> Outcome {
    let rows = [
        ("HLC", 185, 242, "0.76"),
        ("CPC", 374, 250, "1.50"),
        ("DDC", 388, 363, "1.07"),
        ("RBL", 230, 121, "1.90"),
        ("CPT", 266, 73, "3.64"),
        ("DSE", 146, 105, "1.39"),
        ("PRD", 40, 19, "2.11"),
        ("PHY", 208, 130, "1.60"),
    ];
    let counts = ConfusionCounts {
        sample_count: 0,
        classes: rows.iter().map(|&(_, fnn, fp, _)| ClassCounts { tp: 0, fp, fn_: fnn, tn: 0 }).collect(),
    };
    let table = eval::fn_fp_table(&counts, &LabelSchema::coral());
    let got: Vec<String> = table.iter().map(|r| r.ratio_display()).collect();
    let want: Vec<&str> = rows.iter().map(|r| r.3).collect();
    check(got == want, || format!("{got:?} != {want:?}"))?;

    // same numbers through the CLI's CSV path
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv: String = std::iter::once("class,fn,fp\n".to_string())
        .chain(rows.iter().map(|(c, fnn, fp, _)| format!("{c},{fnn},{fp}\n")))
        .collect();
    std::fs::write(tmp.path().join("counts.csv"), csv).map_err(|e| e.to_string())?;
    let stdout = run_cli(&["analyze", "--counts", "counts.csv"], tmp.path())?;
    let cli: Vec<&str> = stdout.lines().skip(1).filter_map(|l| l.split_whitespace().last()).collect();
    check(cli == want, || format!("cli column {cli:?}"))?;
    Ok(format!("ratio column {} (exact, library and CLI)", want.join("/")))
}

fn matrix(ids: &[String], rng: &mut ChaCha8Rng, extreme: bool) -> ProbabilityMatrix {
    let values = (0..ids.len() * 8)
        .map(|_| if extreme && rng.gen_bool(0.2) { rng.gen_range(0..=1) as f64 } else { rng.gen::<f64>() })
        .collect();
    ProbabilityMatrix::new(ids.to_vec(), 8, values).expect("valid matrix")
}

fn ensemble_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_fixed_dev: f64 = 0.0;
    for t in 0..ENSEMBLE_TRIPLES {
        let n = rng.gen_range(1..12);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
        let members: Vec<ProbabilityMatrix> = (0..3).map(|_| matrix(&ids, &mut rng, true)).collect();
        let mean = ensemble_average(&members).map_err(|e| e.to_string())?;
        for cell in 0..n * 8 {
            let lo = members.iter().map(|m| m.values()[cell]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m.values()[cell]).fold(f64::NEG_INFINITY, f64::max);
            let v = mean.values()[cell];
            check(lo <= v && v <= hi, || format!("triple {t} cell {cell}: {v} outside [{lo}, {hi}]"))?;
        }
        for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let permuted: Vec<ProbabilityMatrix> = order.iter().map(|&i| members[i].clone()).collect();
            let other = ensemble_average(&permuted).map_err(|e| e.to_string())?;
            let same = other.values().iter().zip(mean.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || format!("triple {t}: order {order:?} changes bits"))?;
        }
        // rows of one member shuffled: alignment is by patch id
        let mut rows: Vec<(String, Vec<f64>)> = members[1].iter().map(|(id, r)| (id.to_string(), r.to_vec())).collect();
        rows.shuffle(&mut rng);
        let shuffled = vec![members[0].clone(), ProbabilityMatrix::from_rows(rows).map_err(|e| e.to_string())?, members[2].clone()];
        let aligned = ensemble_average(&shuffled).map_err(|e| e.to_string())?;
        check(aligned == mean, || format!("triple {t}: row shuffle changed the mean"))?;

        let same = vec![members[0].clone(); 3];
        let fixed = ensemble_average(&same).map_err(|e| e.to_string())?;
        for (a, b) in fixed.values().iter().zip(members[0].values()) {
            max_fixed_dev = max_fixed_dev.max((a - b).abs());
        }
        check(max_fixed_dev <= ENSEMBLE_FIXED_POINT_TOL, || format!("triple {t}: identical members drift {max_fixed_dev:e}"))?;
    }
    Ok(format!(
        "{ENSEMBLE_TRIPLES} triples: bounded, bit-identical under all 6 orders, identical-member drift {max_fixed_dev:.1e} <= {ENSEMBLE_FIXED_POINT_TOL:e}"
    ))
}

fn loss_gradient() -> Outcome {
    let loss = |z: &[f64], y: &[u8]| bce_multilabel_loss(z, y, 1).map_err(|e| e.to_string());
    let ln2 = loss(&[0.0], &[1])?;
    check((ln2 - std::f64::consts::LN_2).abs() <= LOSS_ANCHOR_TOL, || format!("z=0,y=1 gives {ln2}"))?;
    for (z, y) in [(40.0, 1u8), (-40.0, 0), (700.0, 1), (-700.0, 0), (1e6, 1)] {
        let l = loss(&[z], &[y])?;
        check((0.0..SATURATED_LOSS_MAX).contains(&l), || format!("saturated z={z},y={y} gives {l}"))?;
    }
    for (z, y) in [(700.0, 0u8), (-700.0, 1)] {
        let l = loss(&[z], &[y])?;
        check(l.is_finite() && (l - 700.0).abs() < 1e-9, || format!("wrong-side z={z},y={y} gives {l}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for inst in 0..GRAD_INSTANCES {
        let rows = rng.gen_range(1..=4);
        let z: Vec<f64> = (0..rows * 8).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let y: Vec<u8> = (0..rows * 8).map(|_| rng.gen_range(0..=1)).collect();
        let (_, grad) = bce_multilabel_loss_grad(&z, &y, 8).map_err(|e| e.to_string())?;
        let cells = z.len() as f64;
        for i in 0..z.len() {
            let sig = 1.0 / (1.0 + (-z[i]).exp());
            let closed = (sig - y[i] as f64) / cells;
            check(((grad[i] - closed) / closed).abs() <= GRAD_REL_TOL, || format!("instance {inst}: grad {} vs sigma-y {closed}", grad[i]))?;
            let mut zp = z.clone();
            zp[i] += FD_STEP;
            let mut zm = z.clone();
            zm[i] -= FD_STEP;
            let fd = (bce_multilabel_loss(&zp, &y, 8).unwrap() - bce_multilabel_loss(&zm, &y, 8).unwrap()) / (2.0 * FD_STEP);
            let rel = ((fd - grad[i]) / grad[i]).abs();
            worst = worst.max(rel);
            check(rel <= GRAD_REL_TOL, || format!("instance {inst} cell {i}: fd {fd} vs analytic {}", grad[i]))?;
        }
    }
    Ok(format!("ln 2 anchor, saturation < {SATURATED_LOSS_MAX:e}; {GRAD_INSTANCES} instances, max rel FD error {worst:.1e} <= {GRAD_REL_TOL:e}"))
}

fn tiny_overfit() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("syn");
    let manifest = write_synthetic_dataset(&data, OVERFIT_PATCHES, 64, 7, Split::Train).map_err(|e| e.to_string())?;
    let registry = BackboneRegistry::builtin();
    let spec = registry.spec(TINY_NAME).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: OVERFIT_LR,
        weight_decay: 0.0,
        iterations: OVERFIT_ITERATIONS,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train::train(&manifest, &data.join(PATCH_DIR), &registry, &spec, &cfg).map_err(|e| e.to_string())?;
    let records: Vec<&PatchRecord> = manifest.records.iter().collect();
    let probs = train::predict_records(&out.artifact, &records, &data.join(PATCH_DIR)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let predicted: Vec<LabelVector> = threshold_decide(&probs, &DecisionConfig::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| r.labels)
        .collect();
    let truth: Vec<LabelVector> = records.iter().map(|r| r.labels.clone()).collect();
    let f1 = eval::micro_f1(&eval::confusion_counts(&predicted, &truth).map_err(|e| e.to_string())?).f1;
    check(f1 >= OVERFIT_MIN_MICRO_F1, || format!("train micro F1 {f1}"))?;
    check(elapsed < OVERFIT_TIME_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{OVERFIT_PATCHES} patches, {OVERFIT_ITERATIONS} iterations: micro F1 {f1:.4} >= {OVERFIT_MIN_MICRO_F1}, {elapsed:.1?}"
    ))
}

// tiles needed to cover each axis: keep every stride step whose tile fits,
// and when partial tiles are kept, one more if the last one stops short
fn brute_offsets(extent: u32, tile: u32, stride: u32, drop_partial: bool) -> Vec<u32> {
    let mut out = Vec::new();
    let mut x = 0u32;
    loop {
        let fits = x as u64 + tile as u64 <= extent as u64;
        let needed = !drop_partial && (x == 0 || (x - stride) as u64 + (tile as u64) < extent as u64);
        if fits || needed {
            out.push(x);
            x += stride;
        } else {
            break;
        }
    }
    out
}

fn tiling_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for i in 0..TILING_TUPLES {
        let tile = rng.gen_range(1..=600);
        let stride = rng.gen_range(1..=tile);
        let w = rng.gen_range(1..=5000);
        let h = rng.gen_range(1..=5000);
        let drop = rng.gen_bool(0.5);
        let cfg = TilingConfig::new(tile, stride, drop).map_err(|e| e.to_string())?;
        let grid = tile_grid(w, h, &cfg).map_err(|e| e.to_string())?;
        let (xs, ys) = (brute_offsets(w, tile, stride, drop), brute_offsets(h, tile, stride, drop));
        let want: Vec<(u32, u32, u32, u32)> = ys
            .iter()
            .enumerate()
            .flat_map(|(r, &y)| xs.iter().enumerate().map(move |(c, &x)| (r as u32, c as u32, x, y)))
            .collect();
        let got: Vec<(u32, u32, u32, u32)> = grid.iter().map(|s| (s.row, s.col, s.x, s.y)).collect();
        check(got == want, || format!("tuple {i} ({w}x{h}, tile {tile}, stride {stride}, drop {drop}): {} vs {} tiles", got.len(), want.len()))?;
    }
    let survey = tile_grid(4000, 3000, &TilingConfig::default()).map_err(|e| e.to_string())?;
    check(survey.len() == 35, || format!("4000x3000 gives {} tiles", survey.len()))?;
    Ok(format!("{TILING_TUPLES} tuples match brute force; 4000x3000 @ 512/512 -> {} tiles", survey.len()))
}

fn determinism_atomicity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let io = |e: std::io::Error| e.to_string();
    for (name, tint) in [("a.png", 30u8), ("b.png", 200)] {
        RgbImage::from_fn(1024, 1024, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, tint]))
            .save(dir.join(name))
            .map_err(|e| e.to_string())?;
    }
    std::fs::write(dir.join("labels.csv"), "image,site,labels\na.png,HWB,HLC;CPC\nb.png,SKI,DDC\n").map_err(io)?;
    for out in ["i1", "i2"] {
        run_cli(&["ingest", "--images", ".", "--labels", "labels.csv", "--out", out], dir)?;
    }
    let digest = |p: &str| sha256_file(&dir.join(p)).map_err(io);
    check(digest("i1/manifest.jsonl")? == digest("i2/manifest.jsonl")?, || "ingest manifests differ".into())?;

    run_cli(&["synth", "--out", "syn", "--count", "24", "--side", "32", "--seed", "4"], dir)?;
    for out in ["s1.jsonl", "s2.jsonl"] {
        run_cli(&["split", "--manifest", "syn/manifest.jsonl", "--out", out, "--seed", "11", "--granularity", "patch"], dir)?;
    }
    check(digest("s1.jsonl")? == digest("s2.jsonl")?, || "splits differ".into())?;
    let patches = dir.join("syn").join(PATCH_DIR);
    let patches = patches.to_str().ok_or("non-UTF-8 path")?;
    for out in ["t1", "t2"] {
        run_cli(
            &["train", "--manifest", "s1.jsonl", "--patches", patches, "--backbone", "tiny", "--out", out, "--iterations", "50", "--seed", "5", "--log-every", "0"],
            dir,
        )?;
    }
    check(digest("t1/training.log")? == digest("t2/training.log")?, || "training logs differ".into())?;
    check(digest("t1/weights.safetensors")? == digest("t2/weights.safetensors")?, || "weights differ".into())?;

    // failed ingest: no output directory, no staging leftovers
    std::fs::write(dir.join("bad.png"), b"not a png").map_err(io)?;
    std::fs::write(dir.join("bad.csv"), "image,site,labels\na.png,HWB,HLC\nbad.png,HWB,HLC\n").map_err(io)?;
    check(run_cli(&["ingest", "--images", ".", "--labels", "bad.csv", "--out", "bad"], dir).is_err(), || "bad ingest succeeded".into())?;
    check(!dir.join("bad").exists(), || "failed ingest left an output directory".into())?;

    // killed mid-training: the checkpoint directory never appears
    let mut child = Command::new(bin())
        .args(["train", "--manifest", "s1.jsonl", "--patches", patches, "--backbone", "tiny", "--out", "killed", "--iterations", "100000000", "--log-every", "0"])
        .current_dir(dir)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(io)?;
    std::thread::sleep(Duration::from_millis(1500));
    let finished = child.try_wait().map_err(io)?.is_some();
    child.kill().map_err(io)?;
    child.wait().map_err(io)?;
    check(!finished, || "training finished before it could be killed".into())?;
    check(!dir.join("killed").exists(), || "killed training left a checkpoint".into())?;
    let leftovers: Vec<String> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(".reefcond-"))
        .collect();
    check(leftovers.is_empty(), || format!("staging leftovers {leftovers:?}"))?;
    Ok("ingest/split/train outputs byte-identical across runs; failed and SIGKILLed commands leave no output".into())
}

fn random_manifest(rng: &mut ChaCha8Rng) -> Manifest {
    let sites = ["HWB", "AOM", "TTB", "ALK", "HNM", "SKI", "TCB", "CBK", "SWP", "UNK"];
    let mut m = Manifest::new(LabelSchema::coral());
    for img in 0..rng.gen_range(1..5) {
        let site = sites[rng.gen_range(0..sites.len())];
        let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(1..4));
        for r in 0..rows {
            for c in 0..cols {
                let mut bits: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.3)).collect();
                bits[rng.gen_range(0..8)] = true;
                m.records.push(PatchRecord {
                    patch_id: format!("IMG_{img:04}_r{r}_c{c}"),
                    source_image: format!("IMG_{img:04}.JPG"),
                    site_code: site.to_string(),
                    grid_row: r,
                    grid_col: c,
                    labels: LabelVector::from_bools(&bits),
                    split: [Split::Train, Split::Test, Split::Unassigned][rng.gen_range(0..3)],
                });
            }
        }
    }
    m
}

fn round_trip() -> Outcome {
    let schema = LabelSchema::coral();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut probs_checked = 0usize;
    for case in 0..ROUND_TRIP_CASES {
        let m = random_manifest(&mut rng);
        let first = m.to_bytes();
        let back = Manifest::read_from(first.as_slice(), &schema).map_err(|e| e.to_string())?;
        check(back.to_bytes() == first, || format!("manifest case {case}: second write differs"))?;

        let ids: Vec<String> = m.records.iter().map(|r| r.patch_id.clone()).collect();
        let raw = matrix(&ids, &mut rng, true);
        let threshold = rng.gen_range(0.05..0.95);
        let set = PredictionSet::new(
            threshold,
            threshold_decide(&raw, &DecisionConfig::new(threshold).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?,
        );
        let first = set.to_bytes(&schema).map_err(|e| e.to_string())?;
        let read = PredictionSet::read_from(first.as_slice(), &schema).map_err(|e| e.to_string())?;
        let second = read.to_bytes(&schema).map_err(|e| e.to_string())?;
        check(first == second, || format!("prediction case {case}: second write differs"))?;
        check(read.threshold == threshold, || format!("case {case}: threshold {threshold} read back as {}", read.threshold))?;
        for (orig, got) in set.records.iter().zip(&read.records) {
            for (p, q) in orig.probs.iter().zip(&got.probs) {
                let quantized = (p * 1e6).round() / 1e6;
                check((q - quantized).abs() < 1e-12 && (q - p).abs() <= 5e-7 + 1e-15, || format!("case {case}: {p} stored as {q}"))?;
                probs_checked += 1;
            }
        }
        let text = String::from_utf8(first).map_err(|e| e.to_string())?;
        for line in text.lines().skip(1) {
            let inner = line.split("\"probs\":[").nth(1).and_then(|s| s.split(']').next()).ok_or("no probs array")?;
            check(inner.split(',').all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 6)), || format!("case {case}: {inner}"))?;
        }
    }
    Ok(format!("{ROUND_TRIP_CASES} manifests and prediction files byte-stable; {probs_checked} probabilities at 6 decimals"))
}

fn parameter_counts() -> Outcome {
    let e = |e: reefcond::train::TrainError| e.to_string();
    let mut parts = Vec::new();
    for (name, nominal, feat) in [("resnet18", 11.7e6, 512usize), ("resnet50", 25.6e6, 2048)] {
        let reference = architecture_parameter_count(name, IMAGENET_CLASSES).map_err(e)?;
        let rel = (reference as f64 - nominal).abs() / nominal;
        check(rel <= PARAM_REL_TOL, || format!("{name}: {reference} vs {nominal} ({:.2}%)", rel * 100.0))?;
        let (in_features, head) = head_shape(name, 8).map_err(e)?;
        check(in_features == feat && head == (feat * 8 + 8) as u64, || format!("{name}: head {in_features} -> {head}"))?;
        let trained = architecture_parameter_count(name, 8).map_err(e)?;
        check(trained == reference - (feat as u64 * 1000 + 1000) + head, || format!("{name}: 8-way total {trained}"))?;
        parts.push(format!(
            "{name} {} ({:+.2}% vs {:.1}M; 8-way model {}, head {head} = {feat}*8+8)",
            reference,
            (reference as f64 - nominal) / nominal * 100.0,
            nominal / 1e6,
            trained
        ));
    }
    Ok(parts.join("; "))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", metric_oracle),
        ("FN/FP ratio column", fn_fp_ratios),
        ("ensemble algebra", ensemble_algebra),
        ("loss and gradient", loss_gradient),
        ("desk-scale overfit", tiny_overfit),
        ("tiling law", tiling_law),
        ("determinism and atomicity", determinism_atomicity),
        ("round-trip fidelity", round_trip),
        ("parameter-count reporting", parameter_counts),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
