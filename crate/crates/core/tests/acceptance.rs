//! End-to-end acceptance checks on MNIST. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! Run with `cargo test -p impressions-core --test acceptance`. Trains the
//! classifier twice (about three minutes each on one core).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use impressions::diffnet::{evaluate, gradient_check, train_classifier, Architecture, NetworkWeights, TrainParams};
use impressions::idx::{load_mnist, Dataset};
use impressions::image_core::{dataset_mean, init_canvas, write_image};
use impressions::metrics_report::{emit_report, measure, median, softmax, top_k, RunMetrics, DEFAULT_PERCENTILE};
use impressions::region_mask::{circ, most_activated_center, radius_at, RadiusSchedule};
use impressions::saliency_lr::{normalize_lr_map, ramp_coefficient, update_cumulative, CumulativeGradient, RampSchedule};
use impressions::synthesizer::{write_trace, PhaseMode, RunResult, SynthesisConfig, Synthesizer};
use impressions::transforms::TransformParams;
use impressions::tv_reg::{tv_gradient, tv_value, TvConfig, TvWeight};
use impressions::{Field, ImageTensor, PixelCoord, Shape};

mod common;
use common::{brute_force_center, naive_tv};

// Pinned tolerances.
const GRADCHECK_EPSILON: f64 = 1e-3;
const GRADCHECK_SAMPLES: usize = 200;
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_SECONDS: f64 = 60.0;
const TV_FD_TOL: f64 = 1e-6;
const TRAIN_ACCURACY: f64 = 0.95;
const TRAIN_SECONDS: f64 = 600.0;
const ARGMAX_MIN: usize = 9;
const TV_REDUCTION: f64 = 0.20;
const LR_NORM_TOL: f64 = 1e-9;
const FUSION_TOP2_MIN: usize = 7;
const ITERATIONS: usize = 200;
const SIZE: usize = 28;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

struct Trained {
    net: NetworkWeights,
    mean: ImageTensor,
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_field(shape: Shape, r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Field {
    Field::from_vec(shape, (0..shape.len()).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn desk_config() -> SynthesisConfig {
    SynthesisConfig::scaled(SIZE, ITERATIONS)
}

fn argmax(v: &[f64]) -> usize {
    top_k(v, 1)[0]
}

fn c1_gradcheck(t: &Trained) -> Check {
    let start = Instant::now();
    let probe = init_canvas(&t.mean, 64.0, 0).map_err(|e| e.to_string())?.to_field();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for class in 0..10 {
        let r = gradient_check(&t.net, &probe, class, GRADCHECK_EPSILON, GRADCHECK_SAMPLES, class as u64)
            .map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < GRADCHECK_TOL && secs < GRADCHECK_SECONDS && checked >= GRADCHECK_SAMPLES,
        format!("max rel error {worst:.2e} (< {GRADCHECK_TOL:.0e}) over {checked} elements, {secs:.1}s"),
    ))
}

fn c2_tv() -> Check {
    let mut r = rng(2);
    let mut exact = 0;
    for _ in 0..100 {
        let shape = Shape::new(r.random_range(1..32), r.random_range(1..32), if r.random::<bool>() { 3 } else { 1 });
        let f = random_field(shape, &mut r, 0.0, 255.0);
        exact += (tv_value(shape, f.data()).to_bits() == naive_tv(shape, f.data()).to_bits()) as usize;
    }
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..10 {
        let shape = Shape::new(8, 8, 1);
        let f = random_field(shape, &mut r, 0.0, 255.0);
        let g = tv_gradient(shape, f.data());
        for i in 0..shape.len() {
            let gap = f.data().iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| (v - f.data()[i]).abs()).fold(f64::INFINITY, f64::min);
            if gap < 1e-3 {
                continue;
            }
            let eps = gap / 4.0;
            let (mut plus, mut minus) = (f.data().to_vec(), f.data().to_vec());
            plus[i] += eps;
            minus[i] -= eps;
            let numeric = (naive_tv(shape, &plus) - naive_tv(shape, &minus)) / (2.0 * eps);
            let a = g.data()[i];
            let rel = if a == 0.0 && numeric.abs() < 1e-9 { 0.0 } else { (a - numeric).abs() / a.abs().max(numeric.abs()) };
            worst = worst.max(rel);
            compared += 1;
        }
    }
    Ok(outcome(
        exact == 100 && worst < TV_FD_TOL,
        format!("{exact}/100 exact values; gradient max rel error {worst:.1e} (< {TV_FD_TOL:.0e}) over {compared} elements"),
    ))
}

fn c3_train(train: &Dataset, test: &Dataset) -> Result<(Outcome, Option<NetworkWeights>), String> {
    let params = TrainParams::default();
    let start = Instant::now();
    let report = train_classifier(Architecture::mnist(), train, Some(test), &params, |_, _| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let acc = report.test_accuracy.unwrap_or(0.0);
    let again = train_classifier(Architecture::mnist(), train, None, &params, |_, _| {}).map_err(|e| e.to_string())?;
    let same = again.weights == report.weights && again.weights.params_digest() == report.weights.params_digest();
    let cross = evaluate(&again.weights, test);
    Ok((
        outcome(
            acc >= TRAIN_ACCURACY && secs <= TRAIN_SECONDS && same,
            format!(
                "held-out accuracy {acc:.4} (>= {TRAIN_ACCURACY}) in {secs:.0}s (<= {TRAIN_SECONDS:.0}s); retrain bit-identical: {same} (acc {cross:.4})"
            ),
        ),
        Some(report.weights),
    ))
}

fn run_all(t: &Trained, cfg: &SynthesisConfig) -> Result<Vec<RunResult>, String> {
    let s = Synthesizer::new(&t.net, t.mean.clone()).map_err(|e| e.to_string())?;
    (0..10)
        .map(|c| s.run(&SynthesisConfig { target_class: c, ..cfg.clone() }).map_err(|e| e.to_string()))
        .collect()
}

fn c4_ascent(ci: &[RunResult]) -> Check {
    let increased = ci.iter().filter(|r| r.final_target_logit() > r.initial_target_logit()).count();
    let argmax_ok = ci.iter().filter(|r| r.final_argmax() == r.target_class()).count();
    Ok(outcome(
        increased == 10 && argmax_ok >= ARGMAX_MIN,
        format!("ci mode, {ITERATIONS} iterations: logit increased {increased}/10, target is argmax {argmax_ok}/10 (>= {ARGMAX_MIN})"),
    ))
}

fn c5_tv_effect(t: &Trained, ci: &[RunResult]) -> Check {
    let base = desk_config();
    assert_eq!(base.tv, TvConfig { lambda1: TvWeight::AUTO, period_k: 1, ..TvConfig::default() });
    let off = run_all(t, &SynthesisConfig { phase_mode: PhaseMode::CiBaseline, tv: TvConfig::disabled(), ..base })?;
    let mut worst_ratio: f64 = 0.0;
    let mut argmax_ok = 0;
    for (on, off) in ci.iter().zip(&off) {
        let ratio = tv_value(on.image.shape(), on.image.data()) / tv_value(off.image.shape(), off.image.data());
        worst_ratio = worst_ratio.max(ratio);
        argmax_ok += (on.final_argmax() == on.target_class()) as usize;
    }
    let reduction = 1.0 - worst_ratio;
    Ok(outcome(
        reduction >= TV_REDUCTION && argmax_ok == 10,
        format!("smallest TV reduction over 10 classes {:.1}% (>= {:.0}%), target still argmax {argmax_ok}/10", reduction * 100.0, TV_REDUCTION * 100.0),
    ))
}

fn c6_saliency(pre: &[RunResult]) -> Check {
    let sched = RampSchedule::default();
    let endpoints = ramp_coefficient(0, &sched) == 0.0
        && ramp_coefficient(sched.t, &sched) == 4.0
        && ramp_coefficient(10 * sched.t, &sched) == 4.0;
    let mut worst: f64 = 0.0;
    for r in pre {
        for rec in &r.trace {
            worst = worst.max((rec.lr_norm - 1.0).abs());
        }
        if let Some(map) = &r.pre_lr_map {
            worst = worst.max((map.values().l2_norm() - 1.0).abs());
        }
    }
    // Positive scaling of every gradient leaves the map unchanged.
    let shape = Shape::new(10, 10, 1);
    let mut r = rng(6);
    let (mut a, mut b) = (CumulativeGradient::zero(shape), CumulativeGradient::zero(shape));
    let mut scale_err: f64 = 0.0;
    for _ in 0..50 {
        let g = random_field(shape, &mut r, -1.0, 1.0);
        let k = 10f64.powf(r.random_range(-4.0..4.0));
        a = update_cumulative(&a, &g, &sched).map_err(|e| e.to_string())?;
        b = update_cumulative(&b, &g.scale(k), &sched).map_err(|e| e.to_string())?;
        let (ma, mb) = (normalize_lr_map(&a), normalize_lr_map(&b));
        for (x, y) in ma.values().data().iter().zip(mb.values().data()) {
            scale_err = scale_err.max((x - y).abs());
        }
    }
    Ok(outcome(
        endpoints && worst <= LR_NORM_TOL && scale_err <= 1e-12,
        format!("ramp endpoints exact: {endpoints}; max |norm - 1| {worst:.1e} over every pre iteration; scaling drift {scale_err:.1e}"),
    ))
}

fn c7_region() -> Check {
    let mut mismatches = 0;
    for seed in 0..100 {
        let lr = random_field(Shape::new(16, 16, 1), &mut rng(seed), -1.0, 1.0);
        let got = most_activated_center(&lr, 3.0).map_err(|e| e.to_string())?;
        mismatches += (got != brute_force_center(&lr, 3.0)) as usize;
    }
    Ok(outcome(mismatches == 0, format!("{mismatches} mismatches on 100 random 16x16 maps, r = 3")))
}

fn c8_radius() -> Check {
    let mut ok = true;
    for s in [RadiusSchedule::default(), desk_config().region] {
        ok &= radius_at(0, &s) == s.r0 && s.r0 == 1.0;
        ok &= radius_at(s.ramp_iters, &s) == s.r_max;
        ok &= (s.ramp_iters..s.ramp_iters + 500).all(|i| radius_at(i, &s) == s.r_max);
    }
    Ok(outcome(ok, "1 at i = 0, r_max at ramp end and after, for reference and desk schedules"))
}

fn c9_locality(t: &Trained) -> Check {
    let cfg = SynthesisConfig { transforms: TransformParams::disabled(), ..desk_config() };
    let s = Synthesizer::new(&t.net, t.mean.clone()).map_err(|e| e.to_string())?.with_snapshots();
    let mut violations = 0;
    let mut checked = 0;
    for class in 0..10 {
        let r = s.sci(&SynthesisConfig { target_class: class, ..cfg.clone() }).map_err(|e| e.to_string())?;
        let (center, start) = (r.center.expect("center"), r.post_initial.as_ref().expect("post canvas"));
        for (rec, img) in r.trace.iter().zip(&r.snapshots).skip(cfg.iterations_pre) {
            let mask = circ(center, rec.radius.expect("radius"), SIZE, SIZE).map_err(|e| e.to_string())?;
            for row in 0..SIZE {
                for col in 0..SIZE {
                    if !mask.contains(row, col) && img.get(row, col, 0).to_bits() != start.get(row, col, 0).to_bits() {
                        violations += 1;
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(outcome(violations == 0, format!("{violations} out-of-disk changes over {checked} post-phase iterations (10 classes)")))
}

fn metrics_for(t: &Trained, runs: &[RunResult], mode: &str) -> Result<Vec<(RunMetrics, ImageTensor)>, String> {
    runs.iter()
        .map(|r| {
            let id = format!("{mode}-c{}", r.target_class());
            let m = measure(&t.net, &r.image, r.target_class(), &id, mode, DEFAULT_PERCENTILE).map_err(|e| e.to_string())?;
            Ok((m, r.image.clone()))
        })
        .collect()
}

fn c10_single_object(t: &Trained, ci: &[RunResult], sci: &[RunResult], out: &std::path::Path) -> Check {
    let mut entries = metrics_for(t, ci, "ci")?;
    entries.extend(metrics_for(t, sci, "sci")?);
    let count = |mode: &str| -> Vec<f64> {
        entries.iter().filter(|(m, _)| m.mode == mode).map(|(m, _)| m.salient_components as f64).collect()
    };
    let (ci_c, sci_c) = (count("ci"), count("sci"));
    let (mci, msci) = (median(&ci_c), median(&sci_c));
    let (table, _) = emit_report(&entries, out).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(&table).map_err(|e| e.to_string())?.lines().count() - 1;
    Ok(outcome(
        msci <= mci && rows == 20,
        format!("median salient components: sci {msci} <= ci {mci}; report table with {rows} rows at {}", table.display()),
    ))
}

fn c11_fusion(t: &Trained, sci: &[RunResult]) -> Check {
    let mut r = rng(11);
    let mut classes: Vec<usize> = (0..10).collect();
    let pairs: Vec<(usize, usize)> = (0..10)
        .map(|_| {
            classes.shuffle(&mut r);
            (classes[0], classes[1])
        })
        .collect();
    let s = Synthesizer::new(&t.net, t.mean.clone()).map_err(|e| e.to_string())?;
    let (seed_a, seed_b) = (PixelCoord::new(SIZE / 2, SIZE / 4), PixelCoord::new(SIZE / 2, 3 * SIZE / 4));
    let mut top2_ok = 0;
    let (mut fused_conf, mut single_conf) = (Vec::new(), Vec::new());
    let mut listing = Vec::new();
    for &(a, b) in &pairs {
        let f = s.fuse(a, b, seed_a, seed_b, &desk_config()).map_err(|e| e.to_string())?;
        let p = softmax(&f.final_logits);
        let top = top_k(&p, 2);
        let ok = (top[0] == a && top[1] == b) || (top[0] == b && top[1] == a);
        top2_ok += ok as usize;
        fused_conf.push(p[top[0]]);
        let single = softmax(&sci[a].final_logits);
        single_conf.push(single[argmax(&single)]);
        listing.push(format!("{a}+{b}{}", if ok { "" } else { "x" }));
    }
    let (mf, ms) = (median(&fused_conf), median(&single_conf));
    Ok(outcome(
        top2_ok >= FUSION_TOP2_MIN && mf < ms,
        format!(
            "top-2 = {{a,b}} for {top2_ok}/10 (>= {FUSION_TOP2_MIN}) [{}]; median top-1 confidence fused {mf:.4} < single {ms:.6}",
            listing.join(" ")
        ),
    ))
}

fn c12_determinism(t: &Trained, root: &std::path::Path) -> Check {
    let s = Synthesizer::new(&t.net, t.mean.clone()).map_err(|e| e.to_string())?;
    let mut dirs = Vec::new();
    for rep in 0..2 {
        let dir = root.join(format!("rep{rep}"));
        let mut entries = Vec::new();
        for (mode, class) in [(PhaseMode::CiBaseline, 3), (PhaseMode::FullSci, 3), (PhaseMode::FullSci, 7)] {
            let cfg = SynthesisConfig { target_class: class, phase_mode: mode, seed: 7, ..desk_config() };
            let r = s.run(&cfg).map_err(|e| e.to_string())?;
            let id = format!("{}-c{class}", mode.short_name());
            let run_dir = dir.join(&id);
            std::fs::create_dir_all(&run_dir).map_err(|e| e.to_string())?;
            write_image(&r.image, run_dir.join("image.png")).map_err(|e| e.to_string())?;
            write_trace(&r.trace, run_dir.join("trace.jsonl")).map_err(|e| e.to_string())?;
            let m = measure(&t.net, &r.image, class, &id, mode.short_name(), DEFAULT_PERCENTILE).map_err(|e| e.to_string())?;
            entries.push((m, r.image));
        }
        emit_report(&entries, &dir).map_err(|e| e.to_string())?;
        dirs.push(dir);
    }
    let mut files = 0;
    let mut differing = Vec::new();
    for entry in walk(&dirs[0]) {
        let rel = entry.strip_prefix(&dirs[0]).expect("prefix");
        let (a, b) = (std::fs::read(&entry), std::fs::read(dirs[1].join(rel)));
        files += 1;
        if a.is_err() || a.ok() != b.ok() {
            differing.push(rel.display().to_string());
        }
    }
    Ok(outcome(
        differing.is_empty() && files == 8,
        format!("{files} files (images, traces, report table, montage) byte-identical across two runs; differing: {differing:?}"),
    ))
}

fn walk(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect()).unwrap_or_default();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn report(results: &mut Vec<(usize, &'static str, bool)>, n: usize, name: &'static str, check: Check) {
    let (pass, detail) = match check {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("[{}] {n:>2}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push((n, name, pass));
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, 2, "TV correctness", c2_tv());
    report(&mut results, 7, "region search oracle", c7_region());
    report(&mut results, 8, "radius schedule", c8_radius());

    let trained = match load_mnist(data_dir()) {
        Err(e) => {
            report(&mut results, 3, "toy classifier", Err(format!("MNIST unavailable under {}: {e}", data_dir().display())));
            None
        }
        Ok((train, test)) => {
            let mean = dataset_mean(train.images.iter()).expect("non-empty");
            match c3_train(&train, &test) {
                Ok((o, w)) => {
                    report(&mut results, 3, "toy classifier", Ok(o));
                    w.map(|net| Trained { net, mean })
                }
                Err(e) => {
                    report(&mut results, 3, "toy classifier", Err(e));
                    None
                }
            }
        }
    };

    const MODEL_CRITERIA: [(usize, &str); 8] = [
        (1, "gradient check"),
        (4, "ascent efficacy"),
        (5, "TV effect"),
        (6, "saliency learning rate"),
        (9, "mask locality"),
        (10, "single-object proxy"),
        (11, "fusion"),
        (12, "determinism"),
    ];
    if trained.is_none() {
        for (n, name) in MODEL_CRITERIA {
            report(&mut results, n, name, Err("no trained classifier".into()));
        }
    }
    if let Some(t) = &trained {
        let out = tempfile::tempdir().expect("tempdir");
        report(&mut results, 1, "gradient check", c1_gradcheck(t));
        let base = desk_config();
        let runs = |mode| run_all(t, &SynthesisConfig { phase_mode: mode, ..base.clone() });
        match (runs(PhaseMode::CiBaseline), runs(PhaseMode::PreOnly), runs(PhaseMode::FullSci)) {
            (Ok(ci), Ok(pre), Ok(sci)) => {
                report(&mut results, 4, "ascent efficacy", c4_ascent(&ci));
                report(&mut results, 5, "TV effect", c5_tv_effect(t, &ci));
                report(&mut results, 6, "saliency learning rate", c6_saliency(&pre));
                report(&mut results, 9, "mask locality", c9_locality(t));
                report(&mut results, 10, "single-object proxy", c10_single_object(t, &ci, &sci, &out.path().join("report")));
                report(&mut results, 11, "fusion", c11_fusion(t, &sci));
            }
            (a, b, c) => {
                let e = [a.err(), b.err(), c.err()].into_iter().flatten().next().unwrap_or_default();
                for (n, name) in MODEL_CRITERIA.into_iter().filter(|(n, _)| ![1, 12].contains(n)) {
                    report(&mut results, n, name, Err(e.clone()));
                }
            }
        }
        report(&mut results, 12, "determinism", c12_determinism(t, &out.path().join("determinism")));
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2).map(|r| format!("{}. {}", r.0, r.1)).collect();
    println!("{} / {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
