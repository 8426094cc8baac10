use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use impressions::config::CliConfig;
use impressions::diffnet::{gradient_check, load_weights, save_weights, train_classifier, Architecture, Classifier, NetworkWeights};
use impressions::idx::load_mnist;
use impressions::image_core::{dataset_mean, init_canvas, load_tensor, read_image, save_tensor, tensor_digest, write_image};
use impressions::metrics_report::{emit_report, measure, softmax, top_k, RunMetrics};
use impressions::synthesizer::{write_trace, RunResult, Synthesizer};
use impressions::{Error, ImageTensor, PixelCoord};

use crate::{Cli, CliError, Command, FuseArgs, GradcheckArgs, ModelArgs, ReportArgs, SynthesizeArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

/// Quoted TOML basic string (JSON string escapes are a subset).
fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", toml_string(&out.to_string_lossy())));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("output.workers={w}"));
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(s) = a.seed {
                overrides.push(format!("train.seed={s}"));
            }
        }
        Command::Synthesize(a) => {
            if let Some(m) = a.mode {
                overrides.push(format!("synthesis.phase_mode={}", m.phase_mode()));
            }
            if let Some(s) = a.seed {
                overrides.push(format!("synthesis.seed={s}"));
            }
            if let Some(n) = a.iterations {
                overrides.push(format!("synthesis.iterations_pre={n}"));
                overrides.push(format!("synthesis.iterations_post={n}"));
            }
        }
        Command::Fuse(a) => {
            if let Some(s) = a.seed {
                overrides.push(format!("synthesis.seed={s}"));
            }
        }
        Command::Gradcheck(_) | Command::Report(_) => {}
    }
    overrides.extend(cli.set.iter().cloned());
    let cfg = CliConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Train(a) => train(&cfg, a),
        Command::Synthesize(a) => synthesize(&cfg, a),
        Command::Fuse(a) => fuse(&cfg, a),
        Command::Gradcheck(a) => gradcheck(&cfg, a),
        Command::Report(a) => report(a),
    }
}

fn mean_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".mean");
    PathBuf::from(s)
}

fn load_model(args: &ModelArgs) -> Result<(NetworkWeights, ImageTensor)> {
    let net = load_weights(&args.weights)?;
    let mean = load_tensor(args.mean.clone().unwrap_or_else(|| mean_path(&args.weights)))?;
    Ok((net, mean))
}

fn train(cfg: &CliConfig, args: &TrainArgs) -> Result<()> {
    let (mut train, test) = load_mnist(&args.data)?;
    if let Some(n) = args.limit {
        train = train.take(n);
    }
    let mean = dataset_mean(train.images.iter())?;
    println!("training on {} images, {} epochs", train.len(), cfg.train.epochs);
    let report = train_classifier(Architecture::mnist(), &train, Some(&test), &cfg.train, |epoch, loss| {
        println!("epoch {epoch}: mean loss {loss:.5}");
    })?;
    save_weights(&report.weights, &args.weights)?;
    save_tensor(&mean, mean_path(&args.weights))?;
    if let Some(acc) = report.test_accuracy {
        println!("held-out accuracy {:.4}", acc);
    }
    println!("fingerprint {}", report.weights.fingerprint());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct Summary<'a> {
    target_class: usize,
    center: Option<PixelCoord>,
    lambda1: Option<f64>,
    initial_logits: &'a [f64],
    final_logits: &'a [f64],
    final_softmax: Vec<f64>,
    top2: Vec<usize>,
}

/// Image, trace, effective config, fingerprints and metrics of one run.
fn write_run(
    dir: &Path,
    cfg: &CliConfig,
    result: &RunResult,
    model: &NetworkWeights,
    mean: &ImageTensor,
    run_id: &str,
    mode: &str,
) -> Result<RunMetrics> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_image(&result.image, dir.join("image.png"))?;
    if let Some(pre) = &result.pre_image {
        write_image(pre, dir.join("pre.png"))?;
    }
    write_trace(&result.trace, dir.join("trace.jsonl"))?;
    let mut effective = cfg.clone();
    effective.synthesis = result.config.clone();
    write_text(&dir.join("config.toml"), &effective.to_toml())?;
    write_text(
        &dir.join("fingerprint.txt"),
        &format!("weights {}\nmean {}\n", result.model_fingerprint, tensor_digest(mean)),
    )?;
    let metrics = measure(model, &result.image, result.target_class(), run_id, mode, cfg.metrics.percentile)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    let probs = softmax(&result.final_logits);
    write_json(
        &dir.join("summary.json"),
        &Summary {
            target_class: result.target_class(),
            center: result.center,
            lambda1: result.lambda1,
            initial_logits: &result.initial_logits,
            final_logits: &result.final_logits,
            top2: top_k(&probs, 2),
            final_softmax: probs,
        },
    )?;
    Ok(metrics)
}

fn synthesize(cfg: &CliConfig, args: &SynthesizeArgs) -> Result<()> {
    let (net, mean) = load_model(&args.model)?;
    let classes: Vec<usize> =
        if args.classes.is_empty() { (0..net.num_classes()).collect() } else { args.classes.clone() };
    let synth = Synthesizer::new(&net, mean.clone())?;
    let mode = cfg.synthesis.phase_mode.short_name();
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..cfg.output.workers.min(classes.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&class) = classes.get(k) else { break };
                let run_id = format!("{mode}-c{class}-s{}", cfg.synthesis.seed);
                let outcome = (|| -> Result<RunMetrics> {
                    let mut sc = cfg.synthesis.clone();
                    sc.target_class = class;
                    let result = synth.run(&sc)?;
                    write_run(&cfg.output.dir.join(&run_id), cfg, &result, &net, &mean, &run_id, mode)
                })();
                match outcome {
                    Ok(m) => println!(
                        "{run_id}: logit {:.4} confidence {:.4} tv {:.1} components {}",
                        m.target_logit, m.softmax_confidence, m.tv_energy, m.salient_components
                    ),
                    Err(e) => failures.lock().expect("lock").push((k, e)),
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("lock");
    failures.sort_by_key(|(k, _)| *k);
    match failures.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn fuse(cfg: &CliConfig, args: &FuseArgs) -> Result<()> {
    let (net, mean) = load_model(&args.model)?;
    let synth = Synthesizer::new(&net, mean.clone())?;
    let seed_a = PixelCoord::new(args.seed_a.0, args.seed_a.1);
    let seed_b = PixelCoord::new(args.seed_b.0, args.seed_b.1);
    let result = synth.fuse(args.class_a, args.class_b, seed_a, seed_b, &cfg.synthesis)?;
    let run_id = format!("fuse-a{}-b{}-s{}", args.class_a, args.class_b, cfg.synthesis.seed);
    write_run(&cfg.output.dir.join(&run_id), cfg, &result, &net, &mean, &run_id, "fuse")?;
    let probs = softmax(&result.final_logits);
    let top = top_k(&probs, 2);
    println!(
        "{run_id}: top-2 classes {} ({:.4}), {} ({:.4})",
        top[0], probs[top[0]], top[1], probs[top[1]]
    );
    Ok(())
}

fn gradcheck(cfg: &CliConfig, args: &GradcheckArgs) -> Result<()> {
    let (net, mean) = load_model(&args.model)?;
    let probe = init_canvas(&mean, cfg.synthesis.noise_amplitude, args.seed)?.to_field();
    let classes: Vec<usize> =
        if args.classes.is_empty() { (0..net.num_classes()).collect() } else { args.classes.clone() };
    let mut worst: f64 = 0.0;
    for &c in &classes {
        let r = gradient_check(&net, &probe, c, args.epsilon, args.samples, args.seed)?;
        println!(
            "class {c}: max relative error {:.3e} over {} elements ({} excluded at kinks)",
            r.max_rel_error, r.checked, r.excluded
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if worst >= args.tolerance {
        return Err(CliError::GradCheck(worst, args.tolerance));
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let dir = &args.runs;
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(CliError::Usage(format!("no run directories under {}", dir.display())));
    }
    let mut entries = Vec::new();
    for d in subdirs {
        let path = d.join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunMetrics = serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        entries.push((m, read_image(d.join("image.png"))?));
    }
    let (table, montage) = emit_report(&entries, dir)?;
    println!("{} runs -> {} and {}", entries.len(), table.display(), montage.display());
    Ok(())
}
