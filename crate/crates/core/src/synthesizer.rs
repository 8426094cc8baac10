//! Synthesis loops: class-impression baseline, saliency-driven pre phase,
//! single-object (masked, region-growing) phase and two-class fusion.
//!
//! Every iteration follows the same order:
//!
//! 1. logits and input gradient of the active class,
//! 2. ascent step `I += base_step · rate ⊙ grad` (rate is uniform, or the
//!    lagged saliency map, optionally masked by the growing disk),
//! 3. on iterations `i % k == 0`, a TV descent step through the same mask,
//! 4. a random transform, when enabled for the phase,
//! 5. the saliency state absorbs this iteration's gradient.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::Classifier;
use crate::error::{Error, Result};
use crate::image_core::{init_canvas, Field, ImageTensor, PixelCoord, Shape};
use crate::region_mask::{apply_mask, circ, most_activated_center, radius_at, RadiusSchedule};
use crate::saliency_lr::{normalize_lr_map, update_cumulative, CumulativeGradient, LrMap, RampSchedule};
use crate::transforms::{apply_transform, sample_transform, TransformParams, TransformSample};
use crate::tv_reg::{tv_gradient, tv_value, TvConfig, TvWeight};

/// Iteration budget and canvas size the schedule defaults are quoted at.
pub const REFERENCE_ITERATIONS: usize = 500;
pub const REFERENCE_SIZE: usize = 224;

const TRANSFORM_STREAM: u64 = 0x7472_616e_7366_6f72;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    CiBaseline,
    PreOnly,
    FullSci,
}

impl PhaseMode {
    pub fn short_name(self) -> &'static str {
        match self {
            PhaseMode::CiBaseline => "ci",
            PhaseMode::PreOnly => "pre",
            PhaseMode::FullSci => "sci",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostInit {
    FreshCanvas,
    ContinuePre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanvasInit {
    DatasetMean,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSchedule {
    pub blocks_per_class: usize,
    /// Iterations per block; `None` means `iterations_post / 4`.
    pub block_len_a: Option<usize>,
    pub block_len_b: Option<usize>,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        FusionSchedule { blocks_per_class: 2, block_len_a: None, block_len_b: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub target_class: usize,
    pub phase_mode: PhaseMode,
    /// Iterations of the unmasked phase (also the whole baseline run).
    pub iterations_pre: usize,
    /// Iterations of the masked phase.
    pub iterations_post: usize,
    /// Intensity units per unit of `rate · gradient`.
    pub base_step: f64,
    pub init: CanvasInit,
    pub constant_fill: f64,
    /// Width of the `U[0, a]` noise added to the starting canvas.
    pub noise_amplitude: f64,
    pub post_init: PostInit,
    pub seed: u64,
    pub tv: TvConfig,
    pub saliency: RampSchedule,
    pub region: RadiusSchedule,
    pub transforms: TransformParams,
    pub fusion: FusionSchedule,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self::scaled(28, 200)
    }
}

impl SynthesisConfig {
    /// Schedules quoted for a 224-pixel canvas and 500 iterations per phase.
    pub fn reference() -> Self {
        SynthesisConfig {
            target_class: 0,
            phase_mode: PhaseMode::FullSci,
            iterations_pre: REFERENCE_ITERATIONS,
            iterations_post: REFERENCE_ITERATIONS,
            base_step: 1.0,
            init: CanvasInit::DatasetMean,
            constant_fill: 128.0,
            noise_amplitude: 255.0,
            post_init: PostInit::FreshCanvas,
            seed: 0,
            tv: TvConfig::default(),
            saliency: RampSchedule::default(),
            region: RadiusSchedule::default(),
            transforms: TransformParams::default(),
            fusion: FusionSchedule::default(),
        }
    }

    /// Reference schedules rescaled to a `size`-pixel canvas and `iterations`
    /// per phase: lengths by `iterations / 500`, radii by `size / 224`.
    pub fn scaled(size: usize, iterations: usize) -> Self {
        let reference = Self::reference();
        let time = iterations as f64 / REFERENCE_ITERATIONS as f64;
        let space = size as f64 / REFERENCE_SIZE as f64;
        let len = |n: usize| ((n as f64 * time).round() as usize).max(1);
        let r_max = reference.region.r_max * space;
        SynthesisConfig {
            iterations_pre: iterations,
            iterations_post: iterations,
            base_step: 10000.0,
            noise_amplitude: 64.0,
            transforms: TransformParams::jitter_only(),
            saliency: RampSchedule { t: len(reference.saliency.t), ..reference.saliency },
            region: RadiusSchedule {
                r0: reference.region.r0,
                r_max,
                ramp_iters: len(reference.region.ramp_iters),
                selection_radius: r_max / 10.0,
            },
            ..reference
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations_pre == 0 || self.iterations_post == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if !(self.base_step > 0.0) || !self.base_step.is_finite() {
            return Err(Error::Config(format!("base_step must be > 0, got {}", self.base_step)));
        }
        if !(self.noise_amplitude >= 0.0) {
            return Err(Error::Config("noise_amplitude must be >= 0".into()));
        }
        if !(0.0..=255.0).contains(&self.constant_fill) {
            return Err(Error::Config("constant_fill must lie in [0, 255]".into()));
        }
        self.tv.validate()?;
        self.saliency.validate()?;
        self.region.validate()?;
        self.transforms.validate()?;
        Ok(())
    }

    fn fusion_lengths(&self) -> (usize, usize) {
        let default = self.iterations_post / 4;
        (self.fusion.block_len_a.unwrap_or(default), self.fusion.block_len_b.unwrap_or(default))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ci,
    Pre,
    Post,
    Fusion,
}

/// One iteration of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based across the whole run.
    pub iteration: usize,
    pub phase: Phase,
    pub class: usize,
    /// 1-based within the class's current schedule.
    pub local_iteration: usize,
    /// Target logit at the start of the iteration.
    pub target_logit: f64,
    /// TV of the image at the end of the iteration.
    pub tv_value: f64,
    pub radius: Option<f64>,
    pub lr_degenerate: bool,
    pub lr_max: f64,
    pub lr_norm: f64,
    pub tv_applied: bool,
    pub lambda1: Option<f64>,
    pub transform_id: Option<u64>,
    pub transform: Option<TransformSample>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub image: ImageTensor,
    pub trace: Vec<TraceRecord>,
    pub config: SynthesisConfig,
    pub model_fingerprint: String,
    pub initial_logits: Vec<f64>,
    pub final_logits: Vec<f64>,
    /// Effective TV weight (after calibration, if any).
    pub lambda1: Option<f64>,
    /// Region center chosen from the pre-phase map.
    pub center: Option<PixelCoord>,
    /// Final pre-phase image and learning-rate map (single-object runs).
    pub pre_image: Option<ImageTensor>,
    pub pre_lr_map: Option<LrMap>,
    /// Canvas the masked phase started from.
    pub post_initial: Option<ImageTensor>,
    /// Image after each iteration, aligned with `trace`; empty unless
    /// requested.
    pub snapshots: Vec<ImageTensor>,
}

impl RunResult {
    pub fn target_class(&self) -> usize {
        self.config.target_class
    }

    pub fn initial_target_logit(&self) -> f64 {
        self.initial_logits[self.config.target_class]
    }

    pub fn final_target_logit(&self) -> f64 {
        self.final_logits[self.config.target_class]
    }

    pub fn final_argmax(&self) -> usize {
        crate::diffnet::LogitVector(self.final_logits.clone()).argmax()
    }
}

/// `clamp(img + base_step · rates ⊙ grad)`.
pub fn ascend_step(img: &ImageTensor, grad: &Field, rates: &Field, base_step: f64) -> Result<ImageTensor> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    img.add_scaled(&rates.hadamard(grad)?, base_step)
}

/// `clamp(img − step · λ1 · (mask ⊙ ∇TV(img)))`.
pub fn tv_step(img: &ImageTensor, lambda1: f64, step: f64, mask: Option<&Field>) -> Result<ImageTensor> {
    let mut g = tv_gradient(img.shape(), img.data());
    if let Some(m) = mask {
        g = g.hadamard(m)?;
    }
    img.add_scaled(&g, -step * lambda1)
}

/// Per-class state carried across blocks.
struct ClassState {
    class: usize,
    center: Option<PixelCoord>,
    saliency: Option<CumulativeGradient>,
    local: usize,
}

struct Run<'m, M: Classifier + ?Sized> {
    model: &'m M,
    cfg: &'m SynthesisConfig,
    shape: Shape,
    image: ImageTensor,
    trace: Vec<TraceRecord>,
    lambda1: Option<f64>,
    rng: ChaCha8Rng,
    draws: u64,
    snapshots: Option<Vec<ImageTensor>>,
}

impl<M: Classifier + ?Sized> Run<'_, M> {
    fn block(&mut self, st: &mut ClassState, iterations: usize, phase: Phase, transforms: bool) -> Result<()> {
        let cfg = self.cfg;
        let sign_mode = cfg.saliency.lr_sign_mode;
        for _ in 0..iterations {
            st.local += 1;
            let i = st.local;
            let (logits, grad) = self.model.input_gradient(&self.image, st.class)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("input gradient at iteration {i}")));
            }
            let map = match &st.saliency {
                Some(cum) if i > 1 => normalize_lr_map(cum),
                _ => LrMap::uniform(self.shape),
            };
            let mut rates = map.rates(sign_mode);
            let mut mask_field = None;
            let mut radius = None;
            if let Some(center) = st.center {
                let r = radius_at(i - 1, &cfg.region);
                let mask = circ(center, r, self.shape.height, self.shape.width)?;
                rates = apply_mask(&rates, &mask)?;
                mask_field = Some(mask.to_field(self.shape.channels));
                radius = Some(r);
            }
            let delta = rates.hadamard(&grad)?;
            let ascent_max = cfg.base_step * delta.max_abs();
            let before = self.image.clone();
            self.image = self.image.add_scaled(&delta, cfg.base_step)?;

            let tv_applied = cfg.tv.applies_at(i);
            if tv_applied {
                let lambda = self.resolve_lambda(&before, mask_field.as_ref(), ascent_max)?;
                if lambda > 0.0 {
                    self.image = tv_step(&self.image, lambda, cfg.base_step, mask_field.as_ref())?;
                }
            }

            let (mut transform_id, mut transform) = (None, None);
            if transforms && cfg.transforms.enabled {
                let sample = sample_transform(&cfg.transforms, self.shape, &mut self.rng);
                self.draws += 1;
                transform_id = Some(self.draws);
                if !sample.is_identity() {
                    self.image = apply_transform(&self.image, &sample)?;
                }
                transform = Some(sample);
            }

            if let Some(cum) = &st.saliency {
                st.saliency = Some(update_cumulative(cum, &grad, &cfg.saliency)?);
            }

            let target_logit = logits.get(st.class);
            if !target_logit.is_finite() {
                return Err(Error::NonFinite("target logit".into()));
            }
            self.trace.push(TraceRecord {
                iteration: self.trace.len() + 1,
                phase,
                class: st.class,
                local_iteration: i,
                target_logit,
                tv_value: tv_value(self.shape, self.image.data()),
                radius,
                lr_degenerate: map.is_degenerate(),
                lr_max: rates.max_abs(),
                lr_norm: rates.l2_norm(),
                tv_applied,
                lambda1: self.lambda1,
                transform_id,
                transform,
            });
            if let Some(snaps) = &mut self.snapshots {
                snaps.push(self.image.clone());
            }
        }
        Ok(())
    }

    /// Fixed weight, or the frozen auto-calibrated one. Calibration happens
    /// at the first TV iteration where both step sizes are non-zero.
    fn resolve_lambda(&mut self, img: &ImageTensor, mask: Option<&Field>, ascent_max: f64) -> Result<f64> {
        match self.cfg.tv.lambda1 {
            TvWeight::Fixed(l) => {
                self.lambda1 = Some(l);
                Ok(l)
            }
            TvWeight::Auto(_) => {
                if let Some(l) = self.lambda1 {
                    return Ok(l);
                }
                let mut g = tv_gradient(img.shape(), img.data());
                if let Some(m) = mask {
                    g = g.hadamard(m)?;
                }
                let tv_max = self.cfg.base_step * g.max_abs();
                if tv_max > 0.0 && ascent_max > 0.0 {
                    let l = self.cfg.tv.auto_ratio * ascent_max / tv_max;
                    self.lambda1 = Some(l);
                    Ok(l)
                } else {
                    Ok(0.0)
                }
            }
        }
    }
}

/// Runs synthesis against any [`Classifier`], starting from `mean`.
pub struct Synthesizer<'m, M: Classifier + ?Sized> {
    model: &'m M,
    mean: ImageTensor,
    snapshots: bool,
}

impl<'m, M: Classifier + ?Sized> Synthesizer<'m, M> {
    pub fn new(model: &'m M, mean: ImageTensor) -> Result<Self> {
        if mean.shape() != model.input_shape() {
            return Err(Error::shape(model.input_shape(), mean.shape()));
        }
        Ok(Synthesizer { model, mean, snapshots: false })
    }

    /// Keep the image after every iteration in [`RunResult::snapshots`].
    pub fn with_snapshots(mut self) -> Self {
        self.snapshots = true;
        self
    }

    pub fn model(&self) -> &M {
        self.model
    }

    /// Starting canvas for a config: base image plus seeded noise.
    pub fn initial_canvas(&self, cfg: &SynthesisConfig) -> Result<ImageTensor> {
        let base = match cfg.init {
            CanvasInit::DatasetMean => self.mean.clone(),
            CanvasInit::Constant => ImageTensor::filled(self.mean.shape(), cfg.constant_fill)?,
        };
        init_canvas(&base, cfg.noise_amplitude, cfg.seed)
    }

    fn check(&self, cfg: &SynthesisConfig, classes: &[usize]) -> Result<()> {
        cfg.validate()?;
        for &c in classes {
            if c >= self.model.num_classes() {
                return Err(Error::InvalidArgument(format!("class {c} outside [0, {})", self.model.num_classes())));
            }
        }
        Ok(())
    }

    fn start<'a>(&self, cfg: &'a SynthesisConfig) -> Result<Run<'a, M>>
    where
        'm: 'a,
    {
        Ok(Run {
            model: self.model,
            cfg,
            shape: self.mean.shape(),
            image: self.initial_canvas(cfg)?,
            trace: Vec::new(),
            lambda1: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ TRANSFORM_STREAM),
            draws: 0,
            snapshots: self.snapshots.then(Vec::new),
        })
    }

    fn finish(&self, run: Run<'_, M>, cfg: &SynthesisConfig, initial: Vec<f64>) -> Result<RunResult> {
        let final_logits = self.model.forward_logits(&run.image)?.0;
        Ok(RunResult {
            image: run.image,
            trace: run.trace,
            config: cfg.clone(),
            model_fingerprint: self.model.fingerprint(),
            initial_logits: initial,
            final_logits,
            lambda1: run.lambda1,
            center: None,
            pre_image: None,
            pre_lr_map: None,
            post_initial: None,
            snapshots: run.snapshots.unwrap_or_default(),
        })
    }

    /// Dispatches on `cfg.phase_mode`.
    pub fn run(&self, cfg: &SynthesisConfig) -> Result<RunResult> {
        match cfg.phase_mode {
            PhaseMode::CiBaseline => self.ci_baseline(cfg),
            PhaseMode::PreOnly => self.pre_ci(cfg).map(|(r, _)| r),
            PhaseMode::FullSci => self.sci(cfg),
        }
    }

    /// Uniform learning rate, no mask, `iterations_pre` iterations.
    pub fn ci_baseline(&self, cfg: &SynthesisConfig) -> Result<RunResult> {
        self.check(cfg, &[cfg.target_class])?;
        let mut run = self.start(cfg)?;
        let initial = self.model.forward_logits(&run.image)?.0;
        let mut st = ClassState { class: cfg.target_class, center: None, saliency: None, local: 0 };
        run.block(&mut st, cfg.iterations_pre, Phase::Ci, true)?;
        self.finish(run, cfg, initial)
    }

    /// Saliency-driven rates, no mask. Also returns the map built from the
    /// state after the last iteration.
    pub fn pre_ci(&self, cfg: &SynthesisConfig) -> Result<(RunResult, LrMap)> {
        self.check(cfg, &[cfg.target_class])?;
        let mut run = self.start(cfg)?;
        let initial = self.model.forward_logits(&run.image)?.0;
        let mut st = ClassState {
            class: cfg.target_class,
            center: None,
            saliency: Some(CumulativeGradient::zero(run.shape)),
            local: 0,
        };
        run.block(&mut st, cfg.iterations_pre, Phase::Pre, true)?;
        let map = normalize_lr_map(st.saliency.as_ref().expect("saliency state"));
        let mut result = self.finish(run, cfg, initial)?;
        result.pre_lr_map = Some(map.clone());
        Ok((result, map))
    }

    /// Pre phase, region selection, then the masked phase from the chosen
    /// center with a fresh saliency state and schedules restarted.
    pub fn sci(&self, cfg: &SynthesisConfig) -> Result<RunResult> {
        self.check(cfg, &[cfg.target_class])?;
        let mut run = self.start(cfg)?;
        let start_canvas = run.image.clone();
        let initial = self.model.forward_logits(&run.image)?.0;
        let mut pre = ClassState {
            class: cfg.target_class,
            center: None,
            saliency: Some(CumulativeGradient::zero(run.shape)),
            local: 0,
        };
        run.block(&mut pre, cfg.iterations_pre, Phase::Pre, true)?;
        let map = normalize_lr_map(pre.saliency.as_ref().expect("saliency state"));
        let center = most_activated_center(map.values(), cfg.region.selection_radius)?;
        let pre_image = run.image.clone();
        if cfg.post_init == PostInit::FreshCanvas {
            run.image = start_canvas;
        }
        let post_initial = run.image.clone();
        let mut post = ClassState {
            class: cfg.target_class,
            center: Some(center),
            saliency: Some(CumulativeGradient::zero(run.shape)),
            local: 0,
        };
        run.block(&mut post, cfg.iterations_post, Phase::Post, cfg.transforms.in_masked_phase)?;
        let mut result = self.finish(run, cfg, initial)?;
        result.center = Some(center);
        result.pre_image = Some(pre_image);
        result.pre_lr_map = Some(map);
        result.post_initial = Some(post_initial);
        Ok(result)
    }

    /// Masked, saliency-driven development of `class` grown from `center`
    /// on a fresh canvas.
    pub fn masked(&self, class: usize, center: PixelCoord, iterations: usize, cfg: &SynthesisConfig) -> Result<RunResult> {
        let cfg = SynthesisConfig { target_class: class, ..cfg.clone() };
        self.check(&cfg, &[class])?;
        self.check_seed(center)?;
        let mut run = self.start(&cfg)?;
        let initial = self.model.forward_logits(&run.image)?.0;
        let post_initial = run.image.clone();
        let mut st = ClassState { class, center: Some(center), saliency: Some(CumulativeGradient::zero(run.shape)), local: 0 };
        run.block(&mut st, iterations, Phase::Post, cfg.transforms.in_masked_phase)?;
        let mut result = self.finish(run, &cfg, initial)?;
        result.center = Some(center);
        result.post_initial = Some(post_initial);
        Ok(result)
    }

    fn check_seed(&self, p: PixelCoord) -> Result<()> {
        if !self.mean.shape().contains(p) {
            return Err(Error::InvalidArgument(format!("seed {p} outside the canvas")));
        }
        Ok(())
    }

    /// Alternating masked blocks for two classes grown from two seeds:
    /// `a, b, a, b, ...` with `fusion.blocks_per_class` blocks each. Each
    /// class keeps its own saliency state and schedule position across
    /// blocks. `target_class` of the result is `class_a`.
    pub fn fuse(
        &self,
        class_a: usize,
        class_b: usize,
        seed_a: PixelCoord,
        seed_b: PixelCoord,
        cfg: &SynthesisConfig,
    ) -> Result<RunResult> {
        if class_a == class_b {
            return Err(Error::InvalidArgument("fusion needs two different classes".into()));
        }
        if seed_a == seed_b {
            return Err(Error::InvalidArgument(format!("fusion seeds must differ, both are {seed_a}")));
        }
        let cfg = SynthesisConfig { target_class: class_a, ..cfg.clone() };
        self.check(&cfg, &[class_a, class_b])?;
        self.check_seed(seed_a)?;
        self.check_seed(seed_b)?;
        let (len_a, len_b) = cfg.fusion_lengths();
        let mut run = self.start(&cfg)?;
        let initial = self.model.forward_logits(&run.image)?.0;
        let post_initial = run.image.clone();
        let fresh = || Some(CumulativeGradient::zero(run.shape));
        let mut a = ClassState { class: class_a, center: Some(seed_a), saliency: fresh(), local: 0 };
        let mut b = ClassState { class: class_b, center: Some(seed_b), saliency: fresh(), local: 0 };
        let transforms = cfg.transforms.in_masked_phase;
        for _ in 0..cfg.fusion.blocks_per_class {
            run.block(&mut a, len_a, Phase::Fusion, transforms)?;
            run.block(&mut b, len_b, Phase::Fusion, transforms)?;
        }
        let mut result = self.finish(run, &cfg, initial)?;
        result.post_initial = Some(post_initial);
        Ok(result)
    }
}

/// One JSON object per line.
pub fn write_trace(trace: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in trace {
        let line = serde_json::to_string(rec).expect("trace records serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::corrupt(path, e.to_string())))
        .collect()
}
