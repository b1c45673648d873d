//! Two-phase optimization of prime images.
//!
//! Phase 1 drives every text-targeted derived image with score distillation
//! and every image-targeted one with the dream-target loss against its static
//! image. Phase 2 walks a descending list of refresh strengths: at each
//! strength the text targets are regenerated once from the current derived
//! images, then `steps_per_target` gradient steps regress every derived image
//! onto its target.
//!
//! All progress lives in [`RunState`], which checkpoints to a versioned JSON
//! document. A run interrupted at any gradient step and resumed from its
//! checkpoint continues exactly as the uninterrupted run would have.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrangements::{backward_all, derive_all, IllusionSpec};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceBackend, Img2ImgConfig};
use crate::image::RgbImage;
use crate::losses::{
    dream_target_loss_grad, score_distillation_grad, total_weighted_loss, LossReport, Phase,
    TimestepWeighting,
};
use crate::parametric_image::ParametricImage;
use crate::targets::{refresh_targets, DreamTargetState, TargetSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// `[0.90, 0.89, ..., 0.02, 0.01]`
pub fn default_strengths() -> Vec<f64> {
    (1..=90).rev().map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub phase1_steps: u64,
    /// Refresh strengths of phase 2, strictly decreasing within `(0, 1)`.
    pub phase2_strengths: Vec<f64>,
    pub steps_per_target: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sd_weighting: TimestepWeighting,
    pub img2img: Img2ImgConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            phase1_steps: 500,
            phase2_strengths: default_strengths(),
            steps_per_target: 1000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            sd_weighting: TimestepWeighting::Unit,
            img2img: Img2ImgConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn diagnostics(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (i, s) in self.phase2_strengths.iter().enumerate() {
            if !(*s > 0.0 && *s < 1.0) {
                out.push((
                    format!("phase2_strengths[{i}]"),
                    format!("strength {s} outside (0, 1)"),
                ));
            }
        }
        for (i, pair) in self.phase2_strengths.windows(2).enumerate() {
            if pair[1] >= pair[0] {
                out.push((
                    format!("phase2_strengths[{}]", i + 1),
                    format!(
                        "strengths must be strictly decreasing ({} then {})",
                        pair[0], pair[1]
                    ),
                ));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push((
                "learning_rate".into(),
                format!("must be > 0 (got {})", self.learning_rate),
            ));
        }
        if self.img2img.inference_steps == 0 {
            out.push(("img2img.inference_steps".into(), "must be > 0".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            return Ok(());
        }
        Err(Error::Config(
            d.iter()
                .map(|(f, m)| format!("{f}: {m}"))
                .collect::<Vec<_>>()
                .join("; "),
        ))
    }

    /// Gradient steps of a complete run.
    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_strengths.len() as u64 * self.steps_per_target
    }
}

/// Per-parameter update rule with its running state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    /// First/second moments, indexed `[prime][tensor]`; empty for SGD.
    moments: Vec<Vec<Moment>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moment {
    #[serde(with = "crate::serde_f64")]
    m: Vec<f64>,
    #[serde(with = "crate::serde_f64")]
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, primes: &[ParametricImage]) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => primes
                .iter()
                .map(|p| {
                    p.parameters()
                        .iter()
                        .map(|t| Moment {
                            m: vec![0.0; t.len()],
                            v: vec![0.0; t.len()],
                        })
                        .collect()
                })
                .collect(),
        };
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments,
        }
    }

    /// Applies one update; `grads` is indexed `[prime][tensor][element]`.
    pub fn apply(&mut self, primes: &mut [ParametricImage], grads: &[Vec<Vec<f64>>]) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (prime, g) in primes.iter_mut().zip(grads) {
                    for (param, g) in prime.parameters_mut().into_iter().zip(g) {
                        for (p, g) in param.data.iter_mut().zip(g) {
                            *p -= lr * g;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for ((prime, g), moments) in primes.iter_mut().zip(grads).zip(&mut self.moments) {
                    for ((param, g), mom) in prime.parameters_mut().into_iter().zip(g).zip(moments)
                    {
                        for (((p, g), m), v) in
                            param.data.iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v)
                        {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let m_hat = *m / bc1;
                            let v_hat = *v / bc2;
                            *p -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

/// Where a run currently is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Phase1 {
        step: u64,
    },
    Phase2 {
        segment: usize,
        refreshed: bool,
        step: u64,
    },
    Done,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    /// Completed gradient steps across both phases.
    pub step: u64,
    pub stage: Stage,
    pub primes: Vec<ParametricImage>,
    pub optimizer: OptimizerState,
    pub loss_history: Vec<LossReport>,
    pub dream_targets: Option<DreamTargetState>,
    sd_rng: ChaCha8Rng,
    refresh_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(primes: Vec<ParametricImage>, schedule: &ScheduleConfig) -> Self {
        // Independent streams for timestep/noise sampling and target refresh.
        let mut sd_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        sd_rng.set_stream(1);
        let mut refresh_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        refresh_rng.set_stream(2);
        Self {
            version: CHECKPOINT_VERSION,
            step: 0,
            stage: Stage::Phase1 { step: 0 },
            optimizer: OptimizerState::new(schedule.optimizer, schedule.learning_rate, &primes),
            primes,
            loss_history: Vec::new(),
            dream_targets: None,
            sd_rng,
            refresh_rng,
        }
    }

    pub fn phase(&self) -> Option<Phase> {
        match self.stage {
            Stage::Phase1 { .. } => Some(Phase::ScoreDistillation),
            Stage::Phase2 { .. } => Some(Phase::DreamTarget),
            Stage::Done => None,
        }
    }

    pub fn render_primes(&self) -> Vec<RgbImage> {
        self.primes.iter().map(ParametricImage::render).collect()
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        drop(writer);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            Error::Checkpoint(format!("{}: corrupt checkpoint: {e}", path.display()))
        })?;
        match header.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint version {v}, expected {CHECKPOINT_VERSION}",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "{}: missing version",
                    path.display()
                )))
            }
        }
        serde_json::from_value(header)
            .map_err(|e| Error::Checkpoint(format!("{}: corrupt checkpoint: {e}", path.display())))
    }
}

pub fn checkpoint(state: &RunState, path: impl AsRef<Path>) -> Result<()> {
    state.save(path)
}

pub fn resume(path: impl AsRef<Path>) -> Result<RunState> {
    RunState::load(path)
}

/// Gradients of one step, indexed `[prime][tensor][element]`, and its losses.
pub struct StepGradients {
    pub grads: Vec<Vec<Vec<f64>>>,
    pub report: LossReport,
}

type Observer<'a> = Box<dyn FnMut(&LossReport) + 'a>;

/// Drives a [`RunState`] through the schedule.
pub struct Trainer<'a> {
    spec: &'a IllusionSpec,
    backend: &'a dyn GuidanceBackend,
    schedule: &'a ScheduleConfig,
    abort_checkpoint: Option<PathBuf>,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a IllusionSpec,
        backend: &'a dyn GuidanceBackend,
        schedule: &'a ScheduleConfig,
    ) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        Ok(Self {
            spec,
            backend,
            schedule,
            abort_checkpoint: None,
            observer: None,
        })
    }

    /// Where to write the pre-step state when a step produces NaN/Inf.
    pub fn with_abort_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.abort_checkpoint = Some(path.into());
        self
    }

    /// Called with every step's losses.
    pub fn with_observer(mut self, f: impl FnMut(&LossReport) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn init_state(&self, primes: Vec<ParametricImage>) -> Result<RunState> {
        if primes.len() != self.spec.n {
            return Err(Error::Shape(format!(
                "expected {} primes, got {}",
                self.spec.n,
                primes.len()
            )));
        }
        Ok(RunState::new(primes, self.schedule))
    }

    fn static_target(&self, j: usize) -> Result<&'a RgbImage> {
        match &self.spec.targets[j] {
            TargetSpec::Image {
                image: Some(img), ..
            } => Ok(img),
            TargetSpec::Image { path, .. } => Err(Error::ImageLoad {
                path: path.clone(),
                reason: "image target was not loaded".into(),
            }),
            TargetSpec::Text { .. } => unreachable!("text target has no static image"),
        }
    }

    fn compute(&self, state: &RunState, sd_rng: &mut ChaCha8Rng) -> Result<StepGradients> {
        let phase = state
            .phase()
            .ok_or_else(|| Error::Config("run is already complete".into()))?;
        let renders = state.render_primes();
        let derived = derive_all(self.spec, &renders)?;
        let mut per_derived = Vec::with_capacity(self.spec.m);
        let mut derived_grads = Vec::with_capacity(self.spec.m);

        for (j, d) in derived.iter().enumerate() {
            let w = self.spec.weights[j];
            let (loss, grad) = match (phase, &self.spec.targets[j]) {
                (Phase::ScoreDistillation, TargetSpec::Text { prompt }) => {
                    let sd = score_distillation_grad(
                        self.backend,
                        prompt,
                        d,
                        self.schedule.sd_weighting,
                        sd_rng,
                    )?;
                    (sd.loss, sd.grad)
                }
                (Phase::ScoreDistillation, TargetSpec::Image { .. }) => {
                    dream_target_loss_grad(self.static_target(j)?, d)?
                }
                (Phase::DreamTarget, _) => {
                    let targets = state
                        .dream_targets
                        .as_ref()
                        .ok_or_else(|| Error::Config("dream targets have not been set".into()))?;
                    dream_target_loss_grad(&targets.current[j], d)?
                }
            };
            per_derived.push(loss);
            derived_grads.push(grad.scale(w));
        }

        let total = total_weighted_loss(&per_derived, &self.spec.weights)?;
        let report = LossReport {
            step: state.step,
            phase,
            per_derived,
            total,
        };
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} at step {}",
                state.step
            )));
        }

        let prime_grads = backward_all(self.spec, &renders, &derived_grads)?;
        let grads: Vec<Vec<Vec<f64>>> = state
            .primes
            .iter()
            .zip(&prime_grads)
            .map(|(p, g)| p.backward(g))
            .collect();
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}",
                state.step
            )));
        }
        Ok(StepGradients { grads, report })
    }

    /// Derived images of the current primes, as the loss sees them.
    pub fn derived(&self, state: &RunState) -> Result<Vec<RgbImage>> {
        derive_all(self.spec, &state.render_primes())
    }

    /// Gradients the next step would apply, without advancing the run.
    pub fn step_gradients(&self, state: &RunState) -> Result<StepGradients> {
        let mut rng = state.sd_rng.clone();
        self.compute(state, &mut rng)
    }

    fn gradient_step(&mut self, state: &mut RunState) -> Result<()> {
        let mut rng = state.sd_rng.clone();
        let out = match self.compute(state, &mut rng) {
            Ok(out) => out,
            Err(e @ Error::Numeric(_)) => {
                if let Some(path) = &self.abort_checkpoint {
                    state.save(path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.sd_rng = rng;
        state.optimizer.apply(&mut state.primes, &out.grads);
        state.step += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs(&out.report);
        }
        state.loss_history.push(out.report);
        Ok(())
    }

    fn refresh(&self, state: &mut RunState, strength: f64) -> Result<()> {
        let derived = derive_all(self.spec, &state.render_primes())?;
        let current = match &state.dream_targets {
            Some(s) => s.clone(),
            None => DreamTargetState::new(self.spec, &derived)?,
        };
        let mut rng = state.refresh_rng.clone();
        let next = refresh_targets(
            &current,
            self.backend,
            self.spec,
            &derived,
            strength,
            &self.schedule.img2img,
            &mut rng,
        )?;
        state.refresh_rng = rng;
        state.dream_targets = Some(next);
        Ok(())
    }

    /// Advances until `stop` returns true for the current stage, the run is
    /// done, or `max_steps` gradient steps have been taken.
    fn advance(
        &mut self,
        state: &mut RunState,
        max_steps: Option<u64>,
        stop: impl Fn(&Stage) -> bool,
    ) -> Result<()> {
        let mut taken = 0u64;
        loop {
            if stop(&state.stage) {
                return Ok(());
            }
            match state.stage {
                Stage::Done => return Ok(()),
                Stage::Phase1 { step } if step >= self.schedule.phase1_steps => {
                    state.stage = Stage::Phase2 {
                        segment: 0,
                        refreshed: false,
                        step: 0,
                    };
                }
                Stage::Phase2 { segment, .. }
                    if segment >= self.schedule.phase2_strengths.len() =>
                {
                    state.stage = Stage::Done;
                }
                Stage::Phase2 {
                    segment,
                    refreshed: false,
                    ..
                } => {
                    self.refresh(state, self.schedule.phase2_strengths[segment])?;
                    state.stage = Stage::Phase2 {
                        segment,
                        refreshed: true,
                        step: 0,
                    };
                }
                Stage::Phase2 { segment, step, .. } if step >= self.schedule.steps_per_target => {
                    state.stage = Stage::Phase2 {
                        segment: segment + 1,
                        refreshed: false,
                        step: 0,
                    };
                }
                Stage::Phase1 { step } => {
                    if max_steps.is_some_and(|m| taken >= m) {
                        return Ok(());
                    }
                    self.gradient_step(state)?;
                    taken += 1;
                    state.stage = Stage::Phase1 { step: step + 1 };
                }
                Stage::Phase2 { segment, step, .. } => {
                    if max_steps.is_some_and(|m| taken >= m) {
                        return Ok(());
                    }
                    self.gradient_step(state)?;
                    taken += 1;
                    state.stage = Stage::Phase2 {
                        segment,
                        refreshed: true,
                        step: step + 1,
                    };
                }
            }
        }
    }

    /// Runs the remainder of phase 1.
    pub fn run_phase1(&mut self, state: &mut RunState) -> Result<()> {
        self.advance(state, None, |s| !matches!(s, Stage::Phase1 { .. }))
    }

    /// Runs phase 2 to completion. A state still in phase 1 skips the rest of it.
    pub fn run_phase2(&mut self, state: &mut RunState) -> Result<()> {
        if matches!(state.stage, Stage::Phase1 { .. }) {
            state.stage = Stage::Phase2 {
                segment: 0,
                refreshed: false,
                step: 0,
            };
        }
        self.advance(state, None, |_| false)
    }

    /// Runs both phases to completion.
    pub fn run(&mut self, state: &mut RunState) -> Result<()> {
        self.advance(state, None, |_| false)
    }

    /// Takes at most `steps` more gradient steps, continuing across phases.
    pub fn run_steps(&mut self, state: &mut RunState, steps: u64) -> Result<()> {
        self.advance(state, Some(steps), |_| false)
    }
}

/// Fresh run through phase 1 only.
pub fn run_phase1(
    spec: &IllusionSpec,
    primes: Vec<ParametricImage>,
    backend: &dyn GuidanceBackend,
    schedule: &ScheduleConfig,
) -> Result<RunState> {
    let mut trainer = Trainer::new(spec, backend, schedule)?;
    let mut state = trainer.init_state(primes)?;
    trainer.run_phase1(&mut state)?;
    Ok(state)
}

/// Continues `state` through phase 2.
pub fn run_phase2(
    spec: &IllusionSpec,
    backend: &dyn GuidanceBackend,
    schedule: &ScheduleConfig,
    mut state: RunState,
) -> Result<RunState> {
    let mut trainer = Trainer::new(spec, backend, schedule)?;
    trainer.run_phase2(&mut state)?;
    Ok(state)
}
