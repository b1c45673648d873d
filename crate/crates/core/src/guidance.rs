//! Frozen denoiser interface and the image-to-image refresh built on it.
//!
//! A [`GuidanceBackend`] exposes the pieces of a latent diffusion model the
//! optimizer needs: an image encoder/decoder, a text encoder and a noise
//! predictor, together with its noise schedule. Every method takes `&self`;
//! backends are read-only once constructed.
//!
//! [`AnalyticOracleBackend`] is a closed-form denoiser whose data
//! distribution is a single image per prompt. Its noise prediction exactly
//! inverts the forward process, which makes score distillation and
//! image-to-image refresh verifiable without a trained model.

use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Cumulative signal retention `ᾱ(τ)` for `τ = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// DDPM schedule with `β` linearly spaced in `[beta_start, beta_end]`.
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps == 0 {
            return Err(Error::Config(
                "noise schedule needs at least one timestep".into(),
            ));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let mut running = 1.0;
        let alpha_bar = (0..num_timesteps)
            .map(|i| {
                let beta = if num_timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_timesteps - 1) as f64
                };
                running *= 1.0 - beta;
                running
            })
            .collect();
        Ok(Self { alpha_bar })
    }

    /// Schedule from an explicit `ᾱ` table (entry `i` is timestep `i + 1`).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("empty alpha_bar table".into()));
        }
        if let Some(v) = alpha_bar.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("alpha_bar value {v} outside [0, 1]")));
        }
        Ok(Self { alpha_bar })
    }

    pub fn max_timestep(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        if tau == 0 || tau > self.alpha_bar.len() {
            return Err(Error::OutOfRange(format!(
                "timestep {tau} outside 1..={}",
                self.alpha_bar.len()
            )));
        }
        Ok(self.alpha_bar[tau - 1])
    }
}

/// Latent tensor of a backend. For pixel-space backends it mirrors the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "latent shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_image(image: &RgbImage) -> Self {
        let (h, w, c) = image.shape();
        Self {
            shape: vec![h, w, c],
            data: image.data().to_vec(),
        }
    }

    pub fn to_image(&self) -> Result<RgbImage> {
        match self.shape.as_slice() {
            [h, w, 3] => RgbImage::new(*h, *w, self.data.clone()),
            other => Err(Error::Shape(format!(
                "latent {other:?} is not an h×w×3 image"
            ))),
        }
    }

    pub fn standard_normal_like(&self, rng: &mut impl Rng) -> Latent {
        Latent {
            shape: self.shape.clone(),
            data: (0..self.data.len())
                .map(|_| StandardNormal.sample(rng))
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "latent {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Output of a backend's text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

/// A frozen text-conditioned denoiser.
pub trait GuidanceBackend: Send + Sync {
    fn name(&self) -> &str;

    fn schedule(&self) -> &NoiseSchedule;

    fn max_timestep(&self) -> usize {
        self.schedule().max_timestep()
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent>;

    /// Vector-Jacobian product of [`Self::encode`] at `image`.
    fn encode_backward(&self, image: &RgbImage, grad_latent: &Latent) -> Result<RgbImage>;

    fn decode(&self, latent: &Latent) -> Result<RgbImage>;

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Predicted noise; same shape as `noised`.
    fn predict_noise(
        &self,
        noised: &Latent,
        tau: usize,
        embedding: &TextEmbedding,
    ) -> Result<Latent>;
}

/// `√ᾱ_τ · x + √(1 − ᾱ_τ) · ε`
pub fn add_noise(schedule: &NoiseSchedule, x: &Latent, tau: usize, eps: &Latent) -> Result<Latent> {
    x.check_same_shape(eps)?;
    let ab = schedule.alpha_bar(tau)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Latent {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&eps.data)
            .map(|(x, e)| a * x + b * e)
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Img2ImgConfig {
    /// Reverse steps for a full-strength run; scaled down by `strength`.
    pub inference_steps: usize,
}

impl Default for Img2ImgConfig {
    fn default() -> Self {
        Self {
            inference_steps: 50,
        }
    }
}

/// Noises `image` to `⌊strength · T⌋` and denoises it back with deterministic
/// DDIM steps conditioned on `prompt`. `strength = 0` returns the input.
pub fn img2img(
    backend: &dyn GuidanceBackend,
    prompt: &str,
    image: &RgbImage,
    strength: f64,
    config: &Img2ImgConfig,
    rng: &mut impl Rng,
) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("strength {strength} outside [0, 1]")));
    }
    let schedule = backend.schedule();
    let start = (strength * backend.max_timestep() as f64).floor() as usize;
    if start == 0 {
        return Ok(image.clone());
    }

    let embedding = backend.embed_text(prompt)?;
    let latent = backend.encode(image)?;
    let eps = latent.standard_normal_like(rng);
    let mut x = add_noise(schedule, &latent, start, &eps)?;

    let steps = ((strength * config.inference_steps as f64).ceil() as usize).clamp(1, start);
    // Evenly spaced timesteps from `start` down to 1, followed by the clean endpoint.
    let timesteps: Vec<usize> = (0..steps)
        .map(|i| {
            start - ((start - 1) as f64 * i as f64 / (steps.max(2) - 1) as f64).round() as usize
        })
        .collect();

    for (i, &tau) in timesteps.iter().enumerate() {
        let ab = schedule.alpha_bar(tau)?;
        let ab_prev = match timesteps.get(i + 1) {
            Some(&next) => schedule.alpha_bar(next)?,
            None => 1.0,
        };
        let pred = backend.predict_noise(&x, tau, &embedding)?;
        x.check_same_shape(&pred)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, e) in x.data.iter_mut().zip(&pred.data) {
            let x0 = (*xv - sb * e) / sa;
            *xv = pa * x0 + pb * e;
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite latent at timestep {tau}"
            )));
        }
    }

    Ok(backend.decode(&x)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Closed-form denoiser whose data distribution is one image per prompt.
///
/// `predict_noise(x_τ, τ, e) = (x_τ − √ᾱ_τ · target(e)) / √(1 − ᾱ_τ)`.
/// Prompts that were not registered map to the default target.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticOracleBackend {
    schedule: NoiseSchedule,
    default_target: RgbImage,
    prompts: Vec<(String, RgbImage)>,
}

impl AnalyticOracleBackend {
    pub fn new(target: RgbImage) -> Self {
        Self::with_schedule(target, NoiseSchedule::default())
    }

    pub fn with_schedule(target: RgbImage, schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            default_target: target,
            prompts: Vec::new(),
        }
    }

    /// Registers a prompt-specific target; must match the default target's shape.
    pub fn with_prompt(mut self, prompt: impl Into<String>, target: RgbImage) -> Result<Self> {
        self.default_target.check_same_shape(&target)?;
        self.prompts.push((prompt.into(), target));
        Ok(self)
    }

    pub fn target_for(&self, prompt: &str) -> &RgbImage {
        self.prompts
            .iter()
            .find(|(p, _)| p == prompt)
            .map(|(_, t)| t)
            .unwrap_or(&self.default_target)
    }

    fn target_for_embedding(&self, embedding: &TextEmbedding) -> Result<&RgbImage> {
        match embedding.0.as_slice() {
            [id] if *id == 0.0 => Ok(&self.default_target),
            [id] if id.fract() == 0.0 && *id >= 1.0 && (*id as usize) <= self.prompts.len() => {
                Ok(&self.prompts[*id as usize - 1].1)
            }
            _ => Err(Error::Backend(
                "embedding was not produced by this oracle".into(),
            )),
        }
    }
}

impl GuidanceBackend for AnalyticOracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        Ok(Latent::from_image(image))
    }

    fn encode_backward(&self, _image: &RgbImage, grad_latent: &Latent) -> Result<RgbImage> {
        grad_latent.to_image()
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        latent.to_image()
    }

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let id = self
            .prompts
            .iter()
            .position(|(p, _)| p == prompt)
            .map_or(0, |i| i + 1);
        Ok(TextEmbedding(vec![id as f64]))
    }

    fn predict_noise(
        &self,
        noised: &Latent,
        tau: usize,
        embedding: &TextEmbedding,
    ) -> Result<Latent> {
        let target = self.target_for_embedding(embedding)?;
        if noised.data.len() != target.len() {
            return Err(Error::Shape(format!(
                "oracle target has {} values, latent has {}",
                target.len(),
                noised.data.len()
            )));
        }
        let ab = self.schedule.alpha_bar(tau)?;
        if ab >= 1.0 {
            // No noise was injected; the exact predictor is undefined, report zero.
            return Ok(Latent {
                shape: noised.shape.clone(),
                data: vec![0.0; noised.data.len()],
            });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Latent {
            shape: noised.shape.clone(),
            data: noised
                .data
                .iter()
                .zip(target.data())
                .map(|(x, t)| (x - a * t) / b)
                .collect(),
        })
    }
}

/// Settings for an out-of-process diffusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalBackendConfig {
    pub model: String,
    pub device: String,
    pub guidance_scale: f64,
}

impl Default for ExternalBackendConfig {
    fn default() -> Self {
        Self {
            model: "stabilityai/stable-diffusion-xl-base-1.0".into(),
            device: "cpu".into(),
            guidance_scale: 7.5,
        }
    }
}

/// Environment variable naming the model cache directory for external backends.
pub const MODEL_CACHE_ENV: &str = "ILLUSION_MODEL_CACHE";

pub type ExternalFactory =
    dyn Fn(&ExternalBackendConfig) -> Result<Box<dyn GuidanceBackend>> + Send + Sync;

static EXTERNAL_FACTORY: RwLock<Option<Arc<ExternalFactory>>> = RwLock::new(None);

/// Installs the constructor used by [`ExternalDiffusionBackend::connect`].
///
/// Host applications that link a real diffusion runtime register it here.
pub fn register_external_backend(
    factory: impl Fn(&ExternalBackendConfig) -> Result<Box<dyn GuidanceBackend>> + Send + Sync + 'static,
) {
    *EXTERNAL_FACTORY.write().expect("factory lock") = Some(Arc::new(factory));
}

/// A plug-in diffusion model behind the [`GuidanceBackend`] contract.
pub struct ExternalDiffusionBackend {
    config: ExternalBackendConfig,
    inner: Box<dyn GuidanceBackend>,
}

impl std::fmt::Debug for ExternalDiffusionBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDiffusionBackend")
            .field("config", &self.config)
            .field("inner", &self.inner.name())
            .finish()
    }
}

impl ExternalDiffusionBackend {
    /// Fails with [`Error::Backend`] when no runtime has been registered.
    pub fn connect(config: ExternalBackendConfig) -> Result<Self> {
        let factory = EXTERNAL_FACTORY.read().expect("factory lock").clone();
        let factory = factory.ok_or_else(|| {
            Error::Backend(format!(
                "external diffusion backend '{}' is unavailable: no runtime is registered in this build",
                config.model
            ))
        })?;
        let inner = factory(&config)?;
        Ok(Self { config, inner })
    }

    pub fn config(&self) -> &ExternalBackendConfig {
        &self.config
    }
}

impl GuidanceBackend for ExternalDiffusionBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        self.inner.encode(image)
    }

    fn encode_backward(&self, image: &RgbImage, grad_latent: &Latent) -> Result<RgbImage> {
        self.inner.encode_backward(image, grad_latent)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        self.inner.decode(latent)
    }

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.inner.embed_text(prompt)
    }

    fn predict_noise(
        &self,
        noised: &Latent,
        tau: usize,
        embedding: &TextEmbedding,
    ) -> Result<Latent> {
        self.inner.predict_noise(noised, tau, embedding)
    }
}
