//! Optimization signals.
//!
//! - Score distillation: noise a derived image, ask the frozen denoiser for
//!   the noise, and hand the prediction error back as the image gradient.
//!   The denoiser output is a constant; nothing is differentiated through it.
//! - Dream-target loss: `(1 − SSIM) + MSE` between a derived image and its
//!   current target, with an analytic gradient.
//!
//! SSIM uses an 11-tap Gaussian window (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`,
//! data range 1, zero padding ("same" size), and is averaged over every
//! pixel and channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{add_noise, GuidanceBackend, Latent};
use crate::image::{RgbImage, CHANNELS};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[serde(rename = "SD")]
    ScoreDistillation,
    #[serde(rename = "DT")]
    DreamTarget,
}

/// Losses of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: Phase,
    pub per_derived: Vec<f64>,
    pub total: f64,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable Gaussian filter of one `h × w` plane with zero padding.
///
/// The window is symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], h: usize, w: usize, window: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in window.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += wk * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, wk) in window.iter().enumerate() {
            let yy = y as isize + k as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }
    out
}

fn channel_plane(img: &RgbImage, ch: usize) -> Vec<f64> {
    img.data()
        .iter()
        .skip(ch)
        .step_by(CHANNELS)
        .copied()
        .collect()
}

/// SSIM and, optionally, its gradient with respect to `b`.
fn ssim_impl(a: &RgbImage, b: &RgbImage, want_grad: bool) -> (f64, Option<RgbImage>) {
    let (h, w) = (a.height(), a.width());
    let n = (h * w * CHANNELS) as f64;
    let window = gaussian_window();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| RgbImage::zeros(h, w));

    for ch in 0..CHANNELS {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = blur(&x, h, w, &window);
        let mu_y = blur(&y, h, w, &window);
        let e_xx = blur(&xx, h, w, &window);
        let e_yy = blur(&yy, h, w, &window);
        let e_xy = blur(&xy, h, w, &window);

        let mut d_mu = want_grad.then(|| vec![0.0; h * w]);
        let mut d_eyy = want_grad.then(|| vec![0.0; h * w]);
        let mut d_exy = want_grad.then(|| vec![0.0; h * w]);

        for i in 0..h * w {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = e_xx[i] - mx * mx;
            let syy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if let (Some(dm), Some(dyy), Some(dxy)) =
                (d_mu.as_mut(), d_eyy.as_mut(), d_exy.as_mut())
            {
                let denom = b1 * b2;
                dm[i] =
                    (2.0 * mx * a2 - 2.0 * mx * a1) / denom - s * (2.0 * my / b1 - 2.0 * my / b2);
                dxy[i] = 2.0 * a1 / denom;
                dyy[i] = -s / b2;
            }
        }

        if let (Some(g), Some(dm), Some(dyy), Some(dxy)) = (grad.as_mut(), d_mu, d_eyy, d_exy) {
            let gm = blur(&dm, h, w, &window);
            let gyy = blur(&dyy, h, w, &window);
            let gxy = blur(&dxy, h, w, &window);
            let data = g.data_mut();
            for i in 0..h * w {
                data[i * CHANNELS + ch] = (gm[i] + 2.0 * y[i] * gyy[i] + x[i] * gxy[i]) / n;
            }
        }
    }
    (total / n, grad)
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// Mean squared error over pixels and channels.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// `SSIM(a, b) − MSE(a, b)`; equals 1 exactly when `a == b`.
pub fn image_similarity(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ssim(a, b)? - mse(a, b)?)
}

/// `(1 − SSIM(target, derived)) + MSE(target, derived)`.
pub fn dream_target_loss(target: &RgbImage, derived: &RgbImage) -> Result<f64> {
    Ok(1.0 - ssim(target, derived)? + mse(target, derived)?)
}

/// Dream-target loss and its gradient with respect to `derived`.
pub fn dream_target_loss_grad(target: &RgbImage, derived: &RgbImage) -> Result<(f64, RgbImage)> {
    target.check_same_shape(derived)?;
    let (s, g_ssim) = ssim_impl(target, derived, true);
    let g_ssim = g_ssim.expect("gradient requested");
    let n = derived.len() as f64;
    let mut mse_val = 0.0;
    let mut grad = RgbImage::zeros(derived.height(), derived.width());
    for (((g, &t), &d), &gs) in grad
        .data_mut()
        .iter_mut()
        .zip(target.data())
        .zip(derived.data())
        .zip(g_ssim.data())
    {
        mse_val += (d - t) * (d - t);
        *g = 2.0 * (d - t) / n - gs;
    }
    Ok((1.0 - s + mse_val / n, grad))
}

/// `Σ w_j · L_j`
pub fn total_weighted_loss(per_derived: &[f64], weights: &[f64]) -> Result<f64> {
    if per_derived.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} losses vs {} weights",
            per_derived.len(),
            weights.len()
        )));
    }
    Ok(per_derived.iter().zip(weights).map(|(l, w)| l * w).sum())
}

/// Scaling of the score-distillation gradient as a function of the timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeighting {
    /// `w(τ) = 1`
    #[default]
    Unit,
    /// `w(τ) = √(1 − ᾱ_τ)`
    SqrtOneMinusAlphaBar,
}

impl TimestepWeighting {
    pub fn factor(self, alpha_bar: f64) -> f64 {
        match self {
            TimestepWeighting::Unit => 1.0,
            TimestepWeighting::SqrtOneMinusAlphaBar => (1.0 - alpha_bar).sqrt(),
        }
    }
}

/// One score-distillation evaluation, with the tensors it was computed from.
#[derive(Clone, Debug)]
pub struct ScoreDistillation {
    pub tau: usize,
    /// Mean absolute error between injected and predicted noise.
    pub loss: f64,
    /// Gradient on the derived image.
    pub grad: RgbImage,
    pub noise: Latent,
    pub predicted: Latent,
}

/// Score distillation at a random timestep `τ ~ U{1..T}` with fresh noise.
pub fn score_distillation_grad(
    backend: &dyn GuidanceBackend,
    prompt: &str,
    derived: &RgbImage,
    weighting: TimestepWeighting,
    rng: &mut impl Rng,
) -> Result<ScoreDistillation> {
    let tau = rng.random_range(1..=backend.max_timestep());
    let latent = backend.encode(derived)?;
    let noise = latent.standard_normal_like(rng);
    score_distillation_at(backend, prompt, derived, &latent, tau, noise, weighting)
}

/// Score distillation at a fixed timestep and noise sample.
pub fn score_distillation_at(
    backend: &dyn GuidanceBackend,
    prompt: &str,
    derived: &RgbImage,
    latent: &Latent,
    tau: usize,
    noise: Latent,
    weighting: TimestepWeighting,
) -> Result<ScoreDistillation> {
    let schedule = backend.schedule();
    let noised = add_noise(schedule, latent, tau, &noise)?;
    let embedding = backend.embed_text(prompt)?;
    let predicted = backend.predict_noise(&noised, tau, &embedding)?;
    if predicted.shape != noise.shape {
        return Err(Error::Backend(format!(
            "predicted noise {:?} does not match latent {:?}",
            predicted.shape, noise.shape
        )));
    }
    let scale = weighting.factor(schedule.alpha_bar(tau)?);
    let grad_latent = Latent {
        shape: noise.shape.clone(),
        data: predicted
            .data
            .iter()
            .zip(&noise.data)
            .map(|(p, e)| scale * (p - e))
            .collect(),
    };
    let loss = predicted
        .data
        .iter()
        .zip(&noise.data)
        .map(|(p, e)| (p - e).abs())
        .sum::<f64>()
        / noise.data.len() as f64;
    if !loss.is_finite() || grad_latent.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score distillation at timestep {tau}"
        )));
    }
    let grad = backend.encode_backward(derived, &grad_latent)?;
    Ok(ScoreDistillation {
        tau,
        loss,
        grad,
        noise,
        predicted,
    })
}
