//! Differentiable prime-image representations.
//!
//! A prime image is never stored as pixels during optimization. It is a
//! function of trainable parameters, rendered on demand:
//!
//! - [`FourierFeatureImage`]: a coordinate MLP over random Fourier features of
//!   the cell-center grid on the unit square.
//! - [`RawPixelImage`]: one logit per pixel and channel, squashed by a sigmoid.
//!
//! Both expose the same surface through [`ParametricImage`]: `render`, a
//! vector-Jacobian product `backward` from an image-space gradient to
//! parameter gradients, and a stable list of trainable tensors.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RgbImage, CHANNELS};

/// Smallest accepted side length for a prime image.
pub const MIN_RESOLUTION: usize = 8;

/// Pixels evaluated per MLP batch; bounds activation memory for large renders.
const CHUNK_PIXELS: usize = 2048;

/// A trainable tensor with its shape. Data is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(with = "crate::serde_f64")]
    pub data: Vec<f64>,
}

impl Param {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x · sigmoid(x)`
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FfnConfig {
    /// Number of random frequencies; the encoding has twice as many inputs.
    pub num_features: usize,
    /// Standard deviation of the frequencies, in cycles per unit square.
    pub frequency_scale: f64,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
}

impl Default for FfnConfig {
    fn default() -> Self {
        Self {
            num_features: 256,
            frequency_scale: 10.0,
            hidden_widths: vec![256, 256],
            activation: Activation::Silu,
        }
    }
}

impl FfnConfig {
    /// Number of dense layers, output layer included.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 {
            return Err(Error::Config("ffn.num_features must be > 0".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("ffn.hidden_widths[{i}] must be > 0")));
        }
        if !(self.frequency_scale.is_finite() && self.frequency_scale > 0.0) {
            return Err(Error::Config(
                "ffn.frequency_scale must be finite and > 0".into(),
            ));
        }
        Ok(())
    }
}

fn validate_resolution(height: usize, width: usize) -> Result<()> {
    if height < MIN_RESOLUTION || width < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "resolution {height}x{width} is below the minimum of {MIN_RESOLUTION}"
        )));
    }
    Ok(())
}

/// Cell-center coordinate of `index` along an axis of `size` cells.
#[inline]
pub fn cell_center(index: usize, size: usize) -> f64 {
    (index as f64 + 0.5) / size as f64
}

/// Coordinate MLP over random Fourier features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatureImage {
    config: FfnConfig,
    height: usize,
    width: usize,
    seed: u64,
    /// `num_features × 2`, columns are (x, y). Fixed after construction.
    #[serde(with = "crate::serde_f64")]
    frequency_matrix: Vec<f64>,
    /// Interleaved `[w1, b1, w2, b2, ...]`; weights are `in × out`.
    params: Vec<Param>,
}

/// Activations of one chunk, kept for the backward pass.
struct ChunkTape {
    /// Input to every dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every dense layer.
    pre: Vec<Array2<f64>>,
    /// Final image values in `[0, 1]`, `pixels × 3`.
    output: Array2<f64>,
}

impl FourierFeatureImage {
    pub fn new(resolution: (usize, usize), seed: u64, config: FfnConfig) -> Result<Self> {
        let (height, width) = resolution;
        validate_resolution(height, width)?;
        config.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.frequency_scale)
            .map_err(|e| Error::Config(format!("frequency scale: {e}")))?;
        let frequency_matrix: Vec<f64> = (0..config.num_features * 2)
            .map(|_| normal.sample(&mut rng))
            .collect();

        let mut widths = vec![2 * config.num_features];
        widths.extend(&config.hidden_widths);
        widths.push(CHANNELS);

        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for (layer, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Param::new(
                format!("layer{layer}.weight"),
                vec![fan_in, fan_out],
                weights,
            ));
            params.push(Param::new(
                format!("layer{layer}.bias"),
                vec![fan_out],
                vec![0.0; fan_out],
            ));
        }

        Ok(Self {
            config,
            height,
            width,
            seed,
            frequency_matrix,
            params,
        })
    }

    pub fn config(&self) -> &FfnConfig {
        &self.config
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequency_matrix(&self) -> &[f64] {
        &self.frequency_matrix
    }

    fn layer_count(&self) -> usize {
        self.params.len() / 2
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let p = &self.params[2 * layer];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("weight shape")
    }

    fn bias(&self, layer: usize) -> &[f64] {
        &self.params[2 * layer + 1].data
    }

    fn encode(&self, coords: &[(f64, f64)]) -> Array2<f64> {
        let nf = self.config.num_features;
        let mut enc = Array2::zeros((coords.len(), 2 * nf));
        for (row, &(x, y)) in enc.outer_iter_mut().zip(coords) {
            let row = row.into_slice().expect("contiguous row");
            for f in 0..nf {
                let phase = 2.0
                    * PI
                    * (self.frequency_matrix[2 * f] * x + self.frequency_matrix[2 * f + 1] * y);
                row[f] = phase.cos();
                row[nf + f] = phase.sin();
            }
        }
        enc
    }

    fn forward_chunk(&self, coords: &[(f64, f64)]) -> ChunkTape {
        let layers = self.layer_count();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut x = self.encode(coords);
        for layer in 0..layers {
            let mut z = x.dot(&self.weight(layer));
            let b = self.bias(layer);
            for mut row in z.outer_iter_mut() {
                for (v, bi) in row.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            let next = if layer + 1 < layers {
                let act = self.config.activation;
                z.mapv(|v| act.apply(v))
            } else {
                z.mapv(|v| 0.5 * (v.tanh() + 1.0))
            };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        ChunkTape {
            inputs,
            pre,
            output: x,
        }
    }

    /// Evaluates the continuous image at arbitrary unit-square coordinates `(x, y)`.
    pub fn eval_at(&self, coords: &[(f64, f64)]) -> Vec<[f64; 3]> {
        coords
            .chunks(CHUNK_PIXELS)
            .flat_map(|chunk| {
                let out = self.forward_chunk(chunk).output;
                out.outer_iter()
                    .map(|r| [r[0], r[1], r[2]])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn grid(height: usize, width: usize) -> Vec<(f64, f64)> {
        let mut coords = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                coords.push((cell_center(c, width), cell_center(r, height)));
            }
        }
        coords
    }

    /// Renders the cell-center grid of an arbitrary resolution.
    pub fn render_at(&self, height: usize, width: usize) -> RgbImage {
        let coords = Self::grid(height, width);
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for chunk in coords.chunks(CHUNK_PIXELS) {
            let tape = self.forward_chunk(chunk);
            data.extend(tape.output.iter());
        }
        RgbImage::new(height, width, data).expect("render buffer size")
    }

    pub fn render(&self) -> RgbImage {
        self.render_at(self.height, self.width)
    }

    /// Pulls an image-space gradient back to parameter gradients.
    ///
    /// Activations are recomputed chunk by chunk rather than cached across
    /// calls, so memory stays bounded at full resolution.
    pub fn backward(&self, grad_image: &RgbImage) -> Vec<Vec<f64>> {
        assert_eq!(
            (grad_image.height(), grad_image.width()),
            (self.height, self.width),
            "gradient resolution must match the image"
        );
        let layers = self.layer_count();
        let mut grads: Vec<Array2<f64>> = (0..layers)
            .map(|l| Array2::zeros(self.weight(l).raw_dim()))
            .collect();
        let mut bias_grads: Vec<Vec<f64>> =
            (0..layers).map(|l| vec![0.0; self.bias(l).len()]).collect();

        let coords = Self::grid(self.height, self.width);
        let g = grad_image.data();
        for (chunk_index, chunk) in coords.chunks(CHUNK_PIXELS).enumerate() {
            let tape = self.forward_chunk(chunk);
            let start = chunk_index * CHUNK_PIXELS * CHANNELS;
            let g_out = ArrayView2::from_shape(
                (chunk.len(), CHANNELS),
                &g[start..start + chunk.len() * CHANNELS],
            )
            .expect("gradient chunk shape");
            // y = (tanh(z) + 1) / 2  =>  dy/dz = (1 - tanh²(z)) / 2 = 2·y·(1 - y)
            let mut delta = &g_out * &tape.output.mapv(|y| 2.0 * y * (1.0 - y));
            for layer in (0..layers).rev() {
                grads[layer] += &tape.inputs[layer].t().dot(&delta);
                for (bg, col) in bias_grads[layer].iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *bg += col;
                }
                if layer == 0 {
                    break;
                }
                let mut upstream = delta.dot(&self.weight(layer).t());
                let act = self.config.activation;
                upstream.zip_mut_with(&tape.pre[layer - 1], |u, &z| *u *= act.derivative(z));
                delta = upstream;
            }
        }

        grads
            .into_iter()
            .zip(bias_grads)
            .flat_map(|(w, b)| [w.into_raw_vec_and_offset().0, b])
            .collect()
    }
}

/// Per-pixel logits squashed through a sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPixelImage {
    height: usize,
    width: usize,
    logits: Param,
}

impl RawPixelImage {
    /// Seeded initialization near mid-gray (logits drawn from `N(0, 0.1²)`).
    pub fn new(resolution: (usize, usize), seed: u64) -> Result<Self> {
        let (height, width) = resolution;
        validate_resolution(height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let data = (0..height * width * CHANNELS)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self::from_logits_unchecked(height, width, data))
    }

    pub fn from_logits(height: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{} logits for a {height}x{width} image",
                logits.len()
            )));
        }
        Ok(Self::from_logits_unchecked(height, width, logits))
    }

    fn from_logits_unchecked(height: usize, width: usize, logits: Vec<f64>) -> Self {
        Self {
            height,
            width,
            logits: Param::new("pixels", vec![height, width, CHANNELS], logits),
        }
    }

    /// Inverse-squashes an image; values are clipped to `[1e-6, 1 - 1e-6]` first.
    pub fn from_image(image: &RgbImage) -> Self {
        let logits = image
            .data()
            .iter()
            .map(|&v| {
                let v = v.clamp(1e-6, 1.0 - 1e-6);
                (v / (1.0 - v)).ln()
            })
            .collect();
        Self::from_logits_unchecked(image.height(), image.width(), logits)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn render(&self) -> RgbImage {
        RgbImage::new(
            self.height,
            self.width,
            self.logits.data.iter().map(|&v| sigmoid(v)).collect(),
        )
        .expect("logit buffer size")
    }

    pub fn backward(&self, grad_image: &RgbImage) -> Vec<Vec<f64>> {
        let grad = self
            .logits
            .data
            .iter()
            .zip(grad_image.data())
            .map(|(&z, &g)| {
                let s = sigmoid(z);
                g * s * (1.0 - s)
            })
            .collect();
        vec![grad]
    }
}

/// Trainable prime image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParametricImage {
    Ffn(FourierFeatureImage),
    Raw(RawPixelImage),
}

impl ParametricImage {
    pub fn ffn(resolution: (usize, usize), seed: u64, config: FfnConfig) -> Result<Self> {
        FourierFeatureImage::new(resolution, seed, config).map(ParametricImage::Ffn)
    }

    pub fn raw(resolution: (usize, usize), seed: u64) -> Result<Self> {
        RawPixelImage::new(resolution, seed).map(ParametricImage::Raw)
    }

    pub fn resolution(&self) -> (usize, usize) {
        match self {
            ParametricImage::Ffn(f) => f.resolution(),
            ParametricImage::Raw(r) => r.resolution(),
        }
    }

    pub fn render(&self) -> RgbImage {
        match self {
            ParametricImage::Ffn(f) => f.render(),
            ParametricImage::Raw(r) => r.render(),
        }
    }

    /// Gradients of a scalar w.r.t. each tensor of [`Self::parameters`], in order.
    pub fn backward(&self, grad_image: &RgbImage) -> Vec<Vec<f64>> {
        match self {
            ParametricImage::Ffn(f) => f.backward(grad_image),
            ParametricImage::Raw(r) => r.backward(grad_image),
        }
    }

    /// Trainable tensors in a stable order. The frequency matrix is excluded.
    pub fn parameters(&self) -> Vec<&Param> {
        match self {
            ParametricImage::Ffn(f) => f.params.iter().collect(),
            ParametricImage::Raw(r) => vec![&r.logits],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Param> {
        match self {
            ParametricImage::Ffn(f) => f.params.iter_mut().collect(),
            ParametricImage::Raw(r) => vec![&mut r.logits],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Replaces every trainable tensor; shapes must match exactly.
    pub fn set_parameters(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter().zip(values) {
            if p.len() != v.len() {
                return Err(Error::Shape(format!(
                    "{}: expected {} values, got {}",
                    p.name,
                    p.len(),
                    v.len()
                )));
            }
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.data.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
