//! Benchmark metrics for groups of derived images.
//!
//! Prompts are built by substituting sampled subjects into style templates.
//! Each group of derived images is then scored for controllability (image to
//! own-prompt cosine), diversity (Vendi score), optional aesthetics, and the
//! Independence Score, which rewards images that match their own prompt while
//! staying away from the other prompts of the group.
//!
//! Real embedding models and aesthetics predictors are plug-ins behind the
//! [`Embedder`] and [`AestheticsPredictor`] traits. [`MockEmbedder`] is a
//! deterministic stand-in that keeps the whole suite runnable offline.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RgbImage, CHANNELS};

pub const SUBJECT_TOKEN: &str = "<s>";
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

pub const STYLES: [&str; 4] = [
    "3d pixar style render animation of a <s>",
    "an award winning photograph of a <s>",
    "an award winning photograph of a <s> in the deep jungle",
    "an award winning photograph of a <s> in times square",
];

/// Single style used for rotation-overlay groups.
pub const ROTATION_STYLE: &str =
    "a beautiful award-winning royalty-free full-frame stock photo of an isolated <s>";

/// PASCAL VOC object classes without `person`.
pub const VOC_SUBJECTS: [&str; 19] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "dining table",
    "dog",
    "horse",
    "motorbike",
    "potted plant",
    "sheep",
    "sofa",
    "train",
    "tv/monitor",
];

/// Instructions for a vision-language scorer adapter.
pub const VLM_CONTROLLABILITY_TEMPLATE: &str = "Give a single score from 0 to 10 regarding how well the image looks like a <s>. A higher score means the image generally looks similar to a <s>. Only return the score.";
pub const VLM_AESTHETICS_TEMPLATE: &str = "Give a single score from 0 to 10 regarding how well this image looks. A higher score means the image generally looks more natural and has fewer artifacts. Only return the score.";

pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Seeded random projection of an 8×8 area-averaged thumbnail for images and
/// a sum of per-word hashed Gaussian vectors for text.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    name: String,
    dim: usize,
    seed: u64,
    projection: Vec<f64>,
}

const MOCK_GRID: usize = 8;

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be > 0".into()));
        }
        let inputs = MOCK_GRID * MOCK_GRID * CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (inputs as f64).sqrt().recip();
        let projection = (0..dim * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Ok(Self {
            name: format!("mock-{dim}-{seed}"),
            dim,
            seed,
            projection,
        })
    }

    fn thumbnail(image: &RgbImage) -> Vec<f64> {
        let (h, w, _) = image.shape();
        let mut out = vec![0.0; MOCK_GRID * MOCK_GRID * CHANNELS];
        let mut counts = vec![0usize; MOCK_GRID * MOCK_GRID];
        for r in 0..h {
            let gr = r * MOCK_GRID / h;
            for c in 0..w {
                let gc = c * MOCK_GRID / w;
                let cell = gr * MOCK_GRID + gc;
                counts[cell] += 1;
                for ch in 0..CHANNELS {
                    out[cell * CHANNELS + ch] += image.get(r, c, ch);
                }
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for ch in 0..CHANNELS {
                let v = &mut out[cell * CHANNELS + ch];
                // Cells of images smaller than the grid stay empty.
                *v = if *n > 0 { *v / *n as f64 - 0.5 } else { 0.0 };
            }
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Embedder for MockEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let thumb = Self::thumbnail(image);
        Ok(self
            .projection
            .chunks(thumb.len())
            .map(|row| row.iter().zip(&thumb).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        for word in text.split_whitespace() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(fnv1a(word.to_lowercase().as_bytes()) ^ self.seed);
            for v in &mut out {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += z;
            }
        }
        Ok(out)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Numeric(format!("embedding has invalid norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Numeric("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `K[i][j] = cos(image_i, text_j)`.
pub fn similarity_matrix(
    image_embeddings: &[Vec<f64>],
    text_embeddings: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    image_embeddings
        .iter()
        .map(|v| {
            text_embeddings
                .iter()
                .map(|e| cosine_similarity(v, e))
                .collect()
        })
        .collect()
}

/// Independence Score of a square similarity matrix.
///
/// The column softmax normalizes over images for a fixed prompt, the row
/// softmax over prompts for a fixed image. The score is the smallest diagonal
/// entry of either.
pub fn independence_from_kernel(k: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let m = k.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "independence needs at least 2 pairs, got {m}"
        )));
    }
    if k.iter().any(|row| row.len() != m) {
        return Err(Error::Shape("similarity matrix must be square".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be > 0 (got {temperature})"
        )));
    }
    let mut score = f64::INFINITY;
    for (i, row) in k.iter().enumerate() {
        // Row softmax at (i, i).
        let row_max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row_sum: f64 = row
            .iter()
            .map(|x| ((x - row_max) / temperature).exp())
            .sum();
        score = score.min(((k[i][i] - row_max) / temperature).exp() / row_sum);
        // Column softmax at (i, i).
        let col_max = (0..m).map(|r| k[r][i]).fold(f64::NEG_INFINITY, f64::max);
        let col_sum: f64 = (0..m)
            .map(|r| ((k[r][i] - col_max) / temperature).exp())
            .sum();
        score = score.min(((k[i][i] - col_max) / temperature).exp() / col_sum);
    }
    if !score.is_finite() {
        return Err(Error::Numeric("non-finite independence score".into()));
    }
    Ok(score)
}

pub fn independence_score(
    images: &[RgbImage],
    prompts: &[String],
    embedder: &dyn Embedder,
    temperature: f64,
) -> Result<f64> {
    if images.len() != prompts.len() {
        return Err(Error::Shape(format!(
            "{} images but {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    let v = images
        .iter()
        .map(|i| embedder.embed_image(i))
        .collect::<Result<Vec<_>>>()?;
    let e = prompts
        .iter()
        .map(|p| embedder.embed_text(p))
        .collect::<Result<Vec<_>>>()?;
    independence_from_kernel(&similarity_matrix(&v, &e)?, temperature)
}

/// Effective number of distinct embeddings: `exp` of the eigenvalue entropy of
/// the cosine kernel divided by `n`.
pub fn vendi_score(embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::Config(
            "vendi score needs at least one embedding".into(),
        ));
    }
    let unit = embeddings
        .iter()
        .map(|v| normalized(v))
        .collect::<Result<Vec<_>>>()?;
    if unit.iter().any(|u| u.len() != unit[0].len()) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let k = DMatrix::from_fn(n, n, |i, j| {
        unit[i]
            .iter()
            .zip(&unit[j])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    });
    let eig = SymmetricEigen::new(k);
    let entropy: f64 = eig
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0))
        .filter(|l| *l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, n as f64))
}

pub fn controllability(
    images: &[RgbImage],
    prompts: &[String],
    embedder: &dyn Embedder,
) -> Result<Vec<f64>> {
    if images.len() != prompts.len() {
        return Err(Error::Shape(format!(
            "{} images but {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    images
        .iter()
        .zip(prompts)
        .map(|(img, p)| cosine_similarity(&embedder.embed_image(img)?, &embedder.embed_text(p)?))
        .collect()
}

pub trait AestheticsPredictor {
    fn name(&self) -> &str;
    fn predict(&self, image: &RgbImage) -> Result<f64>;
}

/// Per-image scores clamped to `[0, 10]`.
pub fn aesthetics(
    images: &[RgbImage],
    predictor: Option<&dyn AestheticsPredictor>,
) -> Result<Vec<f64>> {
    let predictor = predictor
        .ok_or_else(|| Error::PredictorUnavailable("no aesthetics predictor configured".into()))?;
    images
        .iter()
        .map(|img| {
            let s = predictor.predict(img)?;
            if s.is_nan() {
                return Err(Error::Numeric(format!("{} returned NaN", predictor.name())));
            }
            Ok(s.clamp(0.0, 10.0))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptProtocol {
    pub styles: Vec<String>,
    pub subjects: Vec<String>,
    pub group_size: usize,
    pub groups_per_style: usize,
    pub seed: u64,
}

impl Default for PromptProtocol {
    /// Hidden-overlay protocol: four styles, 19 subjects, groups of five.
    fn default() -> Self {
        Self {
            styles: STYLES.iter().map(|s| s.to_string()).collect(),
            subjects: VOC_SUBJECTS.iter().map(|s| s.to_string()).collect(),
            group_size: 5,
            groups_per_style: 64,
            seed: 0,
        }
    }
}

impl PromptProtocol {
    /// Rotation-overlay protocol: one style, groups of four.
    pub fn rotation() -> Self {
        Self {
            styles: vec![ROTATION_STYLE.to_string()],
            group_size: 4,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub style_index: usize,
    pub group_index: usize,
    pub subjects: Vec<String>,
    pub prompts: Vec<String>,
}

pub fn fill_subject(style: &str, subject: &str) -> String {
    style.replace(SUBJECT_TOKEN, subject)
}

/// `groups_per_style` groups for every style, each with `group_size` distinct
/// subjects drawn uniformly.
pub fn build_prompt_groups(protocol: &PromptProtocol) -> Result<Vec<PromptGroup>> {
    if protocol.group_size > protocol.subjects.len() {
        return Err(Error::Config(format!(
            "group_size {} exceeds the {} available subjects",
            protocol.group_size,
            protocol.subjects.len()
        )));
    }
    if let Some(s) = protocol.styles.iter().find(|s| !s.contains(SUBJECT_TOKEN)) {
        return Err(Error::Config(format!(
            "style {s:?} has no {SUBJECT_TOKEN} token"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut groups = Vec::with_capacity(protocol.styles.len() * protocol.groups_per_style);
    for (style_index, style) in protocol.styles.iter().enumerate() {
        for group_index in 0..protocol.groups_per_style {
            let subjects: Vec<String> =
                sample(&mut rng, protocol.subjects.len(), protocol.group_size)
                    .into_iter()
                    .map(|i| protocol.subjects[i].clone())
                    .collect();
            let prompts = subjects.iter().map(|s| fill_subject(style, s)).collect();
            groups.push(PromptGroup {
                style_index,
                group_index,
                subjects,
                prompts,
            });
        }
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub method: String,
    pub style: String,
    pub prompts: Vec<String>,
    pub controllability: Vec<f64>,
    /// Keyed by embedder name.
    pub vendi: BTreeMap<String, f64>,
    pub independence: f64,
    pub aesthetics: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub method: String,
    pub style: String,
    pub groups: usize,
    pub controllability: f64,
    pub vendi: BTreeMap<String, f64>,
    pub independence: f64,
    pub aesthetics: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: Vec<GroupMetrics>,
    pub aggregates: Vec<AggregateMetrics>,
}

/// One group's images with its prompts and labels.
pub struct GroupInput<'a> {
    pub group: String,
    pub method: String,
    pub style: String,
    pub images: &'a [RgbImage],
    pub prompts: &'a [String],
}

/// Scores a group. The first embedder supplies the cosine-based metrics; every
/// embedder contributes a Vendi score.
pub fn evaluate_group(
    input: &GroupInput<'_>,
    embedders: &[&dyn Embedder],
    predictor: Option<&dyn AestheticsPredictor>,
) -> Result<GroupMetrics> {
    let primary = *embedders
        .first()
        .ok_or_else(|| Error::Config("at least one embedder is required".into()))?;
    let controllability = controllability(input.images, input.prompts, primary)?;
    let independence =
        independence_score(input.images, input.prompts, primary, DEFAULT_TEMPERATURE)?;
    let mut vendi = BTreeMap::new();
    for e in embedders {
        let emb = input
            .images
            .iter()
            .map(|i| e.embed_image(i))
            .collect::<Result<Vec<_>>>()?;
        vendi.insert(e.name().to_string(), vendi_score(&emb)?);
    }
    let aesthetics = predictor
        .map(|p| aesthetics(input.images, Some(p)))
        .transpose()?;
    Ok(GroupMetrics {
        group: input.group.clone(),
        method: input.method.clone(),
        style: input.style.clone(),
        prompts: input.prompts.to_vec(),
        controllability,
        vendi,
        independence,
        aesthetics,
    })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn from_groups(groups: Vec<GroupMetrics>) -> Self {
        let mut keys: BTreeMap<(String, String), Vec<&GroupMetrics>> = BTreeMap::new();
        for g in &groups {
            keys.entry((g.method.clone(), g.style.clone()))
                .or_default()
                .push(g);
        }
        let aggregates = keys
            .into_iter()
            .map(|((method, style), gs)| {
                let mut vendi = BTreeMap::new();
                for name in gs.iter().flat_map(|g| g.vendi.keys()) {
                    if !vendi.contains_key(name) {
                        vendi.insert(
                            name.clone(),
                            mean(gs.iter().filter_map(|g| g.vendi.get(name).copied())),
                        );
                    }
                }
                let aesthetics = gs.iter().all(|g| g.aesthetics.is_some()).then(|| {
                    mean(
                        gs.iter()
                            .flat_map(|g| g.aesthetics.iter().flatten().copied()),
                    )
                });
                AggregateMetrics {
                    groups: gs.len(),
                    controllability: mean(
                        gs.iter().flat_map(|g| g.controllability.iter().copied()),
                    ),
                    independence: mean(gs.iter().map(|g| g.independence)),
                    vendi,
                    aesthetics,
                    method,
                    style,
                }
            })
            .collect();
        Self { groups, aggregates }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per (method, style) aggregate.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("csv: {other:?}")),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let vendi_names: Vec<String> = self
            .aggregates
            .iter()
            .flat_map(|a| a.vendi.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut header = vec![
            "method".to_string(),
            "style".into(),
            "groups".into(),
            "controllability".into(),
            "independence".into(),
            "aesthetics".into(),
        ];
        header.extend(vendi_names.iter().map(|n| format!("vendi[{n}]")));
        w.write_record(&header).map_err(csv_err)?;
        for a in &self.aggregates {
            let mut row = vec![
                a.method.clone(),
                a.style.clone(),
                a.groups.to_string(),
                a.controllability.to_string(),
                a.independence.to_string(),
                a.aesthetics.map(|v| v.to_string()).unwrap_or_default(),
            ];
            row.extend(
                vendi_names
                    .iter()
                    .map(|n| a.vendi.get(n).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Strip plots of per-group independence and mean controllability, one
    /// column per (method, style).
    pub fn write_plots(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let columns: Vec<(String, String)> = self
            .aggregates
            .iter()
            .map(|a| (a.method.clone(), a.style.clone()))
            .collect();
        let column_of = |g: &GroupMetrics| {
            columns
                .iter()
                .position(|c| c.0 == g.method && c.1 == g.style)
        };
        type Metric = Box<dyn Fn(&GroupMetrics) -> f64>;
        let plots: [(&str, (f64, f64), Metric); 2] = [
            ("independence.png", (0.0, 1.0), Box::new(|g| g.independence)),
            (
                "controllability.png",
                (-1.0, 1.0),
                Box::new(|g| mean(g.controllability.iter().copied())),
            ),
        ];
        let mut written = Vec::new();
        for (file, range, value) in plots {
            let points: Vec<(usize, f64)> = self
                .groups
                .iter()
                .filter_map(|g| column_of(g).map(|c| (c, value(g))))
                .collect();
            let img = strip_plot(columns.len().max(1), range, &points);
            let path = dir.join(file);
            img.save_png(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn strip_plot(columns: usize, (lo, hi): (f64, f64), points: &[(usize, f64)]) -> RgbImage {
    const COL_W: usize = 48;
    const H: usize = 200;
    const PAD: usize = 8;
    let width = columns * COL_W + 2 * PAD;
    let mut img = RgbImage::filled(H + 2 * PAD, width, 1.0);
    for c in PAD..width - PAD {
        for r in [PAD, PAD + H - 1] {
            for ch in 0..CHANNELS {
                img.set(r, c, ch, 0.6);
            }
        }
    }
    for (i, (col, v)) in points.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let r = PAD + ((1.0 - t) * (H - 1) as f64).round() as usize;
        // Deterministic horizontal jitter within the column.
        let c = PAD + col * COL_W + 8 + (i * 7) % (COL_W - 16);
        for dr in 0..3 {
            for dc in 0..3 {
                let (rr, cc) = ((r + dr).saturating_sub(1), (c + dc).saturating_sub(1));
                img.set(rr, cc, 0, 0.1);
                img.set(rr, cc, 1, 0.3);
                img.set(rr, cc, 2, 0.8);
            }
        }
    }
    img
}
