//! Arrangement operators: fixed maps from the tuple of prime images to each
//! derived image.
//!
//! Every arrangement is an [`ArrangementExpr`] tree over a handful of
//! primitives (prime lookup, exact quarter-turn rotation, pixelwise product,
//! scaling, tanh). The three built-in illusions are expressed with the same
//! primitives as user-supplied `custom` arrangements, so evaluation and the
//! vector-Jacobian product share one code path.
//!
//! Overlay arrangements model light passing through stacked transparencies:
//! the pixelwise product of the layers, multiplied by a backlight brightness
//! `k`, then squashed with `tanh` so the result stays in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::targets::TargetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IllusionKind {
    /// One print viewed upright and upside down.
    Flip,
    /// A base transparency and a rotator viewed at 0/90/180/270°.
    RotationOverlay,
    /// Four transparencies, each an image alone, revealing a fifth when stacked.
    HiddenOverlay,
    Custom,
}

impl IllusionKind {
    pub fn is_overlay(self) -> bool {
        matches!(
            self,
            IllusionKind::RotationOverlay | IllusionKind::HiddenOverlay
        )
    }
}

/// Normalization applied after the brightness scaling of an overlay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    #[default]
    Tanh,
    /// Bare `k · ∏ p`; outputs may exceed 1.
    None,
}

/// Backlight brightness constant of an overlay illusion.
pub fn default_brightness(kind: IllusionKind) -> Result<f64> {
    match kind {
        IllusionKind::RotationOverlay => Ok(2.0),
        IllusionKind::HiddenOverlay => Ok(3.0),
        IllusionKind::Flip => Err(Error::Config(
            "the flip illusion has no brightness constant".into(),
        )),
        IllusionKind::Custom => Err(Error::Config(
            "custom arrangements must state their brightness constant explicitly".into(),
        )),
    }
}

/// One primitive operation (or composition) of an arrangement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ArrangementExpr {
    /// The prime image at a 0-based index.
    Prime {
        index: usize,
    },
    /// Counter-clockwise rotation by a multiple of 90°.
    Rotate {
        quarter_turns: u32,
        input: Box<ArrangementExpr>,
    },
    Product {
        factors: Vec<ArrangementExpr>,
    },
    /// Multiplication by a literal constant.
    Scale {
        factor: f64,
        input: Box<ArrangementExpr>,
    },
    /// Multiplication by the illusion's brightness constant.
    Brightness {
        input: Box<ArrangementExpr>,
    },
    Tanh {
        input: Box<ArrangementExpr>,
    },
}

impl ArrangementExpr {
    pub fn prime(index: usize) -> Self {
        ArrangementExpr::Prime { index }
    }

    pub fn rotate(self, quarter_turns: u32) -> Self {
        if quarter_turns.is_multiple_of(4) {
            return self;
        }
        ArrangementExpr::Rotate {
            quarter_turns: quarter_turns % 4,
            input: Box::new(self),
        }
    }

    /// `tanh(k · ∏ factors)` or the bare product, depending on `squash`.
    pub fn overlay(factors: Vec<ArrangementExpr>, squash: Squash) -> Self {
        let lit = ArrangementExpr::Brightness {
            input: Box::new(ArrangementExpr::Product { factors }),
        };
        match squash {
            Squash::Tanh => ArrangementExpr::Tanh {
                input: Box::new(lit),
            },
            Squash::None => lit,
        }
    }

    /// Largest prime index referenced.
    pub fn max_prime_index(&self) -> Option<usize> {
        match self {
            ArrangementExpr::Prime { index } => Some(*index),
            ArrangementExpr::Product { factors } => {
                factors.iter().filter_map(Self::max_prime_index).max()
            }
            ArrangementExpr::Rotate { input, .. }
            | ArrangementExpr::Scale { input, .. }
            | ArrangementExpr::Brightness { input }
            | ArrangementExpr::Tanh { input } => input.max_prime_index(),
        }
    }

    fn has_odd_rotation(&self) -> bool {
        match self {
            ArrangementExpr::Prime { .. } => false,
            ArrangementExpr::Rotate {
                quarter_turns,
                input,
            } => quarter_turns % 2 == 1 || input.has_odd_rotation(),
            ArrangementExpr::Product { factors } => factors.iter().any(Self::has_odd_rotation),
            ArrangementExpr::Scale { input, .. }
            | ArrangementExpr::Brightness { input }
            | ArrangementExpr::Tanh { input } => input.has_odd_rotation(),
        }
    }

    pub fn eval(&self, primes: &[RgbImage], brightness: f64) -> RgbImage {
        match self {
            ArrangementExpr::Prime { index } => primes[*index].clone(),
            ArrangementExpr::Rotate {
                quarter_turns,
                input,
            } => input.eval(primes, brightness).rot90(*quarter_turns),
            ArrangementExpr::Product { factors } => {
                let values: Vec<RgbImage> =
                    factors.iter().map(|f| f.eval(primes, brightness)).collect();
                let mut acc = values
                    .first()
                    .expect("product has at least one factor")
                    .clone();
                if values.len() <= 2 {
                    if let Some(v) = values.get(1) {
                        acc = acc.zip_map(v, |a, b| a * b);
                    }
                    return acc;
                }
                // Multiplying in sorted order makes the result independent of
                // layer order bit for bit.
                let mut buf = vec![0.0; values.len()];
                for (i, out) in acc.data_mut().iter_mut().enumerate() {
                    for (b, v) in buf.iter_mut().zip(&values) {
                        *b = v.data()[i];
                    }
                    buf.sort_unstable_by(f64::total_cmp);
                    *out = buf.iter().product();
                }
                acc
            }
            ArrangementExpr::Scale { factor, input } => {
                input.eval(primes, brightness).scale(*factor)
            }
            ArrangementExpr::Brightness { input } => {
                input.eval(primes, brightness).scale(brightness)
            }
            ArrangementExpr::Tanh { input } => input.eval(primes, brightness).map(f64::tanh),
        }
    }

    /// Accumulates `Jᵀ · grad` into `prime_grads`.
    pub fn backward(
        &self,
        primes: &[RgbImage],
        brightness: f64,
        grad: &RgbImage,
        prime_grads: &mut [RgbImage],
    ) {
        match self {
            ArrangementExpr::Prime { index } => prime_grads[*index].add_assign_scaled(grad, 1.0),
            ArrangementExpr::Rotate {
                quarter_turns,
                input,
            } => input.backward(
                primes,
                brightness,
                &grad.rot90(4 - quarter_turns % 4),
                prime_grads,
            ),
            ArrangementExpr::Scale { factor, input } => {
                input.backward(primes, brightness, &grad.scale(*factor), prime_grads)
            }
            ArrangementExpr::Brightness { input } => {
                input.backward(primes, brightness, &grad.scale(brightness), prime_grads)
            }
            ArrangementExpr::Tanh { input } => {
                let y = self.eval(primes, brightness);
                let local = grad.zip_map(&y, |g, y| g * (1.0 - y * y));
                input.backward(primes, brightness, &local, prime_grads)
            }
            ArrangementExpr::Product { factors } => {
                let values: Vec<RgbImage> =
                    factors.iter().map(|f| f.eval(primes, brightness)).collect();
                let n = values.len();
                // prefix[i] = ∏_{k<i}, suffix[i] = ∏_{k>i}; avoids dividing by zero pixels.
                let mut prefix = Vec::with_capacity(n);
                let mut running = RgbImage::filled(grad.height(), grad.width(), 1.0);
                for v in &values {
                    prefix.push(running.clone());
                    running = running.zip_map(v, |a, b| a * b);
                }
                let mut suffix = vec![RgbImage::filled(grad.height(), grad.width(), 1.0); n];
                for i in (0..n.saturating_sub(1)).rev() {
                    suffix[i] = suffix[i + 1].zip_map(&values[i + 1], |a, b| a * b);
                }
                for (i, f) in factors.iter().enumerate() {
                    let others = prefix[i].zip_map(&suffix[i], |a, b| a * b);
                    let local = grad.zip_map(&others, |g, o| g * o);
                    f.backward(primes, brightness, &local, prime_grads);
                }
            }
        }
    }
}

/// An arrangement `a_j` at a 0-based position among the derived images.
#[derive(Clone, Debug, PartialEq)]
pub struct Arrangement {
    pub index: usize,
    pub expr: ArrangementExpr,
}

/// Everything that defines one illusion: which arrangements exist, how many
/// primes they consume, the weight of each derived image and its target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IllusionSpec {
    pub kind: IllusionKind,
    /// Number of prime images.
    pub n: usize,
    /// Number of derived images.
    pub m: usize,
    /// Backlight brightness for overlay kinds; `None` for flip.
    #[serde(default)]
    pub brightness_k: Option<f64>,
    #[serde(default)]
    pub squash: Squash,
    pub weights: Vec<f64>,
    pub targets: Vec<TargetSpec>,
    /// Arrangement expressions, used only by the custom kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<ArrangementExpr>>,
}

impl IllusionSpec {
    pub fn flip(targets: Vec<TargetSpec>) -> Result<Self> {
        let spec = Self {
            kind: IllusionKind::Flip,
            n: 1,
            m: 2,
            brightness_k: None,
            squash: Squash::Tanh,
            weights: vec![1.0; 2],
            targets,
            custom: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `m = targets.len()` views of the rotator, at 0°, 90°, ...
    pub fn rotation_overlay(targets: Vec<TargetSpec>) -> Result<Self> {
        let m = targets.len();
        let spec = Self {
            kind: IllusionKind::RotationOverlay,
            n: 2,
            m,
            brightness_k: Some(default_brightness(IllusionKind::RotationOverlay)?),
            squash: Squash::Tanh,
            weights: vec![1.0; m],
            targets,
            custom: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hidden_overlay(targets: Vec<TargetSpec>) -> Result<Self> {
        let spec = Self {
            kind: IllusionKind::HiddenOverlay,
            n: 4,
            m: 5,
            brightness_k: Some(default_brightness(IllusionKind::HiddenOverlay)?),
            squash: Squash::Tanh,
            weights: vec![1.0, 1.0, 1.0, 1.0, 3.0],
            targets,
            custom: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn custom(
        n: usize,
        arrangements: Vec<ArrangementExpr>,
        brightness_k: Option<f64>,
        targets: Vec<TargetSpec>,
    ) -> Result<Self> {
        let m = arrangements.len();
        let spec = Self {
            kind: IllusionKind::Custom,
            n,
            m,
            brightness_k,
            squash: Squash::Tanh,
            weights: vec![1.0; m],
            targets,
            custom: Some(arrangements),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn with_brightness(mut self, k: f64) -> Result<Self> {
        self.brightness_k = Some(k);
        self.validate()?;
        Ok(self)
    }

    pub fn with_squash(mut self, squash: Squash) -> Self {
        self.squash = squash;
        self
    }

    /// Brightness used by the arrangements; flip ignores it.
    pub fn brightness(&self) -> f64 {
        self.brightness_k.unwrap_or(1.0)
    }

    /// Every violated structural invariant, as `(field, message)` pairs.
    pub fn diagnostics(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |field: &str, msg: String| out.push((field.to_string(), msg));
        match self.kind {
            IllusionKind::Flip => {
                if self.n != 1 || self.m != 2 {
                    push(
                        "n/m",
                        format!("flip requires n=1, m=2 (got n={}, m={})", self.n, self.m),
                    );
                }
            }
            IllusionKind::RotationOverlay => {
                if self.n != 2 {
                    push(
                        "n",
                        format!("rotation_overlay requires n=2 (got {})", self.n),
                    );
                }
                if !(2..=4).contains(&self.m) {
                    push(
                        "m",
                        format!("rotation_overlay requires 2 <= m <= 4 (got {})", self.m),
                    );
                }
            }
            IllusionKind::HiddenOverlay => {
                if self.n != 4 || self.m != 5 {
                    push(
                        "n/m",
                        format!(
                            "hidden_overlay requires n=4, m=5 (got n={}, m={})",
                            self.n, self.m
                        ),
                    );
                }
            }
            IllusionKind::Custom => match &self.custom {
                None => push(
                    "custom",
                    "custom kind requires arrangement expressions".into(),
                ),
                Some(exprs) => {
                    if exprs.len() != self.m {
                        push(
                            "m",
                            format!("{} custom arrangements for m={}", exprs.len(), self.m),
                        );
                    }
                    for (j, e) in exprs.iter().enumerate() {
                        match e.max_prime_index() {
                            Some(i) if i >= self.n => push(
                                &format!("custom[{j}]"),
                                format!("references prime {i} but n={}", self.n),
                            ),
                            None => push(&format!("custom[{j}]"), "references no prime".into()),
                            _ => {}
                        }
                        if has_empty_product(e) {
                            push(&format!("custom[{j}]"), "product with no factors".into());
                        }
                    }
                }
            },
        }
        if self.n == 0 {
            push("n", "at least one prime image is required".into());
        }
        if self.weights.len() != self.m {
            push(
                "weights",
                format!("expected {} weights, got {}", self.m, self.weights.len()),
            );
        }
        for (i, w) in self.weights.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                push(
                    &format!("weights[{i}]"),
                    format!("weights must be > 0 (got {w})"),
                );
            }
        }
        if self.targets.len() != self.m {
            push(
                "targets",
                format!("expected {} targets, got {}", self.m, self.targets.len()),
            );
        }
        match (self.kind, self.brightness_k) {
            (IllusionKind::Flip, Some(_)) => {
                push("brightness_k", "flip has no brightness constant".into())
            }
            (IllusionKind::RotationOverlay | IllusionKind::HiddenOverlay, None) => push(
                "brightness_k",
                "overlay kinds require a brightness constant".into(),
            ),
            (_, Some(k)) if !(k.is_finite() && k > 0.0) => {
                push("brightness_k", format!("brightness must be > 0 (got {k})"))
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                diags
                    .iter()
                    .map(|(f, m)| format!("{f}: {m}"))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    pub fn arrangements(&self) -> Vec<Arrangement> {
        let exprs: Vec<ArrangementExpr> = match self.kind {
            IllusionKind::Flip => vec![
                ArrangementExpr::prime(0),
                ArrangementExpr::prime(0).rotate(2),
            ],
            IllusionKind::RotationOverlay => (0..self.m as u32)
                .map(|j| {
                    ArrangementExpr::overlay(
                        vec![
                            ArrangementExpr::prime(0),
                            ArrangementExpr::prime(1).rotate(j),
                        ],
                        self.squash,
                    )
                })
                .collect(),
            IllusionKind::HiddenOverlay => {
                let mut v: Vec<_> = (0..4).map(ArrangementExpr::prime).collect();
                v.push(ArrangementExpr::overlay(
                    (0..4).map(ArrangementExpr::prime).collect(),
                    self.squash,
                ));
                v
            }
            IllusionKind::Custom => self.custom.clone().unwrap_or_default(),
        };
        exprs
            .into_iter()
            .enumerate()
            .map(|(index, expr)| Arrangement { index, expr })
            .collect()
    }

    /// Whether some arrangement turns a prime by an odd number of quarter turns.
    pub fn requires_square_primes(&self) -> bool {
        self.arrangements()
            .iter()
            .any(|a| a.expr.has_odd_rotation())
    }

    fn check_primes(&self, primes: &[RgbImage]) -> Result<()> {
        if primes.len() != self.n {
            return Err(Error::Shape(format!(
                "expected {} primes, got {}",
                self.n,
                primes.len()
            )));
        }
        let first = &primes[0];
        for p in &primes[1..] {
            first.check_same_shape(p)?;
        }
        if self.requires_square_primes() && !first.is_square() {
            return Err(Error::Shape(format!(
                "rotation arrangements need square primes (got {}x{})",
                first.height(),
                first.width()
            )));
        }
        Ok(())
    }
}

/// Derived image at 0-based position `j`.
pub fn derive(spec: &IllusionSpec, primes: &[RgbImage], j: usize) -> Result<RgbImage> {
    derive_with_brightness(spec, primes, j, spec.brightness())
}

pub(crate) fn derive_with_brightness(
    spec: &IllusionSpec,
    primes: &[RgbImage],
    j: usize,
    brightness: f64,
) -> Result<RgbImage> {
    spec.check_primes(primes)?;
    let arrangement = spec
        .arrangements()
        .into_iter()
        .nth(j)
        .ok_or_else(|| Error::OutOfRange(format!("derived index {j} with m={}", spec.m)))?;
    Ok(arrangement.expr.eval(primes, brightness))
}

pub fn derive_all(spec: &IllusionSpec, primes: &[RgbImage]) -> Result<Vec<RgbImage>> {
    spec.check_primes(primes)?;
    let k = spec.brightness();
    Ok(spec
        .arrangements()
        .iter()
        .map(|a| a.expr.eval(primes, k))
        .collect())
}

/// Pulls gradients on the derived images back onto the primes.
pub fn backward_all(
    spec: &IllusionSpec,
    primes: &[RgbImage],
    derived_grads: &[RgbImage],
) -> Result<Vec<RgbImage>> {
    spec.check_primes(primes)?;
    if derived_grads.len() != spec.m {
        return Err(Error::Shape(format!(
            "expected {} derived gradients, got {}",
            spec.m,
            derived_grads.len()
        )));
    }
    let (h, w) = (primes[0].height(), primes[0].width());
    let mut grads = vec![RgbImage::zeros(h, w); spec.n];
    let k = spec.brightness();
    for (a, g) in spec.arrangements().iter().zip(derived_grads) {
        primes[0].check_same_shape(g)?;
        a.expr.backward(primes, k, g, &mut grads);
    }
    Ok(grads)
}

fn has_empty_product(e: &ArrangementExpr) -> bool {
    match e {
        ArrangementExpr::Prime { .. } => false,
        ArrangementExpr::Product { factors } => {
            factors.is_empty() || factors.iter().any(has_empty_product)
        }
        ArrangementExpr::Rotate { input, .. }
        | ArrangementExpr::Scale { input, .. }
        | ArrangementExpr::Brightness { input }
        | ArrangementExpr::Tanh { input } => has_empty_product(input),
    }
}

/// Spot-checks that custom arrangements are pure, differentiable, range-closed
/// and monotone on random `size × size` primes.
pub fn check_custom_arrangements(spec: &IllusionSpec, size: usize, seed: u64) -> Result<()> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primes: Vec<RgbImage> = (0..spec.n)
        .map(|_| RgbImage::from_fn(size, size, |_, _, _| rng.random_range(0.05..0.95)))
        .collect();
    let k = spec.brightness();
    for a in spec.arrangements() {
        let fail = |what: &str| Error::Arrangement(format!("{} fails the {what} check", a.index));
        let out = a.expr.eval(&primes, k);
        if out != a.expr.eval(&primes, k) {
            return Err(fail("purity"));
        }
        let (lo, hi) = out.min_max();
        if lo < 0.0 || hi > 1.0 || !out.all_finite() {
            return Err(fail("range"));
        }

        let probe = RgbImage::from_fn(size, size, |_, _, _| rng.random_range(-1.0..1.0));
        let mut grads = vec![RgbImage::zeros(size, size); spec.n];
        a.expr.backward(&primes, k, &probe, &mut grads);
        let dot = |img: &RgbImage| {
            img.data()
                .iter()
                .zip(probe.data())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        for _ in 0..4 {
            let p = rng.random_range(0..spec.n);
            let idx = rng.random_range(0..primes[p].len());
            let h = 1e-6;
            let mut plus = primes.clone();
            plus[p].data_mut()[idx] += h;
            let mut minus = primes.clone();
            minus[p].data_mut()[idx] -= h;
            let fd = (dot(&a.expr.eval(&plus, k)) - dot(&a.expr.eval(&minus, k))) / (2.0 * h);
            let an = grads[p].data()[idx];
            if (fd - an).abs() > 1e-3 * fd.abs().max(an.abs()).max(1e-6) {
                return Err(fail("gradient"));
            }
            let brighter = a.expr.eval(&plus, k);
            if brighter
                .data()
                .iter()
                .zip(out.data())
                .any(|(b, o)| b - o < -1e-12)
            {
                return Err(fail("monotonicity"));
            }
        }
    }
    Ok(())
}
