//! What each derived image should look like.
//!
//! A target is either a text prompt, steered through the guidance backend,
//! or a static image (a QR code, a logo, a block of text) that the derived
//! image regresses onto directly. During the dream-target phase, text targets
//! are periodically regenerated from the current derived image with
//! image-to-image refresh; static targets never change.

use std::path::{Path, PathBuf};

use ::image::imageops::{self, FilterType};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arrangements::IllusionSpec;
use crate::error::{Error, Result};
use crate::guidance::{img2img, GuidanceBackend, Img2ImgConfig};
use crate::image::RgbImage;

/// Images with at most this many distinct colors are treated as binary-like.
pub const NEAREST_MAX_COLORS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Nearest-neighbor for images with few distinct colors, bilinear otherwise.
    #[default]
    Auto,
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Text {
        prompt: String,
    },
    Image {
        path: PathBuf,
        #[serde(default)]
        resample: Resample,
        /// Populated by [`TargetSpec::load`] or [`TargetSpec::static_image`].
        #[serde(skip)]
        image: Option<RgbImage>,
    },
}

impl TargetSpec {
    pub fn text(prompt: impl Into<String>) -> Self {
        TargetSpec::Text {
            prompt: prompt.into(),
        }
    }

    /// An image target read from disk when [`TargetSpec::load`] is called.
    pub fn image(path: impl Into<PathBuf>) -> Self {
        TargetSpec::Image {
            path: path.into(),
            resample: Resample::Auto,
            image: None,
        }
    }

    /// An image target held in memory.
    pub fn static_image(image: RgbImage) -> Self {
        TargetSpec::Image {
            path: PathBuf::new(),
            resample: Resample::Auto,
            image: Some(image),
        }
    }

    pub fn is_text(&self) -> bool {
        matches!(self, TargetSpec::Text { .. })
    }

    pub fn prompt(&self) -> Option<&str> {
        match self {
            TargetSpec::Text { prompt } => Some(prompt),
            TargetSpec::Image { .. } => None,
        }
    }

    pub fn image_data(&self) -> Option<&RgbImage> {
        match self {
            TargetSpec::Image { image, .. } => image.as_ref(),
            TargetSpec::Text { .. } => None,
        }
    }

    /// Human-readable label used in manifests and reports.
    pub fn label(&self) -> String {
        match self {
            TargetSpec::Text { prompt } => prompt.clone(),
            TargetSpec::Image { path, .. } => format!("image:{}", path.display()),
        }
    }

    /// Loads (or resamples) an image target to the working resolution.
    ///
    /// Relative paths are resolved against `base_dir`.
    pub fn load(&mut self, resolution: (usize, usize), base_dir: &Path) -> Result<()> {
        if let TargetSpec::Image {
            path,
            resample,
            image,
        } = self
        {
            match image {
                Some(img) if (img.height(), img.width()) == resolution => {}
                Some(img) => {
                    let bytes = img.to_rgb8();
                    *image = Some(resample_rgb8(&bytes, resolution, *resample));
                }
                None => {
                    let full = if path.is_absolute() {
                        path.clone()
                    } else {
                        base_dir.join(&path)
                    };
                    *image = Some(load_image_target(&full, resolution, *resample)?);
                }
            }
        }
        Ok(())
    }
}

fn distinct_colors(img: &::image::RgbImage, limit: usize) -> usize {
    let mut seen: Vec<[u8; 3]> = Vec::new();
    for px in img.pixels() {
        if !seen.contains(&px.0) {
            seen.push(px.0);
            if seen.len() > limit {
                break;
            }
        }
    }
    seen.len()
}

fn resample_rgb8(
    img: &::image::RgbImage,
    (height, width): (usize, usize),
    mode: Resample,
) -> RgbImage {
    if (img.height() as usize, img.width() as usize) == (height, width) {
        return RgbImage::from_rgb8(img);
    }
    let nearest = match mode {
        Resample::Nearest => true,
        Resample::Bilinear => false,
        Resample::Auto => distinct_colors(img, NEAREST_MAX_COLORS) <= NEAREST_MAX_COLORS,
    };
    let filter = if nearest {
        FilterType::Nearest
    } else {
        FilterType::Triangle
    };
    RgbImage::from_rgb8(&imageops::resize(img, width as u32, height as u32, filter))
}

/// Reads a PNG/JPEG target into `[0, 1]` RGB at the working resolution.
pub fn load_image_target(
    path: &Path,
    resolution: (usize, usize),
    mode: Resample,
) -> Result<RgbImage> {
    let decoded = ::image::open(path).map_err(|e| Error::ImageLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::ImageLoad {
            path: path.to_path_buf(),
            reason: "zero-size image".into(),
        });
    }
    Ok(resample_rgb8(&decoded.to_rgb8(), resolution, mode))
}

/// Current dream targets `z_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamTargetState {
    pub current: Vec<RgbImage>,
    pub strength: f64,
    pub refresh_count: u64,
}

impl DreamTargetState {
    /// Static targets from the spec; text targets start at the derived images.
    pub fn new(spec: &IllusionSpec, derived: &[RgbImage]) -> Result<Self> {
        if derived.len() != spec.targets.len() {
            return Err(Error::Shape(format!(
                "{} derived images for {} targets",
                derived.len(),
                spec.targets.len()
            )));
        }
        let current = spec
            .targets
            .iter()
            .zip(derived)
            .map(|(t, d)| static_target(t, d).map(|s| s.unwrap_or_else(|| d.clone())))
            .collect::<Result<_>>()?;
        Ok(Self {
            current,
            strength: 1.0,
            refresh_count: 0,
        })
    }
}

fn static_target(target: &TargetSpec, derived: &RgbImage) -> Result<Option<RgbImage>> {
    match target {
        TargetSpec::Text { .. } => Ok(None),
        TargetSpec::Image { path, image, .. } => {
            let img = image.as_ref().ok_or_else(|| Error::ImageLoad {
                path: path.clone(),
                reason: "image target was not loaded".into(),
            })?;
            derived.check_same_shape(img)?;
            Ok(Some(img.clone()))
        }
    }
}

/// Regenerates text targets from the derived images at `strength`.
///
/// Returns a new state; the caller swaps it in, so a failed refresh leaves
/// the previous targets intact.
pub fn refresh_targets(
    state: &DreamTargetState,
    backend: &dyn GuidanceBackend,
    spec: &IllusionSpec,
    derived: &[RgbImage],
    strength: f64,
    config: &Img2ImgConfig,
    rng: &mut impl Rng,
) -> Result<DreamTargetState> {
    if derived.len() != spec.m || spec.targets.len() != spec.m {
        return Err(Error::Shape(format!(
            "expected {} derived images and targets, got {} and {}",
            spec.m,
            derived.len(),
            spec.targets.len()
        )));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("strength {strength} outside [0, 1]")));
    }
    let mut current = Vec::with_capacity(spec.m);
    for (target, d) in spec.targets.iter().zip(derived) {
        let z = match target {
            TargetSpec::Text { prompt } => img2img(backend, prompt, d, strength, config, rng)?,
            TargetSpec::Image { .. } => static_target(target, d)?.expect("image target"),
        };
        current.push(z);
    }
    Ok(DreamTargetState {
        current,
        strength,
        refresh_count: state.refresh_count + 1,
    })
}
