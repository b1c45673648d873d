//! Physical realization: simulated viewing under a chosen backlight and
//! print-ready export of the prime images.
//!
//! Printed colors drift from the screen rendering; no color management is
//! attempted here.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::arrangements::{derive, derive_with_brightness, IllusionKind, IllusionSpec};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const MM_PER_INCH: f64 = 25.4;
pub const CONTACT_SHEET_GAP: usize = 4;

/// What an overlay looks like with backlight `gain` in place of the
/// brightness constant. Flip illusions involve no backlight and ignore it.
pub fn simulate_view(
    spec: &IllusionSpec,
    primes: &[RgbImage],
    j: usize,
    gain: f64,
) -> Result<RgbImage> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::Config(format!(
            "backlight gain must be > 0 (got {gain})"
        )));
    }
    if spec.kind == IllusionKind::Flip || spec.brightness_k.is_none() {
        return derive(spec, primes, j);
    }
    derive_with_brightness(spec, primes, j, gain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrintLayout {
    pub dpi: f64,
    /// Printed width; `None` prints one pixel per dot.
    pub size_mm: Option<f64>,
    pub crop_marks: bool,
}

impl Default for PrintLayout {
    fn default() -> Self {
        Self {
            dpi: 300.0,
            size_mm: None,
            crop_marks: false,
        }
    }
}

impl PrintLayout {
    pub fn validate(&self) -> Result<()> {
        if !(self.dpi.is_finite() && self.dpi > 0.0) {
            return Err(Error::Config(format!("dpi must be > 0 (got {})", self.dpi)));
        }
        if let Some(mm) = self.size_mm {
            if !(mm.is_finite() && mm > 0.0) {
                return Err(Error::Config(format!("size_mm must be > 0 (got {mm})")));
            }
        }
        Ok(())
    }

    pub fn mm_to_px(&self, mm: f64) -> usize {
        (mm / MM_PER_INCH * self.dpi).round() as usize
    }

    /// Raster size `(height, width)` of a printed `height × width` image.
    pub fn raster_size(&self, height: usize, width: usize) -> (usize, usize) {
        match self.size_mm {
            None => (height, width),
            Some(mm) => {
                let w = self.mm_to_px(mm).max(1);
                let h = ((w as f64) * height as f64 / width as f64).round().max(1.0) as usize;
                (h, w)
            }
        }
    }

    fn margin_px(&self) -> usize {
        if self.crop_marks {
            self.mm_to_px(5.0).max(4)
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageLayout {
    pub prime: usize,
    pub file: PathBuf,
    pub size_mm: (f64, f64),
    pub dpi: f64,
    /// Raster of the printed image area, `(height, width)`.
    pub pixels: (usize, usize),
    pub crop_marks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrintSheet {
    pub pages: Vec<PageLayout>,
    pub contact_sheet: PathBuf,
    pub panels: usize,
}

fn with_crop_marks(img: ::image::RgbImage, margin: usize) -> ::image::RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut page = ::image::RgbImage::from_pixel(
        (w + 2 * margin) as u32,
        (h + 2 * margin) as u32,
        ::image::Rgb([255; 3]),
    );
    imageops::replace(&mut page, &img, margin as i64, margin as i64);
    let black = ::image::Rgb([0, 0, 0]);
    let len = margin - 2;
    // Marks sit in the margin, aligned with the trim edges.
    for &x in &[margin - 1, margin + w] {
        for &y0 in &[0, margin + h + 2] {
            for y in y0..y0 + len {
                page.put_pixel(x as u32, y as u32, black);
            }
        }
    }
    for &y in &[margin - 1, margin + h] {
        for &x0 in &[0, margin + w + 2] {
            for x in x0..x0 + len {
                page.put_pixel(x as u32, y as u32, black);
            }
        }
    }
    page
}

/// Horizontal strip of images separated by white gaps.
pub fn contact_sheet(panels: &[RgbImage]) -> Result<RgbImage> {
    let height = panels.iter().map(RgbImage::height).max().unwrap_or(0);
    if height == 0 {
        return Err(Error::Config(
            "contact sheet needs at least one panel".into(),
        ));
    }
    let width =
        panels.iter().map(RgbImage::width).sum::<usize>() + CONTACT_SHEET_GAP * (panels.len() - 1);
    let mut sheet = RgbImage::filled(height, width, 1.0);
    let mut x0 = 0;
    for p in panels {
        for r in 0..p.height() {
            for c in 0..p.width() {
                for ch in 0..3 {
                    sheet.set(r, x0 + c, ch, p.get(r, c, ch));
                }
            }
        }
        x0 += p.width() + CONTACT_SHEET_GAP;
    }
    Ok(sheet)
}

/// Writes `prime_<i>.png` for every prime, `contact_sheet.png` with the `m`
/// simulated views, and `print_manifest.json` into `out_dir`.
///
/// Rotation overlays have two primes, so the rotator is printed once; turning
/// it produces the four views.
pub fn export_print_sheets(
    spec: &IllusionSpec,
    primes: &[RgbImage],
    layout: &PrintLayout,
    out_dir: impl AsRef<Path>,
) -> Result<PrintSheet> {
    layout.validate()?;
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut pages = Vec::with_capacity(primes.len());
    for (i, prime) in primes.iter().enumerate() {
        let (h, w) = layout.raster_size(prime.height(), prime.width());
        let mut raster = prime.to_rgb8();
        if (h, w) != (prime.height(), prime.width()) {
            // Nearest keeps hard edges such as QR modules crisp.
            raster = imageops::resize(&raster, w as u32, h as u32, FilterType::Nearest);
        }
        if layout.crop_marks {
            raster = with_crop_marks(raster, layout.margin_px());
        }
        let file = out_dir.join(format!("prime_{i}.png"));
        raster.save(&file).map_err(|e| match e {
            ::image::ImageError::IoError(io) => Error::io(&file, io),
            other => Error::ImageLoad {
                path: file.clone(),
                reason: other.to_string(),
            },
        })?;
        let to_mm = |px: usize| px as f64 / layout.dpi * MM_PER_INCH;
        pages.push(PageLayout {
            prime: i,
            file,
            size_mm: (to_mm(h), to_mm(w)),
            dpi: layout.dpi,
            pixels: (h, w),
            crop_marks: layout.crop_marks,
        });
    }

    let views = (0..spec.m)
        .map(|j| derive(spec, primes, j))
        .collect::<Result<Vec<_>>>()?;
    let contact = out_dir.join("contact_sheet.png");
    contact_sheet(&views)?.save_png(&contact)?;

    let sheet = PrintSheet {
        pages,
        contact_sheet: contact,
        panels: views.len(),
    };
    let manifest = out_dir.join("print_manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&sheet)?)
        .map_err(|e| Error::io(&manifest, e))?;
    Ok(sheet)
}
