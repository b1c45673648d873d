//! `illusion evaluate`: score a directory of generated groups.
//!
//! The directory holds `prompts.json`:
//!
//! ```json
//! {"groups": [{"name": "g0", "prompts": ["...", "..."], "method": "C", "style": "..."}]}
//! ```
//!
//! and the images of group `g` at `groups/<g>/d<j>.png`.

use std::path::{Path, PathBuf};

use illusion_core::evaluation::{evaluate_group, GroupInput, MetricsReport};
use illusion_core::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::EmbedderConfig;
use crate::error::{CliError, Diagnostic};

pub const MANIFEST_FILE: &str = "prompts.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub name: String,
    pub prompts: Vec<String>,
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub style: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub embedders: Vec<EmbedderConfig>,
}

impl EvalConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
        toml::from_str(&text).map_err(|e| {
            CliError::Invalid(vec![Diagnostic::new(path.display().to_string(), e.message())])
        })
    }
}

pub fn image_path(images_dir: &Path, group: &str, j: usize) -> PathBuf {
    images_dir.join("groups").join(group).join(format!("d{j}.png"))
}

fn read_manifest(images_dir: &Path) -> Result<Manifest, CliError> {
    if !images_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} is not a directory",
            images_dir.display()
        )));
    }
    let path = images_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Invalid(vec![Diagnostic::new(
            MANIFEST_FILE,
            format!("no manifest in {}", images_dir.display()),
        )]));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Read(path.clone(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(vec![Diagnostic::new(MANIFEST_FILE, e.to_string())]))?;
    if manifest.groups.is_empty() {
        return Err(CliError::Invalid(vec![Diagnostic::new(
            "groups",
            "manifest lists no groups",
        )]));
    }
    Ok(manifest)
}

/// Every problem with the manifest and image files, in one pass.
pub fn check(images_dir: &Path, manifest: &Manifest) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (g, entry) in manifest.groups.iter().enumerate() {
        let at = format!("groups[{g}]");
        if !seen.insert(entry.name.as_str()) {
            out.push(Diagnostic::new(
                format!("{at}.name"),
                format!("duplicate group {:?}", entry.name),
            ));
        }
        if entry.prompts.len() < 2 {
            out.push(Diagnostic::new(
                format!("{at}.prompts"),
                "a group needs at least 2 prompts",
            ));
        }
        for j in 0..entry.prompts.len() {
            let p = image_path(images_dir, &entry.name, j);
            if !p.is_file() {
                out.push(Diagnostic::new(
                    format!("{at}.images[{j}]"),
                    format!("missing {}", p.display()),
                ));
            }
        }
    }
    out
}

pub fn evaluate(
    images_dir: &Path,
    config: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    let cfg = match config {
        Some(p) => EvalConfig::load(p)?,
        None => EvalConfig::default(),
    };
    let embedder_cfgs = if cfg.embedders.is_empty() {
        vec![EmbedderConfig::default()]
    } else {
        cfg.embedders
    };
    let embedders = embedder_cfgs
        .iter()
        .map(EmbedderConfig::build)
        .collect::<Result<Vec<_>, _>>()?;
    let embedders: Vec<_> = embedders.iter().map(|e| e.as_ref()).collect();

    let manifest = read_manifest(images_dir)?;
    let problems = check(images_dir, &manifest);
    if !problems.is_empty() {
        return Err(CliError::Invalid(problems));
    }

    let mut groups = Vec::with_capacity(manifest.groups.len());
    for entry in &manifest.groups {
        let images = (0..entry.prompts.len())
            .map(|j| RgbImage::load(image_path(images_dir, &entry.name, j)))
            .collect::<Result<Vec<_>, _>>()?;
        groups.push(evaluate_group(
            &GroupInput {
                group: entry.name.clone(),
                method: entry.method.clone(),
                style: entry.style.clone(),
                images: &images,
                prompts: &entry.prompts,
            },
            &embedders,
            None,
        )?);
        log::info!("scored group {}", entry.name);
    }
    let report = MetricsReport::from_groups(groups);

    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| images_dir.join("report"));
    std::fs::create_dir_all(&out).map_err(|e| {
        CliError::Core(illusion_core::Error::Io {
            path: out.clone(),
            source: e,
        })
    })?;
    report.write_json(out.join("metrics.json"))?;
    report.write_csv(out.join("metrics.csv"))?;
    report.write_plots(&out)?;
    Ok(report)
}
