//! Run configuration: a TOML document, optionally layered over a named preset
//! and patched with `--set key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use illusion_core::arrangements::{default_brightness, ArrangementExpr, IllusionKind, IllusionSpec, Squash};
use illusion_core::evaluation::{Embedder, MockEmbedder, PromptProtocol};
use illusion_core::guidance::{
    AnalyticOracleBackend, ExternalBackendConfig, ExternalDiffusionBackend, GuidanceBackend,
};
use illusion_core::optimizer::ScheduleConfig;
use illusion_core::parametric_image::{FfnConfig, ParametricImage, MIN_RESOLUTION};
use illusion_core::targets::{load_image_target, Resample, TargetSpec};
use illusion_core::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Diagnostic};
use crate::presets;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the preset this document was layered over, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Seeds prime initialization and every random stream of the run.
    #[serde(default)]
    pub seed: u64,
    /// Write `checkpoint.json` every this many steps; 0 only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub illusion: IllusionSection,
    #[serde(default)]
    pub prime: PrimeSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IllusionSection {
    pub kind: IllusionKind,
    pub targets: Vec<TargetSpec>,
    /// Defaults to `[1, 1, 1, 1, 3]` for the hidden overlay and all ones otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Defaults to 2 for the rotation overlay and 3 for the hidden overlay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness_k: Option<f64>,
    #[serde(default)]
    pub squash: Squash,
    /// Arrangement expressions of the custom kind, one per target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<ArrangementExpr>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimeKind {
    #[default]
    Ffn,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Resolution {
    Square(usize),
    Rect([usize; 2]),
}

impl Resolution {
    pub fn hw(self) -> (usize, usize) {
        match self {
            Resolution::Square(n) => (n, n),
            Resolution::Rect([h, w]) => (h, w),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimeSection {
    pub kind: PrimeKind,
    pub resolution: Resolution,
    pub ffn: FfnConfig,
}

impl Default for PrimeSection {
    fn default() -> Self {
        Self {
            kind: PrimeKind::Ffn,
            resolution: Resolution::Square(512),
            ffn: FfnConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSection {
    /// Closed-form denoiser; each prompt maps to one image.
    Oracle {
        /// Image for prompts not listed in `prompts`; mid-gray when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<PathBuf>,
        #[serde(default)]
        prompts: BTreeMap<String, PathBuf>,
    },
    External(ExternalBackendConfig),
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection::Oracle {
            target: None,
            prompts: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: String,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            dim: 64,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn diagnostics(&self, prefix: &str) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.kind != "mock" {
            out.push(Diagnostic::new(
                format!("{prefix}.kind"),
                format!("unknown embedder {:?}; available: \"mock\"", self.kind),
            ));
        }
        if self.dim == 0 {
            out.push(Diagnostic::new(format!("{prefix}.dim"), "must be > 0"));
        }
        out
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, CliError> {
        let d = self.diagnostics("embedder");
        if !d.is_empty() {
            return Err(CliError::Invalid(d));
        }
        Ok(Box::new(MockEmbedder::new(self.dim, self.seed)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub enabled: bool,
    /// Label of this run in reports.
    pub method: String,
    pub embedder: EmbedderConfig,
    pub protocol: PromptProtocol,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            enabled: false,
            method: "run".into(),
            embedder: EmbedderConfig::default(),
            protocol: PromptProtocol::default(),
        }
    }
}

/// Reads a TOML document, applies `overrides`, then layers it over its preset.
pub fn load_table(path: &Path, overrides: &[String]) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Read(path.to_path_buf(), e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Invalid(vec![Diagnostic::new("config", e.message())]))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    match table.get("preset") {
        None => Ok(table),
        Some(toml::Value::String(name)) => {
            let mut base = presets::table(name).ok_or_else(|| {
                CliError::Invalid(vec![Diagnostic::new(
                    "preset",
                    format!("unknown preset {name:?}; available: {}", presets::names().join(", ")),
                )])
            })?;
            merge(&mut base, table);
            Ok(base)
        }
        Some(_) => Err(CliError::Invalid(vec![Diagnostic::new("preset", "must be a string")])),
    }
}

/// Deep merge; values in `over` win.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`; the value is read as TOML and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key {key:?} is malformed")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key:?}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse(table: toml::Table) -> Result<RunConfig, CliError> {
    let mut diags = Vec::new();
    if table
        .get("schedule")
        .and_then(toml::Value::as_table)
        .is_some_and(|s| s.contains_key("seed"))
    {
        diags.push(Diagnostic::new("schedule.seed", "set the top-level `seed` instead"));
    }
    match RunConfig::deserialize(toml::Value::Table(table)) {
        Ok(cfg) if diags.is_empty() => Ok(cfg),
        Ok(_) => Err(CliError::Invalid(diags)),
        Err(e) => {
            diags.push(Diagnostic::new("config", e.message()));
            Err(CliError::Invalid(diags))
        }
    }
}

pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    parse(load_table(path, overrides)?)
}

fn default_weights(kind: IllusionKind, m: usize) -> Vec<f64> {
    if kind == IllusionKind::HiddenOverlay && m == 5 {
        vec![1.0, 1.0, 1.0, 1.0, 3.0]
    } else {
        vec![1.0; m]
    }
}

impl RunConfig {
    /// The illusion without validation; targets are not loaded yet.
    pub fn raw_spec(&self) -> IllusionSpec {
        let s = &self.illusion;
        let m = s.targets.len();
        let n = match s.kind {
            IllusionKind::Flip => 1,
            IllusionKind::RotationOverlay => 2,
            IllusionKind::HiddenOverlay => 4,
            IllusionKind::Custom => s
                .custom
                .iter()
                .flatten()
                .filter_map(ArrangementExpr::max_prime_index)
                .max()
                .map_or(0, |i| i + 1),
        };
        IllusionSpec {
            kind: s.kind,
            n,
            m,
            brightness_k: s.brightness_k.or_else(|| default_brightness(s.kind).ok()),
            squash: s.squash,
            weights: s.weights.clone().unwrap_or_else(|| default_weights(s.kind, m)),
            targets: s.targets.clone(),
            custom: s.custom.clone(),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.prime.resolution.hw()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            seed: self.seed,
            ..self.schedule.clone()
        }
    }

    /// Every violated invariant, with its config path. Reads image files but
    /// runs no optimization.
    pub fn diagnostics(&self, base_dir: &Path) -> Vec<Diagnostic> {
        let mut out: Vec<Diagnostic> = Vec::new();
        let spec = self.raw_spec();
        for (field, msg) in spec.diagnostics() {
            let field = if field.starts_with("custom") || field.starts_with("weights") || field.starts_with("targets") || field == "brightness_k" || field == "squash" {
                format!("illusion.{field}")
            } else {
                // n and m follow from the kind and the number of targets.
                format!("illusion.{field} (from illusion.kind and illusion.targets)")
            };
            out.push(Diagnostic::new(field, msg));
        }
        for (field, msg) in self.schedule().diagnostics() {
            out.push(Diagnostic::new(format!("schedule.{field}"), msg));
        }

        let (h, w) = self.resolution();
        if h < MIN_RESOLUTION || w < MIN_RESOLUTION {
            out.push(Diagnostic::new(
                "prime.resolution",
                format!("{h}x{w} is below the minimum of {MIN_RESOLUTION}"),
            ));
        }
        if h != w && spec.requires_square_primes() {
            out.push(Diagnostic::new(
                "prime.resolution",
                "quarter-turn rotations need square primes",
            ));
        }
        if self.prime.kind == PrimeKind::Ffn {
            if let Err(e) = self.prime.ffn.validate() {
                out.push(Diagnostic::new("prime.ffn", e.to_string()));
            }
        }

        for (j, t) in self.illusion.targets.iter().enumerate() {
            if let TargetSpec::Image { path, resample, .. } = t {
                if let Err(e) = load_image_target(&base_dir.join(path), (h.max(1), w.max(1)), *resample) {
                    out.push(Diagnostic::new(format!("illusion.targets[{j}].path"), e.to_string()));
                }
            }
        }
        if let BackendSection::Oracle { target, prompts } = &self.backend {
            if let Some(p) = target {
                if let Err(e) = load_image_target(&base_dir.join(p), (h.max(1), w.max(1)), Resample::Auto) {
                    out.push(Diagnostic::new("backend.target", e.to_string()));
                }
            }
            for (prompt, p) in prompts {
                if let Err(e) = load_image_target(&base_dir.join(p), (h.max(1), w.max(1)), Resample::Auto) {
                    out.push(Diagnostic::new(format!("backend.prompts.{prompt:?}"), e.to_string()));
                }
            }
        }
        if self.checkpoint_every > 0 && self.schedule.total_steps() == 0 {
            out.push(Diagnostic::new("checkpoint_every", "the schedule takes no steps"));
        }

        if self.evaluation.enabled {
            out.extend(self.evaluation.embedder.diagnostics("evaluation.embedder"));
            let prompts = self.illusion.targets.iter().filter(|t| t.is_text()).count();
            if prompts < 2 {
                out.push(Diagnostic::new(
                    "evaluation.enabled",
                    format!("evaluation needs at least 2 text targets, found {prompts}"),
                ));
            }
        }
        out
    }
}

/// Everything a run needs, validated and loaded.
pub struct Plan {
    pub spec: IllusionSpec,
    pub primes: Vec<ParametricImage>,
    pub backend: Box<dyn GuidanceBackend>,
    pub schedule: ScheduleConfig,
}

/// Directory that relative paths in the config at `path` resolve against.
pub fn config_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn prime_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl RunConfig {
    pub fn validate(&self, base_dir: &Path) -> Result<(), CliError> {
        let d = self.diagnostics(base_dir);
        if d.is_empty() {
            Ok(())
        } else {
            Err(CliError::Invalid(d))
        }
    }

    /// Joins every relative input path onto `base`.
    pub fn rebase_paths(&mut self, base: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.illusion.targets {
            if let TargetSpec::Image { path, .. } = t {
                rebase(path);
            }
        }
        if let BackendSection::Oracle { target, prompts } = &mut self.backend {
            target.iter_mut().for_each(rebase);
            prompts.values_mut().for_each(rebase);
        }
    }

    pub fn plan(&self, base_dir: &Path) -> Result<Plan, CliError> {
        self.validate(base_dir)?;
        let resolution = self.resolution();
        let mut spec = self.raw_spec();
        for t in &mut spec.targets {
            t.load(resolution, base_dir)?;
        }
        spec.validate()?;
        let primes = (0..spec.n)
            .map(|i| {
                let seed = prime_seed(self.seed, i);
                match self.prime.kind {
                    PrimeKind::Ffn => ParametricImage::ffn(resolution, seed, self.prime.ffn.clone()),
                    PrimeKind::Raw => ParametricImage::raw(resolution, seed),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let backend: Box<dyn GuidanceBackend> = match &self.backend {
            BackendSection::Oracle { target, prompts } => {
                let load = |p: &Path| load_image_target(&base_dir.join(p), resolution, Resample::Auto);
                let default = match target {
                    Some(p) => load(p)?,
                    None => RgbImage::filled(resolution.0, resolution.1, 0.5),
                };
                let mut oracle = AnalyticOracleBackend::new(default);
                for (prompt, p) in prompts {
                    oracle = oracle.with_prompt(prompt.clone(), load(p)?)?;
                }
                Box::new(oracle)
            }
            BackendSection::External(cfg) => Box::new(ExternalDiffusionBackend::connect(cfg.clone())?),
        };
        Ok(Plan {
            spec,
            primes,
            backend,
            schedule: self.schedule(),
        })
    }
}
