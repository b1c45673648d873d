//! `illusion run`: optimize, then write the output directory.
//!
//! ```text
//! <out_dir>/
//!   primes/prime_<i>.png     printable prime images
//!   derived/d<j>.png         simulated views, one per target
//!   targets/t<j>.png         image targets and the latest refreshed targets
//!   trace.jsonl              one loss record per step
//!   checkpoint.json          resumable run state
//!   spec.json                the resolved illusion
//!   config.resolved.toml     the config after presets and overrides
//!   report/                  metrics, when evaluation is enabled
//!   index.html               contact sheet
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use illusion_core::evaluation::{evaluate_group, GroupInput, MetricsReport};
use illusion_core::optimizer::{resume, RunState, Stage, Trainer};
use illusion_core::{Error as CoreError, RgbImage};

use crate::config::{Plan, RunConfig};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ABORT_CHECKPOINT_FILE: &str = "checkpoint_abort.json";
pub const SPEC_FILE: &str = "spec.json";

pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io(path))
}

pub fn run(config_path: &Path, overrides: &[String], opts: &RunOptions) -> Result<PathBuf, CliError> {
    let cfg = crate::config::load(config_path, overrides)?;
    let base_dir = crate::config::config_dir(config_path);
    let plan = cfg.plan(base_dir)?;
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    for sub in ["primes", "derived", "targets"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(io(&d))?;
    }
    let resolved = resolved_toml(&cfg, base_dir)?;
    write_text(&out.join("config.resolved.toml"), &resolved)?;
    write_text(
        &out.join(SPEC_FILE),
        &serde_json::to_string_pretty(&plan.spec).map_err(CoreError::from)?,
    )?;

    let state = optimize(&cfg, &plan, &out, opts.resume)?;
    write_outputs(&cfg, &plan, &state, &out)?;
    Ok(out)
}

/// The config as it will run, loadable from any directory. Input paths are
/// made absolute; `schedule.seed` is dropped because the top-level seed owns it.
fn resolved_toml(cfg: &RunConfig, base_dir: &Path) -> Result<String, CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::Usage(format!("cannot serialize config: {e}"));
    let base = std::path::absolute(base_dir).map_err(io(base_dir))?;
    let mut cfg = cfg.clone();
    cfg.rebase_paths(&base);
    let mut table = toml::Table::try_from(&cfg).map_err(|e| err(&e))?;
    if let Some(toml::Value::Table(schedule)) = table.get_mut("schedule") {
        schedule.remove("seed");
    }
    toml::to_string_pretty(&table).map_err(|e| err(&e))
}

fn optimize(cfg: &RunConfig, plan: &Plan, out: &Path, resume_run: bool) -> Result<RunState, CliError> {
    let total = plan.schedule.total_steps();
    let mut trainer = Trainer::new(&plan.spec, plan.backend.as_ref(), &plan.schedule)?
        .with_abort_checkpoint(out.join(ABORT_CHECKPOINT_FILE))
        .with_observer(move |r| {
            if (r.step + 1) % 100 == 0 || r.step + 1 == total {
                log::info!("step {}/{total} [{:?}] loss {:.5}", r.step + 1, r.phase, r.total);
            }
        });
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut state = if resume_run && checkpoint.exists() {
        let s = resume(&checkpoint)?;
        log::info!("resuming at step {}", s.step);
        s
    } else {
        trainer.init_state(plan.primes.clone())?
    };

    if cfg.checkpoint_every == 0 {
        trainer.run(&mut state)?;
    } else {
        while state.stage != Stage::Done {
            trainer.run_steps(&mut state, cfg.checkpoint_every)?;
            state.save(&checkpoint)?;
        }
    }
    state.save(&checkpoint)?;
    Ok(state)
}

fn write_outputs(cfg: &RunConfig, plan: &Plan, state: &RunState, out: &Path) -> Result<(), CliError> {
    let primes = state.render_primes();
    for (i, p) in primes.iter().enumerate() {
        p.save_png(out.join("primes").join(format!("prime_{i}.png")))?;
    }
    let trainer = Trainer::new(&plan.spec, plan.backend.as_ref(), &plan.schedule)?;
    let derived = trainer.derived(state)?;
    for (j, d) in derived.iter().enumerate() {
        d.save_png(out.join("derived").join(format!("d{j}.png")))?;
    }
    let mut targets: Vec<Option<&RgbImage>> = plan.spec.targets.iter().map(|t| t.image_data()).collect();
    if let Some(dream) = &state.dream_targets {
        targets = dream.current.iter().map(Some).collect();
    }
    for (j, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            t.save_png(out.join("targets").join(format!("t{j}.png")))?;
        }
    }

    let trace = out.join("trace.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&trace).map_err(io(&trace))?);
    for r in &state.loss_history {
        let line = serde_json::to_string(r).map_err(CoreError::from)?;
        writeln!(file, "{line}").map_err(io(&trace))?;
    }
    file.flush().map_err(io(&trace))?;

    if cfg.evaluation.enabled {
        write_report(cfg, plan, &derived, out)?;
    }
    write_text(&out.join("index.html"), &contact_sheet_html(plan, state, &targets))
}

fn write_report(cfg: &RunConfig, plan: &Plan, derived: &[RgbImage], out: &Path) -> Result<(), CliError> {
    let (images, prompts): (Vec<RgbImage>, Vec<String>) = plan
        .spec
        .targets
        .iter()
        .zip(derived)
        .filter_map(|(t, d)| t.prompt().map(|p| (d.clone(), p.to_string())))
        .unzip();
    let embedder = cfg.evaluation.embedder.build()?;
    let group = evaluate_group(
        &GroupInput {
            group: "run".into(),
            method: cfg.evaluation.method.clone(),
            style: String::new(),
            images: &images,
            prompts: &prompts,
        },
        &[embedder.as_ref()],
        None,
    )?;
    let report = MetricsReport::from_groups(vec![group]);
    let dir = out.join("report");
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    report.write_json(dir.join("metrics.json"))?;
    report.write_csv(dir.join("metrics.csv"))?;
    report.write_plots(&dir)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn contact_sheet_html(plan: &Plan, state: &RunState, targets: &[Option<&RgbImage>]) -> String {
    let last = state.loss_history.last();
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>illusion run</title>\n<style>body{font-family:sans-serif}img{width:192px;image-rendering:pixelated;border:1px solid #ccc}td{padding:6px;vertical-align:top}</style>\n</head><body>\n",
    );
    let _ = writeln!(
        html,
        "<h1>{:?} illusion</h1>\n<p>{} steps, backend {}</p>",
        plan.spec.kind,
        state.step,
        escape(plan.backend.name())
    );
    html.push_str("<h2>Primes</h2>\n<table><tr>");
    for i in 0..plan.spec.n {
        let _ = write!(html, "<td><img src=\"primes/prime_{i}.png\"><br>prime {i}</td>");
    }
    html.push_str("</tr></table>\n<h2>Derived images</h2>\n<table><tr><th>view</th><th>derived</th><th>target</th><th>weight</th><th>last loss</th></tr>\n");
    for (j, t) in plan.spec.targets.iter().enumerate() {
        let target = if targets.get(j).copied().flatten().is_some() {
            format!("<img src=\"targets/t{j}.png\">")
        } else {
            String::new()
        };
        let loss = last
            .and_then(|r| r.per_derived.get(j))
            .map(|l| format!("{l:.5}"))
            .unwrap_or_default();
        let _ = writeln!(
            html,
            "<tr><td>{j}: {}</td><td><img src=\"derived/d{j}.png\"></td><td>{target}</td><td>{}</td><td>{loss}</td></tr>",
            escape(&t.label()),
            plan.spec.weights[j]
        );
    }
    html.push_str("</table>\n</body></html>\n");
    html
}
