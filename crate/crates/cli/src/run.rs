//! The `run` verb.
//!
//! Output directory layout:
//!
//! | file | written |
//! |------|---------|
//! | `config.cfg` | effective config, before any step |
//! | `cost.json` | cost report, before any step (json format) |
//! | `<phase>.ckpt`, `model.ckpt` | after each trained phase |
//! | `metrics.csv` | rows of each completed phase (csv format) |
//! | `metrics.partial.csv` | rows of a phase that failed |
//! | `eval.json` | after the eval step (json format) |
//! | `progress` | names of completed steps, one per line |
//!
//! A rerun with the same effective config skips steps listed in
//! `progress` and continues from `model.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use tosa_core::config::{Document, Format, RunConfig, Step};
use tosa_core::costmodel::{model_cost, CostOptions};
use tosa_core::model::Model;
use tosa_core::training::{run_phase, MetricLog, Phase};

use crate::commands::{evaluation, print_evaluation, test_split, train_split, write_json};
use crate::Routing;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Only {
    Train(Phase),
    Eval,
}

impl From<Only> for Step {
    fn from(o: Only) -> Step {
        match o {
            Only::Train(p) => Step::Train(p),
            Only::Eval => Step::Eval,
        }
    }
}

/// Replaces or appends `key` in `[section]`, creating the section if needed.
fn set(doc: &mut Document, section: &str, key: &str, value: String) {
    let idx = match doc.sections.iter().position(|s| s.name == section) {
        Some(i) => i,
        None => {
            doc.sections.push(tosa_core::config::Section::new(section));
            doc.sections.len() - 1
        }
    };
    let s = &mut doc.sections[idx];
    match s.entries.iter_mut().find(|e| e.key == key) {
        Some(e) => e.value = value,
        None => s.push(key, value),
    }
}

/// Parses the config file with command-line overrides applied as if they
/// had been written in it, so phase sections that set their own seed keep
/// it.
fn effective_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>, routing: &Routing) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc = Document::parse(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = seed {
        set(&mut doc, "run", "seed", s.to_string());
    }
    if let Some(o) = out {
        set(&mut doc, "run", "out", o.display().to_string());
    }
    if let Some(r) = routing.ratio {
        set(&mut doc, "model", "ratio", r.to_string());
    }
    if let Some(s) = routing.skip_scope {
        set(&mut doc, "model", "skip_scope", s.to_string());
    }
    RunConfig::from_document(&doc).with_context(|| format!("in {}", path.display()))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    model.save(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn read_progress(path: &Path) -> Result<Vec<Step>> {
    match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<Step>().with_context(|| format!("corrupt {}", path.display())))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn mark_done(path: &Path, done: &mut Vec<Step>, step: Step) -> Result<()> {
    if !done.contains(&step) {
        done.push(step);
    }
    let text: String = done.iter().map(|s| format!("{s}\n")).collect();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, only: Option<Only>, routing: &Routing) -> Result<()> {
    let cfg = effective_config(config, seed, out, routing)?;
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;

    let echo = cfg.render();
    let echo_path = dir.join("config.cfg");
    match fs::read_to_string(&echo_path) {
        Ok(previous) if previous != echo => bail!(
            "{} holds a run with a different configuration; choose another --out or remove it",
            dir.display()
        ),
        Ok(_) => {}
        Err(_) => fs::write(&echo_path, &echo).with_context(|| format!("writing {}", echo_path.display()))?,
    }
    println!("effective config ({}):\n{echo}", echo_path.display());

    if cfg.wants(Format::Json) {
        write_json(&dir, "cost.json", &model_cost(&cfg.model, CostOptions::default())?)?;
    }

    let progress_path = dir.join("progress");
    let mut done = read_progress(&progress_path)?;
    let todo: Vec<Step> = match only {
        Some(o) => {
            let step = Step::from(o);
            ensure!(cfg.steps.contains(&step), "step '{step}' is not listed in [run] steps");
            vec![step]
        }
        None => cfg.steps.iter().copied().filter(|s| !done.contains(s)).collect(),
    };
    if todo.is_empty() {
        println!("all steps already completed");
        return Ok(());
    }
    for s in &done {
        if !todo.contains(s) {
            println!("{s}: already completed, skipping");
        }
    }

    let latest = dir.join("model.ckpt");
    let mut model = if latest.exists() {
        let m = Model::load(&latest).with_context(|| format!("loading {}", latest.display()))?;
        m.check_compatible(&cfg.model)?;
        m
    } else {
        Model::init(cfg.model.clone(), cfg.seed)?
    };

    let train = train_split(&cfg)?;
    let test = test_split(&cfg)?;
    for step in todo {
        match step {
            Step::Train(phase) => {
                let mut log = MetricLog::default();
                let result = run_phase(&mut model, &train, &cfg.train[&phase], &mut log);
                if cfg.wants(Format::Csv) {
                    let target = if result.is_ok() { "metrics.csv" } else { "metrics.partial.csv" };
                    let path = dir.join(target);
                    if result.is_err() {
                        let _ = fs::remove_file(&path);
                    }
                    log.append_csv(&path)?;
                }
                let report = result.with_context(|| format!("phase {phase} failed"))?;
                save_model(&model, &dir.join(format!("{phase}.ckpt")))?;
                save_model(&model, &latest)?;
                mark_done(&progress_path, &mut done, step)?;
                let last = report.epochs.last();
                println!(
                    "{phase}: {} steps, final epoch loss {:.6}{}",
                    report.steps,
                    last.map_or(f64::NAN, |e| e.loss),
                    last.and_then(|e| e.accuracy)
                        .map_or(String::new(), |a| format!(", accuracy {a:.4}"))
                );
                for w in &report.warnings {
                    println!("{phase}: warning: {w}");
                }
            }
            Step::Eval => {
                let data = test.as_ref().context("eval step needs a test split in [data]")?;
                let pretrained = dir.join("pretrain.ckpt");
                let baseline = if pretrained.exists() && phase_done(&done, Phase::Pretrain) {
                    Some(Model::load(&pretrained)?)
                } else {
                    None
                };
                let report = evaluation(&model, baseline.as_ref(), data)?;
                print_evaluation(&report);
                if cfg.wants(Format::Json) {
                    write_json(&dir, "eval.json", &report)?;
                }
                mark_done(&progress_path, &mut done, step)?;
            }
        }
    }
    Ok(())
}

fn phase_done(done: &[Step], p: Phase) -> bool {
    done.contains(&Step::Train(p))
}
