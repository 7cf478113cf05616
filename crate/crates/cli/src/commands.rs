use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use tosa_core::config::{DataSource, RunConfig};
use tosa_core::costmodel::{model_cost, CostOptions, CostReport};
use tosa_core::mask;
use tosa_core::model::{Model, ModelConfig};
use tosa_core::tosa_layer::SkipScope;
use tosa_core::training::{
    dense_mse, evaluate, load_dataset, quadrant_dataset, Dataset, Evaluation, QuadrantSpec, Split,
};

use crate::Routing;

/// Where held-out data comes from.
#[derive(Args, Clone, Debug, Default)]
pub struct EvalSource {
    /// Dataset container holding a test split.
    #[arg(long, conflicts_with = "config")]
    pub data: Option<PathBuf>,
    /// Run config whose [data] section defines the test split.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

pub fn train_split(cfg: &RunConfig) -> Result<Dataset> {
    let d = match &cfg.data.source {
        DataSource::Quadrant { train_size, .. } => {
            let spec = cfg.data.quadrant_spec(&cfg.model).expect("quadrant source");
            quadrant_dataset(&spec, *train_size, cfg.data.seed, Split::Train)?
        }
        DataSource::Files { train, .. } => load_dataset(train)?,
    };
    d.check_fits(&cfg.model)?;
    Ok(d)
}

/// The held-out split, or `None` when the config has no test data.
pub fn test_split(cfg: &RunConfig) -> Result<Option<Dataset>> {
    let d = match &cfg.data.source {
        DataSource::Quadrant { test_size, .. } => {
            let spec = cfg.data.quadrant_spec(&cfg.model).expect("quadrant source");
            quadrant_dataset(&spec, *test_size, cfg.data.seed, Split::Test)?
        }
        DataSource::Files { test: Some(p), .. } => held_out(p)?,
        DataSource::Files { test: None, .. } => return Ok(None),
    };
    d.check_fits(&cfg.model)?;
    Ok(Some(d))
}

fn held_out(path: &Path) -> Result<Dataset> {
    let d = load_dataset(path)?;
    if d.split != Split::Test {
        bail!("{} holds a {} split; evaluation needs a test split", path.display(), d.split);
    }
    Ok(d)
}

fn eval_split(source: &EvalSource) -> Result<Dataset> {
    if let Some(p) = &source.data {
        return held_out(p);
    }
    if let Some(p) = &source.config {
        return test_split(&read_run_config(p)?)?
            .with_context(|| format!("{} defines no test split", p.display()));
    }
    bail!("no evaluation split: pass --data <test.tsds> or --config <run.cfg>")
}

pub fn apply_routing(config: &mut ModelConfig, routing: &Routing) -> Result<()> {
    if let Some(r) = routing.ratio {
        config.ratio = r;
    }
    if let Some(s) = routing.skip_scope {
        config.scope = s;
    }
    config.validate().context("after --ratio/--skip-scope overrides")?;
    Ok(())
}

fn load_model(path: &Path, routing: &Routing) -> Result<Model> {
    let mut model = Model::load(path).with_context(|| format!("loading {}", path.display()))?;
    apply_routing(&mut model.config, routing)?;
    Ok(model)
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub tosa: Evaluation,
    pub baseline: Evaluation,
    /// `"checkpoint"` when a separate baseline model was given, otherwise
    /// `"all_standard"` (the same weights with every layer standard).
    pub baseline_source: &'static str,
    pub dense_mse: Option<f64>,
}

pub fn evaluation(model: &Model, baseline: Option<&Model>, data: &Dataset) -> Result<EvalReport> {
    let tosa = evaluate(model, &model.config, data)?;
    let (baseline, source) = match baseline {
        Some(b) => (evaluate(b, &b.config.all_standard(), data)?, "checkpoint"),
        None => (evaluate(model, &model.config.all_standard(), data)?, "all_standard"),
    };
    let dense = match (&model.state.dense, &data.targets) {
        (Some(_), Some(_)) => Some(dense_mse(model, &model.config, data)?),
        _ => None,
    };
    Ok(EvalReport {
        split: data.split,
        samples: data.len(),
        tosa,
        baseline,
        baseline_source: source,
        dense_mse: dense,
    })
}

pub fn print_evaluation(r: &EvalReport) {
    println!(
        "{} split, {} samples: ToSA accuracy {:.4} (loss {:.4}), baseline accuracy {:.4} (loss {:.4})",
        r.split, r.samples, r.tosa.accuracy, r.tosa.loss, r.baseline.accuracy, r.baseline.loss
    );
    if let Some(m) = r.dense_mse {
        println!("dense head MSE {m:.6}");
    }
}

pub fn eval(checkpoint: &Path, source: &EvalSource, routing: &Routing, out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, routing)?;
    let data = eval_split(source)?;
    data.check_fits(&model.config)?;
    let report = evaluation(&model, None, &data)?;
    print_evaluation(&report);
    if let Some(dir) = out {
        write_json(dir, "eval.json", &report)?;
    }
    Ok(())
}

pub fn visualize(
    checkpoint: &Path,
    out: &Path,
    data: Option<&Path>,
    seed: u64,
    index: usize,
    blend: bool,
    routing: &Routing,
) -> Result<()> {
    let model = load_model(checkpoint, routing)?;
    let set = match data {
        Some(p) => load_dataset(p)?,
        None => quadrant_dataset(&QuadrantSpec::for_model(&model.config), index + 1, seed, Split::Test)?,
    };
    if index >= set.len() {
        bail!("image index {index} out of range for {} samples", set.len());
    }
    let (_, files) = mask::visualize(&model, &set.image(index), blend)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for f in &files {
        let path = out.join(&f.name);
        fs::write(&path, &f.pgm).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} masks to {}", files.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    name: &'static str,
    accuracy: f64,
    loss: f64,
    total_flops: u64,
    total_macs: u64,
    reduction: f64,
    reduction_macs: f64,
    tokens: u64,
    attended: u64,
    tosa_layers: Vec<usize>,
}

#[derive(Serialize)]
struct Report {
    samples: usize,
    scope: SkipScope,
    ratio: f64,
    include_selector: bool,
    rows: Vec<ReportRow>,
}

fn row(name: &'static str, e: &Evaluation, c: &CostReport) -> ReportRow {
    ReportRow {
        name,
        accuracy: e.accuracy,
        loss: e.loss,
        total_flops: c.total_flops,
        total_macs: c.total_macs,
        reduction: c.reduction,
        reduction_macs: c.reduction_macs,
        tokens: c.tokens,
        attended: c.attended,
        tosa_layers: c.tosa_layers.clone(),
    }
}

pub fn report(
    checkpoint: &Path,
    baseline: Option<&Path>,
    source: &EvalSource,
    routing: &Routing,
    out: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint, routing)?;
    let base = baseline
        .map(|p| Model::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    if let Some(b) = &base {
        b.check_compatible(&model.config).context("baseline checkpoint")?;
    }
    let data = eval_split(source)?;
    data.check_fits(&model.config)?;
    let eval = evaluation(&model, base.as_ref(), &data)?;
    let opts = CostOptions::default();
    let tosa_cost = model_cost(&model.config, opts)?;
    let base_cost = model_cost(&model.config.all_standard(), opts)?;
    let report = Report {
        samples: eval.samples,
        scope: model.config.scope,
        ratio: model.config.ratio,
        include_selector: opts.include_selector,
        rows: vec![row("baseline", &eval.baseline, &base_cost), row("tosa", &eval.tosa, &tosa_cost)],
    };
    println!("{:<10} {:>9} {:>14} {:>14} {:>10} {:>8}", "model", "accuracy", "FLOPs", "MACs", "reduction", "tokens");
    for r in &report.rows {
        println!(
            "{:<10} {:>9.4} {:>14} {:>14} {:>9.2}% {:>4}/{:<3}",
            r.name,
            r.accuracy,
            r.total_flops,
            r.total_macs,
            100.0 * r.reduction,
            r.attended,
            r.tokens
        );
    }
    if let Some(dir) = out {
        write_json(dir, "report.json", &report)?;
    }
    Ok(())
}

pub fn cost(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    preset: Option<&str>,
    exclude_selector: bool,
    all_scopes: bool,
    routing: &Routing,
    out: Option<&Path>,
) -> Result<()> {
    let mut model = match (config, checkpoint, preset) {
        (Some(p), _, _) => read_run_config(p)?.model,
        (_, Some(p), _) => Model::load(p).with_context(|| format!("loading {}", p.display()))?.config,
        (_, _, Some("deit-tiny")) => ModelConfig::deit_tiny(),
        (_, _, None | Some("desk")) => ModelConfig::default(),
        (_, _, Some(other)) => bail!("unknown preset '{other}' (expected desk or deit-tiny)"),
    };
    apply_routing(&mut model, routing)?;
    let opts = CostOptions {
        include_selector: !exclude_selector,
    };
    let text = if all_scopes {
        let reports = SkipScope::ALL
            .iter()
            .map(|&scope| model_cost(&ModelConfig { scope, ..model.clone() }, opts))
            .collect::<tosa_core::Result<Vec<_>>>()?;
        if let Some(dir) = out {
            write_json(dir, "cost.json", &reports)?;
        }
        serde_json::to_string_pretty(&reports)?
    } else {
        let report = model_cost(&model, opts)?;
        if let Some(dir) = out {
            write_json(dir, "cost.json", &report)?;
        }
        report.to_json()
    };
    println!("{text}");
    Ok(())
}
