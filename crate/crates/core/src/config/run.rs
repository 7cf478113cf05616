//! Run configuration: the model, the dataset, per-phase training settings
//! and the output layout, read from one text document.
//!
//! ```text
//! [run]
//! out = runs/toy
//! seed = 1
//! steps = pretrain, selector, finetune, eval
//! formats = csv, json
//!
//! [model]
//! ratio = 0.8
//!
//! [data]
//! source = quadrant
//! train_size = 1024
//! test_size = 256
//!
//! [pretrain]
//! epochs = 12
//! ```
//!
//! Every section but `[run]` is optional and falls back to defaults. A phase
//! section without `seed` inherits the run seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::text::{Document, Section};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{Phase, QuadrantSpec, TrainConfig};

/// One entry of `[run] steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Train(Phase),
    Eval,
}

impl Step {
    /// Legal execution order.
    pub const ORDER: [Step; 5] = [
        Step::Train(Phase::Pretrain),
        Step::Train(Phase::Selector),
        Step::Train(Phase::Finetune),
        Step::Train(Phase::Dense),
        Step::Eval,
    ];

    fn rank(self) -> usize {
        Step::ORDER.iter().position(|s| *s == self).expect("every step is ordered")
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Train(p) => write!(f, "{p}"),
            Step::Eval => f.write_str("eval"),
        }
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval" => Ok(Step::Eval),
            other => other
                .parse::<Phase>()
                .map(Step::Train)
                .map_err(|_| Error::config(format!("unknown step '{other}' (expected pretrain, selector, finetune, dense or eval)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    /// Metric logs.
    Csv,
    /// Cost and evaluation reports.
    Json,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::config(format!("unknown format '{other}' (expected csv or json)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural quadrant task sized to the model.
    Quadrant {
        train_size: usize,
        test_size: usize,
        pattern_size: usize,
        noise: f64,
    },
    /// Dataset containers on disk, relative to the working directory.
    Files { train: PathBuf, test: Option<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub seed: u64,
}

impl DataConfig {
    pub fn quadrant_spec(&self, model: &ModelConfig) -> Option<QuadrantSpec> {
        match &self.source {
            DataSource::Quadrant { pattern_size, noise, .. } => Some(QuadrantSpec {
                pattern_size: *pattern_size,
                noise: *noise,
                ..QuadrantSpec::for_model(model)
            }),
            DataSource::Files { .. } => None,
        }
    }

    fn to_section(&self) -> Section {
        let mut s = Section::new("data");
        match &self.source {
            DataSource::Quadrant {
                train_size,
                test_size,
                pattern_size,
                noise,
            } => {
                s.push("source", "quadrant");
                s.push("train_size", train_size);
                s.push("test_size", test_size);
                s.push("pattern_size", pattern_size);
                s.push("noise", noise);
            }
            DataSource::Files { train, test } => {
                s.push("source", "files");
                s.push("train", train.display());
                if let Some(t) = test {
                    s.push("test", t.display());
                }
            }
        }
        s.push("seed", self.seed);
        s
    }

    fn from_section(section: Option<&Section>, model: &ModelConfig, run_seed: u64) -> Result<Self> {
        let defaults = QuadrantSpec::for_model(model);
        let Some(section) = section else {
            return Ok(DataConfig {
                source: DataSource::Quadrant {
                    train_size: 1024,
                    test_size: 256,
                    pattern_size: defaults.pattern_size,
                    noise: defaults.noise,
                },
                seed: run_seed,
            });
        };
        let mut r = section.reader();
        let kind: String = r.or("source", "quadrant".to_string())?;
        let source = match kind.as_str() {
            "quadrant" => {
                let train_size = r.or("train_size", 1024)?;
                let test_size = r.or("test_size", 256)?;
                let pattern_size = r.or("pattern_size", defaults.pattern_size)?;
                let noise: f64 = r.or("noise", defaults.noise)?;
                for (key, n) in [("train_size", train_size), ("test_size", test_size)] {
                    if n == 0 {
                        return Err(r.reject(key, "must be positive"));
                    }
                }
                let spec = QuadrantSpec {
                    pattern_size,
                    noise,
                    ..defaults
                };
                if let Err(e) = spec.validate() {
                    let key = if (0.0..=1.0).contains(&noise) { "pattern_size" } else { "noise" };
                    return Err(r.reject(key, e));
                }
                DataSource::Quadrant {
                    train_size,
                    test_size,
                    pattern_size,
                    noise,
                }
            }
            "files" => {
                let train: PathBuf = r.required::<String>("train")?.into();
                let test: Option<PathBuf> = r.opt::<String>("test")?.map(Into::into);
                for (key, p) in [("train", Some(&train)), ("test", test.as_ref())] {
                    if let Some(p) = p {
                        if !p.is_file() {
                            return Err(r.reject(key, format!("{} does not exist", p.display())));
                        }
                    }
                }
                DataSource::Files { train, test }
            }
            other => return Err(r.reject("source", format!("unknown source '{other}' (expected quadrant or files)"))),
        };
        let seed = r.or("seed", run_seed)?;
        r.finish()?;
        Ok(DataConfig { source, seed })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub formats: Vec<Format>,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Settings for every trained phase in `steps`. Sections of other
    /// phases are validated, then dropped.
    pub train: BTreeMap<Phase, TrainConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text)?)
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let known = ["run", "model", "data", "pretrain", "selector", "finetune", "dense"];
        if let Some(s) = doc.sections.iter().find(|s| !known.contains(&s.name.as_str())) {
            return Err(Error::config(format!("line {}: unknown section [{}]", s.line, s.name)));
        }
        let run = doc
            .section("run")
            .ok_or_else(|| Error::config("missing [run] section"))?;
        let mut r = run.reader();
        let out: PathBuf = r.required::<String>("out")?.into();
        let seed: u64 = r.or("seed", 0)?;
        let steps: Vec<Step> = r.list("steps")?.unwrap_or_else(|| Step::ORDER.to_vec());
        if steps.is_empty() {
            return Err(r.reject("steps", "at least one step is required"));
        }
        if let Some(w) = steps.windows(2).find(|w| w[0].rank() >= w[1].rank()) {
            return Err(r.reject(
                "steps",
                format!("'{}' cannot follow '{}' (order is pretrain, selector, finetune, dense, eval)", w[1], w[0]),
            ));
        }
        let mut formats: Vec<Format> = r.list("formats")?.unwrap_or_else(|| vec![Format::Csv, Format::Json]);
        formats.sort();
        formats.dedup();
        r.finish()?;

        let model = match doc.section("model") {
            Some(s) => ModelConfig::from_section(s, &ModelConfig::default())?,
            None => ModelConfig::default(),
        };
        let data = DataConfig::from_section(doc.section("data"), &model, seed)?;
        let mut train = BTreeMap::new();
        for phase in Phase::ALL {
            let base = TrainConfig {
                seed,
                ..TrainConfig::defaults(phase)
            };
            let cfg = match doc.section(phase.as_str()) {
                Some(s) => TrainConfig::from_section(s, &base)?,
                None => base,
            };
            if steps.contains(&Step::Train(phase)) {
                train.insert(phase, cfg);
            }
        }
        Ok(RunConfig {
            out,
            seed,
            steps,
            formats,
            model,
            data,
            train,
        })
    }

    /// The effective configuration with every default written out.
    pub fn to_document(&self) -> Document {
        let mut run = Section::new("run");
        run.push("out", self.out.display());
        run.push("seed", self.seed);
        run.push("steps", join(&self.steps));
        run.push("formats", join(&self.formats));
        let mut sections = vec![run, self.model.to_section(), self.data.to_section()];
        sections.extend(self.train.values().map(TrainConfig::to_section));
        Document { sections }
    }

    pub fn render(&self) -> String {
        self.to_document().render()
    }

    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
[run]
out = runs/toy
seed = 5
steps = pretrain, selector, finetune, eval

[model]
image_size = 16
dim = 32

[pretrain]
epochs = 2
lr = 0.001
";

    #[test]
    fn defaults_fill_in_and_phase_seeds_inherit() {
        let c = RunConfig::parse(TOY).unwrap();
        assert_eq!(c.model.image_size, 16);
        assert_eq!(c.model.heads, ModelConfig::default().heads);
        assert_eq!(c.train.len(), 3);
        assert_eq!(c.train[&Phase::Pretrain].epochs, 2);
        assert!(c.train.values().all(|t| t.seed == 5));
        assert_eq!(c.data.seed, 5);
        assert!(c.wants(Format::Csv) && c.wants(Format::Json));
        assert!(matches!(c.data.source, DataSource::Quadrant { train_size: 1024, pattern_size: 4, .. }));
    }

    #[test]
    fn rendered_config_round_trips() {
        let c = RunConfig::parse(TOY).unwrap();
        let echo = c.render();
        let again = RunConfig::parse(&echo).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.render(), echo);
    }

    #[test]
    fn errors_name_key_and_line() {
        let bad_key = TOY.replace("lr = 0.001", "learning_rate = 0.001");
        let e = RunConfig::parse(&bad_key).unwrap_err().to_string();
        assert!(e.contains("line 12") && e.contains("learning_rate"), "{e}");

        let bad_order = TOY.replace("pretrain, selector, finetune", "selector, pretrain, finetune");
        let e = RunConfig::parse(&bad_order).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("cannot follow"), "{e}");

        let bad_value = TOY.replace("dim = 32", "dim = 30");
        let e = RunConfig::parse(&bad_value).unwrap_err().to_string();
        assert!(e.contains("[model]"), "{e}");

        let missing = "[run]\nseed = 1\n";
        assert!(RunConfig::parse(missing).unwrap_err().to_string().contains("'out'"));

        // Sections of phases left out of `steps` are still checked.
        let stray = format!("{TOY}\n[dense]\nepochz = 1\n");
        assert!(RunConfig::parse(&stray).unwrap_err().to_string().contains("epochz"));

        let unknown = format!("{TOY}\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&unknown).unwrap_err().to_string().contains("[extra]"));
    }

    #[test]
    fn missing_data_files_are_rejected() {
        let text = format!("{TOY}\n[data]\nsource = files\ntrain = /nonexistent/train.tsds\n");
        let e = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(e.contains("'train'") && e.contains("does not exist"), "{e}");
    }
}
