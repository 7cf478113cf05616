//! The training phases and the evaluations that go with them.
//!
//! A batch is split into fixed chunks of [`REDUCE_CHUNK`] samples. Chunks
//! run in parallel; each sums its samples' gradients in index order and the
//! chunk sums are added in chunk order. The result depends only on the batch
//! contents, never on the worker count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{Phase, TrainConfig};
use super::data::Dataset;
use super::metrics::{MetricLog, MetricRecord};
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::model::{argmax, forward, DenseHead, Mode, Model, ModelConfig, ModelState, ParamGroup, CLS_INDEX};
use crate::numerics::kernels::add_into;
use crate::numerics::rng::{stream, streams};
use crate::numerics::{Tape, Tensor, Var};
use crate::selector::{importance_scores, predict_attention, select_tokens, selector_loss, SelectorParams};

pub const REDUCE_CHUNK: usize = 8;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "TOSA_THREADS";

/// A pool sized by `TOSA_THREADS` when set, else rayon's default.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub phase: Phase,
    pub steps: usize,
    pub epochs: Vec<EpochSummary>,
    pub warnings: Vec<String>,
}

struct SampleOutcome {
    loss: f64,
    correct: Option<bool>,
    grads: Vec<Tensor>,
}

struct BatchOutcome {
    loss: f64,
    correct: Option<usize>,
    grads: Vec<Tensor>,
}

/// Parameters bound as gradient leaves, in naming order.
fn bind_for(state: &ModelState, tape: &mut Tape, group: ParamGroup) -> (ModelState<Var>, Vec<(String, Var)>) {
    let mut leaves = Vec::new();
    let bound = state.map_named(&mut |n, t| {
        if ParamGroup::of(n) == group {
            let v = tape.param(t.clone());
            leaves.push((n.to_string(), v));
            v
        } else {
            tape.constant(t.clone())
        }
    });
    (bound, leaves)
}

fn collect_grads(tape: &mut Tape, loss: Var, leaves: &[(String, Var)]) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(leaves
        .iter()
        .map(|(_, v)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec())))
        .collect())
}

fn reduce_batch<F>(indices: &[usize], sample: &F) -> Result<BatchOutcome>
where
    F: Fn(usize) -> Result<SampleOutcome> + Sync,
{
    let partial: Vec<BatchOutcome> = indices
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc: Option<BatchOutcome> = None;
            for &i in chunk {
                let s = sample(i)?;
                match acc.as_mut() {
                    None => {
                        acc = Some(BatchOutcome {
                            loss: s.loss,
                            correct: s.correct.map(usize::from),
                            grads: s.grads,
                        })
                    }
                    Some(a) => {
                        a.loss += s.loss;
                        a.correct = a.correct.zip(s.correct).map(|(c, k)| c + usize::from(k));
                        for (g, sg) in a.grads.iter_mut().zip(&s.grads) {
                            add_into(g.data_mut(), sg.data());
                        }
                    }
                }
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect::<Result<_>>()?;
    let mut it = partial.into_iter();
    let mut total = it.next().ok_or_else(|| Error::Usage("empty batch".into()))?;
    for p in it {
        total.loss += p.loss;
        total.correct = total.correct.zip(p.correct).map(|(a, b)| a + b);
        for (g, pg) in total.grads.iter_mut().zip(&p.grads) {
            add_into(g.data_mut(), pg.data());
        }
    }
    let n = indices.len() as f64;
    total.loss /= n;
    for g in &mut total.grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(total)
}

fn diverged(phase: Phase, epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged {
        phase: phase.as_str(),
        epoch,
        step,
        loss,
    }
}

fn group_names(state: &ModelState, group: ParamGroup) -> Vec<String> {
    let mut names = Vec::new();
    state.for_each_named(&mut |n, _| {
        if ParamGroup::of(n) == group {
            names.push(n.to_string());
        }
    });
    names
}

/// Shared epoch/batch/optimizer loop. `sample` maps the current state and a
/// dataset index to a loss and the gradients of `group`'s parameters, in
/// naming order.
fn train_loop<F>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut MetricLog,
    group: ParamGroup,
    sample: F,
) -> Result<TrainReport>
where
    F: Fn(&ModelState, usize) -> Result<SampleOutcome> + Sync,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let pool = worker_pool()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay)?;
    let mut rng = stream(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct_sum: Option<usize> = Some(0);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let state = &model.state;
            let outcome = pool.install(|| reduce_batch(batch, &|i| sample(state, i)));
            let outcome = match outcome {
                Ok(o) => o,
                Err(Error::NonFinite { .. }) => return Err(diverged(cfg.phase, epoch, step, f64::NAN)),
                Err(e) => return Err(e),
            };
            if !outcome.loss.is_finite() {
                return Err(diverged(cfg.phase, epoch, step, outcome.loss));
            }
            let names = group_names(&model.state, group);
            let grads: BTreeMap<String, Tensor> = names.into_iter().zip(outcome.grads).collect();
            opt.apply(&mut model.state, &grads)?;
            let accuracy = outcome.correct.map(|c| c as f64 / batch.len() as f64);
            log.push(MetricRecord {
                phase: cfg.phase,
                epoch,
                step: Some(step),
                loss: outcome.loss,
                accuracy,
            });
            loss_sum += outcome.loss * batch.len() as f64;
            correct_sum = correct_sum.zip(outcome.correct).map(|(a, b)| a + b);
        }
        let n = data.len() as f64;
        let summary = EpochSummary {
            epoch,
            loss: loss_sum / n,
            accuracy: correct_sum.map(|c| c as f64 / n),
        };
        log.push(MetricRecord {
            phase: cfg.phase,
            epoch,
            step: None,
            loss: summary.loss,
            accuracy: summary.accuracy,
        });
        epochs.push(summary);
    }
    Ok(TrainReport {
        phase: cfg.phase,
        steps: step,
        epochs,
        warnings: Vec::new(),
    })
}

fn classification_sample(
    state: &ModelState,
    schedule: &ModelConfig,
    data: &Dataset,
    i: usize,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let (bound, leaves) = bind_for(state, &mut tape, ParamGroup::Backbone);
    let fwd = forward(&mut tape, &data.image(i), &bound, schedule, Mode::Classify)?;
    let label = data.labels[i];
    let correct = argmax(tape.value(fwd.output).data()) == label;
    let lp = tape.log_softmax(fwd.output, 1)?;
    let loss = tape.nll(lp, label)?;
    let value = tape.value(loss).data()[0];
    Ok(SampleOutcome {
        loss: value,
        correct: Some(correct),
        grads: collect_grads(&mut tape, loss, &leaves)?,
    })
}

fn check_phase(cfg: &TrainConfig, phase: Phase) -> Result<()> {
    if cfg.phase != phase {
        return Err(Error::Usage(format!("{} config passed to the {phase} phase", cfg.phase)));
    }
    Ok(())
}

/// Cross-entropy training of the all-standard model. Only backbone and
/// classifier weights change.
pub fn pretrain(model: &mut Model, data: &Dataset, cfg: &TrainConfig, log: &mut MetricLog) -> Result<TrainReport> {
    check_phase(cfg, Phase::Pretrain)?;
    data.check_fits(&model.config)?;
    let schedule = model.config.all_standard();
    train_loop(model, data, cfg, log, ParamGroup::Backbone, |state, i| {
        classification_sample(state, &schedule, data, i)
    })
}

/// Cross-entropy through the selective schedule. Selectors only route,
/// so they receive no gradient and stay bit-identical.
pub fn finetune(model: &mut Model, data: &Dataset, cfg: &TrainConfig, log: &mut MetricLog) -> Result<TrainReport> {
    check_phase(cfg, Phase::Finetune)?;
    data.check_fits(&model.config)?;
    require_selectors(model)?;
    let schedule = model.config.clone();
    train_loop(model, data, cfg, log, ParamGroup::Backbone, |state, i| {
        classification_sample(state, &schedule, data, i)
    })
}

fn require_selectors(model: &Model) -> Result<()> {
    if model.config.tosa_layers.is_empty() {
        return Err(Error::config("the schedule has no selective layers"));
    }
    for l in &model.config.tosa_layers {
        if !model.state.selectors.contains_key(l) {
            return Err(Error::config(format!("no selector for selective layer {l}")));
        }
    }
    Ok(())
}

/// Teacher signals for every selective position of one image: the
/// preceding standard layer's pre-softmax maps and the true maps `[H, L, L]`
/// of the layer itself, both from the all-standard forward.
struct TeacherPair {
    layer: usize,
    b: Vec<Var>,
    a_true: Tensor,
}

fn teacher_pairs(tape: &mut Tape, model_state: &ModelState<Var>, config: &ModelConfig, image: &Tensor) -> Result<Vec<TeacherPair>> {
    let fwd = forward(tape, image, model_state, &config.all_standard(), Mode::Features)?;
    config
        .tosa_layers
        .iter()
        .map(|&l| {
            let prev = &fwd.layers[l - 2].artifacts;
            let cur = &fwd.layers[l - 1].artifacts;
            let maps: Vec<Tensor> = cur.a.iter().map(|&a| tape.value(a).clone()).collect();
            Ok(TeacherPair {
                layer: l,
                b: prev.b.clone(),
                a_true: stack_maps(&maps)?,
            })
        })
        .collect()
}

fn stack_maps(maps: &[Tensor]) -> Result<Tensor> {
    let (l, l2) = maps[0].dims2()?;
    let mut data = Vec::with_capacity(maps.len() * l * l2);
    for m in maps {
        data.extend_from_slice(m.data());
    }
    Tensor::new([maps.len(), l, l2], data)
}

fn selector_sample(state: &ModelState, config: &ModelConfig, data: &Dataset, i: usize) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let (bound, leaves) = bind_for(state, &mut tape, ParamGroup::Selector);
    let pairs = teacher_pairs(&mut tape, &bound, config, &data.image(i))?;
    let mut total: Option<Var> = None;
    for p in &pairs {
        let sel: &SelectorParams<Var> = &bound.selectors[&p.layer];
        let log_hat = predict_attention(&mut tape, &p.b, sel)?;
        let l = selector_loss(&mut tape, log_hat, &p.a_true)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("the schedule has no selective layers"))?;
    let value = tape.value(total).data()[0] / pairs.len() as f64;
    Ok(SampleOutcome {
        loss: value,
        correct: None,
        grads: collect_grads(&mut tape, total, &leaves)?,
    })
}

/// Trains every selector jointly against the frozen all-standard model.
/// The reported loss is the distillation loss averaged over positions.
pub fn train_selectors(model: &mut Model, data: &Dataset, cfg: &TrainConfig, log: &mut MetricLog) -> Result<TrainReport> {
    check_phase(cfg, Phase::Selector)?;
    data.check_fits(&model.config)?;
    require_selectors(model)?;
    let config = model.config.clone();
    let mut report = train_loop(model, data, cfg, log, ParamGroup::Selector, |state, i| {
        selector_sample(state, &config, data, i)
    })?;
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        if report.epochs.len() > 1 && last.loss >= first.loss {
            report.warnings.push(format!(
                "selector loss did not decrease over {} epochs ({} -> {})",
                report.epochs.len(),
                first.loss,
                last.loss
            ));
        }
    }
    Ok(report)
}

/// Final normalized features of every image under `schedule`.
pub fn features(model: &Model, schedule: &ModelConfig, data: &Dataset) -> Result<Vec<Tensor>> {
    let pool = worker_pool()?;
    pool.install(|| {
        (0..data.len())
            .into_par_iter()
            .map(|i| Ok(model.infer_with(schedule, &data.image(i), Mode::Features)?.output))
            .collect()
    })
}

/// Dense head on top of fixed features; the same op sequence as the
/// model's dense mode.
fn dense_head_forward(tape: &mut Tape, feats: Var, head: &DenseHead<Var>, patches: usize) -> Result<Var> {
    let rest: Vec<usize> = (1..=patches).collect();
    let p = tape.gather_rows(feats, &rest)?;
    let y = tape.matmul(p, head.weight)?;
    tape.add_row(y, head.bias)
}

/// Fits the per-patch regression head by MSE with the backbone frozen.
/// Features are computed once under `schedule` (the model's own schedule
/// or its all-standard view) and reused every epoch.
pub fn train_dense_head(
    model: &mut Model,
    schedule: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut MetricLog,
) -> Result<TrainReport> {
    check_phase(cfg, Phase::Dense)?;
    data.check_fits(&model.config)?;
    let targets = data
        .targets
        .as_ref()
        .ok_or_else(|| Error::Dataset("dense training needs per-patch targets".into()))?;
    if model.state.dense.is_none() {
        let cfg_model = model.config.clone();
        model.state.attach_dense_head(&cfg_model, cfg.seed);
    }
    let feats = features(model, schedule, data)?;
    let patches = model.config.patches();
    train_loop(model, data, cfg, log, ParamGroup::Dense, |state, i| {
        let mut tape = Tape::new();
        let head = state.dense.as_ref().expect("attached above");
        let weight = tape.param(head.weight.clone());
        let bias = tape.param(head.bias.clone());
        let f = tape.constant(feats[i].clone());
        let pred = dense_head_forward(&mut tape, f, &DenseHead { weight, bias }, patches)?;
        let loss = tape.mse(pred, &targets.outer(i))?;
        let value = tape.value(loss).data()[0];
        let leaves = [("dense.weight".to_string(), weight), ("dense.bias".to_string(), bias)];
        Ok(SampleOutcome {
            loss: value,
            correct: None,
            grads: collect_grads(&mut tape, loss, &leaves)?,
        })
    })
}

/// Dispatches on `cfg.phase`. The dense phase uses the model's schedule.
pub fn run_phase(model: &mut Model, data: &Dataset, cfg: &TrainConfig, log: &mut MetricLog) -> Result<TrainReport> {
    match cfg.phase {
        Phase::Pretrain => pretrain(model, data, cfg, log),
        Phase::Selector => train_selectors(model, data, cfg, log),
        Phase::Finetune => finetune(model, data, cfg, log),
        Phase::Dense => {
            let schedule = model.config.clone();
            train_dense_head(model, &schedule, data, cfg, log)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

fn parallel_sum<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let pool = worker_pool()?;
    let per: Vec<Vec<f64>> = pool.install(|| (0..n).into_par_iter().map(&f).collect::<Result<_>>())?;
    let mut it = per.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Dataset("empty split".into()))?;
    for v in it {
        add_into(&mut acc, &v);
    }
    Ok(acc)
}

/// Classification loss and accuracy of `model` run under `schedule`.
pub fn evaluate(model: &Model, schedule: &ModelConfig, data: &Dataset) -> Result<Evaluation> {
    data.check_fits(&model.config)?;
    let sums = parallel_sum(data.len(), |i| {
        let logits = model.infer_with(schedule, &data.image(i), Mode::Classify)?.output;
        let lp = crate::numerics::log_softmax_values(&logits, 1)?;
        let label = data.labels[i];
        let hit = if argmax(logits.data()) == label { 1.0 } else { 0.0 };
        Ok(vec![-lp.data()[label], hit])
    })?;
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: sums[0] / n,
        accuracy: sums[1] / n,
        samples: data.len(),
    })
}

/// Mean per-image MSE of the dense head under `schedule`.
pub fn dense_mse(model: &Model, schedule: &ModelConfig, data: &Dataset) -> Result<f64> {
    let targets = data
        .targets
        .as_ref()
        .ok_or_else(|| Error::Dataset("dense evaluation needs per-patch targets".into()))?;
    let sums = parallel_sum(data.len(), |i| {
        let pred = model.infer_with(schedule, &data.image(i), Mode::Dense)?.output;
        let t = targets.outer(i);
        let se: f64 = pred.data().iter().zip(t.data()).map(|(p, y)| (p - y) * (p - y)).sum();
        Ok(vec![se / t.numel() as f64])
    })?;
    Ok(sums[0] / data.len() as f64)
}

/// Mean distillation loss of the current selectors against the frozen
/// all-standard model.
pub fn selector_kld(model: &Model, data: &Dataset) -> Result<f64> {
    require_selectors(model)?;
    let sums = parallel_sum(data.len(), |i| {
        let mut tape = Tape::new();
        let bound = model.state.bind(&mut tape, &|_| false);
        let pairs = teacher_pairs(&mut tape, &bound, &model.config, &data.image(i))?;
        let mut s = 0.0;
        for p in &pairs {
            let log_hat = predict_attention(&mut tape, &p.b, &bound.selectors[&p.layer])?;
            let l = selector_loss(&mut tape, log_hat, &p.a_true)?;
            s += tape.value(l).data()[0];
        }
        Ok(vec![s / pairs.len() as f64])
    })?;
    Ok(sums[0] / data.len() as f64)
}

/// Mean per-head Jaccard overlap between the selector's top-K sets and the
/// top-K sets scored from the true maps of the same layer, both at the
/// model's ratio with the class token forced.
pub fn selector_overlap(model: &Model, data: &Dataset) -> Result<f64> {
    require_selectors(model)?;
    let ratio = model.config.ratio;
    let sums = parallel_sum(data.len(), |i| {
        let mut tape = Tape::new();
        let bound = model.state.bind(&mut tape, &|_| false);
        let pairs = teacher_pairs(&mut tape, &bound, &model.config, &data.image(i))?;
        let mut total = 0.0;
        let mut count = 0.0;
        for p in &pairs {
            let log_hat = predict_attention(&mut tape, &p.b, &bound.selectors[&p.layer])?;
            let predicted = select_tokens(&importance_scores(tape.value(log_hat))?, ratio, &[CLS_INDEX])?;
            let truth_scores = column_sums(&p.a_true)?;
            let truth = select_tokens(&truth_scores, ratio, &[CLS_INDEX])?;
            for (a, b) in predicted.heads.iter().zip(&truth.heads) {
                let inter = a.attended.iter().filter(|t| b.attended.contains(t)).count() as f64;
                let union = (a.attended.len() + b.attended.len()) as f64 - inter;
                total += inter / union;
                count += 1.0;
            }
        }
        Ok(vec![total / count])
    })?;
    Ok(sums[0] / data.len() as f64)
}

/// `[H, L, L]` maps to per-head received attention `[H, L]`.
fn column_sums(maps: &Tensor) -> Result<Tensor> {
    let &[h, q, l] = maps.shape() else {
        return Err(Error::dim(format!("expected [H, L, L] maps, got {:?}", maps.shape())));
    };
    let mut out = vec![0.0; h * l];
    for hi in 0..h {
        for qi in 0..q {
            let row = &maps.data()[(hi * q + qi) * l..(hi * q + qi + 1) * l];
            add_into(&mut out[hi * l..(hi + 1) * l], row);
        }
    }
    Tensor::new([h, l], out)
}
