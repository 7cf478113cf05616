//! The full vision transformer: patch embedding, class token, learned
//! positional embeddings, a schedule of standard and selective layers, and
//! classification, per-patch and feature outputs.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;

use crate::attention::{block_forward, join, linear_init, AttentionArtifacts, BlockParams, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream, streams};
use crate::numerics::{Tape, Tensor, Var};
use crate::selector::{SelectionPlan, SelectorParams};
use crate::tosa_layer::{plan_from_maps, tosa_attention, ToSALayerParams};

/// The class token sits at row 0 and is attended by every head.
pub const CLS_INDEX: usize = 0;

const EMBED_STD: f64 = 0.02;

/// Per-token linear map to a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead<T = Tensor> {
    /// `D × 1`
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = Tensor> {
    /// `P × D` with `P = channels · patch²`.
    pub patch_weight: T,
    pub patch_bias: T,
    /// `1 × D`
    pub cls_token: T,
    /// `L × D`
    pub pos_embed: T,
    /// Layer `i` (1-based) is `blocks[i - 1]`.
    pub blocks: Vec<BlockParams<T>>,
    /// Keyed by the 1-based number of the selective layer each feeds.
    pub selectors: BTreeMap<usize, SelectorParams<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
    /// `D × classes`
    pub head_weight: T,
    pub head_bias: T,
    pub dense: Option<DenseHead<T>>,
}

/// Which parameters a name belongs to, for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Selector,
    Dense,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("selectors.") {
            ParamGroup::Selector
        } else if name.starts_with("dense.") {
            ParamGroup::Dense
        } else {
            ParamGroup::Backbone
        }
    }
}

impl ModelState<Tensor> {
    /// Fresh weights. Backbone and selectors draw from separate streams of
    /// `seed`, so changing the schedule never perturbs backbone weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = stream(seed, streams::INIT);
        let patch_weight = linear_init(config.patch_dim(), d, &mut rng);
        let cls_token = Tensor::randn([1, d], EMBED_STD, &mut rng);
        let pos_embed = Tensor::randn([config.tokens(), d], EMBED_STD, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_weight = linear_init(d, config.num_classes, &mut rng);

        let mut srng = stream(seed, streams::SELECTOR_INIT);
        let mut selectors = BTreeMap::new();
        for &i in &config.tosa_layers {
            let s = SelectorParams::init(config.heads, config.selector_hidden, config.selector_width, &mut srng)?;
            selectors.insert(i, s);
        }
        Ok(ModelState {
            patch_weight,
            patch_bias: Tensor::zeros([d]),
            cls_token,
            pos_embed,
            blocks,
            selectors,
            norm_gain: Tensor::full([d], 1.0),
            norm_bias: Tensor::zeros([d]),
            head_weight,
            head_bias: Tensor::zeros([config.num_classes]),
            dense: None,
        })
    }

    /// Replaces the dense head with a fresh one.
    pub fn attach_dense_head(&mut self, config: &ModelConfig, seed: u64) {
        let mut rng = stream(seed, streams::DENSE_INIT);
        self.dense = Some(DenseHead {
            weight: linear_init(config.dim, 1, &mut rng),
            bias: Tensor::zeros([1]),
        });
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let reference = ModelState::init(config, 0)?;
        let mut expected = BTreeMap::new();
        reference.for_each_named(&mut |n, t| {
            expected.insert(n.to_string(), t.shape().to_vec());
        });
        let mut problems = Vec::new();
        let mut seen = 0usize;
        self.for_each_named(&mut |n, t| {
            if ParamGroup::of(n) == ParamGroup::Dense {
                let ok = match n {
                    "dense.weight" => t.shape() == [config.dim, 1],
                    _ => t.shape() == [1],
                };
                if !ok {
                    problems.push(format!("{n} has shape {:?}", t.shape()));
                }
                return;
            }
            seen += 1;
            match expected.get(n) {
                Some(s) if s.as_slice() == t.shape() => {}
                Some(s) => problems.push(format!("{n} has shape {:?}, expected {s:?}", t.shape())),
                None => problems.push(format!("unexpected parameter {n}")),
            }
        });
        if seen != expected.len() && problems.is_empty() {
            problems.push(format!("{seen} parameters, expected {}", expected.len()));
        }
        if let Some(p) = problems.first() {
            return Err(Error::dim(format!("model state does not match config: {p}")));
        }
        Ok(())
    }

    /// Scalar parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_named(&mut |_, t| n += t.numel());
        n
    }

    /// Binds every tensor to `tape`; names for which `trainable` is true
    /// become gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> ModelState<Var> {
        self.map_named(&mut |n, t| {
            if trainable(n) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

impl<T> ModelState<T> {
    /// Applies `f` to every parameter in a fixed order under its dotted name.
    pub fn map_named<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelState<U> {
        ModelState {
            patch_weight: f("patch_embed.weight", &self.patch_weight),
            patch_bias: f("patch_embed.bias", &self.patch_bias),
            cls_token: f("cls_token", &self.cls_token),
            pos_embed: f("pos_embed", &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&format!("blocks.{}", i + 1), f))
                .collect(),
            selectors: self
                .selectors
                .iter()
                .map(|(&i, s)| (i, s.map_named(&format!("selectors.{i}"), f)))
                .collect(),
            norm_gain: f("norm.gain", &self.norm_gain),
            norm_bias: f("norm.bias", &self.norm_bias),
            head_weight: f("head.weight", &self.head_weight),
            head_bias: f("head.bias", &self.head_bias),
            dense: self.dense.as_ref().map(|d| DenseHead {
                weight: f("dense.weight", &d.weight),
                bias: f("dense.bias", &d.bias),
            }),
        }
    }

    pub fn for_each_named(&self, f: &mut dyn FnMut(&str, &T)) {
        let _ = self.map_named(&mut |n, t| f(n, t));
    }

    /// Same order as [`map_named`](Self::map_named).
    pub fn for_each_named_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("patch_embed.weight", &mut self.patch_weight);
        f("patch_embed.bias", &mut self.patch_bias);
        f("cls_token", &mut self.cls_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_named_mut(&format!("blocks.{}", i + 1), f);
        }
        for (i, s) in self.selectors.iter_mut() {
            s.for_each_named_mut(&join("selectors", &i.to_string()), f);
        }
        f("norm.gain", &mut self.norm_gain);
        f("norm.bias", &mut self.norm_bias);
        f("head.weight", &mut self.head_weight);
        f("head.bias", &mut self.head_bias);
        if let Some(d) = self.dense.as_mut() {
            f("dense.weight", &mut d.weight);
            f("dense.bias", &mut d.bias);
        }
    }
}

/// Splits a `C × H × W` image into row-major patches, each flattened in
/// `(channel, row, column)` order. Returns `patches × P`.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim(format!(
            "image shape {:?} does not match config {c}×{s}×{s}",
            image.shape()
        )));
    }
    let g = config.grid();
    let pd = config.patch_dim();
    let src = image.data();
    let mut out = Vec::with_capacity(g * g * pd);
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new([g * g, pd], out)
}

/// Token matrix `L × D`: projected patches after the class token, plus
/// positional embeddings.
pub fn embed(tape: &mut Tape, image: &Tensor, state: &ModelState<Var>, config: &ModelConfig) -> Result<Var> {
    let patches = tape.constant(patchify(image, config)?);
    let proj = tape.matmul(patches, state.patch_weight)?;
    let proj = tape.add_row(proj, state.patch_bias)?;
    let rest: Vec<usize> = (1..config.tokens()).collect();
    let tokens = tape.scatter_rows(&[(state.cls_token, &[CLS_INDEX]), (proj, &rest)])?;
    tape.add(tokens, state.pos_embed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Class-token logits, `1 × classes`.
    Classify,
    /// One scalar per patch token, `patches × 1`.
    Dense,
    /// Normalized final tokens, `L × D`.
    Features,
}

/// Routing decided for one selective layer.
#[derive(Clone, Debug)]
pub struct Selection {
    pub plan: SelectionPlan,
    /// Selector output, `[H, L, L]` log-probabilities.
    pub predicted: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// 1-based.
    pub layer: usize,
    /// Full `L × L` maps for standard layers, `K × K` per head otherwise.
    pub artifacts: AttentionArtifacts<Var>,
    pub selection: Option<Selection>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    pub layers: Vec<LayerTrace>,
}

impl Forward {
    /// Plans of every selective layer, in layer order.
    pub fn plans(&self) -> Vec<(usize, &SelectionPlan)> {
        self.layers
            .iter()
            .filter_map(|t| t.selection.as_ref().map(|s| (t.layer, &s.plan)))
            .collect()
    }
}

/// Runs the layer schedule of `config` on one image.
///
/// Selective layers take their plan from the selector fed by the previous
/// layer's pre-softmax maps. Selection is routing only: no gradient reaches
/// the selector through it.
pub fn forward(
    tape: &mut Tape,
    image: &Tensor,
    state: &ModelState<Var>,
    config: &ModelConfig,
    mode: Mode,
) -> Result<Forward> {
    if state.blocks.len() != config.depth {
        return Err(Error::dim(format!(
            "state has {} blocks, config depth {}",
            state.blocks.len(),
            config.depth
        )));
    }
    if mode == Mode::Dense && state.dense.is_none() {
        return Err(Error::config("dense mode requested but the model has no dense head"));
    }
    let mut x = embed(tape, image, state, config)?;
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(config.depth);
    for (i, block) in state.blocks.iter().enumerate() {
        let layer = i + 1;
        if config.is_tosa(layer) {
            let selector = state
                .selectors
                .get(&layer)
                .ok_or_else(|| Error::config(format!("no selector for selective layer {layer}")))?;
            let prev = layers
                .last()
                .ok_or_else(|| Error::config(format!("selective layer {layer} has no predecessor")))?;
            if prev.selection.is_some() {
                return Err(Error::config(format!("selective layer {layer} follows another selective layer")));
            }
            let b_maps = prev.artifacts.b.clone();
            let (plan, predicted) = plan_from_maps(tape, &b_maps, selector, config.ratio, &[CLS_INDEX])?;
            let params = ToSALayerParams {
                block,
                selector,
                ratio: config.ratio,
                scope: config.scope,
            };
            let (y, artifacts) = tosa_attention(tape, x, &params, &plan)?;
            x = y;
            layers.push(LayerTrace {
                layer,
                artifacts,
                selection: Some(Selection { plan, predicted }),
            });
        } else {
            let (y, artifacts) = block_forward(tape, x, block)?;
            x = y;
            layers.push(LayerTrace {
                layer,
                artifacts,
                selection: None,
            });
        }
    }
    let h = tape.layer_norm(x, state.norm_gain, state.norm_bias, 1, LN_EPS)?;
    let output = match mode {
        Mode::Features => h,
        Mode::Classify => {
            let cls = tape.gather_rows(h, &[CLS_INDEX])?;
            let logits = tape.matmul(cls, state.head_weight)?;
            tape.add_row(logits, state.head_bias)?
        }
        Mode::Dense => {
            let dense = state.dense.as_ref().expect("checked above");
            let rest: Vec<usize> = (1..config.tokens()).collect();
            let patches = tape.gather_rows(h, &rest)?;
            let pred = tape.matmul(patches, dense.weight)?;
            tape.add_row(pred, dense.bias)?
        }
    };
    Ok(Forward { output, layers })
}

/// Stored weights plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub state: ModelState,
}

/// Output of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub output: Tensor,
    pub plans: Vec<(usize, SelectionPlan)>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let state = ModelState::init(&config, seed)?;
        Ok(Model { config, state })
    }

    pub fn infer(&self, image: &Tensor, mode: Mode) -> Result<Inference> {
        self.infer_with(&self.config, image, mode)
    }

    /// Like [`infer`](Self::infer) under another schedule or routing of the
    /// same architecture (for instance [`ModelConfig::all_standard`]).
    pub fn infer_with(&self, config: &ModelConfig, image: &Tensor, mode: Mode) -> Result<Inference> {
        let mismatch = self.config.architecture_mismatch(config);
        if mismatch.iter().any(|k| *k != "tosa_layers") {
            return Err(Error::config(format!("config differs from the model in {}", mismatch.join(", "))));
        }
        let mut tape = Tape::new();
        let bound = self.state.bind(&mut tape, &|_| false);
        let fwd = forward(&mut tape, image, &bound, config, mode)?;
        Ok(Inference {
            output: tape.value(fwd.output).clone(),
            plans: fwd.plans().into_iter().map(|(l, p)| (l, p.clone())).collect(),
        })
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.infer(image, Mode::Classify)?.output)
    }

    /// Index of the largest logit; ties go to the lower class.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }

    /// Errors when `expected` disagrees with this model on any field that
    /// determines parameter shapes.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let mismatch = self.config.architecture_mismatch(expected);
        if mismatch.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint config conflicts with requested config in {}",
                mismatch.join(", ")
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.config, &self.state)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode_checkpoint(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
