//! Analytic compute and activation-memory accounting.
//!
//! Matrix products are counted both as multiply-accumulates (`macs`) and as
//! FLOPs with one multiply-add = 2 FLOPs. Elementwise work is counted in
//! FLOPs only, at these per-element costs:
//!
//! | op                      | FLOPs per element |
//! |-------------------------|-------------------|
//! | logit scaling `1/√d_h`  | 1 |
//! | softmax / log-softmax   | 5 (max, subtract, exp, sum, divide) |
//! | layer norm              | 7 (sum, subtract, square, sum, scale, gain, bias) |
//! | GELU (tanh form)        | 8 |
//! | ReLU, bias add, residual add | 1 |
//! | importance score        | 2 (exp, column add) |
//! | top-K                   | 1 per candidate token |
//!
//! Totals cover the transformer layers. The patch embedding and classifier
//! are reported next to them, outside the totals, so a model total is
//! exactly the sum of its layers.

use serde::Serialize;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::selector::attended_count;
use crate::tosa_layer::SkipScope;

const SCALE: u64 = 1;
const SOFTMAX: u64 = 5;
const LAYER_NORM: u64 = 7;
const GELU: u64 = 8;
const SCORE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Standard,
    Selective,
}

/// Selector hyperparameters: hidden channels `C` and kernel width `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SelectorShape {
    pub hidden: u64,
    pub width: u64,
}

/// Per-component counts. Field order is the JSON key order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Components {
    pub qkv_proj: u64,
    pub attn_matmuls: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub elementwise: u64,
    pub selector: u64,
}

impl Components {
    pub fn total(&self) -> u64 {
        self.qkv_proj + self.attn_matmuls + self.out_proj + self.mlp + self.elementwise + self.selector
    }

    fn add(&mut self, o: &Components) {
        self.qkv_proj += o.qkv_proj;
        self.attn_matmuls += o.attn_matmuls;
        self.out_proj += o.out_proj;
        self.mlp += o.mlp;
        self.elementwise += o.elementwise;
        self.selector += o.selector;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    /// 1-based.
    pub layer: usize,
    pub kind: LayerKind,
    pub tokens: u64,
    /// Tokens per head in self-attention (`tokens` for standard layers).
    pub attended: u64,
    pub flops: Components,
    pub macs: Components,
    pub total_flops: u64,
    pub total_macs: u64,
    /// Peak live activations of the layer, in elements.
    pub activation_elems: u64,
}

/// Shape of one layer for [`layer_flops`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub tokens: u64,
    pub dim: u64,
    pub heads: u64,
    pub kind: LayerKind,
    pub ratio: f64,
    pub scope: SkipScope,
    /// Counted only for selective layers.
    pub selector: Option<SelectorShape>,
}

/// Component counts of one layer as `(flops, macs, activation elements)`.
///
/// Selective layers use `K` tokens wherever the scope reaches. Q/K/V and the
/// attention products are always reduced. `AttentionAndProj` also reduces
/// W_O and F, and `FullLayer` additionally reduces the MLP with its norm.
pub fn layer_flops(s: &LayerShape) -> (Components, Components, u64) {
    let (l, d, h) = (s.tokens, s.dim, s.heads);
    let k = match s.kind {
        LayerKind::Standard => l,
        LayerKind::Selective => attended_count(s.ratio, l as usize) as u64,
    };
    let selective = s.kind == LayerKind::Selective;
    let proj_tokens = if selective && s.scope != SkipScope::AttentionOnly { k } else { l };
    let mlp_tokens = if selective && s.scope == SkipScope::FullLayer { k } else { l };

    let mut macs = Components {
        // per head: K×D by D×(D/H), three times
        qkv_proj: 3 * k * d * d,
        // QKᵀ and A·V over H heads of width D/H
        attn_matmuls: 2 * k * k * d,
        // W_O and F
        out_proj: 2 * proj_tokens * d * d,
        mlp: 8 * mlp_tokens * d * d,
        elementwise: 0,
        selector: 0,
    };
    let mut flops = Components {
        qkv_proj: 2 * macs.qkv_proj,
        attn_matmuls: 2 * macs.attn_matmuls,
        out_proj: 2 * macs.out_proj,
        mlp: 2 * macs.mlp,
        elementwise: 0,
        selector: 0,
    };
    flops.elementwise = LAYER_NORM * l * d                 // LN1 sees every token
        + (SCALE + SOFTMAX) * h * k * k
        + proj_tokens * d                                   // F bias
        + l * d                                             // attention residual
        + LAYER_NORM * mlp_tokens * d
        + mlp_tokens * 4 * d * (1 + GELU)                   // hidden bias, GELU
        + mlp_tokens * d                                    // output bias
        + mlp_tokens * d; // MLP residual

    if let (true, Some(sel)) = (selective, s.selector) {
        let (c, w) = (sel.hidden, sel.width);
        // Each of the L query rows is a length-L sequence with H channels.
        macs.selector = l * l * (c * h * w + h * c * w);
        flops.selector = 2 * macs.selector
            + l * l * (c + h)          // conv biases
            + l * l * c                // ReLU
            + SOFTMAX * h * l * l      // log-softmax
            + SCORE * h * l * l        // importance scores
            + h * l; // top-K
    }

    let mut act = l * d * 2 + 3 * k * d + 2 * h * k * k + 4 * mlp_tokens * d;
    if let (true, Some(sel)) = (selective, s.selector) {
        act += l * l * (h + sel.hidden + h);
    }
    (flops, macs, act)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StemCost {
    pub patch_embed_macs: u64,
    pub classifier_macs: u64,
}

/// Model-level report. Field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub tokens: u64,
    /// Tokens per head at selective layers; `tokens` without any.
    pub attended: u64,
    pub ratio: f64,
    pub scope: SkipScope,
    pub tosa_layers: Vec<usize>,
    pub include_selector: bool,
    pub layers: Vec<LayerCost>,
    pub flops: Components,
    pub macs: Components,
    pub total_flops: u64,
    pub total_macs: u64,
    pub baseline_flops: u64,
    pub baseline_macs: u64,
    /// `1 - total_flops / baseline_flops`.
    pub reduction: f64,
    /// `1 - total_macs / baseline_macs`.
    pub reduction_macs: f64,
    pub activation_elems: u64,
    pub baseline_activation_elems: u64,
    pub stem: StemCost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostOptions {
    pub include_selector: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions { include_selector: true }
    }
}

fn layer_costs(config: &ModelConfig, opts: CostOptions) -> Vec<LayerCost> {
    let selector = opts.include_selector.then_some(SelectorShape {
        hidden: config.selector_hidden as u64,
        width: config.selector_width as u64,
    });
    (1..=config.depth)
        .map(|i| {
            let kind = if config.is_tosa(i) {
                LayerKind::Selective
            } else {
                LayerKind::Standard
            };
            let shape = LayerShape {
                tokens: config.tokens() as u64,
                dim: config.dim as u64,
                heads: config.heads as u64,
                kind,
                ratio: config.ratio,
                scope: config.scope,
                selector,
            };
            let (flops, macs, act) = layer_flops(&shape);
            LayerCost {
                layer: i,
                kind,
                tokens: shape.tokens,
                attended: match kind {
                    LayerKind::Standard => shape.tokens,
                    LayerKind::Selective => config.attended() as u64,
                },
                total_flops: flops.total(),
                total_macs: macs.total(),
                flops,
                macs,
                activation_elems: act,
            }
        })
        .collect()
}

/// Costs of `config`'s schedule against the same architecture with every
/// layer standard.
pub fn model_cost(config: &ModelConfig, opts: CostOptions) -> Result<CostReport> {
    config.validate()?;
    let layers = layer_costs(config, opts);
    let baseline = layer_costs(&config.all_standard(), opts);
    let mut flops = Components::default();
    let mut macs = Components::default();
    for l in &layers {
        flops.add(&l.flops);
        macs.add(&l.macs);
    }
    let total_flops = flops.total();
    let total_macs = macs.total();
    let baseline_flops: u64 = baseline.iter().map(|l| l.total_flops).sum();
    let baseline_macs: u64 = baseline.iter().map(|l| l.total_macs).sum();
    let act = layers.iter().map(|l| l.activation_elems).max().unwrap_or(0);
    let base_act = baseline.iter().map(|l| l.activation_elems).max().unwrap_or(0);
    Ok(CostReport {
        tokens: config.tokens() as u64,
        attended: if config.tosa_layers.is_empty() {
            config.tokens() as u64
        } else {
            config.attended() as u64
        },
        ratio: config.ratio,
        scope: config.scope,
        tosa_layers: config.tosa_layers.clone(),
        include_selector: opts.include_selector,
        layers,
        flops,
        macs,
        total_flops,
        total_macs,
        baseline_flops,
        baseline_macs,
        reduction: 1.0 - total_flops as f64 / baseline_flops as f64,
        reduction_macs: 1.0 - total_macs as f64 / baseline_macs as f64,
        activation_elems: act,
        baseline_activation_elems: base_act,
        stem: StemCost {
            patch_embed_macs: (config.patches() * config.patch_dim() * config.dim) as u64,
            classifier_macs: (config.dim * config.num_classes) as u64,
        },
    })
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }
}
