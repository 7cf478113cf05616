//! The token-selective transformer layer.
//!
//! Each head runs self-attention over its own attended subset. Skipped
//! tokens carry the head's slice of the attention-sublayer input (no
//! computation for that head), and an order-restoring scatter puts every
//! token back at its original position before the heads are concatenated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, block_forward, mlp, output_projection, project_qkv, AttentionArtifacts, BlockParams, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::selector::{importance_scores, predict_attention, select_tokens, validate_ratio, SelectionPlan, SelectorParams};

/// What a token skipped by the selector also bypasses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipScope {
    /// Skipped head slices rejoin before `W_O`; projections and MLP see every token.
    #[default]
    AttentionOnly,
    /// `W_O`/`F` run only for tokens attended by at least one head.
    AttentionAndProj,
    /// As `AttentionAndProj`, and tokens skipped by every head bypass the
    /// whole layer, MLP included.
    FullLayer,
}

impl SkipScope {
    pub const ALL: [SkipScope; 3] = [SkipScope::AttentionOnly, SkipScope::AttentionAndProj, SkipScope::FullLayer];

    pub fn as_str(self) -> &'static str {
        match self {
            SkipScope::AttentionOnly => "attention_only",
            SkipScope::AttentionAndProj => "attention_and_proj",
            SkipScope::FullLayer => "full_layer",
        }
    }
}

impl fmt::Display for SkipScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SkipScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "attention_only" => Ok(SkipScope::AttentionOnly),
            "attention_and_proj" => Ok(SkipScope::AttentionAndProj),
            "full_layer" => Ok(SkipScope::FullLayer),
            other => Err(Error::config(format!(
                "unknown skip scope '{other}' (expected attention_only, attention_and_proj or full_layer)"
            ))),
        }
    }
}

/// A selective layer: block weights, the selector feeding it, ratio and scope.
#[derive(Clone, Copy, Debug)]
pub struct ToSALayerParams<'a, T = Tensor> {
    pub block: &'a BlockParams<T>,
    pub selector: &'a SelectorParams<T>,
    pub ratio: f64,
    pub scope: SkipScope,
}

impl<T> ToSALayerParams<'_, T> {
    pub fn validate(&self) -> Result<()> {
        validate_ratio(self.ratio)
    }
}

fn check_ascending(indices: &[usize], what: &str) -> Result<()> {
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!("{what} indices must be strictly ascending")));
    }
    Ok(())
}

/// Rows `indices` (strictly ascending) of `x`.
pub fn gather_tokens(tape: &mut Tape, x: Var, indices: &[usize]) -> Result<Var> {
    check_ascending(indices, "gather")?;
    tape.gather_rows(x, indices)
}

/// Restores original token order from the attended output rows and the
/// skipped rows. The two index lists must partition `0..L`.
pub fn scatter_merge(
    tape: &mut Tape,
    attended_out: Var,
    skipped: Option<Var>,
    attended_idx: &[usize],
    skipped_idx: &[usize],
) -> Result<Var> {
    check_ascending(attended_idx, "attended")?;
    check_ascending(skipped_idx, "skipped")?;
    match skipped {
        Some(s) => tape.scatter_rows(&[(attended_out, attended_idx), (s, skipped_idx)]),
        None if skipped_idx.is_empty() => tape.scatter_rows(&[(attended_out, attended_idx)]),
        None => Err(Error::dim("skipped indices given without skipped rows")),
    }
}

fn complement(indices: &[usize], tokens: usize) -> Vec<usize> {
    let mut hit = vec![false; tokens];
    for &i in indices {
        hit[i] = true;
    }
    (0..tokens).filter(|&t| !hit[t]).collect()
}

/// Forward pass of a selective layer under a fixed plan.
///
/// Returns the layer output (always `L × D`) and the per-head maps of the
/// attended sub-problems (`K × K`).
pub fn tosa_attention(
    tape: &mut Tape,
    x: Var,
    layer: &ToSALayerParams<'_, Var>,
    plan: &SelectionPlan,
) -> Result<(Var, AttentionArtifacts<Var>)> {
    let (tokens, dim) = tape.value(x).dims2()?;
    let p = layer.block;
    let heads = p.attn.heads;
    if plan.tokens != tokens || plan.heads.len() != heads {
        return Err(Error::dim(format!(
            "plan covers {} tokens x {} heads, layer input is {tokens} tokens x {heads} heads",
            plan.tokens,
            plan.heads.len()
        )));
    }
    let dh = dim / heads;

    let h = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, 1, LN_EPS)?;
    let mut head_outs = Vec::with_capacity(heads);
    let mut art = AttentionArtifacts {
        b: Vec::with_capacity(heads),
        a: Vec::with_capacity(heads),
    };
    for (head, sel) in plan.heads.iter().enumerate() {
        let xa = gather_tokens(tape, h, &sel.attended)?;
        let (q, k, v) = project_qkv(tape, xa, &p.attn, head)?;
        let r = attend(tape, q, k, v)?;
        art.b.push(r.b);
        art.a.push(r.a);
        let out = if sel.skipped.is_empty() {
            r.out
        } else {
            let slice = tape.slice_cols(h, head * dh, (head + 1) * dh)?;
            let bypass = gather_tokens(tape, slice, &sel.skipped)?;
            scatter_merge(tape, r.out, Some(bypass), &sel.attended, &sel.skipped)?
        };
        head_outs.push(out);
    }
    let concat = tape.concat_cols(&head_outs)?;

    let touched = plan.attended_by_any();
    let untouched = complement(&touched, tokens);
    let y = match layer.scope {
        SkipScope::AttentionOnly => standard_tail(tape, x, concat, p)?,
        // every token attended somewhere: all scopes reduce to the standard tail
        _ if untouched.is_empty() => standard_tail(tape, x, concat, p)?,
        SkipScope::AttentionAndProj => {
            let cu = gather_tokens(tape, concat, &touched)?;
            let pu = output_projection(tape, cu, &p.attn)?;
            let raw = gather_tokens(tape, concat, &untouched)?;
            let a = scatter_merge(tape, pu, Some(raw), &touched, &untouched)?;
            let x1 = tape.add(x, a)?;
            let h2 = tape.layer_norm(x1, p.ln2_gain, p.ln2_bias, 1, LN_EPS)?;
            let m = mlp(tape, h2, p)?;
            tape.add(x1, m)?
        }
        SkipScope::FullLayer => {
            let cu = gather_tokens(tape, concat, &touched)?;
            let pu = output_projection(tape, cu, &p.attn)?;
            let xu = gather_tokens(tape, x, &touched)?;
            let x1 = tape.add(xu, pu)?;
            let h2 = tape.layer_norm(x1, p.ln2_gain, p.ln2_bias, 1, LN_EPS)?;
            let m = mlp(tape, h2, p)?;
            let yu = tape.add(x1, m)?;
            let xn = gather_tokens(tape, x, &untouched)?;
            scatter_merge(tape, yu, Some(xn), &touched, &untouched)?
        }
    };
    Ok((y, art))
}

fn standard_tail(tape: &mut Tape, x: Var, concat: Var, p: &BlockParams<Var>) -> Result<Var> {
    let a = output_projection(tape, concat, &p.attn)?;
    let x1 = tape.add(x, a)?;
    let h2 = tape.layer_norm(x1, p.ln2_gain, p.ln2_bias, 1, LN_EPS)?;
    let m = mlp(tape, h2, p)?;
    tape.add(x1, m)
}

/// Runs the selector on detached pre-softmax maps and builds the plan.
/// Returns the plan and the predicted log-maps `[H, L, L]`.
pub fn plan_from_maps(
    tape: &mut Tape,
    b_maps: &[Var],
    selector: &SelectorParams<Var>,
    ratio: f64,
    forced: &[usize],
) -> Result<(SelectionPlan, Tensor)> {
    // Selection is non-differentiable routing: the selector sees copies.
    let detached: Vec<Var> = b_maps.iter().map(|&b| tape.constant(tape.value(b).clone())).collect();
    let log_pred = predict_attention(tape, &detached, selector)?;
    let log_pred = tape.value(log_pred).clone();
    let scores = importance_scores(&log_pred)?;
    let plan = select_tokens(&scores, ratio, forced)?;
    Ok((plan, log_pred))
}

/// Everything a standard + selective layer pair exposes besides its output.
#[derive(Clone, Debug)]
pub struct PairDiagnostics {
    pub plan: SelectionPlan,
    /// Selector output, `[H, L, L]` log-probabilities.
    pub predicted: Tensor,
    /// The standard layer's maps, which feed the selector.
    pub teacher: AttentionArtifacts<Tensor>,
}

/// A standard block followed by a selective block whose plan comes from
/// the selector reading the standard block's pre-softmax maps.
pub fn tosa_pair_forward(
    tape: &mut Tape,
    x: Var,
    standard: &BlockParams<Var>,
    tosa: &ToSALayerParams<'_, Var>,
    forced: &[usize],
) -> Result<(Var, PairDiagnostics)> {
    tosa.validate()?;
    let (x1, art) = block_forward(tape, x, standard)?;
    let (plan, predicted) = plan_from_maps(tape, &art.b, tosa.selector, tosa.ratio, forced)?;
    let (y, _) = tosa_attention(tape, x1, tosa, &plan)?;
    Ok((
        y,
        PairDiagnostics {
            plan,
            predicted,
            teacher: art.resolve(tape),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients_multi;
    use crate::numerics::rng::seeded;

    struct Fixture {
        block: BlockParams,
        selector: SelectorParams,
        x: Tensor,
    }

    fn fixture(seed: u64, tokens: usize, dim: usize, heads: usize) -> Fixture {
        let mut rng = seeded(seed);
        Fixture {
            block: BlockParams::init(dim, heads, &mut rng).unwrap(),
            selector: SelectorParams::init(heads, 4 * heads, 3, &mut rng).unwrap(),
            x: Tensor::randn([tokens, dim], 1.0, &mut rng),
        }
    }

    fn random_plan(seed: u64, heads: usize, tokens: usize, ratio: f64) -> SelectionPlan {
        let mut rng = seeded(seed);
        let scores = Tensor::randn([heads, tokens], 1.0, &mut rng);
        select_tokens(&scores, ratio, &[0]).unwrap()
    }

    fn run_tosa(f: &Fixture, plan: &SelectionPlan, scope: SkipScope) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let bv = f.block.map_named("", &mut |_, t| tape.constant(t.clone()));
        let sv = f.selector.map_named("", &mut |_, t| tape.constant(t.clone()));
        let layer = ToSALayerParams {
            block: &bv,
            selector: &sv,
            ratio: plan.ratio,
            scope,
        };
        let (y, _) = tosa_attention(&mut tape, xv, &layer, plan).unwrap();
        tape.value(y).clone()
    }

    fn run_block(f: &Fixture) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let bv = f.block.map_named("", &mut |_, t| tape.constant(t.clone()));
        let (y, _) = block_forward(&mut tape, xv, &bv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn gather_examples() {
        let mut rng = seeded(1);
        let x = Tensor::randn([5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let all = gather_tokens(&mut tape, xv, &[0, 1, 2, 3, 4]).unwrap();
        assert!(tape.value(all).bit_eq(&x));
        assert!(gather_tokens(&mut tape, xv, &[2, 0]).is_err());
        assert!(gather_tokens(&mut tape, xv, &[1, 7]).is_err());
        let some = gather_tokens(&mut tape, xv, &[1, 3, 4]).unwrap();
        for (r, &i) in [1, 3, 4].iter().enumerate() {
            assert_eq!(tape.value(some).row(r), x.row(i));
        }
    }

    #[test]
    fn scatter_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let same = scatter_merge(&mut tape, a, None, &[0, 1], &[]).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0]);

        let att = tape.constant(Tensor::from_rows(&[vec![10.0]]).unwrap());
        let skip = tape.constant(Tensor::from_rows(&[vec![0.0], vec![20.0]]).unwrap());
        let y = scatter_merge(&mut tape, att, Some(skip), &[1], &[0, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 10.0, 20.0]);

        assert!(scatter_merge(&mut tape, att, Some(skip), &[1], &[0, 1]).is_err());
        assert!(scatter_merge(&mut tape, att, Some(skip), &[0], &[2, 3]).is_err());
    }

    #[test]
    fn full_ratio_is_bit_identical_to_standard_block() {
        let f = fixture(2, 7, 8, 2);
        let want = run_block(&f);
        let plan = SelectionPlan::full(2, 7);
        for scope in SkipScope::ALL {
            assert!(run_tosa(&f, &plan, scope).bit_eq(&want), "{scope}");
        }
        let scored = random_plan(3, 2, 7, 1.0);
        assert!(run_tosa(&f, &scored, SkipScope::AttentionOnly).bit_eq(&want));
    }

    #[test]
    fn full_layer_scope_passes_fully_skipped_tokens_through() {
        let f = fixture(4, 8, 8, 2);
        // Identical scores per head, so skipped tokens are skipped by every head.
        let mut rng = seeded(5);
        let row = Tensor::randn([1, 8], 1.0, &mut rng);
        let scores = Tensor::new([2, 8], [row.data(), row.data()].concat()).unwrap();
        let plan = select_tokens(&scores, 0.5, &[0]).unwrap();
        let y = run_tosa(&f, &plan, SkipScope::FullLayer);
        assert!(!plan.heads[0].skipped.is_empty());
        for &t in &plan.heads[0].skipped {
            assert_eq!(y.row(t), f.x.row(t));
        }
        for &t in &plan.heads[0].attended {
            assert_ne!(y.row(t), f.x.row(t));
        }
    }

    #[test]
    fn skipped_slice_reaches_the_projection_unchanged() {
        // With W_O = F = I, zero bias, zero MLP output: a skipped token's head
        // slice of x' - x equals that slice of LN1(x).
        let mut f = fixture(6, 6, 8, 2);
        f.block.attn.wo = Tensor::eye(8);
        f.block.attn.f_weight = Tensor::eye(8);
        f.block.mlp_w2 = Tensor::zeros([32, 8]);
        let plan = random_plan(7, 2, 6, 0.5);
        let y = run_tosa(&f, &plan, SkipScope::AttentionOnly);

        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let g = tape.constant(f.block.ln1_gain.clone());
        let b = tape.constant(f.block.ln1_bias.clone());
        let h = tape.layer_norm(xv, g, b, 1, LN_EPS).unwrap();
        let h = tape.value(h).clone();
        for (head, sel) in plan.heads.iter().enumerate() {
            for &t in &sel.skipped {
                for c in head * 4..(head + 1) * 4 {
                    let delta = y.at(&[t, c]) - f.x.at(&[t, c]);
                    assert!((delta - h.at(&[t, c])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn outputs_keep_every_token_and_are_deterministic() {
        let f = fixture(8, 9, 8, 2);
        for ratio in [0.2, 0.5, 0.8, 1.0] {
            let plan = random_plan(9, 2, 9, ratio);
            for scope in SkipScope::ALL {
                let a = run_tosa(&f, &plan, scope);
                assert_eq!(a.shape(), &[9, 8]);
                assert!(a.bit_eq(&run_tosa(&f, &plan, scope)));
            }
        }
    }

    #[test]
    fn plan_shape_mismatch_is_rejected() {
        let f = fixture(10, 6, 8, 2);
        let plan = SelectionPlan::full(2, 5);
        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let bv = f.block.map_named("", &mut |_, t| tape.constant(t.clone()));
        let sv = f.selector.map_named("", &mut |_, t| tape.constant(t.clone()));
        let layer = ToSALayerParams {
            block: &bv,
            selector: &sv,
            ratio: 1.0,
            scope: SkipScope::AttentionOnly,
        };
        assert!(matches!(tosa_attention(&mut tape, xv, &layer, &plan), Err(Error::Dimension(_))));
    }

    #[test]
    fn tosa_layer_gradients_match_finite_differences() {
        let f = fixture(11, 6, 8, 2);
        let plan = random_plan(12, 2, 6, 0.5);
        assert_eq!(plan.k, 3);
        let mut rng = seeded(13);
        let w = Tensor::randn([6, 8], 1.0, &mut rng);
        for scope in SkipScope::ALL {
            let mut inputs = vec![f.x.clone()];
            f.block.map_named("", &mut |_, t| inputs.push(t.clone()));
            let reports = check_gradients_multi(
                |tape, vars| {
                    let mut it = vars[1..].iter().copied();
                    let bv = f.block.map_named("", &mut |_, _| it.next().unwrap());
                    let sv = f.selector.map_named("", &mut |_, t| tape.constant(t.clone()));
                    let layer = ToSALayerParams {
                        block: &bv,
                        selector: &sv,
                        ratio: 0.5,
                        scope,
                    };
                    let (y, _) = tosa_attention(tape, vars[0], &layer, &plan)?;
                    let wv = tape.constant(w.clone());
                    let s = tape.mul(y, wv)?;
                    tape.sum(s)
                },
                &inputs,
                1e-5,
                1e-5,
            )
            .unwrap();
            for (i, r) in reports.iter().enumerate() {
                assert!(r.passed(), "{scope} input {i}: {}", r.max_rel_deviation);
            }
        }
    }

    #[test]
    fn pair_at_full_ratio_equals_two_standard_blocks() {
        let f = fixture(14, 7, 8, 2);
        let mut rng = seeded(15);
        let second = BlockParams::init(8, 2, &mut rng).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let b1 = f.block.map_named("", &mut |_, t| tape.constant(t.clone()));
        let b2 = second.map_named("", &mut |_, t| tape.constant(t.clone()));
        let (m, _) = block_forward(&mut tape, xv, &b1).unwrap();
        let (want, _) = block_forward(&mut tape, m, &b2).unwrap();
        let want = tape.value(want).clone();

        let sv = f.selector.map_named("", &mut |_, t| tape.constant(t.clone()));
        for scope in SkipScope::ALL {
            let layer = ToSALayerParams {
                block: &b2,
                selector: &sv,
                ratio: 1.0,
                scope,
            };
            let (y, diag) = tosa_pair_forward(&mut tape, xv, &b1, &layer, &[0]).unwrap();
            assert!(tape.value(y).bit_eq(&want));
            diag.plan.validate(&[0]).unwrap();
        }
    }

    #[test]
    fn pair_diagnostics_satisfy_plan_invariants() {
        let f = fixture(16, 9, 8, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(f.x.clone());
        let b = f.block.map_named("", &mut |_, t| tape.constant(t.clone()));
        let sv = f.selector.map_named("", &mut |_, t| tape.constant(t.clone()));
        let layer = ToSALayerParams {
            block: &b,
            selector: &sv,
            ratio: 0.7,
            scope: SkipScope::AttentionOnly,
        };
        let (y, diag) = tosa_pair_forward(&mut tape, xv, &b, &layer, &[0]).unwrap();
        assert_eq!(tape.shape(y), &[9, 8]);
        assert_eq!(diag.plan.k, 6);
        diag.plan.validate(&[0]).unwrap();
        assert_eq!(diag.predicted.shape(), &[2, 9, 9]);
        assert_eq!(diag.teacher.a.len(), 2);
    }

    #[test]
    fn scope_names_round_trip() {
        for s in SkipScope::ALL {
            assert_eq!(s.as_str().parse::<SkipScope>().unwrap(), s);
        }
        assert!("attention".parse::<SkipScope>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gather_then_scatter_is_identity(mask in proptest::collection::vec(any::<bool>(), 1..24), seed in 0u64..1000) {
                let n = mask.len();
                let att: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
                let skip: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
                prop_assume!(!att.is_empty());
                let mut rng = seeded(seed);
                let x = Tensor::randn([n, 3], 1.0, &mut rng);
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let a = gather_tokens(&mut tape, xv, &att).unwrap();
                let s = if skip.is_empty() { None } else { Some(gather_tokens(&mut tape, xv, &skip).unwrap()) };
                let y = scatter_merge(&mut tape, a, s, &att, &skip).unwrap();
                prop_assert!(tape.value(y).bit_eq(&x));
            }
        }
    }
}
