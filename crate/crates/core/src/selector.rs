//! Token selector: predicts the next layer's attention maps from the
//! current layer's pre-softmax maps, scores tokens by the attention mass
//! they receive, and picks the top-K tokens per head.

use rand::Rng;

use crate::attention::join;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Two 1-D convolutions (H → C → H channels, odd width k) with a ReLU in
/// between, run along the key axis of each query row.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams<T = Tensor> {
    /// `[C, H, k]`
    pub conv1_w: T,
    pub conv1_b: T,
    /// `[H, C, k]`
    pub conv2_w: T,
    pub conv2_b: T,
}

impl SelectorParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(heads: usize, hidden: usize, width: usize, rng: &mut R) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::config(format!("selector kernel width must be odd, got {width}")));
        }
        if hidden == 0 || heads == 0 {
            return Err(Error::config("selector needs at least one head and one hidden channel"));
        }
        let b1 = 1.0 / ((heads * width) as f64).sqrt();
        let b2 = 1.0 / ((hidden * width) as f64).sqrt();
        Ok(SelectorParams {
            conv1_w: Tensor::uniform([hidden, heads, width], b1, rng),
            conv1_b: Tensor::uniform([hidden], b1, rng),
            conv2_w: Tensor::uniform([heads, hidden, width], b2, rng),
            conv2_b: Tensor::uniform([heads], b2, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.conv1_w.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.conv1_w.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.conv1_w.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, k) = (self.hidden(), self.heads(), self.width());
        if k % 2 == 0 {
            return Err(Error::config(format!("selector kernel width must be odd, got {k}")));
        }
        if self.conv1_b.shape() != [c] || self.conv2_w.shape() != [h, c, k] || self.conv2_b.shape() != [h] {
            return Err(Error::dim("selector parameter shapes are inconsistent"));
        }
        Ok(())
    }
}

impl<T> SelectorParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SelectorParams<U> {
        SelectorParams {
            conv1_w: f(&join(prefix, "conv1.weight"), &self.conv1_w),
            conv1_b: f(&join(prefix, "conv1.bias"), &self.conv1_b),
            conv2_w: f(&join(prefix, "conv2.weight"), &self.conv2_w),
            conv2_b: f(&join(prefix, "conv2.bias"), &self.conv2_b),
        }
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "conv1.weight"), &mut self.conv1_w);
        f(&join(prefix, "conv1.bias"), &mut self.conv1_b);
        f(&join(prefix, "conv2.weight"), &mut self.conv2_w);
        f(&join(prefix, "conv2.bias"), &mut self.conv2_b);
    }
}

/// Predicted next-layer log-attention maps, stacked as `[H, L, L]`.
///
/// Query row `q` is treated as a length-L sequence whose H channels are row
/// `q` of each head's pre-softmax map.
pub fn predict_attention(tape: &mut Tape, b_maps: &[Var], params: &SelectorParams<Var>) -> Result<Var> {
    let Some(&first) = b_maps.first() else {
        return Err(Error::dim("predict_attention: no maps"));
    };
    let (l, l2) = tape.value(first).dims2()?;
    if l != l2 {
        return Err(Error::dim(format!("attention maps must be square, got {l}x{l2}")));
    }
    let channels = tape.shape(params.conv1_w)[1];
    if b_maps.len() != channels {
        return Err(Error::dim(format!(
            "selector expects {channels} head maps, got {}",
            b_maps.len()
        )));
    }
    let x = tape.stack(b_maps)?;
    let h = tape.conv1d(x, params.conv1_w, params.conv1_b)?;
    let h = tape.relu(h)?;
    let o = tape.conv1d(h, params.conv2_w, params.conv2_b)?;
    tape.log_softmax(o, 2)
}

/// `scores[h][j] = Σ_q exp(log_a_hat[h][q][j])`: the probability mass token
/// `j` receives in head `h`. Input `[H, L, L]`, output `[H, L]`.
pub fn importance_scores(log_a_hat: &Tensor) -> Result<Tensor> {
    let &[heads, rows, cols] = log_a_hat.shape() else {
        return Err(Error::dim(format!(
            "importance_scores expects [H, L, L], got {:?}",
            log_a_hat.shape()
        )));
    };
    let mut scores = vec![0.0; heads * cols];
    for h in 0..heads {
        let acc = &mut scores[h * cols..(h + 1) * cols];
        for q in 0..rows {
            let row = &log_a_hat.data()[(h * rows + q) * cols..(h * rows + q + 1) * cols];
            for (s, &lp) in acc.iter_mut().zip(row) {
                *s += lp.exp();
            }
        }
    }
    Tensor::new([heads, cols], scores)
}

/// Number of attended tokens for `tokens` at ratio `ratio`: `max(1, round(r·L))`,
/// rounding half up.
pub fn attended_count(ratio: f64, tokens: usize) -> usize {
    ((ratio * tokens as f64 + 0.5).floor() as usize).clamp(1, tokens)
}

pub fn validate_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("attention ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSelection {
    /// Ascending.
    pub attended: Vec<usize>,
    /// Ascending.
    pub skipped: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Which tokens each head attends at one selective layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub heads: Vec<HeadSelection>,
    pub ratio: f64,
    pub k: usize,
    pub tokens: usize,
}

impl SelectionPlan {
    /// Every head attends every token.
    pub fn full(heads: usize, tokens: usize) -> Self {
        let all: Vec<usize> = (0..tokens).collect();
        SelectionPlan {
            heads: (0..heads)
                .map(|_| HeadSelection {
                    attended: all.clone(),
                    skipped: Vec::new(),
                    scores: vec![1.0; tokens],
                })
                .collect(),
            ratio: 1.0,
            k: tokens,
            tokens,
        }
    }

    /// Checks the partition and count invariants, and that `forced` tokens are attended.
    pub fn validate(&self, forced: &[usize]) -> Result<()> {
        for (h, sel) in self.heads.iter().enumerate() {
            if sel.attended.len() != self.k {
                return Err(Error::Input(format!(
                    "head {h} attends {} tokens, expected {}",
                    sel.attended.len(),
                    self.k
                )));
            }
            let mut seen = vec![false; self.tokens];
            for list in [&sel.attended, &sel.skipped] {
                if list.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Input(format!("head {h}: index list not strictly ascending")));
                }
                for &t in list {
                    if t >= self.tokens || seen[t] {
                        return Err(Error::Input(format!("head {h}: token {t} duplicated or out of range")));
                    }
                    seen[t] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Input(format!("head {h}: selection does not cover every token")));
            }
            if let Some(t) = forced.iter().find(|t| sel.attended.binary_search(t).is_err()) {
                return Err(Error::Input(format!("head {h}: forced token {t} skipped")));
            }
        }
        Ok(())
    }

    /// Tokens attended by at least one head, ascending.
    pub fn attended_by_any(&self) -> Vec<usize> {
        let mut hit = vec![false; self.tokens];
        for sel in &self.heads {
            for &t in &sel.attended {
                hit[t] = true;
            }
        }
        (0..self.tokens).filter(|&t| hit[t]).collect()
    }
}

/// Per head, keeps `forced` plus the highest-scoring remaining tokens
/// (ties go to the lower index) until `K = max(1, round(r·L), |forced|)`.
pub fn select_tokens(scores: &Tensor, ratio: f64, forced: &[usize]) -> Result<SelectionPlan> {
    validate_ratio(ratio)?;
    let (heads, tokens) = scores.dims2()?;
    let mut forced = forced.to_vec();
    forced.sort_unstable();
    forced.dedup();
    if let Some(&bad) = forced.iter().find(|&&t| t >= tokens) {
        return Err(Error::config(format!("forced token {bad} out of range for {tokens} tokens")));
    }
    let k = attended_count(ratio, tokens).max(forced.len());

    let mut plan = SelectionPlan {
        heads: Vec::with_capacity(heads),
        ratio,
        k,
        tokens,
    };
    for h in 0..heads {
        let s = scores.row(h);
        let mut candidates: Vec<usize> = (0..tokens).filter(|t| forced.binary_search(t).is_err()).collect();
        candidates.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut attended = forced.clone();
        attended.extend_from_slice(&candidates[..k - forced.len()]);
        attended.sort_unstable();
        let mut mask = vec![false; tokens];
        for &t in &attended {
            mask[t] = true;
        }
        let skipped = (0..tokens).filter(|&t| !mask[t]).collect();
        plan.heads.push(HeadSelection {
            attended,
            skipped,
            scores: s.to_vec(),
        });
    }
    Ok(plan)
}

/// `Σ_h KL(A_h ‖ Â_h)`, each head's divergence averaged over query rows.
/// Both arguments are `[H, L, L]`.
pub fn selector_loss(tape: &mut Tape, log_a_hat: Var, a_true: &Tensor) -> Result<Var> {
    let heads = a_true.shape()[0];
    let mean = tape.kl_divergence(log_a_hat, a_true, 2)?;
    tape.scale(mean, heads as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::numerics::{check_gradients_multi, softmax_values};

    fn predict(b: &[Tensor], p: &SelectorParams) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = b.iter().map(|t| tape.constant(t.clone())).collect();
        let pv = p.map_named("", &mut |_, t| tape.constant(t.clone()));
        let o = predict_attention(&mut tape, &vars, &pv)?;
        Ok(tape.value(o).clone())
    }

    #[test]
    fn predicted_rows_are_distributions() {
        let mut rng = seeded(1);
        let p = SelectorParams::init(3, 12, 3, &mut rng).unwrap();
        let b: Vec<Tensor> = (0..3).map(|_| Tensor::randn([7, 7], 2.0, &mut rng)).collect();
        let out = predict(&b, &p).unwrap();
        assert_eq!(out.shape(), &[3, 7, 7]);
        for h in 0..3 {
            for q in 0..7 {
                let s: f64 = (0..7).map(|j| out.at(&[h, q, j]).exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_selector_predicts_uniform() {
        let mut rng = seeded(2);
        let mut p = SelectorParams::init(2, 8, 3, &mut rng).unwrap();
        p.for_each_named_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
        let b: Vec<Tensor> = (0..2).map(|_| Tensor::randn([5, 5], 1.0, &mut rng)).collect();
        let out = predict(&b, &p).unwrap();
        let want = (1.0f64 / 5.0).ln();
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn predict_rejects_inconsistent_maps() {
        let mut rng = seeded(3);
        let p = SelectorParams::init(2, 8, 3, &mut rng).unwrap();
        let b = vec![Tensor::zeros([5, 5]), Tensor::zeros([4, 4])];
        assert!(matches!(predict(&b, &p), Err(Error::Dimension(_))));
        let b = vec![Tensor::zeros([5, 5])];
        assert!(matches!(predict(&b, &p), Err(Error::Dimension(_))));
        assert!(SelectorParams::init(2, 8, 4, &mut rng).is_err());
    }

    #[test]
    fn predict_attention_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = seeded(10 + seed);
            let p = SelectorParams::init(2, 4, 3, &mut rng).unwrap();
            let target = softmax_values(&Tensor::randn([2, 5, 5], 1.0, &mut rng), 2).unwrap();
            let mut inputs: Vec<Tensor> = (0..2).map(|_| Tensor::randn([5, 5], 1.0, &mut rng)).collect();
            p.map_named("", &mut |_, t| inputs.push(t.clone()));
            let reports = check_gradients_multi(
                |tape, v| {
                    let mut it = v[2..].iter().copied();
                    let pv = p.map_named("", &mut |_, _| it.next().unwrap());
                    let la = predict_attention(tape, &v[..2], &pv)?;
                    selector_loss(tape, la, &target)
                },
                &inputs,
                1e-5,
                1e-5,
            )
            .unwrap();
            // conv2 bias shifts a whole row before the log-softmax, so its
            // gradient is identically zero; both sides must be round-off.
            let (bias, rest) = reports.split_last().unwrap();
            assert!(bias.analytic.data().iter().all(|g| g.abs() < 1e-12));
            assert!(bias.numeric.data().iter().all(|g| g.abs() < 1e-9));
            for (i, r) in rest.iter().enumerate() {
                assert!(r.passed(), "seed {seed} input {i}: {}", r.max_rel_deviation);
            }
        }
    }

    #[test]
    fn importance_of_uniform_maps_is_one() {
        let l = 6;
        let log_u = Tensor::full([2, l, l], (1.0 / l as f64).ln());
        let s = importance_scores(&log_u).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn importance_of_concentrated_map() {
        let l = 5;
        let mut m = Tensor::full([1, l, l], f64::NEG_INFINITY);
        for q in 0..l {
            m.set(&[0, q, 3], 0.0);
        }
        let s = importance_scores(&m).unwrap();
        assert_eq!(s.data(), &[0., 0., 0., 5., 0.]);
    }

    #[test]
    fn importance_matches_direct_summation() {
        let mut rng = seeded(4);
        let p = softmax_values(&Tensor::randn([3, 6, 6], 1.0, &mut rng), 2).unwrap();
        let s = importance_scores(&p.map(f64::ln)).unwrap();
        for h in 0..3 {
            let total: f64 = s.row(h).iter().sum();
            assert!((total - 6.0).abs() < 1e-6);
            for j in 0..6 {
                let want: f64 = (0..6).map(|q| p.at(&[h, q, j])).sum();
                assert!((s.at(&[h, j]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn full_ratio_selects_everything() {
        let mut rng = seeded(5);
        let s = Tensor::randn([3, 9], 1.0, &mut rng);
        let plan = select_tokens(&s, 1.0, &[]).unwrap();
        for h in &plan.heads {
            assert_eq!(h.attended, (0..9).collect::<Vec<_>>());
            assert!(h.skipped.is_empty());
        }
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let s = Tensor::new([1, 4], vec![0.1, 0.5, 0.2, 0.2]).unwrap();
        let plan = select_tokens(&s, 0.5, &[]).unwrap();
        assert_eq!(plan.k, 2);
        assert_eq!(plan.heads[0].attended, vec![1, 2]);
        assert_eq!(plan.heads[0].skipped, vec![0, 3]);
    }

    #[test]
    fn deit_token_count_with_forced_class_token() {
        let mut rng = seeded(6);
        let l = 197;
        // Class token gets the lowest score so forcing it matters.
        let mut s = Tensor::uniform([3, l], 1.0, &mut rng);
        for h in 0..3 {
            s.set(&[h, 0], -10.0);
        }
        let plan = select_tokens(&s, 0.8, &[0]).unwrap();
        assert_eq!(plan.k, 158);
        plan.validate(&[0]).unwrap();
        // Brute-force oracle: the 157 best non-class tokens plus the class token.
        for h in 0..3 {
            let mut order: Vec<usize> = (1..l).collect();
            order.sort_by(|&a, &b| s.at(&[h, b]).partial_cmp(&s.at(&[h, a])).unwrap().then(a.cmp(&b)));
            let mut want: Vec<usize> = order[..157].to_vec();
            want.push(0);
            want.sort_unstable();
            assert_eq!(plan.heads[h].attended, want);
        }
    }

    #[test]
    fn invalid_ratios_are_config_errors() {
        let s = Tensor::zeros([1, 4]);
        for r in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(select_tokens(&s, r, &[]), Err(Error::Config(_))));
        }
        assert!(select_tokens(&s, 0.5, &[9]).is_err());
    }

    #[test]
    fn attended_count_rounds_half_up_and_never_hits_zero() {
        assert_eq!(attended_count(0.5, 17), 9);
        assert_eq!(attended_count(0.8, 17), 14);
        assert_eq!(attended_count(0.8, 65), 52);
        assert_eq!(attended_count(0.01, 10), 1);
    }

    #[test]
    fn selector_loss_examples() {
        let mut rng = seeded(7);
        let a = softmax_values(&Tensor::randn([2, 3, 3], 1.0, &mut rng), 2).unwrap();
        let mut tape = Tape::new();
        let la = tape.constant(a.map(f64::ln));
        let l = selector_loss(&mut tape, la, &a).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);

        // Hand-summed oracle on 2 heads, L = 3.
        let pred = softmax_values(&Tensor::randn([2, 3, 3], 1.0, &mut rng), 2).unwrap();
        let lp = tape.constant(pred.map(f64::ln));
        let l = selector_loss(&mut tape, lp, &a).unwrap();
        let mut want = 0.0;
        for h in 0..2 {
            let mut head = 0.0;
            for q in 0..3 {
                for j in 0..3 {
                    let p = a.at(&[h, q, j]);
                    head += p * (p.ln() - pred.at(&[h, q, j]).ln());
                }
            }
            want += head / 3.0;
        }
        let got = tape.value(l).data()[0];
        assert!(got >= 0.0);
        assert!((got - want).abs() < 1e-9);

        let bad = Tensor::full([2, 3, 3], 0.5);
        assert!(matches!(selector_loss(&mut tape, lp, &bad), Err(Error::Input(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn plans_partition_tokens(seed in 0u64..100_000, tokens in 1usize..40, ratio in 0.01f64..=1.0) {
                let mut rng = seeded(seed);
                let s = Tensor::randn([3, tokens], 1.0, &mut rng);
                let plan = select_tokens(&s, ratio, &[0]).unwrap();
                prop_assert_eq!(plan.k, attended_count(ratio, tokens));
                prop_assert!(plan.validate(&[0]).is_ok());
            }

            #[test]
            fn positive_rescaling_keeps_the_attended_set(seed in 0u64..100_000, c in 0.01f64..100.0) {
                let mut rng = seeded(seed);
                let s = Tensor::uniform([2, 20], 1.0, &mut rng);
                let scaled = s.map(|v| v * c);
                let a = select_tokens(&s, 0.6, &[]).unwrap();
                let b = select_tokens(&scaled, 0.6, &[]).unwrap();
                for (x, y) in a.heads.iter().zip(&b.heads) {
                    prop_assert_eq!(&x.attended, &y.attended);
                }
            }
        }
    }
}
