//! Multi-head self-attention and the pre-norm transformer block.
//!
//! Parameter structs are generic over their element: `Tensor` for stored
//! weights, [`Var`] once bound to a tape for a forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Linear init with standard deviation `1/sqrt(fan_in)`.
pub(crate) fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn([fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub heads: usize,
    /// Per-head query projections, each `D × D/H`.
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    /// Projection applied to the concatenated heads, `D × D`.
    pub wo: T,
    /// The post-projection linear layer (`D × D` plus bias).
    pub f_weight: T,
    pub f_bias: T,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let dh = dim / heads;
        let proj = |rng: &mut R| (0..heads).map(|_| linear_init(dim, dh, rng)).collect::<Vec<_>>();
        let wq = proj(rng);
        let wk = proj(rng);
        let wv = proj(rng);
        Ok(AttentionParams {
            heads,
            wq,
            wk,
            wv,
            wo: linear_init(dim, dim, rng),
            f_weight: linear_init(dim, dim, rng),
            f_bias: Tensor::zeros([dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.wo.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = self.heads;
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::config(format!("model dim {d} not divisible by {h} heads")));
        }
        let dh = d / h;
        for set in [&self.wq, &self.wk, &self.wv] {
            if set.len() != h || set.iter().any(|w| w.shape() != [d, dh]) {
                return Err(Error::dim(format!("per-head projections must be {h} matrices of {d}x{dh}")));
            }
        }
        if self.wo.shape() != [d, d] || self.f_weight.shape() != [d, d] || self.f_bias.shape() != [d] {
            return Err(Error::dim("output projection / linear layer shapes"));
        }
        let mut finite = true;
        self.for_each_named("", &mut |_, t| finite &= t.is_finite());
        if !finite {
            return Err(Error::Input("non-finite attention parameter".into()));
        }
        Ok(())
    }
}

impl<T> AttentionParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AttentionParams<U> {
        let mut heads = |set: &[T], name: &str| -> Vec<U> {
            set.iter()
                .enumerate()
                .map(|(h, t)| f(&join(prefix, &format!("{name}.{h}")), t))
                .collect()
        };
        let wq = heads(&self.wq, "wq");
        let wk = heads(&self.wk, "wk");
        let wv = heads(&self.wv, "wv");
        AttentionParams {
            heads: self.heads,
            wq,
            wk,
            wv,
            wo: f(&join(prefix, "wo"), &self.wo),
            f_weight: f(&join(prefix, "f.weight"), &self.f_weight),
            f_bias: f(&join(prefix, "f.bias"), &self.f_bias),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.map_named(prefix, &mut |n, t| f(n, t));
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (name, set) in [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)] {
            for (h, t) in set.iter_mut().enumerate() {
                f(&join(prefix, &format!("{name}.{h}")), t);
            }
        }
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "f.weight"), &mut self.f_weight);
        f(&join(prefix, "f.bias"), &mut self.f_bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub attn: AttentionParams<T>,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// `D × 4D`
    pub mlp_w1: T,
    pub mlp_b1: T,
    /// `4D × D`
    pub mlp_w2: T,
    pub mlp_b2: T,
}

impl BlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let attn = AttentionParams::init(dim, heads, rng)?;
        let hidden = 4 * dim;
        Ok(BlockParams {
            attn,
            ln1_gain: Tensor::full([dim], 1.0),
            ln1_bias: Tensor::zeros([dim]),
            ln2_gain: Tensor::full([dim], 1.0),
            ln2_bias: Tensor::zeros([dim]),
            mlp_w1: linear_init(dim, hidden, rng),
            mlp_b1: Tensor::zeros([hidden]),
            mlp_w2: linear_init(hidden, dim, rng),
            mlp_b2: Tensor::zeros([dim]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let d = self.attn.dim();
        let ok = self.mlp_w1.shape() == [d, 4 * d]
            && self.mlp_b1.shape() == [4 * d]
            && self.mlp_w2.shape() == [4 * d, d]
            && self.mlp_b2.shape() == [d]
            && [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias]
                .iter()
                .all(|t| t.shape() == [d]);
        if !ok {
            return Err(Error::dim(format!("block parameters inconsistent with model dim {d}")));
        }
        Ok(())
    }
}

impl<T> BlockParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.map_named(&join(prefix, "attn"), f),
            ln1_gain: f(&join(prefix, "ln1.gain"), &self.ln1_gain),
            ln1_bias: f(&join(prefix, "ln1.bias"), &self.ln1_bias),
            ln2_gain: f(&join(prefix, "ln2.gain"), &self.ln2_gain),
            ln2_bias: f(&join(prefix, "ln2.bias"), &self.ln2_bias),
            mlp_w1: f(&join(prefix, "mlp.w1"), &self.mlp_w1),
            mlp_b1: f(&join(prefix, "mlp.b1"), &self.mlp_b1),
            mlp_w2: f(&join(prefix, "mlp.w2"), &self.mlp_w2),
            mlp_b2: f(&join(prefix, "mlp.b2"), &self.mlp_b2),
        }
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.attn.for_each_named_mut(&join(prefix, "attn"), f);
        f(&join(prefix, "ln1.gain"), &mut self.ln1_gain);
        f(&join(prefix, "ln1.bias"), &mut self.ln1_bias);
        f(&join(prefix, "ln2.gain"), &mut self.ln2_gain);
        f(&join(prefix, "ln2.bias"), &mut self.ln2_bias);
        f(&join(prefix, "mlp.w1"), &mut self.mlp_w1);
        f(&join(prefix, "mlp.b1"), &mut self.mlp_b1);
        f(&join(prefix, "mlp.w2"), &mut self.mlp_w2);
        f(&join(prefix, "mlp.b2"), &mut self.mlp_b2);
    }
}

/// Per-head pre-softmax logits `B` and row-stochastic maps `A = softmax(B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionArtifacts<T = Tensor> {
    pub b: Vec<T>,
    pub a: Vec<T>,
}

impl AttentionArtifacts<Var> {
    pub fn resolve(&self, tape: &Tape) -> AttentionArtifacts<Tensor> {
        AttentionArtifacts {
            b: self.b.iter().map(|&v| tape.value(v).clone()).collect(),
            a: self.a.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

pub struct Attended {
    pub out: Var,
    pub b: Var,
    pub a: Var,
}

pub fn project_qkv(tape: &mut Tape, x: Var, params: &AttentionParams<Var>, head: usize) -> Result<(Var, Var, Var)> {
    if head >= params.heads {
        return Err(Error::dim(format!("head {head} out of range for {} heads", params.heads)));
    }
    let q = tape.matmul(x, params.wq[head])?;
    let k = tape.matmul(x, params.wk[head])?;
    let v = tape.matmul(x, params.wv[head])?;
    Ok((q, k, v))
}

/// Scaled dot-product attention for one head; the divisor is `sqrt(d_h)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Attended> {
    let dh = tape.value(q).dims2()?.1;
    let logits = tape.matmul_bt(q, k)?;
    let b = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let a = tape.softmax(b, 1)?;
    let out = tape.matmul(a, v)?;
    Ok(Attended { out, b, a })
}

/// `W_O` followed by the linear layer `F`, applied row-wise.
pub(crate) fn output_projection(tape: &mut Tape, concat: Var, params: &AttentionParams<Var>) -> Result<Var> {
    let o = tape.matmul(concat, params.wo)?;
    let f = tape.matmul(o, params.f_weight)?;
    tape.add_row(f, params.f_bias)
}

pub fn mhsa_forward(tape: &mut Tape, x: Var, params: &AttentionParams<Var>) -> Result<(Var, AttentionArtifacts<Var>)> {
    let mut outs = Vec::with_capacity(params.heads);
    let mut art = AttentionArtifacts {
        b: Vec::with_capacity(params.heads),
        a: Vec::with_capacity(params.heads),
    };
    for h in 0..params.heads {
        let (q, k, v) = project_qkv(tape, x, params, h)?;
        let r = attend(tape, q, k, v)?;
        outs.push(r.out);
        art.b.push(r.b);
        art.a.push(r.a);
    }
    let concat = tape.concat_cols(&outs)?;
    let y = output_projection(tape, concat, params)?;
    Ok((y, art))
}

pub(crate) fn mlp(tape: &mut Tape, x: Var, params: &BlockParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, params.mlp_w1)?;
    let h = tape.add_row(h, params.mlp_b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, params.mlp_w2)?;
    tape.add_row(o, params.mlp_b2)
}

/// Pre-norm block: `x' = x + MHSA(LN1(x))`, `y = x' + MLP(LN2(x'))`.
pub fn block_forward(tape: &mut Tape, x: Var, params: &BlockParams<Var>) -> Result<(Var, AttentionArtifacts<Var>)> {
    let h = tape.layer_norm(x, params.ln1_gain, params.ln1_bias, 1, LN_EPS)?;
    let (a, art) = mhsa_forward(tape, h, &params.attn)?;
    let x1 = tape.add(x, a)?;
    let h2 = tape.layer_norm(x1, params.ln2_gain, params.ln2_bias, 1, LN_EPS)?;
    let m = mlp(tape, h2, params)?;
    let y = tape.add(x1, m)?;
    Ok((y, art))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::numerics::{check_gradients_multi, softmax_values};

    fn bind(tape: &mut Tape, p: &BlockParams<Tensor>) -> BlockParams<Var> {
        p.map_named("", &mut |_, t| tape.constant(t.clone()))
    }

    #[test]
    fn project_qkv_identity_and_zero() {
        let mut rng = seeded(1);
        let x = Tensor::randn([5, 4], 1.0, &mut rng);
        let mut p = AttentionParams::init(4, 2, &mut rng).unwrap();
        // W_Q^1 selects columns 2..4
        let mut sel = Tensor::zeros([4, 2]);
        sel.set(&[2, 0], 1.0);
        sel.set(&[3, 1], 1.0);
        p.wq[1] = sel;
        p.wk[1] = Tensor::zeros([4, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = p.map_named("", &mut |_, t| tape.constant(t.clone()));
        let (q, k, _) = project_qkv(&mut tape, xv, &pv, 1).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(q).row(r), &x.row(r)[2..4]);
        }
        assert!(tape.value(k).data().iter().all(|&v| v == 0.0));
        assert!(project_qkv(&mut tape, xv, &pv, 2).is_err());
    }

    #[test]
    fn project_qkv_matches_matmul_oracle() {
        let mut rng = seeded(2);
        let x = Tensor::randn([5, 6], 1.0, &mut rng);
        let p = AttentionParams::init(6, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = p.map_named("", &mut |_, t| tape.constant(t.clone()));
        let (_, _, v) = project_qkv(&mut tape, xv, &pv, 2).unwrap();
        let w = &p.wv[2];
        for i in 0..5 {
            for j in 0..2 {
                let want: f64 = (0..6).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum();
                assert!((tape.value(v).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_single_token_returns_v() {
        let mut rng = seeded(3);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn([1, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn([1, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn([1, 4], 1.0, &mut rng));
        let r = attend(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(r.a).data(), &[1.0]);
        assert!(tape.value(r.out).bit_eq(tape.value(v)));
    }

    #[test]
    fn attend_zero_keys_is_uniform() {
        let mut rng = seeded(4);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn([5, 3], 1.0, &mut rng));
        let k = tape.constant(Tensor::zeros([5, 3]));
        let vt = Tensor::randn([5, 3], 1.0, &mut rng);
        let v = tape.constant(vt.clone());
        let r = attend(&mut tape, q, k, v).unwrap();
        assert!(tape.value(r.a).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        for j in 0..3 {
            let mean = (0..5).map(|i| vt.at(&[i, j])).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((tape.value(r.out).at(&[i, j]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_matches_composed_oracle() {
        let mut rng = seeded(5);
        let (qt, kt, vt) = (
            Tensor::randn([5, 8], 1.0, &mut rng),
            Tensor::randn([5, 8], 1.0, &mut rng),
            Tensor::randn([5, 8], 1.0, &mut rng),
        );
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(qt.clone()), tape.constant(kt.clone()), tape.constant(vt.clone()));
        let r = attend(&mut tape, q, k, v).unwrap();
        let scale = 1.0 / 8f64.sqrt();
        for i in 0..5 {
            let logits: Vec<f64> = (0..5)
                .map(|j| (0..8).map(|c| qt.at(&[i, c]) * kt.at(&[j, c])).sum::<f64>() * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..5 {
                assert!((tape.value(r.b).at(&[i, j]) - logits[j]).abs() < 1e-12);
                assert!((tape.value(r.a).at(&[i, j]) - logits[j].exp() / z).abs() < 1e-12);
            }
            for c in 0..8 {
                let want: f64 = (0..5).map(|j| logits[j].exp() / z * vt.at(&[j, c])).sum();
                assert!((tape.value(r.out).at(&[i, c]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_head_identity_reduces_to_textbook_formula() {
        let mut rng = seeded(6);
        let d = 4;
        let x = Tensor::randn([3, d], 1.0, &mut rng);
        let p = AttentionParams {
            heads: 1,
            wq: vec![Tensor::eye(d)],
            wk: vec![Tensor::eye(d)],
            wv: vec![Tensor::eye(d)],
            wo: Tensor::eye(d),
            f_weight: Tensor::eye(d),
            f_bias: Tensor::zeros([d]),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = p.map_named("", &mut |_, t| tape.constant(t.clone()));
        let (y, art) = mhsa_forward(&mut tape, xv, &pv).unwrap();
        let mut logits = Tensor::zeros([3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..d).map(|c| x.at(&[i, c]) * x.at(&[j, c])).sum();
                logits.set(&[i, j], dot / (d as f64).sqrt());
            }
        }
        let a = softmax_values(&logits, 1).unwrap();
        for i in 0..3 {
            for c in 0..d {
                let want: f64 = (0..3).map(|j| a.at(&[i, j]) * x.at(&[j, c])).sum();
                assert!((tape.value(y).at(&[i, c]) - want).abs() < 1e-12);
            }
        }
        let resolved = art.resolve(&tape);
        for r in 0..3 {
            assert!((resolved.a[0].row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let mut rng = seeded(7);
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let p = AttentionParams::init(8, 2, &mut rng).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pv = p.map_named("", &mut |_, t| tape.constant(t.clone()));
            let (y, _) = mhsa_forward(&mut tape, xv, &pv).unwrap();
            tape.value(y).clone()
        };
        let y = run(&x);
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let yp = run(&xp);
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(r).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_with_zero_value_and_mlp_is_pure_residual() {
        let mut rng = seeded(8);
        let mut p = BlockParams::init(8, 2, &mut rng).unwrap();
        for w in &mut p.attn.wv {
            *w = Tensor::zeros(w.shape());
        }
        p.mlp_w2 = Tensor::zeros([32, 8]);
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = bind(&mut tape, &p);
        let (y, _) = block_forward(&mut tape, xv, &pv).unwrap();
        assert!(tape.value(y).bit_eq(&x));
        assert_eq!(tape.shape(y), &[6, 8]);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = seeded(9);
        let p = BlockParams::init(8, 2, &mut rng).unwrap();
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let mut inputs = vec![x];
        p.map_named("", &mut |_, t| inputs.push(t.clone()));
        let w = Tensor::randn([6, 8], 1.0, &mut rng);
        let reports = check_gradients_multi(
            |tape, vars| {
                let mut it = vars[1..].iter().copied();
                let pv = p.map_named("", &mut |_, _| it.next().unwrap());
                let (y, _) = block_forward(tape, vars[0], &pv)?;
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
            assert!(r.passed(), "input {i}: {}", r.max_rel_deviation);
        }
    }

    #[test]
    fn validate_rejects_indivisible_heads() {
        let mut rng = seeded(10);
        assert!(AttentionParams::init(6, 4, &mut rng).is_err());
        let mut p = BlockParams::init(8, 2, &mut rng).unwrap();
        p.validate().unwrap();
        p.mlp_w1 = Tensor::zeros([8, 16]);
        assert!(p.validate().is_err());
    }
}
