//! Global feature learning: QKV projection, scalar and vector self-attention
//! with pluggable pairwise operators, learnable relative position encoding,
//! and the offset / residual mechanisms.
//!
//! Tokens are batched as `(B, S, D)`; pairwise maps are `(B, S, S, ·)` with
//! the query on axis 1 and the key on axis 2.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Init, Lbr, Linear, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Basic,
    Offset,
    AscnResidual,
    PaResidual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Dot,
    Concatenation,
    Summation,
    Subtraction,
    Division,
    Hadamard,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [
        Mechanism::Basic,
        Mechanism::Offset,
        Mechanism::AscnResidual,
        Mechanism::PaResidual,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Mechanism::Basic => "basic",
            Mechanism::Offset => "offset",
            Mechanism::AscnResidual => "ascn",
            Mechanism::PaResidual => "pa",
        }
    }
}

impl Operator {
    pub const ALL: [Operator; 6] = [
        Operator::Dot,
        Operator::Concatenation,
        Operator::Summation,
        Operator::Subtraction,
        Operator::Division,
        Operator::Hadamard,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Operator::Dot => "dot",
            Operator::Concatenation => "concat",
            Operator::Summation => "sum",
            Operator::Subtraction => "sub",
            Operator::Division => "div",
            Operator::Hadamard => "hadamard",
        }
    }

    pub fn is_vector(self) -> bool {
        self != Operator::Dot
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Mechanism::Basic),
            "offset" => Ok(Mechanism::Offset),
            "ascn" | "ascn_residual" => Ok(Mechanism::AscnResidual),
            "pa" | "pa_residual" => Ok(Mechanism::PaResidual),
            _ => Err(Error::Config(format!(
                "unknown mechanism {s:?} (expected basic, offset, ascn, pa)"
            ))),
        }
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Operator::Dot),
            "concat" | "concatenation" => Ok(Operator::Concatenation),
            "sum" | "summation" => Ok(Operator::Summation),
            "sub" | "subtraction" => Ok(Operator::Subtraction),
            "div" | "division" => Ok(Operator::Division),
            "hadamard" => Ok(Operator::Hadamard),
            _ => Err(Error::Config(format!(
                "unknown operator {s:?} (expected dot, concat, sum, sub, div, hadamard)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// When off the block is the identity.
    pub enabled: bool,
    pub mechanism: Mechanism,
    pub operator: Operator,
    pub position_encoding: bool,
    /// Hidden width of the attention-map MLP; the token width when unset.
    pub tau_hidden: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mechanism: Mechanism::Offset,
            operator: Operator::Subtraction,
            position_encoding: true,
            tau_hidden: None,
        }
    }
}

/// Final-layer scale of the attention-map MLP at initialization.
pub const TAU_INIT_SCALE: f64 = 0.1;

/// Parameter layout of one attention block of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GflBlock {
    pub width: usize,
    pub config: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Attention-map MLP (vector operators only).
    pub tau: Option<[Linear; 2]>,
    /// Position MLP ξ: linear 3→D, batchnorm, ReLU, linear D→D.
    pub xi: Option<(Linear, BatchNorm, Linear)>,
    /// Offset-attention LBR.
    pub lbr: Option<Lbr>,
}

impl GflBlock {
    pub fn new(name: &str, width: usize, config: &AttentionConfig) -> Result<Self> {
        if width == 0 || config.tau_hidden == Some(0) {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        let d = width;
        let vector = config.operator.is_vector();
        let tau = vector.then(|| {
            let din = if config.operator == Operator::Concatenation { 2 * d } else { d };
            let hidden = config.tau_hidden.unwrap_or(d);
            [
                Linear::new(format!("{name}.tau0"), din, hidden, true),
                Linear::new(format!("{name}.tau1"), hidden, d, true).with_init(Init::Scaled(TAU_INIT_SCALE)),
            ]
        });
        let xi = (vector && config.position_encoding).then(|| {
            (
                Linear::new(format!("{name}.xi0"), 3, d, true),
                BatchNorm::new(format!("{name}.xi_bn"), d),
                Linear::new(format!("{name}.xi1"), d, d, true),
            )
        });
        let lbr = (config.mechanism == Mechanism::Offset).then(|| Lbr::new(&format!("{name}.lbr"), d, d));
        Ok(Self {
            width,
            config: config.clone(),
            q: Linear::new(format!("{name}.wq"), d, d, false),
            k: Linear::new(format!("{name}.wk"), d, d, false),
            v: Linear::new(format!("{name}.wv"), d, d, false),
            tau,
            xi,
            lbr,
        })
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        if !self.config.enabled {
            return Ok(());
        }
        for l in [&self.q, &self.k, &self.v] {
            l.declare(store, rng)?;
        }
        if let Some(tau) = &self.tau {
            tau.iter().try_for_each(|l| l.declare(store, rng))?;
        }
        if let Some((l0, bn, l1)) = &self.xi {
            l0.declare(store, rng)?;
            bn.declare(store)?;
            l1.declare(store, rng)?;
        }
        if let Some(lbr) = &self.lbr {
            lbr.declare(store, rng)?;
        }
        Ok(())
    }

    /// `y`: `(B, S, D)` tokens; `p`: `(B, S, 3)` their coordinates.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, y: Var, p: Var) -> Result<GflOutput> {
        if !self.config.enabled {
            return Ok(GflOutput { output: y, weights: None });
        }
        let (q, k, v) = qkv_project(ctx, self, y)?;
        let att = if self.config.operator.is_vector() {
            let rho = match &self.xi {
                Some(xi) => Some(position_encode(ctx, xi, p)?),
                None => None,
            };
            let tau = self.tau.as_ref().expect("vector operator has tau");
            vector_attention(ctx, q, k, v, rho, tau, self.config.operator)?
        } else {
            scalar_attention(ctx.g, q, k, v)?
        };
        let output = match self.config.mechanism {
            Mechanism::Basic => att.output,
            Mechanism::AscnResidual | Mechanism::PaResidual => ctx.g.add(att.output, y)?,
            Mechanism::Offset => offset_attention(ctx, y, att.output, self.lbr.as_ref().expect("offset has lbr"))?,
        };
        Ok(GflOutput {
            output,
            weights: Some(att.weights),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GflOutput {
    pub output: Var,
    /// Normalized attention map (absent when the block is disabled).
    pub weights: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `(B, S, D)`.
    pub output: Var,
    /// `(B, S, S)` for scalar attention, `(B, S, S, D)` for vector attention.
    pub weights: Var,
}

fn check_tokens<T: Scalar>(g: &Graph<T>, x: Var, d: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != d {
        return Err(Error::shape(op, s, &[d]));
    }
    Ok((s[0], s[1]))
}

/// Three bias-free linear maps of the tokens.
pub fn qkv_project<T: Scalar>(ctx: &mut Ctx<T>, block: &GflBlock, y: Var) -> Result<(Var, Var, Var)> {
    check_tokens(ctx.g, y, block.width, "qkv_project")?;
    Ok((
        block.q.forward(ctx, y)?,
        block.k.forward(ctx, y)?,
        block.v.forward(ctx, y)?,
    ))
}

/// `softmax(Q Kᵀ / sqrt(D)) V`, softmax over keys.
pub fn scalar_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Attention> {
    let d = *g.shape(q).last().unwrap_or(&0);
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(scores, 2)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// Pairwise map `δ(q_m, k_n)` of shape `(B, S, S, D)` (`2D` for
/// concatenation).
pub fn delta<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, op: Operator) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || g.shape(k) != s.as_slice() {
        return Err(Error::shape("delta", &s, g.shape(k)));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let qe = g.reshape(q, &[b, n, 1, d])?;
    let ke = g.reshape(k, &[b, 1, n, d])?;
    match op {
        Operator::Subtraction => g.sub(qe, ke),
        Operator::Summation => g.add(qe, ke),
        Operator::Hadamard => g.mul(qe, ke),
        Operator::Division => g.div(qe, ke),
        Operator::Concatenation => {
            let full = [b, n, n, d];
            let qb = g.broadcast_to(qe, &full)?;
            let kb = g.broadcast_to(ke, &full)?;
            g.concat(&[qb, kb], 3)
        }
        Operator::Dot => Err(Error::Config("dot is a scalar operator".into())),
    }
}

/// `(P ⊖ P)(m, n) = P_m - P_n`, shape `(B, S, S, 3)`.
pub fn pairwise_offsets<T: Scalar>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let s = g.shape(p).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("pairwise_offsets", &s, &[3]));
    }
    let pm = g.reshape(p, &[s[0], s[1], 1, 3])?;
    let pn = g.reshape(p, &[s[0], 1, s[1], 3])?;
    g.sub(pm, pn)
}

/// `ρ = ξ(P ⊖ P)`, shape `(B, S, S, D)`.
pub fn position_encode<T: Scalar>(
    ctx: &mut Ctx<T>,
    xi: &(Linear, BatchNorm, Linear),
    p: Var,
) -> Result<Var> {
    let offsets = pairwise_offsets(ctx.g, p)?;
    let h = xi.0.forward(ctx, offsets)?;
    let h = xi.1.forward(ctx, h)?;
    let h = ctx.g.relu(h);
    xi.2.forward(ctx, h)
}

/// `E = l1(softmax(τ(δ(Q, K)) + ρ))` along keys per channel;
/// `F(m) = Σ_n E(m, n) ⊙ V(n)`.
pub fn vector_attention<T: Scalar>(
    ctx: &mut Ctx<T>,
    q: Var,
    k: Var,
    v: Var,
    rho: Option<Var>,
    tau: &[Linear; 2],
    op: Operator,
) -> Result<Attention> {
    let s = ctx.g.shape(v).to_vec();
    let pre = delta(ctx.g, q, k, op)?;
    let h = tau[0].forward(ctx, pre)?;
    let h = ctx.g.relu(h);
    let mut logits = tau[1].forward(ctx, h)?;
    if let Some(rho) = rho {
        logits = ctx.g.add(logits, rho)?;
    }
    let soft = ctx.g.softmax(logits, 2)?;
    let weights = ctx.g.l1_normalize(soft, 2)?;
    let ve = ctx.g.reshape(v, &[s[0], 1, s[1], s[2]])?;
    let weighted = ctx.g.mul(weights, ve)?;
    let output = ctx.g.sum_axis(weighted, 2)?;
    Ok(Attention { output, weights })
}

/// `LBR(Y - A(Y)) + Y`.
pub fn offset_attention<T: Scalar>(ctx: &mut Ctx<T>, y: Var, attended: Var, lbr: &Lbr) -> Result<Var> {
    let offset = ctx.g.sub(y, attended)?;
    let h = lbr.forward(ctx, offset)?;
    ctx.g.add(h, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{BnMode, BN_EPS, FD_STEP};
    use crate::nn::{grad_check_block, randomize_affine};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn block(d: usize, mechanism: Mechanism, operator: Operator, pos: bool, seed: u64) -> (GflBlock, ParamStore<f64>) {
        let cfg = AttentionConfig {
            enabled: true,
            mechanism,
            operator,
            position_encoding: pos,
            tau_hidden: None,
        };
        let b = GflBlock::new("a", d, &cfg).unwrap();
        let mut store = ParamStore::new();
        b.declare(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (b, store)
    }

    fn set_identity(store: &mut ParamStore<f64>, name: &str, d: usize) {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        store.params.insert(format!("{name}.w"), tensor(&[d, d], &w));
        if store.params.contains_key(&format!("{name}.b")) {
            store.params.insert(format!("{name}.b"), Tensor::zeros([d]));
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("pa".parse::<Mechanism>().unwrap(), Mechanism::PaResidual);
        assert_eq!("concat".parse::<Operator>().unwrap(), Operator::Concatenation);
        assert!("cross".parse::<Operator>().is_err());
        for op in Operator::ALL {
            assert_eq!(op.short_name().parse::<Operator>().unwrap(), op);
        }
        for m in Mechanism::ALL {
            assert_eq!(m.to_string().parse::<Mechanism>().unwrap(), m);
        }
    }

    #[test]
    fn qkv_identity_and_zero() {
        let (b, mut store) = block(4, Mechanism::Basic, Operator::Dot, false, 0);
        set_identity(&mut store, "a.wq", 4);
        let y = Tensor::<f64>::uniform([1, 3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
        let (q, _, _) = qkv_project(&mut ctx, &b, yv).unwrap();
        assert_eq!(g.value(q).data(), y.data());

        for n in ["a.wq", "a.wk", "a.wv"] {
            store.params.insert(format!("{n}.w"), Tensor::zeros([4, 4]));
        }
        let mut g = Graph::new();
        let yv = g.constant(y);
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
        let (q, k, v) = qkv_project(&mut ctx, &b, yv).unwrap();
        for x in [q, k, v] {
            assert!(g.value(x).data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn qkv_gradient_matches_finite_differences() {
        let (b, store) = block(4, Mechanism::Basic, Operator::Dot, false, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor::<f64>::uniform([1, 3, 4], -1.0, 1.0, &mut rng);
        let proj = Tensor::<f64>::uniform([1, 3, 4], -1.0, 1.0, &mut rng);
        let report = grad_check_block(&store, &[y], BnMode::Train, FD_STEP, |ctx, v| {
            let (q, k, val) = qkv_project(ctx, &b, v[0])?;
            let p = ctx.g.constant(proj.clone());
            let qk = ctx.g.mul(q, k)?;
            let s = ctx.g.add(qk, val)?;
            let s = ctx.g.mul(s, p)?;
            Ok(ctx.g.sum(s))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn scalar_attention_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(tensor(&[1, 1, 2], &[0.3, -0.2]));
        let v = g.constant(tensor(&[1, 1, 2], &[5.0, 7.0]));
        let a = scalar_attention(&mut g, q, q, v).unwrap();
        assert_eq!(g.value(a.output).data(), &[5.0, 7.0]);

        let q = g.constant(tensor(&[1, 2, 2], &[0.3, -0.2, 1.0, 0.5]));
        let k = g.constant(tensor(&[1, 2, 2], &[0.4, 0.1, 0.4, 0.1]));
        let v = g.constant(tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let a = scalar_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(a.weights).data(), &[0.5; 4]);
        assert_eq!(g.value(a.output).data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn delta_examples() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(tensor(&[1, 2, 1], &[1.0, 2.0]));
        let k = g.constant(tensor(&[1, 2, 1], &[3.0, 5.0]));
        let d = delta(&mut g, q, k, Operator::Subtraction).unwrap();
        assert_eq!(g.shape(d), &[1, 2, 2, 1]);
        assert_eq!(g.value(d).data(), &[-2.0, -4.0, -1.0, -3.0]);
        // self-pairs vanish; with coinciding tokens the whole map does
        let d = delta(&mut g, q, q, Operator::Subtraction).unwrap();
        assert_eq!(g.value(d).data()[0], 0.0);
        assert_eq!(g.value(d).data()[3], 0.0);
        let same = g.constant(tensor(&[1, 2, 1], &[4.0, 4.0]));
        let d = delta(&mut g, same, same, Operator::Subtraction).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let z = g.constant(Tensor::zeros([1, 2, 1]));
        let d = delta(&mut g, z, k, Operator::Hadamard).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let d = delta(&mut g, q, k, Operator::Concatenation).unwrap();
        assert_eq!(g.shape(d), &[1, 2, 2, 2]);
        assert_eq!(g.value(d).data(), &[1.0, 3.0, 1.0, 5.0, 2.0, 3.0, 2.0, 5.0]);
        let d = delta(&mut g, q, k, Operator::Division).unwrap();
        assert_eq!(g.value(d).data(), &[1.0 / 3.0, 0.2, 2.0 / 3.0, 0.4]);
        assert!(matches!(delta(&mut g, q, z, Operator::Division), Err(Error::Domain { .. })));
        assert!(delta(&mut g, q, k, Operator::Dot).is_err());
    }

    #[test]
    fn subtraction_delta_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::uniform([1, 3, 2], -1.0, 1.0, &mut rng));
        let k = g.constant(Tensor::uniform([1, 3, 2], -1.0, 1.0, &mut rng));
        let a = delta(&mut g, q, k, Operator::Subtraction).unwrap();
        let b = delta(&mut g, k, q, Operator::Subtraction).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        for m in 0..3 {
            for n in 0..3 {
                for c in 0..2 {
                    assert_eq!(a.get(&[0, m, n, c]).unwrap(), -b.get(&[0, n, m, c]).unwrap());
                }
            }
        }
    }

    #[test]
    fn position_offsets_and_encoding_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, store) = block(3, Mechanism::Offset, Operator::Subtraction, true, 5);
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::uniform([1, 4, 3], -1.0, 1.0, &mut rng));
        let off = pairwise_offsets(&mut g, p).unwrap();
        let t = g.value(off).clone();
        for m in 0..4 {
            for n in 0..4 {
                for c in 0..3 {
                    let (x, y) = (t.get(&[0, m, n, c]).unwrap(), t.get(&[0, n, m, c]).unwrap());
                    assert_eq!(x, -y);
                    if m == n {
                        assert_eq!(x, 0.0);
                    }
                }
            }
        }
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Train, true);
        let rho = position_encode(&mut ctx, b.xi.as_ref().unwrap(), p).unwrap();
        assert_eq!(g.shape(rho), &[1, 4, 4, 3]);
    }

    #[test]
    fn vector_attention_uniform_when_queries_equal_keys() {
        let (b, store) = block(3, Mechanism::Basic, Operator::Subtraction, false, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let qk = tensor(&[1, 4, 3], &[0.3, -0.8, 0.5].repeat(4));
        let v = Tensor::<f64>::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (q, vv) = (g.constant(qk), g.constant(v.clone()));
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
        let a = vector_attention(&mut ctx, q, q, vv, None, b.tau.as_ref().unwrap(), Operator::Subtraction).unwrap();
        for &w in g.value(a.weights).data() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        let out = g.value(a.output).clone();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|n| v.get(&[0, n, c]).unwrap()).sum::<f64>() / 4.0;
            for m in 0..4 {
                assert!((out.get(&[0, m, c]).unwrap() - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        for op in Operator::ALL {
            let (b, store) = block(2, Mechanism::Basic, op, true, 8);
            let mut g = Graph::new();
            let y = g.constant(tensor(&[1, 1, 2], &[0.7, -0.4]));
            let p = g.constant(tensor(&[1, 1, 3], &[0.1, 0.2, 0.3]));
            let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
            let out = b.forward(&mut ctx, y, p).unwrap();
            let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
            let (_, _, v) = qkv_project(&mut ctx, &b, y).unwrap();
            let (o, v) = (g.value(out.output).data(), g.value(v).data());
            for (a, b) in o.iter().zip(v) {
                assert!((a - b).abs() < 1e-12, "{op}");
            }
        }
    }

    #[test]
    fn offset_attention_micro_example() {
        let (b, mut store) = block(2, Mechanism::Offset, Operator::Subtraction, false, 9);
        set_identity(&mut store, "a.lbr.lin", 2);
        let mut g = Graph::new();
        let y = g.constant(tensor(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let va = g.constant(tensor(&[1, 2, 2], &[0.5; 4]));
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
        let out = offset_attention(&mut ctx, y, va, b.lbr.as_ref().unwrap()).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        let expected = [1.0 + 0.5 * s, 0.0, 0.0, 1.0 + 0.5 * s];
        assert_eq!(g.shape(out), &[1, 2, 2]);
        for (a, e) in g.value(out).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        // zero offset leaves LBR(0) + Y
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Eval, false);
        let out = offset_attention(&mut ctx, y, y, b.lbr.as_ref().unwrap()).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dispatch_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = Tensor::<f64>::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
        let p = Tensor::<f64>::uniform([2, 3, 3], -1.0, 1.0, &mut rng);

        let (b, store) = block(4, Mechanism::Basic, Operator::Dot, true, 11);
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y.clone()), g.constant(p.clone()));
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Train, false);
        let out = b.forward(&mut ctx, yv, pv).unwrap();
        let (q, k, v) = qkv_project(&mut ctx, &b, yv).unwrap();
        let direct = scalar_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out.output), g.value(direct.output));

        let (b, mut store) = block(4, Mechanism::PaResidual, Operator::Subtraction, true, 12);
        for n in ["a.wq", "a.wk", "a.wv"] {
            store.params.insert(format!("{n}.w"), Tensor::zeros([4, 4]));
        }
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y.clone()), g.constant(p.clone()));
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Train, false);
        let out = b.forward(&mut ctx, yv, pv).unwrap();
        assert_eq!(g.value(out.output), &y);

        let cfg = AttentionConfig { enabled: false, ..AttentionConfig::default() };
        let off = GflBlock::new("a", 4, &cfg).unwrap();
        let mut empty = ParamStore::new();
        off.declare(&mut empty, &mut rng).unwrap();
        assert_eq!(empty.num_params(), 0);
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y.clone()), g.constant(p));
        let mut ctx = Ctx::new(&mut g, &empty, BnMode::Train, false);
        assert_eq!(off.forward(&mut ctx, yv, pv).unwrap().output, yv);
    }

    #[test]
    fn offset_block_matches_composition_of_parts() {
        let (b, store) = block(3, Mechanism::Offset, Operator::Subtraction, true, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let y = Tensor::<f64>::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
        let p = Tensor::<f64>::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y), g.constant(p));
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Train, false);
        let whole = b.forward(&mut ctx, yv, pv).unwrap().output;
        let (q, k, v) = qkv_project(&mut ctx, &b, yv).unwrap();
        let rho = position_encode(&mut ctx, b.xi.as_ref().unwrap(), pv).unwrap();
        let va = vector_attention(&mut ctx, q, k, v, Some(rho), b.tau.as_ref().unwrap(), Operator::Subtraction).unwrap();
        let parts = offset_attention(&mut ctx, yv, va.output, b.lbr.as_ref().unwrap()).unwrap();
        assert_eq!(g.value(whole), g.value(parts));
    }

    #[test]
    fn every_mechanism_and_operator_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for m in Mechanism::ALL {
            for op in Operator::ALL {
                let (b, store) = block(4, m, op, true, rng.random());
                // keep division away from zero denominators
                let y = Tensor::<f64>::uniform([1, 4, 4], 0.2, 1.0, &mut rng);
                let p = Tensor::<f64>::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
                let proj = Tensor::<f64>::uniform([1, 4, 4], -1.0, 1.0, &mut rng);
                let mut store = store;
                randomize_affine(&mut store, &mut rng);
                if op == Operator::Division {
                    let wk = store.params.get_mut("a.wk.w").unwrap();
                    *wk = wk.map(|v| v.abs() + 0.1);
                }
                let report = grad_check_block(&store, &[y, p], BnMode::Train, FD_STEP, |ctx, v| {
                    let out = b.forward(ctx, v[0], v[1])?.output;
                    let pr = ctx.g.constant(proj.clone());
                    let s = ctx.g.mul(out, pr)?;
                    Ok(ctx.g.sum(s))
                })
                .unwrap();
                assert!(report.passes(1e-4), "{m} {op}: {report:?}");
            }
        }
    }

    fn run(b: &GflBlock, store: &ParamStore<f64>, y: &Tensor<f64>, p: &Tensor<f64>) -> (Tensor<f64>, Option<Tensor<f64>>) {
        let mut g = Graph::new();
        let (yv, pv) = (g.constant(y.clone()), g.constant(p.clone()));
        let mut ctx = Ctx::new(&mut g, store, BnMode::Eval, false);
        let out = b.forward(&mut ctx, yv, pv).unwrap();
        (g.value(out.output).clone(), out.weights.map(|w| g.value(w).clone()))
    }

    fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let w = t.shape()[2];
        let data: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_weights_are_normalized(seed in 0u64..10_000, op_i in 0usize..6, s in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = Operator::ALL[op_i];
            let (b, store) = block(3, Mechanism::Basic, op, true, seed);
            let y = Tensor::<f64>::uniform([1, s, 3], 0.1, 2.0, &mut rng);
            let p = Tensor::<f64>::uniform([1, s, 3], -1.0, 1.0, &mut rng);
            let (_, w) = run(&b, &store, &y, &p);
            let w = w.unwrap();
            let width = if op.is_vector() { 3 } else { 1 };
            for m in 0..s {
                for c in 0..width {
                    let total: f64 = (0..s).map(|n| w.data()[(m * s + n) * width + c]).sum();
                    prop_assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn block_is_permutation_equivariant(seed in 0u64..10_000, m_i in 0usize..4, op_i in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, store) = block(3, Mechanism::ALL[m_i], Operator::ALL[op_i], true, seed);
            let y = Tensor::<f64>::uniform([1, 5, 3], 0.1, 2.0, &mut rng);
            let p = Tensor::<f64>::uniform([1, 5, 3], -1.0, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let (a, _) = run(&b, &store, &y, &p);
            let (pb, _) = run(&b, &store, &permute_rows(&y, &perm), &permute_rows(&p, &perm));
            let expected = permute_rows(&a, &perm);
            prop_assert!(pb.max_abs_diff(&expected) < 1e-12);
        }

        #[test]
        fn without_position_encoding_translation_is_ignored(seed in 0u64..10_000, op_i in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, store) = block(3, Mechanism::Offset, Operator::ALL[op_i], false, seed);
            let y = Tensor::<f64>::uniform([1, 4, 3], 0.1, 2.0, &mut rng);
            let p = Tensor::<f64>::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
            let shifted = p.map(|v| v + 0.37);
            prop_assert_eq!(run(&b, &store, &y, &p).0, run(&b, &store, &y, &shifted).0);
        }
    }
}
