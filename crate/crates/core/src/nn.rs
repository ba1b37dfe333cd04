//! Named parameters and the small layer vocabulary shared by every block.
//!
//! Layers are plain descriptions (name + widths). `declare` materializes their
//! tensors in a [`ParamStore`]; `forward` looks them up by name inside a
//! [`Ctx`], so initialization and evaluation cannot drift apart silently: a
//! missing or mis-shaped tensor is a dimension error.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{grad_check, BatchStats, BnMode, GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batchnorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors and non-trainable buffers, keyed by stable path names.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn insert_param(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.params.insert(name.clone(), t).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Folds observed train-mode statistics into the running buffers
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        for (name, s) in stats {
            let unbias = if s.count > 1 {
                T::from_usize(s.count) / T::from_usize(s.count - 1)
            } else {
                T::one()
            };
            let mean = self.buffer_mut(&format!("{name}.running_mean"))?;
            for (r, &b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let var = self.buffer_mut(&format!("{name}.running_var"))?;
            for (r, &b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
        Ok(())
    }

    fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }
}

/// One forward pass: the graph, the parameters it reads, and the batchnorm
/// statistics it observed.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    pub mode: BnMode,
    track: bool,
    vars: BTreeMap<String, Var>,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `track` decides whether parameters enter the graph as differentiable
    /// leaves or as constants.
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode, track: bool) -> Self {
        Self {
            g,
            store,
            mode,
            track,
            vars: BTreeMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.track {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes lookups of the named parameters to existing vars (used to
    /// differentiate with respect to externally created leaves).
    pub fn bind(&mut self, pairs: impl IntoIterator<Item = (String, Var)>) {
        self.vars.extend(pairs);
    }

    fn buffer(&self, name: &str) -> Result<&'a [T]> {
        let store: &'a ParamStore<T> = self.store;
        store
            .buffers
            .get(name)
            .map(|t| t.data())
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    /// Parameter vars created so far, by name.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(d_in), 1/sqrt(d_in))` for weights and bias.
    Default,
    /// Default weights scaled by the factor, zero bias.
    Scaled(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
    pub init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            bias,
            init: Init::Default,
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.bias { self.dout } else { 0 }
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (self.din as f64).sqrt();
        let factor = match self.init {
            Init::Default => 1.0,
            Init::Scaled(f) => f,
        };
        let w = Tensor::<f64>::uniform([self.din, self.dout], -bound, bound, rng);
        store.insert_param(format!("{}.w", self.name), w.map(|v| v * factor).cast())?;
        if self.bias {
            let b = match self.init {
                Init::Default => Tensor::<f64>::uniform([self.dout], -bound, bound, rng),
                Init::Scaled(_) => Tensor::zeros([self.dout]),
            };
            store.insert_param(format!("{}.b", self.name), b.cast())?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.b", self.name))?)
        } else {
            None
        };
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = self.channels;
        store.insert_param(format!("{}.gamma", self.name), Tensor::ones([c]))?;
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros([c]))?;
        store
            .buffers
            .insert(format!("{}.running_mean", self.name), Tensor::zeros([c]));
        store
            .buffers
            .insert(format!("{}.running_var", self.name), Tensor::ones([c]));
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
        let var = ctx.buffer(&format!("{}.running_var", self.name))?;
        let mode = ctx.mode;
        let (y, stats) = ctx.g.batchnorm(x, gamma, beta, mode, mean, var)?;
        if let Some(s) = stats {
            ctx.stats.push((self.name.clone(), s));
        }
        Ok(y)
    }
}

/// Linear + batchnorm + ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Lbr {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Lbr {
    pub fn new(name: &str, din: usize, dout: usize) -> Self {
        Self {
            linear: Linear::new(format!("{name}.lin"), din, dout, true),
            bn: BatchNorm::new(format!("{name}.bn"), dout),
        }
    }

    pub fn num_params(&self) -> usize {
        self.linear.num_params() + self.bn.num_params()
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<()> {
        self.linear.declare(store, rng)?;
        self.bn.declare(store)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.linear.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(ctx.g.relu(h))
    }
}

/// Finite-difference check of a block with respect to its inputs and every
/// parameter in `store`. `f` receives the input vars and must return a scalar.
pub fn grad_check_block<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: BnMode,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.params.keys().cloned().collect();
    let mut all = inputs.to_vec();
    all.extend(store.params.values().cloned());
    let n = inputs.len();
    grad_check(
        |g, vars| {
            let mut ctx = Ctx::new(g, store, mode, true);
            ctx.bind(names.iter().cloned().zip(vars[n..].iter().copied()));
            f(&mut ctx, &vars[..n])
        },
        &all,
        step,
    )
}

/// Moves every batchnorm affine pair away from its `(1, 0)` initialization.
///
/// Gradient checks should run at a generic point: with `beta = 0`, features
/// that sit exactly at the batch mean (e.g. the zero self-offsets of pairwise
/// position encodings, whose batch mean equals the layer bias) land on the
/// ReLU corner where one-sided slopes disagree.
pub fn randomize_affine<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R) {
    for (name, t) in store.params.iter_mut() {
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_three_to_four_has_sixteen_params() {
        let l = Linear::new("l", 3, 4, true);
        let mut store = ParamStore::<f32>::new();
        l.declare(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(l.num_params(), 16);
        assert_eq!(store.num_params(), 16);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let l = Linear::new("l", 2, 2, false);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        l.declare(&mut store, &mut rng).unwrap();
        assert!(l.declare(&mut store, &mut rng).is_err());
    }

    #[test]
    fn running_stats_follow_momentum_with_unbiased_variance() {
        let bn = BatchNorm::new("bn", 1);
        let mut store = ParamStore::<f64>::new();
        bn.declare(&mut store).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64([2, 1], &[1.0, 3.0]).unwrap());
        let mut ctx = Ctx::new(&mut g, &store, BnMode::Train, true);
        bn.forward(&mut ctx, x).unwrap();
        let stats = std::mem::take(&mut ctx.stats);
        store.update_running_stats(&stats).unwrap();
        // batch mean 2, biased var 1, unbiased var 2
        assert!((store.buffers["bn.running_mean"].data()[0] - 0.2).abs() < 1e-12);
        assert!((store.buffers["bn.running_var"].data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn scaled_init_zeroes_bias() {
        let l = Linear::new("t", 4, 4, true).with_init(Init::Scaled(0.1));
        let mut store = ParamStore::<f64>::new();
        l.declare(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(store.params["t.b"].data().iter().all(|&v| v == 0.0));
        assert!(store.params["t.w"].data().iter().all(|&v| v.abs() <= 0.05 + 1e-12));
    }
}
