use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::GflBlock;
use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::lfa::{LfaBlock, LfaPlan};
use crate::nn::{Ctx, Lbr, Linear, ParamStore};
use crate::pointcloud::PointCloud;
use crate::sampling::Point;
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;

/// Layer layout derived from a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub modules: Vec<(LfaBlock, GflBlock)>,
    /// Pointwise layer applied before global max pooling.
    pub lift: Lbr,
    pub head: Vec<Lbr>,
    pub out: Linear,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut din = 3;
        let mut modules = Vec::with_capacity(config.modules.len());
        for (i, m) in config.modules.iter().enumerate() {
            let lfa = LfaBlock::new(&format!("m{}.lfa", i + 1), din, &m.lfa)?;
            din = lfa.dout();
            let gfl = GflBlock::new(&format!("m{}.gfl", i + 1), din, &m.attention)?;
            modules.push((lfa, gfl));
        }
        let lift = Lbr::new("lift", din, config.final_width);
        let mut head = Vec::with_capacity(config.head.len());
        let mut w = config.final_width;
        for (i, &h) in config.head.iter().enumerate() {
            head.push(Lbr::new(&format!("head{i}"), w, h));
            w = h;
        }
        Ok(Self {
            modules,
            lift,
            head,
            out: Linear::new("out", w, config.classes, true),
        })
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (lfa, gfl) in &self.modules {
            lfa.declare(store, &mut rng)?;
            gfl.declare(store, &mut rng)?;
        }
        self.lift.declare(store, &mut rng)?;
        for l in &self.head {
            l.declare(store, &mut rng)?;
        }
        self.out.declare(store, &mut rng)
    }
}

/// A batch of equally sized clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub positions: Vec<Vec<Point>>,
    pub normals: Vec<Vec<Point>>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Unlabelled clouds get label 0.
    pub fn new<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<Self> {
        let mut b = Batch {
            positions: Vec::new(),
            normals: Vec::new(),
            labels: Vec::new(),
        };
        for c in clouds {
            if c.is_empty() {
                return Err(Error::EmptyCloud);
            }
            if let Some(first) = b.positions.first() {
                if first.len() != c.len() {
                    return Err(Error::shape("batch", &[first.len()], &[c.len()]));
                }
            }
            b.positions.push(c.positions.clone());
            b.normals.push(c.normals.clone());
            b.labels.push(c.label.unwrap_or(0));
        }
        if b.positions.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn points(&self) -> usize {
        self.positions[0].len()
    }

    fn tensor<T: Scalar>(rows: &[Vec<Point>]) -> Tensor<T> {
        let data = rows.iter().flatten().flatten().map(|&v| T::from_f64(v)).collect();
        Tensor::new(vec![rows.len(), rows[0].len(), 3], data).expect("batch shape")
    }
}

/// Everything a forward pass produces.
pub struct Forward<T> {
    /// `(B, C)`.
    pub logits: Var,
    /// `(B, S_last, final_width)` features entering the global max pool.
    pub prepool: Var,
    /// Per module: attention weights (if the block is enabled).
    pub attention: Vec<Option<Var>>,
    /// Coordinates of the last module's centers, per cloud.
    pub centers: Vec<Vec<Point>>,
    pub stats: Vec<(String, BatchStats<T>)>,
    /// Parameter vars by name (leaves when tracked).
    pub params: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut store = ParamStore::new();
        arch.declare(&mut store, seed)?;
        Ok(Self { config, arch, store })
    }

    /// Rebuilds the layout around existing tensors (e.g. from a checkpoint).
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut expected = ParamStore::<T>::new();
        arch.declare(&mut expected, 0)?;
        for (name, t) in expected.params.iter().chain(&expected.buffers) {
            let got = store
                .params
                .get(name)
                .or_else(|| store.buffers.get(name))
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape("model tensor", got.shape(), t.shape()));
            }
        }
        if expected.params.len() != store.params.len() || expected.buffers.len() != store.buffers.len() {
            return Err(Error::Config("tensor set does not match the model layout".into()));
        }
        Ok(Self { config, arch, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    /// Runs the network on `batch`. With `track`, parameters are
    /// differentiable leaves listed in [`Forward::params`].
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch, mode: BnMode, track: bool) -> Result<Forward<T>> {
        let mut ctx = Ctx::new(g, &self.store, mode, track);
        self.forward_ctx(&mut ctx, batch)
    }

    /// Like [`Model::forward`] inside a caller-provided context.
    pub fn forward_ctx(&self, ctx: &mut Ctx<T>, batch: &Batch) -> Result<Forward<T>> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if batch.points() != self.config.points {
            return Err(Error::Config(format!(
                "model expects {} points per cloud, got {}",
                self.config.points,
                batch.points()
            )));
        }
        let mut coords = batch.positions.clone();
        let mut positions = ctx.g.constant(Batch::tensor(&batch.positions));
        let mut feats = ctx.g.constant(Batch::tensor(&batch.normals));
        let mut attention = Vec::with_capacity(self.arch.modules.len());
        for ((lfa, gfl), mc) in self.arch.modules.iter().zip(&self.config.modules) {
            let grouping = mc.lfa.enabled.then_some(&mc.lfa.grouping);
            let plan = LfaPlan::build(&coords, mc.samples, grouping)?;
            let local = lfa.forward(ctx, feats, positions, &plan)?;
            let global = gfl.forward(ctx, local.features, local.positions)?;
            coords = plan.sampled_positions(&coords);
            positions = local.positions;
            feats = global.output;
            attention.push(global.weights);
        }
        let prepool = self.arch.lift.forward(ctx, feats)?;
        let (pooled, _) = ctx.g.max_reduce(prepool, 1)?;
        let mut h = pooled;
        for l in &self.arch.head {
            h = l.forward(ctx, h)?;
        }
        let logits = self.arch.out.forward(ctx, h)?;
        Ok(Forward {
            logits,
            prepool,
            attention,
            centers: coords,
            stats: std::mem::take(&mut ctx.stats),
            params: ctx.vars().iter().map(|(k, &v)| (k.clone(), v)).collect(),
        })
    }

    /// Eval-mode class scores, `(B, C)` row-major.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch, BnMode::Eval, false)?;
        let c = self.config.classes;
        Ok(g.value(fwd.logits).data().chunks(c).map(<[T]>::to_vec).collect())
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.predict_logits(batch)?.iter().map(|row| argmax(row)).collect())
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of one logit row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
