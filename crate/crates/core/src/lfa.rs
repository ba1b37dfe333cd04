//! Local feature aggregation: context fusion, shared edge convolution and
//! local max-pooling over multi-scale ball neighborhoods.
//!
//! Everything is batched. Features are `(B, N, D)`, positions `(B, N, 3)`,
//! edge tensors `(B, S, K, C)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Lbr, ParamStore};
use crate::sampling::{ball_query, farthest_point_sample, GroupingSpec, Point};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfaConfig {
    /// When off, each sampled center is embedded from its own features and
    /// position by one LBR layer of the same total width.
    pub enabled: bool,
    pub grouping: GroupingSpec,
    /// Edge-conv layer widths, one list per scale.
    pub widths: Vec<Vec<usize>>,
}

impl LfaConfig {
    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        if self.widths.len() != self.grouping.scales.len() {
            return Err(Error::Config(format!(
                "{} width lists for {} scales",
                self.widths.len(),
                self.grouping.scales.len()
            )));
        }
        if self.widths.iter().any(|w| w.is_empty() || w.contains(&0)) {
            return Err(Error::Config("edge-conv widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Sum of the per-scale output widths.
    pub fn out_width(&self) -> usize {
        self.widths.iter().map(|w| *w.last().unwrap_or(&0)).sum()
    }

    pub fn single_scale(&self) -> Self {
        let mid = self.grouping.scales.len() / 2;
        Self {
            enabled: self.enabled,
            grouping: self.grouping.middle(),
            widths: vec![self.widths[mid].clone()],
        }
    }
}

/// Sampled centers and per-scale neighborhoods of one module, for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LfaPlan {
    /// `centers[b]`: FPS indices in selection order.
    pub centers: Vec<Vec<usize>>,
    /// `groups[scale][b]`: `S * K` member indices, center-major.
    pub groups: Vec<Vec<Vec<usize>>>,
    pub ks: Vec<usize>,
}

impl LfaPlan {
    pub fn build(positions: &[Vec<Point>], samples: usize, grouping: Option<&GroupingSpec>) -> Result<Self> {
        let centers = positions
            .iter()
            .map(|p| farthest_point_sample(p, samples))
            .collect::<Result<Vec<_>>>()?;
        let scales = grouping.map(|g| g.scales.as_slice()).unwrap_or(&[]);
        let mut groups = Vec::with_capacity(scales.len());
        for (si, s) in scales.iter().enumerate() {
            let per_batch = positions
                .iter()
                .zip(&centers)
                .map(|(p, c)| {
                    Ok(ball_query(p, c, s.radius, s.k, si)?
                        .into_iter()
                        .flat_map(|h| h.members)
                        .collect())
                })
                .collect::<Result<Vec<Vec<usize>>>>()?;
            groups.push(per_batch);
        }
        Ok(Self {
            centers,
            groups,
            ks: scales.iter().map(|s| s.k).collect(),
        })
    }

    pub fn samples(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn sampled_positions(&self, positions: &[Vec<Point>]) -> Vec<Vec<Point>> {
        positions
            .iter()
            .zip(&self.centers)
            .map(|(p, c)| c.iter().map(|&i| p[i]).collect())
            .collect()
    }
}

/// Gathers rows of a `(B, N, D)` tensor with per-batch indices into
/// `(B, len, D)`.
pub fn gather_rows<T: Scalar>(g: &mut Graph<T>, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != indices.len() {
        return Err(Error::shape("gather_rows", &s, &[indices.len()]));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let len = indices.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(b * len);
    for (bi, idx) in indices.iter().enumerate() {
        if idx.len() != len {
            return Err(Error::shape("gather_rows", &[len], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, extent: n });
        }
        flat.extend(idx.iter().map(|&i| bi * n + i));
    }
    let rows = g.reshape(x, &[b * n, d])?;
    let picked = g.gather(rows, &flat, 0)?;
    g.reshape(picked, &[b, len, d])
}

/// Edge inputs `concat(F_j - F_i, F_i, P_i)` of shape `(B, S, K, 2D + 3)`.
pub fn context_fuse<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    positions: Var,
    centers: &[Vec<usize>],
    members: &[Vec<usize>],
    k: usize,
) -> Result<Var> {
    let d = *g.shape(feats).last().unwrap_or(&0);
    let b = centers.len();
    let s = centers.first().map_or(0, Vec::len);
    let fj = gather_rows(g, feats, members)?;
    let fj = g.reshape(fj, &[b, s, k, d])?;
    let fi = gather_rows(g, feats, centers)?;
    let fi = g.reshape(fi, &[b, s, 1, d])?;
    let pi = gather_rows(g, positions, centers)?;
    let pi = g.reshape(pi, &[b, s, 1, 3])?;
    let diff = g.sub(fj, fi)?;
    let ci = g.concat(&[fi, pi], 3)?;
    let ci = g.broadcast_to(ci, &[b, s, k, d + 3])?;
    g.concat(&[diff, ci], 3)
}

/// Componentwise max over the neighbor axis: `(B, S, K, C) -> (B, S, C)`.
pub fn local_maxpool<T: Scalar>(g: &mut Graph<T>, edges: Var) -> Result<Var> {
    Ok(g.max_reduce(edges, 2)?.0)
}

/// Shared pointwise LBR stack applied to every edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConv {
    pub layers: Vec<Lbr>,
}

impl EdgeConv {
    pub fn new(name: &str, din: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = din;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Lbr::new(&format!("{name}.conv{i}"), d, w));
            d = w;
        }
        Self { layers }
    }

    pub fn din(&self) -> usize {
        self.layers.first().map_or(0, |l| l.linear.din)
    }

    pub fn dout(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.dout)
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.declare(store, rng))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, edges: Var) -> Result<Var> {
        let width = *ctx.g.shape(edges).last().unwrap_or(&0);
        if width != self.din() {
            return Err(Error::shape("edge_conv", ctx.g.shape(edges), &[self.din()]));
        }
        self.layers.iter().try_fold(edges, |x, l| l.forward(ctx, x))
    }
}

/// Output of one aggregation block.
#[derive(Clone, Copy, Debug)]
pub struct LocalFeatures {
    /// `(B, S, 3)` sampled center coordinates.
    pub positions: Var,
    /// `(B, S, D_out)`.
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfaBlock {
    pub din: usize,
    pub branches: Vec<EdgeConv>,
    /// Pointwise replacement used when aggregation is disabled.
    pub embed: Option<Lbr>,
}

impl LfaBlock {
    pub fn new(name: &str, din: usize, config: &LfaConfig) -> Result<Self> {
        config.validate()?;
        if config.enabled {
            let branches = config
                .widths
                .iter()
                .enumerate()
                .map(|(i, w)| EdgeConv::new(&format!("{name}.s{i}"), 2 * din + 3, w))
                .collect();
            Ok(Self { din, branches, embed: None })
        } else {
            Ok(Self {
                din,
                branches: Vec::new(),
                embed: Some(Lbr::new(&format!("{name}.embed"), din + 3, config.out_width())),
            })
        }
    }

    pub fn dout(&self) -> usize {
        match &self.embed {
            Some(e) => e.linear.dout,
            None => self.branches.iter().map(EdgeConv::dout).sum(),
        }
    }

    pub fn declare<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        for b in &self.branches {
            b.declare(store, rng)?;
        }
        if let Some(e) = &self.embed {
            e.declare(store, rng)?;
        }
        Ok(())
    }

    /// `feats`: `(B, N, din)`; `positions`: `(B, N, 3)`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        feats: Var,
        positions: Var,
        plan: &LfaPlan,
    ) -> Result<LocalFeatures> {
        let sampled = gather_rows(ctx.g, positions, &plan.centers)?;
        let features = match &self.embed {
            Some(embed) => {
                let fi = gather_rows(ctx.g, feats, &plan.centers)?;
                let ci = ctx.g.concat(&[fi, sampled], 2)?;
                embed.forward(ctx, ci)?
            }
            None => {
                if plan.groups.len() != self.branches.len() {
                    return Err(Error::shape("lfa plan", &[plan.groups.len()], &[self.branches.len()]));
                }
                let mut pooled = Vec::with_capacity(self.branches.len());
                for ((branch, members), &k) in self.branches.iter().zip(&plan.groups).zip(&plan.ks) {
                    let edges = context_fuse(ctx.g, feats, positions, &plan.centers, members, k)?;
                    let h = branch.forward(ctx, edges)?;
                    pooled.push(local_maxpool(ctx.g, h)?);
                }
                if pooled.len() == 1 {
                    pooled[0]
                } else {
                    ctx.g.concat(&pooled, 2)?
                }
            }
        };
        Ok(LocalFeatures {
            positions: sampled,
            features,
        })
    }
}
