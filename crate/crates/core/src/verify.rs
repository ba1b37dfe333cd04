//! Finite-difference gradient suite over primitives, blocks and a small
//! end-to-end model, all at double precision.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, GflBlock, Mechanism, Operator};
use crate::autodiff::{grad_check, BinaryOp, BnMode, Graph, Var, FD_STEP};
use crate::dataset::{synth_cloud, ShapeKind};
use crate::error::{Error, Result};
use crate::lfa::{EdgeConv, LfaBlock, LfaConfig, LfaPlan};
use crate::network::{Batch, Model, ModelConfig};
use crate::nn::{grad_check_block, randomize_affine, Ctx, ParamStore};
use crate::sampling::{GroupingSpec, Point, Scale};
use crate::tensor::Tensor;

/// Tolerance for primitives and blocks.
pub const BLOCK_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Blocks, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown scope {s:?} (expected ops, blocks, model)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// `sum(v * R)` for a fixed random `R`.
fn project(g: &mut Graph<f64>, v: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<Tensor<f64>>, OpFn, Vec<usize>)> {
    let mut cases: Vec<(String, Vec<Tensor<f64>>, OpFn, Vec<usize>)> = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor<f64>>, out: Vec<usize>, f: OpFn| {
        cases.push((name.to_string(), inputs, f, out));
    };
    push(
        "matmul",
        vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[4, 5])],
        vec![2, 3, 5],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let b = rand_tensor(rng, &[2, 4]).map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
        push(
            &format!("{op:?}").to_lowercase(),
            vec![rand_tensor(rng, &[3, 1, 4]), b],
            vec![3, 2, 4],
            Box::new(move |g, v| g.binary(v[0], v[1], op)),
        );
    }
    push("relu", vec![rand_tensor(rng, &[3, 4])], vec![3, 4], Box::new(|g, v| Ok(g.relu(v[0]))));
    push("scale", vec![rand_tensor(rng, &[3, 4])], vec![3, 4], Box::new(|g, v| Ok(g.scale(v[0], -1.7))));
    for axis in 0..3 {
        push(
            &format!("softmax(axis {axis})"),
            vec![rand_tensor(rng, &[2, 3, 4])],
            vec![2, 3, 4],
            Box::new(move |g, v| g.softmax(v[0], axis)),
        );
        push(
            &format!("l1_normalize(axis {axis})"),
            vec![rand_tensor(rng, &[2, 3, 4])],
            vec![2, 3, 4],
            Box::new(move |g, v| g.l1_normalize(v[0], axis)),
        );
    }
    push(
        "max_reduce",
        vec![rand_tensor(rng, &[2, 5, 3])],
        vec![2, 3],
        Box::new(|g, v| Ok(g.max_reduce(v[0], 1)?.0)),
    );
    push("sum", vec![rand_tensor(rng, &[3, 2])], vec![], Box::new(|g, v| Ok(g.sum(v[0]))));
    push(
        "sum_axis",
        vec![rand_tensor(rng, &[3, 2, 4])],
        vec![3, 4],
        Box::new(|g, v| g.sum_axis(v[0], 1)),
    );
    push(
        "concat",
        vec![rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 2])],
        vec![2, 5],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
    );
    push(
        "gather",
        vec![rand_tensor(rng, &[4, 3])],
        vec![5, 3],
        Box::new(|g, v| g.gather(v[0], &[3, 1, 1, 0, 3], 0)),
    );
    push(
        "reshape",
        vec![rand_tensor(rng, &[2, 6])],
        vec![3, 4],
        Box::new(|g, v| g.reshape(v[0], &[3, 4])),
    );
    push(
        "transpose_last2",
        vec![rand_tensor(rng, &[2, 3, 4])],
        vec![2, 4, 3],
        Box::new(|g, v| g.transpose_last2(v[0])),
    );
    push(
        "broadcast_to",
        vec![rand_tensor(rng, &[2, 1, 3])],
        vec![2, 4, 3],
        Box::new(|g, v| g.broadcast_to(v[0], &[2, 4, 3])),
    );
    push(
        "linear",
        vec![rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[4, 5]), rand_tensor(rng, &[5])],
        vec![2, 3, 5],
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
    );
    for mode in [BnMode::Train, BnMode::Eval] {
        push(
            &format!("batchnorm({})", if mode == BnMode::Train { "train" } else { "eval" }),
            vec![rand_tensor(rng, &[3, 2, 4]), rand_tensor(rng, &[4]), rand_tensor(rng, &[4])],
            vec![3, 2, 4],
            Box::new(move |g, v| Ok(g.batchnorm(v[0], v[1], v[2], mode, &[0.1; 4], &[0.7; 4])?.0)),
        );
    }
    push(
        "cross_entropy",
        vec![rand_tensor(rng, &[3, 5])],
        vec![],
        Box::new(|g, v| g.cross_entropy(v[0], &[1, 4, 0])),
    );
    cases
}

fn ops_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    for (name, inputs, f, out_shape) in op_cases(&mut rng) {
        let r = rand_tensor(&mut rng, &out_shape);
        let report = grad_check(
            |g, v| {
                let y = f(g, v)?;
                if out_shape.is_empty() {
                    Ok(y)
                } else {
                    project(g, y, &r)
                }
            },
            &inputs,
            FD_STEP,
        )?;
        out.push(Check {
            name,
            max_rel_err: report.max_rel_err,
            tol: BLOCK_TOL,
        });
    }
    Ok(out)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn blocks_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();

    let conv = EdgeConv::new("e", 11, &[6, 5]);
    let mut store = ParamStore::<f64>::new();
    conv.declare(&mut store, &mut rng)?;
    randomize_affine(&mut store, &mut rng);
    let edges = rand_tensor(&mut rng, &[2, 2, 3, 11]);
    let r = rand_tensor(&mut rng, &[2, 2, 3, 5]);
    let report = grad_check_block(&store, &[edges], BnMode::Train, FD_STEP, |ctx, v| {
        let y = conv.forward(ctx, v[0])?;
        project(ctx.g, y, &r)
    })?;
    out.push(Check {
        name: "edge_conv".into(),
        max_rel_err: report.max_rel_err,
        tol: BLOCK_TOL,
    });

    let cfg = LfaConfig {
        enabled: true,
        grouping: GroupingSpec {
            scales: vec![Scale { radius: 0.6, k: 3 }, Scale { radius: 1.2, k: 5 }],
        },
        widths: vec![vec![4], vec![3]],
    };
    let lfa = LfaBlock::new("l", 2, &cfg)?;
    let mut store = ParamStore::<f64>::new();
    lfa.declare(&mut store, &mut rng)?;
    randomize_affine(&mut store, &mut rng);
    let pts: Vec<Vec<Point>> = (0..2).map(|_| random_points(&mut rng, 10)).collect();
    let plan = LfaPlan::build(&pts, 4, Some(&cfg.grouping))?;
    let feats = rand_tensor(&mut rng, &[2, 10, 2]);
    let pos = Tensor::new(vec![2, 10, 3], pts.iter().flatten().flatten().copied().collect())?;
    let r = rand_tensor(&mut rng, &[2, 4, 7]);
    let report = grad_check_block(&store, &[feats, pos], BnMode::Train, FD_STEP, |ctx, v| {
        let y = lfa.forward(ctx, v[0], v[1], &plan)?.features;
        project(ctx.g, y, &r)
    })?;
    out.push(Check {
        name: "lfa_block".into(),
        max_rel_err: report.max_rel_err,
        tol: BLOCK_TOL,
    });

    for m in Mechanism::ALL {
        for op in Operator::ALL {
            let cfg = AttentionConfig {
                enabled: true,
                mechanism: m,
                operator: op,
                position_encoding: true,
                tau_hidden: None,
            };
            let b = GflBlock::new("a", 4, &cfg)?;
            let mut store = ParamStore::<f64>::new();
            b.declare(&mut store, &mut rng)?;
            randomize_affine(&mut store, &mut rng);
            if op == Operator::Division {
                // keys stay positive so denominators stay away from zero
                let wk = store.params.get_mut("a.wk.w").expect("key projection");
                *wk = wk.map(|v| v.abs() + 0.1);
            }
            let y = Tensor::<f64>::uniform([2, 4, 4], 0.2, 1.0, &mut rng);
            let p = rand_tensor(&mut rng, &[2, 4, 3]);
            let r = rand_tensor(&mut rng, &[2, 4, 4]);
            let report = grad_check_block(&store, &[y, p], BnMode::Train, FD_STEP, |ctx, v| {
                let o = b.forward(ctx, v[0], v[1])?.output;
                project(ctx.g, o, &r)
            })?;
            out.push(Check {
                name: format!("gfl({m}, {op})"),
                max_rel_err: report.max_rel_err,
                tol: BLOCK_TOL,
            });
        }
    }
    Ok(out)
}

fn model_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::<f64>::new(ModelConfig::micro(3), 3)?;
    randomize_affine(&mut model.store, &mut rng);
    let clouds = (0..4)
        .map(|i| {
            Ok(synth_cloud(ShapeKind::ALL[i], 16, 0.01, true, &mut rng)?
                .normalize()
                .with_label(i % 3))
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(&clouds)?;
    let report = grad_check_block(&model.store, &[], BnMode::Train, FD_STEP, |ctx: &mut Ctx<f64>, _| {
        let fwd = model.forward_ctx(ctx, &batch)?;
        ctx.g.cross_entropy(fwd.logits, &batch.labels)
    })?;
    Ok(vec![Check {
        name: "micro model (N=16, S=[4,1], D=8)".into(),
        max_rel_err: report.max_rel_err,
        tol: MODEL_TOL,
    }])
}

pub fn gradient_suite(scope: Scope) -> Result<Vec<Check>> {
    match scope {
        Scope::Ops => ops_suite(),
        Scope::Blocks => blocks_suite(),
        Scope::Model => model_suite(),
    }
}
