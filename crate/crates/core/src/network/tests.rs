use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, BnMode, Graph, FD_STEP};
use crate::dataset::{synth_cloud, ShapeKind};
use crate::error::Error;
use crate::nn::{grad_check_block, randomize_affine};
use crate::pointcloud::PointCloud;
use crate::tensor::Tensor;

fn clouds(n: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            synth_cloud(kind, points, 0.01, true, &mut rng)
                .unwrap()
                .normalize()
                .with_label(i % 3)
        })
        .collect()
}

#[test]
fn logits_have_one_entry_per_class() {
    let model = Model::<f32>::new(ModelConfig::micro(5), 0).unwrap();
    let cs = clouds(3, 16, 0);
    let logits = model.predict_logits(&Batch::new(&cs).unwrap()).unwrap();
    assert_eq!(logits.len(), 3);
    assert!(logits.iter().all(|r| r.len() == 5));
}

#[test]
fn point_count_mismatch_is_an_error() {
    let model = Model::<f32>::new(ModelConfig::micro(5), 0).unwrap();
    let cs = clouds(2, 20, 0);
    assert!(matches!(model.predict(&Batch::new(&cs).unwrap()), Err(Error::Config(_))));
}

#[test]
fn uniform_logits_cost_ln_c() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2, 4]));
    let l = g.cross_entropy(x, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let y = g.constant(Tensor::from_f64([1, 4], &[50.0, 0.0, 0.0, 0.0]).unwrap());
    let l = g.cross_entropy(y, &[0]).unwrap();
    assert!(g.value(l).item() < 1e-20);
    assert!(g.cross_entropy(y, &[4]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::uniform([3, 5], -2.0, 2.0, &mut rng);
    let r = grad_check(|g, v| g.cross_entropy(v[0], &[1, 4, 0]), &[x], FD_STEP).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn micro_model_gradient_matches_finite_differences() {
    let mut model = Model::<f64>::new(ModelConfig::micro(3), 3).unwrap();
    randomize_affine(&mut model.store, &mut ChaCha8Rng::seed_from_u64(3));
    let cs = clouds(4, 16, 9);
    let batch = Batch::new(&cs).unwrap();
    let r = grad_check_block(&model.store, &[], BnMode::Train, FD_STEP, |ctx, _| {
        let fwd = model.forward_ctx(ctx, &batch)?;
        ctx.g.cross_entropy(fwd.logits, &batch.labels)
    })
    .unwrap();
    assert!(r.passes(1e-3), "{r:?}");
}

#[test]
fn forward_is_permutation_invariant() {
    let model = Model::<f32>::new(ModelConfig::desk(64, 4), 2).unwrap();
    let cs = clouds(3, 64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let permuted: Vec<PointCloud> = cs
        .iter()
        .map(|c| {
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.shuffle(&mut rng);
            c.select(&idx)
        })
        .collect();
    let a = model.predict_logits(&Batch::new(&cs).unwrap()).unwrap();
    let b = model.predict_logits(&Batch::new(&permuted).unwrap()).unwrap();
    let diff = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn checkpoint_reload_reproduces_eval_logits() {
    let model = Model::<f32>::new(ModelConfig::micro(3), 8).unwrap();
    let t = Trainer::new(model, TrainConfig::default()).unwrap();
    let back = Checkpoint::from_trainer(&t, &[]).model().unwrap();
    let batch = Batch::new(&clouds(2, 16, 1)).unwrap();
    let a = t.model.predict_logits(&batch).unwrap();
    let b = back.predict_logits(&batch).unwrap();
    let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn default_budget_at_1024_points() {
    let c = count_costs(&ModelConfig::paper(1024, 40)).unwrap();
    let target = 4.22e6;
    assert!((c.params as f64 - target).abs() <= 0.3 * target, "{}", c.params);
}
