//! Gradient-times-activation saliency on the pre-pool features.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::autodiff::{BnMode, Graph};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::sampling::{centroid, dist2, Point};
use crate::tensor::{Scalar, Tensor};

use super::model::{Batch, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    /// Per input point, in `[0, 1]` with maximum 1.
    pub scores: Vec<f64>,
    pub centers: Vec<Point>,
    /// Normalized score of each last-module center.
    pub center_scores: Vec<f64>,
}

/// `ReLU(sum_c d logit_target / d f_c * f_c)` per last-module center,
/// spread to input points by nearest center and normalized by the maximum.
pub fn saliency<T: Scalar>(model: &Model<T>, cloud: &PointCloud, target: usize) -> Result<Saliency> {
    let classes = model.config.classes;
    if target >= classes {
        return Err(Error::IndexOutOfRange {
            index: target,
            extent: classes,
        });
    }
    let batch = Batch::new([cloud])?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &batch, BnMode::Eval, true)?;
    let mut seed = Tensor::zeros(vec![1, classes]);
    seed.data_mut()[target] = T::one();
    let grads = g.backward_with_seed(fwd.logits, seed, &[fwd.prepool])?;
    let grad = grads
        .get(fwd.prepool)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![T::zero(); g.value(fwd.prepool).len()]);
    let feats = g.value(fwd.prepool).data();
    let width = model.config.final_width;
    let raw: Vec<f64> = feats
        .chunks(width)
        .zip(grad.chunks(width))
        .map(|(f, d)| f.iter().zip(d).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>().max(0.0))
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateSaliency);
    }
    let center_scores: Vec<f64> = raw.iter().map(|v| v / max).collect();
    let centers = fwd.centers.into_iter().next().expect("one cloud");
    let scores = cloud
        .positions
        .iter()
        .map(|p| {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .expect("at least one center");
            center_scores[nearest]
        })
        .collect();
    Ok(Saliency {
        scores,
        centers,
        center_scores,
    })
}

/// Splits a cloud in two by the sign of its principal-axis coordinate and
/// returns the share of high-score (`>= threshold`) points lying in the
/// better-populated half. `None` when no point reaches the threshold.
pub fn concentration(positions: &[Point], scores: &[f64], threshold: f64) -> Option<f64> {
    let c = centroid(positions);
    let mut cov = Matrix3::<f64>::zeros();
    for p in positions {
        let d = nalgebra::Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let axis = eig.eigenvectors.column(eig.eigenvalues.imax());
    let (mut pos, mut neg) = (0usize, 0usize);
    for (p, &s) in positions.iter().zip(scores) {
        if s >= threshold {
            let t = (p[0] - c[0]) * axis[0] + (p[1] - c[1]) * axis[1] + (p[2] - c[2]) * axis[2];
            if t >= 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    let n = pos + neg;
    (n > 0).then(|| pos.max(neg) as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_cloud, ShapeKind};
    use crate::network::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        synth_cloud(ShapeKind::Torus, 16, 0.0, false, &mut rng).unwrap().normalize()
    }

    #[test]
    fn scores_are_normalized() {
        let model = Model::<f64>::new(ModelConfig::micro(3), 4).unwrap();
        let c = cloud();
        for target in 0..3 {
            match saliency(&model, &c, target) {
                Ok(s) => {
                    assert_eq!(s.scores.len(), 16);
                    assert!(s.scores.iter().all(|v| (0.0..=1.0).contains(v)));
                    assert_eq!(s.center_scores.iter().copied().fold(0.0, f64::max), 1.0);
                }
                Err(e) => assert!(matches!(e, Error::DegenerateSaliency)),
            }
        }
        assert!(saliency(&model, &c, 3).is_err());
    }

    #[test]
    fn multi_center_scores_reach_input_points() {
        let mut cfg = ModelConfig::micro(2);
        cfg.modules[1].samples = 4;
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let s = saliency(&model, &cloud(), 0).unwrap();
        assert_eq!(s.centers.len(), 4);
        for (p, &v) in cloud().positions.iter().zip(&s.scores) {
            let best = (0..4)
                .min_by(|&a, &b| dist2(p, &s.centers[a]).total_cmp(&dist2(p, &s.centers[b])))
                .unwrap();
            assert_eq!(v, s.center_scores[best]);
        }
    }

    #[test]
    fn constant_features_are_degenerate() {
        let mut model = Model::<f64>::new(ModelConfig::micro(3), 0).unwrap();
        for (name, t) in model.store.params.iter_mut() {
            if name.starts_with("lift.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        // lift output is ReLU(beta) = 0 everywhere
        assert!(matches!(saliency(&model, &cloud(), 0), Err(Error::DegenerateSaliency)));
    }

    #[test]
    fn concentration_on_two_blobs() {
        let pts: Vec<Point> = (0..10).map(|i| [if i < 5 { -1.0 } else { 1.0 }, 0.01 * i as f64, 0.0]).collect();
        let mut scores = vec![0.0; 10];
        scores[..4].iter_mut().for_each(|s| *s = 1.0);
        assert_eq!(concentration(&pts, &scores, 0.5), Some(1.0));
        scores[9] = 0.9;
        assert_eq!(concentration(&pts, &scores, 0.5), Some(0.8));
        assert_eq!(concentration(&pts, &[0.0; 10], 0.5), None);
    }
}
