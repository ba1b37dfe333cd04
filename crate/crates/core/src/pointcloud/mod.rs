//! Point clouds with unit normals: normalization, resampling, normal
//! estimation and file formats.

mod io;

pub use io::{load, parse_off, parse_ply, parse_xyz, write_xyz, write_xyz_scored, xyz_string, Format};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampling::{centroid, dist2, knn_query, Point};

pub const DEFAULT_NORMAL_K: usize = 16;
const FALLBACK_NORMAL: Point = [0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point>,
    pub normals: Vec<Point>,
    pub label: Option<usize>,
}

pub fn unit(v: Point) -> Option<Point> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.map(|c| c / n))
}

impl PointCloud {
    pub fn new(positions: Vec<Point>, normals: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if positions.len() != normals.len() {
            return Err(Error::shape(
                "point cloud",
                &[positions.len(), 3],
                &[normals.len(), 3],
            ));
        }
        Ok(Self {
            positions,
            normals,
            label: None,
        })
    }

    /// Builds a cloud from positions alone, estimating normals.
    pub fn from_positions(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let k = DEFAULT_NORMAL_K.min(positions.len() - 1);
        let normals = estimate_normals(&positions, k)?;
        Self::new(positions, normals)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Centers on the centroid and scales so the farthest point has norm 1.
    pub fn normalize(&self) -> Self {
        let c = centroid(&self.positions);
        let centered: Vec<Point> = self
            .positions
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max = centered
            .iter()
            .map(|p| dist2(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max);
        let positions = if max > 0.0 {
            centered.iter().map(|p| p.map(|v| v / max)).collect()
        } else {
            centered
        };
        Self {
            positions,
            normals: self.normals.clone(),
            label: self.label,
        }
    }

    /// Draws `m` points uniformly: without replacement when `m <= N`, with
    /// replacement otherwise.
    pub fn resample(&self, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("resample size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.len();
        let picks: Vec<usize> = if m <= n {
            index::sample(&mut rng, n, m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..n)).collect()
        };
        Ok(self.select(&picks))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            label: self.label,
        }
    }

    /// Row-major `N x 6` feature rows (position, normal).
    pub fn to_rows(&self) -> Vec<[f64; 6]> {
        self.positions
            .iter()
            .zip(&self.normals)
            .map(|(p, n)| [p[0], p[1], p[2], n[0], n[1], n[2]])
            .collect()
    }
}

/// Per-point normals from PCA of the `k` nearest neighbors (plus the point
/// itself), oriented away from the centroid. Neighborhoods whose covariance
/// has rank below 2 fall back to `(0, 0, 1)`.
pub fn estimate_normals(positions: &[Point], k: usize) -> Result<Vec<Point>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if n == 1 {
        return Ok(vec![FALLBACK_NORMAL]);
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "normal estimation needs more than k = {k} points, got {n}"
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let hoods = knn_query(positions, &all, k + 1)?;
    let c = centroid(positions);
    Ok(hoods
        .iter()
        .map(|h| {
            let pts: Vec<Point> = h.members.iter().map(|&i| positions[i]).collect();
            let normal = pca_normal(&pts).unwrap_or(FALLBACK_NORMAL);
            let p = positions[h.center];
            let outward = (p[0] - c[0]) * normal[0] + (p[1] - c[1]) * normal[1] + (p[2] - c[2]) * normal[2];
            if outward < 0.0 {
                normal.map(|v| -v)
            } else {
                normal
            }
        })
        .collect())
}

fn pca_normal(points: &[Point]) -> Option<Point> {
    let mu = centroid(points);
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = nalgebra::Vector3::new(p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l0 > 1e-300) || l1 <= 1e-9 * l0 {
        return None;
    }
    let v = eig.eigenvectors.column(order[2]);
    unit([v[0], v[1], v[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normalize_example_and_idempotence() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]; 2]).unwrap();
        let n = cloud.normalize();
        assert_eq!(n.positions, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let again = n.normalize();
        for (a, b) in n.positions.iter().zip(&again.positions) {
            assert!(dist2(a, b).sqrt() < 1e-6);
        }
    }

    #[test]
    fn resample_full_is_permutation() {
        let pts: Vec<Point> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        let cloud = PointCloud::new(pts.clone(), vec![[0.0, 0.0, 1.0]; 20]).unwrap();
        for seed in 0..5 {
            let r = cloud.resample(20, seed).unwrap();
            let mut xs: Vec<i64> = r.positions.iter().map(|p| p[0] as i64).collect();
            xs.sort_unstable();
            assert_eq!(xs, (0..20).collect::<Vec<_>>());
        }
        assert_eq!(cloud.resample(7, 3).unwrap(), cloud.resample(7, 3).unwrap());
        assert_eq!(cloud.resample(50, 3).unwrap().len(), 50);
        assert!(cloud.resample(0, 3).is_err());
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(PointCloud::new(vec![], vec![]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn planar_normals_are_vertical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point> = (0..200)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
            .collect();
        let normals = estimate_normals(&pts, 16).unwrap();
        for n in normals {
            assert!(n[0].abs() < 1e-3 && n[1].abs() < 1e-3 && (n[2].abs() - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..500)
            .map(|_| {
                let v: Point = [0; 3].map(|_: i32| StandardNormal.sample(&mut rng));
                unit(v).unwrap()
            })
            .collect();
        let normals = estimate_normals(&pts, 16).unwrap();
        let good = pts
            .iter()
            .zip(&normals)
            .filter(|(p, n)| p[0] * n[0] + p[1] * n[1] + p[2] * n[2] > 0.95)
            .count();
        assert!(good as f64 >= 0.95 * pts.len() as f64, "{good}");
        for n in &normals {
            assert!((dist2(n, &[0.0; 3]).sqrt() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_neighborhoods_fall_back() {
        let pts: Vec<Point> = (0..17).map(|i| [i as f64, 0.0, 0.0]).collect();
        let normals = estimate_normals(&pts, 16).unwrap();
        assert!(normals.iter().all(|n| *n == FALLBACK_NORMAL || *n == [0.0, 0.0, -1.0]));
        let same = vec![[1.0, 1.0, 1.0]; 5];
        assert!(estimate_normals(&same, 4).is_ok());
        assert!(estimate_normals(&same, 5).is_err());
    }
}
