//! Synthetic analytic-shape datasets and JSON dataset manifests.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{load, unit, write_xyz, Format, PointCloud};
use crate::sampling::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    TwoSpheres,
    LBracket,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
        ShapeKind::TwoSpheres,
        ShapeKind::LBracket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
            ShapeKind::TwoSpheres => "two-spheres",
            ShapeKind::LBracket => "l-bracket",
        }
    }

    /// One surface sample `(position, unit normal)` in canonical pose.
    fn sample<R: Rng>(self, rng: &mut R) -> (Point, Point) {
        match self {
            ShapeKind::Sphere => {
                let n = random_direction(rng);
                (n, n)
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6);
                let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
                let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                p[axis] = sign;
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            ShapeKind::Cylinder => {
                // side area 4π, caps π each
                let t = rng.random_range(0.0..6.0);
                if t < 4.0 {
                    let a = rng.random_range(0.0..2.0 * PI);
                    ([a.cos(), a.sin(), rng.random_range(-1.0..1.0)], [a.cos(), a.sin(), 0.0])
                } else {
                    let (x, y) = disk(rng);
                    let z = if t < 5.0 { 1.0 } else { -1.0 };
                    ([x, y, z], [0.0, 0.0, z])
                }
            }
            ShapeKind::Cone => {
                // apex (0,0,1), base radius 1 at z = -1; lateral area π√5, base π
                let lateral = 5f64.sqrt();
                if rng.random_range(0.0..lateral + 1.0) < lateral {
                    let t = rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..2.0 * PI);
                    let p = [t * a.cos(), t * a.sin(), 1.0 - 2.0 * t];
                    let n = unit([2.0 * a.cos(), 2.0 * a.sin(), 1.0]).unwrap();
                    (p, n)
                } else {
                    let (x, y) = disk(rng);
                    ([x, y, -1.0], [0.0, 0.0, -1.0])
                }
            }
            ShapeKind::Torus => {
                let (big, small) = (1.0, 0.35);
                loop {
                    let th = rng.random_range(0.0..2.0 * PI);
                    // area element grows with distance from the axis
                    if rng.random_range(0.0..big + small) > big + small * th.cos() {
                        continue;
                    }
                    let ph = rng.random_range(0.0..2.0 * PI);
                    let n = [ph.cos() * th.cos(), ph.sin() * th.cos(), th.sin()];
                    let r = big + small * th.cos();
                    return ([r * ph.cos(), r * ph.sin(), small * th.sin()], n);
                }
            }
            ShapeKind::Plane => (
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
                [0.0, 0.0, 1.0],
            ),
            ShapeKind::TwoSpheres => {
                let n = random_direction(rng);
                let cx = if rng.random::<bool>() { 0.75 } else { -0.75 };
                ([cx + 0.5 * n[0], 0.5 * n[1], 0.5 * n[2]], n)
            }
            ShapeKind::LBracket => l_bracket(rng),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

fn random_direction<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v: Point = [0; 3].map(|_: i32| StandardNormal.sample(rng));
        if let Some(u) = unit(v) {
            return u;
        }
    }
}

fn disk<R: Rng>(rng: &mut R) -> (f64, f64) {
    let r = rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (r * a.cos(), r * a.sin())
}

/// L-shaped profile in the x-z plane extruded over y ∈ [-0.5, 0.5].
fn l_bracket<R: Rng>(rng: &mut R) -> (Point, Point) {
    const PROFILE: [(f64, f64); 6] = [(-1.0, -1.0), (1.0, -1.0), (1.0, -0.5), (-0.5, -0.5), (-0.5, 1.0), (-1.0, 1.0)];
    // caps: two rectangles of areas 1.0 and 0.75 (each side); walls: edge length × depth 1
    let edges: Vec<f64> = (0..6)
        .map(|i| {
            let (a, b) = (PROFILE[i], PROFILE[(i + 1) % 6]);
            ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
        })
        .collect();
    let caps = 2.0 * 1.75;
    let total = caps + edges.iter().sum::<f64>();
    let mut t = rng.random_range(0.0..total);
    if t < caps {
        let y = if t < caps / 2.0 { 0.5 } else { -0.5 };
        let (x, z) = if rng.random_range(0.0..1.75) < 1.0 {
            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.5))
        } else {
            (rng.random_range(-1.0..-0.5), rng.random_range(-0.5..1.0))
        };
        return ([x, y, z], [0.0, y * 2.0, 0.0]);
    }
    t -= caps;
    let mut i = 0;
    while i < 5 && t >= edges[i] {
        t -= edges[i];
        i += 1;
    }
    let (a, b) = (PROFILE[i], PROFILE[(i + 1) % 6]);
    let s = rng.random::<f64>();
    let (x, z) = (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
    // counter-clockwise profile: outward normal is the edge direction turned clockwise
    let n = unit([b.1 - a.1, 0.0, -(b.0 - a.0)]).unwrap();
    ([x, rng.random_range(-0.5..0.5), z], n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ShapeKind>,
    pub per_class: usize,
    pub points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Random up-axis rotation and anisotropic scaling per sample.
    pub augment: bool,
}

impl SynthSpec {
    /// Eight classes, 256 points, light noise.
    pub fn desk(per_class: usize, seed: u64) -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            per_class,
            points: 256,
            noise_sigma: 0.01,
            seed,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clouds.iter().map(|c| c.label.unwrap_or(usize::MAX)).collect()
    }

    /// Checks labels and a shared point count.
    pub fn validate(&self) -> Result<()> {
        let n = self.clouds.first().map_or(0, PointCloud::len);
        for (i, c) in self.clouds.iter().enumerate() {
            match c.label {
                Some(l) if l < self.num_classes() => {}
                other => {
                    return Err(Error::Config(format!("cloud {i}: label {other:?} out of range")))
                }
            }
            if c.len() != n {
                return Err(Error::Config(format!(
                    "cloud {i} has {} points, expected {n}",
                    c.len()
                )));
            }
        }
        Ok(())
    }

    /// Normalizes every cloud and resamples it to `points` points.
    pub fn prepare(&self, points: usize, seed: u64) -> Result<Self> {
        let clouds = self
            .clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.len() == points {
                    Ok(c.normalize())
                } else {
                    c.normalize().resample(points, seed.wrapping_add(i as u64))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clouds,
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }
}

/// Generates one split. Deterministic in `(spec, split)`; the two splits
/// draw from independent streams of the same seed.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes.is_empty() || spec.per_class == 0 || spec.points == 0 {
        return Err(Error::Config("synthetic dataset needs classes, samples and points".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let mut clouds = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for (label, &kind) in spec.classes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let cloud = synth_cloud(kind, spec.points, spec.noise_sigma, spec.augment, &mut rng)?;
            clouds.push(cloud.with_label(label));
        }
    }
    Ok(Dataset {
        clouds,
        class_names: spec.classes.iter().map(|k| k.name().to_string()).collect(),
        split,
    })
}

/// One cloud, not yet normalized.
pub fn synth_cloud<R: Rng>(kind: ShapeKind, points: usize, sigma: f64, augment: bool, rng: &mut R) -> Result<PointCloud> {
    let (angle, scale) = if augment {
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        let s: [f64; 3] = [0; 3].map(|_: i32| rng.random_range(0.8..1.2));
        (a, s)
    } else {
        (0.0, [1.0; 3])
    };
    let (c, s) = (angle.cos(), angle.sin());
    let rot = |v: Point| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
    let mut positions = Vec::with_capacity(points);
    let mut normals = Vec::with_capacity(points);
    for _ in 0..points {
        let (p, n) = kind.sample(rng);
        let p = rot([p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]]);
        // normals transform with the inverse transpose
        let n = unit(rot([n[0] / scale[0], n[1] / scale[1], n[2] / scale[2]])).expect("unit normal");
        let noise: f64 = if sigma > 0.0 {
            sigma * Distribution::<f64>::sample(&StandardNormal, rng)
        } else {
            0.0
        };
        positions.push([p[0] + noise * n[0], p[1] + noise * n[1], p[2] + noise * n[2]]);
        normals.push(n);
    }
    PointCloud::new(positions, normals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads one split; entry paths are relative to `base`.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Dataset> {
        let entries = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        let clouds = entries
            .iter()
            .map(|e| {
                let path = base.join(&e.path);
                let format = Format::from_path(&path).unwrap_or(Format::Xyz);
                Ok(load(&path, format)?.with_label(e.label))
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            clouds,
            class_names: self.class_names.clone(),
            split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Loads both splits of the manifest at `path`.
pub fn load_manifest(path: &Path) -> Result<(Dataset, Dataset)> {
    let m = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((m.load_split(base, Split::Train)?, m.load_split(base, Split::Test)?))
}

/// Writes clouds as XYZ files under `dir/<split>/` and `dir/manifest.json`.
pub fn write_dataset_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<PathBuf> {
    let mut manifest = Manifest {
        class_names: train.class_names.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for ds in [train, test] {
        let sub = dir.join(ds.split.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let entries = match ds.split {
            Split::Train => &mut manifest.train,
            Split::Test => &mut manifest.test,
        };
        for (i, c) in ds.clouds.iter().enumerate() {
            let rel = PathBuf::from(ds.split.to_string()).join(format!("{i:05}.xyz"));
            write_xyz(&dir.join(&rel), c)?;
            entries.push(ManifestEntry {
                path: rel,
                label: c.label.unwrap_or(0),
            });
        }
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{centroid, dist2};

    fn norm(p: &Point) -> f64 {
        dist2(p, &[0.0; 3]).sqrt()
    }

    #[test]
    fn shape_names_round_trip() {
        for k in ShapeKind::ALL {
            assert_eq!(k.name().parse::<ShapeKind>().unwrap(), k);
        }
        assert_eq!("L_Bracket".parse::<ShapeKind>().unwrap(), ShapeKind::LBracket);
        assert!(matches!("pyramid".parse::<ShapeKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_without_noise_has_constant_radius() {
        let spec = SynthSpec {
            classes: vec![ShapeKind::Sphere],
            per_class: 3,
            points: 200,
            noise_sigma: 0.0,
            seed: 1,
            augment: false,
        };
        let ds = synth_dataset(&spec, Split::Train).unwrap();
        for c in &ds.clouds {
            let r0 = norm(&c.positions[0]);
            assert!(c.positions.iter().all(|p| (norm(p) - r0).abs() < 1e-6));
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_splits_differ() {
        let spec = SynthSpec::desk(2, 7);
        let a = synth_dataset(&spec, Split::Train).unwrap();
        let b = synth_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let t = synth_dataset(&spec, Split::Test).unwrap();
        assert_ne!(a.clouds[0].positions, t.clouds[0].positions);
    }

    #[test]
    fn desk_dataset_is_balanced_with_unit_normals() {
        let ds = synth_dataset(&SynthSpec::desk(100, 3), Split::Train).unwrap();
        assert_eq!(ds.len(), 800);
        assert_eq!(ds.num_classes(), 8);
        let mut counts = [0usize; 8];
        for l in ds.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [100; 8]);
        ds.validate().unwrap();
        for c in &ds.clouds {
            assert_eq!(c.len(), 256);
            assert!(c.normals.iter().all(|n| (norm(n) - 1.0).abs() < 1e-4));
        }
    }

    #[test]
    fn canonical_shapes_match_their_surfaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in ShapeKind::ALL {
            for _ in 0..500 {
                let (p, n) = kind.sample(&mut rng);
                assert!((norm(&n) - 1.0).abs() < 1e-12, "{kind}");
                let ok = match kind {
                    ShapeKind::Sphere => (norm(&p) - 1.0).abs() < 1e-12,
                    ShapeKind::Cube => p.iter().any(|v| (v.abs() - 1.0).abs() < 1e-12),
                    ShapeKind::Plane => p[2] == 0.0,
                    ShapeKind::TwoSpheres => {
                        let d = |cx: f64| (dist2(&p, &[cx, 0.0, 0.0]).sqrt() - 0.5).abs() < 1e-12;
                        d(0.75) || d(-0.75)
                    }
                    ShapeKind::Torus => {
                        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                        ((r - 1.0).powi(2) + p[2] * p[2]).sqrt() - 0.35 < 1e-12
                    }
                    _ => p.iter().all(|v| v.abs() <= 1.0 + 1e-12),
                };
                assert!(ok, "{kind} {p:?}");
            }
        }
    }

    #[test]
    fn prepare_normalizes() {
        let ds = synth_dataset(&SynthSpec::desk(1, 5), Split::Test).unwrap();
        let prepared = ds.prepare(128, 0).unwrap();
        for c in &prepared.clouds {
            assert_eq!(c.len(), 128);
            let m = c.positions.iter().map(norm).fold(0.0, f64::max);
            assert!(m <= 1.0 + 1e-6);
        }
        let full = ds.prepare(256, 0).unwrap();
        for c in &full.clouds {
            assert!(norm(&centroid(&c.positions)) < 1e-6);
            assert!((c.positions.iter().map(norm).fold(0.0, f64::max) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let spec = SynthSpec { per_class: 2, points: 32, ..SynthSpec::desk(2, 9) };
        let train = synth_dataset(&spec, Split::Train).unwrap();
        let test = synth_dataset(&spec, Split::Test).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset_dir(dir.path(), &train, &test).unwrap();
        let (tr, te) = load_manifest(&path).unwrap();
        assert_eq!(tr, train);
        assert_eq!(te, test);
    }
}
