//! Farthest point sampling and neighborhood grouping.
//!
//! All distances are squared Euclidean distances in `f64`; radius tests
//! compare against the squared radius.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

pub fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len().max(1) as f64;
    c.map(|v| v / n)
}

/// Neighborhood of one center at one grouping scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub center: usize,
    /// `members[0]` is always the center.
    pub members: Vec<usize>,
    pub scale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub radius: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingSpec {
    pub scales: Vec<Scale>,
}

impl GroupingSpec {
    pub fn new(scales: Vec<Scale>) -> Result<Self> {
        let spec = Self { scales };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("grouping needs at least one scale".into()));
        }
        for s in &self.scales {
            if !(s.radius > 0.0) || s.k == 0 {
                return Err(Error::Config(format!(
                    "invalid grouping scale (radius {}, K {})",
                    s.radius, s.k
                )));
            }
        }
        if self.scales.windows(2).any(|w| w[1].radius <= w[0].radius) {
            return Err(Error::Config("grouping radii must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Keeps only the middle scale.
    pub fn middle(&self) -> Self {
        Self {
            scales: vec![self.scales[self.scales.len() / 2]],
        }
    }
}

fn lex_less(a: &Point, b: &Point) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Less)
}

/// Greedy farthest point sampling returning indices in selection order.
///
/// The first pick is the point farthest from the centroid (ties: smallest
/// coordinate triple, then lowest index); later picks maximize the distance
/// to the chosen set (ties: lowest index).
pub fn farthest_point_sample(positions: &[Point], count: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if count == 0 || count > n {
        return Err(Error::Config(format!(
            "cannot sample {count} points from a cloud of {n}"
        )));
    }
    let c = centroid(positions);
    let mut first = 0;
    let mut best = dist2(&positions[0], &c);
    for (i, p) in positions.iter().enumerate().skip(1) {
        let d = dist2(p, &c);
        if d > best || (d == best && lex_less(p, &positions[first])) {
            best = d;
            first = i;
        }
    }
    let mut chosen = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut last = first;
    chosen.push(first);
    taken[first] = true;
    while chosen.len() < count {
        let lp = positions[last];
        let mut pick = usize::MAX;
        let mut pick_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&positions[i], &lp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > pick_d {
                pick_d = min_d[i];
                pick = i;
            }
        }
        chosen.push(pick);
        taken[pick] = true;
        last = pick;
    }
    Ok(chosen)
}

/// Radius grouping. Each neighborhood holds the center followed by in-radius
/// points in index order. When more than `k - 1` other points qualify, the
/// nearest ones are kept (ties: lowest index); underfull neighborhoods are
/// padded by repeating the first non-center member, or the center if it is
/// alone.
pub fn ball_query(
    positions: &[Point],
    centers: &[usize],
    radius: f64,
    k: usize,
    scale: usize,
) -> Result<Vec<Neighborhood>> {
    if !(radius > 0.0) || k == 0 {
        return Err(Error::Config(format!("invalid ball query (radius {radius}, K {k})")));
    }
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let cp = positions
                .get(c)
                .ok_or(Error::IndexOutOfRange { index: c, extent: positions.len() })?;
            let mut found: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .map(|(i, p)| (dist2(p, cp), i))
                .filter(|&(d, _)| d <= r2)
                .collect();
            if found.len() > k - 1 {
                found.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
                found.truncate(k - 1);
            }
            let mut others: Vec<usize> = found.into_iter().map(|(_, i)| i).collect();
            others.sort_unstable();
            let mut members = Vec::with_capacity(k);
            members.push(c);
            let pad = others.first().copied().unwrap_or(c);
            members.extend(others);
            members.resize(k, pad);
            Ok(Neighborhood { center: c, members, scale })
        })
        .collect()
}

/// `k` nearest neighbors of each center, the center itself first, then by
/// increasing distance (ties: lowest index).
pub fn knn_query(positions: &[Point], centers: &[usize], k: usize) -> Result<Vec<Neighborhood>> {
    let n = positions.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot take {k} neighbors from {n} points")));
    }
    centers
        .iter()
        .map(|&c| {
            let cp = positions
                .get(c)
                .ok_or(Error::IndexOutOfRange { index: c, extent: n })?;
            let mut order: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != c)
                .map(|(i, p)| (dist2(p, cp), i))
                .collect();
            if k - 1 < order.len() && k > 1 {
                order.select_nth_unstable_by(k - 2, |a, b| a.partial_cmp(b).unwrap());
            }
            order.truncate(k - 1);
            order.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let mut members = Vec::with_capacity(k);
            members.push(c);
            members.extend(order.into_iter().map(|(_, i)| i));
            Ok(Neighborhood { center: c, members, scale: 0 })
        })
        .collect()
}
