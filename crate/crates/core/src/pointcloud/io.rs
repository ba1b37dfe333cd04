use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{estimate_normals, unit, PointCloud, DEFAULT_NORMAL_K};
use crate::error::{Error, Result};
use crate::sampling::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Off,
    Ply,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" | "pts" => Some(Format::Xyz),
            "off" => Some(Format::Off),
            "ply" => Some(Format::Ply),
            _ => None,
        }
    }
}

pub fn load(path: &Path, format: Format) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Xyz => parse_xyz(&text),
        Format::Off => parse_off(&text),
        Format::Ply => parse_ply(&text),
    }
}

fn parse_error(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_reals(line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_error(line_no, format!("not a finite number: {f:?}")))
        })
        .collect()
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

/// Fills missing normals: given ones are renormalized, absent ones estimated.
fn finish(positions: Vec<Point>, normals: Vec<Option<Point>>) -> Result<PointCloud> {
    if positions.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let normals = if normals.iter().all(Option::is_some) {
        normals.into_iter().map(Option::unwrap).collect()
    } else {
        let k = DEFAULT_NORMAL_K.min(positions.len() - 1);
        let estimated = if positions.len() > 1 {
            estimate_normals(&positions, k)?
        } else {
            vec![[0.0, 0.0, 1.0]]
        };
        normals
            .into_iter()
            .zip(estimated)
            .map(|(given, est)| given.unwrap_or(est))
            .collect()
    };
    PointCloud::new(positions, normals)
}

/// Normals already unit to rounding are kept verbatim so that written
/// clouds load back bit-identically.
fn unit_or_keep(n: Point) -> Option<Point> {
    let len2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
    if (len2 - 1.0).abs() < 1e-12 {
        Some(n)
    } else {
        unit(n)
    }
}

/// `x y z nx ny nz` per line, or `x y z` when normals are absent.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (line_no, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 6 {
            return Err(parse_error(
                line_no,
                format!("expected 3 or 6 columns, found {}", fields.len()),
            ));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(parse_error(line_no, format!("expected {c} columns like earlier lines")))
            }
            _ => {}
        }
        let v = parse_reals(line_no, &fields)?;
        positions.push([v[0], v[1], v[2]]);
        if v.len() == 6 {
            let n = unit_or_keep([v[3], v[4], v[5]])
                .ok_or_else(|| parse_error(line_no, "zero-length normal"))?;
            normals.push(Some(n));
        } else {
            normals.push(None);
        }
    }
    finish(positions, normals)
}

/// Accumulates area-weighted polygon normals onto their vertices.
fn face_normals(positions: &[Point], faces: &[Vec<usize>]) -> Vec<Option<Point>> {
    let mut acc = vec![[0.0f64; 3]; positions.len()];
    for face in faces {
        // Newell's method
        let mut n = [0.0; 3];
        for (a, b) in face.iter().zip(face.iter().cycle().skip(1)) {
            let (p, q) = (positions[*a], positions[*b]);
            n[0] += (p[1] - q[1]) * (p[2] + q[2]);
            n[1] += (p[2] - q[2]) * (p[0] + q[0]);
            n[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        for &v in face {
            for k in 0..3 {
                acc[v][k] += n[k];
            }
        }
    }
    acc.into_iter().map(unit).collect()
}

pub fn parse_off(text: &str) -> Result<PointCloud> {
    let mut lines = content_lines(text);
    let (first_no, first) = lines.next().ok_or_else(|| parse_error(1, "empty OFF file"))?;
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| parse_error(first_no, "missing OFF header"))?
        .trim();
    let (counts_no, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| parse_error(first_no + 1, "missing OFF counts"))?
    } else {
        (first_no, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| parse_error(counts_no, format!("bad count {f:?}"))))
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(parse_error(counts_no, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);
    let mut positions = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_error(counts_no, "fewer vertices than declared"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(parse_error(no, "vertex needs 3 coordinates"));
        }
        let v = parse_reals(no, &fields[..3])?;
        positions.push([v[0], v[1], v[2]]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (no, line) = lines
            .next()
            .ok_or_else(|| parse_error(counts_no, "fewer faces than declared"))?;
        faces.push(parse_face(no, line, nv)?);
    }
    let normals = face_normals(&positions, &faces);
    finish(positions, normals)
}

fn parse_face(no: usize, line: &str, nv: usize) -> Result<Vec<usize>> {
    let mut it = line.split_whitespace();
    let count: usize = it
        .next()
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| parse_error(no, "bad face vertex count"))?;
    let idx: Vec<usize> = it
        .take(count)
        .map(|f| f.parse().map_err(|_| parse_error(no, format!("bad vertex index {f:?}"))))
        .collect::<Result<_>>()?;
    if idx.len() != count || count < 3 {
        return Err(parse_error(no, "face needs at least 3 vertex indices"));
    }
    if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
        return Err(parse_error(no, format!("vertex index {bad} out of range")));
    }
    Ok(idx)
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// ASCII PLY with a `vertex` element (`x y z` and optionally `nx ny nz`) and
/// an optional `face` element.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_error(1, "missing ply magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    let mut header_end = None;
    for (no, line) in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => {
                return Err(parse_error(no, format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_error(no, format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_error(no, "property before element"))?;
                el.props.push(name.to_string());
            }
            ["end_header"] => {
                header_end = Some(no);
                break;
            }
            _ => return Err(parse_error(no, format!("unexpected header line {line:?}"))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_error(1, "missing end_header"))?;
    if !ascii {
        return Err(parse_error(header_end, "missing ascii format line"));
    }
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        let col = |n: &str| el.props.iter().position(|p| p == n);
        for _ in 0..el.count {
            let (no, line) = body
                .next()
                .ok_or_else(|| parse_error(header_end, format!("missing {} rows", el.name)))?;
            match el.name.as_str() {
                "vertex" => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    let v = parse_reals(no, &fields)?;
                    let get = |n: &str| col(n).and_then(|c| v.get(c).copied());
                    let (x, y, z) = match (get("x"), get("y"), get("z")) {
                        (Some(x), Some(y), Some(z)) => (x, y, z),
                        _ => return Err(parse_error(no, "vertex needs x, y, z")),
                    };
                    positions.push([x, y, z]);
                    normals.push(match (get("nx"), get("ny"), get("nz")) {
                        (Some(a), Some(b), Some(c)) => unit([a, b, c]),
                        _ => None,
                    });
                }
                "face" => faces.push((no, line)),
                _ => {}
            }
        }
    }
    if !faces.is_empty() && normals.iter().any(Option::is_none) {
        let parsed: Vec<Vec<usize>> = faces
            .iter()
            .map(|(no, l)| parse_face(*no, l, positions.len()))
            .collect::<Result<_>>()?;
        let from_faces = face_normals(&positions, &parsed);
        for (n, f) in normals.iter_mut().zip(from_faces) {
            if n.is_none() {
                *n = f;
            }
        }
    }
    finish(positions, normals)
}

pub fn xyz_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (p, n) in cloud.positions.iter().zip(&cloud.normals) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]);
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, xyz_string(cloud)).map_err(|e| Error::io(path, e))
}

/// XYZ with a seventh per-point score column.
pub fn write_xyz_scored(path: &Path, cloud: &PointCloud, scores: &[f64]) -> Result<()> {
    if scores.len() != cloud.len() {
        return Err(Error::shape("scored xyz", &[cloud.len()], &[scores.len()]));
    }
    let mut out = String::with_capacity(cloud.len() * 72);
    for ((p, n), s) in cloud.positions.iter().zip(&cloud.normals).zip(scores) {
        let _ = writeln!(out, "{} {} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2], s);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
