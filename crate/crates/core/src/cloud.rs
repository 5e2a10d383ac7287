//! Point clouds with per-point normals, and the XYZN / PLY text formats.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{param, Error, Result};

pub type Vec3 = [f64; 3];

/// Accepted deviation of a normal's length from 1.
pub const NORMAL_TOLERANCE: f64 = 1e-3;

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Squared Euclidean distance. Every kernel in the crate goes through this
/// function so that exhaustive and indexed searches agree bit for bit.
#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Unit-length copy of `n`, or `None` when `n` has zero (or non-finite) length.
pub fn unit(n: Vec3) -> Option<Vec3> {
    let len = norm(n);
    if len > 0.0 && len.is_finite() {
        Some(scale(n, 1.0 / len))
    } else {
        None
    }
}

/// `n` positions with one unit normal each.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input, non-finite positions and
    /// normals that are not unit length.
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return param("point cloud must contain at least one point");
        }
        if positions.len() != normals.len() {
            return Err(Error::Shape {
                op: "PointCloud::new",
                detail: format!("{} positions vs {} normals", positions.len(), normals.len()),
            });
        }
        for (i, p) in positions.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("position of point {i}")));
            }
        }
        for (i, n) in normals.iter().enumerate() {
            let len = norm(*n);
            if !(1.0 - NORMAL_TOLERANCE..=1.0 + NORMAL_TOLERANCE).contains(&len) {
                return param(format!("normal of point {i} has length {len}, expected unit"));
            }
        }
        Ok(Self { positions, normals })
    }

    /// Builds a cloud after rescaling every normal to unit length. Zero normals
    /// become `(0, 0, 1)`; the number of such replacements is returned.
    pub fn with_renormalized(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<(Self, usize)> {
        let mut degenerate = 0;
        let normals = normals
            .into_iter()
            .map(|n| {
                unit(n).unwrap_or_else(|| {
                    degenerate += 1;
                    [0.0, 0.0, 1.0]
                })
            })
            .collect();
        Ok((Self::new(positions, normals)?, degenerate))
    }

    pub(crate) fn from_parts_unchecked(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Self {
        debug_assert_eq!(positions.len(), normals.len());
        Self { positions, normals }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<Vec3>) {
        (self.positions, self.normals)
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
        }
    }

    /// Rows of `x y z nx ny nz`.
    pub fn to_rows(&self) -> Vec<[f64; 6]> {
        self.positions.iter().zip(&self.normals).map(|(p, n)| [p[0], p[1], p[2], n[0], n[1], n[2]]).collect()
    }
}

/// Formats `v` with nine significant digits, choosing fixed or scientific
/// notation like C's `%.9g`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let mut s = format!("{v:.decimals$}");
        if s.contains('.') {
            while s.ends_with('0') {
                s.pop();
            }
            if s.ends_with('.') {
                s.pop();
            }
        }
        s
    } else {
        sci
    }
}

fn parse_fields(line: &str, lineno: usize, min: usize) -> Result<Vec<f64>> {
    let fields: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: lineno, msg: format!("`{t}`: {e}") }))
        .collect::<Result<_>>()?;
    if fields.len() < min {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected at least {min} values, found {}", fields.len()),
        });
    }
    Ok(fields)
}

/// Rows of an XYZN file. Columns beyond the sixth (such as a deviation
/// column) are returned as well.
pub fn parse_xyzn_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        rows.push(parse_fields(trimmed, i + 1, 6)?);
    }
    Ok(rows)
}

pub fn parse_xyzn(text: &str) -> Result<PointCloud> {
    let rows = parse_xyzn_rows(text)?;
    let positions = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
    let normals = rows.iter().map(|r| [r[3], r[4], r[5]]).collect();
    PointCloud::new(positions, normals)
}

pub fn read_xyzn(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_xyzn(&fs::read_to_string(path)?)
}

/// Serializes a cloud, optionally appending one extra column per point.
pub fn format_xyzn(cloud: &PointCloud, extra: Option<&[f64]>) -> String {
    let mut out = String::with_capacity(cloud.len() * 80);
    for (i, row) in cloud.to_rows().iter().enumerate() {
        let mut line: Vec<String> = row.iter().map(|&v| format_sig9(v)).collect();
        if let Some(extra) = extra {
            line.push(format_sig9(extra[i]));
        }
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_xyzn(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, format_xyzn(cloud, None).as_bytes())
}

/// Reads an ASCII PLY file whose `vertex` element carries `x y z nx ny nz`
/// (in any order, other properties ignored).
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let reader = BufReader::new(fs::File::open(path)?);
    parse_ply(reader)
}

pub fn parse_ply(reader: impl BufRead) -> Result<PointCloud> {
    let mut lines = reader.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

    match lines.next() {
        Some((_, Ok(l))) if l.trim() == "ply" => {}
        _ => return Err(bad(1, "missing `ply` magic")),
    }

    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(bad(i + 1, "only ASCII PLY is supported"));
                }
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| bad(i + 1, "bad element count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| bad(i + 1, "property before element"))?;
                el.2.push("<list>".to_string());
            }
            ["property", _ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad(i + 1, "property before element"))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {}
        }
    }
    if !header_done {
        return Err(bad(0, "missing end_header"));
    }

    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            // Elements are stored in header order; anything after the vertex
            // block is irrelevant.
            if positions.is_empty() {
                for _ in 0..*count {
                    lines.next();
                }
                continue;
            }
            break;
        }
        let col = |want: &str| props.iter().position(|p| p == want);
        let cols: Vec<usize> = ["x", "y", "z", "nx", "ny", "nz"]
            .iter()
            .map(|w| col(w).ok_or_else(|| bad(0, &format!("vertex element lacks `{w}`"))))
            .collect::<Result<_>>()?;
        for _ in 0..*count {
            let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated vertex data"))?;
            let vals = parse_fields(&line?, i + 1, props.len())?;
            positions.push([vals[cols[0]], vals[cols[1]], vals[cols[2]]]);
            normals.push([vals[cols[3]], vals[cols[4]], vals[cols[5]]]);
        }
    }
    PointCloud::new(positions, normals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_unit() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[0.0, 0.0, 2.0]]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[0.0, 0.0, 1.0005]]).is_ok());
    }

    #[test]
    fn renormalizes_degenerate_normals() {
        let (c, bad) =
            PointCloud::with_renormalized(vec![[0.0; 3], [1.0; 3]], vec![[0.0, 0.0, 2.0], [0.0; 3]]).unwrap();
        assert_eq!(bad, 1);
        assert_eq!(c.normals(), &[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456.789123), "123456.789");
        assert_eq!(format_sig9(1.5e-7), "1.50000000e-7");
    }

    #[test]
    fn xyzn_comments_and_extra_columns() {
        let text = "# header\n0 0 0 0 0 1\n\n1 2 3 1 0 0 0.25\n";
        let cloud = parse_xyzn(text).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.positions()[1], [1.0, 2.0, 3.0]);
        let rows = parse_xyzn_rows(text).unwrap();
        assert_eq!(rows[1][6], 0.25);
        assert!(matches!(parse_xyzn("0 0 0 0 0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ply_ascii_vertices() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float nx\n\
                    property float ny\nproperty float nz\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nelement face 0\n\
                    property list uchar int vertex_indices\nend_header\n\
                    0 0 1 1 2 3 255\n1 0 0 4 5 6 0\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.positions(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(cloud.normals()[1], [1.0, 0.0, 0.0]);
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n".as_bytes()).is_err());
    }
}
