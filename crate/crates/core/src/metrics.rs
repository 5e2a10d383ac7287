//! Evaluation metrics against a ground-truth cloud.

use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::{cross, dot, format_xyzn, norm, write_atomic, PointCloud, Vec3};
use crate::error::{param, Result};
use crate::losses::nearest_pairs;

fn nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return param("metrics need non-empty clouds");
    }
    Ok(())
}

/// Chamfer distance as the average of the two directed mean squared
/// nearest-neighbor distances.
pub fn cd_metric(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    nonempty(pred, gt)?;
    let mean = |pairs: Vec<(usize, f64)>| pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    Ok(0.5 * (mean(nearest_pairs(pred, gt)) + mean(nearest_pairs(gt, pred))))
}

/// Symmetric Hausdorff distance (not squared).
pub fn hd_metric(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    nonempty(pred, gt)?;
    let worst = |pairs: Vec<(usize, f64)>| pairs.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(worst(nearest_pairs(pred, gt)).max(worst(nearest_pairs(gt, pred))).sqrt())
}

// atan2 stays exact at zero and accurate for tiny angles, unlike acos
fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b)).to_degrees()
}

/// Angle in degrees between each predicted normal and the normal of the
/// nearest ground-truth point; returns the mean and every angle.
pub fn normal_angle_error(pred: &PointCloud, gt: &PointCloud) -> Result<(f64, Vec<f64>)> {
    let pairs = nearest_pairs(pred.positions(), gt.positions());
    let angles: Vec<f64> =
        pairs.iter().zip(pred.normals()).map(|(&(j, _), n)| angle_deg(*n, gt.normals()[j])).collect();
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    Ok((mean, angles))
}

/// Distance from every predicted point to its nearest ground-truth point.
pub fn deviations(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    nonempty(pred, gt)?;
    Ok(nearest_pairs(pred, gt).into_iter().map(|(_, d)| d.sqrt()).collect())
}

/// Writes `x y z nx ny nz dist` lines, `dist` being the distance to the
/// nearest ground-truth point.
pub fn deviation_export(pred: &PointCloud, gt: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let dev = deviations(pred.positions(), gt.positions())?;
    write_atomic(path, format_xyzn(pred, Some(&dev)).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub cd: f64,
    pub hd: f64,
    pub normal_angle_deg: f64,
}

impl EvalReport {
    pub fn compute(pred: &PointCloud, gt: &PointCloud) -> Result<Self> {
        Ok(Self {
            cd: cd_metric(pred.positions(), gt.positions())?,
            hd: hd_metric(pred.positions(), gt.positions())?,
            normal_angle_deg: normal_angle_error(pred, gt)?.0,
        })
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cd={:.9e}", self.cd);
        let _ = writeln!(s, "hd={:.9e}", self.hd);
        let _ = writeln!(s, "normal_angle_deg={:.9e}", self.normal_angle_deg);
        s
    }
}
