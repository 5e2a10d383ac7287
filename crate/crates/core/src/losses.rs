//! The compound point and normal losses, each returning its value together
//! with analytic partial derivatives so it can sit on a [`Tape`] as a single
//! fused node.
//!
//! Neighbor sets and nearest-point pairings are recomputed for every call
//! and treated as constants of that iterate.

use crate::autodiff::{Tape, Tensor, Var};
use crate::cloud::{dist2, dot, norm, scale, sub, PointCloud, Vec3};
use crate::error::{param, Error, Result};
use crate::geometry::{knn_search, NeighborIndex};

/// Default neighborhood size for the kNN-based terms.
pub const DEFAULT_K: usize = 15;

/// Neighbor pairs closer than this contribute nothing to the orthogonality term.
pub const ORTH_MIN_DIST: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.1, w3: 0.05, w4: 0.0001, w5: 0.0001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.w3, self.w4, self.w5];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            param(format!("loss weights must be finite and non-negative: {self:?}"))
        }
    }
}

/// Value of every term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub cd: f64,
    pub point_knn: f64,
    pub normal: f64,
    pub normal_orth: f64,
    pub normal_knn: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 6] = ["total", "cd", "point_knn", "normal", "normal_orth", "normal_knn"];

    pub fn values(&self) -> [f64; 6] {
        [self.total, self.cd, self.point_knn, self.normal, self.normal_orth, self.normal_knn]
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        Self::FIELDS.iter().zip(self.values()).map(|(k, v)| format!("{k}={v:.12e}\n")).collect()
    }

    pub(crate) fn accumulate(&mut self, other: &LossReport, w: f64) {
        self.total += w * other.total;
        self.cd += w * other.cd;
        self.point_knn += w * other.point_knn;
        self.normal += w * other.normal;
        self.normal_orth += w * other.normal_orth;
        self.normal_knn += w * other.normal_knn;
    }
}

/// A loss value with its gradient. Terms that do not depend on normals leave
/// `d_normals` at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_positions: Vec<Vec3>,
    pub d_normals: Vec<Vec3>,
    /// Hash of the neighbor choices behind the value.
    pub branch: u64,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self { value: 0.0, d_positions: vec![[0.0; 3]; n], d_normals: vec![[0.0; 3]; n], branch: 0 }
    }

    fn add_scaled(&mut self, other: &LossGrad, w: f64) {
        self.value += w * other.value;
        for (d, o) in self.d_positions.iter_mut().zip(&other.d_positions) {
            add_assign(d, scale(*o, w));
        }
        for (d, o) in self.d_normals.iter_mut().zip(&other.d_normals) {
            add_assign(d, scale(*o, w));
        }
        self.branch = mix(self.branch, other.branch);
    }

    /// Partials laid out like a network output: one `x y z nx ny nz` row per point.
    pub fn as_rows(&self) -> Tensor {
        let data = self
            .d_positions
            .iter()
            .zip(&self.d_normals)
            .flat_map(|(p, n)| [p[0], p[1], p[2], n[0], n[1], n[2]])
            .collect();
        Tensor::new(self.d_positions.len(), 6, data).expect("6 values per point")
    }
}

#[inline]
fn add_assign(a: &mut Vec3, b: Vec3) {
    a[0] += b[0];
    a[1] += b[1];
    a[2] += b[2];
}

#[inline]
fn sub_assign(a: &mut Vec3, b: Vec3) {
    a[0] -= b[0];
    a[1] -= b[1];
    a[2] -= b[2];
}

fn mix(h: u64, w: u64) -> u64 {
    (h ^ w).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
}

fn hash_indices(idx: impl IntoIterator<Item = usize>) -> u64 {
    idx.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, i| mix(h, i as u64))
}

fn nonempty(a: &[Vec3], b: &[Vec3], what: &str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return param(format!("{what}: clouds must be non-empty"));
    }
    Ok(())
}

fn same_len(p: &[Vec3], n: &[Vec3], what: &str) -> Result<()> {
    if p.len() != n.len() {
        return Err(Error::Shape {
            op: "losses",
            detail: format!("{what}: {} positions, {} normals", p.len(), n.len()),
        });
    }
    Ok(())
}

/// Nearest point of `to` for every point of `from` (lowest index on ties),
/// with its squared distance.
pub fn nearest_pairs(from: &[Vec3], to: &[Vec3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, y) in to.iter().enumerate() {
                let d = dist2(*x, *y);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Sum over both directions of squared nearest-neighbor distances.
pub fn chamfer(pred: &[Vec3], gt: &[Vec3]) -> Result<LossGrad> {
    nonempty(pred, gt, "chamfer")?;
    let mut out = LossGrad::zero(pred.len());
    let forward = nearest_pairs(pred, gt);
    let backward = nearest_pairs(gt, pred);
    for (i, &(j, d)) in forward.iter().enumerate() {
        out.value += d;
        add_assign(&mut out.d_positions[i], scale(sub(pred[i], gt[j]), 2.0));
    }
    for (j, &(i, d)) in backward.iter().enumerate() {
        out.value += d;
        add_assign(&mut out.d_positions[i], scale(sub(pred[i], gt[j]), 2.0));
    }
    out.branch = hash_indices(forward.iter().chain(&backward).map(|p| p.0));
    Ok(out)
}

/// Minimum over bijections of the summed (non-squared) distances.
/// Evaluation only; no gradient.
pub fn emd(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return param(format!("emd needs equal cardinalities, got {} and {}", pred.len(), gt.len()));
    }
    nonempty(pred, gt, "emd")?;
    let cost: Vec<Vec<f64>> = pred.iter().map(|x| gt.iter().map(|y| dist2(*x, *y).sqrt()).collect()).collect();
    Ok(crate::assignment::min_cost_assignment(&cost)?.0)
}

fn self_knn(pred: &[Vec3], k: usize, what: &str) -> Result<NeighborIndex> {
    if k == 0 || pred.len() <= k {
        return param(format!("{what}: need more than k={k} points, got {}", pred.len()));
    }
    knn_search(pred, pred, k, true)
}

/// Mean over points of the summed squared distances to their `k` nearest
/// neighbors within the same cloud.
pub fn point_knn_loss(pred: &[Vec3], k: usize) -> Result<LossGrad> {
    let nn = self_knn(pred, k, "point_knn_loss")?;
    Ok(point_knn_with(pred, &nn))
}

fn point_knn_with(pred: &[Vec3], nn: &NeighborIndex) -> LossGrad {
    let n = pred.len();
    let inv = 1.0 / n as f64;
    let mut out = LossGrad::zero(n);
    for x in 0..n {
        for &y in nn.indices(x) {
            let d = sub(pred[x], pred[y]);
            out.value += dot(d, d);
            let g = scale(d, 2.0 * inv);
            add_assign(&mut out.d_positions[x], g);
            sub_assign(&mut out.d_positions[y], g);
        }
    }
    out.value *= inv;
    out.branch = hash_indices(nn.flat_indices().iter().copied());
    out
}

/// Mean squared difference between each predicted normal and the normal of
/// the ground-truth point nearest to it.
pub fn normal_l2_loss(pred_pos: &[Vec3], pred_nrm: &[Vec3], gt_pos: &[Vec3], gt_nrm: &[Vec3]) -> Result<LossGrad> {
    nonempty(pred_pos, gt_pos, "normal_l2_loss")?;
    same_len(pred_pos, pred_nrm, "normal_l2_loss prediction")?;
    same_len(gt_pos, gt_nrm, "normal_l2_loss ground truth")?;
    let pairs = nearest_pairs(pred_pos, gt_pos);
    let inv = 1.0 / pred_pos.len() as f64;
    let mut out = LossGrad::zero(pred_pos.len());
    for (i, &(j, _)) in pairs.iter().enumerate() {
        let d = sub(pred_nrm[i], gt_nrm[j]);
        out.value += dot(d, d);
        out.d_normals[i] = scale(d, 2.0 * inv);
    }
    out.value *= inv;
    out.branch = hash_indices(pairs.iter().map(|p| p.0));
    Ok(out)
}

/// Mean squared cosine between each normal and the offsets to its `k`
/// nearest neighbors; zero when normals are orthogonal to the local surface.
pub fn normal_orth_loss(pred_pos: &[Vec3], pred_nrm: &[Vec3], k: usize) -> Result<LossGrad> {
    same_len(pred_pos, pred_nrm, "normal_orth_loss")?;
    let nn = self_knn(pred_pos, k, "normal_orth_loss")?;
    Ok(normal_orth_with(pred_pos, pred_nrm, &nn))
}

fn normal_orth_with(pos: &[Vec3], nrm: &[Vec3], nn: &NeighborIndex) -> LossGrad {
    let n = pos.len();
    let inv = 1.0 / (n * nn.k()) as f64;
    let mut out = LossGrad::zero(n);
    for l in 0..n {
        let nl = nrm[l];
        let n_len = norm(nl);
        if n_len == 0.0 {
            continue;
        }
        let v = scale(nl, 1.0 / n_len);
        for &i in nn.indices(l) {
            let d = sub(pos[l], pos[i]);
            let d_len = norm(d);
            if d_len < ORTH_MIN_DIST {
                continue;
            }
            let u = scale(d, 1.0 / d_len);
            let c = dot(u, v);
            out.value += c * c;
            // d(c^2) = 2c * dc, dc/dd = (v - c u)/|d|, dc/dn = (u - c v)/|n|
            let gd = scale(sub(v, scale(u, c)), 2.0 * c * inv / d_len);
            let gn = scale(sub(u, scale(v, c)), 2.0 * c * inv / n_len);
            add_assign(&mut out.d_positions[l], gd);
            sub_assign(&mut out.d_positions[i], gd);
            add_assign(&mut out.d_normals[l], gn);
        }
    }
    out.value *= inv;
    out.branch = hash_indices(nn.flat_indices().iter().copied());
    out
}

/// Mean over points of the summed squared differences between a normal and
/// the normals of its `k` nearest neighbors (neighborhoods by position).
pub fn normal_knn_loss(pred_pos: &[Vec3], pred_nrm: &[Vec3], k: usize) -> Result<LossGrad> {
    same_len(pred_pos, pred_nrm, "normal_knn_loss")?;
    let nn = self_knn(pred_pos, k, "normal_knn_loss")?;
    Ok(normal_knn_with(pred_nrm, &nn))
}

fn normal_knn_with(nrm: &[Vec3], nn: &NeighborIndex) -> LossGrad {
    let n = nrm.len();
    let inv = 1.0 / n as f64;
    let mut out = LossGrad::zero(n);
    for x in 0..n {
        for &y in nn.indices(x) {
            let d = sub(nrm[x], nrm[y]);
            out.value += dot(d, d);
            let g = scale(d, 2.0 * inv);
            add_assign(&mut out.d_normals[x], g);
            sub_assign(&mut out.d_normals[y], g);
        }
    }
    out.value *= inv;
    out.branch = hash_indices(nn.flat_indices().iter().copied());
    out
}

/// Weighted sum of all five terms, with the combined gradient.
pub fn total_loss(
    pred_pos: &[Vec3],
    pred_nrm: &[Vec3],
    gt: &PointCloud,
    weights: &LossWeights,
    k: usize,
) -> Result<(LossReport, LossGrad)> {
    weights.validate()?;
    same_len(pred_pos, pred_nrm, "total_loss")?;
    let nn = self_knn(pred_pos, k, "total_loss")?;
    let cd = chamfer(pred_pos, gt.positions())?;
    let pk = point_knn_with(pred_pos, &nn);
    let nl = normal_l2_loss(pred_pos, pred_nrm, gt.positions(), gt.normals())?;
    let no = normal_orth_with(pred_pos, pred_nrm, &nn);
    let nk = normal_knn_with(pred_nrm, &nn);

    let mut grad = LossGrad::zero(pred_pos.len());
    let terms = [(&cd, weights.w1), (&pk, weights.w2), (&nl, weights.w3), (&no, weights.w4), (&nk, weights.w5)];
    for (term, w) in terms {
        grad.add_scaled(term, w);
    }
    let report = LossReport {
        total: grad.value,
        cd: cd.value,
        point_knn: pk.value,
        normal: nl.value,
        normal_orth: no.value,
        normal_knn: nk.value,
    };
    Ok((report, grad))
}

/// Splits `x y z nx ny nz` rows into positions and normals.
pub fn split_rows(t: &Tensor) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if t.cols() != 6 {
        return Err(Error::Shape { op: "split_rows", detail: format!("{} columns, expected 6", t.cols()) });
    }
    Ok((0..t.rows())
        .map(|r| {
            let v = t.row(r);
            ([v[0], v[1], v[2]], [v[3], v[4], v[5]])
        })
        .unzip())
}

/// Records a precomputed loss as a fused node over an m x 6 prediction.
pub fn record(tape: &mut Tape, pred: Var, loss: &LossGrad) -> Result<Var> {
    tape.fused_scalar(&[pred], loss.value, vec![loss.as_rows()], loss.branch)
}

/// Evaluates the weighted compound loss on a network output (m x 6) and
/// puts it on the tape.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    gt: &PointCloud,
    weights: &LossWeights,
    k: usize,
) -> Result<(Var, LossReport)> {
    let (pos, nrm) = split_rows(tape.value(pred))?;
    let (report, grad) = total_loss(&pos, &nrm, gt, weights, k)?;
    Ok((record(tape, pred, &grad)?, report))
}
