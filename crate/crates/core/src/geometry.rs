//! Spatial kernels (kNN, ball query, farthest point sampling) and the
//! dataset procedures built on them: patching, merging, non-uniform
//! downsampling, augmentation and patch normalization.

use std::cmp::Ordering;

use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{add, dist2, norm, scale, sub, unit, PointCloud, Vec3};
use crate::error::{param, Result};

/// Clouds up to this size are searched exhaustively; larger ones go through
/// a uniform grid. Both paths return identical results.
pub const EXHAUSTIVE_KNN_LIMIT: usize = 1024;

#[inline]
fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// `k` nearest neighbors per query, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    sq_dists: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn indices(&self, row: usize) -> &[usize] {
        &self.indices[row * self.k..(row + 1) * self.k]
    }

    pub fn sq_dists(&self, row: usize) -> &[f64] {
        &self.sq_dists[row * self.k..(row + 1) * self.k]
    }

    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }
}

fn knn_exhaustive(points: &[Vec3], q: Vec3, k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> =
        points.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(i, p)| (dist2(q, *p), i)).collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_dist_then_index);
        all.truncate(k);
    }
    all.sort_unstable_by(by_dist_then_index);
    all
}

/// Uniform bucket grid over the bounding box of a point set.
struct Grid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl Grid {
    fn build(points: &[Vec3], per_cell: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = sub(hi, lo);
        let max_ext = ext.iter().cloned().fold(0.0, f64::max);
        let cells_wanted = (points.len() / per_cell.max(1)).max(1) as f64;
        let cell = if max_ext > 0.0 {
            // Volume per cell from the non-degenerate extents.
            let floor = max_ext * 1e-3;
            let vol: f64 = ext.iter().map(|e| e.max(floor)).product();
            (vol / cells_wanted).cbrt().max(floor)
        } else {
            1.0
        };
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 10));
        let mut grid = Grid { origin: lo, cell, dims, starts: Vec::new(), items: Vec::new() };

        let ncells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.coord(*p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &c in &keys {
            counts[c + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0usize; points.len()];
        for (i, &c) in keys.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.items = items;
        grid
    }

    fn coord(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c <= 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn cell_items(&self, c: [usize; 3]) -> &[usize] {
        let f = self.flat(c);
        &self.items[self.starts[f]..self.starts[f + 1]]
    }

    fn knn(&self, points: &[Vec3], q: Vec3, k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
        let center = self.coord(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(4 * k);
        for ring in 0..=max_ring {
            let r = ring as isize;
            let range = |a: usize| {
                let lo = (center[a] as isize - r).max(0);
                let hi = (center[a] as isize + r).min(self.dims[a] as isize - 1);
                lo..=hi
            };
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let cheb = (x - center[0] as isize)
                            .abs()
                            .max((y - center[1] as isize).abs())
                            .max((z - center[2] as isize).abs());
                        if cheb != r {
                            continue;
                        }
                        for &i in self.cell_items([x as usize, y as usize, z as usize]) {
                            if Some(i) != skip {
                                best.push((dist2(q, points[i]), i));
                            }
                        }
                    }
                }
            }
            if best.len() >= k {
                best.select_nth_unstable_by(k - 1, by_dist_then_index);
                best.truncate(k);
                // Every point outside the visited rings lies at least
                // `ring * cell` away from the query.
                let bound = ring as f64 * self.cell;
                let kth = best.iter().map(|b| b.0).fold(0.0, f64::max);
                if kth < bound * bound * (1.0 - 1e-9) {
                    break;
                }
            }
        }
        best.sort_unstable_by(by_dist_then_index);
        best
    }
}

/// Exact k-nearest-neighbor search. With `exclude_self`, query `r` is taken
/// to be point `r` and is left out of its own neighbor list.
pub fn knn_search(points: &[Vec3], queries: &[Vec3], k: usize, exclude_self: bool) -> Result<NeighborIndex> {
    if points.is_empty() {
        return param("knn_search over an empty point set");
    }
    let available = points.len() - usize::from(exclude_self);
    if k == 0 || k > available {
        return param(format!("knn_search: k={k} but only {available} candidates"));
    }
    if exclude_self && queries.len() > points.len() {
        return param("knn_search: self-exclusion needs one point per query");
    }
    let grid = (points.len() > EXHAUSTIVE_KNN_LIMIT).then(|| Grid::build(points, k.max(8)));
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut sq_dists = Vec::with_capacity(queries.len() * k);
    for (r, q) in queries.iter().enumerate() {
        let skip = exclude_self.then_some(r);
        let row = match &grid {
            Some(g) => g.knn(points, *q, k, skip),
            None => knn_exhaustive(points, *q, k, skip),
        };
        for (d, i) in row {
            sq_dists.push(d);
            indices.push(i);
        }
    }
    Ok(NeighborIndex { k, indices, sq_dists })
}

/// Exhaustive search regardless of cloud size.
pub fn knn_search_exhaustive(points: &[Vec3], queries: &[Vec3], k: usize, exclude_self: bool) -> Result<NeighborIndex> {
    if points.is_empty() || k == 0 || k > points.len() - usize::from(exclude_self) {
        return param("knn_search_exhaustive: bad k or empty set");
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut sq_dists = Vec::with_capacity(queries.len() * k);
    for (r, q) in queries.iter().enumerate() {
        for (d, i) in knn_exhaustive(points, *q, k, exclude_self.then_some(r)) {
            sq_dists.push(d);
            indices.push(i);
        }
    }
    Ok(NeighborIndex { k, indices, sq_dists })
}

/// Index of the nearest point to `q`, lowest index on ties.
pub fn nearest(points: &[Vec3], q: Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(q, *p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Fixed-width neighborhoods, `width` indices per center.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    pub width: usize,
    pub indices: Vec<usize>,
}

impl Groups {
    pub fn group(&self, c: usize) -> &[usize] {
        &self.indices[c * self.width..(c + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// For every center, the first `max_samples` points (in index order) within
/// `radius`. Short groups are padded with their first member; empty ones
/// with the center's nearest point.
pub fn ball_query(points: &[Vec3], centers: &[Vec3], radius: f64, max_samples: usize) -> Result<Groups> {
    if radius.is_nan() || radius <= 0.0 || max_samples == 0 {
        return param(format!("ball_query: radius={radius}, max_samples={max_samples}"));
    }
    if points.is_empty() {
        return param("ball_query over an empty point set");
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centers.len() * max_samples);
    for c in centers {
        let start = indices.len();
        for (i, p) in points.iter().enumerate() {
            if dist2(*c, *p) <= r2 {
                indices.push(i);
                if indices.len() - start == max_samples {
                    break;
                }
            }
        }
        let pad = if indices.len() > start { indices[start] } else { nearest(points, *c).0 };
        indices.resize(start + max_samples, pad);
    }
    Ok(Groups { width: max_samples, indices })
}

/// Greedy farthest point sampling from `seed`; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], m: usize, seed: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return param(format!("farthest_point_sample: m={m} with n={n}"));
    }
    if seed >= n {
        return param(format!("farthest_point_sample: seed {seed} out of range"));
    }
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(m);
    let mut current = seed;
    loop {
        chosen.push(current);
        min_d[current] = f64::NEG_INFINITY;
        if chosen.len() == m {
            break;
        }
        let pc = points[current];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(pc, *p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        current = best.0;
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub members: Vec<usize>,
    pub centroid: Vec3,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub source_size: usize,
}

/// Number of patches giving roughly two-fold overlap.
pub fn default_patch_count(n: usize, patch_size: usize) -> usize {
    (2 * n).div_ceil(patch_size.max(1)).max(1)
}

fn centroid_and_radius(points: &[Vec3]) -> (Vec3, f64) {
    let inv = 1.0 / points.len() as f64;
    let c = points.iter().fold([0.0; 3], |acc, p| add(acc, *p));
    let c = scale(c, inv);
    let r = points.iter().map(|p| dist2(*p, c)).fold(0.0, f64::max).sqrt();
    (c, if r > 0.0 { r } else { 1.0 })
}

/// Patches of `patch_size` nearest neighbors around FPS seeds. If the seeds
/// leave points uncovered, extra patches are grown around them.
pub fn extract_patches(cloud: &PointCloud, patch_size: usize, num_patches: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if patch_size == 0 || patch_size > n {
        return param(format!("extract_patches: patch_size={patch_size} with n={n}"));
    }
    let num_patches = num_patches.clamp(1, n);
    let pts = cloud.positions();
    let seeds = farthest_point_sample(pts, num_patches, 0)?;
    let seed_pos: Vec<Vec3> = seeds.iter().map(|&s| pts[s]).collect();
    let nn = knn_search(pts, &seed_pos, patch_size, false)?;

    let mut covered = vec![false; n];
    let mut patches = Vec::with_capacity(seeds.len());
    let mut push_patch = |members: Vec<usize>, covered: &mut Vec<bool>| {
        for &m in &members {
            covered[m] = true;
        }
        let member_pos: Vec<Vec3> = members.iter().map(|&i| pts[i]).collect();
        let (centroid, scale) = centroid_and_radius(&member_pos);
        patches.push(Patch { members, centroid, scale });
    };
    for row in 0..seeds.len() {
        push_patch(nn.indices(row).to_vec(), &mut covered);
    }
    while let Some(hole) = covered.iter().position(|c| !c) {
        let extra = knn_search(pts, &[pts[hole]], patch_size, false)?;
        let mut members = extra.indices(0).to_vec();
        if !members.contains(&hole) {
            // Coincident points can crowd the hole out of its own patch.
            members[patch_size - 1] = hole;
        }
        push_patch(members, &mut covered);
    }
    Ok(PatchSet { patches, source_size: n })
}

/// A cloud in patch-local coordinates together with the transform back.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPatch {
    pub cloud: PointCloud,
    pub centroid: Vec3,
    pub scale: f64,
}

/// Shifts to the centroid and divides by the largest radius (1 for a
/// degenerate patch). Normals are left as they are.
pub fn normalize_patch(cloud: &PointCloud) -> NormalizedPatch {
    let (centroid, s) = centroid_and_radius(cloud.positions());
    let positions = cloud.positions().iter().map(|p| scale(sub(*p, centroid), 1.0 / s)).collect();
    NormalizedPatch { cloud: PointCloud::from_parts_unchecked(positions, cloud.normals().to_vec()), centroid, scale: s }
}

/// Applies a known centroid/scale normalization.
pub fn normalize_with(cloud: &PointCloud, centroid: Vec3, s: f64) -> PointCloud {
    let positions = cloud.positions().iter().map(|p| scale(sub(*p, centroid), 1.0 / s)).collect();
    PointCloud::from_parts_unchecked(positions, cloud.normals().to_vec())
}

pub fn denormalize_patch(patch: &NormalizedPatch) -> PointCloud {
    let positions = patch.cloud.positions().iter().map(|p| add(scale(*p, patch.scale), patch.centroid)).collect();
    PointCloud::from_parts_unchecked(positions, patch.cloud.normals().to_vec())
}

/// De-normalizes and concatenates the patches, then thins the union by FPS
/// (seeded at index 0) to exactly `target_count` points with unit normals.
pub fn merge_and_consolidate(patches: &[NormalizedPatch], target_count: usize) -> Result<PointCloud> {
    Ok(merge_and_consolidate_traced(patches, target_count)?.0)
}

/// [`merge_and_consolidate`] that also reports, for every output point,
/// the patch and row it came from.
pub fn merge_and_consolidate_traced(
    patches: &[NormalizedPatch],
    target_count: usize,
) -> Result<(PointCloud, Vec<(usize, usize)>)> {
    let total: usize = patches.iter().map(|p| p.cloud.len()).sum();
    if target_count == 0 || total < target_count {
        return param(format!("merge_and_consolidate: {total} merged points, {target_count} requested"));
    }
    let mut positions = Vec::with_capacity(total);
    let mut normals = Vec::with_capacity(total);
    let mut origin = Vec::with_capacity(total);
    for (pi, p) in patches.iter().enumerate() {
        let (pos, nrm) = denormalize_patch(p).into_parts();
        origin.extend((0..pos.len()).map(|row| (pi, row)));
        positions.extend(pos);
        normals.extend(nrm);
    }
    let keep = farthest_point_sample(&positions, target_count, 0)?;
    let trace = keep.iter().map(|&i| origin[i]).collect();
    let positions = keep.iter().map(|&i| positions[i]).collect();
    let normals = keep.iter().map(|&i| normals[i]).collect();
    Ok((PointCloud::with_renormalized(positions, normals)?.0, trace))
}

/// Largest pairwise distance; above `EXACT_DIAMETER_LIMIT` points the
/// bounding-box diagonal is used instead.
pub fn diameter(points: &[Vec3]) -> f64 {
    const EXACT_DIAMETER_LIMIT: usize = 16_384;
    if points.len() > EXACT_DIAMETER_LIMIT {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        return norm(sub(hi, lo));
    }
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(dist2(*a, *b));
        }
    }
    best.sqrt()
}

/// Keeps `m` points, sampled without replacement with weight
/// `0.05 * diameter + distance to a random anchor`, so the region around the
/// anchor ends up sparser. Kept points retain their input order.
pub fn nonuniform_downsample(cloud: &PointCloud, m: usize, rng_seed: u64) -> Result<PointCloud> {
    let idx = nonuniform_downsample_indices(cloud.positions(), m, rng_seed)?;
    Ok(cloud.select(&idx))
}

pub fn nonuniform_downsample_indices(points: &[Vec3], m: usize, rng_seed: u64) -> Result<Vec<usize>> {
    Ok(nonuniform_downsample_traced(points, m, rng_seed)?.1)
}

/// Returns the anchor index along with the kept indices.
pub fn nonuniform_downsample_traced(points: &[Vec3], m: usize, rng_seed: u64) -> Result<(usize, Vec<usize>)> {
    let n = points.len();
    if m == 0 || m > n {
        return param(format!("nonuniform_downsample: m={m} with n={n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let anchor_index = rng.random_range(0..n);
    let anchor = points[anchor_index];
    let eps = 0.05 * diameter(points);
    let eps = if eps > 0.0 { eps } else { 1.0 };
    let weights: Vec<f64> = points.iter().map(|p| eps + dist2(*p, anchor).sqrt()).collect();
    let mut picked = sample_weighted(&mut rng, n, |i| weights[i], m)
        .map_err(|e| crate::error::Error::Param(format!("weighted sampling failed: {e}")))?
        .into_vec();
    picked.sort_unstable();
    Ok((anchor_index, picked))
}

/// Ranges for random augmentation. The default is the training setup; use
/// [`AugmentConfig::identity`] to switch everything off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate: true, scale_min: 0.8, scale_max: 1.2, shift: 0.1, noise_sigma: 0.005 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { rotate: false, scale_min: 1.0, scale_max: 1.0, shift: 0.0, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_max >= self.scale_min
            && self.shift >= 0.0
            && self.noise_sigma >= 0.0
            && [self.scale_min, self.scale_max, self.shift, self.noise_sigma].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            param(format!("invalid augmentation ranges {self:?}"))
        }
    }
}

/// One draw of the similarity transform used by augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub shift: Vec3,
}

/// Rotation matrix of a uniformly random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin(), b * (TAU * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[inline]
pub fn rotate(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

impl Similarity {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], scale: 1.0, shift: [0.0; 3] }
    }

    pub fn draw(rng: &mut impl Rng, cfg: &AugmentConfig) -> Self {
        let rotation = if cfg.rotate { random_rotation(rng) } else { Self::identity().rotation };
        let scale =
            if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
        let mut shift = [0.0; 3];
        if cfg.shift > 0.0 {
            for s in &mut shift {
                *s = rng.random_range(-cfg.shift..=cfg.shift);
            }
        }
        Self { rotation, scale, shift }
    }

    /// Rotates, scales and shifts positions; normals are only rotated.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let positions =
            cloud.positions().iter().map(|p| add(scale(rotate(&self.rotation, *p), self.scale), self.shift)).collect();
        let normals = cloud
            .normals()
            .iter()
            .map(|n| {
                let r = rotate(&self.rotation, *n);
                unit(r).unwrap_or(r)
            })
            .collect();
        PointCloud::from_parts_unchecked(positions, normals)
    }
}

/// Adds isotropic Gaussian noise to positions.
pub fn jitter(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> PointCloud {
    if sigma == 0.0 {
        return cloud.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated as finite and non-negative");
    let positions = cloud
        .positions()
        .iter()
        .map(|p| [p[0] + normal.sample(rng), p[1] + normal.sample(rng), p[2] + normal.sample(rng)])
        .collect();
    PointCloud::from_parts_unchecked(positions, cloud.normals().to_vec())
}

/// Random rotation, uniform scale, per-axis shift, then positional noise.
pub fn augment(cloud: &PointCloud, rng_seed: u64, config: &AugmentConfig) -> Result<PointCloud> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let sim = Similarity::draw(&mut rng, config);
    Ok(jitter(&sim.apply(cloud), config.noise_sigma, &mut rng))
}
