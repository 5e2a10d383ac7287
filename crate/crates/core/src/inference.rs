//! Whole-cloud upsampling by patches.

use crate::cloud::PointCloud;
use crate::error::{param, Result};
use crate::geometry::{
    default_patch_count, extract_patches, merge_and_consolidate_traced, normalize_patch, NormalizedPatch,
};
use crate::network::Network;

/// Result of [`upsample_cloud_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampled {
    pub cloud: PointCloud,
    /// (patch, output row of that patch) for every point of `cloud`.
    pub provenance: Vec<(usize, usize)>,
    /// Source indices of each patch.
    pub patch_members: Vec<Vec<usize>>,
    /// Zero-length predicted normals replaced by (0, 0, 1).
    pub degenerate_normals: usize,
}

/// Patchify, normalize, run the network, de-normalize, merge and thin by FPS
/// to exactly `up_ratio * n` points.
pub fn upsample_cloud(cloud: &PointCloud, network: &Network) -> Result<PointCloud> {
    Ok(upsample_cloud_traced(cloud, network)?.cloud)
}

pub fn upsample_cloud_traced(cloud: &PointCloud, network: &Network) -> Result<Upsampled> {
    let config = network.config();
    let n = cloud.len();
    let patch_members: Vec<Vec<usize>> = if n < config.patch_size {
        log::warn!(
            "cloud has {n} points, fewer than the patch size {}; using one whole-cloud patch",
            config.patch_size
        );
        vec![(0..n).collect()]
    } else if n == config.patch_size {
        vec![(0..n).collect()]
    } else {
        let set = extract_patches(cloud, config.patch_size, default_patch_count(n, config.patch_size))?;
        set.patches.into_iter().map(|p| p.members).collect()
    };

    let mut outputs = Vec::with_capacity(patch_members.len());
    let mut degenerate = 0;
    for members in &patch_members {
        let patch = normalize_patch(&cloud.select(members));
        let (pred, bad) = network.predict(&patch.cloud)?;
        degenerate += bad;
        outputs.push(NormalizedPatch { cloud: pred, centroid: patch.centroid, scale: patch.scale });
    }
    let target = config.up_ratio * n;
    let total: usize = outputs.iter().map(|o| o.cloud.len()).sum();
    if total < target {
        return param(format!("patches produced {total} points, fewer than the {target} requested"));
    }
    let (cloud, provenance) = merge_and_consolidate_traced(&outputs, target)?;
    if degenerate > 0 {
        log::warn!("{degenerate} predicted normals had zero length");
    }
    Ok(Upsampled { cloud, provenance, patch_members, degenerate_normals: degenerate })
}
