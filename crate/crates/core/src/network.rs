//! The upsampling network: multi-scale local features, global features,
//! concatenation, repeated x2 feature reshaping with shared MLPs, and a
//! final linear regression to `x y z nx ny nz` rows.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cloud::{PointCloud, Vec3};
use crate::error::{param, Error, Result};
use crate::geometry::ball_query;

pub const INPUT_WIDTH: usize = 6;
pub const LOCAL_WIDTH: usize = 128;
pub const GLOBAL_WIDTH: usize = 512;

const LOCAL_MLP: [usize; 3] = [32, 64, 128];
const GLOBAL_MLP: [usize; 6] = [32, 64, 64, 128, 256, 512];
const EXPAND_MLP: [usize; 3] = [512, 256, 128];

/// One grouping scale: ball radius (in normalized patch units) and group width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScale {
    pub radius: f64,
    pub max_samples: usize,
}

/// Grouping scales written as `radius:max_samples` pairs separated by commas.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScaleList(pub Vec<GroupScale>);

impl GroupScaleList {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        text.split(',')
            .map(|item| {
                let (r, s) = item.trim().split_once(':').ok_or_else(|| format!("`{item}` is not radius:samples"))?;
                let radius = r.trim().parse().map_err(|e| format!("radius `{r}`: {e}"))?;
                let max_samples = s.trim().parse().map_err(|e| format!("samples `{s}`: {e}"))?;
                Ok(GroupScale { radius, max_samples })
            })
            .collect::<std::result::Result<Vec<_>, String>>()
            .map(Self)
    }
}

impl std::fmt::Display for GroupScaleList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| format!("{}:{}", s.radius, s.max_samples)).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub up_ratio: usize,
    pub scales: Vec<GroupScale>,
    /// Neighborhood size of the kNN loss terms.
    pub k: usize,
    /// Points per patch fed to the network.
    pub patch_size: usize,
}

impl Default for NetConfig {
    /// Desk-scale setup: 128-point patches, smaller groups.
    fn default() -> Self {
        Self { up_ratio: 4, scales: Self::radii_with(&[8, 8, 16, 16]), k: 15, patch_size: 128 }
    }
}

impl NetConfig {
    /// The full-size setup: 1024-point input patches.
    pub fn full() -> Self {
        Self { scales: Self::radii_with(&[8, 16, 32, 32]), patch_size: 1024, ..Self::default() }
    }

    fn radii_with(samples: &[usize; 4]) -> Vec<GroupScale> {
        [0.05, 0.1, 0.2, 0.3]
            .iter()
            .zip(samples)
            .map(|(&radius, &max_samples)| GroupScale { radius, max_samples })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.up_ratio < 2 || !self.up_ratio.is_power_of_two() || !LOCAL_WIDTH.is_multiple_of(self.up_ratio) {
            return param(format!("up_ratio {} must be a power of two between 2 and {LOCAL_WIDTH}", self.up_ratio));
        }
        if self.scales.is_empty() {
            return param("at least one grouping scale is required");
        }
        for s in &self.scales {
            if !(s.radius > 0.0 && s.radius.is_finite()) || s.max_samples == 0 {
                return param(format!("invalid grouping scale {s:?}"));
            }
        }
        if self.k == 0 || self.patch_size == 0 {
            return param("k and patch_size must be positive");
        }
        Ok(())
    }

    /// Number of x2 reshaping stages.
    pub fn stages(&self) -> usize {
        self.up_ratio.trailing_zeros() as usize
    }

    /// Every layer as (path, fan_in, fan_out), in forward order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut chain = |prefix: &str, mut width: usize, sizes: &[usize]| {
            for (i, &next) in sizes.iter().enumerate() {
                out.push((format!("{prefix}.l{i}"), width, next));
                width = next;
            }
        };
        for j in 0..self.scales.len() {
            chain(&format!("local.s{j}"), INPUT_WIDTH + 3, &LOCAL_MLP);
        }
        chain("local.proj", LOCAL_MLP[2] * self.scales.len(), &[LOCAL_WIDTH]);
        chain("global", INPUT_WIDTH, &GLOBAL_MLP);
        chain("expand", INPUT_WIDTH + LOCAL_WIDTH + GLOBAL_WIDTH, &EXPAND_MLP);
        let mut width = EXPAND_MLP[2];
        let stages = self.stages();
        for s in 1..=stages {
            width /= 2;
            let out_w = if s == stages { INPUT_WIDTH } else { width / 2 };
            chain(&format!("stage{s}"), width, &[width, out_w]);
            width = out_w;
        }
        out
    }

    /// Path of the final (linear) regression layer.
    fn output_layer(&self) -> String {
        format!("stage{}.l1", self.stages())
    }
}

/// Weight (fan_in x fan_out) and bias (1 x fan_out) of one shared layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All layers keyed by path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    layers: BTreeMap<String, Layer>,
}

impl NetworkParams {
    pub fn from_layers(layers: BTreeMap<String, Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &BTreeMap<String, Layer> {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = (&String, &mut Layer)> {
        self.layers.iter_mut()
    }

    pub fn get(&self, path: &str) -> Option<&Layer> {
        self.layers.get(path)
    }

    pub fn num_values(&self) -> usize {
        self.layers.values().map(|l| l.weight.data().len() + l.bias.data().len()).sum()
    }

    /// Checks that the layers match `config` exactly.
    pub fn validate(&self, config: &NetConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.layers.len() {
            return param(format!("expected {} layers, found {}", layout.len(), self.layers.len()));
        }
        for (path, fan_in, fan_out) in layout {
            let layer = self.layers.get(&path).ok_or_else(|| Error::Param(format!("missing layer {path}")))?;
            if layer.weight.shape() != (fan_in, fan_out) || layer.bias.shape() != (1, fan_out) {
                return Err(Error::Shape {
                    op: "NetworkParams::validate",
                    detail: format!(
                        "{path}: weight {:?}, bias {:?}, expected ({fan_in}, {fan_out})",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Uniform weights in +-sqrt(6 / fan_in), zero biases.
    pub fn init(config: &NetConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut layers = BTreeMap::new();
        for (path, fan_in, fan_out) in config.layout() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            layers.insert(path, Layer { weight: Tensor::new(fan_in, fan_out, w)?, bias: Tensor::zeros(1, fan_out) });
        }
        Ok(Self { layers })
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|(k, l)| (k.clone(), (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles of every weight and bias.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, (Var, Var)>,
}

impl BoundParams {
    fn layer(&self, path: &str) -> Result<(Var, Var)> {
        self.vars.get(path).copied().ok_or_else(|| Error::Param(format!("unbound layer {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Var, Var))> {
        self.vars.iter()
    }

    pub fn get(&self, path: &str) -> Option<(Var, Var)> {
        self.vars.get(path).copied()
    }

    /// Swaps one layer's weight or bias handle, e.g. for gradient checks.
    pub fn replace(&mut self, path: &str, bias: bool, var: Var) -> Result<()> {
        let slot = self.vars.get_mut(path).ok_or_else(|| Error::Param(format!("unknown layer {path}")))?;
        let old = if bias { slot.1 } else { slot.0 };
        if old.shape() != var.shape() {
            return Err(Error::Shape {
                op: "BoundParams::replace",
                detail: format!("{:?} vs {:?}", old.shape(), var.shape()),
            });
        }
        if bias {
            slot.1 = var;
        } else {
            slot.0 = var;
        }
        Ok(())
    }
}

fn dense(tape: &mut Tape, x: Var, (w, b): (Var, Var), relu: bool) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, b)?;
    Ok(if relu { tape.relu(y) } else { y })
}

// relu everywhere except the very last regression layer
fn chain(tape: &mut Tape, mut x: Var, bound: &BoundParams, prefix: &str, len: usize, linear_last: bool) -> Result<Var> {
    for i in 0..len {
        let relu = !(linear_last && i + 1 == len);
        x = dense(tape, x, bound.layer(&format!("{prefix}.l{i}"))?, relu)?;
    }
    Ok(x)
}

fn check_input(input: Var) -> Result<()> {
    if input.cols() != INPUT_WIDTH || input.rows() == 0 {
        return Err(Error::Shape {
            op: "network input",
            detail: format!("{:?}, expected n x 6 with n >= 1", input.shape()),
        });
    }
    Ok(())
}

fn positions_of(t: &Tensor) -> Vec<Vec3> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect()
}

/// Per-point shared MLP followed by a max over all points: 1 x 512.
pub fn global_features(tape: &mut Tape, input: Var, bound: &BoundParams) -> Result<Var> {
    check_input(input)?;
    let x = chain(tape, input, bound, "global", GLOBAL_MLP.len(), false)?;
    tape.max_over_groups(x, input.rows())
}

/// Multi-scale grouped features around every input point: n x 128.
pub fn local_features(tape: &mut Tape, input: Var, bound: &BoundParams, config: &NetConfig) -> Result<Var> {
    check_input(input)?;
    let n = input.rows();
    let positions = positions_of(tape.value(input));
    let pos = tape.slice_cols(input, 0, 3)?;
    let mut per_scale = Vec::with_capacity(config.scales.len());
    for (j, scale) in config.scales.iter().enumerate() {
        let groups = ball_query(&positions, &positions, scale.radius, scale.max_samples)?;
        let centers: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, scale.max_samples)).collect();
        let feats = tape.gather_rows(input, &groups.indices)?;
        let nbr_pos = tape.gather_rows(pos, &groups.indices)?;
        let ctr_pos = tape.gather_rows(pos, &centers)?;
        let rel = tape.sub(nbr_pos, ctr_pos)?;
        let x = tape.concat_cols(&[feats, rel])?;
        let x = chain(tape, x, bound, &format!("local.s{j}"), LOCAL_MLP.len(), false)?;
        per_scale.push(tape.max_over_groups(x, scale.max_samples)?);
    }
    let joined = tape.concat_cols(&per_scale)?;
    dense(tape, joined, bound.layer("local.proj.l0")?, true)
}

/// Full forward pass: n x 6 in, (up_ratio * n) x 6 out. Columns 0..3 are
/// positions, 3..6 unnormalized normals. Output rows
/// `r * up_ratio .. (r + 1) * up_ratio` descend from input row `r`.
pub fn forward(tape: &mut Tape, input: Var, bound: &BoundParams, config: &NetConfig) -> Result<Var> {
    check_input(input)?;
    let n = input.rows();
    let local = local_features(tape, input, bound, config)?;
    let global = global_features(tape, input, bound)?;
    let global = tape.gather_rows(global, &vec![0; n])?;
    let x = tape.concat_cols(&[input, local, global])?;
    let mut x = chain(tape, x, bound, "expand", EXPAND_MLP.len(), false)?;
    let stages = config.stages();
    for s in 1..=stages {
        x = tape.reshape_rows(x, 2)?;
        x = chain(tape, x, bound, &format!("stage{s}"), 2, s == stages)?;
    }
    debug_assert_eq!(config.output_layer(), format!("stage{stages}.l1"));
    Ok(x)
}

/// A validated configuration and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: NetworkParams,
}

impl Network {
    pub fn new(config: NetConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: NetConfig, rng_seed: u64) -> Result<Self> {
        let params = NetworkParams::init(&config, rng_seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetConfig, NetworkParams) {
        (self.config, self.params)
    }

    /// Forward pass outside of any training tape.
    pub fn run(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = forward(&mut tape, x, &bound, &self.config)?;
        Ok(tape.value(y).clone())
    }

    /// Upsamples a (normalized) patch and renormalizes the predicted normals.
    pub fn predict(&self, patch: &PointCloud) -> Result<(PointCloud, usize)> {
        predict_normalized(&self.run(&input_tensor(patch))?)
    }
}

/// `x y z nx ny nz` rows of a cloud.
pub fn input_tensor(cloud: &PointCloud) -> Tensor {
    let data = cloud.to_rows().into_iter().flatten().collect();
    Tensor::new(cloud.len(), INPUT_WIDTH, data).expect("six values per point")
}

/// Converts raw network output into a cloud with unit normals. Zero-length
/// normals become `(0, 0, 1)`; their count is returned.
pub fn predict_normalized(output: &Tensor) -> Result<(PointCloud, usize)> {
    let (pos, nrm) = crate::losses::split_rows(output)?;
    PointCloud::with_renormalized(pos, nrm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_input(n: usize) -> Tensor {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let t = golden * i as f64;
                let p = [r * t.cos(), y, r * t.sin()];
                vec![p[0], p[1], p[2], p[0], p[1], p[2]]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn layout_matches_architecture() {
        let cfg = NetConfig::default();
        let layout = cfg.layout();
        let find = |p: &str| layout.iter().find(|l| l.0 == p).map(|l| (l.1, l.2)).unwrap();
        assert_eq!(find("global.l5"), (256, 512));
        assert_eq!(find("expand.l0"), (646, 512));
        assert_eq!(find("expand.l2"), (256, 128));
        assert_eq!(find("stage1.l0"), (64, 64));
        assert_eq!(find("stage1.l1"), (64, 32));
        assert_eq!(find("stage2.l0"), (16, 16));
        assert_eq!(find("stage2.l1"), (16, 6));
        assert_eq!(find("local.s3.l2"), (64, 128));
        assert_eq!(find("local.proj.l0"), (512, 128));
    }

    #[test]
    fn other_up_ratios_chain() {
        for r in [2, 8] {
            let cfg = NetConfig { up_ratio: r, ..NetConfig::default() };
            let net = Network::init(cfg, 1).unwrap();
            let out = net.run(&sphere_input(10)).unwrap();
            assert_eq!(out.shape(), (10 * r, 6));
        }
        assert!(NetConfig { up_ratio: 3, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { up_ratio: 1, ..NetConfig::default() }.validate().is_err());
    }

    #[test]
    fn output_shape_and_init_scale() {
        let net = Network::init(NetConfig::default(), 3).unwrap();
        let out = net.run(&sphere_input(64)).unwrap();
        assert_eq!(out.shape(), (256, 6));
        assert!(out.data().iter().all(|v| v.is_finite() && v.abs() < 10.0));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = NetConfig::default();
        let a = NetworkParams::init(&cfg, 5).unwrap();
        assert_eq!(a, NetworkParams::init(&cfg, 5).unwrap());
        let b = NetworkParams::init(&cfg, 6).unwrap();
        assert_ne!(a.get("global.l0").unwrap().weight, b.get("global.l0").unwrap().weight);
        assert!(a.layers().values().all(|l| l.bias.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn rejects_mismatched_params() {
        let cfg = NetConfig::default();
        let mut params = NetworkParams::init(&cfg, 1).unwrap();
        params.layers.get_mut("expand.l1").unwrap().bias = Tensor::zeros(1, 3);
        assert!(Network::new(cfg.clone(), params).is_err());
        let mut params = NetworkParams::init(&cfg, 1).unwrap();
        params.layers.remove("global.l2");
        assert!(Network::new(cfg, params).is_err());
    }

    #[test]
    fn global_features_single_row_and_duplicates() {
        let net = Network::init(NetConfig::default(), 2).unwrap();
        let input = sphere_input(12);
        let g = |t: &Tensor| {
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape);
            let x = tape.leaf(t.clone());
            let y = global_features(&mut tape, x, &bound).unwrap();
            tape.value(y).clone()
        };
        let base = g(&input);
        assert_eq!(base.shape(), (1, 512));
        let doubled: Vec<Vec<f64>> = (0..24).map(|r| input.row(r % 12).to_vec()).collect();
        assert_eq!(g(&Tensor::from_rows(&doubled).unwrap()), base);

        let one = Tensor::from_rows(&[input.row(0).to_vec()]).unwrap();
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape);
        let x = tape.leaf(one.clone());
        let pre = chain(&mut tape, x, &bound, "global", GLOBAL_MLP.len(), false).unwrap();
        let pooled = global_features(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.value(pre), tape.value(pooled));
    }

    #[test]
    fn identical_points_give_identical_local_rows() {
        let net = Network::init(NetConfig::default(), 4).unwrap();
        let input = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.0, 0.0, 1.0]; 5]).unwrap();
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape);
        let x = tape.leaf(input);
        let l = local_features(&mut tape, x, &bound, net.config()).unwrap();
        let v = tape.value(l);
        for r in 1..5 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn predict_normalized_rules() {
        let out = Tensor::from_rows(&[
            [0.0, 0.0, 0.0, 0.0, 0.0, 2.0],
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.6, 0.8, 0.0],
        ])
        .unwrap();
        let (cloud, degenerate) = predict_normalized(&out).unwrap();
        assert_eq!(degenerate, 1);
        assert_eq!(cloud.normals()[0], [0.0, 0.0, 1.0]);
        assert_eq!(cloud.normals()[1], [0.0, 0.0, 1.0]);
        let n = cloud.normals()[2];
        assert!((n[0] - 0.6).abs() < 1e-12 && (n[1] - 0.8).abs() < 1e-12);
    }
}
