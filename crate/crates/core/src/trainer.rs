//! Adam training over patch datasets with on-the-fly augmentation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::cloud::PointCloud;
use crate::error::{param, Error, Result};
use crate::geometry::{
    jitter, nonuniform_downsample_indices, normalize_patch, normalize_with, AugmentConfig, Similarity,
};
use crate::losses::{total_loss_on_tape, LossReport, LossWeights};
use crate::network::{forward, input_tensor, GroupScale, GroupScaleList, Layer, NetConfig, Network, NetworkParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub weights: LossWeights,
    pub rng_seed: u64,
    /// Points fed to the network per patch.
    pub input_size: usize,
    pub up_ratio: usize,
    pub augment: AugmentConfig,
    pub scales: Vec<GroupScale>,
    /// Reuse one downsampled/augmented pair per sample for the whole run
    /// instead of drawing a fresh one every epoch.
    pub fixed_pairs: bool,
    /// Epoch interval between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 20,
            epochs: 500,
            k: net.k,
            weights: LossWeights::default(),
            rng_seed: 0,
            input_size: net.patch_size,
            up_ratio: net.up_ratio,
            augment: AugmentConfig::default(),
            scales: net.scales,
            fixed_pairs: false,
            checkpoint_every: 0,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig { up_ratio: self.up_ratio, scales: self.scales.clone(), k: self.k, patch_size: self.input_size }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return param("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return param("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.k == 0 || self.input_size == 0 || self.up_ratio == 0 {
            return param("batch_size, k, input_size and up_ratio must be positive");
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.net_config().validate()
    }

    /// Parses flat `key=value` lines; `#` starts a comment. Unknown keys are
    /// an error. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let f = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let u = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "learning_rate" => cfg.learning_rate = f()?,
                "weight_decay" => cfg.weight_decay = f()?,
                "batch_size" => cfg.batch_size = u()?,
                "epochs" => cfg.epochs = u()?,
                "k" => cfg.k = u()?,
                "w1" => cfg.weights.w1 = f()?,
                "w2" => cfg.weights.w2 = f()?,
                "w3" => cfg.weights.w3 = f()?,
                "w4" => cfg.weights.w4 = f()?,
                "w5" => cfg.weights.w5 = f()?,
                "rng_seed" => cfg.rng_seed = value.parse().map_err(|e| err(format!("{key}: {e}")))?,
                "input_size" => cfg.input_size = u()?,
                "up_ratio" => cfg.up_ratio = u()?,
                "rotate" => {
                    cfg.augment.rotate = parse_bool(value).ok_or_else(|| err(format!("{key}: not a boolean")))?
                }
                "scale_min" => cfg.augment.scale_min = f()?,
                "scale_max" => cfg.augment.scale_max = f()?,
                "shift" => cfg.augment.shift = f()?,
                "noise_sigma" => cfg.augment.noise_sigma = f()?,
                "scales" => cfg.scales = GroupScaleList::parse(value).map_err(err)?.0,
                "fixed_pairs" => {
                    cfg.fixed_pairs = parse_bool(value).ok_or_else(|| err(format!("{key}: not a boolean")))?
                }
                "checkpoint_every" => cfg.checkpoint_every = u()?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let w = &self.weights;
        let a = &self.augment;
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "w1={}\nw2={}\nw3={}\nw4={}\nw5={}", w.w1, w.w2, w.w3, w.w4, w.w5);
        let _ = writeln!(s, "rng_seed={}", self.rng_seed);
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(s, "up_ratio={}", self.up_ratio);
        let _ = writeln!(s, "rotate={}", a.rotate);
        let _ = writeln!(s, "scale_min={}\nscale_max={}", a.scale_min, a.scale_max);
        let _ = writeln!(s, "shift={}\nnoise_sigma={}", a.shift, a.noise_sigma);
        let _ = writeln!(s, "scales={}", GroupScaleList(self.scales.clone()));
        let _ = writeln!(s, "fixed_pairs={}", self.fixed_pairs);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        s
    }
}

/// First and second moments for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub m_weight: Vec<f64>,
    pub v_weight: Vec<f64>,
    pub m_bias: Vec<f64>,
    pub v_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, LayerMoments>,
}

impl AdamState {
    pub fn for_params(params: &NetworkParams) -> Self {
        let moments = params
            .layers()
            .iter()
            .map(|(k, l)| {
                let (nw, nb) = (l.weight.data().len(), l.bias.data().len());
                (
                    k.clone(),
                    LayerMoments {
                        m_weight: vec![0.0; nw],
                        v_weight: vec![0.0; nw],
                        m_bias: vec![0.0; nb],
                        v_bias: vec![0.0; nb],
                    },
                )
            })
            .collect();
        Self { step: 0, moments }
    }

    /// Checks that every moment array is shaped like its parameter.
    pub fn validate(&self, params: &NetworkParams) -> Result<()> {
        if self.moments.len() != params.layers().len() {
            return param("optimizer state does not match the parameters");
        }
        for (k, l) in params.layers() {
            let m = self.moments.get(k).ok_or_else(|| Error::Param(format!("no optimizer state for {k}")))?;
            let (nw, nb) = (l.weight.data().len(), l.bias.data().len());
            if m.m_weight.len() != nw || m.v_weight.len() != nw || m.m_bias.len() != nb || m.v_bias.len() != nb {
                return param(format!("optimizer state for {k} has the wrong size"));
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, decay: f64, c1: f64, c2: f64) {
    for i in 0..p.len() {
        p[i] *= decay;
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam step with bias correction and decoupled weight decay
/// (`p <- p * (1 - lr * wd)` before the moment update). `grads` has the same
/// layout as `params`.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    for (path, g) in grads.layers() {
        if g.weight.data().iter().chain(g.bias.data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of layer {path}")));
        }
        match params.get(path) {
            Some(p) if p.weight.shape() == g.weight.shape() && p.bias.shape() == g.bias.shape() => {}
            _ => return param(format!("gradient layer {path} does not match the parameters")),
        }
    }
    if grads.layers().len() != params.layers().len() {
        return param("gradient is missing layers");
    }
    state.validate(params)?;

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - learning_rate * weight_decay;
    for (path, layer) in params.layers_mut() {
        let g = &grads.layers()[path];
        let m = state.moments.get_mut(path).expect("validated above");
        adam_update(
            layer.weight.data_mut(),
            g.weight.data(),
            &mut m.m_weight,
            &mut m.v_weight,
            learning_rate,
            decay,
            c1,
            c2,
        );
        adam_update(layer.bias.data_mut(), g.bias.data(), &mut m.m_bias, &mut m.v_bias, learning_rate, decay, c1, c2);
    }
    Ok(())
}

/// Builds one (input, target) pair from a ground-truth patch: a shared
/// random similarity transform, non-uniform downsampling to `input_size`,
/// noise on the input only, and normalization of both by the target's
/// centroid and radius.
pub fn make_training_pair(
    gt_patch: &PointCloud,
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<(PointCloud, PointCloud)> {
    let want = config.input_size * config.up_ratio;
    if gt_patch.len() != want {
        return param(format!("training patch has {} points, expected {want}", gt_patch.len()));
    }
    config.augment.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let sim = Similarity::draw(&mut rng, &config.augment);
    let target = sim.apply(gt_patch);
    let keep = nonuniform_downsample_indices(target.positions(), config.input_size, rng.next_u64())?;
    let input = jitter(&target.select(&keep), config.augment.noise_sigma, &mut rng);
    let norm = normalize_patch(&target);
    let input = normalize_with(&input, norm.centroid, norm.scale);
    Ok((input, norm.cloud))
}

/// Per-layer zero gradients shaped like `params`.
fn zeros_like(params: &NetworkParams) -> NetworkParams {
    NetworkParams::from_layers(
        params
            .layers()
            .iter()
            .map(|(k, l)| {
                let (wr, wc) = l.weight.shape();
                let (br, bc) = l.bias.shape();
                (k.clone(), Layer { weight: Tensor::zeros(wr, wc), bias: Tensor::zeros(br, bc) })
            })
            .collect(),
    )
}

/// Loss and parameter gradients for one (input, target) pair.
pub fn sample_gradients(
    net: &Network,
    input: &PointCloud,
    target: &PointCloud,
    weights: &LossWeights,
    k: usize,
) -> Result<(LossReport, NetworkParams)> {
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape);
    let x = tape.leaf(input_tensor(input));
    let y = forward(&mut tape, x, &bound, net.config())?;
    let (loss, report) = total_loss_on_tape(&mut tape, y, target, weights, k)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let layers =
        bound.iter().map(|(k, (w, b))| (k.clone(), Layer { weight: grads.take(*w), bias: grads.take(*b) })).collect();
    Ok((report, NetworkParams::from_layers(layers)))
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_gradients(
    net: &Network,
    pairs: &[(PointCloud, PointCloud)],
    weights: &LossWeights,
    k: usize,
) -> Result<(LossReport, NetworkParams)> {
    if pairs.is_empty() {
        return param("empty batch");
    }
    let w = 1.0 / pairs.len() as f64;
    let mut report = LossReport::default();
    let mut acc = zeros_like(net.params());
    for (input, target) in pairs {
        let (r, g) = sample_gradients(net, input, target, weights, k)?;
        report.accumulate(&r, w);
        for ((_, a), (_, s)) in acc.layers_mut().zip(g.layers()) {
            for (d, v) in a.weight.data_mut().iter_mut().zip(s.weight.data()) {
                *d += w * v;
            }
            for (d, v) in a.bias.data_mut().iter_mut().zip(s.bias.data()) {
                *d += w * v;
            }
        }
    }
    Ok((report, acc))
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub adam: AdamState,
    pub epochs_done: usize,
    /// Mean loss components per completed epoch.
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        let network = Network::init(config.net_config(), config.rng_seed)?;
        let adam = AdamState::for_params(network.params());
        Ok(Self { network, adam, epochs_done: 0, history: Vec::new() })
    }
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the three words
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the training pair drawn for dataset entry `index` in `epoch`.
pub fn pair_seed(config: &TrainConfig, epoch: usize, index: usize) -> u64 {
    let pair_epoch = if config.fixed_pairs { 0 } else { epoch as u64 + 1 };
    derive_seed(config.rng_seed, pair_epoch, index as u64)
}

fn check_dataset(dataset: &[PointCloud], config: &TrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return param("empty training set");
    }
    let want = config.input_size * config.up_ratio;
    if let Some((i, p)) = dataset.iter().enumerate().find(|(_, p)| p.len() != want) {
        return param(format!("training patch {i} has {} points, expected {want}", p.len()));
    }
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train(dataset: &[PointCloud], config: &TrainConfig) -> Result<TrainState> {
    train_from(TrainState::fresh(config)?, dataset, config, |_| Ok(()))
}

/// Continues `state` until `config.epochs` epochs are done. `on_checkpoint`
/// is called every `checkpoint_every` epochs and after the last one. A
/// non-finite loss aborts without further checkpoints.
pub fn train_from(
    mut state: TrainState,
    dataset: &[PointCloud],
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    if *state.network.config() != config.net_config() {
        return param("network configuration differs from the training configuration");
    }
    state.adam.validate(state.network.params())?;
    if state.epochs_done >= config.epochs {
        return Ok(state);
    }
    check_dataset(dataset, config)?;

    for epoch in state.epochs_done..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.rng_seed, epoch as u64, u64::MAX)));

        let mut epoch_report = LossReport::default();
        for batch in order.chunks(config.batch_size) {
            let pairs = batch
                .iter()
                .map(|&i| make_training_pair(&dataset[i], config, pair_seed(config, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let (report, grads) = batch_gradients(&state.network, &pairs, &config.weights, config.k)?;
            adam_step(state.network.params_mut(), &grads, &mut state.adam, config.learning_rate, config.weight_decay)?;
            epoch_report.accumulate(&report, batch.len() as f64 / dataset.len() as f64);
        }
        log::debug!("epoch {epoch}: total={:.6e}", epoch_report.total);
        state.history.push(epoch_report);
        state.epochs_done = epoch + 1;
        let due = config.checkpoint_every > 0 && state.epochs_done.is_multiple_of(config.checkpoint_every);
        if due || state.epochs_done == config.epochs {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Loss history as CSV, one row per epoch.
pub fn history_csv(history: &[LossReport]) -> String {
    let mut s = String::from("epoch,total,cd,point_knn,normal,normal_orth,normal_knn\n");
    for (i, r) in history.iter().enumerate() {
        let v = r.values();
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{:e},{:e}", i + 1, v[0], v[1], v[2], v[3], v[4], v[5]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> NetworkParams {
        let mut layers = BTreeMap::new();
        layers.insert(
            "a".to_string(),
            Layer { weight: Tensor::new(1, 2, vec![0.5, -1.0]).unwrap(), bias: Tensor::zeros(1, 2) },
        );
        NetworkParams::from_layers(layers)
    }

    fn grads_of(w: [f64; 2], b: [f64; 2]) -> NetworkParams {
        let mut layers = BTreeMap::new();
        layers.insert(
            "a".to_string(),
            Layer { weight: Tensor::new(1, 2, w.to_vec()).unwrap(), bias: Tensor::new(1, 2, b.to_vec()).unwrap() },
        );
        NetworkParams::from_layers(layers)
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut s = AdamState::for_params(&p);
        for _ in 0..5 {
            adam_step(&mut p, &grads_of([0.0; 2], [0.0; 2]), &mut s, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        // Scalar simulation of the same recurrence as the oracle.
        let (lr, g) = (1e-3, 0.37);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let mut last_delta = 0.0;
        for t in 1..=200 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let step = lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            x -= step;
            last_delta = step;
        }
        assert!((last_delta - lr).abs() / lr < 0.05);

        let mut p = tiny_params();
        let mut s = AdamState::for_params(&p);
        let start = p.get("a").unwrap().weight.data()[0];
        for _ in 0..200 {
            adam_step(&mut p, &grads_of([g, g], [g, g]), &mut s, lr, 0.0).unwrap();
        }
        let moved = start - p.get("a").unwrap().weight.data()[0];
        assert!((moved - (-x)).abs() < 1e-12);
        let mut q = p.clone();
        adam_step(&mut q, &grads_of([g, g], [g, g]), &mut s, lr, 0.0).unwrap();
        let delta = p.get("a").unwrap().weight.data()[0] - q.get("a").unwrap().weight.data()[0];
        assert!((delta - lr).abs() / lr < 0.05);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = tiny_params();
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &grads_of([0.0; 2], [0.0; 2]), &mut s, 0.1, 0.5).unwrap();
        assert_eq!(p.get("a").unwrap().weight.data(), &[0.5 * 0.95, -0.95]);
    }

    #[test]
    fn nan_gradient_names_layer() {
        let mut p = tiny_params();
        let mut s = AdamState::for_params(&p);
        let err = adam_step(&mut p, &grads_of([f64::NAN, 0.0], [0.0; 2]), &mut s, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("layer a"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = TrainConfig { epochs: 7, rng_seed: 99, fixed_pairs: true, ..TrainConfig::default() };
        assert_eq!(TrainConfig::parse(&cfg.to_kv()).unwrap(), cfg);
        let parsed = TrainConfig::parse("# desk run\nepochs = 3\nw2=0\n").unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.weights.w2, 0.0);
        assert!(matches!(TrainConfig::parse("epochs=3\nbogus=1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(TrainConfig::parse("learning_rate=-1\n").is_err());
    }

    #[test]
    fn history_csv_header() {
        let csv = history_csv(&[LossReport { total: 1.0, ..Default::default() }]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,total,cd,point_knn,normal,normal_orth,normal_knn");
        assert!(lines.next().unwrap().starts_with("1,1e0,"));
    }
}
