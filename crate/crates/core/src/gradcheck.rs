//! Finite-difference verification of every loss and of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, finite_difference_check_until, FdReport, Tape, Tensor, Var};
use crate::cloud::{unit, PointCloud, Vec3};
use crate::error::Result;
use crate::losses::{self, record, split_rows, total_loss_on_tape, LossWeights};
use crate::network::{forward, NetConfig, Network};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Neighborhood size used on the small random instances.
pub const CHECK_K: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instance: usize,
    pub points: usize,
    pub report: FdReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_deviation <= FD_TOLERANCE
    }
}

/// A raw prediction (m x 6, normals not unit) and a ground-truth cloud.
#[derive(Debug, Clone)]
pub struct Instance {
    pub pred: Tensor,
    pub gt: PointCloud,
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if let Some(u) = unit(v) {
            return u;
        }
    }
}

pub fn random_instance(rng: &mut impl Rng, min_points: usize, max_points: usize) -> Instance {
    let m = rng.random_range(min_points..=max_points);
    let g = rng.random_range(min_points..=max_points);
    let rows: Vec<[f64; 6]> = (0..m)
        .map(|_| {
            let mut r = [0.0; 6];
            r.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            r
        })
        .collect();
    let gt_pos = (0..g)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let gt_nrm = (0..g).map(|_| random_unit(rng)).collect();
    Instance {
        pred: Tensor::from_rows(&rows).expect("rectangular"),
        gt: PointCloud::new(gt_pos, gt_nrm).expect("valid cloud"),
    }
}

type LossFn = fn(&[Vec3], &[Vec3], &PointCloud) -> Result<losses::LossGrad>;

fn loss_table() -> Vec<(&'static str, LossFn)> {
    vec![
        ("chamfer", |p, _, gt| losses::chamfer(p, gt.positions())),
        ("point_knn", |p, _, _| losses::point_knn_loss(p, CHECK_K)),
        ("normal_l2", |p, n, gt| losses::normal_l2_loss(p, n, gt.positions(), gt.normals())),
        ("normal_orth", |p, n, _| losses::normal_orth_loss(p, n, CHECK_K)),
        ("normal_knn", |p, n, _| losses::normal_knn_loss(p, n, CHECK_K)),
    ]
}

/// Checks each loss term and the weighted total on `instances` random
/// instances of 8 to 32 points.
pub fn check_losses(seed: u64, instances: usize) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..instances {
        let inst = random_instance(&mut rng, 8, 32);
        for (name, f) in loss_table() {
            let gt = inst.gt.clone();
            let report = finite_difference_check(
                move |tape: &mut Tape, x: Var| {
                    let (p, n) = split_rows(tape.value(x))?;
                    let l = f(&p, &n, &gt)?;
                    record(tape, x, &l)
                },
                &inst.pred,
                FD_STEP,
            )?;
            out.push(CaseResult { name: name.to_string(), instance: i, points: inst.pred.rows(), report });
        }
        let gt = inst.gt.clone();
        let report = finite_difference_check(
            move |tape: &mut Tape, x: Var| Ok(total_loss_on_tape(tape, x, &gt, &LossWeights::default(), CHECK_K)?.0),
            &inst.pred,
            FD_STEP,
        )?;
        out.push(CaseResult { name: "total".into(), instance: i, points: inst.pred.rows(), report });
    }
    Ok(out)
}

/// Checks d(total loss)/d(parameter) through the whole network, sampling
/// `entries_per_tensor` elements of every weight and bias.
pub fn check_network(seed: u64, instances: usize, entries_per_tensor: usize) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetConfig { k: CHECK_K, ..NetConfig::default() };
    let mut out = Vec::new();
    for i in 0..instances {
        let net = Network::init(config.clone(), rng.random())?;
        let n = rng.random_range(8..=32usize);
        let rows: Vec<[f64; 6]> = (0..n)
            .map(|_| {
                let p = random_unit(&mut rng);
                let q = random_unit(&mut rng);
                [p[0] * 0.9, p[1] * 0.9, p[2] * 0.9, q[0], q[1], q[2]]
            })
            .collect();
        let input = Tensor::from_rows(&rows)?;
        let gt = random_instance(&mut rng, config.up_ratio * n, config.up_ratio * n).gt;

        for (path, layer) in net.params().layers() {
            for bias in [false, true] {
                let point = if bias { &layer.bias } else { &layer.weight };
                let len = point.data().len();
                let want = entries_per_tensor.min(len);
                let mut nudged = input.clone();
                let mut report = FdReport { max_deviation: 0.0, checked: 0, skipped: 0 };
                // An instance whose activations sit within a step of a relu
                // kink gets its input nudged by up to 1e-3 and is retried.
                for _attempt in 0..4 {
                    // Spare candidates stand in for entries that land on a kink.
                    let candidates: Vec<usize> = (0..8 * want).map(|_| rng.random_range(0..len)).collect();
                    let (net, x_in, gt) = (&net, &nudged, &gt);
                    let r = finite_difference_check_until(
                        |tape: &mut Tape, x: Var| {
                            let mut bound = net.params().bind(tape);
                            bound.replace(path, bias, x)?;
                            let xin = tape.leaf(x_in.clone());
                            let y = forward(tape, xin, &bound, net.config())?;
                            Ok(total_loss_on_tape(tape, y, gt, &LossWeights::default(), CHECK_K)?.0)
                        },
                        point,
                        FD_STEP,
                        &candidates,
                        want,
                    )?;
                    report.max_deviation = report.max_deviation.max(r.max_deviation);
                    report.checked += r.checked;
                    report.skipped += r.skipped;
                    if report.checked > 0 {
                        break;
                    }
                    nudged.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
                }
                let name = format!("network:{path}.{}", if bias { "bias" } else { "weight" });
                out.push(CaseResult { name, instance: i, points: n, report });
            }
        }
    }
    Ok(out)
}

/// The full suite: 20 loss instances and 20 network instances.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut all = check_losses(seed, 20)?;
    all.extend(check_network(seed.wrapping_add(1), 20, 2)?);
    Ok(all)
}
