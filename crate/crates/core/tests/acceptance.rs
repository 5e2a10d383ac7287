//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use normup::cloud::{dist2, dot, unit, write_xyzn, PointCloud, Vec3};
use normup::geometry::{normalize_patch, AugmentConfig};
use normup::gradcheck::{run_suite, FD_TOLERANCE};
use normup::inference::upsample_cloud;
use normup::losses::{chamfer, emd, normal_knn_loss, normal_orth_loss, point_knn_loss, DEFAULT_K, ORTH_MIN_DIST};
use normup::metrics::{cd_metric, hd_metric};
use normup::network::{NetConfig, Network};
use normup::synth::{self, Shape};
use normup::trainer::{self, make_training_pair, pair_seed, TrainConfig, TrainState};

const OVERFIT_STEPS: usize = 1500;
const OVERFIT_POINTS: usize = 512;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let pos: Vec<Vec3> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let nrm = (0..n)
        .map(|_| loop {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if let Some(u) = unit(v) {
                break u;
            }
        })
        .collect();
    PointCloud::new(pos, nrm).unwrap()
}

// brute-force oracles, written without the library's neighbor search

fn oracle_nearest(x: Vec3, set: &[Vec3]) -> (usize, f64) {
    let mut all: Vec<(usize, f64)> = set.iter().enumerate().map(|(j, y)| (j, dist2(x, *y))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all[0]
}

fn oracle_knn(p: &[Vec3], i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = (0..p.len()).filter(|&j| j != i).map(|j| (j, dist2(p[i], p[j]))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|a| a.0).collect()
}

fn oracle_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().map(|x| oracle_nearest(*x, b).1).sum::<f64>() + b.iter().map(|y| oracle_nearest(*y, a).1).sum::<f64>()
}

fn oracle_point_knn(p: &[Vec3], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in oracle_knn(p, i, k) {
            s += dist2(p[i], p[j]);
        }
    }
    s / p.len() as f64
}

fn oracle_normal_orth(p: &[Vec3], n: &[Vec3], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let v = unit(n[i]).unwrap();
        for j in oracle_knn(p, i, k) {
            let d = [p[i][0] - p[j][0], p[i][1] - p[j][1], p[i][2] - p[j][2]];
            let len = dot(d, d).sqrt();
            if len < ORTH_MIN_DIST {
                continue;
            }
            let c = dot(d, v) / len;
            s += c * c;
        }
    }
    s / (p.len() * k) as f64
}

fn oracle_normal_knn(p: &[Vec3], n: &[Vec3], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        for j in oracle_knn(p, i, k) {
            s += dist2(n[i], n[j]);
        }
    }
    s / p.len() as f64
}

fn oracle_cd(a: &[Vec3], b: &[Vec3]) -> f64 {
    let ab = a.iter().map(|x| oracle_nearest(*x, b).1).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|y| oracle_nearest(*y, a).1).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

fn oracle_hd(a: &[Vec3], b: &[Vec3]) -> f64 {
    let ab = a.iter().map(|x| oracle_nearest(*x, b).1).fold(0.0, f64::max);
    let ba = b.iter().map(|y| oracle_nearest(*y, a).1).fold(0.0, f64::max);
    ab.max(ba).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

fn oracle_emd(a: &[Vec3], b: &[Vec3]) -> f64 {
    permutations(a.len())
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| dist2(a[i], b[j]).sqrt()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let cases = run_suite(2024).expect("gradcheck suite runs");
    let elapsed = t.elapsed();
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
    let worst = cases.iter().map(|c| c.report.max_deviation).fold(0.0, f64::max);
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{} cases, {} failed, worst deviation {worst:.2e} (tol {FD_TOLERANCE:e}), {:.1}s (limit 120s)",
        cases.len(),
        failed.len(),
        elapsed.as_secs_f64()
    );
    if let Some(c) = failed.first() {
        detail.push_str(&format!("; first failure {} instance {}", c.name, c.instance));
    }
    report("gradient correctness", pass, detail)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    let mut track = |name: &'static str, got: f64, want: f64| {
        let d = (got - want).abs();
        if d > worst {
            worst = d;
            worst_name = name;
        }
    };
    for _ in 0..20 {
        let n = rng.random_range(16..=256);
        let m = rng.random_range(16..=256);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, m);
        let (p, q) = (a.positions(), b.positions());
        let k = rng.random_range(1..=DEFAULT_K);
        track("chamfer", chamfer(p, q).unwrap().value, oracle_chamfer(p, q));
        track("point_knn", point_knn_loss(p, k).unwrap().value, oracle_point_knn(p, k));
        track("normal_orth", normal_orth_loss(p, a.normals(), k).unwrap().value, oracle_normal_orth(p, a.normals(), k));
        track("normal_knn", normal_knn_loss(p, a.normals(), k).unwrap().value, oracle_normal_knn(p, a.normals(), k));
        track("cd_metric", cd_metric(p, q).unwrap(), oracle_cd(p, q));
        track("hd_metric", hd_metric(p, q).unwrap(), oracle_hd(p, q));
    }
    for _ in 0..40 {
        let n = rng.random_range(1..=6);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, n);
        track("emd", emd(a.positions(), b.positions()).unwrap(), oracle_emd(a.positions(), b.positions()));
    }
    let pass = worst <= 1e-12;
    report(
        "oracle equivalence",
        pass,
        format!(
            "worst |lib - oracle| = {worst:.2e} ({}) (tol 1e-12)",
            if worst_name.is_empty() { "-" } else { worst_name }
        ),
    )
}

fn overfit_config(w2: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: 1,
        augment: AugmentConfig::identity(),
        fixed_pairs: true,
        ..TrainConfig::default()
    };
    cfg.weights.w2 = w2;
    cfg
}

struct OverfitRun {
    state: TrainState,
    elapsed: Duration,
    angle: f64,
    point_knn: f64,
}

fn overfit_run(gt: &PointCloud, w2: f64) -> OverfitRun {
    let cfg = overfit_config(w2);
    let t = Instant::now();
    let state = trainer::train(std::slice::from_ref(gt), &cfg).expect("training runs");
    let elapsed = t.elapsed();

    // the training input is fixed, so evaluate on it
    let (input, _) = make_training_pair(gt, &cfg, pair_seed(&cfg, 0, 0)).unwrap();
    let (pred, _) = state.network.predict(&input).unwrap();
    let frame = normalize_patch(gt);
    let angles: Vec<f64> = pred
        .positions()
        .iter()
        .zip(pred.normals())
        .map(|(p, n)| {
            let world = [
                p[0] * frame.scale + frame.centroid[0],
                p[1] * frame.scale + frame.centroid[1],
                p[2] * frame.scale + frame.centroid[2],
            ];
            let analytic = unit(world).expect("point off the sphere center");
            dot(analytic, *n).clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();
    let angle = angles.iter().sum::<f64>() / angles.len() as f64;
    let point_knn = point_knn_loss(pred.positions(), cfg.k).unwrap().value;
    OverfitRun { state, elapsed, angle, point_knn }
}

fn overfit_convergence(run: &OverfitRun) -> Outcome {
    let h = &run.state.history;
    let first = h[0].total;
    let last = h[h.len() - 1].total;
    let drop = 1.0 - last / first;
    let head = h[..10].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let tail = h[h.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    let secs = run.elapsed.as_secs_f64();
    let pass = drop >= 0.9 && run.angle <= 20.0 && secs < 600.0 && tail < head && h.len() <= 2000;
    report(
        "overfit convergence",
        pass,
        format!(
            "{} steps, loss {first:.4e} -> {last:.4e} (drop {:.1}%, need >= 90%), mean normal angle {:.2} deg (need <= 20), {secs:.1}s (limit 600s)",
            h.len(),
            drop * 100.0,
            run.angle
        ),
    )
}

fn uniformity(with: &OverfitRun, without: &OverfitRun) -> Outcome {
    let pass = with.point_knn < without.point_knn;
    report(
        "uniformity",
        pass,
        format!("point_knn with w2>0: {:.6}, with w2=0: {:.6}", with.point_knn, without.point_knn),
    )
}

fn pipeline_contracts(trained: &Network) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    let mut sizes = Vec::new();
    let cases = [(Shape::Sphere, 128usize), (Shape::Torus, 300), (Shape::Cube, 700)];
    for (i, &(shape, n)) in cases.iter().enumerate() {
        let cloud = synth::sample(shape, n, 100 + i as u64).unwrap();
        let mut bytes = Vec::new();
        for run in 0..2 {
            let net = if i == 0 { trained.clone() } else { Network::init(NetConfig::default(), 5 + i as u64).unwrap() };
            let out = upsample_cloud(&cloud, &net).unwrap();
            if out.len() != 4 * n {
                problems.push(format!("{shape:?}: {} points for n={n}", out.len()));
            }
            if let Some(bad) = out.normals().iter().map(|v| dot(*v, *v).sqrt()).find(|l| (l - 1.0).abs() > 1e-3) {
                problems.push(format!("{shape:?}: normal length {bad}"));
            }
            let path = dir.path().join(format!("out{i}_{run}.xyzn"));
            write_xyzn(&path, &out).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        if bytes[0] != bytes[1] {
            problems.push(format!("{shape:?}: output differs between runs"));
        }
        sizes.push(format!("{n}->{}", 4 * n));
    }
    let pass = problems.is_empty();
    let detail = if pass {
        format!("sizes {}, unit normals, identical files across runs", sizes.join(", "))
    } else {
        problems.join("; ")
    };
    report("pipeline contracts", pass, detail)
}

fn scale_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = 2.0;
    let mut worst_sq: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(8..=64);
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, n);
        let up = |c: &PointCloud| c.positions().iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect::<Vec<_>>();
        let (pa, pb) = (up(&a), up(&b));
        let c0 = chamfer(a.positions(), b.positions()).unwrap().value;
        let c1 = chamfer(&pa, &pb).unwrap().value;
        let k0 = point_knn_loss(a.positions(), 6).unwrap().value;
        let k1 = point_knn_loss(&pa, 6).unwrap().value;
        let e0 = emd(&a.positions()[..n.min(24)], &b.positions()[..n.min(24)]).unwrap();
        let e1 = emd(&pa[..n.min(24)], &pb[..n.min(24)]).unwrap();
        let o0 = normal_orth_loss(a.positions(), a.normals(), 6).unwrap().value;
        let o1 = normal_orth_loss(&pa, a.normals(), 6).unwrap().value;
        worst_sq = worst_sq.max((c1 - s * s * c0).abs()).max((k1 - s * s * k0).abs()).max((e1 - s * e0).abs());
        worst_orth = worst_orth.max((o1 - o0).abs());
    }
    let pass = worst_sq <= 1e-9 && worst_orth <= 1e-12;
    report(
        "loss scale laws",
        pass,
        format!("s=2: worst chamfer/point_knn/emd deviation {worst_sq:.2e} (tol 1e-9), normal_orth change {worst_orth:.2e} (tol 1e-12)"),
    )
}

fn metric_axioms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let a = random_cloud(&mut rng, n);
        let b = random_cloud(&mut rng, m);
        let (p, q) = (a.positions(), b.positions());
        for f in [cd_metric, hd_metric] {
            let ab = f(p, q).unwrap();
            let ba = f(q, p).unwrap();
            if ab != ba || ab < 0.0 || f(p, p).unwrap() != 0.0 || f(q, q).unwrap() != 0.0 {
                violations += 1;
            }
        }
    }
    report(
        "metric axioms",
        violations == 0,
        format!("100 instances, {violations} violations of symmetry/non-negativity/identity"),
    )
}

fn main() -> ExitCode {
    // libtest-style flags are accepted and ignored
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut outcomes = vec![gradient_correctness(), oracle_equivalence()];

    let gt = synth::sample(Shape::Sphere, OVERFIT_POINTS, 7).unwrap();
    let with = overfit_run(&gt, TrainConfig::default().weights.w2);
    outcomes.push(overfit_convergence(&with));
    let without = overfit_run(&gt, 0.0);
    outcomes.push(uniformity(&with, &without));

    outcomes.push(pipeline_contracts(&with.state.network));
    outcomes.push(scale_laws());
    outcomes.push(metric_axioms());

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            eprintln!("failed: {} ({})", o.name, o.detail);
        }
        ExitCode::FAILURE
    }
}
