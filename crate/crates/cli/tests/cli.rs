use std::path::Path;
use std::process::{Command, Output};

fn normup(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normup")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = normup(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn kv(text: &str) -> Vec<(String, f64)> {
    text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.parse().unwrap())).collect()
}

#[test]
fn synth_sphere_is_on_the_unit_sphere() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "sphere", "1000", "--seed", "4", "--out", "s.xyzn"], dir.path());
    let r = rows(&dir.path().join("s.xyzn"));
    assert_eq!(r.len(), 1000);
    for row in r {
        let len = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        assert!((len - 1.0).abs() <= 1e-9);
        assert_eq!(row[..3], row[3..6]);
    }
}

#[test]
fn synth_plane_and_torus_normals() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "plane", "200", "--seed", "1", "--out", "p.xyzn"], dir.path());
    for row in rows(&dir.path().join("p.xyzn")) {
        assert_eq!(row[3..6], [0.0, 0.0, 1.0]);
    }
    ok(&["synth", "torus", "500", "--seed", "1", "--out", "t.xyzn"], dir.path());
    for row in rows(&dir.path().join("t.xyzn")) {
        let (x, y, z) = (row[0], row[1], row[2]);
        let rho = (x * x + y * y).sqrt();
        let c = [x - x / rho, y - y / rho, z];
        let l = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        // positions went through 9 significant digits
        for a in 0..3 {
            assert!((row[3 + a] - c[a] / l).abs() <= 1e-7, "{row:?}");
        }
    }
}

#[test]
fn synth_is_seeded_and_logs_random_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["synth", "cube", "50", "--seed", "9"], dir.path());
    let b = ok(&["synth", "cube", "50", "--seed", "9"], dir.path());
    assert_eq!(a.stdout, b.stdout);
    let c = ok(&["synth", "cube", "50"], dir.path());
    assert!(String::from_utf8_lossy(&c.stderr).contains("using"));
}

#[test]
fn bad_input_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["synth", "blob", "100", "--out", "x.xyzn"],
        &["synth", "sphere", "100", "--bogus", "--out", "x.xyzn"],
        &["synth", "sphere", "4", "--out", "x.xyzn"],
        &["downsample", "missing.xyzn", "10", "--out", "x.xyzn"],
    ];
    for args in cases {
        let out = normup(args, dir.path());
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn synth_downsample_upsample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "sphere", "512", "--seed", "1", "--out", "s.xyzn"], d);
    ok(&["downsample", "s.xyzn", "128", "--seed", "2", "--out", "d.xyzn"], d);
    ok(&["init", "--seed", "3", "--out", "c.json"], d);
    ok(&["upsample", "d.xyzn", "c.json", "--out", "u1.xyzn"], d);
    ok(&["upsample", "d.xyzn", "c.json", "--out", "u2.xyzn"], d);
    let u = rows(&d.join("u1.xyzn"));
    assert_eq!(u.len(), 512);
    for r in &u {
        let l = (r[3] * r[3] + r[4] * r[4] + r[5] * r[5]).sqrt();
        assert!((l - 1.0).abs() <= 1e-3);
    }
    assert_eq!(std::fs::read(d.join("u1.xyzn")).unwrap(), std::fs::read(d.join("u2.xyzn")).unwrap());

    let bad = normup(&["upsample", "d.xyzn", "c.json", "--up-ratio", "8", "--out", "u3.xyzn"], d);
    assert!(!bad.status.success());
    assert!(!d.join("u3.xyzn").exists());
}

#[test]
fn eval_identical_clouds_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "torus", "300", "--seed", "5", "--out", "t.xyzn"], d);
    let out = ok(&["eval", "t.xyzn", "t.xyzn", "--deviation", "dev.xyzn"], d);
    let report = kv(&String::from_utf8_lossy(&out.stdout));
    let keys: Vec<&str> = report.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["cd", "hd", "normal_angle_deg"]);
    assert!(report.iter().all(|(_, v)| *v == 0.0));
    let dev = rows(&d.join("dev.xyzn"));
    assert_eq!(dev.len(), 300);
    assert!(dev.iter().all(|r| r.len() == 7 && r[6] == 0.0));

    ok(&["synth", "torus", "300", "--seed", "6", "--out", "t2.xyzn"], d);
    ok(&["eval", "t2.xyzn", "t.xyzn", "--out", "report.txt"], d);
    let report = kv(&std::fs::read_to_string(d.join("report.txt")).unwrap());
    assert!(report.iter().all(|(_, v)| *v > 0.0));
}

#[test]
fn train_writes_checkpoint_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("data")).unwrap();
    ok(&["synth", "sphere", "64", "--seed", "1", "--out", "data/a.xyzn"], d);
    ok(&["synth", "torus", "200", "--seed", "2", "--out", "data/b.xyzn"], d);
    std::fs::write(
        d.join("train.cfg"),
        "# tiny run\nepochs = 2\nbatch_size = 2\ninput_size = 16\nk = 4\nrng_seed = 3\nscales = 0.2:4,0.4:8\n",
    )
    .unwrap();
    let args = ["train", "data", "--config", "train.cfg", "--out", "c.json", "--history", "h.csv"];
    let out = ok(&args, d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("total="));
    let csv = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let first = std::fs::read(d.join("c.json")).unwrap();
    ok(&args, d);
    assert_eq!(first, std::fs::read(d.join("c.json")).unwrap());

    ok(&["upsample", "data/a.xyzn", "c.json", "--out", "u.xyzn"], d);
    assert_eq!(rows(&d.join("u.xyzn")).len(), 256);

    std::fs::write(d.join("bad.cfg"), "epochs = 2\nlearning_rat = 0.1\n").unwrap();
    let bad = normup(&["train", "data", "--config", "bad.cfg", "--out", "c2.json"], d);
    assert!(!bad.status.success());
    assert!(!d.join("c2.json").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--seed", "1"], dir.path());
    let report = kv(&String::from_utf8_lossy(&out.stdout));
    assert!(report.iter().any(|(k, v)| k == "failed" && *v == 0.0));
}
