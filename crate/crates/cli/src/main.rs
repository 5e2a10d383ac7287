use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use normup::checkpoint::Checkpoint;
use normup::cloud::{format_xyzn, read_ply, read_xyzn, write_atomic, PointCloud};
use normup::geometry::{default_patch_count, extract_patches, nonuniform_downsample};
use normup::gradcheck::{run_suite, FD_TOLERANCE};
use normup::inference::upsample_cloud_traced;
use normup::metrics::{deviation_export, EvalReport};
use normup::network::{NetConfig, Network};
use normup::synth::{self, Shape};
use normup::trainer::{history_csv, train_from, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "normup", version, about = "Point cloud upsampling with normal estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample points with analytic normals from a synthetic surface.
    Synth {
        /// sphere, plane, torus or cube
        shape: Shape,
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output XYZN file (standard output if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Non-uniformly thin a cloud to `m` points.
    Downsample {
        input: PathBuf,
        m: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every .xyzn/.xyz/.ply file of a directory.
    Train {
        data_dir: PathBuf,
        /// key=value training configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write (also written every `checkpoint_every` epochs)
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch loss history as CSV
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        up_ratio: Option<usize>,
        /// Number of input points per training patch
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Write a randomly initialized checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        up_ratio: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Upsample a cloud with a trained checkpoint.
    Upsample {
        input: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        patch_size: Option<usize>,
        /// Must match the checkpoint; given only as a guard
        #[arg(long)]
        up_ratio: Option<usize>,
    },
    /// Compare a prediction with ground truth (key=value report).
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Report file (standard output if omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the prediction with a per-point deviation column
        #[arg(long)]
        deviation: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and of the network.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        log::info!("no --seed given, using {s}");
        s
    })
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let cloud = if is_ply { read_ply(path) } else { read_xyzn(path) };
    cloud.with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path, patch_points: usize) -> Result<Vec<PointCloud>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["xyzn", "xyz", "ply"].contains(&e.to_ascii_lowercase().as_str()))
    });
    files.sort();
    let mut patches = Vec::new();
    for f in &files {
        let cloud = read_cloud(f)?;
        if cloud.len() == patch_points {
            patches.push(cloud);
        } else if cloud.len() > patch_points {
            let set = extract_patches(&cloud, patch_points, default_patch_count(cloud.len(), patch_points))?;
            log::info!("{}: {} points split into {} patches", f.display(), cloud.len(), set.patches.len());
            patches.extend(set.patches.iter().map(|p| cloud.select(&p.members)));
        } else {
            bail!("{}: {} points, training patches need {patch_points}", f.display(), cloud.len());
        }
    }
    if patches.is_empty() {
        bail!("no point cloud files in {}", dir.display());
    }
    Ok(patches)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    history: Option<&Path>,
    seed: Option<u64>,
    k: Option<usize>,
    up_ratio: Option<usize>,
    patch_size: Option<usize>,
) -> Result<()> {
    let text = match config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::parse(&text).context("parsing training configuration")?;
    let seeded_in_file = text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("rng_seed"));
    cfg.rng_seed = match seed {
        Some(s) => s,
        None if seeded_in_file => cfg.rng_seed,
        None => seed_or_random(None),
    };
    cfg.k = k.unwrap_or(cfg.k);
    cfg.up_ratio = up_ratio.unwrap_or(cfg.up_ratio);
    cfg.input_size = patch_size.unwrap_or(cfg.input_size);
    cfg.validate()?;

    let data = load_dataset(data_dir, cfg.input_size * cfg.up_ratio)?;
    let state = match resume {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.into_state(),
        None => TrainState::fresh(&cfg)?,
    };
    log::info!("training on {} patches for {} epochs (seed {})", data.len(), cfg.epochs, cfg.rng_seed);
    let state = train_from(state, &data, &cfg, |s| {
        log::info!("epoch {}: total loss {:.6e}", s.epochs_done, s.history.last().map_or(f64::NAN, |r| r.total));
        Checkpoint::from_state(s).save(out)
    })?;
    if state.history.is_empty() {
        Checkpoint::from_state(&state).save(out)?;
    }
    if let Some(h) = history {
        write_atomic(h, history_csv(&state.history).as_bytes())?;
    }
    if let Some(last) = state.history.last() {
        println!("{}", last.to_kv().trim_end());
    }
    Ok(())
}

fn net_config(k: Option<usize>, up_ratio: Option<usize>, patch_size: Option<usize>) -> NetConfig {
    let d = NetConfig::default();
    NetConfig {
        k: k.unwrap_or(d.k),
        up_ratio: up_ratio.unwrap_or(d.up_ratio),
        patch_size: patch_size.unwrap_or(d.patch_size),
        ..d
    }
}

fn cmd_upsample(
    input: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    patch_size: Option<usize>,
    up_ratio: Option<usize>,
) -> Result<()> {
    let cloud = read_cloud(input)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (mut config, params) = ck.network.into_parts();
    if let Some(r) = up_ratio {
        if r != config.up_ratio {
            bail!("--up-ratio {r} does not match the checkpoint's {}", config.up_ratio);
        }
    }
    config.patch_size = patch_size.unwrap_or(config.patch_size);
    let net = Network::new(config, params)?;
    let up = upsample_cloud_traced(&cloud, &net)?;
    if up.degenerate_normals > 0 {
        log::warn!("{} predicted normals were degenerate and replaced", up.degenerate_normals);
    }
    log::info!("{} points -> {} points from {} patches", cloud.len(), up.cloud.len(), up.patch_members.len());
    emit(out, &format_xyzn(&up.cloud, None))
}

fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>, deviation: Option<&Path>) -> Result<()> {
    let p = read_cloud(pred)?;
    let g = read_cloud(gt)?;
    let report = EvalReport::compute(&p, &g)?;
    if let Some(d) = deviation {
        deviation_export(&p, &g, d)?;
    }
    emit(out, &report.to_kv())
}

fn cmd_gradcheck(seed: Option<u64>) -> Result<bool> {
    let seed = seed_or_random(seed);
    let cases = run_suite(seed)?;
    let mut ok = true;
    for c in &cases {
        if !c.passed() {
            ok = false;
            eprintln!(
                "FAIL {} instance {} ({} points): deviation {:.3e}, checked {}, skipped {}",
                c.name, c.instance, c.points, c.report.max_deviation, c.report.checked, c.report.skipped
            );
        }
    }
    let worst = cases.iter().map(|c| c.report.max_deviation).fold(0.0, f64::max);
    println!("cases={}", cases.len());
    println!("failed={}", cases.iter().filter(|c| !c.passed()).count());
    println!("max_deviation={worst:e}");
    println!("tolerance={FD_TOLERANCE:e}");
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { shape, n, seed, out } => {
            if n < 8 {
                bail!("synth needs n >= 8, got {n}");
            }
            let cloud = synth::sample(shape, n, seed_or_random(seed))?;
            emit(out.as_deref(), &format_xyzn(&cloud, None))?;
        }
        Command::Downsample { input, m, seed, out } => {
            let cloud = read_cloud(&input)?;
            let thin = nonuniform_downsample(&cloud, m, seed_or_random(seed))?;
            emit(out.as_deref(), &format_xyzn(&thin, None))?;
        }
        Command::Train { data_dir, config, out, resume, history, seed, k, up_ratio, patch_size } => {
            cmd_train(
                &data_dir,
                config.as_deref(),
                &out,
                resume.as_deref(),
                history.as_deref(),
                seed,
                k,
                up_ratio,
                patch_size,
            )?;
        }
        Command::Init { out, seed, k, up_ratio, patch_size } => {
            let net = Network::init(net_config(k, up_ratio, patch_size), seed_or_random(seed))?;
            Checkpoint::from_network(net).save(&out)?;
        }
        Command::Upsample { input, checkpoint, out, patch_size, up_ratio } => {
            cmd_upsample(&input, &checkpoint, out.as_deref(), patch_size, up_ratio)?;
        }
        Command::Eval { pred, gt, out, deviation } => cmd_eval(&pred, &gt, out.as_deref(), deviation.as_deref())?,
        Command::Gradcheck { seed } => return cmd_gradcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
