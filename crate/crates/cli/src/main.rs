use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use featmetric::align::{self, AlignConfig, AlignProblem, BasinSpec};
use featmetric::eval;
use featmetric::featurenet::{self, AdamState, ArchSpec, AutoencoderParams, TrainConfig};
use featmetric::geometry::{self, Pose};
use featmetric::raster::{self, Mask, RasterMap};
use featmetric::synth::{RenderedPair, SceneConfig};

#[derive(Parser)]
#[command(name = "featmetric", version, about = "Photometric and feature-metric direct alignment experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scene into a pair directory.
    Synth {
        /// Scene file; the bundled corridor when omitted.
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the feature autoencoder on the images of a pair directory.
    TrainFeatures {
        #[arg(long)]
        data: PathBuf,
        /// Architecture as comma-separated `F=<features>`, `S=<scales>`, `C=<channels>`.
        #[arg(long, default_value = "F=16")]
        arch: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1e-3)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-3)]
        beta: f64,
        /// Continue from this checkpoint (parameters and optimizer state).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for `featurenet.ckpt` and `loss_history.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recover pose and/or depth for a pair.
    Align {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Photo)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Solve::Pose)]
        solve: Solve,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Pose initialization: ground truth perturbed along a seeded random
        /// axis and direction by these amounts.
        #[arg(long, default_value_t = 2.0)]
        perturb_deg: f64,
        /// Translation perturbation as a fraction of the median depth.
        #[arg(long, default_value_t = 0.02)]
        perturb_trans: f64,
        /// Depth initialization as a multiple of ground truth.
        #[arg(long, default_value_t = 1.5)]
        depth_init: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep one pixel's depth and record both losses.
    Landscape {
        #[arg(long)]
        pair: PathBuf,
        /// Pixel as `u,v`.
        #[arg(long)]
        pixel: String,
        /// Depth sweep as `a:b:n`.
        #[arg(long)]
        range: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth or odometry metrics as CSV on stdout.
    Eval {
        /// Predicted depth (PFM) or trajectory (CSV).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth depth (PFM) or trajectory (CSV).
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = eval::DEFAULT_DEPTH_CAP)]
        cap: f64,
        /// Median-scale the predicted depth before scoring.
        #[arg(long)]
        median_scale: bool,
        /// Segment lengths for odometry, comma-separated.
        #[arg(long, default_value = "2,4,8")]
        segments: String,
    },
    /// Per-pixel depth basin widths under both losses over a region.
    Basin {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Region as `x0,y0,x1,y1` (exclusive end).
        #[arg(long)]
        region: String,
        /// Pixel stride inside the region.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Depth-scale sweep as `a:b:n`.
        #[arg(long, default_value = "0.5:1.5:21")]
        sweep: String,
        #[arg(long, default_value_t = align::TAU_DEPTH)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Photo,
    Feat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solve {
    Pose,
    Depth,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Depth,
    Odom,
}

/// Bad invocations that clap cannot see; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("FEATMETRIC_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: FEATMETRIC_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { scene, out, seed } => synth(scene.as_deref(), &out, seed),
        Cmd::TrainFeatures {
            data,
            arch,
            steps,
            lr,
            alpha,
            beta,
            resume,
            out,
            seed,
        } => {
            let arch = parse_arch(&arch)?;
            let mut cfg = TrainConfig {
                learning_rate: lr,
                steps,
                rng_seed: seed,
                ..TrainConfig::default()
            };
            cfg.loss.alpha = alpha;
            cfg.loss.beta = beta;
            train_features(&data, arch, &cfg, resume.as_deref(), &out)
        }
        Cmd::Align {
            pair,
            mode,
            solve,
            ckpt,
            levels,
            perturb_deg,
            perturb_trans,
            depth_init,
            out,
            seed,
        } => {
            let params = match (mode, ckpt) {
                (Mode::Feat, None) => return Err(usage("--mode feat requires --ckpt")),
                (Mode::Feat, Some(p)) => Some(load_params(&p)?),
                (Mode::Photo, _) => None,
            };
            let cfg = AlignConfig {
                levels,
                ..AlignConfig::default()
            };
            let pair = read_pair(&pair)?;
            let problem = AlignProblem::new(pair, params.as_ref(), cfg)?;
            run_align(&problem, solve, (perturb_deg, perturb_trans), depth_init, &out, seed)
        }
        Cmd::Landscape {
            pair,
            pixel,
            range,
            ckpt,
            out,
        } => {
            let (u, v) = parse_pair_usize(&pixel, "--pixel")?;
            let (a, b, n) = parse_range(&range, "--range")?;
            let params = ckpt.as_deref().map(load_params).transpose()?;
            let problem = AlignProblem::new(read_pair(&pair)?, params.as_ref(), AlignConfig::default())?;
            let rows = align::landscape_probe(&problem, (u, v), (a, b), n)?;
            create_parent(&out)?;
            raster::write_csv(&out, &align::LANDSCAPE_HEADER, &align::landscape_rows(&rows))?;
            info!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Eval {
            pred,
            gt,
            kind,
            cap,
            median_scale,
            segments,
        } => match kind {
            Kind::Depth => eval_depth(&pred, &gt, cap, median_scale),
            Kind::Odom => {
                let segs = parse_list(&segments, "--segments")?;
                eval_odom(&pred, &gt, &segs)
            }
        },
        Cmd::Basin {
            pair,
            ckpt,
            region,
            stride,
            sweep,
            tol,
            levels,
            out,
        } => {
            let rect = parse_list(&region, "--region")?;
            if rect.len() != 4 || rect.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(usage("--region must be x0,y0,x1,y1 with non-negative integers"));
            }
            if stride == 0 {
                return Err(usage("--stride must be >= 1"));
            }
            let (a, b, n) = parse_range(&sweep, "--sweep")?;
            let r: Vec<usize> = rect.iter().map(|v| *v as usize).collect();
            let pixels: Vec<(usize, usize)> = (r[1]..r[3])
                .step_by(stride)
                .flat_map(|y| (r[0]..r[2]).step_by(stride).map(move |x| (x, y)))
                .collect();
            if pixels.is_empty() {
                return Err(usage("--region selects no pixels"));
            }
            let params = load_params(&ckpt)?;
            let cfg = AlignConfig {
                levels,
                ..AlignConfig::default()
            };
            basin(&read_pair(&pair)?, &params, cfg, pixels, &linspace(a, b, n), tol, &out)
        }
    }
}

// ---------------------------------------------------------------------------
// argument parsing

fn parse_arch(s: &str) -> Result<ArchSpec> {
    let mut arch = ArchSpec::default();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("--arch entry '{part}' is not KEY=VALUE")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("--arch value '{v}' is not an integer")))?;
        match k.trim() {
            "F" => arch.feature_channels = v,
            "S" => arch.scales = v,
            "C" => arch.in_channels = v,
            other => return Err(usage(format!("unknown --arch key '{other}'"))),
        }
    }
    ArchSpec::new(arch.in_channels, arch.feature_channels, arch.scales).map_err(|e| usage(e.to_string()))
}

fn parse_list(s: &str, flag: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("{flag}: '{p}' is not a number")))
        })
        .collect()
}

fn parse_pair_usize(s: &str, flag: &str) -> Result<(usize, usize)> {
    let v: Vec<&str> = s.split(',').collect();
    match v.as_slice() {
        [a, b] => match (a.trim().parse(), b.trim().parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(usage(format!("{flag} must be two non-negative integers, got '{s}'"))),
        },
        _ => Err(usage(format!("{flag} must be u,v, got '{s}'"))),
    }
}

fn parse_range(s: &str, flag: &str) -> Result<(f64, f64, usize)> {
    let v: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("{flag} must be a:b:n, got '{s}'"));
    if v.len() != 3 {
        return Err(bad());
    }
    let a: f64 = v[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = v[1].trim().parse().map_err(|_| bad())?;
    let n: usize = v[2].trim().parse().map_err(|_| bad())?;
    if n < 2 || a >= b || a.is_nan() || b.is_nan() {
        return Err(usage(format!("{flag} needs a < b and n >= 2")));
    }
    Ok((a, b, n))
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

// ---------------------------------------------------------------------------
// commands

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn read_pair(dir: &Path) -> Result<RenderedPair> {
    RenderedPair::read_dir(dir).with_context(|| format!("reading pair directory {}", dir.display()))
}

fn load_params(path: &Path) -> Result<AutoencoderParams> {
    let (p, _) = featurenet::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(p)
}

fn synth(scene: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let cfg = match scene {
        Some(p) => SceneConfig::load(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => SceneConfig::corridor(),
    };
    let pair = cfg.render(seed)?;
    pair.write_dir(out)?;
    info!(
        "rendered {}x{} target and {} source view(s) into {}",
        pair.width(),
        pair.height(),
        pair.source_images.len(),
        out.display()
    );
    Ok(())
}

fn train_features(data: &Path, arch: ArchSpec, cfg: &TrainConfig, resume: Option<&Path>, out: &Path) -> Result<()> {
    let pair = read_pair(data)?;
    let mut dataset = vec![pair.target_image];
    dataset.extend(pair.source_images);
    let (params, state) = match resume {
        Some(p) => {
            let (params, state) = featurenet::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if params.arch() != arch {
                return Err(usage("--arch does not match the resumed checkpoint"));
            }
            (params, state)
        }
        None => {
            let params = featurenet::init_params(arch, cfg)?;
            let state = AdamState::new(params.len());
            (params, state)
        }
    };
    info!("training from step {} for {} steps", state.step, cfg.steps);
    let (params, state, history) = featurenet::train_resume(params, state, &dataset, cfg)?;
    create_dir(out)?;
    featurenet::save_checkpoint(out.join("featurenet.ckpt"), &params, &state)?;
    featurenet::write_history(out.join("loss_history.csv"), &history)?;
    if let Some(last) = history.last() {
        info!("step {}: total {:.6}", last.step, last.total);
    }
    Ok(())
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn run_align(
    problem: &AlignProblem,
    solve: Solve,
    (perturb_deg, perturb_trans): (f64, f64),
    depth_init: f64,
    out: &Path,
    seed: u64,
) -> Result<()> {
    create_dir(out)?;
    let cfg = problem.cfg;
    let gt_poses = &problem.pair.gt_poses;
    let mut summary: Vec<Vec<String>> = Vec::new();
    if matches!(solve, Solve::Pose | Solve::Both) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let med = problem.median_depth();
        let init: Vec<Pose> = gt_poses
            .iter()
            .map(|g| {
                let axis = unit_vector(&mut rng).map(|a| a * perturb_deg.to_radians());
                let dir = unit_vector(&mut rng).map(|a| a * perturb_trans * med);
                Pose::from_array([axis[0], axis[1], axis[2], dir[0], dir[1], dir[2]]).compose(g)
            })
            .collect();
        let (est, trace) = align::optimize_poses(problem, &init, cfg.pose_max_iters, cfg.pose_tol)?;
        geometry::write_poses(out.join("pose.csv"), &est)?;
        raster::write_csv(out.join("trace.csv"), &align::POSE_TRACE_HEADER, &align::pose_trace_rows(&trace))?;
        for (i, (e, g)) in est.iter().zip(gt_poses).enumerate() {
            let (er, et) = align::pose_error(e, g);
            summary.push(vec![format!("source_{i}_rot_err_deg"), er.to_string()]);
            summary.push(vec![format!("source_{i}_trans_err"), et.to_string()]);
        }
    }
    if matches!(solve, Solve::Depth | Solve::Both) {
        let gt = &problem.pair.gt_depth;
        let (depth, trace) = align::optimize_depth(problem, &gt.scale(depth_init), cfg.depth_max_iters, cfg.depth_step)?;
        raster::write_pfm(out.join("depth.pfm"), &depth)?;
        raster::write_csv(out.join("depth_trace.csv"), &align::DEPTH_TRACE_HEADER, &align::depth_trace_rows(&trace))?;
        let m = eval::depth_metrics(&depth, gt, &Mask::full(gt.width(), gt.height()), eval::DEFAULT_DEPTH_CAP)?;
        for (name, v) in eval::DEPTH_METRICS_HEADER.iter().zip(m.to_array()) {
            summary.push(vec![format!("depth_{name}"), v.to_string()]);
        }
    }
    raster::write_csv(out.join("summary.csv"), &["metric", "value"], &summary)?;
    print_csv(&["metric", "value"], &summary);
    Ok(())
}

fn print_csv(header: &[&str], rows: &[Vec<String>]) {
    println!("{}", header.join(","));
    for r in rows {
        println!("{}", r.join(","));
    }
}

fn read_depth(path: &Path) -> Result<RasterMap> {
    raster::read_pfm(path).with_context(|| format!("reading depth {}", path.display()))
}

fn eval_depth(pred: &Path, gt: &Path, cap: f64, median_scale: bool) -> Result<()> {
    let mut pred = read_depth(pred)?;
    let gt = read_depth(gt)?;
    let mask = Mask::full(gt.width(), gt.height());
    if median_scale {
        let (scaled, s) = eval::median_scale(&pred, &gt, &mask)?;
        info!("median scale {s}");
        pred = scaled;
    }
    let m = eval::depth_metrics(&pred, &gt, &mask, cap)?;
    print_csv(&eval::DEPTH_METRICS_HEADER, &[m.csv_row()]);
    Ok(())
}

fn eval_odom(pred: &Path, gt: &Path, segments: &[f64]) -> Result<()> {
    let pred = geometry::read_poses(pred).with_context(|| format!("reading {}", pred.display()))?;
    let gt = geometry::read_poses(gt).with_context(|| format!("reading {}", gt.display()))?;
    let m = eval::odometry_metrics(&pred, &gt, segments)?;
    print_csv(&eval::ODOMETRY_HEADER, &m.csv_rows());
    Ok(())
}

fn basin(
    pair: &RenderedPair,
    params: &AutoencoderParams,
    cfg: AlignConfig,
    pixels: Vec<(usize, usize)>,
    sweep: &[f64],
    tol: f64,
    out: &Path,
) -> Result<()> {
    let spec = BasinSpec::DepthScale { pixels: pixels.clone() };
    let photo = AlignProblem::photometric(pair.clone(), cfg)?;
    let feat = AlignProblem::feature_metric(pair.clone(), params, cfg)?;
    let bp = align::basin_measure(&photo, &spec, sweep, tol)?;
    let bf = align::basin_measure(&feat, &spec, sweep, tol)?;
    let rows: Vec<Vec<String>> = pixels
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            vec![
                x.to_string(),
                y.to_string(),
                bp.widths[i].to_string(),
                bf.widths[i].to_string(),
            ]
        })
        .collect();
    create_parent(out)?;
    raster::write_csv(out, &["x", "y", "width_photo", "width_feat"], &rows)?;
    let ge = bf.widths.iter().zip(&bp.widths).filter(|(f, p)| f >= p).count();
    info!("feature basin >= photometric on {ge}/{} pixels", pixels.len());
    Ok(())
}
