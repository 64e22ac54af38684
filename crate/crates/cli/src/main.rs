use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use uncal_sfm::camera::NormalizedIntrinsics;
use uncal_sfm::experiment::{run_recovery, total_loss_grad_check, GRAD_CHECK_SEED};
use uncal_sfm::io::{
    read_pfm, read_ppm, read_trajectory, write_pfm, write_ppm, write_trajectory, RunConfig,
};
use uncal_sfm::metrics::{
    ate, aggregate, depth_metrics, intrinsics_report, snippets, AteMode, DEFAULT_DEPTH_CAP,
};
use uncal_sfm::scene::{gen_sequence, SyntheticScene};
use uncal_sfm::subpixel::{phase_variance, subpixel_block, SubpixelBlockWeights, UPSAMPLE_FACTOR};
use uncal_sfm::{Error, Tape};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "uncal-sfm", version, about = "Self-supervised depth, motion and intrinsics from image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    SynthGen(SynthGenArgs),
    /// Recover depth, poses and intrinsics for a synthetic scene.
    Optimize(OptimizeArgs),
    /// Depth metrics of a predicted map against ground truth.
    EvalDepth(EvalDepthArgs),
    /// Absolute trajectory error over snippets.
    EvalOdom(EvalOdomArgs),
    /// Mean and spread of estimated intrinsics.
    EvalIntrinsics(EvalIntrinsicsArgs),
    /// Finite-difference check of the full objective on a small problem.
    GradCheck(GradCheckArgs),
    /// Upsample an image with a freshly initialized sub-pixel block.
    UpsampleDemo(UpsampleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        Ok((cfg, out))
    }
}

#[derive(Args)]
struct SynthGenArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print the loss every this many steps (0 disables).
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Args)]
struct EvalDepthArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    median_scale: bool,
    #[arg(long, default_value_t = DEFAULT_DEPTH_CAP)]
    cap: f64,
    /// Directory for `depth_metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalOdomArgs {
    /// Predicted camera-to-world trajectory.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 5)]
    snippet: usize,
    /// Score each consecutive pair after per-pair scale alignment.
    #[arg(long)]
    per_pair: bool,
    /// Directory for `odometry.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalIntrinsicsArgs {
    /// `intrinsics.json` files written by `optimize`.
    #[arg(long, required = true, num_args = 1..)]
    estimates: Vec<PathBuf>,
    /// Ground truth as `fx,fy,cx,cy` (normalized).
    #[arg(long)]
    gt: String,
    /// Directory for `intrinsics_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Problem size as WIDTHxHEIGHT.
    #[arg(long, default_value = "16x12")]
    size: String,
    #[arg(long, default_value_t = GRAD_CHECK_SEED)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Input PPM image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Optimize(a) => optimize(a),
        Command::EvalDepth(a) => eval_depth(a),
        Command::EvalOdom(a) => eval_odom(a),
        Command::EvalIntrinsics(a) => eval_intrinsics(a),
        Command::GradCheck(a) => grad_check(a),
        Command::UpsampleDemo(a) => upsample_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

/// Writes the JSON next to the other outputs, or prints it when no
/// directory was requested.
fn emit_json(dir: Option<&Path>, name: &str, value: &impl Serialize) -> Result<(), Error> {
    match dir {
        Some(d) => write_json(d, name, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable value"));
            Ok(())
        }
    }
}

fn synth_gen(args: SynthGenArgs) -> Result<(), Error> {
    let (cfg, out) = args.config.load()?;
    let scene = SyntheticScene::new(cfg.scene_config())?;
    let seq = gen_sequence(&scene, scene.n_frames())?;
    fs::create_dir_all(&out)?;
    for (i, (frame, depth)) in seq.frames.iter().zip(&seq.depths).enumerate() {
        write_ppm(out.join(format!("frame_{i:03}.ppm")), frame)?;
        write_pfm(out.join(format!("depth_{i:03}.pfm")), depth)?;
    }
    write_trajectory(out.join("poses.txt"), &seq.poses)?;
    write_json(&out, "intrinsics.json", &scene.intrinsics.normalized())?;
    fs::write(out.join("config.cfg"), cfg.serialize())?;
    println!("wrote {} frames of {}x{} to {}", seq.frames.len(), cfg.width, cfg.height, out.display());
    Ok(())
}

fn optimize(args: OptimizeArgs) -> Result<(), Error> {
    let (cfg, out) = args.config.load()?;
    let every = args.log_every;
    let run = run_recovery(&cfg, |step, loss| {
        if every > 0 && step % every == 0 {
            println!("step {step:>5}  loss {loss:.6}");
        }
    })?;
    fs::create_dir_all(&out)?;
    write_pfm(out.join("depth.pfm"), &run.result.depth)?;
    if let Some(sigma) = &run.result.uncertainty {
        write_pfm(out.join("sigma.pfm"), sigma)?;
    }
    write_json(&out, "intrinsics.json", &run.result.intrinsics.normalized())?;
    let mut csv = String::from("step,lr,loss\n");
    for e in &run.result.trace {
        csv.push_str(&format!("{},{:e},{}\n", e.step, e.lr, e.loss));
    }
    fs::write(out.join("trace.csv"), csv)?;
    write_json(&out, "poses.json", &run.result.poses)?;
    write_json(&out, "report.json", &run.report)?;
    fs::write(out.join("config.cfg"), cfg.serialize())?;

    let r = &run.report;
    let k = r.intrinsics;
    println!("loss       {:.6} -> {:.6}", r.initial_loss, r.final_loss);
    println!("abs_rel    {:.4} (constant-depth baseline {:.4})", r.depth.abs_rel, r.constant_depth_abs_rel);
    println!(
        "intrinsics fx {:.4} fy {:.4} cx {:.4} cy {:.4}  (fx err {:.2}%, fy err {:.2}%)",
        k.fx,
        k.fy,
        k.cx,
        k.cy,
        100.0 * r.fx_rel_error,
        100.0 * r.fy_rel_error
    );
    let angles: Vec<String> = r.translation_angle_deg.iter().map(|a| format!("{a:.2}")).collect();
    println!("translation direction error (deg) [{}]", angles.join(", "));
    if let Some(d) = &r.divergence {
        println!("stopped early: {d}");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn eval_depth(args: EvalDepthArgs) -> Result<(), Error> {
    let pred = read_pfm(&args.pred)?;
    let gt = read_pfm(&args.gt)?;
    let m = depth_metrics(&pred, &gt, args.cap, args.median_scale)?;
    emit_json(args.out.as_deref(), "depth_metrics.json", &m)?;
    if args.out.is_some() {
        println!(
            "abs_rel {:.4} sq_rel {:.4} rmse {:.4} rmse_log {:.4} d1 {:.4} d2 {:.4} d3 {:.4}",
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct OdomReport {
    mode: &'static str,
    snippet_len: usize,
    mean: f64,
    std: f64,
    count: usize,
}

fn eval_odom(args: EvalOdomArgs) -> Result<(), Error> {
    let pred = read_trajectory(&args.pred)?;
    let gt = read_trajectory(&args.gt)?;
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "trajectories differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mode = if args.per_pair { AteMode::PerPair } else { AteMode::Snippet };
    let ps = snippets(&pred, args.snippet)?;
    let gs = snippets(&gt, args.snippet)?;
    let errors = ps
        .iter()
        .zip(&gs)
        .map(|(p, g)| ate(p, g, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let agg = aggregate(&errors)?;
    let report = OdomReport {
        mode: if args.per_pair { "per-pair" } else { "snippet" },
        snippet_len: args.snippet,
        mean: agg.mean,
        std: agg.std,
        count: agg.count,
    };
    emit_json(args.out.as_deref(), "odometry.json", &report)?;
    if args.out.is_some() {
        println!("ATE {:.4} ± {:.4} over {} snippets", agg.mean, agg.std, agg.count);
    }
    Ok(())
}

fn parse_intrinsics(text: &str) -> Result<NormalizedIntrinsics, Error> {
    let v: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Contract(format!("'{text}' is not fx,fy,cx,cy")))?;
    match v.as_slice() {
        &[fx, fy, cx, cy] => Ok(NormalizedIntrinsics { fx, fy, cx, cy }),
        _ => Err(Error::Contract(format!("'{text}' is not fx,fy,cx,cy"))),
    }
}

fn eval_intrinsics(args: EvalIntrinsicsArgs) -> Result<(), Error> {
    let gt = parse_intrinsics(&args.gt)?;
    let estimates = args
        .estimates
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<NormalizedIntrinsics>(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let report = intrinsics_report(&estimates, &gt)?;
    emit_json(args.out.as_deref(), "intrinsics_report.json", &report)?;
    if args.out.is_some() {
        print!("{}", report.table());
    }
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Contract(format!("size '{text}' is not WIDTHxHEIGHT"));
    let (w, h) = text.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn grad_check(args: GradCheckArgs) -> Result<(), Error> {
    let (w, h) = parse_size(&args.size)?;
    let report = total_loss_grad_check(w, h, args.seed)?;
    if let Some(dir) = &args.out {
        write_json(dir, "grad_check.json", &report)?;
    }
    println!("max relative error {:.3e} over {} parameter groups", report.max_rel_error, report.per_param.len());
    if report.max_rel_error < 1e-4 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient mismatch: max relative error {:.3e} exceeds 1e-4",
            report.max_rel_error
        )))
    }
}

#[derive(Serialize)]
struct UpsampleReport {
    input: [usize; 3],
    output: [usize; 3],
    phase_variance: f64,
}

fn upsample_demo(args: UpsampleArgs) -> Result<(), Error> {
    let image = read_ppm(&args.input)?;
    let (c, _, _) = image.dims3()?;
    let weights = SubpixelBlockWeights::init(c, args.hidden, c, args.seed)?;
    let tape = Tape::new();
    let up = subpixel_block(tape.constant(image.clone()), &weights)?.value();
    let up = (*up).clone();
    let variance = phase_variance(&up, UPSAMPLE_FACTOR)?;
    let nearest = tape.constant(image.clone()).upsample_nearest(UPSAMPLE_FACTOR)?.value();
    let lo = up.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let display = up.map(|v| (v - lo) / span);
    fs::create_dir_all(&args.out)?;
    write_ppm(args.out.join("subpixel.ppm"), &display)?;
    write_ppm(args.out.join("nearest.ppm"), &nearest)?;
    let (ic, ih, iw) = image.dims3()?;
    let (oc, oh, ow) = up.dims3()?;
    let report = UpsampleReport {
        input: [ic, ih, iw],
        output: [oc, oh, ow],
        phase_variance: variance,
    };
    write_json(&args.out, "upsample.json", &report)?;
    println!("{iw}x{ih} -> {ow}x{oh}, phase variance {variance:.3e}");
    Ok(())
}
