//! `rvio`: simulate scenarios, run the filter, check gradients, calibrate
//! and evaluate trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use rvio::eval::{
    calibration_to_key_values, evaluate, read_euroc_imu, read_groundtruth, read_tum, write_euroc_imu, write_tum,
    EurocLayout,
};
use rvio::filter::{pose_nees, run_filter, write_diagnostics, FilterRun};
use rvio::gradcheck::{
    calibrate, fd_gradient, h_refinement, synthetic_window, window_loss, write_calibration_report, Parameterization,
    WindowSpec, DEFAULT_FRAMES,
};
use rvio::lie::so3_log;
use rvio::measurements::{read_measurements, write_measurements};
use rvio::photometric::{write_depth, write_pgm, CameraIntrinsics};
use rvio::scenario::{Scenario, ScenarioConfig};
use rvio::sim::{camera_pose, render, SceneSpec};
use rvio::state::RobocentricState;
use rvio::text::{f17, KeyValues};
use rvio::trajectory::Trajectory;
use rvio::{Error, Result};

/// Versions of the formats written by `simulate`, recorded in its manifest.
const FORMATS: [(&str, &str); 7] = [
    ("format.imu", "euroc-imu-csv/1"),
    ("format.measurements", "relative-pose-csv/1"),
    ("format.groundtruth", "tum/1"),
    ("format.initial_state", "state-record/1"),
    ("format.calibration", "key-value/1"),
    ("format.image", "pgm-p5/1"),
    ("format.depth", "rviodpt-f32le/1"),
];

#[derive(Parser, Debug)]
#[command(name = "rvio", version, about = "Robocentric visual-inertial EKF toolkit")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scenario: IMU, measurements, ground truth, frames.
    Simulate(SimulateArgs),
    /// Run the filter on IMU and measurement streams.
    RunFilter(RunFilterArgs),
    /// Finite-difference gradient checks of the window loss.
    Gradcheck(GradcheckArgs),
    /// Recover measurement corruption by descending the window loss.
    Calibrate(CalibrateArgs),
    /// Sim3-aligned trajectory error of an estimate against ground truth.
    Evaluate(EvaluateArgs),
}

/// Scenario settings: defaults, then the config file, then flags.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Keep the translation scale fixed at its initial value.
    #[arg(long)]
    freeze_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::default();
        if let Some(path) = &self.config {
            require_file(path, "--config")?;
            cfg.apply_key_values(&KeyValues::read(path)?)?;
        }
        let mut text = String::new();
        for kv in &self.set {
            if !kv.contains('=') {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")));
            }
            let _ = writeln!(text, "{kv}");
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(text, "seed = {seed}");
        }
        if let Some(d) = self.duration {
            let _ = writeln!(text, "duration = {d}");
        }
        if self.freeze_scale {
            let _ = writeln!(text, "scale_mode = frozen");
        }
        cfg.apply_key_values(&KeyValues::parse(&text, "command line")?)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(short, long)]
    out: PathBuf,
    /// Skip rendering images and depth maps.
    #[arg(long)]
    no_frames: bool,
}

#[derive(Args, Debug)]
struct RunFilterArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory written by `simulate`; supplies any stream not given below.
    #[arg(long)]
    input: Option<PathBuf>,
    /// IMU csv (EuRoC layout).
    #[arg(long)]
    imu: Option<PathBuf>,
    /// Relative-pose measurement csv.
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Initial state record.
    #[arg(long)]
    initial: Option<PathBuf>,
    /// Ground truth (TUM, or EuRoC csv) for NEES and RMSE.
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    /// EuRoC sequence directory; measurements are drawn from its ground
    /// truth with the configured noise.
    #[arg(long, conflicts_with_all = ["input", "imu", "measurements", "initial"])]
    euroc: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ParamArg {
    Scale,
    Bias,
    Logits,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Scale => Parameterization::LogScale,
            ParamArg::Bias => Parameterization::TranslationBias,
            ParamArg::Logits => Parameterization::LogitOffsets,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct WindowArgs {
    /// What θ corrects.
    #[arg(long, value_enum, default_value = "scale")]
    parameterization: ParamArg,
    /// Factor applied to the measured translations [default: 0.8 with
    /// `scale`, else 1].
    #[arg(long)]
    injected_scale: Option<f64>,
    /// Offset added to the measured translations, meters [default:
    /// 0.02,0,0 with `bias`, else zero].
    #[arg(long, value_delimiter = ',', num_args = 3)]
    injected_bias: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_FRAMES)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl WindowArgs {
    fn spec(&self) -> WindowSpec {
        let p: Parameterization = self.parameterization.into();
        let scale = match p {
            Parameterization::LogScale => 0.8,
            _ => 1.0,
        };
        let bias = match p {
            Parameterization::TranslationBias => Vector3::new(0.02, 0.0, 0.0),
            _ => Vector3::zeros(),
        };
        WindowSpec {
            frames: self.frames,
            injected_scale: self.injected_scale.unwrap_or(scale),
            injected_bias: self.injected_bias.as_deref().map_or(bias, Vector3::from_column_slice),
            parameterization: p,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    window: WindowArgs,
    /// Where to evaluate the gradient; zeros by default.
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// Coarse finite-difference step; the fine step is half of it.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Largest accepted relative change between the two steps.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Gradient components below this magnitude are not compared.
    #[arg(long, default_value_t = 1e-8)]
    floor: f64,
    /// Optional csv report.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Step size; defaults to one suited to the parameterization.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Report, one line per step: `step loss θ…`.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground truth (TUM, or EuRoC csv).
    #[arg(long)]
    groundtruth: PathBuf,
    /// Also write the table as csv.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_any_groundtruth(path: &Path) -> Result<Trajectory> {
    require_file(path, "--groundtruth")?;
    if path.extension().is_some_and(|e| e == "csv") {
        read_groundtruth(path)
    } else {
        read_tum(path)
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let s = cfg.generate()?;
    create_dir(&args.out)?;
    let mut files: Vec<String> = Vec::new();
    let mut emit = |name: &str, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        write(&args.out.join(name))?;
        files.push(name.to_string());
        Ok(())
    };

    emit("config.txt", &|p| write_text(p, &cfg.to_key_values().to_text()))?;
    emit("imu.csv", &|p| write_euroc_imu(p, &s.imu.samples))?;
    emit("measurements.csv", &|p| write_measurements(p, &s.measurements))?;
    emit("groundtruth.tum", &|p| write_tum(&s.ground_truth(), p))?;
    emit("initial_state.txt", &|p| {
        write_text(p, &format!("{}\n", s.initial.to_record(0.0)))
    })?;
    emit("true_state.txt", &|p| {
        write_text(p, &format!("{}\n", s.truth_state.to_record(0.0)))
    })?;
    let k = CameraIntrinsics::default();
    emit("calibration.txt", &|p| {
        write_text(p, &calibration_to_key_values(&k, s.extrinsics()).to_text())
    })?;
    if !args.no_frames {
        create_dir(&args.out.join("frames"))?;
        let scene = SceneSpec::default();
        for (i, pose) in s.truth.iter().enumerate() {
            let (img, depth) = render(&scene, &camera_pose(pose, s.extrinsics()), &k)?;
            emit(&format!("frames/{i:06}.pgm"), &|p| write_pgm(p, &img))?;
            emit(&format!("frames/{i:06}.depth"), &|p| write_depth(p, &depth))?;
        }
    }

    let mut manifest = KeyValues::default();
    for (k, v) in cfg
        .to_key_values()
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
    {
        manifest.insert(&format!("config.{k}"), v);
    }
    for (k, v) in FORMATS {
        manifest.insert(k, v);
    }
    manifest.insert("seed", cfg.seed);
    manifest.insert("file_count", files.len());
    manifest.insert("files", files.join(", "));
    write_text(&args.out.join("manifest.txt"), &manifest.to_text())?;
    println!("wrote {} files to {}", files.len() + 1, args.out.display());
    Ok(())
}

/// Streams for `run-filter`: explicit paths win over `--input`.
fn stream_path(explicit: &Option<PathBuf>, input: &Option<PathBuf>, name: &str, flag: &str) -> Result<PathBuf> {
    let path = match (explicit, input) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(name),
        (None, None) => return Err(Error::Config(format!("{flag} (or --input) is required"))),
    };
    require_file(&path, flag)?;
    Ok(path)
}

fn print_report(run: &FilterRun, gt: &Trajectory, out: &Path) -> Result<()> {
    let (sim3, report) = evaluate(&run.trajectory(), gt)?;
    println!(
        "trans RMSE {:.4} m, rot RMSE {:.4} deg over {} poses (Sim3 scale {:.4})",
        report.trans_rmse, report.rot_rmse_deg, report.pairs, sim3.scale
    );
    write_text(&out.join("evaluation.csv"), &evaluation_csv(&sim3, &report))
}

fn run_filter_cmd(args: &RunFilterArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let (run, truth) = if let Some(dir) = &args.euroc {
        if !dir.is_dir() {
            return Err(Error::Config(format!("--euroc: {} is not a directory", dir.display())));
        }
        let s = Scenario::from_euroc(&EurocLayout::new(dir), &cfg)?;
        let run = s.run()?;
        let shift = |t: Trajectory| {
            Trajectory::new(
                t.poses()
                    .iter()
                    .map(|p| rvio::trajectory::Pose {
                        t: p.t + s.time_offset,
                        ..*p
                    })
                    .collect(),
            )
        };
        let run = FilterRun {
            start: rvio::trajectory::Pose {
                t: run.start.t + s.time_offset,
                ..run.start
            },
            frames: run
                .frames
                .into_iter()
                .map(|mut f| {
                    f.t += s.time_offset;
                    f.pose.t += s.time_offset;
                    f
                })
                .collect(),
        };
        (run, Some(shift(s.ground_truth())?))
    } else {
        let imu = read_euroc_imu(&stream_path(&args.imu, &args.input, "imu.csv", "--imu")?)?;
        let meas = read_measurements(&stream_path(
            &args.measurements,
            &args.input,
            "measurements.csv",
            "--measurements",
        )?)?;
        let initial_path = stream_path(&args.initial, &args.input, "initial_state.txt", "--initial")?;
        let record = fs::read_to_string(&initial_path)
            .map_err(|e| Error::io(format!("reading {}", initial_path.display()), e))?;
        let (t0, initial) =
            RobocentricState::from_record(record.trim()).map_err(|e| Error::parse(&initial_path, 1, e.to_string()))?;
        let filter = cfg.filter_config();
        let p0 = filter.initial_covariance()?;
        let run = run_filter(&filter, &initial, &p0, t0, &imu, &meas)?;
        let gt_path = match (&args.groundtruth, &args.input) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(dir)) if dir.join("groundtruth.tum").is_file() => Some(dir.join("groundtruth.tum")),
            _ => None,
        };
        let truth = gt_path.map(|p| read_any_groundtruth(&p)).transpose()?;
        (run, truth)
    };

    create_dir(&args.out)?;
    write_tum(&run.trajectory(), &args.out.join("trajectory.tum"))?;
    let nees = match &truth {
        Some(gt) => Some(
            run.frames
                .iter()
                .map(|f| {
                    let p = gt.nearest(f.t, rvio::eval::ASSOCIATION_TOLERANCE).ok_or_else(|| {
                        Error::StreamIntegrity(format!("no ground truth within 10 ms of frame time {}", f.t))
                    })?;
                    pose_nees(f, p)
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    write_diagnostics(&args.out.join("diagnostics.csv"), &run, nees.as_deref())?;
    println!(
        "{} frames, final scale {:.4}",
        run.frames.len(),
        run.frames.last().map_or(f64::NAN, |f| f.scale)
    );
    if let Some(gt) = &truth {
        print_report(&run, gt, &args.out)?;
    }
    Ok(())
}

/// Checks the finite-difference machinery on a quadratic with a known
/// gradient.
fn quadratic_self_test() -> Result<f64> {
    let f = |x: &[f64]| Ok(x[0] * x[0] + 3.0 * x[1] * x[1] + 0.5 * x[0] * x[2] - 2.0 * x[2]);
    let x = [0.3, -0.7, 1.1];
    let exact = [2.0 * x[0] + 0.5 * x[2], 6.0 * x[1], 0.5 * x[0] - 2.0];
    let g = fd_gradient(f, &x, 1e-4)?;
    Ok(g.iter().zip(exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<bool> {
    let quad = quadratic_self_test()?;
    let quad_ok = quad < 1e-8;
    println!(
        "quadratic self-test: {} (max error {quad:.1e})",
        if quad_ok { "PASS" } else { "FAIL" }
    );

    let spec = args.window.spec();
    let problem = synthetic_window(&spec)?;
    let theta = args
        .theta
        .clone()
        .unwrap_or_else(|| vec![0.0; spec.parameterization.dim()]);
    let f = |x: &[f64]| window_loss(&problem, x).map(|r| r.0);
    let r = h_refinement(f, &theta, args.h)?;
    let rel = r.relative_differences(args.floor);
    let mut csv = String::from("coord,grad_h,grad_h2,rel_diff\n");
    println!("coord  grad(h={})  grad(h={})  rel diff", args.h, args.h / 2.0);
    for (i, ((c, f), d)) in r.coarse.iter().zip(&r.fine).zip(&rel).enumerate() {
        println!("{i:5}  {c:+.6e}  {f:+.6e}  {d:.2e}");
        let _ = writeln!(csv, "{i},{},{},{}", f17(*c), f17(*f), f17(*d));
    }
    let ok = r.consistent(args.tolerance, args.floor);
    println!(
        "h-refinement: {} (tolerance {})",
        if ok { "PASS" } else { "FAIL" },
        args.tolerance
    );
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(quad_ok && ok)
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<()> {
    let spec = args.window.spec();
    let problem = synthetic_window(&spec)?;
    let lr = args.lr.unwrap_or(spec.parameterization.default_lr());
    let cal = calibrate(
        &problem,
        &vec![0.0; spec.parameterization.dim()],
        args.steps,
        lr,
        args.h,
    )?;
    write_calibration_report(&args.out, &cal.history)?;
    let theta: Vec<String> = cal.theta.iter().map(|v| format!("{v:.6}")).collect();
    println!("best loss {:.6e} at θ = [{}]", cal.loss, theta.join(", "));
    match spec.parameterization {
        Parameterization::LogScale => {
            println!(
                "recovered scale {:.5} (injected {})",
                cal.theta[0].exp(),
                spec.injected_scale
            )
        }
        Parameterization::TranslationBias => {
            let b = spec.injected_bias;
            println!("injected bias [{}, {}, {}]", b.x, b.y, b.z)
        }
        Parameterization::LogitOffsets => {}
    }
    Ok(())
}

fn evaluation_csv(s: &rvio::eval::Sim3Transform, r: &rvio::eval::AteReport) -> String {
    let aa = so3_log(&s.rot);
    let vals = [
        s.scale,
        aa.x,
        aa.y,
        aa.z,
        s.trans.x,
        s.trans.y,
        s.trans.z,
        r.trans_rmse,
        r.rot_rmse_deg,
    ]
    .map(f17);
    format!(
        "scale,rot_x,rot_y,rot_z,trans_x,trans_y,trans_z,trans_rmse_m,rot_rmse_deg,pairs\n{},{}\n",
        vals.join(","),
        r.pairs
    )
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    require_file(&args.estimate, "--estimate")?;
    let est = read_tum(&args.estimate)?;
    let gt = read_any_groundtruth(&args.groundtruth)?;
    let (s, r) = evaluate(&est, &gt)?;
    // Values that print as zero should not print as -0.
    let clean = |v: f64| if v.abs() < 5e-10 { 0.0 } else { v };
    let aa = so3_log(&s.rot).map(clean);
    let t = s.trans.map(clean);
    println!("pairs        {}", r.pairs);
    println!("scale        {:.9}", s.scale);
    println!("rotation     [{:.9}, {:.9}, {:.9}] rad (angle-axis)", aa.x, aa.y, aa.z);
    println!("translation  [{:.9}, {:.9}, {:.9}] m", t.x, t.y, t.z);
    println!("trans RMSE   {:.9} m", r.trans_rmse);
    println!("rot RMSE     {:.9} deg", r.rot_rmse_deg);
    if let Some(path) = &args.csv {
        write_text(path, &evaluation_csv(&s, &r))?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Render(_) | Error::Io { .. } => 1,
        Error::Parse { .. } | Error::StreamIntegrity(_) | Error::Alignment(_) => 2,
        Error::Divergence { .. } | Error::NumericalHealth(_) | Error::NonFinite { .. } | Error::UndefinedLoss(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::RunFilter(a) => run_filter_cmd(a),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
