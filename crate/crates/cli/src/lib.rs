//! `diffreg` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffreg::io::{self, Evaluation};
use diffreg::synth::{salt_and_pepper, synthesize, SynthCase};
use diffreg::{
    dice, hausdorff_slice_avg, jacobian_stats, register_pair, warp_image, warp_labels, DataTerm, Dims,
    LabelVolume, Profile, RegError, RegistrationConfig, SolverConfig,
};

#[derive(Parser, Debug)]
#[command(name = "diffreg", version, about = "Diffeomorphic registration of 3D volumes")]
struct Cli {
    /// Worker threads; 1 gives the reproducible baseline.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register a source volume onto a target.
    Register(RegisterArgs),
    /// Apply a deformation to a volume.
    Warp(WarpArgs),
    /// Dice and slice-averaged Hausdorff distance between two label maps.
    Evaluate(EvaluateArgs),
    /// Jacobian determinant statistics of a deformation.
    Jacobian(JacobianArgs),
    /// Write a deterministic synthetic pair with labels and true deformation.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Term {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Capped,
    Converged,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CaseArg {
    Translate,
    Blob,
    SphereEllipsoid,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Output deformation.
    #[arg(long)]
    out: PathBuf,
    /// Also write the warped source here.
    #[arg(long)]
    warped: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "l1")]
    data_term: Term,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=3))]
    order: u32,
    #[arg(long, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, allow_negative_numbers = true)]
    theta: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, value_enum, default_value = "capped")]
    profile: ProfileArg,
    /// ADMM stopping tolerance on the mean change of v.
    #[arg(long, allow_negative_numbers = true)]
    tol: Option<f64>,
    /// Write a JSON report here.
    #[arg(long)]
    seed_report: Option<PathBuf>,
    /// Target labels, scored in the report against the warped source labels.
    #[arg(long, requires = "source_labels")]
    target_labels: Option<PathBuf>,
    #[arg(long, requires = "target_labels")]
    source_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    phi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map (nearest neighbour).
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<u16>,
}

#[derive(Args, Debug)]
struct JacobianArgs {
    #[arg(long)]
    phi: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long = "case", value_enum)]
    case: CaseArg,
    #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
    dims: Vec<usize>,
    #[arg(long)]
    out_prefix: PathBuf,
    /// Translate case only.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "3,0,0")]
    shift: Vec<f64>,
    /// Blob case only.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Fraction of source voxels replaced by salt-and-pepper noise.
    #[arg(long)]
    salt_pepper: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Argument(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Argument(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn line(&self) -> String {
        let (tag, msg) = match self {
            Failure::Argument(m) => ("argument", m),
            Failure::Io(m) => ("io", m),
            Failure::Numerical(m) => ("numerical", m),
        };
        format!("error: {tag}: {}", msg.replace('\n', " "))
    }
}

impl From<RegError> for Failure {
    fn from(e: RegError) -> Self {
        let msg = e.to_string();
        match e {
            RegError::NonFinite(_) => Failure::Numerical(msg),
            RegError::Io(_)
            | RegError::Json(_)
            | RegError::BadMagic(_)
            | RegError::BadVersion(_)
            | RegError::BadKind(_)
            | RegError::WrongKind { .. }
            | RegError::Truncated { .. }
            | RegError::TrailingBytes(_)
            | RegError::BadLength { .. } => Failure::Io(msg),
            RegError::DimensionMismatch { .. }
            | RegError::TooSmall { .. }
            | RegError::InvalidParameter { .. }
            | RegError::NoCommonSlice(_) => Failure::Argument(msg),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn with_path(path: &Path) -> impl FnOnce(RegError) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        match f {
            Failure::Io(m) => Failure::Io(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

fn read_scalar(path: &Path) -> std::result::Result<diffreg::Volume32, Failure> {
    io::read_volume(path)
        .and_then(|v| v.into_scalar())
        .map_err(with_path(path))
}

fn read_labels(path: &Path) -> std::result::Result<LabelVolume, Failure> {
    io::read_volume(path)
        .and_then(|v| v.into_labels())
        .map_err(with_path(path))
}

fn score_labels(a: &LabelVolume, b: &LabelVolume, labels: &[u16]) -> std::result::Result<Evaluation, Failure> {
    let mut eval = Evaluation::default();
    for &l in labels {
        eval.dice.insert(l, dice(a, b, l)?);
        let h = match hausdorff_slice_avg(a, b, l) {
            Ok(h) => h,
            Err(RegError::NoCommonSlice(_)) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        eval.hausdorff_mm.insert(l, h);
    }
    Ok(eval)
}

fn register(args: RegisterArgs) -> Outcome {
    let term = match args.data_term {
        Term::L1 => DataTerm::L1,
        Term::L2 => DataTerm::L2,
    };
    let profile = match args.profile {
        ProfileArg::Capped => Profile::Capped,
        ProfileArg::Converged => Profile::Converged,
    };
    if args.levels == 0 {
        return Err(Failure::Argument("levels must be at least 1".into()));
    }
    let mut cfg = RegistrationConfig::with_levels(
        SolverConfig::new(term, args.order, args.lambda, args.theta),
        profile,
        args.levels,
    );
    if let Some(tol) = args.tol {
        cfg.solver.tol = tol;
    }
    cfg.validate()?;

    let target = read_scalar(&args.target)?;
    let source = read_scalar(&args.source)?;
    let labels = match (&args.target_labels, &args.source_labels) {
        (Some(t), Some(s)) => Some((read_labels(t)?, read_labels(s)?)),
        _ => None,
    };

    let result = register_pair(&target, &source, &cfg)?;
    io::write_deformation(&args.out, &result.phi).map_err(with_path(&args.out))?;
    if let Some(w) = &args.warped {
        io::write_scalar(w, &result.warped).map_err(with_path(w))?;
    }

    let mut eval = Evaluation::default();
    if let Some((tl, sl)) = &labels {
        let warped = warp_labels(sl, &result.phi)?;
        let set: Vec<u16> = tl.label_set().into_iter().filter(|l| *l != 0).collect();
        eval = score_labels(&warped, tl, &set)?;
    }
    eval.jacobian = Some(jacobian_stats(&result.phi)?);
    if let Some(r) = &args.seed_report {
        io::write_report(&result, &eval, &cfg, r).map_err(with_path(r))?;
    }
    println!(
        "velocity_count={} runtime_seconds={:.3}",
        result.velocity_count, result.elapsed_seconds
    );
    Ok(())
}

fn warp(args: WarpArgs) -> Outcome {
    let phi = io::read_deformation(&args.phi).map_err(with_path(&args.phi))?;
    if args.labels {
        let lbl = read_labels(&args.input)?;
        let out = warp_labels(&lbl, &phi)?;
        io::write_labels(&args.out, &out).map_err(with_path(&args.out))?;
    } else {
        let img = read_scalar(&args.input)?;
        let out = warp_image(&img, &phi)?;
        io::write_scalar(&args.out, &out).map_err(with_path(&args.out))?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    let a = read_labels(&args.a)?;
    let b = read_labels(&args.b)?;
    let eval = score_labels(&a, &b, &args.labels)?;
    for l in &args.labels {
        println!(
            "label={l} dice={:.6} hausdorff_mm={:.6}",
            eval.dice[l], eval.hausdorff_mm[l]
        );
    }
    Ok(())
}

fn jacobian(args: JacobianArgs) -> Outcome {
    let phi = io::read_deformation(&args.phi).map_err(with_path(&args.phi))?;
    let s = jacobian_stats(&phi)?;
    println!("pct_nonpositive={:.6} min_det={:.6}", s.pct_nonpositive, s.min_det);
    Ok(())
}

fn triple<T: Copy>(v: &[T], name: &str) -> std::result::Result<[T; 3], Failure> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Failure::Argument(format!("--{name} takes exactly 3 comma-separated values"))),
    }
}

fn synth(args: SynthArgs) -> Outcome {
    let dims = Dims::from_array(triple(&args.dims, "dims")?);
    let shift = triple(&args.shift, "shift")?;
    if !shift.iter().all(|s| s.is_finite()) {
        return Err(Failure::Argument("--shift must be finite".into()));
    }
    let case = match args.case {
        CaseArg::Translate => SynthCase::Translate { shift },
        CaseArg::Blob => SynthCase::Blob { seed: args.seed },
        CaseArg::SphereEllipsoid => SynthCase::SphereEllipsoid,
    };
    let mut pair = synthesize::<f32>(&case, dims, [1.0; 3])?;
    if let Some(f) = args.salt_pepper {
        pair.source = salt_and_pepper(&pair.source, f, args.seed)?;
    }
    let out = |suffix: &str| {
        let mut name = args.out_prefix.as_os_str().to_owned();
        name.push(format!("_{suffix}.dreg"));
        PathBuf::from(name)
    };
    let p = out("target");
    io::write_scalar(&p, &pair.target).map_err(with_path(&p))?;
    let p = out("source");
    io::write_scalar(&p, &pair.source).map_err(with_path(&p))?;
    let p = out("target_labels");
    io::write_labels(&p, &pair.target_labels).map_err(with_path(&p))?;
    let p = out("source_labels");
    io::write_labels(&p, &pair.source_labels).map_err(with_path(&p))?;
    let p = out("truth");
    io::write_deformation(&p, &pair.truth).map_err(with_path(&p))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Register(a) => register(a),
        Command::Warp(a) => warp(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Jacobian(a) => jacobian(a),
        Command::Synth(a) => synth(a),
    }
}

/// Parses `args` (program name first) and runs the command.
///
/// On failure returns the exit code and the one-line error message.
pub fn execute<I, T>(args: I) -> std::result::Result<(), (u8, String)>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            let f = Failure::Argument(first.to_string());
            return Err((f.code(), f.line()));
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(Failure::Argument("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli)),
            Err(e) => Err(Failure::Argument(format!("thread pool: {e}"))),
        },
        None => run(cli),
    };
    outcome.map_err(|f| (f.code(), f.line()))
}
