//! Command-line pipeline: dataset generation, training, evaluation,
//! planning, the blob baseline, and the gradient checker.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use poke_core::blob::run_blob_episode;
use poke_core::metrics::{pose_error_degrees, relative_location_error};
use poke_core::model::{LossWeights, ModelLossCheck, ModelParams};
use poke_core::nn::{max_rel_error, GradCheckConfig};
use poke_core::planner::{run_episode, Episode, PlannerConfig, Selection};
use poke_core::rng::{stream, uniform01, StreamKind};
use poke_core::sim::{generate_interactions, ArenaParams, Image, Pose};
use poke_core::train::{train_with_weights, BatchEvaluator, SerialEvaluator};
use poke_cli::config::GlobalConfig;
use poke_cli::parallel::ParallelEvaluator;
use poke_cli::{checkpoint, datastore, experiment};

/// Gradient checks fail at or above this maximum relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "poke",
    about = "Poke-planning pipeline: simulate, learn, plan, evaluate",
    version
)]
struct Cli {
    /// Config file of `key = value` lines (falls back to $POKE_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for gradient evaluation (overrides the config).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an interaction dataset.
    Gen(GenArgs),
    /// Train a model on a dataset; writes a checkpoint and a training CSV.
    Train(TrainArgs),
    /// Run the experiment matrix and summarize it.
    Eval(EvalArgs),
    /// Plan one episode with a trained model, logging every step.
    Plan(PlanArgs),
    /// Run the geometry-blind blob baseline.
    Baseline(BaselineArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of interaction records.
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Joint,
    Inverse,
}

#[derive(Args)]
struct TrainArgs {
    /// Input dataset (.pokd).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "joint")]
    model: ModelKind,
    /// Forward-loss weight; `--model inverse` forces 0.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training CSV path (default: the checkpoint path with .train.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory (default: out_dir from the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated training sizes, e.g. 10000,20000.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Load checkpoints from this directory instead of training inline.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Trained model checkpoint (.pokm).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Start pose as "cx,cy,theta_degrees".
    #[arg(long, value_parser = parse_pose)]
    init: Pose,
    /// Goal pose as "cx,cy,theta_degrees".
    #[arg(long, value_parser = parse_pose)]
    goal: Pose,
    /// Sample actions from the predicted distributions instead of argmax.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_pokes: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    /// Start pose as "cx,cy,theta_degrees"; with --goal runs one verbose
    /// episode, otherwise a seeded batch is run.
    #[arg(long, value_parser = parse_pose, requires = "goal")]
    init: Option<Pose>,
    #[arg(long, value_parser = parse_pose, requires = "init")]
    goal: Option<Pose>,
    /// Batch size when no explicit poses are given.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Side length of the rendered images; also the arena size.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of parameter coordinates to probe.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    /// Interactions in the averaged check loss.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long)]
    lambda: Option<f64>,
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected \"cx,cy,theta_degrees\", got {s:?}"));
    }
    let num = |p: &str| -> Result<f64, String> {
        p.trim()
            .parse()
            .map_err(|_| format!("bad number {:?} in pose {s:?}", p.trim()))
    };
    let (cx, cy, deg) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    Ok(Pose::new(
        cx,
        cy,
        poke_core::fmath::wrap_angle(deg.to_radians()),
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<GlobalConfig> {
    let (mut cfg, source) = GlobalConfig::load(cli.config.as_deref())?;
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    eprintln!("# effective config ({source})");
    for line in cfg.render().lines() {
        eprintln!("# {line}");
    }
    Ok(cfg)
}

fn make_evaluator(jobs: usize) -> Result<Box<dyn BatchEvaluator>> {
    Ok(if jobs > 1 {
        Box::new(ParallelEvaluator::new(jobs)?)
    } else {
        Box::new(SerialEvaluator)
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gen(args) => {
            let cfg = load_config(&cli)?;
            let header = datastore::generate(args.n, args.seed, &cfg.arena, &args.out)?;
            println!(
                "wrote {} records (seed {}) to {}",
                header.record_count,
                header.seed,
                args.out.display()
            );
            println!(
                "arena {} px, rect {}x{}, k_t {}, k_r {}, noise {}",
                header.params.arena_size,
                header.params.rect_w,
                header.params.rect_h,
                header.params.k_t,
                header.params.k_r,
                header.params.noise_std
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Plan(args) => cmd_plan(&cli, args),
        Command::Baseline(args) => cmd_baseline(&cli, args),
        Command::Gradcheck(args) => cmd_gradcheck(&cli, args),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<ExitCode> {
    // Usage conflict, not a runtime failure: report and exit 2.
    if args.model == ModelKind::Inverse && args.lambda.is_some_and(|l| l != 0.0) {
        eprintln!("error: --model inverse trains with lambda = 0; drop --lambda or set it to 0");
        return Ok(ExitCode::from(2));
    }
    let mut cfg = load_config(cli)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.lambda {
        cfg.train.lambda = v;
    }
    if args.model == ModelKind::Inverse {
        cfg.train.lambda = 0.0;
    }
    cfg.validate()?;

    let (header, data) = datastore::load(&args.data)?;
    if !datastore::params_compatible(&cfg.arena, &header.params) {
        bail!(
            "dataset {} was generated under different arena parameters than the config",
            args.data.display()
        );
    }

    let evaluator = make_evaluator(cfg.jobs)?;
    let weights = LossWeights::joint(cfg.train.lambda);
    let mut log_csv = String::new();
    for line in cfg.render().lines() {
        let _ = writeln!(log_csv, "# {line}");
    }
    let _ = writeln!(
        log_csv,
        "epoch,train_loss,heldout_loss,heldout_loc_acc,heldout_angle_acc,heldout_len_acc"
    );
    let (params, stats) = train_with_weights(
        &data,
        &cfg.arena,
        &cfg.train,
        weights,
        &evaluator.as_ref(),
        |s| {
            eprintln!(
                "epoch {}: train {:.4} heldout {:.4} acc loc {:.3} angle {:.3} len {:.3}",
                s.epoch, s.train_loss, s.heldout_loss, s.heldout_loc_acc, s.heldout_angle_acc,
                s.heldout_len_acc
            );
        },
    )
    .context("training")?;
    for s in &stats {
        let _ = writeln!(
            log_csv,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.epoch,
            s.train_loss,
            s.heldout_loss,
            s.heldout_loc_acc,
            s.heldout_angle_acc,
            s.heldout_len_acc
        );
    }

    checkpoint::save(&args.out, &params, cfg.train.lambda, &cfg.arena, &cfg.render())?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("train.csv"));
    std::fs::write(&log_path, log_csv)
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "trained {} model (lambda {}) for {} epochs on {} records",
        if cfg.train.lambda == 0.0 {
            "inverse"
        } else {
            "joint"
        },
        cfg.train.lambda,
        stats.len(),
        data.len()
    );
    println!("checkpoint: {}", args.out.display());
    println!("training log: {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if let Some(sizes) = &args.sizes {
        let parsed: Result<Vec<usize>, _> =
            sizes.split(',').map(|s| s.trim().parse()).collect();
        cfg.eval.sizes = parsed.context("parsing --sizes")?;
    }
    if let Some(v) = args.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = args.seed {
        cfg.eval.seed = v;
    }
    if let Some(v) = args.data_seed {
        cfg.eval.data_seed = v;
    }
    cfg.validate()?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());

    let evaluator = make_evaluator(cfg.jobs)?;
    let csv_path = experiment::run_experiment(
        &cfg,
        evaluator.as_ref(),
        &out_dir,
        args.checkpoints.as_deref(),
        &mut |msg| eprintln!("{msg}"),
    )?;
    let csv = std::fs::read_to_string(&csv_path)?;
    let summary = experiment::summarize(&csv, cfg.eval.headline_k)?;
    let curves = summary.write_curves(&out_dir)?;
    println!("{}", summary.table());
    println!("episodes CSV: {}", csv_path.display());
    for p in curves {
        println!("curve: {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_episode(episode: &Episode) -> Result<()> {
    let deg = |t: f64| t.to_degrees();
    println!(
        "init ({:.2}, {:.2}, {:.1} deg), goal ({:.2}, {:.2}, {:.1} deg)",
        episode.init.cx,
        episode.init.cy,
        deg(episode.init.theta),
        episode.goal.cx,
        episode.goal.cy,
        deg(episode.goal.theta)
    );
    for (i, step) in episode.steps.iter().enumerate() {
        let rel = relative_location_error(&step.after, &episode.goal, &episode.init)?;
        let pose_err = pose_error_degrees(&step.after, &episode.goal);
        println!(
            "poke {:2}: p ({:6.2}, {:6.2}) dir {:7.1} deg len {:5.2} -> \
             pose ({:6.2}, {:6.2}, {:6.1} deg) rel_err {:.3} pose_err {:5.1} deg",
            i + 1,
            step.poke.px,
            step.poke.py,
            deg(step.poke.theta),
            step.poke.length,
            step.after.cx,
            step.after.cy,
            deg(step.after.theta),
            rel,
            pose_err
        );
    }
    let final_pose = episode.final_pose();
    let rel = relative_location_error(&final_pose, &episode.goal, &episode.init)?;
    println!(
        "terminal: {} after {} pokes, rel_err {:.3}, pose_err {:.1} deg",
        episode.terminal.as_str(),
        episode.steps.len(),
        rel,
        pose_error_degrees(&final_pose, &episode.goal)
    );
    Ok(())
}

fn cmd_plan(cli: &Cli, args: &PlanArgs) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let ckpt = checkpoint::load(&args.checkpoint)?;
    // The checkpoint's arena is authoritative: the model was trained on
    // renders under those parameters.
    let arena = ckpt.arena;
    let planner = PlannerConfig {
        max_pokes: args.max_pokes.unwrap_or(cfg.max_pokes),
        selection: if args.sample {
            Selection::Sample
        } else {
            Selection::Argmax
        },
        seed: args.seed,
    };
    println!(
        "model: lambda {} from {}",
        ckpt.lambda,
        args.checkpoint.display()
    );
    let episode = run_episode(&args.init, &args.goal, &ckpt.params, &arena, &planner)?;
    print_episode(&episode)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_baseline(cli: &Cli, args: &BaselineArgs) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    if let Some(v) = args.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = args.seed {
        cfg.eval.seed = v;
    }
    cfg.validate()?;
    if let (Some(init), Some(goal)) = (args.init, args.goal) {
        let episode = run_blob_episode(&init, &goal, &cfg.arena, &cfg.blob, cfg.eval.seed)?;
        print_episode(&episode)?;
        return Ok(ExitCode::SUCCESS);
    }

    let setups = experiment::episode_setups(&cfg)?;
    let mut final_errs = Vec::with_capacity(setups.len());
    let mut pokes_used = 0usize;
    for setup in &setups {
        let episode =
            run_blob_episode(&setup.init, &setup.goal, &cfg.arena, &cfg.blob, setup.seed)?;
        let rel = relative_location_error(&episode.final_pose(), &episode.goal, &episode.init)?;
        final_errs.push(rel);
        pokes_used += episode.steps.len();
    }
    let n = final_errs.len();
    let mean = final_errs.iter().sum::<f64>() / n as f64;
    let under = final_errs.iter().filter(|e| **e < 0.2).count();
    println!(
        "blob baseline over {n} episodes: mean final rel_err {:.3}, {} of {n} below 0.2 ({:.1}%), mean pokes {:.2}",
        mean,
        under,
        100.0 * under as f64 / n as f64,
        pokes_used as f64 / n as f64
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<ExitCode> {
    let cfg = load_config(cli)?;
    let arena = ArenaParams {
        arena_size: args.image_size.unwrap_or(cfg.arena.arena_size),
        ..cfg.arena
    };
    arena.validate()?;
    if args.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let lambda = args.lambda.unwrap_or(cfg.train.lambda);

    // Central differences are only meaningful where the loss is smooth and
    // the gradient is not vanishingly small. Zero-init biases sit exactly
    // on relu kinks wherever a binary scene leaves an input patch empty,
    // and dead units make half the coordinates vacuously zero. Probing at
    // a point with every unit active, on dense random images, checks the
    // same backward code with none of those artifacts.
    let mut params = ModelParams::init(arena.arena_size, args.seed)?;
    for layer in params.layers_mut() {
        for v in layer.b.data_mut() {
            *v += 0.5;
        }
    }
    let coords = params.param_count();
    let data = generate_interactions(args.samples, args.seed.wrapping_add(1), &arena)?;
    let mut img_rng = stream(args.seed, StreamKind::GradCheck, 1);
    let mut rand_img = || {
        let mut img = Image::new(arena.arena_size);
        for y in 0..arena.arena_size {
            for x in 0..arena.arena_size {
                img.set(x, y, uniform01(&mut img_rng));
            }
        }
        img
    };
    let items = data
        .iter()
        .map(|inter| (rand_img(), rand_img(), inter.poke))
        .collect();
    let mut check =
        ModelLossCheck::from_image_pairs(params, arena, items, LossWeights::joint(lambda))?;
    let gc = GradCheckConfig {
        sample_fraction: args.fraction,
        ..GradCheckConfig::default()
    };
    let mut rng = stream(args.seed, StreamKind::GradCheck, 0);
    let report = max_rel_error(&mut check, &gc, &mut rng);

    // Naming the worst coordinate's layer needs a params view again.
    let layer = ModelParams::init(arena.arena_size, args.seed)?
        .coord_layer_name(report.worst_coord);
    println!(
        "checked {} of {} coordinates at {} px (lambda {})",
        report.checked, coords, arena.arena_size, lambda
    );
    println!(
        "max rel err {:.3e} at coordinate {} ({layer}): analytic {:.6e}, numeric {:.6e}",
        report.max_rel_err, report.worst_coord, report.worst_analytic, report.worst_numeric
    );
    if report.max_rel_err < GRADCHECK_TOL {
        println!("PASS (tolerance {GRADCHECK_TOL:.0e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL (tolerance {GRADCHECK_TOL:.0e})");
        Ok(ExitCode::from(1))
    }
}
