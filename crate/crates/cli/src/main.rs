//! `lamcast`: build graphs, generate synthetic datasets, train the three
//! model variants, evaluate rollouts and export forecasts.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lamcast_core::checkpoint::{load_checkpoint, save_checkpoint};
use lamcast_core::data::{
    compute_norm_stats, generate_trajectory, load_dataset, save_dataset, window_samples,
    materialize_sample, PhysicsConfig, Trajectory,
};
use lamcast_core::eval::{
    evaluate, forecast_export, write_degrees_csv, write_rmse_csv, write_spatial_csv, EvalConfig,
};
use lamcast_core::graph::{build_lam_graph, load_graph, serialize_graph, GridSpec, Variant};
use lamcast_core::model::{ModelConfig, ModelParams};
use lamcast_core::train::{train_phase, TrainConfig};
use lamcast_core::Scalar;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lamcast", about = "Graph-based limited-area neural weather prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mesh graph over a grid and write it to a file.
    BuildGraph(BuildGraphArgs),
    /// Generate synthetic trajectories and normalization statistics.
    GenData(GenDataArgs),
    /// Train a model (phase 1: single-step; phase 2: 4-step rollouts).
    Train(TrainArgs),
    /// Evaluate a checkpoint: RMSE tables, spatial maps, degree diagnostic.
    Evaluate(EvalArgs),
    /// Export forecast fields for one test sample.
    Forecast(ForecastArgs),
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Grid size as WxH, e.g. 238x268.
    #[arg(long)]
    grid: String,
    /// Number of mesh levels.
    #[arg(long)]
    levels: usize,
    /// Level-1 mesh nodes per axis (must be divisible by 3^(levels-1)).
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    variant: VariantArg,
    /// Boundary band width in cells.
    #[arg(long, default_value_t = 10)]
    boundary: usize,
    /// Dataset directory supplying the topography field (zeros if omitted).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Grid size as WxH.
    #[arg(long)]
    grid: String,
    /// Number of trajectories.
    #[arg(long)]
    n_traj: usize,
    /// Trajectory length in data steps (1 h each; model steps are 3 h).
    #[arg(long)]
    len: usize,
    #[arg(long)]
    seed: u64,
    /// State variables (>= 3 adds the two wind components).
    #[arg(long, default_value_t = 3)]
    vars: usize,
    /// Boundary band width recorded for downstream consumers.
    #[arg(long, default_value_t = 10)]
    boundary: usize,
    /// Mean drift speed in cells/hour (the large-scale advecting component).
    #[arg(long, default_value_t = 1.2)]
    mean_flow: f64,
    /// Peak speed of the random stream modes in cells/hour.
    #[arg(long, default_value_t = 0.8)]
    flow_amplitude: f64,
    #[arg(long, default_value_t = 0.05)]
    diffusivity: f64,
    /// Integrator substeps per data step.
    #[arg(long, default_value_t = 4)]
    substeps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Multiscale,
    Hierarchical,
    Single,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Multiscale => Variant::MultiScale,
            VariantArg::Hierarchical => Variant::Hierarchical,
            VariantArg::Single => Variant::SingleLevel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model variant; must match the graph file.
    #[arg(long)]
    variant: VariantArg,
    /// 1 = single-step prediction, 2 = fine-tuning on 4-step rollouts.
    #[arg(long)]
    phase: u8,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting checkpoint (required for phase 2).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Latent width for freshly initialized models.
    #[arg(long, default_value_t = 64)]
    latent: usize,
    /// Processor layers for freshly initialized models (default: 4, or 2 for
    /// the hierarchical variant).
    #[arg(long)]
    k_layers: Option<usize>,
    /// Optional gradient-norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Disable batch-member parallelism (results are identical either way).
    #[arg(long)]
    serial: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    /// Write intermediate checkpoints every N epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Loss-curve CSV path (default: <out>.loss.csv).
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Rollout length in model steps.
    #[arg(long, default_value_t = 19)]
    steps: usize,
    /// Lead steps for spatial loss maps.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10, 19])]
    spatial_leads: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample index into the windowed test samples.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 19)]
    steps: usize,
    /// Also write SVG heatmaps.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_grid(s: &str, boundary: usize) -> Result<GridSpec> {
    let (w, h) = s
        .split_once('x')
        .with_context(|| format!("grid '{s}' is not WxH"))?;
    Ok(GridSpec::new(
        w.parse().context("bad grid width")?,
        h.parse().context("bad grid height")?,
        boundary,
    )?)
}

fn mean_topography(trajectories: &[Trajectory]) -> Vec<f64> {
    // all trajectories share grid dimensions; average their topography
    let n = trajectories[0].topography.len();
    let mut topo = vec![0.0; n];
    for tr in trajectories {
        for (t, v) in topo.iter_mut().zip(&tr.topography) {
            *t += v;
        }
    }
    for t in &mut topo {
        *t /= trajectories.len() as f64;
    }
    topo
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let grid = parse_grid(&args.grid, args.boundary)?;
    let topo = match &args.data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            let tr = &ds.trajectories[0];
            if tr.width != grid.width || tr.height != grid.height {
                bail!(
                    "dataset grid {}x{} does not match --grid {}",
                    tr.width,
                    tr.height,
                    args.grid
                );
            }
            mean_topography(&ds.trajectories)
        }
        None => vec![0.0; grid.n_nodes()],
    };
    let graph = build_lam_graph(&grid, args.n1, args.levels, args.variant.into(), &topo)?;
    let stats = graph.stats();
    serialize_graph(&graph, &args.out)?;
    println!(
        "graph {} written to {}: {} mesh nodes, {} mesh edges, {} grid2mesh ({} isolated grid nodes), {} mesh2grid",
        graph.variant,
        args.out.display(),
        stats.mesh_nodes,
        stats.mesh_edges,
        stats.g2m_edges,
        stats.g2m_isolated_grid_nodes,
        stats.m2g_edges
    );
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let grid = parse_grid(&args.grid, args.boundary)?;
    let cfg = PhysicsConfig {
        n_vars: args.vars,
        mean_flow: args.mean_flow,
        flow_amplitude: args.flow_amplitude,
        diffusivity: args.diffusivity,
        substeps: args.substeps,
        ..PhysicsConfig::default()
    };
    let mut trajectories = Vec::with_capacity(args.n_traj);
    for k in 0..args.n_traj {
        trajectories.push(generate_trajectory(
            &grid,
            args.seed.wrapping_add(k as u64),
            args.len,
            &cfg,
        )?);
    }
    let stats = compute_norm_stats(&trajectories)?;
    save_dataset(&args.out, &trajectories, &stats)?;
    println!(
        "{} trajectories of {} data steps written to {}",
        args.n_traj,
        args.len,
        args.out.display()
    );
    Ok(())
}

fn run_training<S: Scalar>(
    mut params: ModelParams<S>,
    graph: &lamcast_core::graph::LamGraph,
    dataset: &lamcast_core::data::Dataset,
    args: &TrainArgs,
    n_rollout: usize,
) -> Result<()> {
    let config = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        n_rollout,
        seed: args.seed,
        grad_clip: args.grad_clip,
        parallel: !args.serial,
        checkpoint_every: args.checkpoint_every,
    };
    let extra = vec![
        ("grid_width".to_string(), graph.grid.width.to_string()),
        ("grid_height".to_string(), graph.grid.height.to_string()),
        ("boundary_width".to_string(), graph.grid.boundary_width.to_string()),
        ("n1".to_string(), graph.n1.to_string()),
    ];
    let out = args.out.clone();
    let extra_cb = extra.clone();
    let report = train_phase(
        &mut params,
        graph,
        &dataset.trajectories,
        &dataset.stats,
        &config,
        move |epoch, p| {
            let path = out.with_extension(format!("epoch{epoch}.bin"));
            save_checkpoint(&path, p, &dataset.stats, &extra_cb)?;
            log::info!("checkpoint at epoch {epoch}: {}", path.display());
            Ok(())
        },
    )?;
    save_checkpoint(&args.out, &params, &dataset.stats, &extra)?;
    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in &report.loss_curve {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(&curve_path, csv)?;
    if let Some((e, l)) = report.loss_curve.last() {
        println!(
            "trained {} epochs ({} optimizer steps), final loss {l:.6} (epoch {e}); checkpoint {}",
            args.epochs,
            report.optimizer_steps,
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let requested: Variant = args.variant.into();
    if requested != graph.variant {
        bail!(
            "--variant {requested} does not match graph variant {}",
            graph.variant
        );
    }
    let dataset = load_dataset(&args.data)?;
    let n_rollout = match args.phase {
        1 => 1,
        2 => 4,
        p => bail!("--phase must be 1 or 2, got {p}"),
    };
    if args.phase == 2 && args.init.is_none() {
        bail!("phase 2 fine-tuning requires --init with a phase-1 checkpoint");
    }

    let params64 = match &args.init {
        Some(path) => {
            let (p, _, _) = load_checkpoint(path)?;
            if p.config.variant != graph.variant {
                bail!(
                    "checkpoint variant {} does not match graph variant {}",
                    p.config.variant,
                    graph.variant
                );
            }
            p
        }
        None => {
            let mut cfg = ModelConfig::standard(graph.variant, graph.n_levels(), dataset.stats.n_vars());
            cfg.latent_width = args.latent;
            if let Some(k) = args.k_layers {
                cfg.k_layers = k;
            }
            ModelParams::init(&cfg, args.seed)?
        }
    };

    match args.precision {
        PrecisionArg::F64 => run_training(params64, &graph, &dataset, &args, n_rollout),
        PrecisionArg::F32 => {
            let params32: ModelParams<f32> = params64.convert();
            run_training(params32, &graph, &dataset, &args, n_rollout)
        }
    }
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let (params, stats, _) = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    if stats.n_vars() != dataset.stats.n_vars() {
        bail!(
            "checkpoint was trained on {} variables, dataset has {}",
            stats.n_vars(),
            dataset.stats.n_vars()
        );
    }
    let config = EvalConfig {
        t_steps: args.steps,
        spatial_leads: args.spatial_leads.clone(),
    };
    // evaluate with the checkpoint's stats so de-normalization matches training
    let report = evaluate(&params, &graph, &dataset.trajectories, &stats, &config)?;
    std::fs::create_dir_all(&args.out)?;
    write_rmse_csv(&report, &args.out.join("rmse.csv"))?;
    write_spatial_csv(&report, &graph, &args.out)?;
    write_degrees_csv(&report.degrees, &args.out.join("degrees.csv"))?;
    println!(
        "evaluated {} samples over {} lead steps; reports in {}",
        report.n_samples,
        args.steps,
        args.out.display()
    );
    let last = report.lead_steps.len() - 1;
    for (vi, var) in report.variables.iter().enumerate() {
        println!(
            "  {var}: rmse@1 {:.4} (baseline {:.4}), rmse@{} {:.4} (baseline {:.4})",
            report.rmse[vi][0],
            report.baseline_rmse[vi][0],
            report.lead_steps[last],
            report.rmse[vi][last],
            report.baseline_rmse[vi][last]
        );
    }
    Ok(())
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let (params, stats, _) = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset(&args.data)?;
    let mut specs = Vec::new();
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        specs.extend(window_samples(tr.len(), i, args.steps));
    }
    if specs.is_empty() {
        bail!("no samples long enough for {} rollout steps", args.steps);
    }
    if args.sample >= specs.len() {
        bail!("--sample {} out of range ({} samples)", args.sample, specs.len());
    }
    let spec = specs[args.sample];
    let sample = materialize_sample(&dataset.trajectories[spec.trajectory], &stats, spec, args.steps)?;
    let paths = forecast_export(&params, &graph, &sample, &stats, args.steps, &args.out, args.svg)?;
    println!("{} files written to {}", paths.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Forecast(args) => cmd_forecast(args),
    }
}
