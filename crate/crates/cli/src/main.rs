use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graph_hawkes::checkpoint::{Checkpoint, IntensitySource, LoadedSource, LogDigest};
use graph_hawkes::config::ExperimentConfig;
use graph_hawkes::events::{load_csv, save_csv, Event, EventSequence, ReadOptions};
use graph_hawkes::exec::set_workers;
use graph_hawkes::metrics::{build_report, kernel_recovery_error, EvalOptions, ProbeGrid};
use graph_hawkes::model::KernelModel;
use graph_hawkes::objective::min_grid_intensity;
use graph_hawkes::simulate::{matrix_to_csv, thinning_simulate};
use graph_hawkes::train::{gradient_check, split_indices, train, write_log, GradCheckOptions};
use graph_hawkes::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "graph-hawkes", version, about = "Deep-kernel point processes on graphs")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sequences from a ground truth or a checkpoint.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Simulate from this checkpoint instead of the configured ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Split the data, train a model and write a checkpoint and log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Event CSV; defaults to `data.events` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Held-out likelihood and predictive metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write k(t', t' + lag, ., .) as one CSV matrix per lag.
    ExportKernel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        t_prime: f64,
        /// Comma-separated lags; an empty list writes no matrices.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        lags: String,
        /// Evaluate the networks directly instead of the interpolation grid.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a small batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Event CSV; its first events (at most 10) form the batch.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_per_block: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        set_workers(w);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Simulate {
            config,
            checkpoint,
            common,
        } => simulate(&config, checkpoint.as_deref(), &common, workers),
        Command::Train {
            config,
            data,
            common,
        } => train_cmd(&config, data.as_deref(), &common, workers),
        Command::Evaluate {
            checkpoint,
            data,
            common,
        } => evaluate(&checkpoint, &data, &common, workers),
        Command::ExportKernel {
            checkpoint,
            t_prime,
            lags,
            exact,
            out,
        } => export_kernel(&checkpoint, t_prime, &parse_lags(&lags)?, exact, &out, workers),
        Command::Gradcheck {
            config,
            data,
            max_per_block,
            tolerance,
            common,
        } => gradcheck(&config, data.as_deref(), max_per_block, tolerance, &common, workers),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &ExperimentConfig,
    workers: Option<usize>,
    outputs: &[&str],
    details: Value,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "workers": workers,
        "outputs": outputs,
        "details": details,
        "config": serde_json::to_value(config)?,
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn source_name(ck: &Checkpoint) -> String {
    match &ck.source {
        IntensitySource::Learned { .. } => "learned".to_string(),
        IntensitySource::GroundTruth { spec } => spec.kind.name().to_string(),
    }
}

fn simulate(config: &Path, checkpoint: Option<&Path>, common: &Common, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, common.seed)?;
    let sim_cfg = cfg.sim_config();
    let (kind, sim) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let source = ck.instantiate()?;
            let sim_cfg = graph_hawkes::simulate::SimConfig {
                horizon: source.horizon(),
                ..sim_cfg
            };
            (source_name(&ck), thinning_simulate(source.influence(), &sim_cfg)?)
        }
        None => {
            let spec = cfg.truth_spec().ok_or_else(|| Error::Config {
                field: "graph.ground_truth".into(),
                message: "simulation needs a ground truth kind or --checkpoint".into(),
            })?;
            let truth = spec.build()?;
            (spec.kind.name().to_string(), thinning_simulate(&truth, &sim_cfg)?)
        }
    };
    prepare_out(&common.out)?;
    save_csv(common.out.join("events.csv"), &sim.sequences)?;
    let total: usize = sim.sequences.iter().map(EventSequence::len).sum();
    println!(
        "simulated {} sequences ({total} events, mean length {:.3}) from {kind}",
        sim.sequences.len(),
        sim.mean_length()
    );
    write_manifest(
        &common.out,
        "simulate",
        &cfg,
        workers,
        &["events.csv"],
        json!({
            "kind": kind,
            "num_sequences": sim.sequences.len(),
            "num_events": total,
            "mean_length": sim.mean_length(),
            "candidates": sim.candidates,
            "bound_violations": sim.violations,
        }),
    )
}

fn read_events(path: &Path, cfg: &ExperimentConfig, num_nodes: usize) -> Result<Vec<EventSequence>> {
    let opts = ReadOptions {
        num_nodes: Some(num_nodes),
        num_sequences: None,
        jitter_seed: cfg.data.jitter.then_some(cfg.seed),
    };
    load_csv(path, cfg.horizon, &opts)
}

fn train_cmd(config: &Path, data: Option<&Path>, common: &Common, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, common.seed)?;
    let data_path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.events.clone())
        .ok_or_else(|| Error::invalid("train needs --data or `data.events` in the config"))?;
    let graph = cfg.load_graph()?;
    let sequences = read_events(&data_path, &cfg, graph.num_nodes())?;
    if sequences.len() < 2 {
        return Err(Error::invalid("need at least two sequences to split into train and test"));
    }
    let (rest_ids, test_ids) = split_indices(sequences.len(), cfg.data.test_fraction, cfg.seed)?;
    let (train_pos, val_pos) = split_indices(rest_ids.len(), cfg.data.validation_fraction, cfg.seed.wrapping_add(1))?;
    let pick = |ids: &[usize]| -> Vec<EventSequence> { ids.iter().map(|&i| sequences[i].clone()).collect() };
    let train_ids: Vec<usize> = train_pos.iter().map(|&p| rest_ids[p]).collect();
    let val_ids: Vec<usize> = val_pos.iter().map(|&p| rest_ids[p]).collect();
    let (train_set, val_set, test_set) = (pick(&train_ids), pick(&val_ids), pick(&test_ids));
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = KernelModel::new(&graph, &cfg.model, cfg.horizon, &mut rng)?;
    let outcome = train(model, &train_set, &val_set, &cfg.train_config())?;
    let best = outcome.state.best.as_ref().map(|b| (b.epoch, b.validation_loss));
    let digest = LogDigest::from_log(&outcome.log, best);

    prepare_out(&common.out)?;
    Checkpoint::learned(cfg.clone(), &outcome.model, Some(digest.clone())).save(common.out.join("checkpoint.json"))?;
    let log_path = common.out.join("train_log.ndjson");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_log(std::io::BufWriter::new(file), &outcome.log)?;
    save_csv(common.out.join("test.csv"), &test_set)?;
    println!(
        "trained {} epochs on {} sequences; best epoch {:?}, validation loss {:?}",
        digest.epochs,
        train_set.len(),
        digest.best_epoch,
        digest.best_validation_loss
    );
    write_manifest(
        &common.out,
        "train",
        &cfg,
        workers,
        &["checkpoint.json", "train_log.ndjson", "test.csv"],
        json!({
            "data": data_path.display().to_string(),
            "num_sequences": sequences.len(),
            "train_ids": train_ids,
            "validation_ids": val_ids,
            "test_ids": test_ids,
            "log_digest": serde_json::to_value(&digest)?,
        }),
    )
}

fn evaluate(checkpoint: &Path, data: &Path, common: &Common, workers: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let source = ck.instantiate()?;
    let model = source.influence();
    let opts = ReadOptions {
        num_nodes: Some(model.num_nodes()),
        num_sequences: None,
        jitter_seed: cfg.data.jitter.then_some(cfg.seed),
    };
    let test = load_csv(data, source.horizon(), &opts)?;
    if test.is_empty() {
        return Err(Error::invalid(format!("{} contains no sequences", data.display())));
    }
    let ll = source.test_loglik(&test, cfg.evaluation.quadrature_step)?;
    let kernel_err = match cfg.truth_spec() {
        Some(spec) => {
            let truth = graph_hawkes::simulate::GroundTruthSpec {
                horizon: source.horizon(),
                ..spec
            }
            .build()?;
            if truth.graph().num_nodes() == model.num_nodes() {
                let probe = ProbeGrid::standard(source.horizon(), cfg.evaluation.probe_max_lag.min(model.max_lag()));
                Some(kernel_recovery_error(model, &truth, &probe)?)
            } else {
                None
            }
        }
        None => None,
    };
    let eval_opts = EvalOptions {
        generated_sequences: cfg.evaluation.generated_sequences,
        seed: cfg.seed,
        smoothing: cfg.evaluation.smoothing,
    };
    let report = build_report(model, ll, &test, kernel_err, &eval_opts)?;
    print!("{}", report.table());
    prepare_out(&common.out)?;
    write_json(&common.out.join("metrics.json"), &serde_json::to_value(&report)?)?;
    write_manifest(
        &common.out,
        "evaluate",
        &cfg,
        workers,
        &["metrics.json"],
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "data": data.display().to_string(),
            "source": source_name(&ck),
        }),
    )
}

fn parse_lags(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::invalid(format!("cannot parse lag `{s}`"))))
        .collect()
}

fn export_kernel(
    checkpoint: &Path,
    t_prime: f64,
    lags: &[f64],
    exact: bool,
    out: &Path,
    workers: Option<usize>,
) -> Result<()> {
    if let Some(bad) = lags.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("lag {bad} must be non-negative")));
    }
    if !t_prime.is_finite() {
        return Err(Error::invalid("t' must be finite"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let source = ck.instantiate()?;
    prepare_out(out)?;
    let mut files = Vec::new();
    for &lag in lags {
        let matrix = match &source {
            LoadedSource::Learned(m) => m.kernel_matrix(t_prime, lag, exact)?,
            LoadedSource::GroundTruth(g) => g.kernel_matrix(t_prime, lag),
        };
        let name = format!("kernel_t{t_prime}_lag{lag}.csv");
        let path = out.join(&name);
        std::fs::write(&path, matrix_to_csv(&matrix)).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    println!("wrote {} kernel matrices", files.len());
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(
        out,
        "export-kernel",
        &ck.config,
        workers,
        &names,
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "source": source_name(&ck),
            "t_prime": t_prime,
            "lags": lags,
            "exact": exact,
        }),
    )
}

/// At most `limit` events from the front of `data`, kept per sequence.
fn small_batch(data: &[EventSequence], limit: usize) -> Result<Vec<EventSequence>> {
    let mut left = limit;
    let mut out = Vec::new();
    for seq in data {
        if left == 0 {
            break;
        }
        let take = seq.len().min(left);
        left -= take;
        out.push(EventSequence::new(seq.horizon(), seq.events()[..take].to_vec())?);
    }
    Ok(out)
}

fn gradcheck(
    config: &Path,
    data: Option<&Path>,
    max_per_block: Option<usize>,
    tolerance: f64,
    common: &Common,
    workers: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, common.seed)?;
    let graph = cfg.load_graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = KernelModel::new(&graph, &cfg.model, cfg.horizon, &mut rng)?;
    let batch = match data.map(Path::to_path_buf).or_else(|| cfg.data.events.clone()) {
        Some(path) => small_batch(&read_events(&path, &cfg, graph.num_nodes())?, 10)?,
        None => {
            let mut times: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..cfg.horizon)).collect();
            times.sort_by(f64::total_cmp);
            let events = times
                .into_iter()
                .map(|t| Event {
                    t,
                    node: rng.gen_range(0..graph.num_nodes()),
                })
                .collect();
            vec![EventSequence::new(cfg.horizon, events)?]
        }
    };
    let floor = min_grid_intensity(&model, &batch, model.barrier_points(), Default::default())?;
    let opts = GradCheckOptions {
        loss: cfg.train.loss,
        barrier: Some(((floor - 1.0).min(0.0), cfg.train.w0)),
        max_per_block,
        ..Default::default()
    };
    let report = gradient_check(&model, &batch, &opts)?;
    for b in &report.blocks {
        println!("{:<10} {:>6} params  rel. error {:.3e}", b.block, b.checked, b.rel_error);
    }
    let worst = report.max_rel_error();
    prepare_out(&common.out)?;
    write_json(&common.out.join("gradcheck.json"), &serde_json::to_value(&report)?)?;
    write_manifest(
        &common.out,
        "gradcheck",
        &cfg,
        workers,
        &["gradcheck.json"],
        json!({ "max_rel_error": worst, "tolerance": tolerance }),
    )?;
    if worst > tolerance {
        return Err(Error::TrainingAborted(format!(
            "gradient check failed: relative error {worst:.3e} exceeds {tolerance:.1e}"
        )));
    }
    Ok(())
}
