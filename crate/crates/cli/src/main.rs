use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tabtta::calibrator::post_train_calibrator;
use tabtta::handler::{write_trace, HandlerConfig, HandlerMode};
use tabtta::harness::{
    adapt_stream, build_stream, prepare_data, run_pipeline, score_stream, write_report, RunConfig, OUT_DIR_ENV,
};
use tabtta::source::{train_source_classifier, LogitsBatch};
use tabtta::tabular::{Dataset, Preprocessor, Role, Schema, SourceStats};
use tabtta::{Calibrator64, SourceModel64};

/// Test-time label-shift adaptation for tabular classifiers.
///
/// Staged verbs work on one seed and share the layout
/// `<out>/seed_<seed>/{source_model.bin, source_stats.json, calibrator.bin, streams/, traces/}`.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Repetition seed; staged verbs default to the first configured seed,
    /// `pipeline` defaults to all of them.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Takes precedence over the environment variable and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Handler mode for `adapt` and `evaluate`; defaults to the configured modes.
    #[arg(long, global = true)]
    mode: Option<HandlerMode>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train the source classifier and record source statistics.
    Train,
    /// Post-train the temperature network against the frozen classifier.
    Calibrate,
    /// Write the shifted test streams.
    Simulate,
    /// Run the handler over the streams and write per-sample traces.
    Adapt,
    /// Adapt and score every stream, writing `evaluation.json`.
    Evaluate,
    /// All stages for every seed, then the aggregated report.
    Pipeline,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    seed: u64,
    modes: Vec<HandlerMode>,
}

impl Run {
    fn seed_dir(&self) -> PathBuf {
        self.out.join(format!("seed_{}", self.seed))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.seed_dir().join(name)
    }
}

fn resolve_out(flag: Option<PathBuf>, env: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or(env)
        .or_else(|| cfg.out_dir.clone())
        .context("no output directory: pass --out, set the environment variable or `out_dir` in the config")
}

fn load_run(cli: &Cli) -> Result<Run> {
    let path = cli.config.as_ref().context("--config is required")?;
    let cfg = RunConfig::from_json_file(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate().context("invalid config")?;
    let env = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let out = resolve_out(cli.out.clone(), env, &cfg)?;
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    let modes = cli.mode.map_or_else(|| cfg.modes.clone(), |m| vec![m]);
    Ok(Run { cfg, out, seed, modes })
}

fn schema(cfg: &RunConfig) -> Result<Schema> {
    if let Some(spec) = &cfg.data.synthetic {
        return Ok(spec.schema());
    }
    let path = cfg.data.schema.as_ref().context("config has no schema path")?;
    Ok(Schema::from_json_file(path)?)
}

fn read_stats(run: &Run) -> Result<SourceStats> {
    let path = run.artifact("source_stats.json");
    let file = File::open(&path).with_context(|| format!("opening {} (run `train` first)", path.display()))?;
    Ok(serde_json::from_reader(file)?)
}

fn read_model(run: &Run) -> Result<SourceModel64> {
    let path = run.artifact("source_model.bin");
    SourceModel64::load(&path).with_context(|| format!("loading {} (run `train` first)", path.display()))
}

fn read_calibrator(run: &Run) -> Result<Calibrator64> {
    let path = run.artifact("calibrator.bin");
    Calibrator64::load(&path).with_context(|| format!("loading {} (run `calibrate` first)", path.display()))
}

fn train(run: &Run) -> Result<()> {
    let (source, _) = prepare_data(&run.cfg, run.seed)?;
    let pre = Preprocessor::fit(&source)?;
    let stats = SourceStats::compute(&source, &pre)?;
    let train_cfg = tabtta::nn::TrainConfig {
        seed: run.cfg.source_train.seed.wrapping_add(run.seed),
        ..run.cfg.source_train.clone()
    };
    let (model, history) = train_source_classifier::<f64>(&source, &pre, &train_cfg, &run.cfg.classifier)?;
    std::fs::create_dir_all(run.seed_dir())?;
    model.save(run.artifact("source_model.bin"), run.seed)?;
    serde_json::to_writer_pretty(File::create(run.artifact("source_stats.json"))?, &stats)?;
    log::info!(
        "source model: best epoch {} of {}, imbalance ratio {:.3}",
        history.best_epoch + 1,
        history.epoch_losses.len(),
        stats.imbalance_ratio
    );
    Ok(())
}

fn calibrate(run: &Run) -> Result<()> {
    let model = read_model(run)?;
    let stats = read_stats(run)?;
    let (source, _) = prepare_data(&run.cfg, run.seed)?;
    let train_cfg = tabtta::nn::TrainConfig {
        seed: run.cfg.calibrator_train.seed.wrapping_add(run.seed),
        ..run.cfg.calibrator_train.clone()
    };
    let (calibrator, history) = post_train_calibrator(&source, &model, &stats, &train_cfg, &run.cfg.calibrator)?;
    calibrator.save(run.artifact("calibrator.bin"), run.seed)?;
    if let (Some(first), Some(last)) = (history.epoch_losses.first(), history.epoch_losses.last()) {
        log::info!("calibrator loss {first:.5} -> {last:.5}");
    }
    Ok(())
}

fn simulate(run: &Run) -> Result<()> {
    let stats = read_stats(run)?;
    let (source, target) = prepare_data(&run.cfg, run.seed)?;
    let dir = run.artifact("streams");
    std::fs::create_dir_all(&dir)?;
    for shift in &run.cfg.shifts {
        let stream = build_stream(&target, &source, &stats, shift, run.seed)?;
        tabtta::shift::write_with_provenance(
            &stream.dataset,
            dir.join(format!("{}.csv", stream.name)),
            &stream.provenance,
        )?;
        log::info!("stream {}: {} rows", stream.name, stream.dataset.len());
    }
    Ok(())
}

fn read_stream(run: &Run, schema: &Schema, name: &str) -> Result<Dataset> {
    let path = run.artifact("streams").join(format!("{name}.csv"));
    Dataset::from_csv(&path, schema, Role::Target)
        .with_context(|| format!("reading {} (run `simulate` first)", path.display()))
}

/// Adapts every stream under every selected mode; `score` also evaluates.
fn adapt(run: &Run, score: bool) -> Result<()> {
    let model = read_model(run)?;
    let stats = read_stats(run)?;
    let calibrator = read_calibrator(run)?;
    let schema = schema(&run.cfg)?;
    let pre = model.preprocessor();
    let groups = pre.groups();
    let traces = run.artifact("traces");
    std::fs::create_dir_all(&traces)?;
    let mut results: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for shift in &run.cfg.shifts {
        let name = shift.display_name();
        let data = read_stream(run, &schema, &name)?;
        let encoded = pre.apply(&data)?.matrix;
        let logits = LogitsBatch::new(model.predict_encoded(encoded.view())?, (0..data.len()).collect())?;
        for &mode in &run.modes {
            let handler = HandlerConfig {
                mode,
                ..run.cfg.handler
            };
            let batches = adapt_stream(&encoded, &logits, &stats, &groups, &calibrator, &handler, run.cfg.batch_size)?;
            let trace = File::create(traces.join(format!("{name}__{mode}.csv")))?;
            write_trace(BufWriter::new(trace), &batches)?;
            if score {
                let labels = data.require_labels("scoring")?;
                let scored = score_stream(&batches, &logits, labels)?;
                results.entry(name.clone()).or_default().insert(mode.to_string(), scored.metrics);
            }
        }
    }
    if score {
        let path = run.artifact("evaluation.json");
        let mut text = serde_json::to_string_pretty(&results)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn pipeline(run: &Run, all_seeds: bool) -> Result<()> {
    let mut cfg = run.cfg.clone();
    cfg.modes.clone_from(&run.modes);
    if !all_seeds {
        cfg.seeds = vec![run.seed];
    }
    let report = run_pipeline(&cfg, Some(&run.out))?;
    write_report(&report, &run.out).context("stage `report` failed")?;
    for (shift, block) in &report.shifts {
        for (mode, metrics) in &block.modes {
            if let Some(f1) = metrics.get("macro_f1") {
                println!("{shift}\t{mode}\tmacro_f1 {:.4} ± {:.4}", f1.mean, f1.stderr);
            }
        }
    }
    Ok(())
}

fn stage_name(command: Command) -> &'static str {
    match command {
        Command::Train => "train",
        Command::Calibrate => "calibrate",
        Command::Simulate => "simulate",
        Command::Adapt => "adapt",
        Command::Evaluate => "evaluate",
        Command::Pipeline => "pipeline",
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = load_run(&cli)?;
    let result = match cli.command {
        Command::Train => train(&run),
        Command::Calibrate => calibrate(&run),
        Command::Simulate => simulate(&run),
        Command::Adapt => adapt(&run, false),
        Command::Evaluate => adapt(&run, true),
        Command::Pipeline => pipeline(&run, cli.seed.is_none()),
    };
    result.with_context(|| format!("stage `{}` failed", stage_name(cli.command)))
}
