//! Command-line entry points: train, eval, visualize, benchmark.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error, 4 internal
//! invariant violation. Every command is deterministic: identical inputs
//! and output targets produce byte-identical outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, Experiment, Strategy};
use crate::bgdecomp;
use crate::config::{RunConfig, ScoreKind};
use crate::dump::{self, Checkpoint, FeatureDump};
use crate::error::Error;
use crate::scoring::{self, ScoreRow};
use crate::training;
use crate::types::FeatureBundle;
use crate::viz::{self, SampleMaps};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Command failure carrying the process exit code.
#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

impl CliFailure {
    fn config(message: impl Into<String>) -> Self {
        CliFailure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
    fn data(message: impl Into<String>) -> Self {
        CliFailure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

type CliResult = std::result::Result<(), CliFailure>;

/// Map a library error to an exit code by kind.
fn classify(err: Error) -> CliFailure {
    let code = match &err {
        Error::InvalidConfig { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Data { .. } | Error::Format(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    };
    CliFailure {
        code,
        message: err.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mambo",
    version,
    about = "Few-shot out-of-distribution detection with background-prompt decomposition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train prompts on a synthetic benchmark or imported feature dumps.
    Train(TrainArgs),
    /// Score test dumps against a checkpoint and report FPR95/AUROC.
    Eval(EvalArgs),
    /// Emit similarity/mask/weight maps for selected test samples.
    Visualize(VisualizeArgs),
    /// Run the strategy ablation grid over several seeds.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Path to the key=value run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV path (defaults to the checkpoint path with a
    /// .trace.csv suffix).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write the three encoded splits as feature dumps into this
    /// directory (train.mmbo, id_test.mmbo, ood_test.mmbo).
    #[arg(long)]
    pub emit_datasets: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature dump of in-distribution test samples.
    #[arg(long)]
    pub id: PathBuf,
    /// Feature dump of out-of-distribution test samples.
    #[arg(long)]
    pub ood: PathBuf,
    /// Scoring rule: mcm, glmcm, or rmcm (defaults to the checkpoint's).
    #[arg(long, value_parser = parse_score)]
    pub score: Option<ScoreKind>,
    /// Per-sample score report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_score(raw: &str) -> std::result::Result<ScoreKind, String> {
    raw.parse::<ScoreKind>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated indices into the ID test split.
    #[arg(long)]
    pub samples: String,
    /// Output directory for the emitted maps.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// Run config; the built-in benchmark defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    /// Comma-separated strategies among baseline, refinement, sct, full.
    #[arg(long, default_value = "baseline,refinement,sct,full")]
    pub strategies: String,
    /// Optional CSV output with one row per grid cell.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Visualize(args) => cmd_visualize(args),
        Command::Benchmark(args) => cmd_benchmark(args),
    }
}

fn read_config(path: &Path) -> std::result::Result<RunConfig, CliFailure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliFailure::config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse_str(&text).map_err(|e| CliFailure::config(e.to_string()))
}

fn load_split(dir: &Path, name: &str) -> std::result::Result<Vec<FeatureBundle>, CliFailure> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliFailure::data(format!(
            "dataset file {} does not exist",
            path.display()
        )));
    }
    let dump = dump::read_dump(&path).map_err(classify)?;
    dump.to_bundles().map_err(classify)
}

fn prepare_experiment(cfg: &RunConfig) -> std::result::Result<Experiment, CliFailure> {
    match &cfg.dataset_dir {
        Some(dir) => {
            let train = load_split(dir, "train.mmbo")?;
            let id_test = load_split(dir, "id_test.mmbo")?;
            let ood_test = load_split(dir, "ood_test.mmbo")?;
            Experiment::from_bundles(cfg, cfg.model.seed, train, id_test, ood_test)
                .map_err(classify)
        }
        None => Experiment::prepare(cfg, cfg.model.seed).map_err(classify),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliFailure::data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliFailure::data(format!("cannot write {}: {e}", path.display())))
}

fn trace_csv(trace: &training::LossTrace) -> String {
    let mut out = String::from("epoch,total,ce,ood,floor_hits\n");
    for e in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.total, e.ce, e.ood, e.floor_hits
        ));
    }
    out
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = read_config(&args.config)?;
    let mut exp = prepare_experiment(&cfg)?;
    let trace = exp.train_prompts(cfg.train.flags).map_err(classify)?;

    let checkpoint = Checkpoint {
        run: cfg.clone(),
        prompts: exp.prompts.clone(),
    };
    write_bytes(&args.out, &checkpoint.to_bytes().map_err(classify)?)?;

    let trace_path = args.trace.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    write_bytes(&trace_path, trace_csv(&trace).as_bytes())?;

    if let Some(dir) = &args.emit_datasets {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliFailure::data(format!("cannot create {}: {e}", dir.display())))?;
        let class_features = exp.text.encode_all_classes(&exp.prompts).map_err(classify)?;
        let background = exp.text.encode_background(&exp.prompts).map_err(classify)?;
        for (name, bundles) in [
            ("train.mmbo", &exp.train),
            ("id_test.mmbo", &exp.id_test),
            ("ood_test.mmbo", &exp.ood_test),
        ] {
            let dump = FeatureDump::from_bundles(
                cfg.model.grid_h,
                cfg.model.grid_w,
                cfg.model.feature_dim,
                &class_features,
                Some(&background),
                bundles,
            )
            .map_err(classify)?;
            write_bytes(&dir.join(name), &dump.to_bytes().map_err(classify)?)?;
        }
    }

    match trace.last() {
        Some(last) => println!(
            "final epoch={} total={} ce={} ood={}",
            last.epoch, last.total, last.ce, last.ood
        ),
        None => println!("no training epochs requested; checkpoint holds the initialization"),
    }
    let floor_hits: u64 = trace.iter().map(|e| e.floor_hits).sum();
    if floor_hits > 0 {
        println!("warning: probability floor engaged {floor_hits} times");
    }
    Ok(())
}

fn scored_rows(
    exp: &Experiment,
    bundles: &[FeatureBundle],
    prefix: &str,
) -> std::result::Result<Vec<ScoreRow>, CliFailure> {
    let mcm = exp.score_split(bundles, ScoreKind::Mcm).map_err(classify)?;
    let glmcm = exp
        .score_split(bundles, ScoreKind::GlMcm)
        .map_err(classify)?;
    let rmcm = exp
        .score_split(bundles, ScoreKind::Rmcm)
        .map_err(classify)?;
    Ok(bundles
        .iter()
        .enumerate()
        .map(|(i, b)| ScoreRow {
            sample_id: format!("{prefix}{i:04}"),
            label: b.label,
            mcm: mcm[i],
            glmcm: glmcm[i],
            rmcm: rmcm[i],
        })
        .collect())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let checkpoint = Checkpoint::read(&args.checkpoint).map_err(classify)?;
    let cfg = checkpoint.run.clone();
    let read_split = |path: &Path| -> std::result::Result<Vec<FeatureBundle>, CliFailure> {
        let dump = dump::read_dump(path).map_err(classify)?;
        if dump.feature_dim as usize != cfg.model.feature_dim
            || dump.grid_h as usize != cfg.model.grid_h
            || dump.grid_w as usize != cfg.model.grid_w
        {
            return Err(CliFailure::data(format!(
                "dump {} has shape d={} grid={}x{}, checkpoint expects d={} grid={}x{}",
                path.display(),
                dump.feature_dim,
                dump.grid_h,
                dump.grid_w,
                cfg.model.feature_dim,
                cfg.model.grid_h,
                cfg.model.grid_w,
            )));
        }
        dump.to_bundles().map_err(classify)
    };
    let id_test = read_split(&args.id)?;
    let ood_test = read_split(&args.ood)?;

    let mut exp = Experiment::from_bundles(&cfg, cfg.model.seed, Vec::new(), id_test, ood_test)
        .map_err(classify)?;
    exp.prompts = checkpoint.prompts;

    let kind = args.score.unwrap_or(cfg.score);
    let id_scores = exp
        .score_split(&exp.id_test, kind)
        .map_err(classify)?;
    let ood_scores = exp
        .score_split(&exp.ood_test, kind)
        .map_err(classify)?;
    let report = scoring::DetectionReport::from_scores(id_scores, ood_scores).map_err(classify)?;

    if let Some(out) = &args.out {
        let mut rows = scored_rows(&exp, &exp.id_test, "id")?;
        rows.extend(scored_rows(&exp, &exp.ood_test, "ood")?);
        write_bytes(out, scoring::score_csv(&rows).as_bytes())?;
    }
    println!("FPR95={:.6} AUROC={:.6}", report.fpr95, report.auroc);
    Ok(())
}

fn parse_index_list(raw: &str, field: &str) -> std::result::Result<Vec<usize>, CliFailure> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliFailure::config(format!("invalid {field} entry `{s}`")))
        })
        .collect()
}

fn cmd_visualize(args: VisualizeArgs) -> CliResult {
    let checkpoint = Checkpoint::read(&args.checkpoint).map_err(classify)?;
    let cfg = checkpoint.run.clone();
    let mut exp = prepare_experiment(&cfg)?;
    exp.prompts = checkpoint.prompts;

    let indices = parse_index_list(&args.samples, "samples")?;
    let class_features = exp.text.encode_all_classes(&exp.prompts).map_err(classify)?;
    let background = exp.text.encode_background(&exp.prompts).map_err(classify)?;

    for &idx in &indices {
        let bundle = exp.id_test.get(idx).ok_or_else(|| {
            CliFailure::config(format!(
                "sample index {idx} out of range, id test split has {} samples",
                exp.id_test.len()
            ))
        })?;
        let fwd = training::forward_sample(
            bundle,
            &class_features,
            &background,
            &cfg.model,
            &cfg.train.flags,
            None,
        )
        .map_err(classify)?;
        let label = bundle.label.expect("id test samples are labeled");
        let gt_column: Vec<f64> = fwd.maps.class_sim.iter().map(|row| row[label]).collect();
        let maps = SampleMaps {
            refined_sim: fwd.maps.refined_sim.clone(),
            delta: bgdecomp::refinement_weights(&gt_column),
            selection: fwd.selection.clone(),
        };
        let written = viz::emit_sample_maps(
            &args.out,
            &format!("s{idx:04}"),
            &maps,
            cfg.model.grid_h,
            cfg.model.grid_w,
        )
        .map_err(classify)?;
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_benchmark(args: BenchmarkArgs) -> CliResult {
    let cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => bench::default_benchmark_config(),
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliFailure::config(format!("invalid seed `{s}`")))
        })
        .collect::<std::result::Result<_, _>>()?;
    let strategies: Vec<Strategy> = args
        .strategies
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<Strategy>()
                .map_err(|e| CliFailure::config(e.to_string()))
        })
        .collect::<std::result::Result<_, _>>()?;

    let table = bench::run_grid(&cfg, &strategies, &seeds).map_err(classify)?;
    print!("{}", table.format_table());
    if let Some(out) = &args.out {
        write_bytes(out, table.to_csv().as_bytes())?;
    }
    Ok(())
}
