use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metafm::fm::ModelFile;
use metafm::hin::validate;
use metafm::latent::write_factor_pair;
use metafm::metagraph::write_similarity;
use metafm::pipeline::{
    artifact_suffix, assemble_runs, evaluate, factor_pairs, lambda_path_path, model_path, prepare, run_pipeline_with,
    similarities, summarize, train_grid, write_run_artifacts, Cache, ExperimentConfig, LambdaPoint, MetricsReport,
    Observer, RunReport,
};
use metafm::synth::{write_planted_hin, PlantedHin};
use metafm::{Error, Result};
use serde_json::json;

/// `writeln!` into the output buffer; writing to a `String` cannot fail.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

#[derive(Parser)]
#[command(
    name = "metafm",
    version,
    about = "Metagraph-based factorization machines for rating prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the network, split the ratings and print a summary.
    Ingest(Common),
    /// Compute (or load from cache) one similarity matrix per metagraph.
    Similarity(Common),
    /// Compute latent user and item features of every similarity matrix.
    Factorize(Common),
    /// Train over the λ grid and write models; test labels stay sealed.
    Train(Common),
    /// Score the models written by `train` on every split.
    Evaluate(Common),
    /// Run every stage and write metrics.json.
    Pipeline(Common),
    /// Print a metrics.json as tables.
    Report(ReportArgs),
    /// Write a planted synthetic network and a config that runs on it.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Repeat with seeds seed, seed+1, ... and report mean ± std.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// A metrics.json file, or a directory containing one.
    path: PathBuf,
    /// Also print the λ path of every run.
    #[arg(long)]
    path_detail: bool,
    /// Print the report as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 3)]
    topics: usize,
    #[arg(long, default_value_t = 10)]
    ratings_per_user: usize,
    /// Effect of each metagraph on the ratings; zero marks it irrelevant.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.8, 0.0, 0.0])]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct LogObserver;

impl Observer for LogObserver {
    fn stage(&self, name: &'static str) {
        log::info!("stage {name}");
    }

    fn test_labels_read(&self) {
        log::debug!("test labels opened");
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(d) = &c.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    if let Some(r) = c.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    load_config(c).map_err(|e| e.in_stage("config"))
}

fn out_dir<'a>(cfg: &'a ExperimentConfig, stage: &'static str) -> Result<&'a Path> {
    cfg.out_dir
        .as_deref()
        .ok_or_else(|| Error::Argument("an output directory is required (--out-dir)".into()).in_stage(stage))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn ingest(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let prep = prepare(&cfg, cfg.seed, &LogObserver)?;
    let issues = validate(&prep.store);
    let summary = json!({
        "input_hash": prep.input_hash,
        "entities": prep.store.entities().iter().map(|(t, s)| (t.clone(), s.count())).collect::<std::collections::BTreeMap<_, _>>(),
        "relations": prep.store.relations().map(|r| json!({
            "name": r.decl.name, "head": r.decl.head_type, "tail": r.decl.tail_type, "nnz": r.adjacency.nnz(),
        })).collect::<Vec<_>>(),
        "ratings": { "train": prep.train.len(), "valid": prep.valid.len(), "test": prep.test.len() },
        "range": [prep.range.min, prep.range.max],
        "metagraphs": prep.specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        "issues": issues.issues,
    });
    say!(out, "{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &cfg.out_dir {
        write_json(&out.join("ingest.json"), &summary).map_err(|e| e.in_stage("ingest"))?;
    }
    Ok(())
}

fn similarity(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let prep = prepare(&cfg, cfg.seed, &LogObserver)?;
    let (sims, stats) = similarities(&cfg, &prep, &Cache::new(cfg.cache_dir()), &LogObserver)?;
    for ks in &sims {
        let m = &ks.sim.matrix;
        say!(out, "{}\t{}x{}\tnnz {}", ks.sim.metagraph, m.rows(), m.cols(), m.nnz());
        if let Some(out) = &cfg.out_dir {
            let dir = out.join("similarity");
            fs::create_dir_all(&dir)
                .map_err(|e| Error::io(&dir, e))
                .and_then(|_| write_similarity(&ks.sim, &dir.join(format!("{}.tsv", ks.sim.metagraph))))
                .map_err(|e| e.in_stage("similarity"))?;
        }
    }
    say!(out, "cache: {} hits, {} misses", stats.hits, stats.misses);
    Ok(())
}

fn factorize(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let prep = prepare(&cfg, cfg.seed, &LogObserver)?;
    let cache = Cache::new(cfg.cache_dir());
    let (sims, _) = similarities(&cfg, &prep, &cache, &LogObserver)?;
    let (pairs, stats) = factor_pairs(&cfg, &prep, &sims, &cache, &LogObserver)?;
    for p in &pairs {
        say!(
            out,
            "{}\trank {}\tusers {}\titems {}",
            p.metagraph,
            p.rank(),
            p.user.nrows(),
            p.item.nrows()
        );
        if let Some(out) = &cfg.out_dir {
            write_factor_pair(p, &out.join("factors"), &p.metagraph).map_err(|e| e.in_stage("factorize"))?;
        }
    }
    say!(out, "cache: {} hits, {} misses", stats.hits, stats.misses);
    Ok(())
}

fn train(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let dir = out_dir(&cfg, "train")?;
    let prep = prepare(&cfg, cfg.seed, &LogObserver)?;
    let cache = Cache::new(cfg.cache_dir());
    let (sims, _) = similarities(&cfg, &prep, &cache, &LogObserver)?;
    let (pairs, _) = factor_pairs(&cfg, &prep, &sims, &cache, &LogObserver)?;
    let runs = assemble_runs(&cfg, &prep, &pairs, &LogObserver)?;
    LogObserver.stage("train");
    for run in &runs {
        let t = train_grid(run, &cfg, prep.range, cfg.seed).map_err(|e| e.in_stage("train"))?;
        write_run_artifacts(dir, run, &t, &cfg, 0).map_err(|e| e.in_stage("train"))?;
        let best = t.path.iter().find(|p| p.lambda == t.reg.lambda_w);
        say!(
            out,
            "{}\tλ {}\tvalid {}\tnnz {:.4}\tselected [{}]",
            run.name,
            t.reg.lambda_w,
            best.and_then(|p| p.valid_rmse)
                .map_or("-".into(), |v| format!("{v:.4}")),
            best.map_or(0.0, |p| p.nnz),
            best.map_or(String::new(), |p| p.selected.join(", ")),
        );
    }
    Ok(())
}

fn evaluate_models(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let dir = out_dir(&cfg, "evaluate")?;
    let prep = prepare(&cfg, cfg.seed, &LogObserver)?;
    let cache = Cache::new(cfg.cache_dir());
    let (sims, _) = similarities(&cfg, &prep, &cache, &LogObserver)?;
    let (pairs, _) = factor_pairs(&cfg, &prep, &sims, &cache, &LogObserver)?;
    let runs = assemble_runs(&cfg, &prep, &pairs, &LogObserver)?;
    LogObserver.stage("evaluate");
    let mut reports = Vec::new();
    for run in &runs {
        let score = || -> Result<RunReport> {
            let model = ModelFile::read(&model_path(dir, &run.name, &artifact_suffix(&cfg, 0)))?;
            if model.layout != run.layout {
                return Err(Error::Validation(format!(
                    "model for `{}` was trained on a different feature layout",
                    run.name
                )));
            }
            let rmse = evaluate(run, &model.params, &prep, &cfg, &LogObserver)?;
            let path_file = lambda_path_path(dir, &run.name, &artifact_suffix(&cfg, 0));
            let path: Vec<LambdaPoint> = match fs::read_to_string(&path_file) {
                Ok(text) => serde_json::from_str(&text)?,
                Err(_) => Vec::new(),
            };
            Ok(RunReport::new(
                run,
                &model.params,
                model.reg,
                rmse,
                path,
                0,
                cfg.fm.select_threshold,
            ))
        };
        reports.push(score().map_err(|e| e.in_stage("evaluate"))?);
    }
    let report = MetricsReport {
        summary: summarize(&reports),
        runs: reports,
        stages: Vec::new(),
    };
    report
        .write(&dir.join("metrics.json"))
        .map_err(|e| e.in_stage("report"))?;
    print_report(&report, false, out);
    Ok(())
}

fn pipeline(c: &Common, out: &mut String) -> Result<()> {
    let cfg = config(c)?;
    let report = run_pipeline_with(&cfg, &LogObserver)?;
    print_report(&report, false, out);
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn print_report(report: &MetricsReport, detail: bool, out: &mut String) {
    say!(
        out,
        "{:<16} {:>3} {:>9} {:>8} {:>8} {:>8} {:>7}  selected",
        "run",
        "rep",
        "λ",
        "train",
        "valid",
        "test",
        "nnz"
    );
    for r in &report.runs {
        say!(
            out,
            "{:<16} {:>3} {:>9} {:>8} {:>8} {:>8} {:>7.4}  {}",
            r.name,
            r.repeat,
            r.lambda,
            format!("{:.4}", r.rmse.train),
            fmt_opt(r.rmse.valid),
            fmt_opt(r.rmse.test),
            r.nnz,
            r.selected.join(","),
        );
    }
    if report.runs.iter().any(|r| r.repeat > 0) {
        out.push('\n');
        for s in &report.summary {
            say!(
                out,
                "{:<16} test {:.4} ± {:.4} over {} repeats",
                s.name,
                s.test_rmse_mean,
                s.test_rmse_std,
                s.repeats
            );
        }
    }
    if detail {
        for r in &report.runs {
            say!(out, "\n{} (repeat {})", r.name, r.repeat);
            say!(
                out,
                "{:>9} {:>8} {:>8} {:>7} {:>6}  selected",
                "λ",
                "train",
                "valid",
                "nnz",
                "iters"
            );
            for p in &r.path {
                say!(
                    out,
                    "{:>9} {:>8.4} {:>8} {:>7.4} {:>6}  {}",
                    p.lambda,
                    p.train_rmse,
                    fmt_opt(p.valid_rmse),
                    p.nnz,
                    p.iterations,
                    p.selected.join(",")
                );
            }
        }
    }
    if !report.stages.is_empty() {
        out.push('\n');
        for s in &report.stages {
            let cache = s
                .cache
                .map_or(String::new(), |c| format!("  ({} hits, {} misses)", c.hits, c.misses));
            say!(out, "{:<10} rep {} {:>9.3}s{cache}", s.stage, s.repeat, s.seconds);
        }
    }
}

fn report(a: &ReportArgs, out: &mut String) -> Result<()> {
    let path = if a.path.is_dir() {
        a.path.join("metrics.json")
    } else {
        a.path.clone()
    };
    let report = MetricsReport::read(&path).map_err(|e| e.in_stage("report"))?;
    if a.json {
        say!(out, "{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report(&report, a.path_detail, out);
    }
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut String) -> Result<()> {
    let planted = PlantedHin {
        users: a.users,
        items: a.items,
        topics: a.topics,
        ratings_per_user: a.ratings_per_user,
        betas: a.betas.clone(),
        noise: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    let files = write_planted_hin(&planted, &a.dir)?;
    let mut cfg = ExperimentConfig {
        schema: "schema.json".into(),
        metagraphs: "metagraphs.dsl".into(),
        out_dir: Some("out".into()),
        seed: a.seed,
        ..Default::default()
    };
    cfg.features.rank = a.topics;
    cfg.fm.standardize = true;
    cfg.solver.max_iter = 300;
    write_json(&a.dir.join("config.json"), &serde_json::to_value(&cfg)?)?;
    say!(out, "wrote {}", a.dir.join("config.json").display());
    say!(out, "relevant metagraphs: {}", files.relevant.join(", "));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut out = String::new();
    let result = match &cli.command {
        Command::Ingest(c) => ingest(c, &mut out),
        Command::Similarity(c) => similarity(c, &mut out),
        Command::Factorize(c) => factorize(c, &mut out),
        Command::Train(c) => train(c, &mut out),
        Command::Evaluate(c) => evaluate_models(c, &mut out),
        Command::Pipeline(c) => pipeline(c, &mut out),
        Command::Report(a) => report(a, &mut out),
        Command::Synth(a) => synth(a, &mut out),
    };
    // a closed pipe (`metafm report .. | head`) is not an error
    match io::stdout().lock().write_all(out.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => eprintln!("error: writing output: {e}"),
        _ => {}
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
