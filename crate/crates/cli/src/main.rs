//! `unest` command-line front end.
//!
//! Failures print a single `error[category]: message` line on stderr.
//! Usage errors exit with status 2, everything else with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unest::config::RunConfig;
use unest::dataset::{
    self, generate_cases, list_cases, load_dataset, write_case, LABEL_FILE, RATER2_FILE,
};
use unest::infer::{argmax_labels, sliding_window_infer_threads};
use unest::metrics::{
    evaluate_case, summarize, write_bland_altman_points, write_case_csv, write_summary_csv,
    CaseMetrics,
};
use unest::model::{checkpoint, count_params_flops, UNesT};
use unest::phantom::{window_normalize, CLASS_NAMES, WINDOW_HI, WINDOW_LO};
use unest::volume::{read_v3d, write_v3d, Image, Labels};
use unest::{selfcheck, train, Error};

#[derive(Parser)]
#[command(
    name = "unest",
    version,
    about = "Volumetric segmentation with a hierarchical block transformer"
)]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, env = "UNEST_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Segment a volume, or every case of a dataset directory.
    Infer(InferArgs),
    /// Score predicted labels against reference labels.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts of a model configuration.
    Flops(FlopsArgs),
    /// Run gradient checks and metric oracles.
    Selfcheck(SelfcheckArgs),
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write `case_NNN` directories with image, label and second-rater label.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Edge length, or `DxHxW`.
    #[arg(long, default_value = "32", value_parser = parse_size)]
    size: [usize; 3],
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace block aggregation with plain strided downsampling.
    #[arg(long)]
    ablate_aggregation: bool,
    /// Fraction of training cases to use.
    #[arg(long)]
    data_fraction: Option<f64>,
    /// Training data directory; overrides `data.train_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image `.v3d` in raw intensities, or a directory of cases.
    #[arg(long)]
    input: PathBuf,
    /// Label `.v3d`, or an output directory when the input is a directory.
    #[arg(long)]
    output: PathBuf,
    /// Fraction of each window shared with its neighbour, in [0, 1).
    #[arg(long, default_value_t = unest::infer::DEFAULT_OVERLAP, value_parser = parse_overlap)]
    overlap: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `case_NNN/label.v3d` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding the reference labels.
    #[arg(long)]
    r#ref: PathBuf,
    /// Directory with second-rater labels (`label_rater2.v3d` or `label.v3d`).
    #[arg(long)]
    rater2: Option<PathBuf>,
    /// Per-case CSV; summary and Bland-Altman files are written beside it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Skip the end-to-end model gradient checks.
    #[arg(long)]
    quick: bool,
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let size = match parts[..] {
        [n] => [n; 3],
        [d, h, w] => [d, h, w],
        _ => return Err("expected N or DxHxW".into()),
    };
    if size.contains(&0) {
        return Err("size must be positive".into());
    }
    Ok(size)
}

fn parse_override(s: &str) -> Result<String, String> {
    match s.split_once('=') {
        Some((k, _)) if !k.is_empty() => Ok(s.to_string()),
        _ => Err("expected section.key=value".into()),
    }
}

fn parse_overlap(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{s:?}: {e}"))?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("overlap must lie in [0, 1), got {v}"));
    }
    Ok(v)
}

/// Failure of a subcommand: a core error or a failed self-check.
enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                let msg = e.to_string();
                let text: Vec<&str> = msg
                    .lines()
                    .map(str::trim)
                    .take_while(|l| {
                        !l.starts_with("Usage:") && !l.starts_with("For more information")
                    })
                    .filter(|l| !l.is_empty())
                    .collect();
                eprintln!(
                    "error[usage]: {}",
                    text.join(" ").trim_start_matches("error: ")
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code as u8);
        }
    };
    let threads = cli
        .threads
        .map(|t| t as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = match cli.command {
        Command::Phantom(PhantomCommand::Gen(a)) => phantom_gen(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a, threads),
        Command::Eval(a) => run_eval(a),
        Command::Flops(a) => run_flops(a),
        Command::Selfcheck(a) => run_selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error[check]: {msg}");
            ExitCode::from(1)
        }
    }
}

fn phantom_gen(a: GenArgs) -> CmdResult {
    for case in generate_cases(a.seed, a.count, a.size)? {
        let dir = write_case(&a.out, &case)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> CmdResult {
    let mut overrides = a.overrides;
    if let Some(r) = a.data_fraction {
        overrides.push(format!("train.data_fraction={r}"));
    }
    let mut cfg = RunConfig::load(&a.config, &overrides)?;
    if let Some(d) = a.data {
        cfg.data.train_dir = Some(d);
    }
    let train_dir = cfg.data.train_dir.as_deref().ok_or_else(|| {
        Error::Config("no training data: set data.train_dir or pass --data".into())
    })?;
    let train_cases = load_dataset(train_dir)?;
    let val_cases = match &cfg.data.val_dir {
        Some(d) => load_dataset(d)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let resolved = a.out.join("config.json");
    fs::write(&resolved, cfg.to_json()).map_err(|e| Error::io(&resolved, e))?;

    let outcome = train::train::<f32>(
        &cfg.model,
        &cfg.train,
        &train_cases,
        &val_cases,
        a.ablate_aggregation,
        Some(&a.out),
    )?;
    if let Some(last) = outcome.log.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    println!("cases used: {}", outcome.used_cases.join(","));
    println!("checkpoint: {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn segment(
    model: &UNesT,
    weights: &unest::model::ModelWeights<f32>,
    image: &Image,
    overlap: f64,
    threads: usize,
) -> unest::Result<Labels> {
    let norm = window_normalize(image, WINDOW_LO, WINDOW_HI)?;
    let probs = sliding_window_infer_threads(model, weights, &norm, overlap, threads)?;
    argmax_labels(&probs)
}

fn run_infer(a: InferArgs, threads: usize) -> CmdResult {
    let (cfg, weights) = checkpoint::load::<f32>(&a.checkpoint)?;
    let model = UNesT::new(cfg)?;
    if a.input.is_dir() {
        let dirs = list_cases(&a.input)?;
        if dirs.is_empty() {
            return Err(
                Error::Data(format!("no case_* directories under {}", a.input.display())).into(),
            );
        }
        for dir in dirs {
            let image: Image = read_v3d(&dir.join(dataset::IMAGE_FILE))?;
            let labels = segment(&model, &weights, &image, a.overlap, threads)?;
            let out_dir = a.output.join(dir.file_name().expect("case directory name"));
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            write_v3d(&out_dir.join(LABEL_FILE), &labels)?;
            println!("{}", out_dir.display());
        }
    } else {
        let image: Image = read_v3d(&a.input)?;
        let labels = segment(&model, &weights, &image, a.overlap, threads)?;
        if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_v3d(&a.output, &labels)?;
        println!("{}", a.output.display());
    }
    Ok(())
}

fn sibling(report: &Path, suffix: &str) -> PathBuf {
    let stem = report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    report.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn rater2_labels(root: &Path, id: &str) -> unest::Result<Labels> {
    let dir = root.join(id);
    let preferred = dir.join(RATER2_FILE);
    if preferred.exists() {
        read_v3d(&preferred)
    } else {
        read_v3d(&dir.join(LABEL_FILE))
    }
}

fn run_eval(a: EvalArgs) -> CmdResult {
    let dirs = list_cases(&a.r#ref)?;
    if dirs.is_empty() {
        return Err(
            Error::Data(format!("no case_* directories under {}", a.r#ref.display())).into(),
        );
    }
    let mut model_r1: Vec<CaseMetrics> = Vec::new();
    let mut model_r2: Vec<CaseMetrics> = Vec::new();
    let mut r1_r2: Vec<CaseMetrics> = Vec::new();
    for dir in &dirs {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .expect("case directory name");
        let reference: Labels = read_v3d(&dir.join(LABEL_FILE))?;
        let pred: Labels = read_v3d(&a.pred.join(id).join(LABEL_FILE))?;
        model_r1.extend(evaluate_case(id, &pred, &reference, &CLASS_NAMES)?);
        if let Some(root) = &a.rater2 {
            let r2 = rater2_labels(root, id)?;
            model_r2.extend(evaluate_case(id, &pred, &r2, &CLASS_NAMES)?);
            r1_r2.extend(evaluate_case(id, &reference, &r2, &CLASS_NAMES)?);
        }
    }

    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_case_csv(&a.report, &model_r1)?;
    write_bland_altman_points(&sibling(&a.report, "bland_altman"), &model_r1)?;
    let mut groups = vec![("model_vs_rater1", summarize(&model_r1)?)];
    if a.rater2.is_some() {
        write_case_csv(&sibling(&a.report, "model_vs_rater2"), &model_r2)?;
        write_case_csv(&sibling(&a.report, "rater1_vs_rater2"), &r1_r2)?;
        groups.push(("model_vs_rater2", summarize(&model_r2)?));
        groups.push(("rater1_vs_rater2", summarize(&r1_r2)?));
    }
    write_summary_csv(&sibling(&a.report, "summary"), &groups)?;
    for (name, summaries) in &groups {
        for s in summaries {
            println!("{name} {} dsc {:.4}", s.class_name, s.mean_dsc);
        }
    }
    Ok(())
}

fn run_flops(a: FlopsArgs) -> CmdResult {
    let cfg = RunConfig::load(&a.config, &[])?;
    let cost = count_params_flops(&cfg.model)?;
    println!("param_count {}", cost.params);
    println!("flops {}", cost.flops);
    println!("macs {}", cost.macs);
    Ok(())
}

fn run_selfcheck(a: SelfcheckArgs) -> CmdResult {
    let results = selfcheck::run(a.quick)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!(
            "{} {} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} checks failed",
            results.len()
        )));
    }
    Ok(())
}
