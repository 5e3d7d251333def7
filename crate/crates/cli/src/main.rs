//! `dmf2mel`: synthetic data, training, evaluation, inference, gradient
//! checks and report plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmf2mel::data::{generate_synthetic, Corpus, GenConfig, SubjectId, Split, CROP_LEN};
use dmf2mel::losses::ScoreReport;
use dmf2mel::model::Model;
use dmf2mel::tensorfile::{read_any, write_tensor};
use dmf2mel::training::{evaluate, evaluate_with, predict_range, Checkpoint, Trainer, LAST};
use dmf2mel::{gradcheck, Error, Result, Tensor};

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dmf2mel", version, about = "EEG to mel spectrogram reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    GenData(GenArgs),
    /// Print a default run configuration.
    Config(ConfigArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out splits.
    Eval(EvalArgs),
    /// Reconstruct mel frames for one EEG tensor.
    Infer(InferArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradArgs),
    /// Per-subject CSV and violin plot for one or more score reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    heldout_subjects: usize,
    /// Seconds per training recording.
    #[arg(long, default_value_t = 120.0)]
    len_s: f64,
    /// Seconds per held-out recording; defaults to min(60, len-s).
    #[arg(long)]
    heldout_len_s: Option<f64>,
    #[arg(long, default_value_t = 0.0, conflicts_with = "noiseless")]
    snr_db: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    bands: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    /// Rows of the subject embedding table.
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `<out>/last`.
    #[arg(long)]
    resume: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct EvalSource {
    #[arg(long, group = "source")]
    ckpt: Option<PathBuf>,
    /// Score the ground truth itself.
    #[arg(long, group = "source")]
    oracle: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: EvalSource,
    #[arg(long)]
    data: PathBuf,
    /// Directory for score.json and score.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// EEG tensor `[T, C]`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Training subject index; omitted or unknown uses the mean embedding.
    #[arg(long)]
    subject: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    module: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma separated run labels; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Config(a) => print_config(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Gradcheck(a) => return run_gradcheck(a),
        Cmd::Report(a) => run_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut g = GenConfig::new(a.seed, a.subjects, a.heldout_subjects, a.len_s);
    if let Some(h) = a.heldout_len_s {
        g.heldout_len_s = h;
    }
    g.snr_db = if a.noiseless { None } else { Some(a.snr_db) };
    g.channels = a.channels;
    g.bands = a.bands;
    let m = generate_synthetic(&g, &a.out)?;
    println!("wrote {} recordings to {}", m.recordings.len(), a.out.display());
    Ok(())
}

fn print_config(a: ConfigArgs) -> Result<()> {
    let c = RunConfig::new(a.d_model, a.subjects);
    c.validate()?;
    let json = serde_json::to_string_pretty(&c)? + "\n";
    match a.out {
        Some(p) => fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let corpus = load_corpus(&a.data)?;
    let mut trainer = if a.resume {
        let t = Trainer::resume(a.out.join(LAST), &corpus)?;
        if t.model.cfg != cfg.model || t.cfg != cfg.train {
            return Err(Error::config(
                a.config.display().to_string(),
                "differs from the configuration stored in the checkpoint",
            ));
        }
        t
    } else {
        Trainer::new(cfg.model, cfg.train, &corpus)?
    };
    let quiet = a.quiet;
    trainer.train(&a.out, |m| {
        if !quiet {
            println!(
                "epoch {:>4} lr {:.3e} loss {:.4} (pearson {:.4} l1 {:.4} infonce {:.4}) val_pearson {:.4}",
                m.epoch, m.lr, m.total, m.l_pearson, m.l_one, m.l_infonce, m.val_pearson
            );
        }
    })?;
    if !quiet {
        println!("checkpoint: {}", a.out.join(LAST).display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.data)?;
    let rep = match a.source.ckpt {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let model = Model::new(ck.model)?;
            evaluate(&model, &ck.state.params, &corpus)?
        }
        None => evaluate_with(&corpus, CROP_LEN, |rec| Ok(rec.mel.data().to_vec()))?,
    };
    let json = rep.to_json()?;
    println!("{json}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("score.json"), json + "\n")?;
        fs::write(out.join("score.csv"), rep.to_csv())?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = Model::new(ck.model)?;
    let eeg: Tensor<f32> = read_any(&a.input)?.to_f32();
    let shape = eeg.shape().to_vec();
    if shape.len() != 2 || shape[1] != model.cfg.channels {
        return Err(Error::Shape(format!(
            "{}: expected EEG [T, {}], found {shape:?}",
            a.input.display(),
            model.cfg.channels
        )));
    }
    let key = a.subject.and_then(|index| model.cfg.subject_key(SubjectId { index, split: Split::Train }));
    let mel = predict_range(&model, &ck.state.params, &eeg, 0..shape[0], key)?;
    write_tensor(&a.out, &Tensor::new(&[shape[0], model.cfg.bands], mel)?)?;
    println!("wrote [{}, {}] to {}", shape[0], model.cfg.bands, a.out.display());
    Ok(())
}

fn run_gradcheck(a: GradArgs) -> ExitCode {
    let cases = match gradcheck::run(&a.module) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}; expected one of {} or all", gradcheck::MODULES.join(", "));
            return ExitCode::from(exit_code(&e));
        }
    };
    let mut worst: Option<&gradcheck::GradCase> = None;
    for c in &cases {
        let r = &c.report;
        let at = r.worst.as_ref().map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
        println!(
            "{:<10} {:<14} max_rel_err {:.3e} over {} values, worst at {at} {}",
            c.module,
            c.case,
            r.max_rel_error,
            r.checked,
            if c.passed() { "ok" } else { "FAILED" }
        );
        if worst.is_none_or(|w| r.max_rel_error > w.report.max_rel_error) {
            worst = Some(c);
        }
    }
    let Some(w) = worst else {
        return ExitCode::SUCCESS;
    };
    if cases.iter().all(gradcheck::GradCase::passed) {
        println!("max_rel_err < {:e} ({} cases)", gradcheck::TOLERANCE, cases.len());
        ExitCode::SUCCESS
    } else {
        let name = w.report.worst.as_ref().map_or("?", |(n, _)| n.as_str());
        eprintln!(
            "gradient check failed: {}/{} parameter `{name}` has relative error {:.3e}",
            w.module, w.case, w.report.max_rel_error
        );
        ExitCode::from(1)
    }
}

fn run_report(a: ReportArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.reports.len() {
        return Err(Error::config(
            "labels",
            format!("{} labels for {} reports", a.labels.len(), a.reports.len()),
        ));
    }
    let mut runs = Vec::new();
    for (i, p) in a.reports.iter().enumerate() {
        let text = fs::read_to_string(p)?;
        let rep = ScoreReport::from_json(&text).map_err(|e| Error::format(p, e.to_string()))?;
        let label = match a.labels.get(i) {
            Some(l) => l.clone(),
            None => p.file_stem().map_or_else(|| format!("run{i}"), |s| s.to_string_lossy().into_owned()),
        };
        runs.push((label, rep));
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.csv"), report::csv(&runs))?;
    fs::write(a.out.join("report.svg"), report::svg(&runs))?;
    println!("wrote {} and {}", a.out.join("report.csv").display(), a.out.join("report.svg").display());
    Ok(())
}
