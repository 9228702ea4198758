//! Command-line driver for the synthetic HDR quality-assessment lab.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hapo_core::config::ExperimentConfig;
use hapo_core::gradcheck::{self, GradCheck, Module};
use hapo_core::metrics;
use hapo_core::pipeline::{self, Report, Variant};
use hapo_core::policy::Checkpoint;
use hapo_core::studysim::{self, GoldenTruth};
use hapo_core::sureal;
use hapo_core::synthcorpus::{self, VideoInstance};

#[derive(Parser)]
#[command(name = "hapo-lab", version, about = "Synthetic HDR quality-assessment lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default experiment configuration as TOML.
    DefaultConfig,
    /// Generate the synthetic corpus as JSON lines.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the crowdsourced study on a corpus.
    SimulateStudy {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Golden-set pilot truth; defaults to golden.json next to --out.
        #[arg(long)]
        golden_out: Option<PathBuf>,
        /// Simulated subject parameters, for checking recovery.
        #[arg(long)]
        subjects_out: Option<PathBuf>,
    },
    /// Screen subjects and keep ratings of accepted ones.
    Qc {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejects: PathBuf,
    },
    /// Recover MOS, subject bias and inconsistency by maximum likelihood.
    Aggregate {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects_out: Option<PathBuf>,
    },
    /// Split-half reliability of a study.
    Reliability {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, default_value_t = 100)]
        splits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a scoring policy against MOS.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mos: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Evaluate a checkpoint on its held-out videos (or all with --all).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mos: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    GradCheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        n_seeds: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
    },
    /// Component on/off grid over paired training seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-seed results.
        #[arg(long)]
        runs_out: Option<PathBuf>,
    },
    /// Full pipeline, writing every artifact into a directory.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Hapo,
    Encalign,
    All,
}

/// A check that ran to completion but did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut c = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<VideoInstance>> {
    synthcorpus::read_corpus(open(path)?).with_context(|| format!("reading corpus {}", path.display()))
}

fn read_ratings(path: &Path) -> Result<Vec<studysim::RatingRecord>> {
    studysim::read_ratings(open(path)?).with_context(|| format!("reading ratings {}", path.display()))
}

fn read_mos(path: &Path) -> Result<BTreeMap<String, f64>> {
    sureal::read_mos(open(path)?).with_context(|| format!("reading MOS {}", path.display()))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> hapo_core::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn write_checkpoint(path: &Path, run: &pipeline::PolicyRun) -> Result<()> {
    write_json(path, &run.checkpoint())?;
    write_json(&optim_sidecar(path), &run.optimizer)
}

fn optim_sidecar(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or("ckpt".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}.optim.json"))
}

fn grad_check(module: ModuleArg, seed: u64, n_seeds: usize, step: f64, tol: f64) -> Result<()> {
    let modules = match module {
        ModuleArg::Hapo => vec![Module::Hapo],
        ModuleArg::Encalign => vec![Module::Encalign],
        ModuleArg::All => vec![Module::Hapo, Module::Encalign],
    };
    let mut failed: Vec<GradCheck> = Vec::new();
    for m in modules {
        let checks = gradcheck::run(m, seed, n_seeds, step)?;
        let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        println!(
            "{}: {} seeds, max relative error {:.3e} (tol {:.0e})",
            serde_json::to_string(&m)?.trim_matches('"'),
            checks.len(),
            worst,
            tol
        );
        failed.extend(checks.into_iter().filter(|c| !c.passed(tol)));
    }
    for c in &failed {
        eprintln!("FAILED {}", serde_json::to_string(c)?);
    }
    if !failed.is_empty() {
        return Err(CheckFailed(format!("{} gradient checks failed", failed.len())).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string()?);
        }
        Command::GenCorpus { config, seed, out } => {
            let c = load_config(config.as_deref(), seed)?;
            let corpus = synthcorpus::generate_corpus(&c.corpus, c.seed)?;
            write_with(&out, |w| synthcorpus::write_corpus(w, &corpus))?;
            log::info!("wrote {} videos to {}", corpus.len(), out.display());
        }
        Command::SimulateStudy { corpus, config, seed, out, golden_out, subjects_out } => {
            let c = load_config(config.as_deref(), seed)?;
            let videos = read_corpus(&corpus)?;
            let subjects = studysim::sample_subjects(&c.study.population, c.seed);
            let study = studysim::run_study(&videos, &subjects, &c.study.design, &c.study.pilot_population, c.seed)?;
            write_with(&out, |w| studysim::write_ratings(w, &study.records))?;
            let golden = golden_out.unwrap_or_else(|| out.with_file_name("golden.json"));
            write_json(&golden, &study.golden_truth)?;
            if let Some(p) = subjects_out {
                write_json(&p, &subjects)?;
            }
            log::info!("wrote {} ratings from {} subjects", study.records.len(), subjects.len());
        }
        Command::Qc { ratings, golden, config, out, rejects } => {
            let c = load_config(config.as_deref(), None)?;
            let records = read_ratings(&ratings)?;
            let truth: BTreeMap<String, GoldenTruth> =
                serde_json::from_reader(open(&golden)?).with_context(|| format!("reading golden truth {}", golden.display()))?;
            let qc = studysim::qc_screen(&records, &truth, &c.qc)?;
            write_with(&out, |w| studysim::write_ratings(w, &qc.accepted))?;
            write_json(&rejects, &qc.rejections)?;
            log::info!("rejected {} subjects, kept {} ratings", qc.rejections.len(), qc.accepted.len());
        }
        Command::Aggregate { ratings, config, out, subjects_out } => {
            let c = load_config(config.as_deref(), None)?;
            let est = sureal::fit_with(&pipeline::sureal_input(&read_ratings(&ratings)?), &c.sureal)?;
            if !est.converged {
                log::warn!("SUREAL stopped after {} iterations without converging", est.iterations);
            }
            write_with(&out, |w| sureal::write_mos(w, &est))?;
            if let Some(p) = subjects_out {
                write_with(&p, |w| sureal::write_subjects(w, &est))?;
            }
        }
        Command::Reliability { ratings, splits, seed, out } => {
            let r = metrics::split_half_reliability(&read_ratings(&ratings)?, splits, seed)?;
            println!("median SRCC {:.4}, median PLCC {:.4} over {} splits", r.median_srcc, r.median_plcc, splits);
            if let Some(p) = out {
                write_json(&p, &r)?;
            }
        }
        Command::Train { corpus, mos, config, seed, out, trace } => {
            let c = load_config(config.as_deref(), seed)?;
            let videos = read_corpus(&corpus)?;
            let run = pipeline::train_policy(&c, &videos, &read_mos(&mos)?)?;
            write_checkpoint(&out, &run)?;
            write_with(&trace, |w| pipeline::write_trace(w, &run.trace))?;
        }
        Command::Eval { ckpt, corpus, mos, config, all, out } => {
            let c = load_config(config.as_deref(), None)?;
            let cp: Checkpoint =
                serde_json::from_reader(open(&ckpt)?).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
            let held_out = cp.held_out.clone();
            let (params, encoder) = cp.into_parts()?;
            let videos = read_corpus(&corpus)?;
            let mos = read_mos(&mos)?;
            let selected: Vec<&VideoInstance> = if all || held_out.is_empty() {
                videos.iter().filter(|v| mos.contains_key(&v.id)).collect()
            } else {
                let ids: std::collections::BTreeSet<&str> = held_out.iter().map(String::as_str).collect();
                videos.iter().filter(|v| ids.contains(v.id.as_str())).collect()
            };
            let ev = pipeline::evaluate_policy(&params, &encoder, &selected, &mos, &c)?;
            let report = Report::from_evaluation(ev);
            std::fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            println!("rmse {:.4} on {} videos, mi diagnostic {:.4}", report.eval.rmse, selected.len(), report.mi_diagnostic);
        }
        Command::GradCheck { module, seed, n_seeds, step, tol } => grad_check(module, seed, n_seeds, step, tol)?,
        Command::Ablate { config, seed, out, runs_out } => {
            let c = load_config(config.as_deref(), seed)?;
            let ab = pipeline::ablate(&c, &Variant::ALL)?;
            write_with(&out, |w| pipeline::write_ablation_csv(w, &ab.rows))?;
            if let Some(p) = runs_out {
                write_with(&p, |w| pipeline::write_ablation_runs_csv(w, &ab.runs))?;
            }
        }
        Command::Run { config, seed, out_dir } => {
            let c = load_config(config.as_deref(), seed)?;
            let o = pipeline::run_pipeline(&c)?;
            let d = |name: &str| out_dir.join(name);
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            std::fs::write(d("config.toml"), c.to_toml_string()?)?;
            write_with(&d("corpus.jsonl"), |w| synthcorpus::write_corpus(w, &o.data.corpus))?;
            write_with(&d("ratings.csv"), |w| studysim::write_ratings(w, &o.data.study.records))?;
            write_json(&d("golden.json"), &o.data.study.golden_truth)?;
            write_with(&d("accepted.csv"), |w| studysim::write_ratings(w, &o.data.qc.accepted))?;
            write_json(&d("rejects.json"), &o.data.qc.rejections)?;
            write_with(&d("mos.csv"), |w| sureal::write_mos(w, &o.data.sureal))?;
            write_with(&d("subjects.csv"), |w| sureal::write_subjects(w, &o.data.sureal))?;
            write_checkpoint(&d("ckpt.json"), &o.policy)?;
            write_with(&d("trace.jsonl"), |w| pipeline::write_trace(w, &o.policy.trace))?;
            if let Some(er) = &o.encoder {
                write_json(&d("encoder.json"), &er.params)?;
                let mut w = csv::Writer::from_writer(create(&d("encoder_curve.csv"))?);
                for p in &er.curve {
                    w.serialize(p)?;
                }
                w.flush()?;
            }
            std::fs::write(d("report.json"), o.report.to_json()?)?;
            println!(
                "rmse {:.4}, mi diagnostic {:.4}; artifacts in {}",
                o.report.eval.rmse,
                o.report.mi_diagnostic,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HAPO_LAB_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("HAPO_LAB_THREADS must be an integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// 2 for numerical failures and failed checks, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<hapo_core::Error>().is_some_and(hapo_core::Error::is_numerical)
            || c.downcast_ref::<CheckFailed>().is_some()
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
