use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use groundrl::config::ExperimentConfig;
use groundrl::data::{load_dataset, save_dataset};
use groundrl::datagen::{load_corpus, run_pipeline, HashingEmbedder, ScriptedGenerator};
use groundrl::reward::{score_rollouts, RewardConfig, RolloutRecord};
use groundrl::trainer::{compare_modes, emit_curves, train, RewardMode};
use groundrl::verify::{run_suite, SuiteConfig};
use groundrl::Error;

#[derive(Parser)]
#[command(name = "groundrl", version, about = "Grounded long-context RL toolkit")]
struct Cli {
    /// Worker threads for Monte-Carlo sampling and document processing.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Certify the gradient bounds and decompositions on random instances.
    VerifyProps {
        #[arg(long, default_value_t = 1200)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        max_chunks: usize,
        #[arg(long, default_value_t = 6)]
        max_gold: usize,
        #[command(flatten)]
        common: Common,
        /// Line-delimited report file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_nonmonotone: bool,
    },
    /// Train the toy grounding policy and write a curve file.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<RewardMode>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all three reward modes and check their ordering.
    CompareModes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score model outputs against a dataset.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        /// Line-delimited `{"id", "output"}` records.
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a grounded QA dataset from a corpus.
    GenData {
        /// Directory of `.txt` files or a manifest listing them.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the offline hashing embedder and scripted generator.
        #[arg(long)]
        mock_providers: bool,
        /// Scripted scores for the mock generator.
        #[arg(long, requires = "mock_providers")]
        scores: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Violation(String),
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Config(_) | Error::UnsupportedSize { .. } => Failure::Usage(e.to_string()),
            Error::Invariant(_) | Error::Divergence { .. } => Failure::Violation(e.to_string()),
            Error::Io(_) | Error::Json(_) | Error::Parse { .. } | Error::Provider(_) => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool set once");
    }
    let result = match cli.command {
        Command::VerifyProps { trials, max_chunks, max_gold, common, out, inject_nonmonotone } => {
            let config = SuiteConfig {
                trials,
                max_chunks,
                max_gold,
                seed: common.seed,
                inject_nonmonotone,
                ..Default::default()
            };
            verify_props(&config, out.as_deref())
        }
        Command::TrainToy { config, mode, seed, out } => train_toy(&config, mode, seed, &out),
        Command::CompareModes { config, seed, out } => compare(&config, seed, &out),
        Command::Score { dataset, rollouts, eta, beta, common: _, out } => {
            score(&dataset, &rollouts, RewardConfig { eta, beta, ..Default::default() }, &out)
        }
        Command::GenData { corpus, config, mock_providers, scores, seed, out } => {
            gen_data(&corpus, config.as_deref(), mock_providers, scores.as_deref(), seed, cli.threads, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn json_line(w: &mut impl Write, value: &impl serde::Serialize) -> Result<(), Failure> {
    serde_json::to_writer(&mut *w, value).map_err(Error::from)?;
    writeln!(w)?;
    Ok(())
}

fn verify_props(config: &SuiteConfig, out: Option<&Path>) -> Outcome {
    let mut writer = out.map(create).transpose()?;
    let summary = run_suite(config, |record| {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, record)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        json_line(w, &serde_json::json!({ "kind": "summary", "summary": summary }))?;
        w.flush()?;
    }
    println!("trials: {}  reports: {}  violations: {}", summary.trials, summary.reports, summary.violations);
    for (regime, s) in &summary.regimes {
        let failures: Vec<String> = s.failures.iter().map(|(c, n)| format!("{c:?}={n}")).collect();
        println!(
            "  {regime:?}: trials {}  max identity err {:.1e}  max decomposition err {:.1e}  failed inequalities [{}]",
            s.trials,
            s.max_identity_error,
            s.max_decomposition_error,
            failures.join(", ")
        );
    }
    println!("elapsed: {:.2}s", summary.elapsed_secs);
    match &summary.first_counterexample {
        None => Ok(()),
        Some(c) => Err(Failure::Violation(format!(
            "violation: {:?} failed at trial {} chunk {}\n{}",
            c.check,
            c.trial,
            c.chunk,
            serde_json::to_string_pretty(c).map_err(Error::from)?
        ))),
    }
}

fn load_train(path: &Path, seed: Option<u64>) -> Result<groundrl::trainer::TrainConfig, Failure> {
    let mut c = ExperimentConfig::load(path)?.train_config()?;
    if let Some(s) = seed {
        c.train.seed = s;
    }
    Ok(c)
}

fn train_toy(config: &Path, mode: Option<RewardMode>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut c = load_train(config, seed)?;
    if let Some(m) = mode {
        c = c.with_mode(m);
    }
    std::fs::create_dir_all(out)?;
    let log = train(&c)?;
    let path = out.join(format!("{}.csv", c.train.mode.name()));
    emit_curves(&log, &path)?;
    let last = log.last().expect("non-empty log");
    println!(
        "{}: step {}  recall {:.4}  r_ans {:.4}  -> {}",
        c.train.mode.name(),
        last.step,
        last.mean_recall,
        last.mean_answer_reward,
        path.display()
    );
    Ok(())
}

fn compare(config: &Path, seed: Option<u64>, out: &Path) -> Outcome {
    let c = load_train(config, seed)?;
    std::fs::create_dir_all(out)?;
    let (cmp, logs) = compare_modes(&c)?;
    for (mode, log) in &logs {
        emit_curves(log, &out.join(format!("{}.csv", mode.name())))?;
    }
    let mut w = create(&out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &cmp).map_err(Error::from)?;
    writeln!(w)?;
    w.flush()?;
    for a in &cmp.arms {
        println!(
            "{:<13} recall {:.4} -> {:.4}  r_ans {:.4}  head unchanged: {}",
            a.mode.name(),
            a.initial_recall,
            a.final_recall,
            a.final_answer_reward,
            a.answer_logit_unchanged
        );
    }
    for (name, ok) in &cmp.checks {
        println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
    }
    if cmp.passed() {
        Ok(())
    } else {
        Err(Failure::Violation("mode ordering check failed".into()))
    }
}

fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>, Failure> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}

fn score(dataset: &Path, rollouts: &Path, config: RewardConfig, out: &Path) -> Outcome {
    config.validate()?;
    let examples = load_dataset(dataset)?;
    let rollouts = read_rollouts(rollouts)?;
    let report = score_rollouts(&examples, &rollouts, &config).map_err(|e| match e {
        Error::InvalidInput(m) => Failure::Violation(m),
        e => e.into(),
    })?;
    let mut w = create(out)?;
    for row in &report.rows {
        json_line(&mut w, row)?;
    }
    json_line(&mut w, &serde_json::json!({ "id": "mean", "n": report.rows.len(), "malformed": report.malformed, "mean": report.mean }))?;
    w.flush()?;
    let m = &report.mean;
    println!(
        "{} rollouts ({} malformed): recall {:.4}  precision {:.4}  r_ans {:.4}  r_ctx {:.4}  r_total {:.4}",
        report.rows.len(),
        report.malformed,
        m.recall,
        m.precision,
        m.r_ans,
        m.r_ctx,
        m.r_total
    );
    Ok(())
}

fn gen_data(
    corpus: &Path,
    config: Option<&Path>,
    mock: bool,
    scores: Option<&Path>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: &Path,
) -> Outcome {
    let mut pc = match config {
        Some(p) => ExperimentConfig::load(p)?.pipeline_config()?,
        None => Default::default(),
    };
    if let Some(s) = seed {
        pc.seed = s;
    }
    if let Some(t) = threads {
        pc.max_in_flight = pc.max_in_flight.min(t);
    }
    let docs = load_corpus(corpus)?;
    let report = if mock {
        let gen = match scores {
            Some(p) => ScriptedGenerator::from_json_file(p)?,
            None => ScriptedGenerator::default(),
        };
        run_pipeline(&docs, &HashingEmbedder::default(), &gen, &pc)?
    } else {
        real_pipeline(&docs, &pc)?
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&report.examples, out)?;
    let skip_path = out.with_extension("skips.jsonl");
    std::fs::write(&skip_path, report.skips_to_jsonl())?;
    println!(
        "{} documents: {} examples -> {}, {} skipped -> {}",
        docs.len(),
        report.examples.len(),
        out.display(),
        report.skips.len(),
        skip_path.display()
    );
    Ok(())
}

#[cfg(feature = "http")]
fn real_pipeline(
    docs: &[(String, String)],
    pc: &groundrl::datagen::PipelineConfig,
) -> Result<groundrl::datagen::PipelineReport, Failure> {
    use groundrl::datagen::http::{HttpConfig, HttpProvider};
    use groundrl::datagen::{EmbeddingProvider, GenerationProvider};
    let provider = HttpProvider::new(HttpConfig::from_env()?);
    let embed: &dyn EmbeddingProvider = &provider;
    let gen: &dyn GenerationProvider = &provider;
    Ok(run_pipeline(docs, embed, gen, pc)?)
}

#[cfg(not(feature = "http"))]
fn real_pipeline(
    _docs: &[(String, String)],
    _pc: &groundrl::datagen::PipelineConfig,
) -> Result<groundrl::datagen::PipelineReport, Failure> {
    Err(Failure::Usage("built without the `http` feature; pass --mock-providers".into()))
}
