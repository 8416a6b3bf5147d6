use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tlpo_core::data::read_json;
use tlpo_core::detector::EnglishMode;
use tlpo_core::harness::{self, EvalOptions, RunConfig, RunManifest, MANIFEST_FILE, SUMMARY_FILE};
use tlpo_core::{Error, ExecMode};

const OUT_ENV: &str = "TLPO_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "tlpo",
    version,
    about = "Token-level policy optimization on a toy tabular policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Neutral,
    Strict,
}

impl From<Mode> for EnglishMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Neutral => EnglishMode::Neutral,
            Mode::Strict => EnglishMode::Strict,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML file with optional [corpus] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $TLPO_OUT_DIR/<command>, else out/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Exec {
    /// English treatment for rewards and metrics.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, vocabulary and base policy.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on a corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides the number of steps from the config file.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        exec: Exec,
    },
    /// Score a policy on the held-out prompts of a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Policy checkpoint [default: the corpus base policy].
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Sampled responses per prompt.
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        exec: Exec,
    },
    /// Train all advantage/selection combinations and rank them.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        exec: Exec,
    },
    /// Probability shift beyond the top-N at the contexts a run trained on.
    Shift {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        /// Policy before training [default: the corpus base policy].
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Policy after training [default: the run's policy].
        #[arg(long)]
        trained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| match std::env::var_os(OUT_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d).join(command),
        _ => Path::new("out").join(command),
    })
}

fn load_config(common: &Common) -> tlpo_core::Result<RunConfig> {
    common
        .config
        .as_deref()
        .map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply_exec(cfg: &mut RunConfig, exec: &Exec) {
    if let Some(m) = exec.mode {
        cfg.train.mode = m.into();
    }
    if exec.sequential {
        cfg.train.exec = ExecMode::Sequential;
    }
}

fn finish(out: &Path) -> tlpo_core::Result<()> {
    let summary = std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap_or_default();
    print!("{summary}");
    let m: RunManifest = read_json(&out.join(MANIFEST_FILE))?;
    println!("run {}  -> {}", m.run_id, out.display());
    Ok(())
}

fn run(cli: Cli) -> tlpo_core::Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.corpus.seed = s;
            }
            let out = out_dir(common.out, "gen");
            let r = harness::cmd_gen(&cfg.corpus, &out)?;
            println!(
                "generated {} prompts, kept {}, dropped {}; vocabulary {}, designated contexts {}",
                r.generated,
                r.kept,
                r.dropped.len(),
                r.vocab_size,
                r.designated_contexts
            );
            finish(&out)
        }
        Command::Train {
            corpus,
            steps,
            resume,
            common,
            exec,
        } => {
            let mut cfg = load_config(&common)?;
            apply_exec(&mut cfg, &exec);
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out = out_dir(common.out, "train");
            harness::cmd_train(
                &corpus,
                &cfg.train,
                &cfg.exclusions,
                &out,
                resume.as_deref(),
            )?;
            finish(&out)
        }
        Command::Eval {
            corpus,
            policy,
            samples,
            common,
            exec,
        } => {
            let cfg = load_config(&common)?;
            let opts = EvalOptions {
                mode: exec.mode.map_or(cfg.train.mode, Into::into),
                samples: samples.unwrap_or(cfg.train.eval_samples),
                max_len: cfg.train.max_len,
                seed: common.seed.unwrap_or(cfg.train.seed),
                exec: if exec.sequential {
                    ExecMode::Sequential
                } else {
                    ExecMode::Parallel
                },
            };
            let policy = policy.unwrap_or_else(|| corpus.join(harness::POLICY_FILE));
            let out = out_dir(common.out, "eval");
            harness::cmd_eval(&corpus, &policy, &opts, &cfg.exclusions, &out)?;
            finish(&out)
        }
        Command::Ablate {
            corpus,
            steps,
            common,
            exec,
        } => {
            let mut cfg = load_config(&common)?;
            apply_exec(&mut cfg, &exec);
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out = out_dir(common.out, "ablate");
            harness::cmd_ablate(&corpus, &cfg.train, &cfg.exclusions, &out)?;
            finish(&out)
        }
        Command::Shift {
            corpus,
            run,
            baseline,
            trained,
            out,
        } => {
            let out = out_dir(out, "shift");
            harness::cmd_shift(&corpus, &run, baseline.as_deref(), trained.as_deref(), &out)?;
            finish(&out)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::IncidentLimit { .. } => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}
