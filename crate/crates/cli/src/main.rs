use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use earlyexit_core::io::{partition_valid, read_trace_file, SynthParamsFile};
use earlyexit_core::oracle::{profile_all, strategy_overthinking_rate, tradeoff_point};
use earlyexit_core::report::{summarize_overthinking, write_oracle_csv};
use earlyexit_core::sweep::DEFAULT_LENGTH_FILTER;
use earlyexit_core::{
    dp_optimal_bound, generate_corpus, load_corpus, load_vocabulary, run_sweep, save_corpus,
    write_report, Corpus, StrategyConfig, SweepSpec, TraceSignals, ValidationMode, Vocabulary,
};

#[derive(Parser)]
#[command(name = "earlyexit", version, about = "Evaluate early-exit strategies on per-layer ASR traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct LoadArgs {
    /// Reject the whole file on any invalid trace and require stored
    /// hypotheses to match the decoded posteriors.
    #[arg(long)]
    strict: bool,
}

impl LoadArgs {
    fn mode(&self) -> ValidationMode {
        if self.strict {
            ValidationMode::Strict
        } else {
            ValidationMode::Lenient
        }
    }

    fn load(&self, path: &Path) -> Result<Corpus> {
        load_corpus(path, self.mode()).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check every trace of a file and list rule violations.
    Validate {
        trace: PathBuf,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Generate a synthetic trace corpus.
    Gen {
        /// Synthesis parameters (TOML, or JSON with a .json extension).
        params: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Overrides the seed of the parameter file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of utterances.
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Overthinking statistics and first-best-layer histogram.
    Analyze {
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        length_filter: usize,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Optimal speed/quality bound as CSV.
    Oracle {
        trace: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LENGTH_FILTER)]
        length_filter: usize,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Per-utterance exit decisions of one strategy as JSON Lines. Several
    /// --strategy flags are combined (exit when any of them fires).
    Run {
        trace: PathBuf,
        /// `kind[:tau=..,rho=..,layer=..,ce=..]` or a JSON object.
        #[arg(long, required = true)]
        strategy: Vec<StrategyConfig>,
        /// Word list for overlang; the bundled English list when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LENGTH_FILTER)]
        length_filter: usize,
        #[command(flatten)]
        load: LoadArgs,
    },
    /// Full hyperparameter sweep with fixed-layer baselines and oracle curve.
    Sweep {
        trace: PathBuf,
        /// Sweep spec file; the reference grids when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Overrides the spec's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        length_filter: Option<usize>,
        #[command(flatten)]
        load: LoadArgs,
    },
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn vocabulary(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => load_vocabulary(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(Vocabulary::builtin_english()),
    }
}

fn validate(trace: &Path, load: &LoadArgs) -> Result<ExitCode> {
    let traces = read_trace_file(trace)?;
    let total = traces.len();
    let (ok, bad) = partition_valid(traces, load.mode());
    for (id, violations) in &bad {
        for v in violations {
            println!("{id}\t{v}");
        }
    }
    if let Err(e) = Corpus::new(ok) {
        println!("corpus\t{e}");
        return Ok(ExitCode::FAILURE);
    }
    eprintln!("{} of {total} traces valid", total - bad.len());
    Ok(if bad.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { trace, load } => return validate(&trace, &load),
        Command::Gen {
            params,
            output,
            seed,
            utterances,
        } => {
            let mut p = SynthParamsFile::load(&params)?.into_params(&params)?;
            if let Some(s) = seed {
                p.seed = s;
            }
            if let Some(n) = utterances {
                p.n_utterances = n;
            }
            let corpus = generate_corpus(&p)?;
            save_corpus(&corpus, &output)?;
            eprintln!("wrote {} traces to {}", corpus.len(), output.display());
        }
        Command::Analyze {
            trace,
            length_filter,
            json,
            load,
        } => {
            let summary = summarize_overthinking(&load.load(&trace)?, length_filter)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.render());
            }
        }
        Command::Oracle {
            trace,
            length_filter,
            output,
            load,
        } => {
            let curve = dp_optimal_bound(&load.load(&trace)?, length_filter)?;
            let mut out = open_output(output.as_deref())?;
            write_oracle_csv(&curve, &mut out)?;
            out.flush()?;
            let phases = curve.phases(1e-6);
            eprintln!(
                "{} utterances; decreasing budgets {:?}, plateau {:?}, increasing {:?}",
                curve.n_utterances, phases.decreasing, phases.plateau, phases.increasing
            );
        }
        Command::Run {
            trace,
            mut strategy,
            vocab,
            output,
            length_filter,
            load,
        } => {
            let corpus = load.load(&trace)?;
            let vocab = vocabulary(vocab.as_deref())?;
            let cfg = if strategy.len() == 1 {
                strategy.remove(0)
            } else {
                StrategyConfig::combined(strategy)
            };
            cfg.validate(corpus.n_layers(), corpus.i_min())?;
            let decisions = corpus
                .traces()
                .iter()
                .map(|t| TraceSignals::new(t, Some(&vocab)).decide(&cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = open_output(output.as_deref())?;
            for d in &decisions {
                serde_json::to_writer(&mut out, d)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            match tradeoff_point(&corpus, &decisions, length_filter) {
                Ok(point) => {
                    let kept = corpus.filter_by_length(length_filter);
                    let profiles = profile_all(kept)?;
                    let over = strategy_overthinking_rate(&profiles, &decisions)?;
                    eprintln!(
                        "{}: saved {:.4}, WER {:.4}, overthinking {:.4} over {} utterances",
                        cfg.label(),
                        point.saved_fraction,
                        point.corpus_wer,
                        over,
                        profiles.len()
                    );
                }
                Err(e) => eprintln!("{}: no summary ({e})", cfg.label()),
            }
        }
        Command::Sweep {
            trace,
            spec,
            vocab,
            out,
            length_filter,
            load,
        } => {
            let mut spec = match spec {
                Some(p) => SweepSpec::load(&p)?,
                None => SweepSpec::with_default_grids(None, PathBuf::from("report")),
            };
            if let Some(v) = vocab {
                spec.vocab_path = Some(v);
            }
            if let Some(o) = out {
                spec.output_path = o;
            }
            if let Some(l) = length_filter {
                spec.length_filter = l;
            }
            let corpus = load.load(&trace)?;
            let vocab = vocabulary(spec.vocab_path.as_deref())?;
            let result = run_sweep(&corpus, &spec, Some(&vocab))?;
            let files = write_report(&result.records, &result.oracle, &spec.output_path)?;
            eprintln!(
                "{} rows over {} utterances -> {}, {}",
                result.records.len(),
                result.n_utterances,
                files.sweep.display(),
                files.oracle.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
