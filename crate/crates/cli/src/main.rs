use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use divergen::decoding::{DecodeConfig, Strategy};
use divergen::objectives::{LossConfig, DEFAULT_BATCH, DEFAULT_ITF_LAMBDA, DEFAULT_LR};
use divergen::pipeline::{self, RunConfig, SyntheticSpec};
use divergen::Result;

#[derive(Parser, Debug)]
#[command(name = "divergen", version, about = "Train and evaluate ITF-loss dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a vocabulary file with token counts from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        max_vocab: usize,
    },
    /// Train a model; writes model.ckpt and train_report.txt into --out.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Loss::Itf)]
        loss: Loss,
        #[arg(long, default_value_t = DEFAULT_ITF_LAMBDA)]
        lambda_itf: f64,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate one response per line of --sources.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score aligned hypothesis and reference files; writes eval.json into --out.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train, generate and evaluate for each ITF lambda; writes sweep.csv into --out.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus whose pairs are generated and scored (default: --corpus).
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6")]
        lambdas: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Write a synthetic corpus of generic and source-specific responses.
    Synth {
        #[arg(long, default_value_t = 100)]
        sources: usize,
        #[arg(long, default_value_t = 0.6)]
        generic_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Sce,
    Itf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    embed: usize,
    #[arg(long, default_value_t = 28)]
    max_len: usize,
    #[arg(long)]
    attention: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// greedy, mmi, itf or noisy
    #[arg(long, default_value = "greedy")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.8)]
    lambda_mmi: f64,
    #[arg(long, default_value_t = 5)]
    gamma: usize,
    /// Weight exponent for ITF inference.
    #[arg(long, alias = "lambda-itf", default_value_t = 0.09)]
    lambda_itf_infer: f64,
    #[arg(long, default_value_t = 1.4)]
    lambda_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_suppress: f64,
    #[arg(long, default_value_t = 28)]
    decode_max_len: usize,
}

impl DecodeArgs {
    fn config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            strategy: self.strategy,
            lambda_mmi: self.lambda_mmi,
            gamma: self.gamma,
            lambda_itf_infer: self.lambda_itf_infer,
            lambda_noise: self.lambda_noise,
            lambda_suppress: self.lambda_suppress,
            max_len: self.decode_max_len,
            seed,
        }
    }
}

fn run_config(model: &ModelArgs, train: &TrainArgs, loss: LossConfig, decode: DecodeConfig) -> RunConfig {
    RunConfig {
        layers: model.layers,
        hidden: model.hidden,
        embed: model.embed,
        max_len: model.max_len,
        attention: model.attention,
        loss,
        decode,
        epochs: train.epochs,
        batch: train.batch,
        lr: train.lr,
        seed: train.seed,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { corpus, out, max_vocab } => {
            let (vocab, _) = pipeline::build_vocab_file(&corpus, max_vocab, &out)?;
            println!("vocab_size={}", vocab.len());
        }
        Command::Train {
            corpus,
            vocab,
            out,
            loss,
            lambda_itf,
            model,
            train,
        } => {
            let loss = match loss {
                Loss::Sce => LossConfig::sce(),
                Loss::Itf => LossConfig::itf(lambda_itf),
            };
            let config = run_config(&model, &train, loss, DecodeConfig::default());
            pipeline::train_run(&corpus, &vocab, &out, &config, |e| println!("{}", e.report_line()))?;
        }
        Command::Generate {
            checkpoint,
            vocab,
            sources,
            out,
            seed,
            decode,
        } => {
            let n = pipeline::generate_file(&checkpoint, &vocab, &sources, &out, &decode.config(seed))?;
            eprintln!("generated {n} responses");
        }
        Command::Evaluate { hyp, reference, out } => {
            let report = pipeline::evaluate_files(&hyp, &reference, &out)?;
            println!("{}", pipeline::report_json(&report));
        }
        Command::Sweep {
            corpus,
            vocab,
            eval,
            lambdas,
            out,
            model,
            train,
            decode,
        } => {
            let lambdas = pipeline::parse_lambdas(&lambdas)?;
            let config = run_config(&model, &train, LossConfig::default(), decode.config(train.seed));
            let rows = pipeline::sweep_run(&corpus, eval.as_deref(), &vocab, &lambdas, &out, &config, |l, e| {
                eprintln!("lambda={l} {}", e.report_line())
            })?;
            print!("{}", pipeline::format_sweep(&rows));
        }
        Command::Synth {
            sources,
            generic_prob,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                sources,
                generic_prob,
                seed,
            };
            let n = pipeline::synth_file(&spec, &out)?;
            eprintln!("wrote {n} episodes");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
