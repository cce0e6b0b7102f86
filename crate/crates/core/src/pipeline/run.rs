//! Subcommand drivers shared by the CLI and the test suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoding::{batch_generate_keyed, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::objectives::{train, EpochStats, LossConfig, TrainOptions, TrainingPair, TrainingReport};
use crate::seq2seq::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::tokenfreq::{
    build_vocab, compute_weights, load_vocab, save_vocab, tokenize, FrequencyTable, Vocab, WeightVector,
};

use super::{
    corpus_sentences, format_corpus, load_corpus, make_pairs, make_synthetic, text_pairs, Episode,
    SyntheticSpec,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const EVAL_FILE: &str = "eval.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Model, loss, decoding and optimisation settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub max_len: usize,
    pub attention: bool,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(5);
        let train = TrainOptions::default();
        RunConfig {
            layers: desk.num_layers,
            hidden: desk.hidden,
            embed: desk.embed,
            max_len: desk.max_len,
            attention: desk.use_attention,
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            epochs: train.epochs,
            batch: train.batch_size,
            lr: train.lr,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            hidden: self.hidden,
            embed: self.embed,
            vocab_size,
            max_len: self.max_len,
            use_attention: self.attention,
            seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn with_loss(&self, loss: LossConfig) -> Self {
        RunConfig {
            loss,
            ..self.clone()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "file is not valid UTF-8"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Lines of a text file; empty lines stay as empty strings so alignment
/// survives.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

pub fn vocab_from_episodes(episodes: &[Episode], max_size: usize) -> Result<(Vocab, FrequencyTable)> {
    build_vocab(&corpus_sentences(episodes), max_size)
}

pub fn build_vocab_file(corpus: &Path, max_size: usize, out: &Path) -> Result<(Vocab, FrequencyTable)> {
    let loaded = load_corpus(corpus)?;
    let (vocab, freq) = vocab_from_episodes(&loaded.episodes, max_size)?;
    save_vocab(out, &vocab, &freq)?;
    Ok((vocab, freq))
}

/// Fresh initialisation trained on `pairs`.
pub fn train_model(
    pairs: &[TrainingPair],
    freq: &FrequencyTable,
    config: &RunConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, TrainingReport)> {
    let model_config = config.model_config(freq.len());
    let mut params = init_params(&model_config, model_config.seed)?;
    let weights = config.loss.weights(freq)?;
    let report = train(&mut params, pairs, &weights, &config.train_options(), on_epoch)?;
    Ok((params, report))
}

/// Trains on `corpus` and writes the checkpoint and epoch report into `out_dir`.
pub fn train_run(
    corpus: &Path,
    vocab_path: &Path,
    out_dir: &Path,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, TrainingReport)> {
    let loaded = load_corpus(corpus)?;
    let (vocab, freq) = load_vocab(vocab_path)?;
    let pairs = make_pairs(&loaded.episodes, &vocab, config.max_len);
    ensure_dir(out_dir)?;
    let (params, report) = train_model(&pairs, &freq, config, |s| on_epoch(s))?;
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &params)?;
    let mut text = String::new();
    for e in &report.epochs {
        let _ = writeln!(text, "{}", e.report_line());
    }
    write_file(&out_dir.join(TRAIN_REPORT_FILE), &text)?;
    Ok((params, report))
}

/// Weights for ITF inference, or `None` for the other strategies.
pub fn inference_weights(decode: &DecodeConfig, freq: &FrequencyTable) -> Result<Option<WeightVector>> {
    match decode.strategy {
        Strategy::ItfInfer => compute_weights(freq, decode.lambda_itf_infer).map(Some),
        _ => Ok(None),
    }
}

/// One space-joined response per source; blank sources give blank responses.
pub fn generate_texts(
    params: &ModelParams,
    vocab: &Vocab,
    freq: &FrequencyTable,
    sources: &[String],
    decode: &DecodeConfig,
) -> Result<Vec<String>> {
    if vocab.len() != params.config().vocab_size {
        return Err(Error::Contract(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    let weights = inference_weights(decode, freq)?;
    let keep = params.config().max_len;
    let encoded: Vec<Vec<usize>> = sources
        .iter()
        .map(|s| {
            let mut ids = vocab.encode_ids(&tokenize(s, true), false);
            ids.truncate(keep);
            ids
        })
        .collect();
    // noise is keyed by line number, so blank lines do not shift later streams
    let live: Vec<usize> = (0..sources.len()).filter(|&i| !encoded[i].is_empty()).collect();
    let batch: Vec<(u64, Vec<usize>)> = live.iter().map(|&i| (i as u64, encoded[i].clone())).collect();
    let decoded = batch_generate_keyed(params, &batch, decode, weights.as_ref()).map_err(|e| match e {
        Error::Item { index, source } => Error::Item {
            index: live[index],
            source,
        },
        other => other,
    })?;
    let mut out = vec![String::new(); sources.len()];
    for (slot, ids) in live.into_iter().zip(decoded) {
        out[slot] = vocab.decode_ids(&ids).join(" ");
    }
    Ok(out)
}

pub fn generate_file(
    checkpoint: &Path,
    vocab_path: &Path,
    sources_path: &Path,
    out: &Path,
    decode: &DecodeConfig,
) -> Result<usize> {
    let params = load_checkpoint(checkpoint)?;
    let (vocab, freq) = load_vocab(vocab_path)?;
    let sources = read_lines(sources_path)?;
    let responses = generate_texts(&params, &vocab, &freq, &sources, decode)?;
    let mut text = String::new();
    for r in &responses {
        text.push_str(r);
        text.push('\n');
    }
    write_file(out, &text)?;
    Ok(responses.len())
}

/// Scores line-aligned response texts after the shared tokenization.
pub fn evaluate_texts(hypotheses: &[String], references: &[String]) -> Result<EvalReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let hyp: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenize(h, true)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r, true)).collect();
    evaluate(&hyp, &refs)
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string(report).expect("eval report serializes")
}

/// Evaluates two aligned files and writes `eval.json` into `out_dir`.
pub fn evaluate_files(hyp: &Path, refs: &Path, out_dir: &Path) -> Result<EvalReport> {
    let report = evaluate_texts(&read_lines(hyp)?, &read_lines(refs)?)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join(EVAL_FILE), &(report_json(&report) + "\n"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: EvalReport,
    pub training: TrainingReport,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,bleu1,dist1\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.lambda, r.report.bleu1, r.report.dist1);
    }
    out
}

/// Train, generate and evaluate once per ITF lambda. Generation runs on the
/// sources of `eval_pairs` and is scored against their targets.
pub fn sweep_pairs(
    train_pairs: &[TrainingPair],
    eval_pairs: &[(String, String)],
    vocab: &Vocab,
    freq: &FrequencyTable,
    lambdas: &[f64],
    config: &RunConfig,
    mut on_epoch: impl FnMut(f64, &EpochStats),
) -> Result<Vec<SweepRow>> {
    let (sources, refs): (Vec<String>, Vec<String>) = eval_pairs.iter().cloned().unzip();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let run = config.with_loss(LossConfig::itf(lambda));
        let (params, training) = train_model(train_pairs, freq, &run, |s| on_epoch(lambda, s))?;
        let hyps = generate_texts(&params, vocab, freq, &sources, &run.decode)?;
        rows.push(SweepRow {
            lambda,
            report: evaluate_texts(&hyps, &refs)?,
            training,
        });
    }
    Ok(rows)
}

/// File-level sweep; writes `sweep.csv` into `out_dir`. Evaluation uses the
/// training corpus unless `eval_corpus` is given.
pub fn sweep_run(
    corpus: &Path,
    eval_corpus: Option<&Path>,
    vocab_path: &Path,
    lambdas: &[f64],
    out_dir: &Path,
    config: &RunConfig,
    on_epoch: impl FnMut(f64, &EpochStats),
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let train_eps = load_corpus(corpus)?.episodes;
    let eval_eps = match eval_corpus {
        Some(p) => load_corpus(p)?.episodes,
        None => train_eps.clone(),
    };
    let (vocab, freq) = load_vocab(vocab_path)?;
    let pairs = make_pairs(&train_eps, &vocab, config.max_len);
    let rows = sweep_pairs(
        &pairs,
        &text_pairs(&eval_eps),
        &vocab,
        &freq,
        lambdas,
        config,
        on_epoch,
    )?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join(SWEEP_FILE), &format_sweep(&rows))?;
    Ok(rows)
}

pub fn synth_file(spec: &SyntheticSpec, out: &Path) -> Result<usize> {
    let episodes = make_synthetic(spec)?;
    write_file(out, &format_corpus(&episodes))?;
    Ok(episodes.len())
}

/// Splits a comma-separated list such as `0,0.2,0.4`.
pub fn parse_lambdas(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::Config(format!("bad lambda `{s}`")))
        })
        .collect()
}

/// Default location of a run's checkpoint.
pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_FILE)
}
