//! Greedy decoding with logit adjustments.
//!
//! At every step the decoder's projection-layer logits `x` pass through, in
//! order: the strategy adjustment (MMI-antiLM, ITF inference, or noise), the
//! repetition suppressor, and an argmax whose ties go to the smallest id.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numcore::argmax;
use crate::rng;
use crate::seq2seq::{self, DecoderState, EncoderOutput, ModelParams};
use crate::tokenfreq::{WeightVector, EOS, PAD, SOS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Mmi,
    ItfInfer,
    Noisy,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Strategy::Greedy),
            "mmi" => Ok(Strategy::Mmi),
            "itf" | "itf-infer" | "itf_infer" => Ok(Strategy::ItfInfer),
            "noisy" => Ok(Strategy::Noisy),
            _ => Err(Error::Config(format!("unknown decoding strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub lambda_mmi: f64,
    /// Number of leading steps the anti-LM term applies to.
    pub gamma: usize,
    pub lambda_itf_infer: f64,
    pub lambda_noise: f64,
    pub lambda_suppress: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            lambda_mmi: 0.8,
            gamma: 5,
            lambda_itf_infer: 0.09,
            lambda_noise: 1.4,
            lambda_suppress: 1.0,
            max_len: 28,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        DecodeConfig {
            strategy,
            ..Self::default()
        }
    }
}

/// How often each token has been emitted in the current decode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RepetitionCounter {
    counts: Vec<u32>,
}

impl RepetitionCounter {
    pub fn new(vocab_size: usize) -> Self {
        RepetitionCounter {
            counts: vec![0; vocab_size],
        }
    }

    pub fn record(&mut self, token: usize) {
        if token >= self.counts.len() {
            self.counts.resize(token + 1, 0);
        }
        self.counts[token] += 1;
    }

    pub fn count(&self, token: usize) -> u32 {
        self.counts.get(token).copied().unwrap_or(0)
    }
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            left: vec![a],
            right: vec![b],
        });
    }
    Ok(())
}

/// `x - lambda * u` for steps before `gamma`, `x` afterwards.
pub fn mmi_adjust(x: &[f64], u: &[f64], lambda: f64, step: usize, gamma: usize) -> Result<Vec<f64>> {
    same_len("mmi_adjust", x.len(), u.len())?;
    if step >= gamma {
        return Ok(x.to_vec());
    }
    Ok(x.iter().zip(u).map(|(a, b)| a - lambda * b).collect())
}

/// Elementwise `w * x`.
pub fn itf_infer_adjust(x: &[f64], w: &WeightVector) -> Result<Vec<f64>> {
    same_len("itf_infer_adjust", x.len(), w.len())?;
    Ok(x.iter().zip(w.values()).map(|(a, b)| a * b).collect())
}

/// `x + lambda * n` with i.i.d. standard normal `n`.
pub fn noisy_adjust<R: Rng + ?Sized>(x: &[f64], lambda: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + lambda * n
        })
        .collect()
}

/// `x_k / (1 + count_k)^lambda`. Negative logits of repeated tokens move
/// toward zero.
pub fn suppress_repetition(x: &[f64], counter: &RepetitionCounter, lambda: f64) -> Result<Vec<f64>> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("suppressor lambda must be >= 0, got {lambda}")));
    }
    Ok(x.iter()
        .enumerate()
        .map(|(k, &v)| {
            let c = counter.count(k);
            if c == 0 {
                v
            } else {
                v / (1.0 + f64::from(c)).powf(lambda)
            }
        })
        .collect())
}

/// Source of per-step logits for [`decode_with`].
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Longest sequence the model can produce.
    fn max_steps(&self) -> usize;

    /// Conditional logits `x` for the next position after feeding `prev`.
    fn conditional(&mut self, prev: usize) -> Result<Vec<f64>>;

    /// Source-free logits `u` for the same prefix.
    fn unconditional(&mut self, prev: usize) -> Result<Vec<f64>>;
}

/// Greedy decode driven by `model`. Returns emitted ids with SOS, EOS, PAD and
/// UNK removed.
pub fn decode_with<M: StepModel, R: Rng + ?Sized>(
    model: &mut M,
    config: &DecodeConfig,
    weights: Option<&WeightVector>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if config.strategy == Strategy::ItfInfer && weights.is_none() {
        return Err(Error::Contract("ITF inference needs a weight vector".into()));
    }
    if config.lambda_suppress.is_nan() || config.lambda_suppress < 0.0 {
        return Err(Error::Config(format!(
            "suppressor lambda must be >= 0, got {}",
            config.lambda_suppress
        )));
    }
    let mut counter = RepetitionCounter::new(model.vocab_size());
    let mut emitted = Vec::new();
    let mut prev = SOS;
    let steps = config.max_len.min(model.max_steps());
    for step in 0..steps {
        let x = model.conditional(prev)?;
        let adjusted = match config.strategy {
            Strategy::Greedy => x,
            Strategy::Mmi => {
                if step < config.gamma {
                    let u = model.unconditional(prev)?;
                    mmi_adjust(&x, &u, config.lambda_mmi, step, config.gamma)?
                } else {
                    x
                }
            }
            Strategy::ItfInfer => itf_infer_adjust(&x, weights.expect("checked above"))?,
            Strategy::Noisy => noisy_adjust(&x, config.lambda_noise, rng),
        };
        let scored = suppress_repetition(&adjusted, &counter, config.lambda_suppress)?;
        let token = argmax(&scored);
        if token == EOS {
            break;
        }
        counter.record(token);
        emitted.push(token);
        prev = token;
    }
    Ok(emitted
        .into_iter()
        .filter(|&t| !matches!(t, PAD | UNK | SOS | EOS))
        .collect())
}

/// [`StepModel`] over a trained encoder-decoder and one encoded source.
pub struct Seq2SeqStepper<'p> {
    params: &'p ModelParams,
    enc: EncoderOutput,
    state: DecoderState,
    anti_lm: DecoderState,
}

impl<'p> Seq2SeqStepper<'p> {
    pub fn new(params: &'p ModelParams, source: &[usize]) -> Result<Self> {
        let config = params.config();
        if let Some(&bad) = source.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::Contract(format!("source token {bad} out of vocabulary range")));
        }
        let keep = source.len().min(config.max_len);
        let enc = seq2seq::encode(params, &source[..keep])?;
        let state = seq2seq::initial_state(params, &enc)?;
        Ok(Seq2SeqStepper {
            params,
            enc,
            state,
            anti_lm: DecoderState::zeros(config),
        })
    }
}

impl StepModel for Seq2SeqStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn max_steps(&self) -> usize {
        self.params.config().max_len
    }

    fn conditional(&mut self, prev: usize) -> Result<Vec<f64>> {
        self.state.prev_token = prev;
        let (x, next) = seq2seq::decode_step(self.params, &self.state, &self.enc)?;
        self.state = next;
        Ok(x.into_data())
    }

    // Only called while the anti-LM term is active, so the zero-initialised
    // decoder sees exactly the prefix emitted so far.
    fn unconditional(&mut self, prev: usize) -> Result<Vec<f64>> {
        self.anti_lm.prev_token = prev;
        let (u, next) = seq2seq::unconditional_step(self.params, &self.anti_lm)?;
        self.anti_lm = next;
        Ok(u.into_data())
    }
}

fn decode_indexed(
    params: &ModelParams,
    source: &[usize],
    config: &DecodeConfig,
    weights: Option<&WeightVector>,
    index: u64,
) -> Result<Vec<usize>> {
    let mut stepper = Seq2SeqStepper::new(params, source)?;
    let mut noise = rng::indexed_stream(config.seed, rng::NOISE, index);
    decode_with(&mut stepper, config, weights, &mut noise)
}

/// Greedy decode of one source; `weights` is required for ITF inference.
pub fn greedy_decode(
    params: &ModelParams,
    source: &[usize],
    config: &DecodeConfig,
    weights: Option<&WeightVector>,
) -> Result<Vec<usize>> {
    decode_indexed(params, source, config, weights, 0)
}

/// Independent decodes in input order. Noise for source `i` comes from its own
/// stream, so results do not depend on batch composition.
pub fn batch_generate(
    params: &ModelParams,
    sources: &[Vec<usize>],
    config: &DecodeConfig,
    weights: Option<&WeightVector>,
) -> Result<Vec<Vec<usize>>> {
    sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            decode_indexed(params, src, config, weights, i as u64).map_err(|e| Error::Item {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Like [`batch_generate`] but seeds each source's noise by an explicit key
/// instead of its position.
pub fn batch_generate_keyed(
    params: &ModelParams,
    sources: &[(u64, Vec<usize>)],
    config: &DecodeConfig,
    weights: Option<&WeightVector>,
) -> Result<Vec<Vec<usize>>> {
    sources
        .iter()
        .enumerate()
        .map(|(i, (key, src))| {
            decode_indexed(params, src, config, weights, *key).map_err(|e| Error::Item {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{init_params, ModelConfig};
    use proptest::prelude::{prop_assert_eq, proptest};
    use super::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Logits fixed per step, ignoring the prefix.
    struct Scripted {
        logits: Vec<f64>,
        uncond: Vec<f64>,
    }

    impl StepModel for Scripted {
        fn vocab_size(&self) -> usize {
            self.logits.len()
        }
        fn max_steps(&self) -> usize {
            28
        }
        fn conditional(&mut self, _prev: usize) -> Result<Vec<f64>> {
            Ok(self.logits.clone())
        }
        fn unconditional(&mut self, _prev: usize) -> Result<Vec<f64>> {
            Ok(self.uncond.clone())
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn mmi_examples() {
        let x = [1.0, 3.0, -2.0];
        assert_eq!(mmi_adjust(&x, &[5.0, 1.0, 0.0], 0.0, 0, 5).unwrap(), x);
        let same = mmi_adjust(&x, &x, 0.8, 1, 5).unwrap();
        for (a, b) in same.iter().zip(x) {
            assert!((a - 0.2 * b).abs() < 1e-15);
        }
        assert_eq!(argmax(&same), argmax(&x));
        assert_eq!(mmi_adjust(&x, &[9.0, 9.0, 9.0], 0.8, 5, 5).unwrap(), x);
        assert!(mmi_adjust(&x, &[1.0], 0.8, 0, 5).is_err());
    }

    #[test]
    fn itf_infer_examples() {
        let x = [2.0, 1.0];
        assert_eq!(itf_infer_adjust(&x, &WeightVector::uniform(2)).unwrap(), x);
        let uniform = WeightVector::from_values(vec![0.3, 0.3]).unwrap();
        assert_eq!(argmax(&itf_infer_adjust(&x, &uniform).unwrap()), 0);
        let w = WeightVector::from_values(vec![0.1, 1.0]).unwrap();
        let adj = itf_infer_adjust(&x, &w).unwrap();
        assert_eq!(adj, vec![0.2, 1.0]);
        assert_eq!((argmax(&x), argmax(&adj)), (0, 1));
    }

    #[test]
    fn noisy_examples() {
        let x = [1.0, -1.0, 0.5];
        assert_eq!(noisy_adjust(&x, 0.0, &mut rng()), x);
        assert_eq!(noisy_adjust(&x, 1.4, &mut rng()), noisy_adjust(&x, 1.4, &mut rng()));
    }

    #[test]
    fn noise_has_zero_mean() {
        let x = [0.7, -3.0];
        let lambda = 1.4;
        let mut r = rng();
        let draws = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..draws {
            let y = noisy_adjust(&x, lambda, &mut r);
            for k in 0..2 {
                sums[k] += (y[k] - x[k]) / lambda;
            }
        }
        for s in sums {
            assert!((s / draws as f64).abs() < 0.02);
        }
    }

    #[test]
    fn suppressor_examples() {
        let mut counter = RepetitionCounter::new(3);
        let x = [2.0, -2.0, 0.5];
        assert_eq!(suppress_repetition(&x, &counter, 1.0).unwrap(), x);
        counter.record(0);
        counter.record(1);
        counter.record(1);
        counter.record(1);
        assert_eq!(suppress_repetition(&x, &counter, 1.0).unwrap(), vec![1.0, -0.5, 0.5]);
        assert!(matches!(suppress_repetition(&x, &counter, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn suppressor_breaks_a_constant_loop() {
        let mut model = Scripted {
            logits: vec![0.0, 0.0, 0.0, 0.5, 3.0, 2.0, 1.0],
            uncond: vec![0.0; 7],
        };
        let looping = DecodeConfig {
            lambda_suppress: 0.0,
            ..DecodeConfig::default()
        };
        let out = decode_with(&mut model, &looping, None, &mut rng()).unwrap();
        assert_eq!(out, vec![4; 28]);

        let suppressed = DecodeConfig {
            lambda_suppress: 1.0,
            ..DecodeConfig::default()
        };
        let out = decode_with(&mut model, &suppressed, None, &mut rng()).unwrap();
        assert!(out.windows(2).any(|w| w[0] != w[1]), "{out:?}");
        assert_eq!(&out[..3], &[4, 5, 4]);
    }

    #[test]
    fn immediate_eos_gives_empty_output() {
        let mut model = Scripted {
            logits: vec![0.0, 0.0, 0.0, 10.0, 1.0],
            uncond: vec![0.0; 5],
        };
        assert!(decode_with(&mut model, &DecodeConfig::default(), None, &mut rng())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn itf_strategy_requires_weights() {
        let mut model = Scripted {
            logits: vec![0.0; 5],
            uncond: vec![0.0; 5],
        };
        let cfg = DecodeConfig::with_strategy(Strategy::ItfInfer);
        assert!(matches!(decode_with(&mut model, &cfg, None, &mut rng()), Err(Error::Contract(_))));
    }

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            embed: 8,
            vocab_size: 15,
            max_len: 10,
            use_attention: true,
            seed: 0,
        };
        init_params(&cfg, 9).unwrap()
    }

    #[test]
    fn neutral_strategies_agree() {
        let params = model();
        let base = DecodeConfig {
            lambda_suppress: 0.0,
            ..DecodeConfig::default()
        };
        let ones = WeightVector::uniform(15);
        for src in [vec![4, 5, 6], vec![7], vec![14, 13, 12, 11]] {
            let greedy = greedy_decode(&params, &src, &base, None).unwrap();
            assert!(greedy.len() <= 10);
            let cfgs = [
                DecodeConfig { strategy: Strategy::Mmi, lambda_mmi: 0.0, ..base.clone() },
                DecodeConfig { strategy: Strategy::ItfInfer, ..base.clone() },
                DecodeConfig { strategy: Strategy::Noisy, lambda_noise: 0.0, ..base.clone() },
            ];
            for cfg in cfgs {
                assert_eq!(greedy_decode(&params, &src, &cfg, Some(&ones)).unwrap(), greedy);
            }
        }
    }

    #[test]
    fn batch_generate_properties() {
        let params = model();
        let cfg = DecodeConfig::with_strategy(Strategy::Noisy);
        let sources = vec![vec![4, 5], vec![6], vec![7, 8, 9]];
        let out = batch_generate(&params, &sources, &cfg, None).unwrap();
        assert_eq!(out[0], greedy_decode(&params, &sources[0], &cfg, None).unwrap());
        assert!(batch_generate(&params, &[], &cfg, None).unwrap().is_empty());

        let keyed: Vec<(u64, Vec<usize>)> = sources.iter().cloned().enumerate().map(|(i, s)| (i as u64, s)).collect();
        let mut permuted = keyed.clone();
        permuted.reverse();
        let a = batch_generate_keyed(&params, &keyed, &cfg, None).unwrap();
        let mut b = batch_generate_keyed(&params, &permuted, &cfg, None).unwrap();
        b.reverse();
        assert_eq!(a, b);
        assert_eq!(a, out);

        let err = batch_generate(&params, &[vec![4], vec![]], &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Item { index: 1, .. }));
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_argmax(xs in proptest::collection::vec(-30.0f64..30.0, 2..40), lambda in 0.01f64..0.99, c in 0.01f64..10.0) {
            let adj = mmi_adjust(&xs, &xs, lambda, 0, 5).unwrap();
            prop_assert_eq!(argmax(&adj), argmax(&xs));
            let w = WeightVector::from_values(vec![c; xs.len()]).unwrap();
            prop_assert_eq!(argmax(&itf_infer_adjust(&xs, &w).unwrap()), argmax(&xs));
        }
    }
}
