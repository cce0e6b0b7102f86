//! Softmax cross-entropy and inverse-token-frequency losses, Adam, and the
//! teacher-forced training loop.
//!
//! The ITF loss of one step is `w_c * sce(x, c)`. A sequence loss sums the
//! per-step losses over non-PAD positions and a batch loss averages the
//! sequence losses over its examples.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::rng;
use crate::seq2seq::ModelParams;
use crate::tokenfreq::{compute_weights, FrequencyTable, WeightVector, EOS, SOS};

pub const DEFAULT_ITF_LAMBDA: f64 = 0.4;
pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Sce,
    Itf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::itf(DEFAULT_ITF_LAMBDA)
    }
}

impl LossConfig {
    pub fn sce() -> Self {
        LossConfig {
            kind: LossKind::Sce,
            lambda: 0.0,
        }
    }

    pub fn itf(lambda: f64) -> Self {
        LossConfig {
            kind: LossKind::Itf,
            lambda,
        }
    }

    /// Exponent actually applied to the frequencies (0 for SCE).
    pub fn effective_lambda(&self) -> f64 {
        match self.kind {
            LossKind::Sce => 0.0,
            LossKind::Itf => self.lambda,
        }
    }

    pub fn weights(&self, freq: &FrequencyTable) -> Result<WeightVector> {
        compute_weights(freq, self.effective_lambda())
    }
}

fn check_target(len: usize, target: usize) -> Result<()> {
    if target >= len {
        return Err(Error::Contract(format!("target {target} outside {len} classes")));
    }
    Ok(())
}

/// `-log softmax(x)[c]`, computed stably.
pub fn sce_loss(logits: &[f64], target: usize) -> Result<f64> {
    check_target(logits.len(), target)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - (logits[target] - max))
}

pub fn itf_loss(logits: &[f64], target: usize, weights: &WeightVector) -> Result<f64> {
    if weights.len() != logits.len() {
        return Err(Error::Dimension {
            op: "itf_loss",
            left: vec![logits.len()],
            right: vec![weights.len()],
        });
    }
    Ok(weights.get(target) * sce_loss(logits, target)?)
}

/// Sum of weighted per-step losses over positions where `pad_mask` is false.
pub fn sequence_loss(
    logits: &[Tensor],
    targets: &[usize],
    weights: &WeightVector,
    pad_mask: &[bool],
) -> Result<f64> {
    if logits.len() != targets.len() || targets.len() != pad_mask.len() {
        return Err(Error::Contract(format!(
            "sequence length mismatch: {} logits, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            pad_mask.len()
        )));
    }
    let mut total = 0.0;
    for ((x, &c), &pad) in logits.iter().zip(targets).zip(pad_mask) {
        if !pad {
            total += itf_loss(x.data(), c, weights)?;
        }
    }
    Ok(total)
}

/// Mean over examples of their sequence losses.
pub fn batch_loss(per_example: &[f64]) -> f64 {
    if per_example.is_empty() {
        return 0.0;
    }
    per_example.iter().sum::<f64>() / per_example.len() as f64
}

/// Tape version of [`sequence_loss`] over `[1, |V|]` logit rows.
pub fn sequence_loss_graph(
    tape: &mut Tape<'_>,
    logits: &[Var],
    targets: &[usize],
    weights: &WeightVector,
    pad_mask: &[bool],
) -> Result<Var> {
    if logits.len() != targets.len() || targets.len() != pad_mask.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "sequence length mismatch: {} logits, {} targets, {} mask entries",
            logits.len(),
            targets.len(),
            pad_mask.len()
        )));
    }
    let vocab = tape.value(logits[0]).len();
    if weights.len() != vocab {
        return Err(Error::Dimension {
            op: "sequence_loss",
            left: vec![vocab],
            right: vec![weights.len()],
        });
    }
    // -w_c at (t, c) for every unmasked step, zero elsewhere
    let mut select = vec![0.0; targets.len() * vocab];
    for (t, (&c, &pad)) in targets.iter().zip(pad_mask).enumerate() {
        check_target(vocab, c)?;
        if !pad {
            select[t * vocab + c] = -weights.get(c);
        }
    }
    let rows = tape.stack_rows(logits)?;
    let log_probs = tape.log_softmax(rows);
    let select = tape.constant(Tensor::new(vec![targets.len(), vocab], select)?);
    let picked = tape.mul(log_probs, select)?;
    Ok(tape.sum(picked))
}

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, lr: f64) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_params(params: &ModelParams, lr: f64) -> Self {
        Self::new(params.tensors().map(Tensor::shape), lr)
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One update over `(name, tensor)` pairs aligned with `grads`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn update<'a, I>(&mut self, params: I, grads: &[Tensor]) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    param: name.to_string(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to every model parameter; `grads` follow the
/// parameters' storage order.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    state.update(params.tensors_mut(), grads)
}

/// Source and target token ids, without specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl TrainingPair {
    /// Decoder inputs `SOS t1..tm` and targets `t1..tm EOS`, with the target
    /// cut so that neither exceeds `max_len`.
    pub fn teacher_forcing(&self, max_len: usize) -> (Vec<usize>, Vec<usize>) {
        let keep = self.target.len().min(max_len - 1);
        let body = &self.target[..keep];
        let mut inputs = Vec::with_capacity(keep + 1);
        inputs.push(SOS);
        inputs.extend_from_slice(body);
        let mut targets = body.to_vec();
        targets.push(EOS);
        (inputs, targets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-example sequence loss.
    pub loss: f64,
    /// Total loss divided by the number of supervised tokens.
    pub token_loss: f64,
    pub seconds: f64,
}

impl EpochStats {
    pub fn report_line(&self) -> String {
        format!("epoch={} loss={:.6} seconds={:.3}", self.epoch, self.loss, self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Loss and parameter gradients of one batch (mean over its examples).
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&TrainingPair],
    weights: &WeightVector,
) -> Result<(Vec<f64>, usize, Vec<Tensor>)> {
    let max_len = params.config().max_len;
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, true);
    let mut example_losses = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for pair in batch {
        let source = &pair.source[..pair.source.len().min(max_len)];
        let (inputs, targets) = pair.teacher_forcing(max_len);
        let logits = model.teacher_forced(&mut tape, source, &inputs)?;
        let mask = vec![false; targets.len()];
        let loss = sequence_loss_graph(&mut tape, &logits, &targets, weights, &mask)?;
        example_losses.push(tape.value(loss).item()?);
        tokens += targets.len();
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let mut grads = tape.backward(mean)?;
    let grads = model
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("parameter gradient"))
        .collect();
    Ok((example_losses, tokens, grads))
}

/// Teacher-forced mini-batch training with Adam. Examples are reshuffled every
/// epoch from the seed's shuffle stream.
pub fn train(
    params: &mut ModelParams,
    pairs: &[TrainingPair],
    weights: &WeightVector,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainingReport> {
    if pairs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if weights.len() != params.config().vocab_size {
        return Err(Error::Config(format!(
            "{} loss weights for a vocabulary of {}",
            weights.len(),
            params.config().vocab_size
        )));
    }
    if let Some((i, _)) = pairs
        .iter()
        .enumerate()
        .find(|(_, p)| p.source.is_empty() || p.target.is_empty())
    {
        return Err(Error::Input(format!("training pair {i} has an empty side")));
    }

    let mut adam = AdamState::for_params(params, opts.lr);
    let mut shuffle = rng::stream(opts.seed, rng::SHUFFLE);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainingReport::default();
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut token_count = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (losses, tokens, grads) = batch_gradients(params, &batch, weights)?;
            loss_sum += losses.iter().sum::<f64>();
            token_count += tokens;
            adam_step(params, &grads, &mut adam)?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            token_loss: loss_sum / token_count as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Value of the batch loss without recording gradients.
pub fn evaluate_loss(params: &ModelParams, pairs: &[TrainingPair], weights: &WeightVector) -> Result<f64> {
    let max_len = params.config().max_len;
    let mut losses = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let source = &pair.source[..pair.source.len().min(max_len)];
        let (inputs, targets) = pair.teacher_forcing(max_len);
        let logits = model.teacher_forced(&mut tape, source, &inputs)?;
        let rows: Vec<Tensor> = logits.iter().map(|&v| tape.value(v).clone()).collect();
        losses.push(sequence_loss(&rows, &targets, weights, &vec![false; targets.len()])?);
    }
    Ok(batch_loss(&losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{init_params, ModelConfig};
    use proptest::prelude::*;

    const LN4: f64 = 1.386_294_361_119_890_6;

    #[test]
    fn sce_examples() {
        assert!((sce_loss(&[0.0; 4], 2).unwrap() - LN4).abs() < 1e-15);
        let mut peaked = [0.0; 4];
        peaked[1] = 30.0;
        assert!(sce_loss(&peaked, 1).unwrap() < 1e-12);
        // -ln(e / (e + 1))
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((sce_loss(&[1.0, 0.0], 0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.313_262).abs() < 1e-6);
        assert!(matches!(sce_loss(&[0.0; 4], 4), Err(Error::Contract(_))));
    }

    #[test]
    fn itf_examples() {
        let ones = WeightVector::uniform(4);
        assert_eq!(itf_loss(&[0.3, 0.1, -2.0, 1.0], 2, &ones).unwrap(), sce_loss(&[0.3, 0.1, -2.0, 1.0], 2).unwrap());
        let half = WeightVector::from_values(vec![0.5; 4]).unwrap();
        assert!((itf_loss(&[0.0; 4], 0, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let frequent = WeightVector::from_values(vec![0.00384; 4]).unwrap();
        assert!((itf_loss(&[0.0; 4], 3, &frequent).unwrap() - 0.005_324).abs() < 1e-6);
    }

    #[test]
    fn sequence_loss_examples() {
        let x = Tensor::row(vec![0.0; 4]);
        let w = WeightVector::uniform(4);
        assert_eq!(sequence_loss(&[x.clone(), x.clone()], &[1, 2], &w, &[true, true]).unwrap(), 0.0);
        let single = sequence_loss(std::slice::from_ref(&x), &[1], &w, &[false]).unwrap();
        assert!((single - LN4).abs() < 1e-15);
        let double = sequence_loss(&[x.clone(), x.clone()], &[1, 1], &w, &[false, false]).unwrap();
        assert_eq!(double, 2.0 * single);
        assert!(matches!(
            sequence_loss(&[x], &[1, 2], &w, &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let rows = [Tensor::row(vec![0.2, -1.0, 3.0]), Tensor::row(vec![1.5, 0.5, -0.5])];
        let w = WeightVector::from_values(vec![0.2, 0.7, 1.0]).unwrap();
        let expected = sequence_loss(&rows, &[2, 0], &w, &[false, false]).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = rows.iter().map(|r| tape.param(r)).collect();
        let loss = sequence_loss_graph(&mut tape, &vars, &[2, 0], &w, &[false, false]).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = [Tensor::row(vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::row(vec![0.3, -4.0, 1e-3])];
        let mut st = AdamState::new(p.iter().map(Tensor::shape), 3e-4);
        st.update(p.iter_mut().map(|t| ("p", t)), &g).unwrap();
        let moved: Vec<f64> = p[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        for (d, gv) in moved.iter().zip(g[0].data()) {
            assert!((d + 3e-4 * gv.signum()).abs() < 1e-8, "{d}");
        }
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut p = [Tensor::row(vec![1.0, -2.0])];
        let before = p.clone();
        let mut st = AdamState::new(p.iter().map(Tensor::shape), 3e-4);
        st.update(p.iter_mut().map(|t| ("p", t)), &[Tensor::row(vec![0.0, 0.0])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_two_step_moments() {
        let mut p = [Tensor::row(vec![0.0])];
        let mut st = AdamState::new(p.iter().map(Tensor::shape), 0.1);
        let g = [Tensor::row(vec![2.0])];
        st.update(p.iter_mut().map(|t| ("p", t)), &g).unwrap();
        st.update(p.iter_mut().map(|t| ("p", t)), &g).unwrap();
        // v1 = 0.001 * 4, v2 = 0.999 * v1 + 0.001 * 4
        let v2 = 0.999 * 0.004 + 0.004;
        assert!((st.second_moment(0).data()[0] - v2).abs() < 1e-15);
        // m1 = 0.2, m2 = 0.9 * 0.2 + 0.2
        assert!((st.first_moment(0).data()[0] - 0.38).abs() < 1e-15);
        // both bias-corrected steps equal -lr * g / (|g| + eps)
        let step = 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].data()[0] + 2.0 * step).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = [Tensor::row(vec![1.0])];
        let mut st = AdamState::new(p.iter().map(Tensor::shape), 0.1);
        let err = st
            .update(p.iter_mut().map(|t| ("dec.0.b", t)), &[Tensor::from_parts(vec![1, 1], vec![f64::NAN])])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param } if param == "dec.0.b"));
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    fn toy_pairs() -> Vec<TrainingPair> {
        (0..6)
            .map(|i| TrainingPair {
                source: vec![4 + i, 5 + i],
                target: vec![5 + i, 4 + i],
            })
            .collect()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden: 8,
            embed: 8,
            vocab_size: 12,
            max_len: 6,
            use_attention: false,
            seed: 0,
        }
    }

    #[test]
    fn training_is_deterministic() {
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 4,
            lr: 1e-2,
            seed: 5,
        };
        let w = WeightVector::uniform(12);
        let mut a = init_params(&toy_config(), 1).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &toy_pairs(), &w, &opts, |_| {}).unwrap();
        let rb = train(&mut b, &toy_pairs(), &w, &opts, |_| {}).unwrap();
        assert_eq!(ra.losses(), rb.losses());
        assert_eq!(a, b);
    }

    #[test]
    fn first_epoch_token_loss_is_near_uniform() {
        let opts = TrainOptions {
            epochs: 1,
            ..TrainOptions::default()
        };
        let mut params = init_params(&toy_config(), 2).unwrap();
        let report = train(&mut params, &toy_pairs(), &WeightVector::uniform(12), &opts, |_| {}).unwrap();
        let ln_v = (12f64).ln();
        let got = report.epochs[0].token_loss;
        assert!((got - ln_v).abs() / ln_v < 0.2, "{got} vs {ln_v}");
    }

    #[test]
    fn training_rejects_empty_corpus() {
        let mut params = init_params(&toy_config(), 2).unwrap();
        let err = train(&mut params, &[], &WeightVector::uniform(12), &TrainOptions::default(), |_| {});
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn teacher_forcing_truncates() {
        let pair = TrainingPair {
            source: vec![4],
            target: vec![5, 6, 7, 8],
        };
        let (inputs, targets) = pair.teacher_forcing(3);
        assert_eq!(inputs, vec![SOS, 5, 6]);
        assert_eq!(targets, vec![5, 6, EOS]);
    }

    proptest! {
        #[test]
        fn itf_is_linear_in_weight(xs in proptest::collection::vec(-20.0f64..20.0, 2..10), w in 0.01f64..5.0) {
            let c = xs.len() - 1;
            let w1 = WeightVector::from_values(vec![w; xs.len()]).unwrap();
            let w2 = WeightVector::from_values(vec![2.0 * w; xs.len()]).unwrap();
            prop_assert_eq!(itf_loss(&xs, c, &w2).unwrap(), 2.0 * itf_loss(&xs, c, &w1).unwrap());
        }

        #[test]
        fn itf_non_increasing_in_frequency(xs in proptest::collection::vec(-20.0f64..20.0, 5..10), a in 1u64..100_000, b in 1u64..100_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            let n = xs.len();
            let mut counts = vec![1u64; n];
            counts[4] = lo;
            let low = compute_weights(&FrequencyTable::new(counts.clone()).unwrap(), 0.4).unwrap();
            counts[4] = hi;
            let high = compute_weights(&FrequencyTable::new(counts).unwrap(), 0.4).unwrap();
            prop_assert!(itf_loss(&xs, 4, &high).unwrap() <= itf_loss(&xs, 4, &low).unwrap());
        }
    }
}
