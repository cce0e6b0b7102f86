//! Residual multi-layer LSTM encoder-decoder.
//!
//! Encoder layer 1 is bidirectional; its forward and backward states are
//! concatenated and projected back to `hidden`. Every layer above is
//! unidirectional with a residual connection (`out = lstm(x) + x`). The
//! decoder mirrors the stack without the bidirectional first layer, and each
//! decoder layer starts from a learned linear map ("bridge") of the matching
//! encoder layer's final state. With attention enabled, a scaled dot-product
//! context over the top encoder states is added to the top decoder output
//! before the output projection.
//!
//! LSTM gate columns are packed as `[input, forget, cell, output]`.

mod checkpoint;
mod graph;

use indexmap::IndexMap;
use rand::Rng;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{BoundModel, EncodedVars};

use crate::error::{Error, Result};
use crate::numcore::{softmax_rows, Tape, Tensor};
use crate::rng;
use crate::tokenfreq::SOS;

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub use_attention: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, 64 hidden, 64 embedding, length 28.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden: 64,
            embed: 64,
            vocab_size,
            max_len: 28,
            use_attention: false,
            seed: 0,
        }
    }

    /// 4 layers, 256 hidden, 256 embedding, length 28.
    pub fn full_size(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 256,
            embed: 256,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.embed == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("model sizes must be >= 1: {self:?}")));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("max_len {} < 2", self.max_len)));
        }
        Ok(())
    }
}

/// Positions of one LSTM's tensors within [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmSlots {
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearSlots {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub hidden: usize,
    pub use_attention: bool,
    pub embedding: usize,
    pub enc_fwd: LstmSlots,
    pub enc_bwd: LstmSlots,
    pub merge: LinearSlots,
    /// Encoder layers 2 and up.
    pub enc_upper: Vec<LstmSlots>,
    /// Per layer: (h bridge, c bridge).
    pub bridge: Vec<(LinearSlots, LinearSlots)>,
    pub dec: Vec<LstmSlots>,
    pub out: LinearSlots,
}

#[derive(Clone, Copy, PartialEq)]
enum InitKind {
    Uniform,
    ForgetBias,
}

/// Name, shape and init rule of every parameter, in storage order.
fn parameter_specs(c: &ModelConfig) -> (Vec<(String, Vec<usize>, InitKind)>, Layout) {
    let (h, e, v) = (c.hidden, c.embed, c.vocab_size);
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, kind: InitKind| {
        specs.push((name, shape, kind));
        specs.len() - 1
    };
    let lstm = |add: &mut dyn FnMut(String, Vec<usize>, InitKind) -> usize,
                    prefix: &str,
                    input: usize| LstmSlots {
        w_x: add(format!("{prefix}.w_x"), vec![input, 4 * h], InitKind::Uniform),
        w_h: add(format!("{prefix}.w_h"), vec![h, 4 * h], InitKind::Uniform),
        b: add(format!("{prefix}.b"), vec![4 * h], InitKind::ForgetBias),
    };
    let linear = |add: &mut dyn FnMut(String, Vec<usize>, InitKind) -> usize,
                  prefix: &str,
                  input: usize,
                  output: usize| LinearSlots {
        w: add(format!("{prefix}.w"), vec![input, output], InitKind::Uniform),
        b: add(format!("{prefix}.b"), vec![output], InitKind::Uniform),
    };

    let embedding = add("embedding".into(), vec![v, e], InitKind::Uniform);
    let enc_fwd = lstm(&mut add, "enc.0.fwd", e);
    let enc_bwd = lstm(&mut add, "enc.0.bwd", e);
    let merge = linear(&mut add, "enc.0.merge", 2 * h, h);
    let enc_upper = (1..c.num_layers)
        .map(|l| lstm(&mut add, &format!("enc.{l}"), h))
        .collect();
    let bridge = (0..c.num_layers)
        .map(|l| {
            let input = if l == 0 { 2 * h } else { h };
            (
                linear(&mut add, &format!("bridge.{l}.h"), input, h),
                linear(&mut add, &format!("bridge.{l}.c"), input, h),
            )
        })
        .collect();
    let dec = (0..c.num_layers)
        .map(|l| lstm(&mut add, &format!("dec.{l}"), if l == 0 { e } else { h }))
        .collect();
    let out = linear(&mut add, "out", h, v);

    let layout = Layout {
        hidden: h,
        use_attention: c.use_attention,
        embedding,
        enc_fwd,
        enc_bwd,
        merge,
        enc_upper,
        bridge,
        dec,
        out,
    };
    (specs, layout)
}

/// All learnable tensors of the encoder-decoder, in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Uniform `[-0.08, 0.08]` init from the seed's init stream; LSTM forget-gate
/// biases start at 1.0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (specs, layout) = parameter_specs(config);
    let mut rng = rng::stream(seed, rng::INIT);
    let h = config.hidden;
    let mut tensors = IndexMap::with_capacity(specs.len());
    for (name, shape, kind) in specs {
        let n: usize = shape.iter().product();
        let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
        if kind == InitKind::ForgetBias {
            data[h..2 * h].fill(FORGET_BIAS);
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
        layout,
    })
}

impl ModelParams {
    pub(crate) fn from_tensors(config: ModelConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = parameter_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, got)) in specs.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(ModelParams {
            config,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`; `trainable` selects differentiable
    /// leaves over constants.
    pub fn bind<'t>(&'t self, tape: &mut Tape<'t>, trainable: bool) -> BoundModel<'t> {
        let vars = self
            .tensors
            .values()
            .map(|t| if trainable { tape.param(t) } else { tape.constant_ref(t) })
            .collect();
        BoundModel::new(self, vars)
    }
}

/// Top-layer encoder states and the final `(h, c)` of every encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `[source_len, hidden]`, one row per source position.
    pub states: Tensor,
    /// Layer 1 holds concatenated forward/backward states (`2 * hidden` wide).
    pub finals: Vec<(Tensor, Tensor)>,
}

impl EncoderOutput {
    pub fn steps(&self) -> usize {
        self.states.dims2().0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Tensor, Tensor)>,
    pub prev_token: usize,
    pub step: usize,
}

impl DecoderState {
    /// All-zero `(h, c)` at step 0 with SOS as the previous token.
    pub fn zeros(config: &ModelConfig) -> Self {
        let z = Tensor::zeros(&[1, config.hidden]);
        DecoderState {
            layers: vec![(z.clone(), z); config.num_layers],
            prev_token: SOS,
            step: 0,
        }
    }

    pub fn with_token(mut self, token: usize) -> Self {
        self.prev_token = token;
        self
    }
}

pub fn encode(params: &ModelParams, source: &[usize]) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let enc = model.encode(&mut tape, source)?;
    Ok(EncoderOutput {
        states: tape.value(enc.keys).clone(),
        finals: enc
            .finals
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect(),
    })
}

/// Decoder state bridged from the encoder's final states.
pub fn initial_state(params: &ModelParams, enc: &EncoderOutput) -> Result<DecoderState> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let finals: Vec<_> = enc
        .finals
        .iter()
        .map(|(h, c)| (tape.constant_ref(h), tape.constant_ref(c)))
        .collect();
    let bridged = model.bridge(&mut tape, &finals)?;
    Ok(DecoderState {
        layers: bridged
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect(),
        prev_token: SOS,
        step: 0,
    })
}

fn run_step(
    params: &ModelParams,
    state: &DecoderState,
    enc: Option<&EncoderOutput>,
) -> Result<(Tensor, DecoderState)> {
    if state.step >= params.config.max_len {
        return Err(Error::Contract(format!(
            "decoder step {} exceeds max_len {}",
            state.step, params.config.max_len
        )));
    }
    if state.prev_token >= params.config.vocab_size {
        return Err(Error::Contract(format!("token id {} out of range", state.prev_token)));
    }
    let mut tape = Tape::new();
    let model = params.bind(&mut tape, false);
    let layers: Vec<_> = state
        .layers
        .iter()
        .map(|(h, c)| (tape.constant_ref(h), tape.constant_ref(c)))
        .collect();
    let memory = match enc {
        Some(enc) if params.config.use_attention => Some(model.attention_memory(&mut tape, &enc.states)?),
        _ => None,
    };
    let (logits, next) = model.step(&mut tape, state.prev_token, &layers, memory)?;
    let new_state = DecoderState {
        layers: next
            .iter()
            .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect(),
        prev_token: state.prev_token,
        step: state.step + 1,
    };
    Ok((tape.value(logits).clone(), new_state))
}

/// One conditional decoder step: projection-layer logits over the vocabulary
/// (no softmax) and the advanced state. The caller sets `prev_token` of the
/// returned state to whatever token it emits.
pub fn decode_step(
    params: &ModelParams,
    state: &DecoderState,
    enc: &EncoderOutput,
) -> Result<(Tensor, DecoderState)> {
    run_step(params, state, Some(enc))
}

/// Decoder-only step without any source: no attention, and the caller starts
/// from [`DecoderState::zeros`]. Produces anti-language-model logits.
pub fn unconditional_step(params: &ModelParams, state: &DecoderState) -> Result<(Tensor, DecoderState)> {
    run_step(params, state, None)
}

/// Scaled dot-product attention of one query row over `keys` (`[n, d]`), which
/// double as values. Returns `(context [1, d], weights [1, n])`.
pub fn attention(query: &Tensor, keys: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let q = tape.constant_ref(query);
    let k = tape.constant_ref(keys);
    let kt = tape.transpose(k)?;
    let (ctx, weights) = graph::attend(&mut tape, q, k, kt)?;
    Ok((tape.value(ctx).clone(), tape.value(weights).clone()))
}

/// Attention weights computed directly, without a tape.
pub fn attention_weights(query: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let (n, d) = keys.dims2();
    if query.len() != d {
        return Err(Error::Dimension {
            op: "attention",
            left: query.shape().to_vec(),
            right: keys.shape().to_vec(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..n)
        .map(|i| keys.row_slice(i).iter().zip(query.data()).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    Ok(softmax_rows(&Tensor::row(scores)))
}

#[cfg(test)]
mod tests;
