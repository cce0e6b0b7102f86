use super::{Layout, LinearSlots, LstmSlots, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Model parameters registered on a tape, with graph builders for each part
/// of the network.
pub struct BoundModel<'p> {
    layout: &'p Layout,
    vars: Vec<Var>,
}

/// Encoder graph outputs.
pub struct EncodedVars {
    /// Top-layer state per source position, each `[1, hidden]`.
    pub steps: Vec<Var>,
    /// The same states stacked into `[source_len, hidden]`.
    pub keys: Var,
    pub finals: Vec<(Var, Var)>,
}

/// Encoder states prepared for attention lookups.
#[derive(Clone, Copy)]
pub struct AttentionMemory {
    keys: Var,
    keys_t: Var,
}

/// `softmax(q kᵀ / √d) k`; returns `(context, weights)`.
pub(crate) fn attend(tape: &mut Tape<'_>, query: Var, keys: Var, keys_t: Var) -> Result<(Var, Var)> {
    let d = tape.value(keys).dims2().1;
    let scores = tape.matmul(query, keys_t)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scaled);
    let ctx = tape.matmul(weights, keys)?;
    Ok((ctx, weights))
}

impl ModelParams {
    /// Wraps leaves created elsewhere (one per parameter tensor, in storage
    /// order), e.g. by a gradient checker.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel<'_>> {
        if vars.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter vars, got {}",
                self.len(),
                vars.len()
            )));
        }
        Ok(BoundModel::new(self, vars))
    }
}

impl<'p> BoundModel<'p> {
    pub(crate) fn new(params: &'p ModelParams, vars: Vec<Var>) -> Self {
        BoundModel {
            layout: params.layout(),
            vars,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, s: LinearSlots) -> Result<Var> {
        let y = tape.matmul(x, self.vars[s.w])?;
        tape.add_bias(y, self.vars[s.b])
    }

    fn lstm(&self, tape: &mut Tape<'_>, s: LstmSlots, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hid = self.layout.hidden;
        let zx = tape.matmul(x, self.vars[s.w_x])?;
        let zh = tape.matmul(h, self.vars[s.w_h])?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias(z, self.vars[s.b])?;
        let i = tape.slice(z, 0, hid)?;
        let f = tape.slice(z, hid, hid)?;
        let g = tape.slice(z, 2 * hid, hid)?;
        let o = tape.slice(z, 3 * hid, hid)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    fn zero_state(&self, tape: &mut Tape<'_>) -> (Var, Var) {
        let z = Tensor::zeros(&[1, self.layout.hidden]);
        (tape.constant(z.clone()), tape.constant(z))
    }

    /// Unrolls one LSTM over `inputs`; returns per-step h and the final (h, c).
    fn run_lstm<I>(&self, tape: &mut Tape<'_>, s: LstmSlots, inputs: I) -> Result<(Vec<Var>, (Var, Var))>
    where
        I: IntoIterator<Item = Var>,
    {
        let (mut h, mut c) = self.zero_state(tape);
        let mut outs = Vec::new();
        for x in inputs {
            (h, c) = self.lstm(tape, s, x, h, c)?;
            outs.push(h);
        }
        Ok((outs, (h, c)))
    }

    pub fn encode(&self, tape: &mut Tape<'_>, source: &[usize]) -> Result<EncodedVars> {
        if source.is_empty() {
            return Err(Error::Input("cannot encode an empty source".into()));
        }
        let l = self.layout;
        let emb = tape.embedding(self.vars[l.embedding], source)?;
        let xs = (0..source.len())
            .map(|t| tape.slice_rows(emb, t, 1))
            .collect::<Result<Vec<_>>>()?;

        let (fwd, (fh, fc)) = self.run_lstm(tape, l.enc_fwd, xs.iter().copied())?;
        let (mut bwd, (bh, bc)) = self.run_lstm(tape, l.enc_bwd, xs.iter().rev().copied())?;
        bwd.reverse();
        let mut steps = Vec::with_capacity(source.len());
        for (f, b) in fwd.iter().zip(&bwd) {
            let both = tape.concat(&[*f, *b])?;
            steps.push(self.linear(tape, both, l.merge)?);
        }
        let mut finals = vec![(tape.concat(&[fh, bh])?, tape.concat(&[fc, bc])?)];

        for &slots in &l.enc_upper {
            let (outs, last) = self.run_lstm(tape, slots, steps.iter().copied())?;
            steps = outs
                .iter()
                .zip(&steps)
                .map(|(&o, &x)| tape.add(o, x))
                .collect::<Result<_>>()?;
            finals.push(last);
        }
        let keys = tape.stack_rows(&steps)?;
        Ok(EncodedVars { steps, keys, finals })
    }

    /// Decoder initial state from encoder final states, one linear map per layer.
    pub fn bridge(&self, tape: &mut Tape<'_>, finals: &[(Var, Var)]) -> Result<Vec<(Var, Var)>> {
        if finals.len() != self.layout.bridge.len() {
            return Err(Error::Contract(format!(
                "expected {} encoder final states, got {}",
                self.layout.bridge.len(),
                finals.len()
            )));
        }
        finals
            .iter()
            .zip(&self.layout.bridge)
            .map(|(&(h, c), &(bh, bc))| Ok((self.linear(tape, h, bh)?, self.linear(tape, c, bc)?)))
            .collect()
    }

    pub fn memory(&self, tape: &mut Tape<'_>, keys: Var) -> Result<AttentionMemory> {
        let keys_t = tape.transpose(keys)?;
        Ok(AttentionMemory { keys, keys_t })
    }

    pub fn attention_memory<'t>(&self, tape: &mut Tape<'t>, states: &'t Tensor) -> Result<AttentionMemory> {
        let keys = tape.constant_ref(states);
        self.memory(tape, keys)
    }

    /// One decoder step from an already embedded input row.
    pub fn step_embedded(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        layers: &[(Var, Var)],
        memory: Option<AttentionMemory>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let l = self.layout;
        if layers.len() != l.dec.len() {
            return Err(Error::Contract(format!(
                "decoder state has {} layers, model has {}",
                layers.len(),
                l.dec.len()
            )));
        }
        let mut next = Vec::with_capacity(layers.len());
        let mut out = x;
        for (depth, (&slots, &(h, c))) in l.dec.iter().zip(layers).enumerate() {
            let (h2, c2) = self.lstm(tape, slots, out, h, c)?;
            out = if depth == 0 { h2 } else { tape.add(h2, out)? };
            next.push((h2, c2));
        }
        if let (true, Some(mem)) = (l.use_attention, memory) {
            let (ctx, _) = attend(tape, out, mem.keys, mem.keys_t)?;
            out = tape.add(out, ctx)?;
        }
        let logits = self.linear(tape, out, l.out)?;
        Ok((logits, next))
    }

    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        prev_token: usize,
        layers: &[(Var, Var)],
        memory: Option<AttentionMemory>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let x = tape.embedding(self.vars[self.layout.embedding], &[prev_token])?;
        self.step_embedded(tape, x, layers, memory)
    }

    /// Logits for every position of a teacher-forced decode of `decoder_inputs`
    /// (SOS followed by the target prefix).
    pub fn teacher_forced(
        &self,
        tape: &mut Tape<'_>,
        source: &[usize],
        decoder_inputs: &[usize],
    ) -> Result<Vec<Var>> {
        if decoder_inputs.is_empty() {
            return Err(Error::Input("empty decoder input".into()));
        }
        let enc = self.encode(tape, source)?;
        let mut layers = self.bridge(tape, &enc.finals)?;
        let memory = if self.layout.use_attention {
            Some(self.memory(tape, enc.keys)?)
        } else {
            None
        };
        let emb = tape.embedding(self.vars[self.layout.embedding], decoder_inputs)?;
        let mut logits = Vec::with_capacity(decoder_inputs.len());
        for t in 0..decoder_inputs.len() {
            let x = tape.slice_rows(emb, t, 1)?;
            let (y, next) = self.step_embedded(tape, x, &layers, memory)?;
            logits.push(y);
            layers = next;
        }
        Ok(logits)
    }
}
