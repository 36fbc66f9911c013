use super::{Batch, Model, StyleId};
use crate::corpus::{BOS, EOS};
use crate::error::{CsError, Result};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use numcore::{Binding, Gradients, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Encoder output with its padding mask.
#[derive(Debug, Clone)]
pub struct Latent {
    /// `[batch, time, hidden]`
    pub values: Var,
    pub mask: Array2<bool>,
}

/// Output of free-running soft decoding.
#[derive(Debug, Clone)]
pub struct SoftSequence {
    /// `[batch, steps, vocab]`
    pub logits: Var,
    /// Row-stochastic `[batch, steps, vocab]`.
    pub dists: Var,
    /// `dists . tok_emb`, `[batch, steps, hidden]`.
    pub soft_embs: Var,
    /// Steps inside each example's source length.
    pub mask: Array2<bool>,
}

struct Memory {
    k: Vec<Var>,
    v: Vec<Var>,
    mask: Var,
}

/// Per-layer self-attention keys and values of the positions decoded so far.
struct Cache {
    k: Vec<Option<Var>>,
    v: Vec<Option<Var>>,
}

/// One forward pass of a model on its own tape.
pub struct Graph<'m, F: Scalar> {
    model: &'m Model<F>,
    pub tape: Tape<F>,
    vars: Binding,
    /// Constant copies of the encoder-side parameters, used instead of
    /// `vars` while `detached` is set.
    frozen: Option<Binding>,
    detached: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

fn is_encoder_side(name: &str) -> bool {
    name.starts_with("enc.") || name == "tok_emb" || name == "style_emb"
}

impl<'m, F: Scalar> Graph<'m, F> {
    /// Binds every parameter; those selected by `trainable` get gradients.
    pub fn new(model: &'m Model<F>, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, trainable)?;
        Ok(Graph {
            model,
            tape,
            vars,
            frozen: None,
            detached: false,
            dropout: None,
        })
    }

    /// Enables the configured dropout rate, with masks drawn from `seed`.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        let p = self.model.config.dropout;
        if p > 0.0 {
            self.dropout = Some((p, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn model(&self) -> &Model<F> {
        self.model
    }

    /// Gradients of `loss` for the trainable parameters, keyed by name.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, ArrayD<F>>> {
        let mut grads: Gradients<F> = self.tape.backward(loss)?;
        Ok(self.vars.collect(&self.tape, &mut grads))
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        self.tape.value(v)
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        match (&self.frozen, self.detached && is_encoder_side(name)) {
            (Some(f), true) => Ok(f.var(name)?),
            _ => Ok(self.vars.var(name)?),
        }
    }

    fn hidden(&self) -> usize {
        self.model.config.hidden
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"))?;
        let b = self.param(&format!("{name}.b"))?;
        Ok(self.tape.layer_norm(x, g, b, F::of(LN_EPS))?)
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *p);
        let shape = self.tape.shape(x).to_vec();
        let p = *p;
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                F::of(keep)
            }
        });
        let m = self.tape.constant(mask)?;
        Ok(self.tape.mul(x, m)?)
    }

    /// Sinusoidal encodings for positions `start..start + len`, `[len, hidden]`.
    fn positions(&mut self, start: usize, len: usize) -> Result<Var> {
        let h = self.hidden();
        let table = ArrayD::from_shape_fn(IxDyn(&[len, h]), |ix| {
            let (pos, i) = ((start + ix[0]) as f64, ix[1]);
            let angle = pos / 10000f64.powf((2 * (i / 2)) as f64 / h as f64);
            F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
        });
        Ok(self.tape.constant(table)?)
    }

    /// Style row as `[1, 1, hidden]`.
    fn style_row(&mut self, style: StyleId) -> Result<Var> {
        let slot = self.model.binding.slot(style)?;
        let table = self.param("style_emb")?;
        let row = self.tape.slice(table, 0, slot, slot + 1)?;
        Ok(self.tape.reshape(row, &[1, 1, self.hidden()])?)
    }

    /// Style row repeated over a batch, `[batch, 1, hidden]`.
    fn style_start(&mut self, style: StyleId, batch: usize) -> Result<Var> {
        let row = self.style_row(style)?;
        let zeros = self
            .tape
            .constant(ArrayD::zeros(IxDyn(&[batch, 1, self.hidden()])))?;
        Ok(self.tape.add(zeros, row)?)
    }

    fn token_embeddings(&mut self, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let size = self.model.config.vocab_size;
        if let Some(&id) = ids.iter().find(|&&id| id >= size) {
            return Err(CsError::TokenOutOfRange { id, size });
        }
        let table = self.param("tok_emb")?;
        Ok(self.tape.embedding(table, ids, shape)?)
    }

    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let (b, t) = (self.tape.shape(x)[0], self.tape.shape(x)[1]);
        let (nh, dh) = (self.model.config.n_heads, self.model.config.head_dim());
        let x = self.tape.reshape(x, &[b, t, nh, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(x, &[b * nh, t, dh])?)
    }

    fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let t = self.tape.shape(x)[1];
        let (nh, dh) = (self.model.config.n_heads, self.model.config.head_dim());
        let x = self.tape.reshape(x, &[batch, nh, t, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(x, &[batch, t, nh * dh])?)
    }

    /// Scaled dot-product attention on head-split inputs.
    fn attend(&mut self, q: Var, k: Var, v: Var, masks: &[Var]) -> Result<Var> {
        let dh = self.model.config.head_dim() as f64;
        let s = self.tape.bmm(q, k, true)?;
        let mut s = self.tape.scale(s, F::of(1.0 / dh.sqrt()))?;
        for &m in masks {
            s = self.tape.add(s, m)?;
        }
        let p = self.tape.softmax(s, F::one())?;
        Ok(self.tape.bmm(p, v, false)?)
    }

    /// Additive mask hiding padded keys, `[batch * heads, 1, time]`.
    fn key_mask(&mut self, mask: &Array2<bool>) -> Result<Var> {
        let nh = self.model.config.n_heads;
        let (b, t) = mask.dim();
        let m = ArrayD::from_shape_fn(IxDyn(&[b * nh, 1, t]), |ix| {
            if mask[[ix[0] / nh, ix[2]]] {
                F::zero()
            } else {
                F::of(MASKED)
            }
        });
        Ok(self.tape.constant(m)?)
    }

    fn causal_mask(&mut self, t: usize) -> Result<Var> {
        let m = ArrayD::from_shape_fn(IxDyn(&[1, t, t]), |ix| {
            if ix[2] > ix[1] {
                F::of(MASKED)
            } else {
                F::zero()
            }
        });
        Ok(self.tape.constant(m)?)
    }

    fn attention_block(&mut self, xq: Var, xkv: Var, name: &str, masks: &[Var]) -> Result<Var> {
        let batch = self.tape.shape(xq)[0];
        let q = self.linear(xq, &format!("{name}.q"))?;
        let q = self.split_heads(q)?;
        let k = self.linear(xkv, &format!("{name}.k"))?;
        let k = self.split_heads(k)?;
        let v = self.linear(xkv, &format!("{name}.v"))?;
        let v = self.split_heads(v)?;
        let o = self.attend(q, k, v, masks)?;
        let o = self.merge_heads(o, batch)?;
        self.linear(o, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.1"))?;
        let h = self.tape.relu(h)?;
        self.linear(h, &format!("{name}.2"))
    }

    fn residual(&mut self, x: Var, delta: Var) -> Result<Var> {
        let delta = self.drop(delta)?;
        Ok(self.tape.add(x, delta)?)
    }

    /// Shared encoder over already-embedded inputs `[batch, time, hidden]`.
    pub fn encode_embeddings(
        &mut self,
        embs: Var,
        mask: Array2<bool>,
        style: StyleId,
    ) -> Result<Latent> {
        let t = self.tape.shape(embs)[1];
        if t > self.model.config.max_len + 1 {
            return Err(CsError::config(format!(
                "sequence length {t} exceeds max_len {}",
                self.model.config.max_len
            )));
        }
        let pos = self.positions(0, t)?;
        let style_row = self.style_row(style)?;
        let x = self.tape.add(embs, pos)?;
        let x = self.tape.add(x, style_row)?;
        let mut x = self.drop(x)?;
        let km = self.key_mask(&mask)?;
        for l in 0..self.model.config.n_layers {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let a = self.attention_block(h, h, &format!("enc.{l}.self"), &[km])?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.feed_forward(h, &format!("enc.{l}.ff"))?;
            x = self.residual(x, f)?;
        }
        let values = self.norm(x, "enc.ln")?;
        Ok(Latent { values, mask })
    }

    pub fn encode(&mut self, batch: &Batch, style: StyleId) -> Result<Latent> {
        if batch.width > self.model.config.max_len {
            return Err(CsError::config(format!(
                "record length {} exceeds max_len {}",
                batch.width, self.model.config.max_len
            )));
        }
        let embs = self.token_embeddings(&batch.ids, &[batch.size(), batch.width])?;
        self.encode_embeddings(embs, batch.mask(), style)
    }

    fn memory(&mut self, z: &Latent) -> Result<Memory> {
        let mut k = Vec::new();
        let mut v = Vec::new();
        for l in 0..self.model.config.n_layers {
            let kl = self.linear(z.values, &format!("dec.{l}.cross.k"))?;
            k.push(self.split_heads(kl)?);
            let vl = self.linear(z.values, &format!("dec.{l}.cross.v"))?;
            v.push(self.split_heads(vl)?);
        }
        let mask = self.key_mask(&z.mask)?;
        Ok(Memory { k, v, mask })
    }

    fn cross_attention(&mut self, h: Var, l: usize, mem: &Memory) -> Result<Var> {
        let batch = self.tape.shape(h)[0];
        let q = self.linear(h, &format!("dec.{l}.cross.q"))?;
        let q = self.split_heads(q)?;
        let o = self.attend(q, mem.k[l], mem.v[l], &[mem.mask])?;
        let o = self.merge_heads(o, batch)?;
        self.linear(o, &format!("dec.{l}.cross.o"))
    }

    fn output_logits(&mut self, x: Var) -> Result<Var> {
        let x = self.norm(x, "dec.ln")?;
        self.linear(x, "dec.out")
    }

    /// Causal decoder over a full input sequence `[batch, time, hidden]`.
    fn decode_full(&mut self, inputs: Var, mem: &Memory) -> Result<Var> {
        let t = self.tape.shape(inputs)[1];
        let pos = self.positions(0, t)?;
        let x = self.tape.add(inputs, pos)?;
        let mut x = self.drop(x)?;
        let causal = self.causal_mask(t)?;
        for l in 0..self.model.config.n_layers {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let a = self.attention_block(h, h, &format!("dec.{l}.self"), &[causal])?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let c = self.cross_attention(h, l, mem)?;
            x = self.residual(x, c)?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(h, &format!("dec.{l}.ff"))?;
            x = self.residual(x, f)?;
        }
        self.output_logits(x)
    }

    /// One incremental decoder step for input `[batch, 1, hidden]` at
    /// position `pos`; extends `cache` and returns `[batch, 1, vocab]` logits.
    fn decode_step(
        &mut self,
        input: Var,
        pos: usize,
        cache: &mut Cache,
        mem: &Memory,
    ) -> Result<Var> {
        let batch = self.tape.shape(input)[0];
        let p = self.positions(pos, 1)?;
        let x = self.tape.add(input, p)?;
        let mut x = self.drop(x)?;
        for l in 0..self.model.config.n_layers {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let name = format!("dec.{l}.self");
            let q = self.linear(h, &format!("{name}.q"))?;
            let q = self.split_heads(q)?;
            let k = self.linear(h, &format!("{name}.k"))?;
            let k = self.split_heads(k)?;
            let v = self.linear(h, &format!("{name}.v"))?;
            let v = self.split_heads(v)?;
            let k = match cache.k[l] {
                Some(prev) => self.tape.concat(&[prev, k], 1)?,
                None => k,
            };
            let v = match cache.v[l] {
                Some(prev) => self.tape.concat(&[prev, v], 1)?,
                None => v,
            };
            cache.k[l] = Some(k);
            cache.v[l] = Some(v);
            let o = self.attend(q, k, v, &[])?;
            let o = self.merge_heads(o, batch)?;
            let a = self.linear(o, &format!("{name}.o"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let c = self.cross_attention(h, l, mem)?;
            x = self.residual(x, c)?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(h, &format!("dec.{l}.ff"))?;
            x = self.residual(x, f)?;
        }
        self.output_logits(x)
    }

    fn empty_cache(&self) -> Cache {
        let n = self.model.config.n_layers;
        Cache {
            k: vec![None; n],
            v: vec![None; n],
        }
    }

    /// Teacher-forced decoder inputs: the style row replaces BOS, then the
    /// gold tokens `ids[1..width-1]`.
    fn teacher_inputs(&mut self, batch: &Batch, style: StyleId) -> Result<Var> {
        let start = self.style_start(style, batch.size())?;
        if batch.width <= 2 {
            return Ok(start);
        }
        let n = batch.width - 2;
        let ids: Vec<usize> = (0..batch.size())
            .flat_map(|b| {
                batch.ids[b * batch.width + 1..b * batch.width + 1 + n]
                    .iter()
                    .copied()
            })
            .collect();
        let tokens = self.token_embeddings(&ids, &[batch.size(), n])?;
        Ok(self.tape.concat(&[start, tokens], 1)?)
    }

    /// Teacher-forced logits `[batch, width - 1, vocab]` predicting `ids[1..]`.
    pub fn decode_teacher(&mut self, z: &Latent, batch: &Batch, style: StyleId) -> Result<Var> {
        if batch.width < 2 {
            return Err(CsError::config(
                "records need at least BOS and one more token",
            ));
        }
        let inputs = self.teacher_inputs(batch, style)?;
        let mem = self.memory(z)?;
        self.decode_full(inputs, &mem)
    }

    /// Mean per-token negative log-likelihood of reconstructing `batch`
    /// after encoding it under `style` and decoding under the same style.
    pub fn reconstruction_loss(&mut self, batch: &Batch, style: StyleId) -> Result<Var> {
        let z = self.encode(batch, style)?;
        let logits = self.decode_teacher(&z, batch, style)?;
        let (targets, valid) = batch.shifted_targets();
        Ok(self.tape.cross_entropy(logits, &targets, Some(&valid))?)
    }

    /// Greedy argmax decoding; each output starts with BOS and stops after
    /// EOS or at `max_steps` ids.
    pub fn decode_greedy(
        &mut self,
        z: &Latent,
        style: StyleId,
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>> {
        self.model.binding.slot(style)?;
        let batch = z.mask.nrows();
        let mut out = vec![vec![BOS]; batch];
        let mut done = vec![false; batch];
        let mem = self.memory(z)?;
        let base = self.tape.len();
        let n = self.model.config.n_layers;
        let mut saved: Vec<(ArrayD<F>, ArrayD<F>)> = Vec::new();
        for step in 0..max_steps.saturating_sub(1) {
            let mut cache = self.empty_cache();
            for (l, (k, v)) in saved.iter().enumerate() {
                cache.k[l] = Some(self.tape.constant(k.clone())?);
                cache.v[l] = Some(self.tape.constant(v.clone())?);
            }
            let input = if step == 0 {
                self.style_start(style, batch)?
            } else {
                let last: Vec<usize> = out
                    .iter()
                    .map(|o| *o.last().expect("starts with BOS"))
                    .collect();
                self.token_embeddings(&last, &[batch, 1])?
            };
            let logits = self.decode_step(input, step, &mut cache, &mem)?;
            let lv = self.tape.value(logits);
            let v = lv.shape()[2];
            for b in 0..batch {
                if done[b] {
                    continue;
                }
                let row = lv.index_axis(Axis(0), b);
                let row = row.as_slice().expect("standard layout");
                let best = (0..v).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                out[b].push(best);
                done[b] = best == EOS;
            }
            saved = (0..n)
                .map(|l| {
                    let k = self.tape.value(cache.k[l].expect("filled by step")).clone();
                    let v = self.tape.value(cache.v[l].expect("filled by step")).clone();
                    (k, v)
                })
                .collect();
            self.tape.truncate(base);
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Free-running decoding that feeds `softmax(logits / temperature) .
    /// tok_emb` back as the next input, for `steps` steps.
    pub fn decode_soft(
        &mut self,
        z: &Latent,
        style: StyleId,
        steps: usize,
        temperature: f64,
    ) -> Result<SoftSequence> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CsError::config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        if steps == 0 || steps > self.model.config.max_len {
            return Err(CsError::config(format!(
                "soft decoding steps {steps} outside 1..={}",
                self.model.config.max_len
            )));
        }
        let batch = z.mask.nrows();
        let mem = self.memory(z)?;
        let table = self.param("tok_emb")?;
        let mut cache = self.empty_cache();
        let mut input = self.style_start(style, batch)?;
        let (mut logits, mut dists, mut embs) = (Vec::new(), Vec::new(), Vec::new());
        for step in 0..steps {
            let l = self.decode_step(input, step, &mut cache, &mem)?;
            let d = self.tape.softmax(l, F::of(temperature))?;
            let e = self.tape.matmul(d, table)?;
            logits.push(l);
            dists.push(d);
            embs.push(e);
            input = e;
        }
        let lens: Vec<usize> = z
            .mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect();
        let mask = Array2::from_shape_fn((batch, steps), |(b, t)| t + 1 < lens[b]);
        Ok(SoftSequence {
            logits: self.tape.concat(&logits, 1)?,
            dists: self.tape.concat(&dists, 1)?,
            soft_embs: self.tape.concat(&embs, 1)?,
            mask,
        })
    }

    /// Runs the shared encoder over `[BOS] + soft_embs`, so a sequence of
    /// one-hot rows re-encodes exactly like the discrete record.
    pub fn reencode_soft(&mut self, seq: &SoftSequence, style: StyleId) -> Result<Latent> {
        let (batch, steps) = seq.mask.dim();
        let bos = self.token_embeddings(&vec![BOS; batch], &[batch, 1])?;
        let x = self.tape.concat(&[bos, seq.soft_embs], 1)?;
        let mask =
            Array2::from_shape_fn((batch, steps + 1), |(b, t)| t == 0 || seq.mask[[b, t - 1]]);
        self.encode_embeddings(x, mask, style)
    }

    /// Like [`Graph::reencode_soft`], but the encoder weights enter as
    /// constants: gradients reach the soft sequence and not the encoder.
    pub fn reencode_soft_detached(&mut self, seq: &SoftSequence, style: StyleId) -> Result<Latent> {
        if self.frozen.is_none() {
            let model = self.model;
            self.frozen = Some(model.params.bind(&mut self.tape, |_| false)?);
        }
        self.detached = true;
        let out = self.reencode_soft(seq, style);
        self.detached = false;
        out
    }

    /// Two-class logits `[batch, 2]` from the masked mean of a latent.
    pub fn discriminate(&mut self, z: &Latent) -> Result<Var> {
        let pooled = self.tape.mean_pool(z.values, &z.mask)?;
        let h = self.linear(pooled, "disc.1")?;
        let h = self.tape.relu(h)?;
        self.linear(h, "disc.2")
    }
}
