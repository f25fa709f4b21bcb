use crate::autodiff::{log_softmax_row, rope_rotate, Tensor, RMS_EPS};
use crate::tokenizer::TokenSequence;

use super::{ModelError, ModelParams};

fn vecmat(x: &[f32], w: &Tensor, out: &mut [f32]) {
    let n = out.len();
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w.data()[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn rmsnorm(x: &[f32], gain: &Tensor, out: &mut [f32]) {
    let ms = x.iter().map(|&v| v * v).sum::<f32>() / x.len() as f32;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain.data()) {
        *o = v * r * g;
    }
}

/// Incremental decoder with a per-layer key/value cache.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let l = params.config.n_layers;
        Self {
            params,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, id: usize) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.params.config;
        if id >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max_len: cfg.max_len,
            });
        }
        let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let t = &self.params.tensors;
        let mut x = t[0].row(id).to_vec();
        let mut h = vec![0.0; d];
        let (mut q, mut k, mut v, mut o) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let (mut gate, mut up) = (vec![0.0; f], vec![0.0; f]);
        let mut att = vec![0.0; d];
        let n_ctx = self.pos + 1;
        let mut scores = vec![0.0f32; n_ctx];
        for l in 0..cfg.n_layers {
            let w = self.params.layer(l);
            rmsnorm(&x, &w[0], &mut h);
            vecmat(&h, &w[1], &mut q);
            vecmat(&h, &w[2], &mut k);
            vecmat(&h, &w[3], &mut v);
            rope_rotate(&mut q, d, nh, cfg.rope_base, self.pos, false);
            rope_rotate(&mut k, d, nh, cfg.rope_base, self.pos, false);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            for head in 0..nh {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[head * dh..(head + 1) * dh];
                out.fill(0.0);
                for (j, &s) in scores.iter().enumerate() {
                    let wj = s / sum;
                    let vh = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    for (a, &b) in out.iter_mut().zip(vh) {
                        *a += wj * b;
                    }
                }
            }
            vecmat(&att, &w[4], &mut o);
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
            rmsnorm(&x, &w[5], &mut h);
            vecmat(&h, &w[6], &mut gate);
            vecmat(&h, &w[7], &mut up);
            for (g, u) in gate.iter_mut().zip(&up) {
                let s = *g / (1.0 + (-*g).exp());
                *g = s * u;
            }
            vecmat(&gate, &w[8], &mut o);
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
        }
        let n = t.len();
        rmsnorm(&x, &t[n - 2], &mut h);
        let mut logits = vec![0.0; cfg.vocab_size];
        vecmat(&h, &t[n - 1], &mut logits);
        self.pos += 1;
        Ok(logits)
    }

    pub fn feed(&mut self, ids: &[usize]) -> Result<Vec<f32>, ModelError> {
        let mut last = Vec::new();
        for &id in ids {
            last = self.step(id)?;
        }
        Ok(last)
    }
}

/// Logits `[T, V]` for every prefix of `ids`.
pub fn forward(params: &ModelParams, ids: &[usize]) -> Result<Tensor, ModelError> {
    params.check_ids(ids)?;
    let mut dec = Decoder::new(params);
    let mut data = Vec::with_capacity(ids.len() * params.config.vocab_size);
    for &id in ids {
        data.extend(dec.step(id)?);
    }
    Ok(Tensor::new(
        vec![ids.len(), params.config.vocab_size],
        data,
    )?)
}

/// `log p(ids[t] | ids[<t])` for every `t >= boundary`.
pub fn token_logprobs(params: &ModelParams, seq: &TokenSequence) -> Result<Vec<f64>, ModelError> {
    let ids = &seq.ids;
    if seq.boundary == 0 || seq.boundary > ids.len() {
        return Err(ModelError::InvalidBoundary {
            boundary: seq.boundary,
            len: ids.len(),
        });
    }
    params.check_ids(ids)?;
    let mut dec = Decoder::new(params);
    let mut out = Vec::with_capacity(ids.len() - seq.boundary);
    let mut logits = Vec::new();
    for (t, &id) in ids.iter().enumerate() {
        if t >= seq.boundary {
            out.push(log_softmax_row(&logits)[id]);
        }
        if t + 1 < ids.len() {
            logits = dec.step(id)?;
        }
    }
    Ok(out)
}

/// `log p(x | c)`: sum of next-token log-probabilities over the molecular
/// positions (from `boundary` on, including a trailing `<eos>`).
pub fn sequence_logprob(params: &ModelParams, seq: &TokenSequence) -> Result<f64, ModelError> {
    Ok(token_logprobs(params, seq)?.iter().sum())
}
