//! f64 reference kernels. Nothing here calls into the crate's numeric code.

pub const EPS: f64 = 1e-5;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * r * g));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

/// Rotary encoding: pairs (2i, 2i+1) inside each head rotated by
/// `pos * base^(-2i/dh)`.
pub fn rope(x: &[f64], d: usize, n_heads: usize, base: f64) -> Vec<f64> {
    let dh = d / n_heads;
    let mut out = x.to_vec();
    for (t, row) in out.chunks_mut(d).enumerate() {
        for h in 0..n_heads {
            for i in 0..dh / 2 {
                let theta = t as f64 * base.powf(-(2.0 * i as f64) / dh as f64);
                let (c, s) = (theta.cos(), theta.sin());
                let j = h * dh + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    out
}

pub fn causal_mask(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            out[i * n + j] = -1e9;
        }
    }
    out
}

pub fn cross_entropy(
    logits: &[f64],
    v: usize,
    targets: &[usize],
    mask: &[bool],
    mean: bool,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (t, row) in logits.chunks(v).enumerate() {
        if mask[t] {
            total -= log_softmax(row)[targets[t]];
            count += 1;
        }
    }
    if mean {
        total / count as f64
    } else {
        total
    }
}

/// Straight-line LLaMA-style decoder in f64: pre-norm attention with rotary
/// encoding, SwiGLU feed-forward, final norm, untied output head.
///
/// `p` holds parameters in the crate's documented tensor order:
/// tok_emb, then per layer [attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up,
/// w_down], then final_norm, lm_head.
pub struct RefConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub rope_base: f64,
}

pub fn reference_forward(cfg: &RefConfig, p: &[Vec<f64>], ids: &[usize]) -> Vec<f64> {
    let (d, t_len) = (cfg.d, ids.len());
    let dh = d / cfg.n_heads;
    let mut x: Vec<f64> = Vec::with_capacity(t_len * d);
    for &id in ids {
        x.extend_from_slice(&p[0][id * d..(id + 1) * d]);
    }
    for l in 0..cfg.n_layers {
        let base = 1 + l * 9;
        let h = rmsnorm(&x, &p[base]);
        let q = rope(
            &matmul(&h, &p[base + 1], t_len, d, d),
            d,
            cfg.n_heads,
            cfg.rope_base,
        );
        let k = rope(
            &matmul(&h, &p[base + 2], t_len, d, d),
            d,
            cfg.n_heads,
            cfg.rope_base,
        );
        let v = matmul(&h, &p[base + 3], t_len, d, d);
        let mut att = vec![0.0; t_len * d];
        for head in 0..cfg.n_heads {
            for i in 0..t_len {
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + head * dh + c] * k[j * d + head * dh + c];
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let w = softmax(&scores, scores.len());
                for c in 0..dh {
                    let mut acc = 0.0;
                    for (j, wj) in w.iter().enumerate() {
                        acc += wj * v[j * d + head * dh + c];
                    }
                    att[i * d + head * dh + c] = acc;
                }
            }
        }
        let o = matmul(&att, &p[base + 4], t_len, d, d);
        for (a, b) in x.iter_mut().zip(&o) {
            *a += b;
        }
        let h2 = rmsnorm(&x, &p[base + 5]);
        let gate = matmul(&h2, &p[base + 6], t_len, d, cfg.d_ff);
        let up = matmul(&h2, &p[base + 7], t_len, d, cfg.d_ff);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = matmul(&act, &p[base + 8], t_len, cfg.d_ff, d);
        for (a, b) in x.iter_mut().zip(&down) {
            *a += b;
        }
    }
    let fin = 1 + cfg.n_layers * 9;
    let hf = rmsnorm(&x, &p[fin]);
    matmul(&hf, &p[fin + 1], t_len, d, cfg.vocab)
}

/// `|a - n| <= atol + rtol * |n|` elementwise; the error names the first
/// offender.
pub fn check_close(
    what: &str,
    analytic: &[f64],
    numeric: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "{what}: {} analytic vs {} numeric values",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = atol + rtol * n.abs();
        if (a - n).abs() > tol || (a - n).is_nan() {
            return Err(format!(
                "{what}[{i}]: analytic {a} vs numeric {n} (tol {tol})"
            ));
        }
    }
    Ok(())
}

pub fn assert_close(what: &str, analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) {
    if let Err(e) = check_close(what, analytic, numeric, rtol, atol) {
        panic!("{e}");
    }
}
