//! Central finite-difference checks of tape gradients against the f64
//! reference kernels.

use fraglm::autodiff::{Reduction, Tape, Tensor, Var};
use fraglm::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference as r;

pub const H: f64 = 1e-3;
pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
/// Step for the full model, whose sharp attention makes the O(h²) truncation
/// error at `H` exceed `RTOL`.
pub const MODEL_H: f64 = 1e-5;

type TapeFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;
type RefFn<'a> = &'a dyn Fn(&[Vec<f64>]) -> Vec<f64>;
type Check = Result<(), String>;

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn randt(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::randn(shape, scale, rng)
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

/// Central difference of `objective` with respect to every entry of `xs[k]`.
pub fn numeric_grad(
    objective: &dyn Fn(&[Vec<f64>]) -> f64,
    xs: &mut [Vec<f64>],
    k: usize,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs[k].len());
    for e in 0..xs[k].len() {
        let orig = xs[k][e];
        xs[k][e] = orig + h;
        let fp = objective(xs);
        xs[k][e] = orig - h;
        let fm = objective(xs);
        xs[k][e] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Differentiates `sum(w * f(inputs))` with random `w` both on the tape and
/// numerically through the reference, and compares forward values too.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    differentiable: &[bool],
    tape_fn: TapeFn,
    ref_fn: RefFn,
    rng: &mut ChaCha8Rng,
) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = tape_fn(&mut tape, &vars);
    let out_val = tape.value(out).clone();
    let w = Tensor::randn(out_val.shape(), 1.0, rng);
    let w64 = to64(&w);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).map_err(|e| e.to_string())?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let mut xs: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    r::check_close(
        &format!("{name} forward"),
        &to64(&out_val),
        &ref_fn(&xs),
        1e-4,
        1e-5,
    )?;
    let objective =
        |xs: &[Vec<f64>]| -> f64 { ref_fn(xs).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    for (k, (&diff, var)) in differentiable.iter().zip(&vars).enumerate() {
        if !diff {
            continue;
        }
        let analytic = to64(
            grads
                .get(*var)
                .ok_or_else(|| format!("{name}: no gradient for input {k}"))?,
        );
        let numeric = numeric_grad(&objective, &mut xs, k, H);
        r::check_close(
            &format!("{name} d/d input{k}"),
            &analytic,
            &numeric,
            RTOL,
            ATOL,
        )?;
    }
    Ok(())
}

pub fn matmul_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
        let a = randt(&mut rng, &[m, k], 1.0);
        let b = randt(&mut rng, &[k, n], 1.0);
        check(
            "matmul",
            &[a, b],
            &[true, true],
            &|t, v| t.matmul(v[0], v[1]).unwrap(),
            &|x| r::matmul(&x[0], &x[1], m, k, n),
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn elementwise_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let shape = [dims(&mut rng), dims(&mut rng)];
        let a = randt(&mut rng, &shape, 1.0);
        let b = randt(&mut rng, &shape, 1.0);
        let ab = [a.clone(), b.clone()];
        check(
            "add",
            &ab,
            &[true, true],
            &|t, v| t.add(v[0], v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(),
            &mut rng,
        )?;
        check(
            "sub",
            &ab,
            &[true, true],
            &|t, v| t.sub(v[0], v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(p, q)| p - q).collect(),
            &mut rng,
        )?;
        check(
            "mul",
            &ab,
            &[true, true],
            &|t, v| t.mul(v[0], v[1]).unwrap(),
            &|x| x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect(),
            &mut rng,
        )?;
        let s: f32 = rng.gen_range(-2.0..2.0);
        check(
            "scale",
            &ab[..1],
            &[true],
            &|t, v| t.scale(v[0], s),
            &|x| x[0].iter().map(|p| p * s as f64).collect(),
            &mut rng,
        )?;
        let c: f32 = rng.gen_range(-2.0..2.0);
        check(
            "add_scalar",
            &ab[..1],
            &[true],
            &|t, v| t.add_scalar(v[0], c),
            &|x| x[0].iter().map(|p| p + c as f64).collect(),
            &mut rng,
        )?;
        check(
            "silu",
            &ab[..1],
            &[true],
            &|t, v| t.silu(v[0]),
            &|x| x[0].iter().map(|&p| r::silu(p)).collect(),
            &mut rng,
        )?;
        check(
            "log_sigmoid",
            &ab[..1],
            &[true],
            &|t, v| t.log_sigmoid(v[0]),
            &|x| x[0].iter().map(|&p| r::log_sigmoid(p)).collect(),
            &mut rng,
        )?;
        check(
            "sum",
            &ab[..1],
            &[true],
            &|t, v| t.sum(v[0]),
            &|x| vec![x[0].iter().sum()],
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn layout_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (m, n) = (dims(&mut rng), dims(&mut rng) + 1);
        let a = randt(&mut rng, &[m, n], 1.0);
        check(
            "transpose",
            std::slice::from_ref(&a),
            &[true],
            &|t, v| t.transpose(v[0]).unwrap(),
            &|x| r::transpose(&x[0], m, n),
            &mut rng,
        )?;

        let start = rng.gen_range(0..n);
        let len = rng.gen_range(1..=n - start);
        check(
            "slice_cols",
            std::slice::from_ref(&a),
            &[true],
            &|t, v| t.slice_cols(v[0], start, len).unwrap(),
            &|x| {
                x[0].chunks(n)
                    .flat_map(|row| row[start..start + len].to_vec())
                    .collect()
            },
            &mut rng,
        )?;

        let n2 = dims(&mut rng);
        let b = randt(&mut rng, &[m, n2], 1.0);
        check(
            "concat_cols",
            &[a.clone(), b],
            &[true, true],
            &|t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
            &|x| {
                let mut out = Vec::new();
                for row in 0..m {
                    out.extend_from_slice(&x[0][row * n..(row + 1) * n]);
                    out.extend_from_slice(&x[1][row * n2..(row + 1) * n2]);
                }
                out
            },
            &mut rng,
        )?;

        let s = randt(&mut rng, &[m, m], 1.0);
        check(
            "causal_mask+softmax",
            &[s],
            &[true],
            &|t, v| {
                let masked = t.causal_mask(v[0]).unwrap();
                t.softmax_lastdim(masked)
            },
            &|x| r::softmax(&r::causal_mask(&x[0], m), m),
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn softmax_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (rows, c) = (dims(&mut rng), dims(&mut rng));
        let a = randt(&mut rng, &[rows, c], 2.0);
        check(
            "softmax",
            &[a],
            &[true],
            &|t, v| t.softmax_lastdim(v[0]),
            &|x| r::softmax(&x[0], c),
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn rmsnorm_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (rows, d) = (dims(&mut rng), dims(&mut rng) + 1);
        let x = randt(&mut rng, &[rows, d], 1.0);
        let g = randt(&mut rng, &[d], 1.0);
        check(
            "rmsnorm",
            &[x, g],
            &[true, true],
            &|t, v| t.rmsnorm(v[0], v[1]).unwrap(),
            &|x| r::rmsnorm(&x[0], &x[1]),
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn embedding_rope_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (vocab, d) = (dims(&mut rng) + 1, dims(&mut rng));
        let t_len = dims(&mut rng) + 1;
        let ids: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..vocab)).collect();
        let table = randt(&mut rng, &[vocab, d], 1.0);
        check(
            "embedding",
            &[table],
            &[true],
            &|t, v| t.embedding(v[0], &ids).unwrap(),
            &|x| {
                ids.iter()
                    .flat_map(|&i| x[0][i * d..(i + 1) * d].to_vec())
                    .collect()
            },
            &mut rng,
        )?;

        let n_heads = rng.gen_range(1..=3);
        let dh = 2 * rng.gen_range(1..=3);
        let width = n_heads * dh;
        let x = randt(&mut rng, &[t_len, width], 1.0);
        check(
            "rope",
            &[x],
            &[true],
            &|t, v| t.rope(v[0], n_heads, 10000.0).unwrap(),
            &|x| r::rope(&x[0], width, n_heads, 10000.0),
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn cross_entropy_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let (t_len, v) = (dims(&mut rng), dims(&mut rng) + 1);
        let targets: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..t_len).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let logits = randt(&mut rng, &[t_len, v], 2.0);
        let (reduction, mean) = if i % 2 == 0 {
            (Reduction::Mean, true)
        } else {
            (Reduction::Sum, false)
        };
        check(
            "cross_entropy",
            &[logits],
            &[true],
            &|t, x| t.cross_entropy(x[0], &targets, &mask, reduction).unwrap(),
            &|x| vec![r::cross_entropy(&x[0], v, &targets, &mask, mean)],
            &mut rng,
        )?;
    }
    Ok(())
}

pub fn mlp_suite(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (n, d_in, hidden, d_out) = (
            dims(&mut rng),
            dims(&mut rng),
            dims(&mut rng),
            dims(&mut rng) + 1,
        );
        let x = randt(&mut rng, &[n, d_in], 1.0);
        let w1 = randt(&mut rng, &[d_in, hidden], 1.0);
        let w2 = randt(&mut rng, &[hidden, d_out], 1.0);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..d_out)).collect();
        let mask = vec![true; n];
        check(
            "mlp",
            &[x, w1, w2],
            &[false, true, true],
            &|t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let a = t.silu(h);
                let o = t.matmul(a, v[2]).unwrap();
                t.cross_entropy(o, &targets, &mask, Reduction::Mean)
                    .unwrap()
            },
            &|x| {
                let h = r::matmul(&x[0], &x[1], n, d_in, hidden);
                let a: Vec<f64> = h.iter().map(|&z| r::silu(z)).collect();
                let o = r::matmul(&a, &x[2], n, hidden, d_out);
                vec![r::cross_entropy(&o, d_out, &targets, &mask, true)]
            },
            &mut rng,
        )?;
    }
    Ok(())
}

/// Runs `instances` random cases from `seed`.
pub type Suite = fn(usize, u64) -> Check;

/// Every op suite with its own seed.
pub const OP_SUITES: [(&str, Suite, u64); 8] = [
    ("matmul", matmul_suite, 1),
    ("elementwise", elementwise_suite, 2),
    ("layout", layout_suite, 3),
    ("softmax", softmax_suite, 4),
    ("rmsnorm", rmsnorm_suite, 5),
    ("embedding+rope", embedding_rope_suite, 6),
    ("cross_entropy", cross_entropy_suite, 7),
    ("mlp", mlp_suite, 8),
];

/// Two-layer model small enough for exhaustive finite differences.
pub fn small_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_heads: 2,
        n_layers: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: vocab,
        max_len: 32,
        rope_base: 10_000.0,
    }
}

pub fn ref_config(c: &ModelConfig) -> r::RefConfig {
    r::RefConfig {
        d: c.d_model,
        n_heads: c.n_heads,
        n_layers: c.n_layers,
        d_ff: c.d_ff,
        vocab: c.vocab_size,
        rope_base: c.rope_base as f64,
    }
}

/// Random parameters with a larger spread than the default init so that
/// every path carries signal.
pub fn spread_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let tensors = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, s)| {
            let mut t = Tensor::randn(&s, 0.5, rng);
            if name.ends_with("norm") {
                for v in t.data_mut() {
                    *v += 1.0;
                }
            }
            t
        })
        .collect();
    ModelParams::from_tensors(cfg.clone(), tensors).expect("shapes come from the config")
}

pub fn params64(p: &ModelParams) -> Vec<Vec<f64>> {
    p.tensors.iter().map(to64).collect()
}

/// Tape gradients of the summed token NLL of a two-layer model against
/// central differences of the reference forward.
pub fn full_model(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_model(6);
    let rc = ref_config(&cfg);
    for _ in 0..instances {
        let p = spread_params(&cfg, &mut rng);
        let n = rng.gen_range(3..7);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let (inputs, targets) = (&ids[..n - 1], &ids[1..]);
        let mask = vec![true; n - 1];

        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true);
        let logits = p
            .forward_tape(&mut tape, &vars, inputs)
            .map_err(|e| e.to_string())?;
        let loss = tape
            .cross_entropy(logits, targets, &mask, Reduction::Sum)
            .map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;

        let mut xs = params64(&p);
        let objective = |xs: &[Vec<f64>]| {
            r::cross_entropy(
                &r::reference_forward(&rc, xs, inputs),
                6,
                targets,
                &mask,
                false,
            )
        };
        for (k, var) in vars.0.iter().enumerate() {
            let analytic = to64(
                grads
                    .get(*var)
                    .ok_or_else(|| format!("no gradient for param {k}"))?,
            );
            let numeric = numeric_grad(&objective, &mut xs, k, MODEL_H);
            r::check_close(&format!("param {k}"), &analytic, &numeric, RTOL, ATOL)?;
        }
    }
    Ok(())
}
