//! Central finite-difference checks (h = 1e-3, rtol 1e-3, atol 1e-5) of every
//! differentiable tape op on 100 random small instances each.

use fraglm::autodiff::{Reduction, Tape, Tensor};
use fraglm_oracle::gradcheck::{self, OP_SUITES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;

fn run(name: &str) {
    let (_, suite, seed) = OP_SUITES.iter().find(|s| s.0 == name).unwrap();
    if let Err(e) = suite(INSTANCES, *seed) {
        panic!("{e}");
    }
}

#[test]
fn matmul_gradients() {
    run("matmul");
}

#[test]
fn elementwise_gradients() {
    run("elementwise");
}

#[test]
fn layout_op_gradients() {
    run("layout");
}

#[test]
fn softmax_gradients() {
    run("softmax");
}

#[test]
fn rmsnorm_gradients() {
    run("rmsnorm");
}

#[test]
fn embedding_and_rope_gradients() {
    run("embedding+rope");
}

#[test]
fn cross_entropy_gradients() {
    run("cross_entropy");
}

#[test]
fn two_layer_mlp_gradients() {
    run("mlp");
}

#[test]
fn model_gradients() {
    gradcheck::full_model(10, 99).unwrap();
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn randt(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::randn(shape, scale, rng)
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..INSTANCES {
        let (r, c) = (dims(&mut rng), dims(&mut rng) + 1);
        let a = randt(&mut rng, &[r, c], 3.0);
        let shift: f32 = rng.gen_range(-5.0..5.0);
        let mut tape = Tape::new();
        let va = tape.constant(a);
        let sa = tape.softmax_lastdim(va);
        let shifted = tape.add_scalar(va, shift);
        let sb = tape.softmax_lastdim(shifted);
        let (pa, pb) = (tape.value(sa).clone(), tape.value(sb).clone());
        for row in 0..r {
            let s: f64 = pa.row(row).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (x, y) in pa.row(row).iter().zip(pb.row(row)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn uniform_cross_entropy_is_log_v() {
    for v in [2usize, 4, 8] {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, v]));
        let ce = tape
            .cross_entropy(l, &[0, 1, v - 1], &[true; 3], Reduction::Mean)
            .unwrap();
        assert!((tape.value(ce).data()[0] as f64 - (v as f64).ln()).abs() < 1e-6);
    }
}
