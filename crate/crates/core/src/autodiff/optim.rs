use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update. Gradients are clipped to `cfg.clip` global
/// norm before the moment update. Returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64, AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }

    let norm = global_norm(grads);
    let clip_scale = match cfg.clip {
        Some(c) if norm > c as f64 && norm > 0.0 => (c as f64 / norm) as f32,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gc = gv * clip_scale;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gc;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gc * gc;
            if cfg.lr != 0.0 {
                let m_hat = *mv as f64 / bc1;
                let v_hat = *vv as f64 / bc2;
                *pv -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup to `peak_lr` at `warmup_steps`, then cosine decay to zero at
/// `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps || step >= total_steps {
        return if step >= total_steps { 0.0 } else { peak_lr };
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_clip(lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            clip: None,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut params = vec![Tensor::from_rows(&[&[1.0, -2.0]])];
        let before = params.clone();
        let mut st = AdamState::new(&params);
        adam_step(
            &mut params,
            &[Tensor::zeros(&[1, 2])],
            &mut st,
            &no_clip(0.1),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&params);
        st.m[0] = Tensor::scalar(0.5);
        st.v[0] = Tensor::scalar(0.25);
        adam_step(&mut params, &[Tensor::scalar(0.0)], &mut st, &no_clip(0.0)).unwrap();
        assert!((st.m[0].data()[0] - 0.45).abs() < 1e-7);
        assert!((st.v[0].data()[0] - 0.25 * 0.999).abs() < 1e-7);
    }

    #[test]
    fn closed_form_scalar_step() {
        // State after one earlier step: m=0.1, v=0.001 (step=1). Next grad 0.5.
        let mut params = vec![Tensor::scalar(2.0)];
        let mut st = AdamState::new(&params);
        st.m[0] = Tensor::scalar(0.1);
        st.v[0] = Tensor::scalar(0.001);
        st.step = 1;
        let cfg = no_clip(0.01);
        adam_step(&mut params, &[Tensor::scalar(0.5)], &mut st, &cfg).unwrap();
        // m2 = 0.9*0.1 + 0.1*0.5 = 0.14 ; v2 = 0.999*0.001 + 0.001*0.25 = 0.001249
        // m_hat = 0.14/(1-0.81) ; v_hat = 0.001249/(1-0.998001)
        let m_hat = 0.14 / 0.19;
        let v_hat: f64 = 0.001249 / 0.001999;
        let expected = 2.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((params[0].data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn clipping_scales_gradient() {
        // grad norm 10 with clip 1: first moment receives 0.1 * (1-β1) * g
        let mut params = vec![Tensor::from_rows(&[&[0.0, 0.0]])];
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.0,
            clip: Some(1.0),
            ..AdamConfig::default()
        };
        let g = Tensor::from_rows(&[&[6.0, 8.0]]);
        let norm = adam_step(&mut params, &[g], &mut st, &cfg).unwrap();
        assert!((norm - 10.0).abs() < 1e-9);
        let m = st.m[0].data();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-6);
        assert!((m[1] - 0.1 * 0.8).abs() < 1e-6);
    }

    #[test]
    fn lr_zero_no_clip_is_identity() {
        let mut params = vec![Tensor::from_rows(&[&[0.3, -0.7, 1.5]])];
        let before = params.clone();
        let mut st = AdamState::new(&params);
        let g = Tensor::from_rows(&[&[100.0, -3.0, 0.2]]);
        adam_step(&mut params, &[g], &mut st, &no_clip(0.0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st, &no_clip(0.1));
        assert!(matches!(err, Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 1e-3), 0.0);
        assert!((cosine_lr(10, 10, 100, 1e-3) - 1e-3).abs() < 1e-15);
        assert!(cosine_lr(100, 10, 100, 1e-3).abs() < 1e-9);
        assert!((cosine_lr(5, 10, 100, 1e-3) - 5e-4).abs() < 1e-15);
        assert!((cosine_lr(55, 10, 100, 1e-3) - 5e-4).abs() < 1e-12);
    }
}
