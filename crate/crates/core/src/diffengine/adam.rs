use super::array::DenseArray;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a DenseArray>) -> Self {
        let m: Vec<DenseArray> = params.into_iter().map(DenseArray::zeros_like).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Where a non-finite gradient was found. The step is skipped entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDiagnostics {
    pub step: u64,
    pub param_index: usize,
    pub element: usize,
    pub value: f64,
}

pub fn adam_step(
    params: &mut [&mut DenseArray],
    grads: &[DenseArray],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), EngineError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(EngineError::ShapeMismatch {
            op: "adam",
            expected: vec![params.len()],
            got: vec![grads.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(EngineError::ShapeMismatch {
                op: "adam",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if let Some((element, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EngineError::NonFiniteGradient(GradientDiagnostics {
                step: state.step + 1,
                param_index: i,
                element,
                value,
            }));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = DenseArray::vector(vec![1.0, -2.0]);
        let mut state = AdamState::new([&p]);
        state.m[0] = DenseArray::vector(vec![0.5, 0.5]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[DenseArray::vector(vec![0.0, 0.0])], &mut state, &cfg).unwrap();
        assert_eq!(state.m[0].data(), &[0.45, 0.45]);
        // The decayed moment still moves the parameter; a fresh state does not.
        let mut q = DenseArray::vector(vec![1.0, -2.0]);
        let mut fresh = AdamState::new([&q]);
        adam_step(&mut [&mut q], &[DenseArray::vector(vec![0.0, 0.0])], &mut fresh, &cfg).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = DenseArray::vector(vec![0.0, 0.0, 0.0]);
        let g = DenseArray::vector(vec![0.5, -2.0, 1e-9]);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut state, &cfg).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            // m̂ = g, v̂ = g², step = −lr·g/(|g| + eps)
            let expected = -0.1 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
        }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut p = DenseArray::vector(vec![3.0]);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[DenseArray::scalar(4.0)], &mut state, &cfg).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = DenseArray::vector(vec![1.0, 1.0]);
        let mut state = AdamState::new([&p]);
        let err = adam_step(
            &mut [&mut p],
            &[DenseArray::vector(vec![0.1, f64::NAN])],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        match err {
            EngineError::NonFiniteGradient(d) => {
                assert_eq!((d.param_index, d.element, d.step), (0, 1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(state.step, 0);
    }
}
