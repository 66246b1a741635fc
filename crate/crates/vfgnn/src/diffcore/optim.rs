use super::{DiffError, Tensor};

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<(), DiffError> {
    if param.shape() != grad.shape() {
        return Err(DiffError::Shape(format!(
            "sgd_step: {}x{} vs {}x{}",
            param.rows(),
            param.cols(),
            grad.rows(),
            grad.cols()
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Per-tensor Adam state (first/second moment estimates and step count).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Tensor::zeros(rows, cols),
            v: Tensor::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn for_param(param: &Tensor) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

/// Adam update with bias correction (β₁=0.9, β₂=0.999, ε=1e-8).
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), DiffError> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(DiffError::Shape(format!(
            "adam_step: param {}x{}, grad {}x{}, state {}x{}",
            param.rows(),
            param.cols(),
            grad.rows(),
            grad.cols(),
            state.m.rows(),
            state.m.cols()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// AdaGrad state: accumulated squared gradients.
#[derive(Debug, Clone)]
pub struct AdaGradState {
    v: Tensor,
}

impl AdaGradState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            v: Tensor::zeros(rows, cols),
        }
    }

    pub fn for_param(param: &Tensor) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

/// AdaGrad update: `v += g²; p ← p − lr·g/(√v + ε)`. Step sizes decay
/// monotonically as gradient history accumulates.
pub fn adagrad_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdaGradState,
    lr: f64,
) -> Result<(), DiffError> {
    if param.shape() != grad.shape() || param.shape() != state.v.shape() {
        return Err(DiffError::Shape(format!(
            "adagrad_step: param {}x{}, grad {}x{}",
            param.rows(),
            param.cols(),
            grad.rows(),
            grad.cols()
        )));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.v.data_mut())
    {
        *v += g * g;
        *p -= lr * g / (v.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adagrad_first_step_is_signed_lr() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdaGradState::for_param(&p);
        adagrad_step(&mut p, &Tensor::scalar(4.0), &mut st, 0.1).unwrap();
        // v = 16, step = 0.1·4/4 = 0.1
        assert!((p.item().unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn adagrad_steps_shrink() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdaGradState::for_param(&p);
        let g = Tensor::scalar(1.0);
        let mut prev = 0.0;
        let mut deltas = Vec::new();
        for _ in 0..5 {
            adagrad_step(&mut p, &g, &mut st, 0.5).unwrap();
            let cur = p.item().unwrap();
            deltas.push((prev - cur).abs());
            prev = cur;
        }
        for w in deltas.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn sgd_basic() {
        let mut p = Tensor::scalar(1.0);
        sgd_step(&mut p, &Tensor::scalar(2.0), 0.1).unwrap();
        assert!((p.item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let g = Tensor::zeros(1, 2);
        sgd_step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let mut state = AdamState::for_param(&p);
        adam_step(&mut p, &g, &mut state, 0.5).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // One step with g=3, lr=0.1:
        //   m = 0.1*3 = 0.3, v = 0.001*9 = 0.009
        //   m̂ = 0.3/0.1 = 3, v̂ = 0.009/0.001 = 9
        //   p = 1 − 0.1·3/(3+1e-8)
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::for_param(&p);
        adam_step(&mut p, &Tensor::scalar(3.0), &mut state, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(2, 2);
        let g = Tensor::zeros(2, 3);
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
        let mut state = AdamState::for_param(&p);
        assert!(adam_step(&mut p, &g, &mut state, 0.1).is_err());
    }
}
