use super::{ClassifierError, ClassifierState, HeadGradients, TrainConfig};
use crate::scalar::Scalar;

struct Coefficients<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    decay: T,
    correction1: T,
    correction2: T,
}

fn update<'a, T: Scalar>(
    params: impl Iterator<Item = &'a mut T>,
    m: impl Iterator<Item = &'a mut T>,
    v: impl Iterator<Item = &'a mut T>,
    grads: impl Iterator<Item = &'a T>,
    c: &Coefficients<T>,
) {
    let one = T::one();
    for (((theta, m), v), &g) in params.zip(m).zip(v).zip(grads) {
        *m = c.beta1 * *m + (one - c.beta1) * g;
        *v = c.beta2 * *v + (one - c.beta2) * g * g;
        let m_hat = *m / c.correction1;
        let v_hat = *v / c.correction2;
        *theta = *theta - c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.decay * *theta);
    }
}

/// One AdamW step with bias correction and decoupled weight decay:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// t <- t + 1
/// theta <- theta - lr (m / (1 - b1^t) / (sqrt(v / (1 - b2^t)) + eps) + wd theta)
/// ```
pub fn adamw_step<T: Scalar>(
    state: &mut ClassifierState<T>,
    grads: &HeadGradients<T>,
    config: &TrainConfig,
) -> Result<(), ClassifierError> {
    if grads.weights.dim() != state.weights.dim() || grads.bias.len() != state.bias.len() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "gradients {:?}/{} vs parameters {:?}/{}",
            grads.weights.dim(),
            grads.bias.len(),
            state.weights.dim(),
            state.bias.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = Coefficients {
        lr: T::of(config.learning_rate),
        beta1: T::of(config.beta1),
        beta2: T::of(config.beta2),
        eps: T::of(config.epsilon),
        decay: T::of(config.weight_decay),
        correction1: T::one() - T::of(config.beta1).powi(t),
        correction2: T::one() - T::of(config.beta2).powi(t),
    };
    update(
        state.weights.iter_mut(),
        state.m_weights.iter_mut(),
        state.v_weights.iter_mut(),
        grads.weights.iter(),
        &c,
    );
    update(
        state.bias.iter_mut(),
        state.m_bias.iter_mut(),
        state.v_bias.iter_mut(),
        grads.bias.iter(),
        &c,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    fn scalar_state(theta: f64) -> ClassifierState<f64> {
        ClassifierState::from_params(array![[theta]], Array1::zeros(1))
    }

    fn grad(g: f64) -> HeadGradients<f64> {
        HeadGradients {
            weights: array![[g]],
            bias: Array1::zeros(1),
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = ClassifierState::from_params(array![[0.3, -1.0]], array![2.0]);
        let before = s.clone();
        let g = HeadGradients {
            weights: Array2::zeros((1, 2)),
            bias: Array1::zeros(1),
        };
        adamw_step(&mut s, &g, &TrainConfig::default()).unwrap();
        assert_eq!(s.weights, before.weights);
        assert_eq!(s.bias, before.bias);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_state(0.0);
        adamw_step(&mut s, &grad(1.0), &TrainConfig::default()).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = -1e-5 / (1.0 + 1e-8);
        assert!((s.weights[[0, 0]] - expected).abs() < 1e-18);
        assert!((s.weights[[0, 0]] + 9.9999999e-6).abs() < 1e-14);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar_state(1.0);
        let config = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        adamw_step(&mut s, &grad(0.0), &config).unwrap();
        assert!((s.weights[[0, 0]] - (1.0 - 1e-5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn shape_checked() {
        let mut s = scalar_state(1.0);
        let g = HeadGradients {
            weights: Array2::zeros((2, 1)),
            bias: Array1::zeros(1),
        };
        assert!(adamw_step(&mut s, &g, &TrainConfig::default()).is_err());
        assert_eq!(s.step, 0);
    }
}
