use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err!(
                "adam: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::of(1.0 - ADAM_BETA1.powi(state.t as i32));
    let c2 = T::of(1.0 - ADAM_BETA2.powi(state.t as i32));
    let (lr, eps, one) = (T::of(lr), T::of(ADAM_EPS), T::one());
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 * 0.5^floor(step / half_every)`.
pub fn lr_schedule(step: u64, lr0: f64, half_every: u64) -> f64 {
    lr0 * 0.5f64.powi((step / half_every.max(1)).min(i32::MAX as u64) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_on_quadratic() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::scalar(2.0)];
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-12);
        assert!((p[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_and_equal_gradients() {
        let mut p = vec![Tensor::<f32>::full([1, 1, 2, 2], 0.5), Tensor::full([1, 1, 2, 2], 0.5)];
        let mut st = AdamState::new(&p);
        let zero = vec![Tensor::zeros([1, 1, 2, 2]); 2];
        adam_step(&mut p, &zero, &mut st, 0.1).unwrap();
        assert!(p.iter().all(|t| t.data().iter().all(|&v| v == 0.5)));
        let g = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 0.3, 0.0]).unwrap();
        adam_step(&mut p, &[g.clone(), g], &mut st, 0.1).unwrap();
        assert_eq!(p[0], p[1]);
        assert!(adam_step(&mut p, &[Tensor::zeros([1, 1, 2, 2])], &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0, 1e-4, 200_000), 1e-4);
        assert_eq!(lr_schedule(200_000, 1e-4, 200_000), 5e-5);
        assert_eq!(lr_schedule(399_999, 1e-4, 200_000), 5e-5);
        assert_eq!(lr_schedule(400_000, 1e-4, 200_000), 2.5e-5);
    }
}
