use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Var};

/// The transform `a` inside `g(x) = x + a(x)`.
#[derive(Clone, Copy, Debug)]
pub enum Adapter<'a, T> {
    /// Batch norm with its own affine parameters.
    BatchNorm { gamma: Var, beta: Var, mode: BnMode<'a, T> },
    /// Channel-mixing 1x1 convolution, weight `[C, C, 1, 1]`.
    Conv1x1 { weight: Var },
}

/// Residual adapter `g(x) = x + a(x)` on an `[N, C, H, W]` input.
pub fn adapter_apply<T: Scalar>(g: &mut Graph<T>, x: Var, adapter: Adapter<'_, T>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::op("adapter", format!("expected [N, C, H, W], got {xs:?}")));
    }
    let c = xs[1];
    let a = match adapter {
        Adapter::BatchNorm { gamma, beta, mode } => g.batch_norm(x, gamma, beta, mode)?.0,
        Adapter::Conv1x1 { weight } => {
            if g.shape(weight) != [c, c, 1, 1] {
                return Err(Error::shape("adapter", &[c, c, 1, 1], g.shape(weight)));
            }
            g.conv2d(x, weight, 1, 0)?
        }
    };
    g.add(x, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_conv_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 5.0));
        let w = g.param(Tensor::zeros(&[3, 3, 1, 1]));
        let y = adapter_apply(&mut g, x, Adapter::Conv1x1 { weight: w }).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        // dg/dx at a = 0 is the identity
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_single_channel_weight_scales_input() {
        // one channel, weight w: g(x) = x + w * x = (1 + w) x
        let mut g = Graph::<f64>::new();
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vals.clone()).unwrap());
        let w = g.constant(Tensor::new(&[1, 1, 1, 1], vec![0.25]).unwrap());
        let y = adapter_apply(&mut g, x, Adapter::Conv1x1 { weight: w }).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 1.25 * v).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());
    }

    #[test]
    fn zero_gamma_batch_norm_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 1, 2], |i| (i * i) as f64));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let mode = BnMode::Train { eps: 1e-5 };
        let y = adapter_apply(&mut g, x, Adapter::BatchNorm { gamma, beta, mode }).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let w = g.constant(Tensor::zeros(&[3, 3, 1, 1]));
        assert!(adapter_apply(&mut g, x, Adapter::Conv1x1 { weight: w }).is_err());
        let gamma = g.constant(Tensor::zeros(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mode = BnMode::Train { eps: 1e-5 };
        assert!(adapter_apply(&mut g, x, Adapter::BatchNorm { gamma, beta, mode }).is_err());
    }
}
