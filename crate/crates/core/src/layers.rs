//! Operational (Self-ONN) layers, plain convolution and batch normalization.
//!
//! An operational layer with order `Q` replaces the multiply of each kernel
//! element by a learned Maclaurin polynomial `Σ_{q=1..Q} w_q · y^q`. Since
//! the polynomial is linear in its weights, the layer is computed as a power
//! expansion of the input to `Cin·Q` channels followed by one ordinary
//! convolution over those channels.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::Tensor;

/// Glorot-style uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and length agree")
}

fn check_channels(op: &'static str, input: &Tensor, expected: usize) -> Result<()> {
    let [_, c, _, _] = input.dims4(op)?;
    if c != expected {
        return Err(Error::shape(
            op,
            format!("layer expects {expected} input channels, got {c}"),
        ));
    }
    Ok(())
}

/// Plain strided convolution, as used by the encoder stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    /// `Cout×Cin×k×k`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let k2 = kernel_size * kernel_size;
        let bound = glorot_bound(k2 * in_channels, k2 * out_channels);
        Conv2d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            kernel: uniform_tensor(
                &[out_channels, in_channels, kernel_size, kernel_size],
                bound,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        check_channels("conv2d", g.value(x), self.in_channels)?;
        let k = g.leaf(self.kernel.clone());
        let b = g.leaf(self.bias.clone());
        params.extend([k, b]);
        g.conv2d(x, k, b, self.stride, Padding::Same)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("conv2d", x, self.in_channels)?;
        kernels::conv2d(x, &self.kernel, &self.bias, self.stride, Padding::Same)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Q-th order operational layer, optionally transposed (upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct OperLayer {
    pub q_order: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub transpose: bool,
    /// `Cout×(Cin·Q)×k×k`, or `(Cin·Q)×Cout×k×k` when `transpose` is set.
    /// Channel `c·Q + (q-1)` holds the weight of `y_c^q`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl OperLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        q_order: usize,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        transpose: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if q_order == 0 {
            return Err(Error::invalid("q_order", "must be at least 1"));
        }
        let k2 = kernel_size * kernel_size;
        let expanded = in_channels * q_order;
        let bound = glorot_bound(k2 * expanded, k2 * out_channels);
        let shape = if transpose {
            [expanded, out_channels, kernel_size, kernel_size]
        } else {
            [out_channels, expanded, kernel_size, kernel_size]
        };
        Ok(OperLayer {
            q_order,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            transpose,
            kernel: uniform_tensor(&shape, bound, rng),
            bias: Tensor::zeros(&[out_channels]),
        })
    }

    fn op_name(&self) -> &'static str {
        if self.transpose {
            "oper2d_transpose"
        } else {
            "oper2d"
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        check_channels(self.op_name(), g.value(x), self.in_channels)?;
        let k = g.leaf(self.kernel.clone());
        let b = g.leaf(self.bias.clone());
        params.extend([k, b]);
        let expanded = g.power_expand(x, self.q_order)?;
        if self.transpose {
            g.conv2d_transpose(expanded, k, b, self.stride)
        } else {
            g.conv2d(expanded, k, b, self.stride, Padding::Same)
        }
    }

    /// Graph-free forward pass.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(self.op_name(), x, self.in_channels)?;
        let expanded = kernels::power_expand(x, self.q_order)?;
        if self.transpose {
            kernels::conv2d_transpose(&expanded, &self.kernel, &self.bias, self.stride)
        } else {
            kernels::conv2d(
                &expanded,
                &self.kernel,
                &self.bias,
                self.stride,
                Padding::Same,
            )
        }
    }

    /// `Cout · (k·k·Cin·Q + 1)`.
    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Per-channel batch normalization over `N×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            channels,
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    /// Training mode normalizes with batch statistics and returns them so the
    /// caller can fold them into the running averages.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        training: bool,
        params: &mut Vec<Var>,
    ) -> Result<(Var, Option<BatchStats>)> {
        check_channels("batch_norm", g.value(x), self.channels)?;
        let gamma = g.leaf(self.gamma.clone());
        let beta = g.leaf(self.beta.clone());
        params.extend([gamma, beta]);
        let running = (!training).then_some((&self.running_mean, &self.running_var));
        g.batch_norm(x, gamma, beta, running, self.eps)
    }

    /// `running ← momentum·running + (1 - momentum)·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (m * *r as f64 + (1.0 - m) * b) as f32;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (m * *r as f64 + (1.0 - m) * b).max(0.0) as f32;
        }
    }

    /// Graph-free forward pass; training mode also updates running stats.
    pub fn apply(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut params = Vec::new();
        let (y, stats) = self.forward(&mut g, xv, training, &mut params)?;
        if let Some(stats) = stats {
            self.update_running(&stats);
        }
        Ok(g.value(y).clone())
    }

    pub fn trainable_count(&self) -> usize {
        2 * self.channels
    }

    pub fn non_trainable_count(&self) -> usize {
        2 * self.channels
    }
}

/// Description of a layer to initialise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    },
    Oper {
        q_order: usize,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        transpose: bool,
    },
    BatchNorm {
        channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Oper(OperLayer),
    BatchNorm(BatchNormLayer),
}

/// Initialises a layer: Glorot-uniform kernels with `fan_in = k·k·Cin·Q`,
/// zero biases, and identity batch norm with running stats `(0, 1)`.
pub fn init_layer<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Layer> {
    Ok(match spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_size,
            stride,
        } => Layer::Conv(Conv2d::new(
            in_channels,
            out_channels,
            kernel_size,
            stride,
            rng,
        )),
        LayerSpec::Oper {
            q_order,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            transpose,
        } => Layer::Oper(OperLayer::new(
            q_order,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            transpose,
            rng,
        )?),
        LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNormLayer::new(channels)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pixel(v: f32) -> Tensor {
        Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn oper_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = OperLayer::new(2, 1, 1, 1, 1, false, &mut rng).unwrap();
        layer.kernel = Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        layer.bias = Tensor::from_slice(&[0.1]);
        let out = layer.apply(&pixel(0.5)).unwrap();
        assert!((out.item() - 1.1).abs() < 1e-6);
    }

    #[test]
    fn oper_transpose_hand_scatter() {
        // Powers [0.5, 0.25] scattered through a 2×2 kernel per power.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = OperLayer::new(2, 1, 1, 2, 2, true, &mut rng).unwrap();
        layer.kernel =
            Tensor::new(&[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        layer.bias = Tensor::from_slice(&[0.5]);
        let out = layer.apply(&pixel(0.5)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        let expected = [
            0.5 + 0.5 * 1.0 - 0.25,
            0.5 + 0.5 * 2.0,
            0.5 + 0.5 * 3.0 + 0.25,
            0.5 + 0.5 * 4.0 + 0.5,
        ];
        for (a, e) in out.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in 1..=5 {
            let mut layer = OperLayer::new(q, 2, 3, 3, 1, false, &mut rng).unwrap();
            layer.bias = Tensor::from_slice(&[0.2, -0.4, 1.0]);
            let out = layer.apply(&Tensor::zeros(&[1, 2, 4, 4])).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                assert_eq!(*v, [0.2, -0.4, 1.0][i / 16]);
            }
        }
    }

    #[test]
    fn transpose_doubles_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = OperLayer::new(3, 4, 2, 3, 2, true, &mut rng).unwrap();
        let out = layer.apply(&Tensor::zeros(&[2, 4, 7, 7])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 14, 14]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = OperLayer::new(2, 4, 2, 3, 1, false, &mut rng).unwrap();
        let err = layer.apply(&Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "oper2d", .. }));
    }

    #[test]
    fn param_count_is_affine_in_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts: Vec<usize> = (1..=5)
            .map(|q| {
                OperLayer::new(q, 6, 4, 3, 1, false, &mut rng)
                    .unwrap()
                    .param_count()
            })
            .collect();
        for (q, c) in counts.iter().enumerate() {
            assert_eq!(*c, 4 * (9 * 6 * (q + 1) + 1));
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = LayerSpec::Oper {
            q_order: 3,
            in_channels: 40,
            out_channels: 10,
            kernel_size: 3,
            stride: 1,
            transpose: false,
        };
        let a = init_layer(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_layer(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let Layer::Oper(layer) = a else {
            unreachable!()
        };
        assert!(layer.kernel.len() >= 10_000);
        let s = glorot_bound(9 * 40 * 3, 9 * 10);
        assert!(layer.kernel.data().iter().all(|&w| w > -s && w < s));
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let mut bn = BatchNormLayer::new(2);
        let data: Vec<f32> = (0..2 * 2 * 9)
            .map(|i| ((i * 37 % 11) as f32) * 0.3 - 1.0)
            .collect();
        let x = Tensor::new(&[2, 2, 3, 3], data).unwrap();
        let y = bn.apply(&x, true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
        // Running stats moved one momentum step towards the batch stats.
        assert!(bn.running_mean.data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_gamma_zero_and_constant_channel() {
        let mut bn = BatchNormLayer::new(1);
        bn.gamma = Tensor::from_slice(&[0.0]);
        bn.beta = Tensor::from_slice(&[0.7]);
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, -3.0, 2.0, 5.0]).unwrap();
        assert!(bn.apply(&x, true).unwrap().data().iter().all(|&v| v == 0.7));

        let mut bn = BatchNormLayer::new(1);
        bn.beta = Tensor::from_slice(&[-0.25]);
        let y = bn.apply(&Tensor::full(&[3, 1, 2, 2], 4.0), true).unwrap();
        assert!(y.data().iter().all(|&v| v == -0.25));
        let single = bn.apply(&Tensor::full(&[1, 1, 1, 1], 2.0), true).unwrap();
        assert_eq!(single.item(), -0.25);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut bn = BatchNormLayer::new(1);
        bn.running_mean = Tensor::from_slice(&[1.0]);
        bn.running_var = Tensor::from_slice(&[4.0]);
        let y = bn
            .apply(&Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap(), false)
            .unwrap();
        assert!((y.data()[0]).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(bn.running_mean.data(), &[1.0]);
    }
}
