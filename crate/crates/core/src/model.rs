//! The OSegNet encoder–decoder.
//!
//! The encoder is a stack of stride-2 `Conv2d → BatchNorm → tanh` stages
//! that shrink the input by 2⁵. The decoder mirrors it with five
//! `Oper2DTranspose(×2) → BatchNorm → tanh` blocks of 128, 64, 32, 16 and 8
//! filters, followed by a single 3×3 operational layer with one filter and a
//! sigmoid. There are no skip connections. Because the decoder's inputs all
//! come out of a tanh they stay inside `[-1, 1]`, where the truncated
//! polynomial nodal operators are well behaved.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2d, OperLayer};
use crate::tensor::Tensor;

/// Filter counts of the five decoder blocks.
pub const DECODER_FILTERS: [usize; 5] = [128, 64, 32, 16, 8];
/// Filters of the final operational layer.
pub const FINAL_FILTERS: usize = 1;
pub const KERNEL_SIZE: usize = 3;
/// Number of stride-2 stages, and of ×2 decoder blocks.
pub const STAGES: usize = 5;
pub const INPUT_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub q_order: usize,
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            q_order: 3,
            input_size: 224,
            encoder_channels: vec![16, 32, 64, 128, 256],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.q_order) {
            return Err(Error::invalid(
                "q_order",
                format!("Q={} outside 1..=5", self.q_order),
            ));
        }
        let factor = 1 << STAGES;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::invalid(
                "input_size",
                format!(
                    "{} is not divisible by {factor} (2^{STAGES}, one halving per decoder block)",
                    self.input_size
                ),
            ));
        }
        if self.encoder_channels.len() != STAGES || self.encoder_channels.contains(&0) {
            return Err(Error::invalid(
                "encoder_channels",
                format!(
                    "expected {STAGES} positive widths, got {:?}",
                    self.encoder_channels
                ),
            ));
        }
        Ok(())
    }

    /// Spatial size of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> STAGES
    }

    /// `(Cin, Cout)` of every operational layer in the decoder, head last.
    pub fn decoder_channels(&self) -> Vec<(usize, usize)> {
        let mut cin = *self.encoder_channels.last().expect("validated");
        let mut out = Vec::with_capacity(STAGES + 1);
        for &f in DECODER_FILTERS.iter().chain([FINAL_FILTERS].iter()) {
            out.push((cin, f));
            cin = f;
        }
        out
    }

    /// Extra trainable parameters per unit increase of Q:
    /// `Σ_decoder Cout·k·k·Cin`.
    pub fn q_slope(&self) -> usize {
        self.decoder_channels()
            .iter()
            .map(|&(cin, cout)| cout * KERNEL_SIZE * KERNEL_SIZE * cin)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub conv: Conv2d,
    pub bn: BatchNormLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub oper: OperLayer,
    pub bn: BatchNormLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OSegNetModel {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderBlock>,
    pub head: OperLayer,
}

/// Trainable and non-trainable (running statistics) parameter tallies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Outputs of a graph forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// Graph leaves of the trainable parameters, in [`OSegNetModel::parameters`] order.
    pub params: Vec<Var>,
    /// Batch statistics of every batch norm, encoder first (training only).
    pub bn_stats: Vec<BatchStats>,
}

impl OSegNetModel {
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = KERNEL_SIZE;
        let mut cin = INPUT_CHANNELS;
        let mut encoder = Vec::with_capacity(STAGES);
        for &cout in &config.encoder_channels {
            encoder.push(EncoderStage {
                conv: Conv2d::new(cin, cout, k, 2, rng),
                bn: BatchNormLayer::new(cout),
            });
            cin = cout;
        }
        let channels = config.decoder_channels();
        let mut decoder = Vec::with_capacity(STAGES);
        for &(cin, cout) in &channels[..STAGES] {
            decoder.push(DecoderBlock {
                oper: OperLayer::new(config.q_order, cin, cout, k, 2, true, rng)?,
                bn: BatchNormLayer::new(cout),
            });
        }
        let (cin, cout) = channels[STAGES];
        let head = OperLayer::new(config.q_order, cin, cout, k, 1, false, rng)?;
        Ok(OSegNetModel {
            config,
            encoder,
            decoder,
            head,
        })
    }

    /// Number of operational layers in the decoder.
    pub fn operational_layers(&self) -> usize {
        self.decoder.len() + 1
    }

    /// Records the forward pass of `x` (`N×1×H×W`) on `g`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, training: bool) -> Result<ForwardPass> {
        let [_, c, h, w] = g.value(x).dims4("forward")?;
        let size = self.config.input_size;
        if c != INPUT_CHANNELS || h != size || w != size {
            return Err(Error::shape(
                "forward",
                format!(
                    "model expects N×{INPUT_CHANNELS}×{size}×{size} input, got {:?}",
                    g.value(x).shape()
                ),
            ));
        }
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        for stage in &self.encoder {
            h = stage.conv.forward(g, h, &mut params)?;
            let (y, stats) = stage.bn.forward(g, h, training, &mut params)?;
            bn_stats.extend(stats);
            h = g.tanh(y);
        }
        for block in &self.decoder {
            h = block.oper.forward(g, h, &mut params)?;
            let (y, stats) = block.bn.forward(g, h, training, &mut params)?;
            bn_stats.extend(stats);
            h = g.tanh(y);
        }
        h = self.head.forward(g, h, &mut params)?;
        let output = g.sigmoid(h);
        Ok(ForwardPass {
            output,
            params,
            bn_stats,
        })
    }

    /// Inference-mode probability masks for a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let pass = self.forward_graph(&mut g, x, false)?;
        Ok(g.value(pass.output).clone())
    }

    /// Training-mode forward.
    pub fn forward(&mut self, batch: &Tensor, training: bool) -> Result<Tensor> {
        if !training {
            return self.predict(batch);
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let pass = self.forward_graph(&mut g, x, true)?;
        self.apply_bn_stats(&pass.bn_stats);
        Ok(g.value(pass.output).clone())
    }

    /// Folds training batch statistics into every batch norm's running stats.
    pub fn apply_bn_stats(&mut self, stats: &[BatchStats]) {
        let bns = self
            .encoder
            .iter_mut()
            .map(|s| &mut s.bn)
            .chain(self.decoder.iter_mut().map(|b| &mut b.bn));
        for (bn, s) in bns.zip(stats) {
            bn.update_running(s);
        }
    }

    /// Every tensor with its checkpoint name and whether it is trainable, in
    /// checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter().enumerate() {
            let p = format!("encoder.stage{}", i + 1);
            out.push((format!("{p}.kernel"), &s.conv.kernel, true));
            out.push((format!("{p}.bias"), &s.conv.bias, true));
            push_bn(&mut out, &p, &s.bn);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            let p = format!("decoder.block{}", i + 1);
            out.push((format!("{p}.kernel"), &b.oper.kernel, true));
            out.push((format!("{p}.bias"), &b.oper.bias, true));
            push_bn(&mut out, &p, &b.bn);
        }
        out.push(("decoder.head.kernel".into(), &self.head.kernel, true));
        out.push(("decoder.head.bias".into(), &self.head.bias, true));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.stage{}", i + 1);
            out.push((format!("{p}.kernel"), &mut s.conv.kernel, true));
            out.push((format!("{p}.bias"), &mut s.conv.bias, true));
            push_bn_mut(&mut out, &p, &mut s.bn);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.block{}", i + 1);
            out.push((format!("{p}.kernel"), &mut b.oper.kernel, true));
            out.push((format!("{p}.bias"), &mut b.oper.bias, true));
            push_bn_mut(&mut out, &p, &mut b.bn);
        }
        out.push(("decoder.head.kernel".into(), &mut self.head.kernel, true));
        out.push(("decoder.head.bias".into(), &mut self.head.bias, true));
        out
    }

    /// Trainable parameters, in the order [`ForwardPass::params`] uses.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount {
            trainable: 0,
            non_trainable: 0,
        };
        for (_, t, trainable) in self.named_tensors() {
            if trainable {
                count.trainable += t.len();
            } else {
                count.non_trainable += t.len();
            }
        }
        count
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a Tensor, bool)>, prefix: &str, bn: &'a BatchNormLayer) {
    out.push((format!("{prefix}.bn.gamma"), &bn.gamma, true));
    out.push((format!("{prefix}.bn.beta"), &bn.beta, true));
    out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean, false));
    out.push((format!("{prefix}.bn.running_var"), &bn.running_var, false));
}

fn push_bn_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor, bool)>,
    prefix: &str,
    bn: &'a mut BatchNormLayer,
) {
    out.push((format!("{prefix}.bn.gamma"), &mut bn.gamma, true));
    out.push((format!("{prefix}.bn.beta"), &mut bn.beta, true));
    out.push((
        format!("{prefix}.bn.running_mean"),
        &mut bn.running_mean,
        false,
    ));
    out.push((
        format!("{prefix}.bn.running_var"),
        &mut bn.running_var,
        false,
    ));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(q: usize, size: usize) -> ModelConfig {
        ModelConfig {
            q_order: q,
            input_size: size,
            encoder_channels: vec![2, 3, 4, 4, 6],
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = OSegNetModel::build(tiny(2, 48), &mut rng).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
        assert!(OSegNetModel::build(tiny(0, 32), &mut rng).is_err());
        assert!(OSegNetModel::build(tiny(6, 32), &mut rng).is_err());
        let mut cfg = tiny(2, 32);
        cfg.encoder_channels.pop();
        assert!(OSegNetModel::build(cfg, &mut rng).is_err());
    }

    #[test]
    fn decoder_layout_matches_architecture() {
        let cfg = ModelConfig::default();
        let model = OSegNetModel::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.operational_layers(), 6);
        let filters: Vec<usize> = model
            .decoder
            .iter()
            .map(|b| b.oper.out_channels)
            .chain([model.head.out_channels])
            .collect();
        assert_eq!(filters, [128, 64, 32, 16, 8, 1]);
        assert!(model
            .decoder
            .iter()
            .all(|b| b.oper.transpose && b.oper.stride == 2));
        assert!(model.decoder.iter().all(|b| b.oper.kernel_size == 3));
        assert_eq!(cfg.bottleneck_size(), 7);
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let cfg = tiny(3, 32);
        let model = OSegNetModel::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let twin = OSegNetModel::build(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(model, twin);
        for n in [1, 4] {
            let data: Vec<f32> = (0..n * 32 * 32).map(|i| (i % 17) as f32 / 16.0).collect();
            let x = Tensor::new(&[n, 1, 32, 32], data).unwrap();
            let a = model.predict(&x).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
            assert_eq!(a, model.predict(&x).unwrap());
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = OSegNetModel::build(tiny(1, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = model.predict(&Tensor::zeros(&[1, 1, 64, 64])).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "forward", .. }));
    }

    #[test]
    fn param_counts_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let counts: Vec<ParamCount> = (1..=5)
            .map(|q| {
                OSegNetModel::build(tiny(q, 32), &mut rng)
                    .unwrap()
                    .count_params()
            })
            .collect();
        let slope = tiny(1, 32).q_slope();
        for w in counts.windows(2) {
            assert_eq!(w[1].trainable - w[0].trainable, slope);
            assert_eq!(w[1].non_trainable, w[0].non_trainable);
        }
        let bn_channels: usize =
            [2, 3, 4, 4, 6].iter().sum::<usize>() + DECODER_FILTERS.iter().sum::<usize>();
        assert_eq!(counts[0].non_trainable, 2 * bn_channels);
    }

    #[test]
    fn q_slope_matches_published_increment_for_1024_features() {
        // A 1024-channel bottleneck gives ≈1.28M extra parameters per unit Q.
        let cfg = ModelConfig {
            encoder_channels: vec![64, 128, 256, 512, 1024],
            ..ModelConfig::default()
        };
        assert_eq!(cfg.q_slope(), 1_277_640);
    }

    #[test]
    fn batched_inference_is_order_independent() {
        let model = OSegNetModel::build(tiny(2, 32), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let samples: Vec<Tensor> = (0..3)
            .map(|s| {
                let d = (0..1024)
                    .map(|i| ((i * (s + 3)) % 29) as f32 / 28.0)
                    .collect();
                Tensor::new(&[1, 1, 32, 32], d).unwrap()
            })
            .collect();
        let batch = model.predict(&Tensor::stack(&samples).unwrap()).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let alone = model.predict(s).unwrap();
            let row = batch.sample(i);
            for (a, b) in alone.data().iter().zip(row.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn param_order_matches_forward() {
        let model = OSegNetModel::build(tiny(2, 32), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 32, 32]));
        let pass = model.forward_graph(&mut g, x, true).unwrap();
        let params = model.parameters();
        assert_eq!(pass.params.len(), params.len());
        for (v, (_, t)) in pass.params.iter().zip(&params) {
            assert_eq!(g.value(*v), *t);
        }
        assert_eq!(pass.bn_stats.len(), 10);
    }
}
