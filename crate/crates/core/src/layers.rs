//! Convolution building blocks shared by the networks.

use tch::nn::{self, ModuleT};
use tch::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu,
    Sigmoid,
    None,
}

impl Act {
    pub fn apply(self, xs: &Tensor) -> Tensor {
        match self {
            Act::Relu => xs.relu(),
            Act::LeakyRelu => xs.leaky_relu_ext(0.2),
            Act::Sigmoid => xs.sigmoid(),
            Act::None => xs.shallow_clone(),
        }
    }
}

trait LeakyExt {
    fn leaky_relu_ext(&self, slope: f64) -> Tensor;
}

impl LeakyExt for Tensor {
    fn leaky_relu_ext(&self, slope: f64) -> Tensor {
        self.maximum(&(self * slope))
    }
}

/// Scales a channel count by the network width multiplier (at least 1).
pub fn scaled(channels: i64, multiplier: f64) -> i64 {
    ((channels as f64 * multiplier).round() as i64).max(1)
}

#[derive(Debug)]
enum Op {
    Conv(nn::Conv2D),
    Deconv(nn::ConvTranspose2D),
}

/// Convolution (or transposed convolution) → optional batch norm → activation.
#[derive(Debug)]
pub struct ConvBlock {
    op: Op,
    bn: Option<nn::BatchNorm>,
    act: Act,
}

impl ConvBlock {
    /// Same-padded convolution; stride 2 halves the resolution.
    pub fn conv(
        p: nn::Path,
        c_in: i64,
        c_out: i64,
        kernel: i64,
        stride: i64,
        norm: bool,
        act: Act,
    ) -> Self {
        let cfg = nn::ConvConfig {
            stride,
            padding: kernel / 2,
            bias: !norm,
            ..Default::default()
        };
        let op = Op::Conv(nn::conv2d(&p, c_in, c_out, kernel, cfg));
        let bn = norm.then(|| nn::batch_norm2d(&p / "bn", c_out, Default::default()));
        ConvBlock { op, bn, act }
    }

    /// Transposed convolution multiplying the resolution by `stride` exactly.
    pub fn deconv(
        p: nn::Path,
        c_in: i64,
        c_out: i64,
        kernel: i64,
        stride: i64,
        norm: bool,
        act: Act,
    ) -> Self {
        // out = (in − 1)·s − 2·pad + k + out_pad; choose pad/out_pad so out = in·s.
        let padding = (kernel - 1) / 2;
        let output_padding = stride - kernel + 2 * padding;
        assert!(
            (0..stride.max(1)).contains(&output_padding),
            "no exact transposed convolution for k={kernel}, s={stride}"
        );
        let cfg = nn::ConvTransposeConfig {
            stride,
            padding,
            output_padding,
            bias: !norm,
            ..Default::default()
        };
        let op = Op::Deconv(nn::conv_transpose2d(&p, c_in, c_out, kernel, cfg));
        let bn = norm.then(|| nn::batch_norm2d(&p / "bn", c_out, Default::default()));
        ConvBlock { op, bn, act }
    }
}

impl ModuleT for ConvBlock {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let ys = match &self.op {
            Op::Conv(c) => xs.apply(c),
            Op::Deconv(c) => xs.apply(c),
        };
        let ys = match &self.bn {
            Some(bn) => ys.apply_t(bn, train),
            None => ys,
        };
        self.act.apply(&ys)
    }
}

/// Two 3×3 convolutions with an identity shortcut; channel preserving.
#[derive(Debug)]
pub struct ResBlock {
    conv1: ConvBlock,
    conv2: ConvBlock,
    act: Act,
}

impl ResBlock {
    pub fn new(p: nn::Path, channels: i64, act: Act) -> Self {
        ResBlock {
            conv1: ConvBlock::conv(&p / "conv1", channels, channels, 3, 1, true, act),
            conv2: ConvBlock::conv(&p / "conv2", channels, channels, 3, 1, true, Act::None),
            act,
        }
    }
}

impl ModuleT for ResBlock {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let ys = self.conv1.forward_t(xs, train);
        let ys = self.conv2.forward_t(&ys, train);
        self.act.apply(&(ys + xs))
    }
}

/// Max-out over the two halves of dimension 1 (max-feature-map activation).
pub fn max_out(xs: &Tensor) -> Tensor {
    let half = xs.size()[1] / 2;
    xs.narrow(1, 0, half).maximum(&xs.narrow(1, half, half))
}

/// Records `(layer, [width, height, channels])` for shape conformance checks.
#[derive(Debug, Default)]
pub struct ShapeTrace {
    enabled: bool,
    pub entries: Vec<(String, [i64; 3])>,
}

impl ShapeTrace {
    pub fn enabled() -> Self {
        ShapeTrace {
            enabled: true,
            entries: Vec::new(),
        }
    }

    pub fn disabled() -> Self {
        ShapeTrace::default()
    }

    pub fn record(&mut self, name: impl FnOnce() -> String, t: &Tensor) {
        if self.enabled {
            let s = t.size();
            if let [_, c, h, w] = s.as_slice() {
                self.entries.push((name(), [*w, *h, *c]));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<[i64; 3]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn deconv_is_exact_for_stride_two_and_four() {
        let vs = nn::VarStore::new(Device::Cpu);
        let x = Tensor::zeros([1, 4, 8, 8], (Kind::Float, Device::Cpu));
        let d2 = ConvBlock::deconv(vs.root() / "a", 4, 2, 3, 2, true, Act::Relu);
        let d4 = ConvBlock::deconv(vs.root() / "b", 4, 2, 3, 4, true, Act::Relu);
        assert_eq!(d2.forward_t(&x, false).size(), [1, 2, 16, 16]);
        assert_eq!(d4.forward_t(&x, false).size(), [1, 2, 32, 32]);
    }

    #[test]
    fn strided_conv_halves() {
        let vs = nn::VarStore::new(Device::Cpu);
        let x = Tensor::zeros([2, 3, 40, 32], (Kind::Float, Device::Cpu));
        let c = ConvBlock::conv(vs.root(), 3, 5, 3, 2, false, Act::LeakyRelu);
        assert_eq!(c.forward_t(&x, true).size(), [2, 5, 20, 16]);
    }

    #[test]
    fn width_scaling() {
        assert_eq!(scaled(64, 0.25), 16);
        assert_eq!(scaled(8, 0.25), 2);
        assert_eq!(scaled(3, 0.01), 1);
        assert_eq!(scaled(512, 1.0), 512);
    }

    #[test]
    fn max_out_takes_elementwise_max_of_halves() {
        let x = Tensor::from_slice(&[1.0f32, -2.0, 0.0, 3.0]).view([1, 4]);
        let y = max_out(&x);
        assert_eq!(Vec::<f32>::try_from(y.view([-1])).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::from_slice(&[-1.0f32, 2.0]);
        let y = Act::LeakyRelu.apply(&x);
        assert!((y.double_value(&[0]) + 0.2).abs() < 1e-7);
        assert_eq!(y.double_value(&[1]), 2.0);
    }
}
