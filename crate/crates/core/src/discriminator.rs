//! Patch critic: 128×128×3 image → 2×2 map of real/synthetic probabilities.
//!
//! Six stride-2 3×3 convolutions take the image from 128² to 2², so each
//! output cell sees roughly one image quadrant.

use tch::nn::{self, ModuleT};
use tch::Tensor;

use crate::error::{validation, Result};
use crate::layers::{scaled, Act, ConvBlock};
use crate::IMAGE_SIZE;

/// Keeps probabilities strictly inside (0, 1) even when the logit saturates
/// in single precision.
const PROB_EPS: f64 = 1e-6;

#[derive(Debug)]
pub struct Discriminator {
    convs: Vec<ConvBlock>,
}

impl Discriminator {
    pub fn new(p: &nn::Path, width: f64) -> Self {
        let ch = [64, 128, 256, 512, 512].map(|c| scaled(c, width));
        let mut convs = Vec::with_capacity(6);
        let mut c_in = 3;
        for (i, &c) in ch.iter().enumerate() {
            convs.push(ConvBlock::conv(p / format!("conv{i}"), c_in, c, 3, 2, i > 0, Act::LeakyRelu));
            c_in = c;
        }
        convs.push(ConvBlock::conv(p / "conv5", c_in, 1, 3, 2, false, Act::None));
        Discriminator { convs }
    }

    /// Raw logits `[N, 1, 2, 2]`.
    pub fn logits(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        match images.size().as_slice() {
            &[_, 3, IMAGE_SIZE, IMAGE_SIZE] => {}
            other => {
                return Err(validation!(
                    "discriminator input must be [N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {other:?}"
                ))
            }
        }
        let xs = images * 2.0 - 1.0;
        Ok(self.convs.iter().fold(xs, |xs, c| c.forward_t(&xs, train)))
    }

    /// Probability map `[N, 1, 2, 2]` with every value in (0, 1).
    pub fn score(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self
            .logits(images, train)?
            .sigmoid()
            .clamp(PROB_EPS, 1.0 - PROB_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::{Device, Kind};

    #[test]
    fn two_by_two_map_in_open_interval() {
        tch::manual_seed(1);
        let vs = nn::VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), 0.25);
        let x = Tensor::rand([3, 3, 128, 128], (Kind::Float, Device::Cpu));
        let s = d.score(&x, true).unwrap();
        assert_eq!(s.size(), [3, 1, 2, 2]);
        assert!(s.min().double_value(&[]) > 0.0);
        assert!(s.max().double_value(&[]) < 1.0);
    }

    #[test]
    fn saturated_logits_stay_inside() {
        let vs = nn::VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), 0.125);
        tch::no_grad(|| {
            for (_, mut v) in vs.variables() {
                let _ = v.fill_(50.0);
            }
        });
        let x = Tensor::ones([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let s = d.score(&x, false).unwrap();
        assert!(s.max().double_value(&[]) < 1.0);
        assert!(s.min().double_value(&[]) > 0.0);
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let vs = nn::VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), 0.25);
        let x = Tensor::rand([2, 3, 128, 128], (Kind::Float, Device::Cpu));
        let a = d.score(&x, false).unwrap();
        let b = d.score(&x, false).unwrap();
        assert!(a.equal(&b));
    }

    #[test]
    fn rejects_wrong_shape() {
        let vs = nn::VarStore::new(Device::Cpu);
        let d = Discriminator::new(&vs.root(), 0.25);
        let x = Tensor::rand([1, 3, 64, 64], (Kind::Float, Device::Cpu));
        assert!(d.score(&x, false).is_err());
    }
}
