//! Landmark-located patch network: a fully convolutional encoder/decoder
//! with three down- and up-sampling stages and U-shaped skips.

use tch::nn::{self, ModuleT};
use tch::Tensor;

use crate::geometry::PatchSpec;
use crate::layers::{scaled, Act, ConvBlock, ShapeTrace};

#[derive(Debug)]
pub struct LocalPathway {
    spec: PatchSpec,
    enc: [ConvBlock; 4],
    dec: [ConvBlock; 3],
    conv4: ConvBlock,
    conv5: ConvBlock,
}

impl LocalPathway {
    pub fn new(p: nn::Path, spec: PatchSpec, width: f64) -> Self {
        let e = [64, 128, 256, 512].map(|c| scaled(c, width));
        let d = [256, 128, 64].map(|c| scaled(c, width));
        let c4 = scaled(64, width);
        let lrelu = Act::LeakyRelu;
        let relu = Act::Relu;
        let enc_p = &p / "enc";
        let dec_p = &p / "dec";
        let enc = [
            ConvBlock::conv(&enc_p / "conv0", 3, e[0], 3, 1, true, lrelu),
            ConvBlock::conv(&enc_p / "conv1", e[0], e[1], 3, 2, true, lrelu),
            ConvBlock::conv(&enc_p / "conv2", e[1], e[2], 3, 2, true, lrelu),
            ConvBlock::conv(&enc_p / "conv3", e[2], e[3], 3, 2, true, lrelu),
        ];
        let dec = [
            ConvBlock::deconv(&dec_p / "deconv0", e[3], d[0], 3, 2, true, relu),
            ConvBlock::deconv(&dec_p / "deconv1", d[0] + e[2], d[1], 3, 2, true, relu),
            ConvBlock::deconv(&dec_p / "deconv2", d[1] + e[1], d[2], 3, 2, true, relu),
        ];
        LocalPathway {
            spec,
            enc,
            dec,
            conv4: ConvBlock::conv(&dec_p / "conv4", d[2] + e[0], c4, 3, 1, true, relu),
            conv5: ConvBlock::conv(&dec_p / "conv5", c4, 3, 3, 1, false, Act::Sigmoid),
        }
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    /// Returns `(image, feature)`: the `w×h×3` patch prediction and the
    /// `w×h×64` conv4 feature that is fused into the global pathway.
    pub fn forward(&self, patch: &Tensor, train: bool, trace: &mut ShapeTrace) -> (Tensor, Tensor) {
        let name = self.spec.name.as_str();
        let mut skips = Vec::with_capacity(4);
        let mut xs = patch.shallow_clone();
        for (i, conv) in self.enc.iter().enumerate() {
            xs = conv.forward_t(&xs, train);
            trace.record(|| format!("local.{name}.enc.conv{i}"), &xs);
            skips.push(xs.shallow_clone());
        }
        let mut ys = self.dec[0].forward_t(&xs, train);
        trace.record(|| format!("local.{name}.dec.deconv0"), &ys);
        for i in 1..3 {
            ys = self.dec[i].forward_t(&Tensor::cat(&[&ys, &skips[3 - i]], 1), train);
            trace.record(|| format!("local.{name}.dec.deconv{i}"), &ys);
        }
        let feature = self.conv4.forward_t(&Tensor::cat(&[&ys, &skips[0]], 1), train);
        trace.record(|| format!("local.{name}.dec.conv4"), &feature);
        let image = self.conv5.forward_t(&feature, train);
        trace.record(|| format!("local.{name}.dec.conv5"), &image);
        (image, feature)
    }
}
