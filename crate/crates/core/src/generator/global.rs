//! Global pathway: encoder with a max-out bottleneck and a decoder fed by
//! skip features, the noise-upsampling stack, the fused local canvas and
//! resized copies of the profile.

use tch::nn::{self, ModuleT};
use tch::Tensor;

use crate::layers::{max_out, scaled, Act, ConvBlock, ResBlock, ShapeTrace};
use crate::{IDENTITY_DIM, IMAGE_SIZE, NOISE_DIM};

/// Encoder output channels of conv0..conv4 at width 1.
const ENC_CHANNELS: [i64; 5] = [64, 64, 128, 256, 512];
const FC1_DIM: i64 = 2 * IDENTITY_DIM;

/// Encoder feature maps after each stage's residual blocks.
#[derive(Debug)]
pub struct EncoderSkips {
    pub conv: [Tensor; 5],
}

#[derive(Debug)]
pub struct GlobalEncoder {
    convs: Vec<ConvBlock>,
    res: Vec<Vec<ResBlock>>,
    fc1: nn::Linear,
}

impl GlobalEncoder {
    pub fn new(p: nn::Path, width: f64) -> Self {
        let ch = ENC_CHANNELS.map(|c| scaled(c, width));
        let specs = [(3, 7, 1), (ch[0], 5, 2), (ch[1], 3, 2), (ch[2], 3, 2), (ch[3], 3, 2)];
        let mut convs = Vec::new();
        let mut res = Vec::new();
        for (i, &(c_in, k, s)) in specs.iter().enumerate() {
            let name = format!("conv{i}");
            convs.push(ConvBlock::conv(&p / &name, c_in, ch[i], k, s, true, Act::LeakyRelu));
            let blocks = if i == 4 { 4 } else { 1 };
            res.push(
                (0..blocks)
                    .map(|j| ResBlock::new(&p / format!("{name}_res{j}"), ch[i], Act::LeakyRelu))
                    .collect(),
            );
        }
        let flat = ch[4] * (IMAGE_SIZE / 16) * (IMAGE_SIZE / 16);
        let fc1 = nn::linear(&p / "fc1", flat, FC1_DIM, Default::default());
        GlobalEncoder { convs, res, fc1 }
    }

    /// Returns the skip features and the 256-d identity vector.
    pub fn forward(
        &self,
        profile: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> (EncoderSkips, Tensor) {
        let mut xs = profile.shallow_clone();
        let mut skips = Vec::with_capacity(5);
        for (i, (conv, blocks)) in self.convs.iter().zip(&self.res).enumerate() {
            xs = conv.forward_t(&xs, train);
            for b in blocks {
                xs = b.forward_t(&xs, train);
            }
            trace.record(|| format!("global.enc.conv{i}"), &xs);
            skips.push(xs.shallow_clone());
        }
        let fc1 = xs.flatten(1, -1).apply(&self.fc1);
        let v_id = max_out(&fc1);
        let skips = EncoderSkips {
            conv: skips.try_into().expect("five encoder stages"),
        };
        (skips, v_id)
    }
}

/// Channel counts of the decoder at a given width.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderChannels {
    pub feat8: i64,
    pub feat32: i64,
    pub feat64: i64,
    pub feat128: i64,
    pub deconv: [i64; 4],
    pub conv5: i64,
    pub conv6: i64,
    pub enc: [i64; 5],
    pub local: i64,
}

impl DecoderChannels {
    pub fn new(width: f64) -> Self {
        DecoderChannels {
            feat8: scaled(64, width),
            feat32: scaled(32, width),
            feat64: scaled(16, width),
            feat128: scaled(8, width),
            deconv: [512, 256, 128, 64].map(|c| scaled(c, width)),
            conv5: scaled(64, width),
            conv6: scaled(32, width),
            enc: ENC_CHANNELS.map(|c| scaled(c, width)),
            local: scaled(64, width),
        }
    }
}

#[derive(Debug)]
pub struct GlobalDecoder {
    ch: DecoderChannels,
    feat8: nn::Linear,
    feat8_bn: nn::BatchNorm,
    feat32: ConvBlock,
    feat64: ConvBlock,
    feat128: ConvBlock,
    res_enc: Vec<ResBlock>,
    res_feat32: ResBlock,
    res_feat64: ResBlock,
    res_feat128: ResBlock,
    res_local: ResBlock,
    deconv: Vec<ConvBlock>,
    conv5: ConvBlock,
    conv6: ConvBlock,
    conv7: ConvBlock,
    head32: ConvBlock,
    head64: ConvBlock,
    head_global: ConvBlock,
}

/// Decoder images: fused prediction, global-only prediction and the 32²/64²
/// deep-supervision outputs.
#[derive(Debug)]
pub struct DecoderImages {
    pub fused: Tensor,
    pub global: Tensor,
    pub multiscale: [Tensor; 2],
}

impl GlobalDecoder {
    pub fn new(p: nn::Path, width: f64) -> Self {
        let ch = DecoderChannels::new(width);
        let relu = Act::Relu;
        let lin = nn::LinearConfig {
            bias: false,
            ..Default::default()
        };
        let feat8 = nn::linear(&p / "feat8", IDENTITY_DIM + NOISE_DIM, ch.feat8 * 64, lin);
        let feat8_bn = nn::batch_norm2d(&p / "feat8" / "bn", ch.feat8, Default::default());
        let feat32 = ConvBlock::deconv(&p / "feat32", ch.feat8, ch.feat32, 3, 4, true, relu);
        let feat64 = ConvBlock::deconv(&p / "feat64", ch.feat32, ch.feat64, 3, 2, true, relu);
        let feat128 = ConvBlock::deconv(&p / "feat128", ch.feat64, ch.feat128, 3, 2, true, relu);
        let res_enc = (0..5)
            .map(|i| ResBlock::new(&p / format!("skip_conv{i}"), ch.enc[i], relu))
            .collect();
        let d = ch.deconv;
        let inputs = [
            ch.feat8 + ch.enc[4],
            d[0] + ch.enc[3],
            d[1] + ch.feat32 + ch.enc[2] + 3,
            d[2] + ch.feat64 + ch.enc[1] + 3,
        ];
        let deconv = (0..4)
            .map(|i| ConvBlock::deconv(&p / format!("deconv{i}"), inputs[i], d[i], 3, 2, true, relu))
            .collect();
        let conv5_in = d[3] + ch.feat128 + ch.enc[0] + ch.local + 3;
        GlobalDecoder {
            ch,
            feat8,
            feat8_bn,
            feat32,
            feat64,
            feat128,
            res_enc,
            res_feat32: ResBlock::new(&p / "skip_feat32", ch.feat32, relu),
            res_feat64: ResBlock::new(&p / "skip_feat64", ch.feat64, relu),
            res_feat128: ResBlock::new(&p / "skip_feat128", ch.feat128, relu),
            res_local: ResBlock::new(&p / "skip_local", ch.local, relu),
            deconv,
            conv5: ConvBlock::conv(&p / "conv5", conv5_in, ch.conv5, 5, 1, true, relu),
            conv6: ConvBlock::conv(&p / "conv6", ch.conv5, ch.conv6, 3, 1, true, relu),
            conv7: ConvBlock::conv(&p / "conv7", ch.conv6, 3, 3, 1, false, Act::Sigmoid),
            head32: ConvBlock::conv(&p / "head32", d[1], 3, 3, 1, false, Act::Sigmoid),
            head64: ConvBlock::conv(&p / "head64", d[2], 3, 3, 1, false, Act::Sigmoid),
            head_global: ConvBlock::conv(&p / "head_global", d[3], 3, 3, 1, false, Act::Sigmoid),
        }
    }

    pub(crate) fn local_channels(&self) -> i64 {
        self.ch.local
    }

    /// `profile` is the normalized network input at full resolution.
    pub fn forward(
        &self,
        v_id: &Tensor,
        noise: &Tensor,
        skips: &EncoderSkips,
        local_canvas: &Tensor,
        profile: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> DecoderImages {
        let n = v_id.size()[0];
        let code = Tensor::cat(&[v_id, noise], 1);
        let feat8 = code
            .apply(&self.feat8)
            .view([n, self.ch.feat8, 8, 8])
            .apply_t(&self.feat8_bn, train)
            .relu();
        trace.record(|| "global.dec.feat8".into(), &feat8);
        let feat32 = self.feat32.forward_t(&feat8, train);
        trace.record(|| "global.dec.feat32".into(), &feat32);
        let feat64 = self.feat64.forward_t(&feat32, train);
        trace.record(|| "global.dec.feat64".into(), &feat64);
        let feat128 = self.feat128.forward_t(&feat64, train);
        trace.record(|| "global.dec.feat128".into(), &feat128);

        let skip = |i: usize| self.res_enc[i].forward_t(&skips.conv[i], train);
        let resized = |s: i64| profile.upsample_bilinear2d([s, s], false, None, None);

        let d0 = self.deconv[0].forward_t(&Tensor::cat(&[&feat8, &skip(4)], 1), train);
        trace.record(|| "global.dec.deconv0".into(), &d0);
        let d1 = self.deconv[1].forward_t(&Tensor::cat(&[&d0, &skip(3)], 1), train);
        trace.record(|| "global.dec.deconv1".into(), &d1);
        let in2 = Tensor::cat(
            &[
                &d1,
                &self.res_feat32.forward_t(&feat32, train),
                &skip(2),
                &resized(IMAGE_SIZE / 4),
            ],
            1,
        );
        let d2 = self.deconv[2].forward_t(&in2, train);
        trace.record(|| "global.dec.deconv2".into(), &d2);
        let in3 = Tensor::cat(
            &[
                &d2,
                &self.res_feat64.forward_t(&feat64, train),
                &skip(1),
                &resized(IMAGE_SIZE / 2),
            ],
            1,
        );
        let d3 = self.deconv[3].forward_t(&in3, train);
        trace.record(|| "global.dec.deconv3".into(), &d3);
        let in5 = Tensor::cat(
            &[
                &d3,
                &self.res_feat128.forward_t(&feat128, train),
                &skip(0),
                &self.res_local.forward_t(local_canvas, train),
                profile,
            ],
            1,
        );
        let c5 = self.conv5.forward_t(&in5, train);
        trace.record(|| "global.dec.conv5".into(), &c5);
        let c6 = self.conv6.forward_t(&c5, train);
        trace.record(|| "global.dec.conv6".into(), &c6);
        let fused = self.conv7.forward_t(&c6, train);
        trace.record(|| "global.dec.conv7".into(), &fused);

        let ms32 = self.head32.forward_t(&d1, train);
        let ms64 = self.head64.forward_t(&d2, train);
        let global = self.head_global.forward_t(&d3, train);
        trace.record(|| "global.dec.head32".into(), &ms32);
        trace.record(|| "global.dec.head64".into(), &ms64);
        trace.record(|| "global.dec.head_global".into(), &global);
        DecoderImages {
            fused,
            global,
            multiscale: [ms32, ms64],
        }
    }
}
