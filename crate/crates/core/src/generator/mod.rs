//! Two-pathway generator.
//!
//! [`Generator::synthesize`] crops the four landmark patches from the profile,
//! runs each through its own local pathway, pastes the local features at the
//! template locations with max-out fusion, encodes the profile globally and
//! decodes the frontal view from the identity vector, noise, encoder skips,
//! fused local features and the profile itself.

mod global;
mod local;

use serde::{Deserialize, Serialize};
use tch::nn;
use tch::{Kind, Tensor};

use crate::dataset::Landmarks;
use crate::error::{ensure, validation, Result};
use crate::geometry::{self, PatchSpec};
use crate::layers::ShapeTrace;
use crate::{IDENTITY_DIM, IMAGE_SIZE, NOISE_DIM};

pub use global::{DecoderImages, EncoderSkips, GlobalDecoder, GlobalEncoder};
pub use local::LocalPathway;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Scales every hidden channel count; input/output channels are fixed.
    pub width_multiplier: f64,
    pub use_local_pathway: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width_multiplier: 1.0,
            use_local_pathway: true,
        }
    }
}

#[derive(Debug)]
pub struct GeneratorOutput {
    pub fused_image: Tensor,
    pub global_image: Tensor,
    /// Per-patch predictions; `None` when the local pathway is disabled.
    pub local_images: Option<[Tensor; 4]>,
    /// 32×32 and 64×64 predictions.
    pub multiscale_images: [Tensor; 2],
    pub identity_vector: Tensor,
    pub local_feature_canvas: Tensor,
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    specs: [PatchSpec; 4],
    encoder: GlobalEncoder,
    decoder: GlobalDecoder,
    local: Option<Vec<LocalPathway>>,
}

/// Maps `[0, 1]` pixels to the network's `[-1, 1]` input range.
fn normalize(images: &Tensor) -> Tensor {
    images * 2.0 - 1.0
}

fn check_image_batch(t: &Tensor, what: &str) -> Result<i64> {
    match t.size().as_slice() {
        &[n, 3, IMAGE_SIZE, IMAGE_SIZE] => Ok(n),
        other => Err(validation!(
            "{what} must be [N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {other:?}"
        )),
    }
}

impl Generator {
    /// Builds the generator under `p` (`p/global/...`, `p/local/<patch>/...`).
    pub fn new(p: &nn::Path, config: GeneratorConfig) -> Result<Self> {
        Self::with_specs(p, config, geometry::default_specs())
    }

    pub fn with_specs(p: &nn::Path, config: GeneratorConfig, specs: [PatchSpec; 4]) -> Result<Self> {
        ensure!(
            config.width_multiplier > 0.0 && config.width_multiplier.is_finite(),
            "width multiplier must be positive, got {}",
            config.width_multiplier
        );
        geometry::check_specs(&specs, geometry::canvas())?;
        let width = config.width_multiplier;
        let g = p / "global";
        let encoder = GlobalEncoder::new(&g / "enc", width);
        let decoder = GlobalDecoder::new(&g / "dec", width);
        let local = config.use_local_pathway.then(|| {
            specs
                .iter()
                .map(|s| LocalPathway::new(p / "local" / s.name.as_str(), *s, width))
                .collect()
        });
        Ok(Generator {
            config,
            specs,
            encoder,
            decoder,
            local,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn specs(&self) -> &[PatchSpec; 4] {
        &self.specs
    }

    /// Encodes a `[N, 3, 128, 128]` profile batch in `[0, 1]`.
    pub fn encode_global(
        &self,
        profile: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<(EncoderSkips, Tensor)> {
        check_image_batch(profile, "profile")?;
        Ok(self.encoder.forward(&normalize(profile), train, trace))
    }

    pub fn decode_global(
        &self,
        v_id: &Tensor,
        noise: &Tensor,
        skips: &EncoderSkips,
        local_canvas: &Tensor,
        profile: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<DecoderImages> {
        let n = check_image_batch(profile, "profile")?;
        ensure!(
            v_id.size() == [n, IDENTITY_DIM],
            "identity vector must be [{n}, {IDENTITY_DIM}], got {:?}",
            v_id.size()
        );
        ensure!(
            noise.size() == [n, NOISE_DIM],
            "noise must be [{n}, {NOISE_DIM}], got {:?}",
            noise.size()
        );
        let lc = self.decoder.local_channels();
        ensure!(
            local_canvas.size() == [n, lc, IMAGE_SIZE, IMAGE_SIZE],
            "local canvas must be [{n}, {lc}, {IMAGE_SIZE}, {IMAGE_SIZE}], got {:?}",
            local_canvas.size()
        );
        let expected = self.expected_skip_shapes(n);
        for (i, (skip, want)) in skips.conv.iter().zip(&expected).enumerate() {
            ensure!(
                skip.size() == want.as_slice(),
                "encoder skip conv{i} is {:?}, expected {want:?}",
                skip.size()
            );
        }
        Ok(self.decoder.forward(
            v_id,
            noise,
            skips,
            local_canvas,
            &normalize(profile),
            train,
            trace,
        ))
    }

    fn expected_skip_shapes(&self, n: i64) -> [[i64; 4]; 5] {
        let w = self.config.width_multiplier;
        let ch = [64, 64, 128, 256, 512].map(|c| crate::layers::scaled(c, w));
        let mut out = [[0; 4]; 5];
        for i in 0..5 {
            let s = if i == 0 { IMAGE_SIZE } else { IMAGE_SIZE >> i };
            out[i] = [n, ch[i], s, s];
        }
        out
    }

    /// Runs the four patch networks. Returns `(images, features)`.
    pub fn forward_local(
        &self,
        patches: &[Tensor; 4],
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<([Tensor; 4], [Tensor; 4])> {
        let local = self
            .local
            .as_ref()
            .ok_or_else(|| validation!("the local pathway is disabled"))?;
        let mut images = Vec::with_capacity(4);
        let mut features = Vec::with_capacity(4);
        for (net, patch) in local.iter().zip(patches) {
            let s = net.spec();
            let size = patch.size();
            ensure!(
                size.len() == 4 && size[1] == 3 && size[2] == s.height && size[3] == s.width,
                "{} patch must be [N, 3, {}, {}], got {size:?}",
                s.name.as_str(),
                s.height,
                s.width
            );
            let (img, feat) = net.forward(patch, train, trace);
            images.push(img);
            features.push(feat);
        }
        Ok((
            images.try_into().expect("four patches"),
            features.try_into().expect("four patches"),
        ))
    }

    /// Full forward pass on a canonicalized profile batch.
    pub fn synthesize(
        &self,
        profile: &Tensor,
        landmarks: &[Landmarks],
        noise: &Tensor,
        train: bool,
    ) -> Result<GeneratorOutput> {
        self.synthesize_traced(profile, landmarks, noise, train, &mut ShapeTrace::disabled())
    }

    pub fn synthesize_traced(
        &self,
        profile: &Tensor,
        landmarks: &[Landmarks],
        noise: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<GeneratorOutput> {
        let n = check_image_batch(profile, "profile")?;
        ensure!(
            landmarks.len() as i64 == n,
            "{} landmark sets for a batch of {n}",
            landmarks.len()
        );
        let (local_images, canvas) = if self.local.is_some() {
            let patches = geometry::crop_patches(profile, landmarks, &self.specs)?;
            let normalized = patches.patches.each_ref().map(normalize);
            let (images, features) = self.forward_local(&normalized, train, trace)?;
            let canvas = geometry::place_and_fuse(&features, &self.specs, geometry::canvas())?;
            trace.record(|| "local.fused".into(), &canvas);
            (Some(images), canvas)
        } else {
            let c = self.decoder.local_channels();
            let canvas = Tensor::zeros(
                [n, c, IMAGE_SIZE, IMAGE_SIZE],
                (profile.kind(), profile.device()),
            );
            (None, canvas)
        };
        let (skips, v_id) = self.encode_global(profile, train, trace)?;
        let images = self.decode_global(&v_id, noise, &skips, &canvas, profile, train, trace)?;
        Ok(GeneratorOutput {
            fused_image: images.fused,
            global_image: images.global,
            local_images,
            multiscale_images: images.multiscale,
            identity_vector: v_id,
            local_feature_canvas: canvas,
        })
    }

    /// Inference-mode frontalization with zero noise and no gradient tape.
    pub fn frontalize(&self, profile: &Tensor, landmarks: &[Landmarks]) -> Result<Tensor> {
        let n = check_image_batch(profile, "profile")?;
        let noise = Tensor::zeros([n, NOISE_DIM], (Kind::Float, profile.device()));
        tch::no_grad(|| {
            self.synthesize(profile, landmarks, &noise, false)
                .map(|o| o.fused_image)
        })
    }
}

/// Linear classifier from the identity vector to training-identity logits.
#[derive(Debug)]
pub struct IdentityHead {
    linear: nn::Linear,
    classes: i64,
}

impl IdentityHead {
    pub fn new(p: &nn::Path, classes: i64) -> Self {
        IdentityHead {
            linear: nn::linear(p / "idhead", IDENTITY_DIM, classes, Default::default()),
            classes,
        }
    }

    pub fn classes(&self) -> i64 {
        self.classes
    }

    pub fn logits(&self, v_id: &Tensor) -> Tensor {
        v_id.apply(&self.linear)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;
    use tch::Device;

    fn centered_landmarks(n: usize) -> Vec<Landmarks> {
        vec![
            Landmarks([
                Point::new(44.0, 52.0),
                Point::new(84.0, 52.0),
                Point::new(64.0, 76.0),
                Point::new(64.0, 100.0),
            ]);
            n
        ]
    }

    fn small(use_local: bool) -> (nn::VarStore, Generator) {
        tch::manual_seed(0);
        let vs = nn::VarStore::new(Device::Cpu);
        let g = Generator::new(
            &vs.root(),
            GeneratorConfig {
                width_multiplier: 0.125,
                use_local_pathway: use_local,
            },
        )
        .unwrap();
        (vs, g)
    }

    #[test]
    fn outputs_are_bounded_images() {
        let (_vs, g) = small(true);
        let x = Tensor::rand([2, 3, 128, 128], (Kind::Float, Device::Cpu));
        let z = Tensor::randn([2, 100], (Kind::Float, Device::Cpu));
        let out = g.synthesize(&x, &centered_landmarks(2), &z, true).unwrap();
        assert_eq!(out.fused_image.size(), [2, 3, 128, 128]);
        assert_eq!(out.global_image.size(), [2, 3, 128, 128]);
        assert_eq!(out.multiscale_images[0].size(), [2, 3, 32, 32]);
        assert_eq!(out.multiscale_images[1].size(), [2, 3, 64, 64]);
        assert_eq!(out.identity_vector.size(), [2, 256]);
        let locals = out.local_images.as_ref().unwrap();
        assert_eq!(locals[3].size(), [2, 3, 32, 48]);
        for t in [&out.fused_image, &out.global_image, &locals[0]] {
            assert!(t.min().double_value(&[]) >= 0.0);
            assert!(t.max().double_value(&[]) <= 1.0);
        }
        assert!(out.identity_vector.isfinite().all().int64_value(&[]) == 1);
    }

    #[test]
    fn inference_is_deterministic() {
        let (_vs, g) = small(true);
        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let z = Tensor::randn([1, 100], (Kind::Float, Device::Cpu));
        let a = tch::no_grad(|| g.synthesize(&x, &centered_landmarks(1), &z, false).unwrap());
        let b = tch::no_grad(|| g.synthesize(&x, &centered_landmarks(1), &z, false).unwrap());
        assert!(a.fused_image.equal(&b.fused_image));
    }

    #[test]
    fn disabled_local_pathway_yields_zero_canvas() {
        let (vs, g) = small(false);
        assert!(vs.variables().keys().all(|k| !k.starts_with("local.")));
        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let z = Tensor::zeros([1, 100], (Kind::Float, Device::Cpu));
        let out = g.synthesize(&x, &centered_landmarks(1), &z, true).unwrap();
        assert!(out.local_images.is_none());
        assert_eq!(out.local_feature_canvas.abs().sum(Kind::Double).double_value(&[]), 0.0);
        assert_eq!(out.fused_image.size(), [1, 3, 128, 128]);
    }

    #[test]
    fn shape_contract_errors() {
        let (_vs, g) = small(true);
        let bad = Tensor::rand([1, 3, 64, 64], (Kind::Float, Device::Cpu));
        let mut trace = ShapeTrace::disabled();
        assert!(g.encode_global(&bad, false, &mut trace).is_err());

        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let z99 = Tensor::zeros([1, 99], (Kind::Float, Device::Cpu));
        assert!(g.synthesize(&x, &centered_landmarks(1), &z99, false).is_err());

        let (skips, v) = g.encode_global(&x, false, &mut trace).unwrap();
        let wrong_canvas = Tensor::zeros([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let z = Tensor::zeros([1, 100], (Kind::Float, Device::Cpu));
        assert!(g
            .decode_global(&v, &z, &skips, &wrong_canvas, &x, false, &mut trace)
            .is_err());

        let patches = [
            Tensor::zeros([1, 3, 40, 40], (Kind::Float, Device::Cpu)),
            Tensor::zeros([1, 3, 40, 40], (Kind::Float, Device::Cpu)),
            Tensor::zeros([1, 3, 40, 40], (Kind::Float, Device::Cpu)),
            Tensor::zeros([1, 3, 32, 48], (Kind::Float, Device::Cpu)),
        ];
        assert!(g.forward_local(&patches, false, &mut trace).is_err());
    }

    #[test]
    fn local_pathways_do_not_share_parameters() {
        let (vs, _g) = small(true);
        let vars = vs.variables();
        for name in ["left_eye", "right_eye", "nose", "mouth"] {
            let key = format!("local.{name}.enc.conv0.weight");
            assert!(vars.contains_key(&key), "missing {key}");
        }
        let a = &vars["local.left_eye.enc.conv0.weight"];
        let b = &vars["local.right_eye.enc.conv0.weight"];
        assert_ne!(a.data_ptr(), b.data_ptr());
    }

    #[test]
    fn identity_vector_is_max_of_fc1_halves() {
        let (vs, g) = small(false);
        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        let mut trace = ShapeTrace::disabled();
        let (skips, v) = tch::no_grad(|| g.encode_global(&x, false, &mut trace).unwrap());
        let vars = vs.variables();
        let w = &vars["global.enc.fc1.weight"];
        let b = &vars["global.enc.fc1.bias"];
        let fc1 = tch::no_grad(|| skips.conv[4].flatten(1, -1).matmul(&w.tr()) + b);
        let expected = fc1.narrow(1, 0, 256).maximum(&fc1.narrow(1, 256, 256));
        assert!(v.allclose(&expected, 1e-5, 1e-6, false));
    }
}
