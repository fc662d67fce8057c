//! Stand-in face embedder: a small max-feature-map classifier trained on the
//! training identities. Its last convolution map and 256-d embedding feed the
//! identity-preserving loss, and the embedding drives rank-1 evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT, VarStore};
use tch::{Device, Kind, Tensor};

use crate::checkpoint;
use crate::dataset::FaceSample;
use crate::error::{ensure, validation, Result};
use crate::layers::{max_out, Act, ConvBlock};
use crate::optim::{Adam, AdamConfig};
use crate::IDENTITY_DIM;

const CONV_CHANNELS: [i64; 4] = [16, 32, 64, 64];
const CHECKPOINT_KIND: &str = "embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Square input side length.
    pub image_size: i64,
    /// Identity labels in class-index order.
    pub identities: Vec<u32>,
}

impl EmbedderConfig {
    pub fn num_classes(&self) -> i64 {
        self.identities.len() as i64
    }

    fn feature_side(&self) -> i64 {
        (0..CONV_CHANNELS.len()).fold(self.image_size, |s, _| (s + 1) / 2)
    }
}

/// The two activations used by the identity loss.
#[derive(Debug)]
pub struct Activations {
    /// Output of the last convolution stage, `[N, 64, s, s]`.
    pub feature_map: Tensor,
    /// `[N, 256]`.
    pub embedding: Tensor,
}

#[derive(Debug)]
pub struct Embedder {
    vs: VarStore,
    config: EmbedderConfig,
    convs: Vec<ConvBlock>,
    fc: nn::Linear,
    head: nn::Linear,
}

impl Embedder {
    /// Fresh, randomly initialized embedder; variables live under `embedder.`.
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        ensure!(
            config.identities.len() >= 2,
            "the embedder needs at least 2 identities, got {}",
            config.identities.len()
        );
        ensure!(config.image_size >= 1, "image size must be positive");
        let vs = VarStore::new(Device::Cpu);
        let p = vs.root() / "embedder";
        let mut convs = Vec::with_capacity(CONV_CHANNELS.len());
        let mut c_in = 3;
        for (i, &c) in CONV_CHANNELS.iter().enumerate() {
            // Each stage produces 2c maps that max-out pairs down to c.
            convs.push(ConvBlock::conv(&p / format!("conv{i}"), c_in, 2 * c, 3, 2, false, Act::None));
            c_in = c;
        }
        let side = config.feature_side();
        let flat = c_in * side * side;
        let fc = nn::linear(&p / "fc", flat, 2 * IDENTITY_DIM, Default::default());
        let head = nn::linear(&p / "head", IDENTITY_DIM, config.num_classes(), Default::default());
        Ok(Embedder {
            vs,
            config,
            convs,
            fc,
            head,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    /// Stops gradient flow into the parameters; inputs still receive
    /// gradients.
    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    /// Converts parameters to double precision (used by gradient checks).
    pub fn to_double(&mut self) {
        self.vs.double();
    }

    /// `images` is `[N, 3, S, S]` in `[0, 1]`.
    pub fn activations(&self, images: &Tensor) -> Result<Activations> {
        let s = self.config.image_size;
        match images.size().as_slice() {
            &[_, 3, h, w] if h == s && w == s => {}
            other => return Err(validation!("embedder input must be [N, 3, {s}, {s}], got {other:?}")),
        }
        let mut xs = images - 0.5;
        for conv in &self.convs {
            xs = max_out(&conv.forward_t(&xs, false));
        }
        let embedding = max_out(&xs.flatten(1, -1).apply(&self.fc));
        Ok(Activations {
            feature_map: xs,
            embedding,
        })
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.activations(images)?.embedding)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.embed(images)?.apply(&self.head))
    }

    /// Embeddings of many images, evaluated in chunks without gradients.
    pub fn embed_batched(&self, images: &Tensor, chunk: i64) -> Result<Tensor> {
        let n = images.size()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            parts.push(tch::no_grad(|| self.embed(&images.narrow(0, start, len)))?);
            start += len;
        }
        ensure!(!parts.is_empty(), "no images to embed");
        Ok(Tensor::cat(&parts, 0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_archive(
            path,
            CHECKPOINT_KIND,
            &self.config,
            &checkpoint::collect_vars(&self.vs),
        )
    }

    /// Loads a frozen embedder.
    pub fn load(path: &Path) -> Result<Self> {
        let (config, tensors): (EmbedderConfig, _) = checkpoint::read_archive(path, CHECKPOINT_KIND)?;
        let mut emb = Embedder::new(config)?;
        checkpoint::load_vars(&emb.vs, &tensors)?;
        emb.freeze();
        Ok(emb)
    }

    /// Copies the parameters from another embedder of identical layout.
    pub fn copy_from(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        checkpoint::load_vars(&self.vs, tensors)
    }

    pub fn class_of(&self, identity: u32) -> Option<i64> {
        self.config
            .identities
            .binary_search(&identity)
            .ok()
            .map(|i| i as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderTraining {
    fn default() -> Self {
        EmbedderTraining {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmbedderReport {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Stacks the profile images of `samples` into `[N, 3, H, W]`.
pub fn stack_profiles(samples: &[FaceSample]) -> Tensor {
    let ts: Vec<Tensor> = samples.iter().map(|s| s.profile_image.to_tensor()).collect();
    Tensor::stack(&ts, 0)
}

pub fn stack_frontals(samples: &[FaceSample]) -> Tensor {
    let ts: Vec<Tensor> = samples.iter().map(|s| s.frontal_image.to_tensor()).collect();
    Tensor::stack(&ts, 0)
}

/// Trains by cross-entropy on the profile image of every sample (all poses)
/// and returns the frozen embedder with its final training accuracy.
pub fn train_embedder(
    samples: &[FaceSample],
    options: EmbedderTraining,
) -> Result<(Embedder, EmbedderReport)> {
    ensure!(!samples.is_empty(), "no training samples");
    ensure!(options.batch_size >= 1, "batch size must be at least 1");
    let mut identities: Vec<u32> = samples.iter().map(|s| s.identity).collect();
    identities.sort_unstable();
    identities.dedup();
    let image_size = samples[0].profile_image.width() as i64;
    tch::manual_seed(options.seed as i64);
    let mut emb = Embedder::new(EmbedderConfig {
        image_size,
        identities,
    })?;
    let images = stack_profiles(samples);
    let labels = Tensor::from_slice(
        &samples
            .iter()
            .map(|s| emb.class_of(s.identity).expect("label of a training identity"))
            .collect::<Vec<i64>>(),
    );
    let mut opt = Adam::new(&emb.vs, AdamConfig::with_lr(options.learning_rate))?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<i64> = (0..samples.len() as i64).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(options.batch_size) {
            let idx = Tensor::from_slice(chunk);
            let x = images.index_select(0, &idx);
            let y = labels.index_select(0, &idx);
            opt.zero_grad();
            let loss = emb.logits(&x)?.cross_entropy_for_logits(&y);
            final_loss = loss.double_value(&[]);
            ensure!(final_loss.is_finite(), "embedder loss diverged");
            loss.backward();
            opt.step();
        }
    }
    emb.freeze();
    let train_accuracy = accuracy(&emb, &images, &labels)?;
    Ok((
        emb,
        EmbedderReport {
            train_accuracy,
            final_loss,
        },
    ))
}

/// Fraction of samples whose profile image the classification head assigns
/// to the right identity.
pub fn classification_accuracy(emb: &Embedder, samples: &[FaceSample]) -> Result<f64> {
    let labels = samples
        .iter()
        .map(|s| {
            emb.class_of(s.identity)
                .ok_or_else(|| validation!("identity {} is unknown to the embedder", s.identity))
        })
        .collect::<Result<Vec<i64>>>()?;
    accuracy(emb, &stack_profiles(samples), &Tensor::from_slice(&labels))
}

fn accuracy(emb: &Embedder, images: &Tensor, labels: &Tensor) -> Result<f64> {
    let n = images.size()[0];
    let mut correct = 0i64;
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let pred = tch::no_grad(|| emb.logits(&images.narrow(0, start, len)))?.argmax(1, false);
        correct += pred
            .eq_tensor(&labels.narrow(0, start, len))
            .sum(Kind::Int64)
            .int64_value(&[]);
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

/// Classifies each query by the nearest per-identity centroid (cosine
/// similarity) of the reference embeddings.
pub fn nearest_centroid_accuracy(
    emb: &Embedder,
    reference: &Tensor,
    reference_ids: &[u32],
    queries: &Tensor,
    query_ids: &[u32],
) -> Result<f64> {
    let r = emb.embed_batched(reference, 64)?;
    let q = emb.embed_batched(queries, 64)?;
    let mut ids: Vec<u32> = reference_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let centroids: Vec<Tensor> = ids
        .iter()
        .map(|id| {
            let idx: Vec<i64> = reference_ids
                .iter()
                .enumerate()
                .filter(|(_, r)| *r == id)
                .map(|(i, _)| i as i64)
                .collect();
            r.index_select(0, &Tensor::from_slice(&idx)).mean_dim(0, false, Kind::Float)
        })
        .collect();
    let c = normalize_rows(&Tensor::stack(&centroids, 0));
    let best = normalize_rows(&q).matmul(&c.tr()).argmax(1, false);
    let best: Vec<i64> = Vec::try_from(best).map_err(crate::Error::from)?;
    let correct = best
        .iter()
        .zip(query_ids)
        .filter(|(&b, &truth)| ids[b as usize] == truth)
        .count();
    Ok(correct as f64 / query_ids.len().max(1) as f64)
}

/// Unit-normalizes each row (zero rows stay zero).
pub fn normalize_rows(x: &Tensor) -> Tensor {
    let norm = x.norm_scalaropt_dim(2.0, [1], true).clamp_min(1e-12);
    x / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FaceParams;

    fn tiny(identities: Vec<u32>) -> Embedder {
        tch::manual_seed(3);
        Embedder::new(EmbedderConfig {
            image_size: 128,
            identities,
        })
        .unwrap()
    }

    #[test]
    fn exposes_both_activations() {
        let emb = tiny(vec![0, 1, 2]);
        let x = Tensor::rand([2, 3, 128, 128], (Kind::Float, Device::Cpu));
        let a = emb.activations(&x).unwrap();
        assert_eq!(a.feature_map.size(), [2, 64, 8, 8]);
        assert_eq!(a.embedding.size(), [2, 256]);
        assert!(a.embedding.isfinite().all().int64_value(&[]) == 1);
        let b = emb.activations(&x).unwrap();
        assert!(a.embedding.equal(&b.embedding));
        assert!(a.feature_map.equal(&b.feature_map));
    }

    #[test]
    fn small_inputs_are_supported() {
        let emb = Embedder::new(EmbedderConfig {
            image_size: 8,
            identities: vec![0, 1],
        })
        .unwrap();
        let x = Tensor::rand([1, 3, 8, 8], (Kind::Float, Device::Cpu));
        assert_eq!(emb.activations(&x).unwrap().feature_map.size(), [1, 64, 1, 1]);
        let wrong = Tensor::rand([1, 3, 16, 16], (Kind::Float, Device::Cpu));
        assert!(emb.activations(&wrong).is_err());
    }

    #[test]
    fn one_identity_is_rejected() {
        let face = FaceParams::sample(0, 0);
        let sample = FaceSample {
            profile_image: face.render(0),
            frontal_image: face.render(0),
            landmarks_profile: face.landmarks(0),
            identity: 0,
            yaw_degrees: 0,
            occluded: face.occluded_side(0),
        };
        assert!(train_embedder(&[sample], EmbedderTraining::default()).is_err());
    }

    #[test]
    fn frozen_parameters_pass_gradients_to_inputs() {
        let mut emb = tiny(vec![0, 1]);
        emb.freeze();
        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        emb.embed(&x).unwrap().sum(Kind::Float).backward();
        assert!(x.grad().defined());
        for (_, v) in emb.var_store().variables() {
            assert!(!v.requires_grad());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = tiny(vec![4, 9]);
        let path = dir.path().join("embedder.ckpt");
        emb.save(&path).unwrap();
        let back = Embedder::load(&path).unwrap();
        assert_eq!(back.config(), emb.config());
        let x = Tensor::rand([1, 3, 128, 128], (Kind::Float, Device::Cpu));
        assert!(emb.embed(&x).unwrap().equal(&back.embed(&x).unwrap()));
        assert_eq!(back.class_of(9), Some(1));
        assert_eq!(back.class_of(5), None);
    }

    #[test]
    fn normalize_rows_is_unit_length() {
        let x = Tensor::from_slice(&[3.0f32, 4.0, 0.0, 0.0]).view([2, 2]);
        let n = normalize_rows(&x);
        assert!((n.double_value(&[0, 0]) - 0.6).abs() < 1e-6);
        assert_eq!(n.double_value(&[1, 1]), 0.0);
    }
}
