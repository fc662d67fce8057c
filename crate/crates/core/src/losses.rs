//! Loss terms of the synthesis objective.
//!
//! Every function takes `[N, C, H, W]` tensors and returns a scalar tensor
//! that is differentiable in the prediction. Values are batch means, so a
//! batch of one reproduces the per-image definitions.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::embedder::Embedder;
use crate::error::{ensure, validation, Error, Result};
use crate::generator::GeneratorOutput;
use crate::geometry::{self, PatchSpec};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Identity cross-entropy on the bottleneck vector.
    pub alpha: f64,
    /// Symmetry.
    pub lambda1: f64,
    /// Adversarial.
    pub lambda2: f64,
    /// Identity preserving.
    pub lambda3: f64,
    /// Total variation.
    pub lambda4: f64,
    pub w_global: f64,
    pub w_local: f64,
    pub w_multiscale: f64,
    /// Laplacian-space share of the symmetry loss.
    pub w_lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-3,
            lambda1: 0.3,
            lambda2: 1e-3,
            lambda3: 3e-3,
            lambda4: 1e-4,
            w_global: 1.0,
            w_local: 1.0,
            w_multiscale: 1.0,
            w_lap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("w_global", self.w_global),
            ("w_local", self.w_local),
            ("w_multiscale", self.w_multiscale),
            ("w_lap", self.w_lap),
        ];
        for (name, w) in all {
            ensure!(w.is_finite() && w >= 0.0, "loss weight {name} must be finite and ≥ 0, got {w}");
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(
        a.size() == b.size(),
        "{what}: prediction {:?} and target {:?} differ",
        a.size(),
        b.size()
    );
    Ok(())
}

fn dims4(t: &Tensor, what: &str) -> Result<[i64; 4]> {
    t.size()
        .try_into()
        .map_err(|s| validation!("{what} must be [N, C, H, W], got {s:?}"))
}

/// Mean absolute difference over every entry.
pub fn pixel_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(pred, gt, "pixel L1")?;
    Ok((pred - gt).abs().mean(pred.kind()))
}

/// Unweighted values of the individual pixel-loss sites.
#[derive(Debug)]
pub struct PixelSites {
    pub fused: Tensor,
    pub global: Tensor,
    /// In [`geometry::PatchName::ALL`] order; empty without local pathway.
    pub local: Vec<Tensor>,
    /// 32² then 64².
    pub multiscale: [Tensor; 2],
}

impl PixelSites {
    pub fn weighted(&self, w: &LossWeights) -> Tensor {
        let mut total = &self.fused + &self.global * w.w_global;
        for t in &self.local {
            total = total + t * w.w_local;
        }
        for t in &self.multiscale {
            total = total + t * w.w_multiscale;
        }
        total
    }

    pub fn count(&self) -> usize {
        2 + self.local.len() + self.multiscale.len()
    }
}

/// Pixel loss at every supervised site: fused and global outputs against the
/// frontal, each local image against the template crop of the frontal and
/// each multi-scale output against the area-downsampled frontal.
pub fn pixel_sites(out: &GeneratorOutput, frontal: &Tensor, specs: &[PatchSpec; 4]) -> Result<PixelSites> {
    let [_, _, h, w] = dims4(frontal, "frontal")?;
    let fused = pixel_l1(&out.fused_image, frontal)?;
    let global = pixel_l1(&out.global_image, frontal)?;
    let local = match &out.local_images {
        Some(images) => {
            let targets = geometry::template_crop_frontal(frontal, specs)?;
            images
                .iter()
                .zip(&targets.patches)
                .map(|(p, t)| pixel_l1(p, t))
                .collect::<Result<_>>()?
        }
        None => Vec::new(),
    };
    let mut ms = Vec::with_capacity(2);
    for img in &out.multiscale_images {
        let [_, _, mh, mw] = dims4(img, "multi-scale output")?;
        ensure!(
            h % mh == 0 && w % mw == 0,
            "multi-scale output {mw}×{mh} does not divide {w}×{h}"
        );
        let target = frontal.adaptive_avg_pool2d([mh, mw]);
        ms.push(pixel_l1(img, &target)?);
    }
    Ok(PixelSites {
        fused,
        global,
        local,
        multiscale: ms.try_into().expect("two scales"),
    })
}

pub fn pixel_loss_total(
    out: &GeneratorOutput,
    frontal: &Tensor,
    specs: &[PatchSpec; 4],
    weights: &LossWeights,
) -> Result<Tensor> {
    Ok(pixel_sites(out, frontal, specs)?.weighted(weights))
}

/// 4-neighbour Laplacian `[[0,1,0],[1,−4,1],[0,1,0]]` with replicate
/// borders, applied per channel. Written as shifted sums rather than a
/// convolution so a mirror-symmetric input gives a bit-exact mirror-symmetric
/// output.
pub fn laplacian(images: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = dims4(images, "laplacian input")?;
    let p = images.pad([1, 1, 1, 1], "replicate", None);
    let at = |dy: i64, dx: i64| p.narrow(2, 1 + dy, h).narrow(3, 1 + dx, w);
    let horizontal = at(0, -1) + at(0, 1);
    let vertical = at(-1, 0) + at(1, 0);
    Ok(horizontal + vertical - images * 4.0)
}

/// Mean over `(W/2)·H·C` of `|I(x) − I(W−1−x)|` for the left-half columns,
/// with the left operand detached so only the right half receives gradient.
fn half_mirror_l1(images: &Tensor) -> Tensor {
    let w = images.size()[3];
    let left = images.narrow(3, 0, w / 2).detach();
    let right = images.narrow(3, w - w / 2, w / 2).flip([3]);
    (left - right).abs().mean(images.kind())
}

/// Symmetry loss in pixel space plus `lap_weight` times the same loss in
/// Laplacian space. Only the right (occluded) half receives gradient.
pub fn symmetry_loss(pred: &Tensor, lap_weight: f64) -> Result<Tensor> {
    let [_, _, _, w] = dims4(pred, "symmetry input")?;
    ensure!(w % 2 == 0, "symmetry loss needs an even width, got {w}");
    let half = w / 2;
    let pixel = half_mirror_l1(pred);
    if lap_weight == 0.0 {
        return Ok(pixel);
    }
    let blocked = Tensor::cat(&[pred.narrow(3, 0, half).detach(), pred.narrow(3, half, half)], 3);
    let lap = laplacian(&blocked)?;
    Ok(pixel + half_mirror_l1(&lap) * lap_weight)
}

fn check_probabilities(p: &Tensor, what: &str) -> Result<()> {
    let bad = p.isnan().any().int64_value(&[]) != 0
        || p.lt(0.0).any().int64_value(&[]) != 0
        || p.gt(1.0).any().int64_value(&[]) != 0;
    if bad {
        return Err(Error::Numeric(format!("{what} contains values outside [0, 1]")));
    }
    Ok(())
}

/// Mean of `−log D` over batch and map cells.
pub fn adversarial_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    check_probabilities(fake_scores, "discriminator scores")?;
    Ok(-fake_scores.clamp_min(PROB_FLOOR).log().mean(fake_scores.kind()))
}

/// `−mean log D(real) − mean log(1 − D(fake))`.
pub fn adversarial_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    same_shape(real_scores, fake_scores, "discriminator scores")?;
    check_probabilities(real_scores, "real scores")?;
    check_probabilities(fake_scores, "fake scores")?;
    let kind = real_scores.kind();
    let real = real_scores.clamp_min(PROB_FLOOR).log().mean(kind);
    let fake = fake_scores.neg().g_add_scalar(1.0).clamp_min(PROB_FLOOR).log().mean(kind);
    Ok(-real - fake)
}

/// Sum over the embedder's last convolution map and embedding of the mean
/// absolute activation difference between prediction and ground truth.
pub fn identity_loss(pred: &Tensor, gt_frontal: &Tensor, embedder: &Embedder) -> Result<Tensor> {
    same_shape(pred, gt_frontal, "identity loss")?;
    let p = embedder.activations(pred)?;
    let g = embedder.activations(gt_frontal)?;
    let kind = pred.kind();
    Ok((p.feature_map - g.feature_map).abs().mean(kind) + (p.embedding - g.embedding).abs().mean(kind))
}

/// Anisotropic total variation: mean horizontal plus mean vertical absolute
/// neighbour difference.
pub fn tv_loss(pred: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = dims4(pred, "total variation input")?;
    ensure!(h >= 2 && w >= 2, "total variation needs at least 2×2, got {w}×{h}");
    let kind = pred.kind();
    let dx = (pred.narrow(3, 1, w - 1) - pred.narrow(3, 0, w - 1)).abs().mean(kind);
    let dy = (pred.narrow(2, 1, h - 1) - pred.narrow(2, 0, h - 1)).abs().mean(kind);
    Ok(dx + dy)
}

/// Softmax cross-entropy of `[N, K]` logits against class indices.
pub fn cross_entropy_id(logits: &Tensor, labels: &[i64]) -> Result<Tensor> {
    let size = logits.size();
    ensure!(size.len() == 2, "logits must be [N, K], got {size:?}");
    let (n, k) = (size[0], size[1]);
    ensure!(labels.len() as i64 == n, "{} labels for {n} rows", labels.len());
    if let Some(bad) = labels.iter().find(|&&l| l < 0 || l >= k) {
        return Err(validation!("label {bad} out of range for {k} classes"));
    }
    let target = Tensor::from_slice(labels).to_device(logits.device());
    Ok(logits.log_softmax(1, logits.kind()).nll_loss(&target))
}

/// Unweighted scalar values of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub symmetry: f64,
    pub adversarial: f64,
    pub identity: f64,
    pub tv: f64,
    pub cross_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub parts: LossParts,
    pub weights: LossWeights,
    /// `pixel + λ1·sym + λ2·adv + λ3·ip + λ4·tv`.
    pub total: f64,
    /// `total + α·cross_entropy`.
    pub joint: f64,
    pub batch_size: usize,
}

impl LossReport {
    /// Recomputes `total` from parts and weights.
    pub fn reconstruct_total(&self) -> f64 {
        let (p, w) = (&self.parts, &self.weights);
        p.pixel + w.lambda1 * p.symmetry + w.lambda2 * p.adversarial + w.lambda3 * p.identity + w.lambda4 * p.tv
    }

    /// One JSON object per step for the training log.
    pub fn log_line(&self, step: u64, d_loss: Option<f64>, wall_time: f64) -> String {
        serde_json::json!({
            "step": step,
            "pixel": self.parts.pixel,
            "symmetry": self.parts.symmetry,
            "adversarial": self.parts.adversarial,
            "identity": self.parts.identity,
            "tv": self.parts.tv,
            "cross_entropy": self.parts.cross_entropy,
            "total": self.total,
            "joint": self.joint,
            "d_loss": d_loss,
            "batch_size": self.batch_size,
            "wall_time": wall_time,
        })
        .to_string()
    }
}

/// Weighted total of the parts; a non-finite part is a numeric error naming
/// the term.
pub fn total_synthesis_loss(parts: LossParts, weights: LossWeights, batch_size: usize) -> Result<LossReport> {
    weights.validate()?;
    let named = [
        ("pixel", parts.pixel),
        ("symmetry", parts.symmetry),
        ("adversarial", parts.adversarial),
        ("identity", parts.identity),
        ("tv", parts.tv),
        ("cross_entropy", parts.cross_entropy),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
        }
    }
    let mut report = LossReport {
        parts,
        weights,
        total: 0.0,
        joint: 0.0,
        batch_size,
    };
    report.total = report.reconstruct_total();
    report.joint = report.total + weights.alpha * parts.cross_entropy;
    Ok(report)
}

/// Scalar value of a loss tensor.
pub fn value(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}
