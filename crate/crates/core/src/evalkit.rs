//! Recognition via generation: rank-1 identification of synthesized frontals
//! against a frontal gallery, embedding export and comparison grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::dataset::{canonicalize_flip, FaceSample, Image};
use crate::embedder::{normalize_rows, stack_frontals, stack_profiles, Embedder};
use crate::error::{ensure, validation, Error, Result};
use crate::generator::Generator;

/// Probes are synthesized in chunks of this many images.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawAccuracy {
    pub synthesized: f64,
    pub baseline: f64,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    /// Keyed by signed yaw in degrees.
    pub per_yaw: BTreeMap<i32, YawAccuracy>,
    pub num_probes: usize,
    pub num_gallery: usize,
}

impl RecognitionResult {
    /// Accuracy pooled over probes whose `|yaw|` satisfies `keep`.
    pub fn pooled(&self, keep: impl Fn(i32) -> bool) -> Option<YawAccuracy> {
        let mut probes = 0;
        let (mut syn, mut base) = (0.0, 0.0);
        for (&yaw, acc) in &self.per_yaw {
            if keep(yaw.abs()) {
                probes += acc.probes;
                syn += acc.synthesized * acc.probes as f64;
                base += acc.baseline * acc.probes as f64;
            }
        }
        (probes > 0).then(|| YawAccuracy {
            synthesized: syn / probes as f64,
            baseline: base / probes as f64,
            probes,
        })
    }

    pub fn to_json(&self) -> String {
        let pooled = |lo: i32| self.pooled(|a| a >= lo);
        serde_json::to_string_pretty(&serde_json::json!({
            "per_yaw": self.per_yaw.iter().map(|(y, a)| (y.to_string(), a)).collect::<BTreeMap<_, _>>(),
            "abs_yaw_ge_60": pooled(60),
            "all": pooled(0),
            "num_probes": self.num_probes,
            "num_gallery": self.num_gallery,
        }))
        .expect("serializable report")
    }
}

/// Index of the most cosine-similar gallery row for each probe row.
pub fn nearest_gallery(probes: &Tensor, gallery: &Tensor) -> Result<Vec<usize>> {
    let sim = normalize_rows(probes).matmul(&normalize_rows(gallery).tr());
    let best: Vec<i64> = Vec::try_from(sim.argmax(1, false)).map_err(Error::from)?;
    Ok(best.into_iter().map(|b| b as usize).collect())
}

/// Frontalizes canonicalized probes in chunks with zero noise.
pub fn synthesize_frontals(generator: &Generator, samples: &[FaceSample]) -> Result<Tensor> {
    let mut out = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        let canonical: Vec<FaceSample> = chunk.iter().map(canonicalize_flip).collect();
        let profile = stack_profiles(&canonical);
        let lms: Vec<_> = canonical.iter().map(|s| s.landmarks_profile).collect();
        out.push(generator.frontalize(&profile, &lms)?);
    }
    ensure!(!out.is_empty(), "no samples to synthesize");
    Ok(Tensor::cat(&out, 0))
}

fn accuracy_by_yaw(
    probes: &[FaceSample],
    predicted: &[usize],
    gallery_ids: &[u32],
) -> BTreeMap<i32, (usize, usize)> {
    let mut by_yaw: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    for (p, &g) in probes.iter().zip(predicted) {
        let e = by_yaw.entry(p.yaw_degrees).or_default();
        e.0 += usize::from(gallery_ids[g] == p.identity);
        e.1 += 1;
    }
    by_yaw
}

fn check_protocol(probes: &[FaceSample], gallery: &[FaceSample], train_ids: &BTreeSet<u32>) -> Result<()> {
    ensure!(!probes.is_empty(), "no probes");
    ensure!(!gallery.is_empty(), "empty gallery");
    let mut seen = BTreeSet::new();
    for g in gallery {
        ensure!(seen.insert(g.identity), "gallery holds identity {} twice", g.identity);
    }
    for p in probes {
        if !seen.contains(&p.identity) {
            return Err(validation!("probe identity {} has no gallery image", p.identity));
        }
    }
    if let Some(id) = seen.iter().find(|id| train_ids.contains(id)) {
        return Err(validation!("identity {id} appears in both training and evaluation sets"));
    }
    Ok(())
}

/// Rank-1 identification from precomputed embeddings.
pub fn rank1_from_embeddings(
    probes: &[FaceSample],
    probe_embeddings: &Tensor,
    gallery_ids: &[u32],
    gallery_embeddings: &Tensor,
) -> Result<BTreeMap<i32, (usize, usize)>> {
    let predicted = nearest_gallery(probe_embeddings, gallery_embeddings)?;
    Ok(accuracy_by_yaw(probes, &predicted, gallery_ids))
}

/// Synthesizes a frontal for every probe, embeds it and assigns the most
/// cosine-similar gallery identity. The baseline embeds the raw profile.
/// `train_ids` are the generator's training identities, which must not occur
/// in the evaluation sets.
pub fn rank1_eval(
    generator: &Generator,
    embedder: &Embedder,
    probes: &[FaceSample],
    gallery: &[FaceSample],
    train_ids: &BTreeSet<u32>,
) -> Result<RecognitionResult> {
    check_protocol(probes, gallery, train_ids)?;
    let gallery_ids: Vec<u32> = gallery.iter().map(|g| g.identity).collect();
    let gallery_emb = embedder.embed_batched(&stack_frontals(gallery), 64)?;

    let synthesized = synthesize_frontals(generator, probes)?;
    let syn_emb = embedder.embed_batched(&synthesized, 64)?;
    let raw_emb = embedder.embed_batched(&stack_profiles(probes), 64)?;

    let syn = rank1_from_embeddings(probes, &syn_emb, &gallery_ids, &gallery_emb)?;
    let raw = rank1_from_embeddings(probes, &raw_emb, &gallery_ids, &gallery_emb)?;
    let per_yaw = syn
        .iter()
        .map(|(&yaw, &(hit, n))| {
            let (base_hit, _) = raw[&yaw];
            (
                yaw,
                YawAccuracy {
                    synthesized: hit as f64 / n as f64,
                    baseline: base_hit as f64 / n as f64,
                    probes: n,
                },
            )
        })
        .collect();
    Ok(RecognitionResult {
        per_yaw,
        num_probes: probes.len(),
        num_gallery: gallery.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Profile,
    Synthesized,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Profile => "profile",
            Source::Synthesized => "synthesized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    pub identity: u32,
    pub yaw: i32,
    pub source: Source,
}

/// Projects rows onto their first two principal components. Component signs
/// are fixed so the largest-magnitude loading is positive.
pub fn principal_components_2d(features: &DMatrix<f64>) -> DMatrix<f64> {
    let n = features.nrows();
    let mean = features.row_mean();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut out = DMatrix::zeros(n, 2);
    if n < 2 {
        return out;
    }
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    // Singular values are not guaranteed sorted.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for (k, &i) in order.iter().take(2).enumerate() {
        let mut axis = vt.row(i).transpose();
        let pivot = axis.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            axis = -axis;
        }
        out.set_column(k, &(&centered * axis));
    }
    out
}

/// Writes a CSV with header `identity,yaw,source,f0..f255[,pc1,pc2]`.
pub fn export_embeddings(
    embeddings: &Tensor,
    meta: &[RowMeta],
    out_path: &Path,
    with_projection: bool,
) -> Result<()> {
    let size = embeddings.size();
    ensure!(
        size.len() == 2 && size[0] as usize == meta.len(),
        "{} metadata rows for embeddings of shape {size:?}",
        meta.len()
    );
    let (n, d) = (size[0] as usize, size[1] as usize);
    let flat: Vec<f64> = Vec::try_from(embeddings.to_kind(Kind::Double).flatten(0, -1)).map_err(Error::from)?;
    let features = DMatrix::from_row_slice(n, d, &flat);
    let pcs = with_projection.then(|| principal_components_2d(&features));

    let mut csv = String::from("identity,yaw,source");
    for i in 0..d {
        write!(csv, ",f{i}").unwrap();
    }
    if pcs.is_some() {
        csv.push_str(",pc1,pc2");
    }
    csv.push('\n');
    for (r, m) in meta.iter().enumerate() {
        write!(csv, "{},{},{}", m.identity, m.yaw, m.source.as_str()).unwrap();
        for v in features.row(r).iter() {
            write!(csv, ",{}", *v as f32).unwrap();
        }
        if let Some(p) = &pcs {
            write!(csv, ",{},{}", p[(r, 0)] as f32, p[(r, 1)] as f32).unwrap();
        }
        csv.push('\n');
    }
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_path, csv).map_err(|e| Error::io(out_path, e))
}

/// Renders one row per sample with columns profile | synthesis | ground
/// truth. Samples are canonicalized first, so the profile column shows the
/// image the generator actually saw.
pub fn emit_image_grid(generator: &Generator, samples: &[FaceSample], out_path: &Path) -> Result<Image> {
    ensure!(!samples.is_empty(), "no samples for the grid");
    let canonical: Vec<FaceSample> = samples.iter().map(canonicalize_flip).collect();
    let synthesized = synthesize_frontals(generator, &canonical)?;
    let (w, h) = (canonical[0].profile_image.width(), canonical[0].profile_image.height());
    let cols = 3;
    let mut grid = vec![0f32; samples.len() * h * cols * w * 3];
    let row_stride = cols * w * 3;
    for (r, s) in canonical.iter().enumerate() {
        let syn = Image::from_tensor(&synthesized.get(r as i64))?;
        for (c, img) in [&s.profile_image, &syn, &s.frontal_image].into_iter().enumerate() {
            ensure!(img.width() == w && img.height() == h, "grid images differ in size");
            for y in 0..h {
                let dst = (r * h + y) * row_stride + c * w * 3;
                grid[dst..dst + w * 3].copy_from_slice(&img.data()[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    let image = Image::new(cols * w, samples.len() * h, 3, grid)?;
    image.save_png(out_path)?;
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FaceParams;
    use crate::embedder::EmbedderConfig;
    use crate::generator::GeneratorConfig;
    use tch::nn::VarStore;
    use tch::Device;

    fn sample(identity: u32, yaw: i32) -> FaceSample {
        let face = FaceParams::sample(11, identity);
        FaceSample {
            profile_image: face.render(yaw),
            frontal_image: face.render(0),
            landmarks_profile: face.landmarks(yaw),
            identity,
            yaw_degrees: yaw,
            occluded: face.occluded_side(yaw),
        }
    }

    fn embedder() -> Embedder {
        tch::manual_seed(5);
        Embedder::new(EmbedderConfig {
            image_size: 128,
            identities: vec![0, 1],
        })
        .unwrap()
    }

    #[test]
    fn self_match_is_perfect() {
        let emb = embedder();
        let gallery: Vec<FaceSample> = (10..14).map(|i| sample(i, 0)).collect();
        let ids: Vec<u32> = gallery.iter().map(|g| g.identity).collect();
        let e = emb.embed_batched(&stack_frontals(&gallery), 8).unwrap();
        let res = rank1_from_embeddings(&gallery, &e, &ids, &e).unwrap();
        assert_eq!(res[&0], (4, 4));
    }

    #[test]
    fn scaling_embeddings_keeps_decisions() {
        let p = Tensor::randn([6, 16], (Kind::Float, Device::Cpu));
        let g = Tensor::randn([3, 16], (Kind::Float, Device::Cpu));
        let a = nearest_gallery(&p, &g).unwrap();
        let b = nearest_gallery(&(&p * 7.5), &(&g * 0.01)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn protocol_violations_are_rejected() {
        let gallery = vec![sample(10, 0)];
        let probes = vec![sample(11, 30)];
        assert!(check_protocol(&probes, &gallery, &BTreeSet::new()).is_err());
        let probes = vec![sample(10, 30)];
        assert!(check_protocol(&probes, &gallery, &BTreeSet::from([10])).is_err());
        assert!(check_protocol(&probes, &gallery, &BTreeSet::from([0])).is_ok());
    }

    #[test]
    fn single_gallery_identity_is_always_right() {
        let vs = VarStore::new(Device::Cpu);
        let g = Generator::new(&vs.root(), GeneratorConfig { width_multiplier: 0.125, use_local_pathway: true }).unwrap();
        let emb = embedder();
        let gallery = vec![sample(20, 0)];
        let probes = vec![sample(20, 60), sample(20, -90)];
        let r = rank1_eval(&g, &emb, &probes, &gallery, &BTreeSet::new()).unwrap();
        for acc in r.per_yaw.values() {
            assert_eq!(acc.synthesized, 1.0);
            assert_eq!(acc.baseline, 1.0);
        }
        assert_eq!(r.pooled(|a| a >= 60).unwrap().probes, 2);
    }

    #[test]
    fn pca_has_variance_on_first_component() {
        let f = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        let p = principal_components_2d(&f);
        let col = p.column(0);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        assert!(var > 0.0);
        assert_eq!(principal_components_2d(&f), p);
    }
}
