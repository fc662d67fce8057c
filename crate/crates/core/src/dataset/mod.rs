//! Paired profile/frontal face samples: generation, storage and loading.
//!
//! Images are stored as 8-bit PNG files next to a JSON manifest. Landmarks
//! use pixel units with the origin at the top-left corner, x to the right and
//! y downwards, ordered image-left eye, image-right eye, nose tip, mouth
//! centre.

pub mod render;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, validation, Error, Result};
use crate::IMAGE_SIZE;
pub use render::{FaceParams, Nuisance};

/// Landmarks must stay this far from every border so the largest patch
/// (48 px) never leaves the image.
pub const LANDMARK_MARGIN: f32 = 24.0;

/// Poses the synthetic renderer supports.
pub const SUPPORTED_YAWS: [i32; 13] = [-90, -75, -60, -45, -30, -15, 0, 15, 30, 45, 60, 75, 90];

/// Dense row-major image with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == width * height * channels,
            "image buffer holds {} values, expected {}×{}×{}",
            data.len(),
            width,
            height,
            channels
        );
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// Horizontal mirror image.
    pub fn mirrored(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Image { data, ..*self }
    }

    /// `[C, H, W]` float tensor.
    pub fn to_tensor(&self) -> tch::Tensor {
        tch::Tensor::from_slice(&self.data)
            .view([self.height as i64, self.width as i64, self.channels as i64])
            .permute([2, 0, 1])
            .contiguous()
    }

    /// Builds an image from a `[C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &tch::Tensor) -> Result<Image> {
        let size = t.size();
        ensure!(size.len() == 3, "expected a [C, H, W] tensor, got {size:?}");
        let hwc = t
            .detach()
            .to_kind(tch::Kind::Float)
            .clamp(0.0, 1.0)
            .permute([1, 2, 0])
            .contiguous();
        let data = Vec::<f32>::try_from(hwc.flatten(0, -1))?;
        Image::new(size[2] as usize, size[1] as usize, size[0] as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure!(self.channels == 3, "PNG export expects 3 channels");
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| validation!("image buffer does not match its dimensions"))?;
        buf.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let decoded = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::corrupt(path, other),
        })?;
        let rgb = decoded.to_rgb8();
        let data = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Image::new(rgb.width() as usize, rgb.height() as usize, 3, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Point { x, y }
    }
}

/// Four landmarks: image-left eye, image-right eye, nose tip, mouth centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks(pub [Point; 4]);

impl Landmarks {
    pub fn to_flat(&self) -> [f32; 8] {
        let mut out = [0.0; 8];
        for (i, p) in self.0.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    pub fn from_flat(v: &[f32]) -> Result<Self> {
        ensure!(v.len() == 8, "expected 8 landmark numbers, got {}", v.len());
        Ok(Landmarks([
            Point::new(v[0], v[1]),
            Point::new(v[2], v[3]),
            Point::new(v[4], v[5]),
            Point::new(v[6], v[7]),
        ]))
    }

    /// Parses `"x1,y1,x2,y2,x3,y3,x4,y4"`.
    pub fn parse(s: &str) -> Result<Self> {
        let values = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f32>()
                    .map_err(|e| validation!("bad landmark value {t:?}: {e}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(&values)
    }

    /// Checks that every point keeps [`LANDMARK_MARGIN`] to the borders.
    pub fn check_margin(&self, width: usize, height: usize) -> Result<()> {
        for (i, p) in self.0.iter().enumerate() {
            let ok_x = p.x >= LANDMARK_MARGIN && p.x <= width as f32 - LANDMARK_MARGIN;
            let ok_y = p.y >= LANDMARK_MARGIN && p.y <= height as f32 - LANDMARK_MARGIN;
            ensure!(
                ok_x && ok_y,
                "landmark {i} at ({}, {}) violates the {LANDMARK_MARGIN} px margin",
                p.x,
                p.y
            );
        }
        Ok(())
    }
}

impl Serialize for Landmarks {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Landmarks {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f32>::deserialize(d)?;
        Landmarks::from_flat(&v).map_err(serde::de::Error::custom)
    }
}

/// Image side on which the far (self-occluded) half of the face lies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OccludedSide {
    #[default]
    None,
    Left,
    Right,
}

impl OccludedSide {
    fn mirrored(self) -> Self {
        match self {
            OccludedSide::None => OccludedSide::None,
            OccludedSide::Left => OccludedSide::Right,
            OccludedSide::Right => OccludedSide::Left,
        }
    }
}

/// One training/evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub profile_image: Image,
    pub frontal_image: Image,
    pub landmarks_profile: Landmarks,
    pub identity: u32,
    pub yaw_degrees: i32,
    pub occluded: OccludedSide,
}

impl FaceSample {
    pub fn validate(&self) -> Result<()> {
        let (p, f) = (&self.profile_image, &self.frontal_image);
        ensure!(
            p.width == f.width && p.height == f.height && p.channels == f.channels,
            "profile {}×{}×{} and frontal {}×{}×{} differ",
            p.width,
            p.height,
            p.channels,
            f.width,
            f.height,
            f.channels
        );
        self.landmarks_profile.check_margin(p.width, p.height)
    }
}

/// Mirrors a sample horizontally: both images, landmark x → W − (x − 1)
/// with eye labels swapped, yaw and occluded side negated.
pub fn mirror(sample: &FaceSample) -> FaceSample {
    let w = sample.profile_image.width as f32;
    let [le, re, nose, mouth] = sample.landmarks_profile.0;
    let flip = |p: Point| Point::new(w - (p.x - 1.0), p.y);
    FaceSample {
        profile_image: sample.profile_image.mirrored(),
        frontal_image: sample.frontal_image.mirrored(),
        landmarks_profile: Landmarks([flip(re), flip(le), flip(nose), flip(mouth)]),
        identity: sample.identity,
        yaw_degrees: -sample.yaw_degrees,
        occluded: sample.occluded.mirrored(),
    }
}

/// Brings a sample into the canonical pose: positive yaw, occluded half on
/// the image right. Negative yaws are mirrored; everything else is returned
/// unchanged.
pub fn canonicalize_flip(sample: &FaceSample) -> FaceSample {
    if sample.yaw_degrees < 0 {
        mirror(sample)
    } else {
        sample.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path_profile: PathBuf,
    pub path_frontal: PathBuf,
    pub identity: u32,
    pub yaw: i32,
    pub landmarks: Landmarks,
    #[serde(default)]
    pub occluded: OccludedSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub num_identities: u32,
    pub records: Vec<SampleRecord>,
    /// Directory the record paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> std::collections::BTreeSet<u32> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::corrupt(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Decodes record `index` and checks every [`FaceSample`] invariant.
    pub fn load_sample(&self, index: usize) -> Result<FaceSample> {
        let record = self.records.get(index).ok_or_else(|| {
            validation!("sample index {index} out of range (manifest has {})", self.len())
        })?;
        let profile_image = Image::load_png(&self.root.join(&record.path_profile))?;
        let frontal_image = if record.path_frontal == record.path_profile {
            profile_image.clone()
        } else {
            Image::load_png(&self.root.join(&record.path_frontal))?
        };
        let sample = FaceSample {
            profile_image,
            frontal_image,
            landmarks_profile: record.landmarks,
            identity: record.identity,
            yaw_degrees: record.yaw,
            occluded: record.occluded,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<FaceSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Checks the recognition protocol: probe identities unseen in training and
/// exactly one frontal gallery record per probe identity.
pub fn validate_protocol(
    train: &DatasetManifest,
    probe: &DatasetManifest,
    gallery: &DatasetManifest,
) -> Result<()> {
    let train_ids = train.identities();
    let probe_ids = probe.identities();
    if let Some(shared) = train_ids.intersection(&probe_ids).next() {
        return Err(validation!("identity {shared} appears in both train and probe splits"));
    }
    for id in &probe_ids {
        let n = gallery
            .records
            .iter()
            .filter(|r| r.identity == *id && r.yaw == 0)
            .count();
        ensure!(n == 1, "gallery holds {n} frontal records for probe identity {id}, expected 1");
    }
    Ok(())
}

fn image_name(identity: u32, yaw: i32) -> PathBuf {
    PathBuf::from("images").join(format!("id{identity:03}_yaw{yaw:+03}.png"))
}

fn check_yaws(yaws: &[i32]) -> Result<()> {
    ensure!(!yaws.is_empty(), "at least one yaw is required");
    for (i, y) in yaws.iter().enumerate() {
        ensure!(
            SUPPORTED_YAWS.contains(y),
            "unsupported yaw {y}; the renderer supports {SUPPORTED_YAWS:?}"
        );
        ensure!(!yaws[..i].contains(y), "yaw {y} listed twice");
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders one frontal plus one image per yaw for every identity in `ids`
/// and returns their records. Images already written by an earlier identity
/// range are overwritten with identical bytes.
fn render_identities(
    ids: impl Iterator<Item = u32>,
    yaws: &[i32],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for identity in ids {
        let face = FaceParams::sample(seed, identity);
        let frontal_path = image_name(identity, 0);
        face.render(0).save_png(&out_dir.join(&frontal_path))?;
        for &yaw in yaws {
            let path_profile = if yaw == 0 {
                frontal_path.clone()
            } else {
                let p = image_name(identity, yaw);
                face.render(yaw).save_png(&out_dir.join(&p))?;
                p
            };
            let landmarks = face.landmarks(yaw);
            landmarks.check_margin(IMAGE_SIZE as usize, IMAGE_SIZE as usize)?;
            records.push(SampleRecord {
                path_profile,
                path_frontal: frontal_path.clone(),
                identity,
                yaw,
                landmarks,
                occluded: face.occluded_side(yaw),
            });
        }
    }
    Ok(records)
}

/// Renders `num_identities` synthetic identities at every requested yaw into
/// `out_dir` and writes `out_dir/train.json`. Deterministic given `seed`.
pub fn generate_synthetic(
    num_identities: u32,
    yaws: &[i32],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    ensure!(
        num_identities >= 2,
        "at least 2 identities are required, got {num_identities}"
    );
    check_yaws(yaws)?;
    create_dir(&out_dir.join("images"))?;
    let manifest = DatasetManifest {
        split: Split::Train,
        num_identities,
        records: render_identities(0..num_identities, yaws, seed, out_dir)?,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("train.json"))?;
    Ok(manifest)
}

/// Train/probe/gallery manifests of a recognition benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: DatasetManifest,
    pub probe: DatasetManifest,
    pub gallery: DatasetManifest,
}

/// Generates a training split of `train_identities` identities plus
/// `probe_identities` held-out identities whose non-frontal renders form the
/// probe split and whose frontals form the gallery. Writes `train.json`,
/// `probe.json` and `gallery.json` into `out_dir`.
pub fn generate_benchmark(
    train_identities: u32,
    probe_identities: u32,
    yaws: &[i32],
    seed: u64,
    out_dir: &Path,
) -> Result<Benchmark> {
    ensure!(probe_identities >= 1, "at least one probe identity is required");
    let train = generate_synthetic(train_identities, yaws, seed, out_dir)?;
    let held_out = train_identities..train_identities + probe_identities;
    let probe_yaws: Vec<i32> = yaws.iter().copied().filter(|&y| y != 0).collect();
    ensure!(!probe_yaws.is_empty(), "probe split needs at least one non-zero yaw");
    let probe_records = render_identities(held_out.clone(), &probe_yaws, seed, out_dir)?;
    let gallery_records = render_identities(held_out, &[0], seed, out_dir)?;
    let probe = DatasetManifest {
        split: Split::Probe,
        num_identities: probe_identities,
        records: probe_records,
        root: out_dir.to_path_buf(),
    };
    let gallery = DatasetManifest {
        split: Split::Gallery,
        num_identities: probe_identities,
        records: gallery_records,
        root: out_dir.to_path_buf(),
    };
    validate_protocol(&train, &probe, &gallery)?;
    probe.save(&out_dir.join("probe.json"))?;
    gallery.save(&out_dir.join("gallery.json"))?;
    Ok(Benchmark {
        train,
        probe,
        gallery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_at(yaw: i32) -> FaceSample {
        let face = FaceParams::sample(5, 2);
        FaceSample {
            profile_image: face.render(yaw),
            frontal_image: face.render(0),
            landmarks_profile: face.landmarks(yaw),
            identity: 2,
            yaw_degrees: yaw,
            occluded: face.occluded_side(yaw),
        }
    }

    #[test]
    fn rejects_a_single_identity() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_synthetic(1, &[0], 7, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_unsupported_yaw() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(2, &[0, 10], 7, dir.path()).is_err());
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = generate_synthetic(2, &[0], 7, &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn frontal_landmarks_are_symmetric_about_the_axis() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(2, &[0], 7, dir.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 2);
        for r in &m.records {
            let [le, re, nose, mouth] = r.landmarks.0;
            assert!((le.x + re.x - 128.0).abs() <= 1.0);
            assert!((le.y - re.y).abs() <= 1.0);
            assert!((nose.x - 64.0).abs() <= 1.0);
            assert!((mouth.x - 64.0).abs() <= 1.0);
        }
    }

    #[test]
    fn generation_is_byte_identical_for_a_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(2, &[0, 45, -90], 7, a.path()).unwrap();
        generate_synthetic(2, &[0, 45, -90], 7, b.path()).unwrap();
        for name in ["id000_yaw+00.png", "id001_yaw+45.png", "id001_yaw-90.png"] {
            let x = fs::read(a.path().join("images").join(name)).unwrap();
            let y = fs::read(b.path().join("images").join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
        assert_eq!(
            fs::read(a.path().join("train.json")).unwrap(),
            fs::read(b.path().join("train.json")).unwrap()
        );
    }

    #[test]
    fn load_sample_contracts() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(2, &[0, 60], 3, dir.path()).unwrap();
        let m = DatasetManifest::load(&dir.path().join("train.json")).unwrap();
        assert!(matches!(m.load_sample(4), Err(Error::Validation(_))));
        let frontal = m.load_sample(0).unwrap();
        assert_eq!(frontal.yaw_degrees, 0);
        assert_eq!(frontal.profile_image, frontal.frontal_image);
        for i in 0..m.len() {
            let s = m.load_sample(i).unwrap();
            for img in [&s.profile_image, &s.frontal_image] {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn load_sample_reports_missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(2, &[0, 30], 3, dir.path()).unwrap();
        let m = DatasetManifest::load(&dir.path().join("train.json")).unwrap();
        fs::write(dir.path().join(&m.records[1].path_profile), b"not a png").unwrap();
        assert!(matches!(m.load_sample(1), Err(Error::Corrupt { .. })));
        fs::remove_file(dir.path().join(&m.records[2].path_frontal)).unwrap();
        assert!(matches!(m.load_sample(2), Err(Error::Io { .. })));
    }

    #[test]
    fn load_sample_rejects_margin_violations() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_synthetic(2, &[0], 3, dir.path()).unwrap();
        m.records[0].landmarks.0[3] = Point::new(64.0, 120.0);
        assert!(matches!(m.load_sample(0), Err(Error::Validation(_))));
    }

    #[test]
    fn canonical_samples_are_returned_unchanged() {
        let s = sample_at(45);
        assert_eq!(canonicalize_flip(&s), s);
    }

    #[test]
    fn mirroring_is_an_involution() {
        let s = sample_at(-45);
        assert_eq!(mirror(&mirror(&s)), s);
        let c = canonicalize_flip(&s);
        assert_eq!(c.yaw_degrees, 45);
        assert_eq!(c.occluded, OccludedSide::Right);
    }

    #[test]
    fn flip_remaps_left_eye_into_right_eye() {
        let mut s = sample_at(-90);
        s.landmarks_profile.0[0].x = 30.0;
        let c = canonicalize_flip(&s);
        assert_eq!(c.landmarks_profile.0[1].x, 99.0);
        assert_eq!(c.yaw_degrees, 90);
    }

    #[test]
    fn flipped_frontal_matches_rendered_mirror() {
        let s = sample_at(-30);
        let c = canonicalize_flip(&s);
        assert_eq!(c.frontal_image, s.frontal_image.mirrored());
        assert_eq!(c.profile_image, FaceParams::sample(5, 2).render(-30).mirrored());
    }

    #[test]
    fn benchmark_protocol_holds() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(3, 2, &[0, 30, -60], 1, dir.path()).unwrap();
        assert_eq!(b.train.len(), 9);
        assert_eq!(b.probe.len(), 4);
        assert_eq!(b.gallery.len(), 2);
        assert!(b.probe.records.iter().all(|r| r.yaw != 0));
        let probe = DatasetManifest::load(&dir.path().join("probe.json")).unwrap();
        let gallery = DatasetManifest::load(&dir.path().join("gallery.json")).unwrap();
        validate_protocol(&b.train, &probe, &gallery).unwrap();
        assert!(validate_protocol(&b.train, &b.train, &gallery).is_err());
    }

    #[test]
    fn landmark_parsing() {
        let lm = Landmarks::parse("40,52, 88,52,64,76,64,100").unwrap();
        assert_eq!(lm.0[3], Point::new(64.0, 100.0));
        assert!(Landmarks::parse("1,2,3").is_err());
        assert!(Landmarks::parse("a,2,3,4,5,6,7,8").is_err());
    }
}
