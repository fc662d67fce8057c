//! Landmark patch geometry: cropping patches around landmarks, pasting patch
//! feature maps at template locations and max-out fusion of overlaps.
//!
//! Every box follows the half-open rule: a `w×h` patch centred on `(cx, cy)`
//! covers columns `[cx − w/2, cx + w/2)` and rows `[cy − h/2, cy + h/2)`.
//! Tensors are `[N, C, H, W]`.

use tch::{Kind, Tensor};

use crate::dataset::Landmarks;
use crate::error::{ensure, validation, Result};
use crate::IMAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchName {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl PatchName {
    pub const ALL: [PatchName; 4] = [
        PatchName::LeftEye,
        PatchName::RightEye,
        PatchName::Nose,
        PatchName::Mouth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchName::LeftEye => "left_eye",
            PatchName::RightEye => "right_eye",
            PatchName::Nose => "nose",
            PatchName::Mouth => "mouth",
        }
    }

    /// Position of this patch's landmark in [`Landmarks`].
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub name: PatchName,
    pub width: i64,
    pub height: i64,
    /// `(x, y)` on the frontal canvas.
    pub template_center: (i64, i64),
}

impl PatchSpec {
    /// Top-left corner `(x0, y0)` of the box centred on `(cx, cy)`.
    pub fn origin(&self, cx: i64, cy: i64) -> (i64, i64) {
        (cx - self.width / 2, cy - self.height / 2)
    }

    fn check_dims(&self) -> Result<()> {
        ensure!(
            self.width > 0 && self.height > 0 && self.width % 8 == 0 && self.height % 8 == 0,
            "{} patch {}×{} must be positive multiples of 8",
            self.name.as_str(),
            self.width,
            self.height
        );
        Ok(())
    }
}

/// Patch sizes (eyes 40×40, nose 40×32, mouth 48×32) at the default
/// template layout on the 128×128 frontal canvas.
pub fn default_specs() -> [PatchSpec; 4] {
    [
        PatchSpec {
            name: PatchName::LeftEye,
            width: 40,
            height: 40,
            template_center: (40, 52),
        },
        PatchSpec {
            name: PatchName::RightEye,
            width: 40,
            height: 40,
            template_center: (88, 52),
        },
        PatchSpec {
            name: PatchName::Nose,
            width: 40,
            height: 32,
            template_center: (64, 76),
        },
        PatchSpec {
            name: PatchName::Mouth,
            width: 48,
            height: 32,
            template_center: (64, 100),
        },
    ]
}

/// Validates a spec set: canonical order, sizes divisible by 8 and template
/// boxes inside a `canvas`-sized image.
pub fn check_specs(specs: &[PatchSpec; 4], canvas: (i64, i64)) -> Result<()> {
    for (spec, name) in specs.iter().zip(PatchName::ALL) {
        ensure!(
            spec.name == name,
            "patch specs must be ordered left_eye, right_eye, nose, mouth"
        );
        spec.check_dims()?;
        let (cx, cy) = spec.template_center;
        check_box(spec, cx, cy, canvas)?;
    }
    Ok(())
}

fn check_box(spec: &PatchSpec, cx: i64, cy: i64, (h, w): (i64, i64)) -> Result<()> {
    let (x0, y0) = spec.origin(cx, cy);
    ensure!(
        x0 >= 0 && y0 >= 0 && x0 + spec.width <= w && y0 + spec.height <= h,
        "{} box {}×{} at ({cx}, {cy}) leaves the {h}×{w} image",
        spec.name.as_str(),
        spec.width,
        spec.height
    );
    Ok(())
}

/// Four crops in [`PatchName::ALL`] order plus the integer centres they were
/// cut around (one array per batch element).
#[derive(Debug)]
pub struct PatchSet {
    pub patches: [Tensor; 4],
    pub source_centers: Vec<[(i64, i64); 4]>,
}

impl PatchSet {
    pub fn get(&self, name: PatchName) -> &Tensor {
        &self.patches[name.index()]
    }
}

fn landmark_center(lm: &Landmarks, name: PatchName) -> (i64, i64) {
    let p = lm.0[name.index()];
    (p.x.round() as i64, p.y.round() as i64)
}

fn spatial(t: &Tensor) -> Result<(i64, i64, i64, i64)> {
    match t.size().as_slice() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(validation!("expected an [N, C, H, W] tensor, got {other:?}")),
    }
}

/// Crops each batch element around its own landmarks. Values are copied
/// unchanged; a crop that would leave the image is a validation error.
pub fn crop_patches(
    images: &Tensor,
    landmarks: &[Landmarks],
    specs: &[PatchSpec; 4],
) -> Result<PatchSet> {
    let (n, _, h, w) = spatial(images)?;
    ensure!(
        landmarks.len() as i64 == n,
        "{} landmark sets for a batch of {n}",
        landmarks.len()
    );
    let centers: Vec<[(i64, i64); 4]> = landmarks
        .iter()
        .map(|lm| PatchName::ALL.map(|name| landmark_center(lm, name)))
        .collect();
    let mut patches = Vec::with_capacity(4);
    for (k, spec) in specs.iter().enumerate() {
        spec.check_dims()?;
        let mut crops = Vec::with_capacity(n as usize);
        for (i, c) in centers.iter().enumerate() {
            let (cx, cy) = c[k];
            check_box(spec, cx, cy, (h, w))?;
            let (x0, y0) = spec.origin(cx, cy);
            crops.push(
                images
                    .get(i as i64)
                    .narrow(1, y0, spec.height)
                    .narrow(2, x0, spec.width),
            );
        }
        patches.push(Tensor::stack(&crops, 0));
    }
    Ok(PatchSet {
        patches: patches.try_into().expect("four patches"),
        source_centers: centers,
    })
}

/// Crops every batch element at the template centres.
pub fn template_crop_frontal(frontal: &Tensor, specs: &[PatchSpec; 4]) -> Result<PatchSet> {
    let (n, _, h, w) = spatial(frontal)?;
    let mut patches = Vec::with_capacity(4);
    for spec in specs {
        spec.check_dims()?;
        let (cx, cy) = spec.template_center;
        check_box(spec, cx, cy, (h, w))?;
        let (x0, y0) = spec.origin(cx, cy);
        patches.push(frontal.narrow(2, y0, spec.height).narrow(3, x0, spec.width));
    }
    let centers = specs.map(|s| s.template_center);
    Ok(PatchSet {
        patches: patches.try_into().expect("four patches"),
        source_centers: vec![centers; n as usize],
    })
}

/// Pastes each map at its template box and fuses overlaps by elementwise
/// maximum. Cells outside every box are 0. Differentiable in `maps`.
pub fn place_and_fuse(maps: &[Tensor], specs: &[PatchSpec], canvas: (i64, i64)) -> Result<Tensor> {
    ensure!(
        !maps.is_empty() && maps.len() == specs.len(),
        "{} maps for {} specs",
        maps.len(),
        specs.len()
    );
    let (height, width) = canvas;
    let (n, c, _, _) = spatial(&maps[0])?;
    let options = (maps[0].kind(), maps[0].device());
    let mut coverage = Tensor::zeros([1, 1, height, width], (Kind::Bool, maps[0].device()));
    let mut placed = Vec::with_capacity(maps.len());
    for (map, spec) in maps.iter().zip(specs) {
        let (mn, mc, mh, mw) = spatial(map)?;
        ensure!(
            mc == c,
            "channel mismatch: {} map has {mc} channels, expected {c}",
            spec.name.as_str()
        );
        ensure!(mn == n, "batch mismatch: {mn} vs {n}");
        ensure!(
            mh == spec.height && mw == spec.width,
            "{} map is {mw}×{mh}, spec says {}×{}",
            spec.name.as_str(),
            spec.width,
            spec.height
        );
        let (cx, cy) = spec.template_center;
        check_box(spec, cx, cy, canvas)?;
        let (x0, y0) = spec.origin(cx, cy);
        let pad = [x0, width - x0 - mw, y0, height - y0 - mh];
        placed.push(map.pad(pad, "constant", f64::NEG_INFINITY));
        let ones = Tensor::ones([1, 1, mh, mw], (Kind::Bool, map.device()));
        coverage = coverage.logical_or(&ones.constant_pad_nd(pad));
    }
    let fused = Tensor::stack(&placed, 0).amax([0], false);
    Ok(fused.where_self(&coverage, &Tensor::zeros([1], options)))
}

/// Template layout of [`default_specs`] on the standard canvas.
pub fn canvas() -> (i64, i64) {
    (IMAGE_SIZE, IMAGE_SIZE)
}
