//! Procedural face renderer.
//!
//! A face is an ellipsoid of revolution about the vertical axis whose front
//! surface carries a flat texture (skin, hair, brows, eyes, nose, mouth).
//! Yaw rotates the ellipsoid; every image row is a circular cross-section so
//! the far half is foreshortened towards the silhouette and, past the limb,
//! hidden behind the head. Landmarks are the orthographic projections of the
//! texture anchor points, which keeps them analytic for every pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, Landmarks, OccludedSide, Point};
use crate::IMAGE_SIZE;

pub const HEAD_CENTER_X: f32 = 64.0;
pub const HEAD_CENTER_Y: f32 = 68.0;
const BACKGROUND: [f32; 3] = [0.18, 0.20, 0.24];
const SCLERA: [f32; 3] = [0.95, 0.95, 0.93];
const PUPIL: [f32; 3] = [0.04, 0.04, 0.05];
/// Landmarks are stored on a 1/16 px grid so mirroring is exact in f32.
const LANDMARK_GRID: f32 = 16.0;

/// Identity-specific geometry and colours. All lengths are in pixels of the
/// 128×128 frontal canvas; horizontal offsets are relative to the head axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    pub brow: [f32; 3],
    pub head_rx: f32,
    pub head_ry: f32,
    pub hairline: f32,
    pub eye_dx: f32,
    pub eye_y: f32,
    pub eye_rx: f32,
    pub eye_ry: f32,
    pub iris_r: f32,
    pub brow_gap: f32,
    pub brow_thick: f32,
    pub nose_y: f32,
    pub nose_len: f32,
    pub nose_w: f32,
    pub mouth_y: f32,
    pub mouth_w: f32,
    pub mouth_h: f32,
}

/// Per-image nuisance applied after rendering (held-out variants only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    pub brightness: f32,
    pub noise_std: f32,
    pub seed: u64,
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale3(c: [f32; 3], s: f32) -> [f32; 3] {
    [c[0] * s, c[1] * s, c[2] * s]
}

impl FaceParams {
    /// Draws the parameters of `identity`. Each identity owns its own RNG
    /// stream, so identity `k` is the same face whatever else is generated.
    pub fn sample(seed: u64, identity: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(identity) + 1);
        let mut u = |lo: f32, hi: f32| rng.gen_range(lo..hi);

        let tone = u(0.0, 1.0);
        let mut skin = lerp3([0.96, 0.82, 0.70], [0.42, 0.28, 0.20], tone);
        for c in &mut skin {
            *c = (*c + u(-0.04, 0.04)).clamp(0.0, 1.0);
        }
        let hair = [u(0.04, 0.75), u(0.03, 0.55), u(0.02, 0.45)];
        let iris = [u(0.05, 0.75), u(0.05, 0.75), u(0.05, 0.85)];
        let lips = [u(0.50, 0.90), u(0.12, 0.42), u(0.18, 0.48)];
        let brow_mix = u(0.5, 1.0);
        let brow = scale3(hair, brow_mix);

        FaceParams {
            skin,
            hair,
            iris,
            lips,
            brow,
            head_rx: u(33.0, 39.0),
            head_ry: u(48.0, 54.0),
            hairline: u(27.0, 38.0),
            eye_dx: u(15.0, 21.0),
            eye_y: u(48.0, 55.0),
            eye_rx: u(5.0, 8.0),
            eye_ry: u(2.6, 4.4),
            iris_r: u(1.8, 3.0),
            brow_gap: u(3.0, 7.0),
            brow_thick: u(1.0, 2.8),
            nose_y: u(72.0, 80.0),
            nose_len: u(11.0, 19.0),
            nose_w: u(3.5, 8.0),
            mouth_y: u(93.0, 101.0),
            mouth_w: u(8.0, 15.0),
            mouth_h: u(2.2, 5.0),
        }
    }

    /// Radius of the head cross-section at row `y`, or `None` above/below it.
    pub fn row_radius(&self, y: f32) -> Option<f32> {
        let t = (y - HEAD_CENTER_Y) / self.head_ry;
        if t.abs() >= 1.0 {
            None
        } else {
            Some(self.head_rx * (1.0 - t * t).sqrt())
        }
    }

    /// Texture of the front surface at horizontal offset `u` and row `y`.
    fn texture(&self, u: f32, y: f32, radius: f32) -> [f32; 3] {
        let rel = u / radius;
        if y < self.hairline + 10.0 * rel * rel {
            return self.hair;
        }
        for side in [-1.0f32, 1.0] {
            let ex = side * self.eye_dx;
            let brow_y = self.eye_y - self.eye_ry - self.brow_gap;
            if (u - ex).abs() <= self.eye_rx + 1.5 && (y - brow_y).abs() <= self.brow_thick {
                return self.brow;
            }
            let dx = (u - ex) / self.eye_rx;
            let dy = (y - self.eye_y) / self.eye_ry;
            if dx * dx + dy * dy <= 1.0 {
                let r = ((u - ex).powi(2) + (y - self.eye_y).powi(2)).sqrt();
                if r <= 0.45 * self.iris_r {
                    return PUPIL;
                }
                if r <= self.iris_r {
                    return self.iris;
                }
                return SCLERA;
            }
        }
        let bridge_top = self.nose_y - self.nose_len;
        if y >= bridge_top && y <= self.nose_y {
            let half = self.nose_w * (y - bridge_top) / self.nose_len;
            if u.abs() <= half {
                return scale3(self.skin, 0.72);
            }
        }
        let mx = u / self.mouth_w;
        let my = (y - self.mouth_y) / self.mouth_h;
        if mx * mx + my * my <= 1.0 {
            return self.lips;
        }
        self.skin
    }

    /// Colour seen at image point `(x, y)` with the head turned by `yaw` radians.
    fn shade(&self, x: f32, y: f32, yaw: f32) -> [f32; 3] {
        let Some(radius) = self.row_radius(y) else {
            return BACKGROUND;
        };
        let s = (x - HEAD_CENTER_X) / radius;
        if s.abs() >= 1.0 {
            return BACKGROUND;
        }
        let view = s.asin();
        let light = 0.7 + 0.3 * view.cos();
        let surface = view - yaw;
        if surface.abs() > std::f32::consts::FRAC_PI_2 {
            return scale3(self.hair, light);
        }
        scale3(self.texture(radius * surface.sin(), y, radius), light)
    }

    /// Projects the frontal texture anchor `(u, y)` under `yaw` radians.
    fn project(&self, u: f32, y: f32, yaw: f32) -> Point {
        let radius = self.row_radius(y).expect("anchor rows lie inside the head");
        let surface = (u / radius).clamp(-1.0, 1.0).asin();
        let x = HEAD_CENTER_X + radius * (surface + yaw).sin();
        Point::new(quantize(x), quantize(y))
    }

    /// Analytic landmarks (image-left eye, image-right eye, nose tip, mouth
    /// centre) at `yaw_degrees`. Occluded anchors keep their orthographic
    /// projection.
    pub fn landmarks(&self, yaw_degrees: i32) -> Landmarks {
        let yaw = (yaw_degrees as f32).to_radians();
        Landmarks([
            self.project(-self.eye_dx, self.eye_y, yaw),
            self.project(self.eye_dx, self.eye_y, yaw),
            self.project(0.0, self.nose_y, yaw),
            self.project(0.0, self.mouth_y, yaw),
        ])
    }

    /// Which image side holds the more foreshortened (or hidden) eye.
    pub fn occluded_side(&self, yaw_degrees: i32) -> OccludedSide {
        let yaw = (yaw_degrees as f32).to_radians();
        let radius = self.row_radius(self.eye_y).unwrap_or(self.head_rx);
        let a = (self.eye_dx / radius).clamp(-1.0, 1.0).asin();
        let right = (a + yaw).cos();
        let left = (-a + yaw).cos();
        if (right - left).abs() < 1e-6 {
            OccludedSide::None
        } else if right < left {
            OccludedSide::Right
        } else {
            OccludedSide::Left
        }
    }

    /// Renders the face at `yaw_degrees` with 2×2 supersampling.
    pub fn render(&self, yaw_degrees: i32) -> Image {
        let size = IMAGE_SIZE as usize;
        let yaw = (yaw_degrees as f32).to_radians();
        let mut data = Vec::with_capacity(size * size * 3);
        for row in 0..size {
            for col in 0..size {
                let mut acc = [0.0f32; 3];
                for oy in [0.25f32, 0.75] {
                    for ox in [0.25f32, 0.75] {
                        let c = self.shade(col as f32 + ox, row as f32 + oy, yaw);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
                data.extend(acc.iter().map(|v| (v / 4.0).clamp(0.0, 1.0)));
            }
        }
        Image::new(size, size, 3, data).expect("renderer produces a consistent buffer")
    }

    /// Renders with a global brightness change and additive pixel noise.
    pub fn render_with(&self, yaw_degrees: i32, nuisance: Nuisance) -> Image {
        let mut image = self.render(yaw_degrees);
        let mut rng = ChaCha8Rng::seed_from_u64(nuisance.seed);
        let noise = Normal::new(0.0f32, nuisance.noise_std.max(0.0)).expect("finite std");
        for v in image.data_mut() {
            *v = (*v * nuisance.brightness + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        image
    }
}

fn quantize(v: f32) -> f32 {
    (v * LANDMARK_GRID).round() / LANDMARK_GRID
}
