use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{MipaeError, Result};

pub const NUM_SHAPES: usize = 3;
pub const NUM_SCALES: usize = 6;
pub const NUM_ORIENTATIONS: usize = 40;

/// Circumradius of the largest sprite as a fraction of the frame side.
pub const MAX_SPRITE_RADIUS: f64 = 0.15;

/// Sub-pixel samples per axis for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Self::Square),
            1 => Some(Self::Ellipse),
            2 => Some(Self::Triangle),
            _ => None,
        }
    }
}

/// Circumradius of a sprite at `scale_id` (six linear steps from half to full size).
pub fn sprite_radius(scale_id: usize) -> f64 {
    MAX_SPRITE_RADIUS * (0.5 + 0.1 * scale_id as f64)
}

pub fn orientation_angle(orient_id: usize) -> f64 {
    2.0 * PI * orient_id as f64 / NUM_ORIENTATIONS as f64
}

/// Content factors plus the position of one sprite in a single frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpriteState {
    pub shape_id: usize,
    pub scale_id: usize,
    pub orient_id: usize,
    pub pos: [f64; 2],
}

impl SpriteState {
    fn validate(&self) -> Result<ShapeKind> {
        let kind = ShapeKind::from_id(self.shape_id)
            .ok_or_else(|| MipaeError::config(format!("shape_id {} out of range", self.shape_id)))?;
        if self.scale_id >= NUM_SCALES || self.orient_id >= NUM_ORIENTATIONS {
            return Err(MipaeError::config(format!(
                "scale_id {} / orient_id {} out of range",
                self.scale_id, self.orient_id
            )));
        }
        let r = sprite_radius(self.scale_id);
        if self.pos.iter().any(|&c| c - r < -1e-9 || c + r > 1.0 + 1e-9) {
            return Err(MipaeError::config(format!(
                "sprite of radius {r:.3} at {:?} extends beyond the frame",
                self.pos
            )));
        }
        Ok(kind)
    }

    /// Whether the normalized point `(x, y)` lies inside the sprite.
    fn covers(&self, kind: ShapeKind, x: f64, y: f64) -> bool {
        let r = sprite_radius(self.scale_id);
        let (s, c) = orientation_angle(self.orient_id).sin_cos();
        let (dx, dy) = (x - self.pos[0], y - self.pos[1]);
        // rotate into the sprite frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match kind {
            ShapeKind::Square => {
                let a = r * FRAC_1_SQRT_2;
                u.abs() <= a && v.abs() <= a
            }
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (0.5 * r)).powi(2) <= 1.0,
            ShapeKind::Triangle => {
                // outward edge normals of an equilateral triangle with a vertex at +v
                const NORMALS: [(f64, f64); 3] = [(0.0, -1.0), (0.866_025_403_784_438_6, 0.5), (-0.866_025_403_784_438_6, 0.5)];
                NORMALS.iter().all(|&(nx, ny)| u * nx + v * ny <= 0.5 * r)
            }
        }
    }
}

/// Rasterizes sprites into a `size x size` single-channel frame in `[0, 1]`.
///
/// Coverage is estimated with a regular sub-pixel grid; overlapping sprites
/// are merged with a per-pixel maximum.
pub fn render_frame(sprites: &[SpriteState], size: usize) -> Result<Vec<f32>> {
    let mut frame = vec![0f32; size * size];
    for sprite in sprites {
        let kind = sprite.validate()?;
        let r = sprite_radius(sprite.scale_id);
        let px = |c: f64| (c * size as f64).floor() as isize;
        let lo = |c: f64| px(c - r).max(0) as usize;
        let hi = |c: f64| (px(c + r) + 1).clamp(0, size as isize) as usize;
        let inv = 1.0 / (size * SUPERSAMPLE) as f64;
        for row in lo(sprite.pos[1])..hi(sprite.pos[1]) {
            for col in lo(sprite.pos[0])..hi(sprite.pos[0]) {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    let y = ((row * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                    for sx in 0..SUPERSAMPLE {
                        let x = ((col * SUPERSAMPLE + sx) as f64 + 0.5) * inv;
                        hits += sprite.covers(kind, x, y) as usize;
                    }
                }
                let value = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let cell = &mut frame[row * size + col];
                *cell = cell.max(value);
            }
        }
    }
    Ok(frame)
}

/// Intensity-weighted centroid in pixel units, `(x, y)`.
pub(crate) fn weighted_centroid(frame: &[f32], size: usize, threshold: f32) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in frame.iter().enumerate() {
        if v > threshold {
            let w = v as f64;
            sw += w;
            sx += w * ((i % size) as f64 + 0.5);
            sy += w * ((i / size) as f64 + 0.5);
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}
