use crate::{MipaeError, Result};

/// Reported PSNR when the two frames are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Geometry of an interleaved `H x W x C` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn square(size: usize, channels: usize) -> Self {
        Self { height: size, width: size, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_pair(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MipaeError::Shape { op, detail: format!("{} vs {} values", a.len(), b.len()) });
    }
    Ok(())
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &[f32], b: &[f32], max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable filtering over valid window positions only.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean windowed SSIM for intensities in `[0, data_range]`, averaged over channels.
pub fn ssim_range(a: &[f32], b: &[f32], shape: FrameShape, data_range: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.len() != shape.len() {
        return Err(MipaeError::Shape { op: "ssim", detail: format!("{} values for {shape:?}", a.len()) });
    }
    let FrameShape { height: h, width: w, channels: ch } = shape;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MipaeError::Shape {
            op: "ssim",
            detail: format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let k = gaussian_window();
    let (c1, c2) = ((K1 * data_range).powi(2), (K2 * data_range).powi(2));
    let mut total = 0.0;
    for c in 0..ch {
        let plane = |v: &[f32]| -> Vec<f64> { v.iter().skip(c).step_by(ch).map(|&x| x as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

/// [`ssim_range`] for unit-range intensities.
pub fn ssim(a: &[f32], b: &[f32], shape: FrameShape) -> Result<f64> {
    ssim_range(a, b, shape, 1.0)
}
