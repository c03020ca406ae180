use std::path::Path;

use mipae_tensor::{Mode, Tape};

use crate::nets::{frames_tensor, Networks};
use crate::synthvid::weighted_centroid;
use crate::{MipaeError, Result};

/// Foreground threshold of the centroid oracle.
pub const CENTROID_THRESHOLD: f32 = 0.1;
/// Pose-swap tolerance in pixels.
pub const SWAP_TOLERANCE_PX: f64 = 3.0;

/// Intensity-weighted centroid `(x, y)` in pixels of the pixels above
/// [`CENTROID_THRESHOLD`] in a square single-channel frame.
pub fn centroid_oracle(frame: &[f32], size: usize) -> Result<(f64, f64)> {
    if frame.len() != size * size {
        return Err(MipaeError::Shape { op: "centroid", detail: format!("{} values for a {size}x{size} frame", frame.len()) });
    }
    weighted_centroid(frame, size, CENTROID_THRESHOLD)
        .ok_or_else(|| MipaeError::Estimator("frame has no foreground above the centroid threshold".into()))
}

/// Decoded frames arranged as `rows x cols`; cell `(r, c)` combines the
/// content of row `r` with the pose of column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapGrid {
    pub rows: usize,
    pub cols: usize,
    pub size: usize,
    /// Row-major cells, each `size * size` intensities in `[0, 1]`.
    pub cells: Vec<Vec<f32>>,
}

impl SwapGrid {
    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        &self.cells[r * self.cols + c]
    }

    /// Tiles the cells into one grayscale image with a 1-pixel gap.
    pub fn to_image(&self) -> image::GrayImage {
        tile(&self.cells, self.rows, self.cols, self.size)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_png(&self.to_image(), path.as_ref())
    }

    /// Centroid distance in pixels between each cell and its column's pose
    /// frame. Cells with no foreground count as infinitely far.
    pub fn centroid_errors(&self, pose_frames: &[&[u8]]) -> Result<Vec<f64>> {
        if pose_frames.len() != self.cols {
            return Err(MipaeError::Shape { op: "swap grid", detail: format!("{} pose frames for {} columns", pose_frames.len(), self.cols) });
        }
        let targets = pose_frames
            .iter()
            .map(|f| centroid_oracle(&to_unit(f), self.size))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.rows * self.cols)
            .map(|i| match centroid_oracle(&self.cells[i], self.size) {
                Ok((x, y)) => {
                    let (tx, ty) = targets[i % self.cols];
                    ((x - tx).powi(2) + (y - ty).powi(2)).sqrt()
                }
                Err(_) => f64::INFINITY,
            })
            .collect())
    }
}

pub(crate) fn to_unit(f: &[u8]) -> Vec<f32> {
    f.iter().map(|&b| b as f32 / 255.0).collect()
}

pub(crate) fn tile(cells: &[Vec<f32>], rows: usize, cols: usize, size: usize) -> image::GrayImage {
    let pitch = size + 1;
    let mut img = image::GrayImage::from_pixel((cols * pitch + 1) as u32, (rows * pitch + 1) as u32, image::Luma([128]));
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for (p, &v) in cell.iter().enumerate() {
            let (y, x) = (p / size, p % size);
            let px = crate::synthvid::quantize(v);
            img.put_pixel((1 + c * pitch + x) as u32, (1 + r * pitch + y) as u32, image::Luma([px]));
        }
    }
    img
}

/// Writes `rows x cols` square frames as one tiled grayscale PNG.
pub fn save_frame_grid(cells: &[Vec<f32>], rows: usize, cols: usize, size: usize, path: impl AsRef<Path>) -> Result<()> {
    if cells.len() != rows * cols || cells.iter().any(|c| c.len() != size * size) {
        return Err(MipaeError::Shape { op: "frame grid", detail: format!("{} cells for a {rows}x{cols} grid of {size}px frames", cells.len()) });
    }
    save_png(&tile(cells, rows, cols, size), path.as_ref())
}

pub(crate) fn save_png(img: &image::GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => MipaeError::io(path, io),
        other => MipaeError::io(path, std::io::Error::other(other)),
    })
}

/// Decodes every pairing of a content frame with a pose frame.
///
/// The decoder's skip features, when enabled, come from the content frame.
pub fn swap_grid(nets: &Networks<f32>, content_frames: &[&[u8]], pose_frames: &[&[u8]]) -> Result<SwapGrid> {
    let (size, ch) = (nets.config.frame_size, nets.config.channels);
    let frame_len = size * size * ch;
    if ch != 1 {
        return Err(MipaeError::config("swap grids are rendered for single-channel frames"));
    }
    if let Some(f) = content_frames.iter().chain(pose_frames).find(|f| f.len() != frame_len) {
        return Err(MipaeError::Shape { op: "swap grid", detail: format!("frame of {} values, expected {frame_len}", f.len()) });
    }
    let (rows, cols) = (content_frames.len(), pose_frames.len());
    let mut tape = Tape::new();
    let xp = tape.constant(frames_tensor::<f32>(pose_frames, size, ch));
    let poses = nets.pose.encode(&mut tape, xp, Mode::EVAL);
    let mut cells = Vec::with_capacity(rows * cols);
    for &content in content_frames {
        // the content frame repeated once per column
        let rep: Vec<&[u8]> = vec![content; cols];
        let xc = tape.constant(frames_tensor::<f32>(&rep, size, ch));
        let enc = nets.content.forward(&mut tape, xc, Mode::EVAL);
        let y = nets.decoder.forward(&mut tape, enc.code, poses, Some(&enc.features), Mode::EVAL);
        let v = tape.value(y).data();
        cells.extend(v.chunks(frame_len).map(<[f32]>::to_vec));
    }
    Ok(SwapGrid { rows, cols, size, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::synthvid::{render_frame, SpriteState};

    #[test]
    fn centroid_matches_rendered_position() {
        for (shape, pos) in [(0, [0.3, 0.6]), (1, [0.71, 0.25]), (2, [0.5, 0.44])] {
            let s = SpriteState { shape_id: shape, scale_id: 2, orient_id: 5, pos };
            let f = render_frame(&[s], 64).unwrap();
            let (x, y) = centroid_oracle(&f, 64).unwrap();
            assert!((x - pos[0] * 64.0).abs() < 1.0 && (y - pos[1] * 64.0).abs() < 1.0, "{x} {y}");
        }
    }

    #[test]
    fn centroid_follows_whole_pixel_translation() {
        let s = SpriteState { shape_id: 2, scale_id: 4, orient_id: 3, pos: [0.4, 0.45] };
        let f = render_frame(&[s], 64).unwrap();
        let (dx, dy) = (5usize, 3usize);
        let mut g = vec![0.0f32; 64 * 64];
        for y in 0..64 - dy {
            for x in 0..64 - dx {
                g[(y + dy) * 64 + x + dx] = f[y * 64 + x];
            }
        }
        let (x0, y0) = centroid_oracle(&f, 64).unwrap();
        let (x1, y1) = centroid_oracle(&g, 64).unwrap();
        assert!((x1 - x0 - dx as f64).abs() < 0.5 && (y1 - y0 - dy as f64).abs() < 0.5);
    }

    #[test]
    fn empty_frame_is_an_error() {
        assert!(centroid_oracle(&vec![0.05; 64 * 64], 64).is_err());
        assert!(centroid_oracle(&[0.5; 10], 64).is_err());
    }

    #[test]
    fn grid_shape_and_diagonal_identity() {
        let cfg = NetConfig { content_dim: 16, pose_dim: 3, base_channels: 4, frame_size: 16, critic_hidden: 8, lstm_cells: 6, use_skip_connections: true, ..Default::default() };
        let nets = Networks::<f32>::new(&cfg, 3).unwrap();
        let frames: Vec<Vec<u8>> = (0..3u8).map(|k| (0..256).map(|i| ((i as u32 * (k as u32 + 3)) % 251) as u8).collect()).collect();
        let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
        let grid = swap_grid(&nets, &refs, &refs).unwrap();
        assert_eq!((grid.rows, grid.cols, grid.cells.len()), (3, 3, 9));
        for (i, f) in refs.iter().enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(frames_tensor::<f32>(&[f], 16, 1));
            let y = nets.reconstruct(&mut tape, x, Mode::EVAL);
            let direct = tape.value(y).data().to_vec();
            let diag = grid.cell(i, i);
            let err = crate::evalkit::mse(&direct, diag).unwrap();
            assert!(err < 1e-12, "cell {i}: {err}");
        }
        let img = grid.to_image();
        assert_eq!((img.width(), img.height()), (3 * 17 + 1, 3 * 17 + 1));
    }
}
