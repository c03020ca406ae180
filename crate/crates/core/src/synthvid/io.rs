//! Binary dataset container; byte layout documented in `docs/dataset_format.md`.

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetConfig, FactorTrack, VideoSequence, CHANNELS};
use crate::error::{MipaeError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MIPAEVID";
pub const DATASET_VERSION: u32 = 1;
const TRACK_COLUMNS: usize = 10;

fn corrupt(detail: impl Into<String>) -> MipaeError {
    MipaeError::Corrupt { what: "dataset file", detail: detail.into() }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, at: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| MipaeError::Corrupt {
            what: self.what,
            detail: format!("truncated while reading {field} ({n} bytes at offset {})", self.at),
        })?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub(crate) fn position(&self) -> usize {
        self.at
    }
}

/// Verifies the trailing CRC-32 and returns the payload before it.
pub(crate) fn checked_payload<'a>(bytes: &'a [u8], what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(MipaeError::Corrupt { what, detail: "file shorter than its checksum".into() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(MipaeError::Corrupt {
            what,
            detail: format!("checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or damaged"),
        });
    }
    Ok(body)
}

pub(crate) fn check_header(r: &mut Reader<'_>, magic: &[u8; 8], expected: u32) -> Result<()> {
    let found_magic = r.take(8, "magic")?;
    if found_magic != magic {
        return Err(MipaeError::Corrupt {
            what: r.what,
            detail: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found_magic), String::from_utf8_lossy(magic)),
        });
    }
    let found = r.u32("version")?;
    if found != expected {
        return Err(MipaeError::Version { what: r.what, found, expected });
    }
    Ok(())
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let cfg_text = toml::to_string(&ds.config).map_err(|e| MipaeError::config(e.to_string()))?;
    let (len, size) = (ds.config.clip_len(), ds.config.frame_size);
    let mut out = Vec::with_capacity(64 + cfg_text.len() + ds.sequences.len() * len * size * size);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&(ds.sequences.len() as u64).to_le_bytes());
    for v in [len, size, size, CHANNELS, ds.config.num_objects] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &ds.sequences {
        out.extend_from_slice(&s.seed.to_le_bytes());
    }
    for s in &ds.sequences {
        if s.len != len || s.size != size || s.tracks.len() != ds.config.num_objects {
            return Err(MipaeError::Shape { op: "write_dataset", detail: format!("clip seed {} does not match config", s.seed) });
        }
        out.extend_from_slice(&s.frames);
    }
    let rows = ds.sequences.len() * ds.config.num_objects * len;
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    for (si, s) in ds.sequences.iter().enumerate() {
        for (oi, tr) in s.tracks.iter().enumerate() {
            for t in 0..len {
                let row = [
                    si as f64,
                    oi as f64,
                    t as f64,
                    tr.shape_id as f64,
                    tr.scale_id as f64,
                    tr.orient_id as f64,
                    tr.positions[t][0],
                    tr.positions[t][1],
                    tr.velocities[t][0],
                    tr.velocities[t][1],
                ];
                row.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    // Version is checked before the checksum so old files report the right error.
    let mut head = Reader::new(bytes, "dataset file");
    check_header(&mut head, DATASET_MAGIC, DATASET_VERSION)?;
    let body = checked_payload(bytes, "dataset file")?;
    let mut r = Reader::new(body, "dataset file");
    r.take(12, "header")?;
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?).map_err(|e| corrupt(format!("config is not UTF-8: {e}")))?;
    let config: DatasetConfig = toml::from_str(cfg_text).map_err(|e| corrupt(format!("config: {e}")))?;
    let n = r.u64("sequence count")? as usize;
    let len = r.u32("clip length")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let ch = r.u32("channels")? as usize;
    let objects = r.u32("objects")? as usize;
    if len != config.clip_len() || h != config.frame_size || w != h || ch != CHANNELS || objects != config.num_objects {
        return Err(corrupt(format!("raster header {len}x{h}x{w}x{ch} ({objects} objects) disagrees with config")));
    }
    let seeds: Vec<u64> = (0..n).map(|_| r.u64("seeds")).collect::<Result<_>>()?;
    let clip_bytes = len * h * w * ch;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        frames.push(r.take(clip_bytes, "frames")?.to_vec());
    }
    let rows = r.u64("track rows")? as usize;
    if rows != n * objects * len {
        return Err(corrupt(format!("expected {} track rows, found {rows}", n * objects * len)));
    }
    let mut tracks: Vec<Vec<FactorTrack>> = (0..n).map(|_| Vec::with_capacity(objects)).collect();
    for row in 0..rows {
        let mut col = [0f64; TRACK_COLUMNS];
        for c in col.iter_mut() {
            *c = r.f64("track table")?;
        }
        let (si, oi, t) = (row / (objects * len), (row / len) % objects, row % len);
        if col[0] as usize != si || col[1] as usize != oi || col[2] as usize != t {
            return Err(corrupt(format!("track row {row} is out of order")));
        }
        if t == 0 {
            tracks[si].push(FactorTrack {
                shape_id: col[3] as usize,
                scale_id: col[4] as usize,
                orient_id: col[5] as usize,
                positions: Vec::with_capacity(len),
                velocities: Vec::with_capacity(len),
            });
        }
        let tr = tracks[si].last_mut().unwrap();
        tr.positions.push([col[6], col[7]]);
        tr.velocities.push([col[8], col[9]]);
    }
    if r.position() != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.position())));
    }
    let sequences = frames
        .into_iter()
        .zip(tracks)
        .zip(seeds)
        .map(|((frames, tracks), seed)| VideoSequence { frames, len, size: h, tracks, seed })
        .collect();
    Ok(Dataset { config, sequences })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)?).map_err(|e| MipaeError::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MipaeError::io(path, e))?;
    decode_dataset(&bytes)
}
