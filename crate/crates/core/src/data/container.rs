//! `CFDS` dataset container.
//!
//! Layout (little-endian): magic `CFDS`, version u16, classes u16, height u16,
//! width u16, mode u8, sample count u32; then per sample label u16,
//! supercategory u16, context u16, bbox row/col/height/width as u16, and the
//! `3 x H x W` image as f32.

use super::{BBox, ContextMode, Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CFDS";
const VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 2 + 2 + 2 + 1 + 4;

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u16")))
}

pub fn write_container(ds: &Dataset) -> Result<Vec<u8>> {
    let m = &ds.meta;
    let per_sample = 14 + 4 * 3 * m.height * m.width;
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * per_sample);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [(m.num_classes, "class count"), (m.height, "height"), (m.width, "width")] {
        out.extend_from_slice(&u16_field(v, what)?.to_le_bytes());
    }
    out.push(m.mode.code());
    let count = u32::try_from(ds.len()).map_err(|_| Error::config("too many samples for a container"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in &ds.samples {
        if s.image.shape() != [3, m.height, m.width] {
            return Err(Error::dim(format!("sample image {:?} does not match header", s.image.shape())));
        }
        let fields = [
            (s.label, "label"),
            (s.supercategory_id, "supercategory"),
            (s.context_id, "context"),
            (s.bbox.row, "bbox row"),
            (s.bbox.col, "bbox col"),
            (s.bbox.height, "bbox height"),
            (s.bbox.width, "bbox width"),
        ];
        for (v, what) in fields {
            out.extend_from_slice(&u16_field(v, what)?.to_le_bytes());
        }
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Decodes a container. Normalization statistics are recomputed from the pixels.
pub fn read_container(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad magic, expected CFDS".into() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 4, msg: format!("unsupported version {version}") });
    }
    let classes = r.u16("class count")? as usize;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let mode_pos = r.pos;
    let mode_byte = r.take(1, "mode")?[0];
    let mode = ContextMode::from_code(mode_byte)
        .ok_or_else(|| Error::Parse { offset: mode_pos, msg: format!("unknown mode byte {mode_byte}") })?;
    let count_bytes = r.take(4, "sample count")?;
    let count = u32::from_le_bytes(count_bytes.try_into().expect("4 bytes")) as usize;
    if classes == 0 || height == 0 || width == 0 {
        return Err(Error::Parse { offset: 6, msg: "zero extent in header".into() });
    }
    let mut class_supercategory: Vec<Option<usize>> = vec![None; classes];
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let start = r.pos;
        let label = r.u16("label")? as usize;
        let supercategory_id = r.u16("supercategory")? as usize;
        let context_id = r.u16("context")? as usize;
        let bbox = BBox {
            row: r.u16("bbox")? as usize,
            col: r.u16("bbox")? as usize,
            height: r.u16("bbox")? as usize,
            width: r.u16("bbox")? as usize,
        };
        if label >= classes {
            return Err(Error::Parse { offset: start, msg: format!("label {label} >= class count {classes}") });
        }
        if !bbox.fits(height, width) {
            return Err(Error::Parse { offset: start + 6, msg: format!("bbox {bbox:?} outside {height}x{width}") });
        }
        let raw = r.take(4 * 3 * height * width, "image")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        class_supercategory[label].get_or_insert(supercategory_id);
        samples.push(Sample {
            image: Tensor::new(vec![3, height, width], data)?,
            label,
            bbox,
            context_id,
            supercategory_id,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, msg: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    let meta = DatasetMeta {
        num_classes: classes,
        class_supercategory: class_supercategory.iter().enumerate().map(|(c, s)| s.unwrap_or(c)).collect(),
        mode,
        height,
        width,
        mean: [0.0; 3],
        std: [1.0; 3],
    };
    let ds = Dataset { meta, samples };
    if ds.is_empty() {
        Ok(ds)
    } else {
        ds.with_own_stats()
    }
}

pub fn save_container(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = write_container(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    fn small() -> Dataset {
        let meta = DatasetMeta::synthetic(ContextMode::Similar, 4, 2, 16).unwrap();
        generate_synthetic_dataset(&meta, 3, 5).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ds = small();
        let bytes = write_container(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 12 * (14 + 4 * 3 * 16 * 16));
        let back = read_container(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(write_container(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = write_container(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(Error::Parse { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_container(truncated), Err(Error::Parse { .. })));
        let mut bad_mode = bytes.clone();
        bad_mode[12] = 7;
        assert!(matches!(read_container(&bad_mode), Err(Error::Parse { offset: 12, .. })));
    }
}
