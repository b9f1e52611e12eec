//! `FZCP` parameter files.
//!
//! Layout (little-endian): magic `FZCP`, version u16, record count u32, then
//! per record: name length u16, name bytes, rank u8, rank x u32 extents and
//! the f32 payload. Extractor records are prefixed `fg.` or `bg.`; a file
//! with both is a joint classifier.

use super::{Classifier, ClassifierKind, ConvBlock, FeatureExtractor, FusionHead, LinearHead, Pool};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FZCP";
const VERSION: u16 = 1;
const BLOCK_FIELDS: [&str; 5] = ["conv", "bn_gamma", "bn_beta", "bn_mean", "bn_var"];

fn records(clf: &Classifier) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let prefixes: &[&str] = match clf.kind() {
        ClassifierKind::Foreground => &["fg"],
        ClassifierKind::Background => &["bg"],
        ClassifierKind::Joint => &["fg", "bg"],
    };
    for (prefix, e) in prefixes.iter().zip(clf.extractors()) {
        for (i, b) in e.blocks.iter().enumerate() {
            let tensors = [&b.conv, &b.gamma, &b.beta, &b.running_mean, &b.running_var];
            for (field, t) in BLOCK_FIELDS.iter().zip(tensors) {
                out.push((format!("{prefix}.block{i}.{field}"), t));
            }
        }
    }
    let (w, b) = clf.head_params();
    out.push(("head.weight".to_string(), w));
    out.push(("head.bias".to_string(), b));
    out
}

pub fn serialize_params(clf: &Classifier) -> Result<Vec<u8>> {
    let recs = records(clf);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in recs {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
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
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse { offset: self.pos, msg: format!("truncated {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn shape_error(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { offset, msg: msg.into() }
}

/// Rebuilds one extractor from its `prefix.blockN.*` records.
fn extractor_from(recs: &mut Vec<(String, Tensor, usize)>, prefix: &str) -> Result<Option<FeatureExtractor>> {
    let mut blocks = Vec::new();
    loop {
        let i = blocks.len();
        let mut fields = Vec::new();
        for field in BLOCK_FIELDS {
            let name = format!("{prefix}.block{i}.{field}");
            match recs.iter().position(|r| r.0 == name) {
                Some(p) => fields.push(recs.remove(p)),
                None => break,
            }
        }
        if fields.is_empty() {
            break;
        }
        if fields.len() != BLOCK_FIELDS.len() {
            let off = fields[0].2;
            return Err(shape_error(off, format!("{prefix}.block{i} is missing records")));
        }
        let mut it = fields.into_iter();
        let (_, conv, off) = it.next().expect("five fields");
        let s = conv.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] {
            return Err(shape_error(off, format!("{prefix}.block{i}.conv has shape {s:?}")));
        }
        let rest: Vec<(String, Tensor, usize)> = it.collect();
        for (name, t, off) in &rest {
            if t.shape() != [s[0]] {
                return Err(shape_error(*off, format!("{name} has shape {:?}, expected [{}]", t.shape(), s[0])));
            }
        }
        if let Some(prev) = blocks.last() {
            let prev: &ConvBlock = prev;
            if prev.out_channels() != s[1] {
                return Err(shape_error(off, format!("{prefix}.block{i}.conv input channels {} != {}", s[1], prev.out_channels())));
            }
        }
        let mut t = rest.into_iter().map(|r| r.1);
        blocks.push(ConvBlock {
            conv,
            gamma: t.next().expect("gamma"),
            beta: t.next().expect("beta"),
            running_mean: t.next().expect("mean"),
            running_var: t.next().expect("var"),
            pool: Pool::Window(2),
        });
    }
    if let Some(last) = blocks.last_mut() {
        last.pool = Pool::Global;
        Ok(Some(FeatureExtractor { blocks, frozen: false }))
    } else {
        Ok(None)
    }
}

/// Parses a checkpoint. The classifier kind and architecture come from the
/// record names and shapes; extractors come back unfrozen.
pub fn deserialize_params(bytes: &[u8]) -> Result<Classifier> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(shape_error(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(shape_error(4, format!("unsupported version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut recs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| shape_error(start + 2, "name is not utf-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_at = r.pos;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| shape_error(payload_at, "payload size overflow"))?, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| shape_error(start, format!("{name}: {e}")))?;
        if recs.iter().any(|(n, _, _): &(String, Tensor, usize)| *n == name) {
            return Err(shape_error(start, format!("duplicate record {name}")));
        }
        recs.push((name, t, start));
    }
    if r.pos != bytes.len() {
        return Err(shape_error(r.pos, "trailing bytes"));
    }
    let end = bytes.len();
    let fg = extractor_from(&mut recs, "fg")?;
    let bg = extractor_from(&mut recs, "bg")?;
    let mut take = |name: &str| -> Result<(Tensor, usize)> {
        let p = recs.iter().position(|r| r.0 == name).ok_or_else(|| shape_error(end, format!("missing {name}")))?;
        let (_, t, off) = recs.remove(p);
        Ok((t, off))
    };
    let (weight, w_off) = take("head.weight")?;
    let (bias, b_off) = take("head.bias")?;
    if let Some((name, _, off)) = recs.first() {
        return Err(shape_error(*off, format!("unexpected record {name}")));
    }
    let ws = weight.shape().to_vec();
    if ws.len() != 2 || bias.shape() != [ws[1]] {
        return Err(shape_error(b_off, format!("head weight {ws:?} and bias {:?} disagree", bias.shape())));
    }
    let clf = match (fg, bg) {
        (Some(fg), Some(bg)) => {
            let fg_dim = fg.output_dim();
            if ws[0] != fg_dim + bg.output_dim() {
                return Err(shape_error(w_off, format!("head has {} rows for {} + {} features", ws[0], fg_dim, bg.output_dim())));
            }
            Classifier::joint(fg, bg, FusionHead::from_parts(weight, bias, fg_dim)?)
        }
        (Some(e), None) => single(ClassifierKind::Foreground, e, weight, bias, w_off),
        (None, Some(e)) => single(ClassifierKind::Background, e, weight, bias, w_off),
        (None, None) => Err(shape_error(12, "no extractor records")),
    }?;
    Ok(clf)
}

fn single(kind: ClassifierKind, e: FeatureExtractor, weight: Tensor, bias: Tensor, w_off: usize) -> Result<Classifier> {
    if weight.shape()[0] != e.output_dim() {
        return Err(shape_error(w_off, format!("head has {} rows for {} features", weight.shape()[0], e.output_dim())));
    }
    Classifier::single(kind, e, LinearHead { weight, bias })
}

pub fn save_checkpoint(clf: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_params(clf)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_params(&bytes)
}
