//! CIFAR-10 binary batch reader.
//!
//! Each record is one label byte followed by 3072 pixel bytes: the 32x32 red
//! plane, then green, then blue, each row-major.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
pub const CIFAR_RECORD_BYTES: usize = PIXELS + 1;

/// Decodes a whole batch file into `(label, 3x32x32 image in [0,1])` records.
pub fn parse_cifar10_batch(bytes: &[u8]) -> Result<Vec<(u8, Tensor)>> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::Parse {
            offset,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_BYTES} bytes",
                bytes.len() - offset
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Value { index, msg: format!("label byte {label} outside 0..=9") });
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok((label, Tensor::new(vec![3, SIDE, SIDE], data)?))
        })
        .collect()
}
