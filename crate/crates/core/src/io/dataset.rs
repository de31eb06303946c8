//! `FDS1` dataset files, little-endian:
//!
//! ```text
//! "FDS1" | N u32 | C u32 | H u32 | W u32 | labels u8 × N | f32 × N·C·H·W
//! ```

use std::path::Path;

use super::checkpoint::Reader;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::train::Dataset;

pub const DATASET_MAGIC: &[u8; 4] = b"FDS1";

pub fn encode_dataset(data: &Dataset<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = data.sample_shape();
    let mut out = Vec::with_capacity(20 + data.len() * (1 + 4 * c * h * w));
    out.extend_from_slice(DATASET_MAGIC);
    for d in [data.len(), c, h, w] {
        let d =
            u32::try_from(d).map_err(|_| Error::Data(format!("extent {d} does not fit u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &l in data.labels() {
        if l > 1 {
            return Err(Error::Data(format!("label {l} is not 0 or 1")));
        }
        out.push(l as u8);
    }
    for v in data.images().data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let malformed = |reason: String| Error::format("dataset", reason);
    if r.take(4).ok() != Some(DATASET_MAGIC.as_slice()) {
        return Err(malformed("missing FDS1 magic".into()));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32().map_err(|_| malformed("truncated header".into()))? as usize;
    }
    let [n, c, h, w] = dims;
    let expected = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(n + 20))
        .ok_or_else(|| malformed(format!("header {n}×{c}×{h}×{w} overflows")))?;
    if expected != bytes.len() {
        return Err(malformed(format!(
            "header {n}×{c}×{h}×{w} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let labels: Vec<usize> = r.take(n)?.iter().map(|&l| l as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l > 1) {
        return Err(malformed(format!(
            "label {} of sample {pos} is not 0 or 1",
            labels[pos]
        )));
    }
    let values = r.values::<f32>(n * c * h * w)?;
    Dataset::new(Tensor::new([n, c, h, w], values)?, labels)
}

pub fn write_dataset(path: &Path, data: &Dataset<f32>) -> Result<()> {
    write_atomic(path, &encode_dataset(data)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset<f32> {
        let images = Tensor::new(
            [3, 2, 1, 2],
            (0..12).map(|v| v as f32 * 0.5 - 1.0).collect(),
        )
        .unwrap();
        Dataset::new(images, vec![0, 1, 1]).unwrap()
    }

    #[test]
    fn round_trip() {
        let d = small();
        let bytes = encode_dataset(&d).unwrap();
        assert_eq!(&bytes[..4], b"FDS1");
        assert_eq!(bytes.len(), 20 + 3 + 12 * 4);
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn malformed_files_are_typed_errors() {
        let bytes = encode_dataset(&small()).unwrap();
        for cut in [0, 2, 10, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })),
                "{cut}"
            );
        }
        let mut bad_label = bytes.clone();
        bad_label[21] = 5;
        assert!(matches!(
            decode_dataset(&bad_label),
            Err(Error::Format { .. })
        ));
        let mut huge = bytes;
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_dataset(&huge).is_err());
    }

    #[test]
    fn labels_outside_two_classes_are_not_written() {
        let d = Dataset::new(Tensor::<f32>::zeros([1, 1, 1, 1]), vec![2]).unwrap();
        assert!(encode_dataset(&d).is_err());
    }
}
