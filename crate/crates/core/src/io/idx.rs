//! Two-class view of an IDX image/label file pair (the MNIST layout).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Dataset;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let word = |i: usize| {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format("IDX file", format!("{what} header is truncated")))
    };
    if word(0)? != magic {
        return Err(Error::format(
            "IDX file",
            format!("{what} file has the wrong magic number"),
        ));
    }
    (1..=dims).map(|i| word(i).map(|v| v as usize)).collect()
}

/// Decodes IDX images (`N×H×W` unsigned bytes) and labels, keeping the
/// samples whose label is `classes.0` (→ 0) or `classes.1` (→ 1). Pixels
/// are scaled to `[0, 1]`; samples are `1×H×W`.
pub fn decode_idx_pair(images: &[u8], labels: &[u8], classes: (u8, u8)) -> Result<Dataset<f32>> {
    let dims = header(images, IMAGES_MAGIC, 3, "image")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let label_count = header(labels, LABELS_MAGIC, 1, "label")?[0];
    if label_count != n {
        return Err(Error::format(
            "IDX file",
            format!("{n} images but {label_count} labels"),
        ));
    }
    let size = h * w;
    let pixels = &images[16..];
    let label_bytes = &labels[8..];
    if pixels.len() != n * size || label_bytes.len() != n {
        return Err(Error::format(
            "IDX file",
            "payload size does not match the header",
        ));
    }
    let mut data = Vec::new();
    let mut kept = Vec::new();
    for (i, &l) in label_bytes.iter().enumerate() {
        let class = if l == classes.0 {
            0
        } else if l == classes.1 {
            1
        } else {
            continue;
        };
        kept.push(class);
        data.extend(
            pixels[i * size..(i + 1) * size]
                .iter()
                .map(|&p| p as f32 / 255.0),
        );
    }
    Dataset::new(Tensor::new([kept.len(), 1, h, w], data)?, kept)
}

pub fn read_idx_pair(images: &Path, labels: &Path, classes: (u8, u8)) -> Result<Dataset<f32>> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode_idx_pair(&img, &lab, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files(labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let n = labels.len() as u32;
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        for d in [n, 2, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        for i in 0..labels.len() {
            img.extend([i as u8 * 10, 0, 255, 51]);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn filters_and_relabels() {
        let (img, lab) = files(&[3, 8, 1, 8, 3]);
        let d = decode_idx_pair(&img, &lab, (3, 8)).unwrap();
        assert_eq!(d.labels(), &[0, 1, 1, 0]);
        assert_eq!(d.sample_shape(), [1, 2, 2]);
        assert_eq!(&d.images().data()[..4], &[0.0, 0.0, 1.0, 0.2]);
        // third kept sample is source index 3
        assert_eq!(d.images().data()[8], 30.0 / 255.0);
    }

    #[test]
    fn inconsistent_files_are_rejected() {
        let (img, lab) = files(&[1, 2]);
        assert!(decode_idx_pair(&img[..20], &lab, (1, 2)).is_err());
        assert!(decode_idx_pair(&lab, &img, (1, 2)).is_err());
        let (_, short) = files(&[1]);
        assert!(decode_idx_pair(&img, &short, (1, 2)).is_err());
    }
}
