//! IDX (MNIST-style) image and label files.
//!
//! Images: magic `0x00000803`, count, rows, cols (big-endian u32), then
//! `count·rows·cols` unsigned bytes. Labels: magic `0x00000801`, count,
//! then one byte per label.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{IdxError, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

/// Returns `(rows, cols, pixels)` with pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f32>>), IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let images = bytes[16..expected]
        .chunks(size.max(1))
        .take(count)
        .map(|px| px.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Loads a dataset of single-channel `rows × cols` images. The class count
/// is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_images(&fs::read(images_path)?)?;
    let labels = parse_labels(&fs::read(labels_path)?)?;
    if pixels.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: pixels.len(),
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let images = pixels
        .into_iter()
        .map(|px| Tensor::new(&[1, rows, cols], px))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, labels, classes)
}

/// Serializes images (each `rows·cols` bytes) in IDX form.
pub fn encode_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i * 25, 255, 0, i, 128, 7]).collect();
        let labels: Vec<u8> = (0..10u8).map(|i| i % 4).collect();
        (encode_images(2, 3, &images), encode_labels(&labels))
    }

    fn write(dir: &Path, imgs: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (a, b) = (dir.join("img.idx"), dir.join("lbl.idx"));
        fs::write(&a, imgs).unwrap();
        fs::write(&b, labels).unwrap();
        (a, b)
    }

    #[test]
    fn ten_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, labels) = fixture();
        let (a, b) = write(dir.path(), &imgs, &labels);
        let d = load_idx(a, b).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.classes, 4);
        assert_eq!(d.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
        assert_eq!(d.images[3].shape(), &[1, 2, 3]);
        assert_eq!(d.images[3].data(), &[75.0 / 255.0, 1.0, 0.0, 3.0 / 255.0, 128.0 / 255.0, 7.0 / 255.0]);
    }

    #[test]
    fn wrong_magic() {
        let (mut imgs, _) = fixture();
        imgs[3] = 0x01;
        assert!(matches!(
            parse_images(&imgs),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        let (_, labels) = fixture();
        assert!(matches!(parse_images(&labels), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, _) = fixture();
        let (a, b) = write(dir.path(), &imgs, &encode_labels(&[0; 9]));
        assert!(matches!(
            load_idx(a, b),
            Err(Error::Idx(IdxError::CountMismatch { images: 10, labels: 9 }))
        ));
    }

    #[test]
    fn truncation() {
        let (imgs, labels) = fixture();
        assert!(matches!(
            parse_images(&imgs[..imgs.len() - 1]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(parse_labels(&labels[..6]), Err(IdxError::Truncated { .. })));
    }
}
