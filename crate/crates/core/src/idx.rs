//! Reader for the IDX image/label format used by MNIST.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, Sample};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            field,
            reason: format!("file truncated before byte {}", offset + 4),
        })
}

/// Decodes an image file and a label file already in memory. Pixels are
/// scaled to `[0, 1]` by dividing by 255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images magic",
            reason: format!("expected 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}"),
        });
    }
    let count = read_u32(images, 4, "images count")? as usize;
    let rows = read_u32(images, 8, "images rows")? as usize;
    let cols = read_u32(images, 12, "images cols")? as usize;

    let magic = read_u32(labels, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels magic",
            reason: format!("expected 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}"),
        });
    }
    let label_count = read_u32(labels, 4, "labels count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            field: "labels count",
            reason: format!("{label_count} labels for {count} images"),
        });
    }

    let pixels = rows * cols;
    let image_body = &images[16..];
    if image_body.len() < count * pixels {
        return Err(Error::Format {
            field: "images data",
            reason: format!(
                "expected {} pixel bytes, got {}",
                count * pixels,
                image_body.len()
            ),
        });
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(Error::Format {
            field: "labels data",
            reason: format!("expected {count} label bytes, got {}", label_body.len()),
        });
    }

    let n_classes = label_body[..count]
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let samples = image_body
        .chunks_exact(pixels.max(1))
        .take(count)
        .zip(&label_body[..count])
        .map(|(img, &label)| Sample {
            features: img.iter().map(|&p| p as f64 / 255.0).collect(),
            label: label as usize,
        })
        .collect();
    Dataset::new(samples, pixels, n_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 128, 1, 7, 200, 64, 33]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 1];
        (images, labels)
    }

    #[test]
    fn decodes_hand_built_fixture() {
        let (images, labels) = fixture();
        let d = parse_idx(&images, &labels).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.n_features(), 4);
        assert_eq!(
            d.samples()[0].features,
            vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0]
        );
        assert_eq!(
            d.samples()[1].features,
            vec![7.0 / 255.0, 200.0 / 255.0, 64.0 / 255.0, 33.0 / 255.0]
        );
        assert_eq!(d.samples()[0].label, 3);
        assert_eq!(d.samples()[1].label, 1);
    }

    #[test]
    fn rejects_wrong_label_magic() {
        let (images, mut labels) = fixture();
        labels[3] = 3;
        let err = parse_idx(&images, &labels).unwrap_err();
        assert!(err.to_string().contains("labels magic"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_count_mismatch() {
        let (images, labels) = fixture();
        let err = parse_idx(&images[..20], &labels).unwrap_err();
        assert!(err.to_string().contains("images data"), "{err}");
        let err = parse_idx(&images[..6], &labels).unwrap_err();
        assert!(err.to_string().contains("images count"), "{err}");
        let mut short = labels.clone();
        short[7] = 1;
        let err = parse_idx(&images, &short).unwrap_err();
        assert!(err.to_string().contains("labels count"), "{err}");
    }
}
