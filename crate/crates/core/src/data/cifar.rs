//! CIFAR binary format: each record is the label byte(s) followed by 3072
//! pixel bytes, as three 32×32 row-major planes in R, G, B order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Image, LabeledDataset, Result};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
pub const CIFAR10_RECORD_LEN: usize = 1 + PIXELS;
pub const CIFAR100_RECORD_LEN: usize = 2 + PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    /// CIFAR-100 with the 100 fine labels.
    Cifar100,
    /// CIFAR-100 with the 20 coarse labels.
    Cifar100Coarse,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR10_RECORD_LEN,
            _ => CIFAR100_RECORD_LEN,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
            CifarVariant::Cifar100Coarse => 20,
        }
    }
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<LabeledDataset> {
    let record = variant.record_len();
    if bytes.len() % record != 0 {
        return Err(DataError::TruncatedFile {
            len: bytes.len(),
            record,
        });
    }
    let num_classes = variant.num_classes();
    let mut images = Vec::with_capacity(bytes.len() / record);
    let mut labels = Vec::with_capacity(bytes.len() / record);
    for (index, rec) in bytes.chunks_exact(record).enumerate() {
        let (label, pixels) = match variant {
            CifarVariant::Cifar10 => (rec[0], &rec[1..]),
            CifarVariant::Cifar100 => (rec[1], &rec[2..]),
            CifarVariant::Cifar100Coarse => (rec[0], &rec[2..]),
        };
        let label = label as usize;
        if label >= num_classes {
            return Err(DataError::BadLabel {
                index,
                label,
                num_classes,
            });
        }
        let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Image::new(SIDE, SIDE, data)?);
        labels.push(label);
    }
    LabeledDataset::new(images, labels, num_classes)
}

pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cifar(&bytes, variant)
}

/// Serializes 32×32 images in the CIFAR layout. For CIFAR-100 the label is
/// written to both label bytes.
pub fn encode_cifar(ds: &LabeledDataset, variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        if img.height() != SIDE || img.width() != SIDE {
            return Err(DataError::Invalid(format!(
                "CIFAR records are 32x32, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        if label >= variant.num_classes() || label > u8::MAX as usize {
            return Err(DataError::BadLabel {
                index: out.len() / variant.record_len(),
                label,
                num_classes: variant.num_classes(),
            });
        }
        match variant {
            CifarVariant::Cifar10 => out.push(label as u8),
            _ => out.extend_from_slice(&[label as u8, label as u8]),
        }
        out.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn write_cifar(ds: &LabeledDataset, path: &Path, variant: CifarVariant) -> Result<()> {
    let bytes = encode_cifar(ds, variant)?;
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 0u32), (9u8, 100u32)] {
            bytes.push(label);
            for i in 0..PIXELS as u32 {
                bytes.push(((base + i * 7) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn parses_two_record_fixture_exactly() {
        let bytes = fixture();
        let ds = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        // record 1, green plane, row 2, col 5
        let i = 1024 + 2 * 32 + 5;
        assert_eq!(ds.images[1].get(1, 2, 5), ((100 + i * 7) % 256) as f32 / 255.0);
        assert_eq!(ds.images[0].get(0, 0, 0), 0.0);
        assert_eq!(ds.images[0].get(2, 31, 31), ((3071 * 7) % 256) as f32 / 255.0);
    }

    #[test]
    fn rejects_truncated_and_bad_labels() {
        let mut bytes = fixture();
        bytes.pop();
        assert!(matches!(
            parse_cifar(&bytes, CifarVariant::Cifar10),
            Err(DataError::TruncatedFile { record: 3073, .. })
        ));
        let mut bytes = fixture();
        bytes[CIFAR10_RECORD_LEN] = 10;
        assert!(matches!(
            parse_cifar(&bytes, CifarVariant::Cifar10),
            Err(DataError::BadLabel { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn cifar100_uses_fine_or_coarse_label() {
        let mut rec = vec![4u8, 57u8];
        rec.extend(std::iter::repeat(128u8).take(PIXELS));
        let fine = parse_cifar(&rec, CifarVariant::Cifar100).unwrap();
        assert_eq!(fine.labels, vec![57]);
        assert_eq!(fine.num_classes, 100);
        let coarse = parse_cifar(&rec, CifarVariant::Cifar100Coarse).unwrap();
        assert_eq!(coarse.labels, vec![4]);
        assert!(parse_cifar(&rec[..3073], CifarVariant::Cifar100).is_err());
    }

    #[test]
    fn write_then_load_is_byte_identical() {
        let bytes = fixture();
        let ds = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(encode_cifar(&ds, CifarVariant::Cifar10).unwrap(), bytes);
    }
}
