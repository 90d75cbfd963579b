//! MNIST IDX container parsing, pixel normalization and train/validation
//! splitting.
//!
//! ```text
//! image file (idx3)                     label file (idx1)
//! bytes  0-3   magic 0x00000803         bytes 0-3  magic 0x00000801
//! bytes  4-7   count                    bytes 4-7  count
//! bytes  8-11  rows                     bytes 8..  count label bytes (0..=9)
//! bytes 12-15  cols
//! bytes 16..   count*rows*cols pixels
//! ```
//!
//! All header integers are big-endian u32. Files must be uncompressed and
//! exactly as long as their header says.

use thiserror::Error;

use crate::rng::{split_seed, Rng};
use crate::tensor::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const IMAGE_HEADER_LEN: usize = 16;
const LABEL_HEADER_LEN: usize = 8;
const MAX_LABEL: u8 = 9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("wrong magic number: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("trailing bytes after IDX payload: expected {expected} bytes, have {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("label {label} at index {index} is out of range 0..=9")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("validation count {requested} exceeds dataset size {available}")]
    ValidationTooLarge { requested: usize, available: usize },
    #[error("sample entry {index} lies outside [-1, 1]")]
    SampleOutOfRange { index: usize },
    #[error("header dimensions overflow the address space")]
    Overflow,
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major per image, `count * rows * cols` bytes.
    pub pixels: Vec<u8>,
}

impl RawIdxImages {
    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    /// Serialize back to IDX bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.pixels.len());
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for dim in [self.count, self.rows, self.cols] {
            out.extend_from_slice(&(dim as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Raw contents of an IDX label file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdxLabels {
    pub count: usize,
    pub labels: Vec<u8>,
}

impl RawIdxLabels {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + self.labels.len());
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.count as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: offset + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::WrongMagic { expected, found });
    }
    Ok(())
}

fn check_length(actual: usize, expected: usize) -> Result<(), IdxError> {
    if actual < expected {
        Err(IdxError::Truncated {
            needed: expected,
            actual,
        })
    } else if actual > expected {
        Err(IdxError::TrailingBytes { expected, actual })
    } else {
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawIdxImages, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;

    let payload = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or(IdxError::Overflow)?;
    let expected = IMAGE_HEADER_LEN
        .checked_add(payload)
        .ok_or(IdxError::Overflow)?;
    check_length(bytes.len(), expected)?;

    Ok(RawIdxImages {
        count,
        rows,
        cols,
        pixels: bytes[IMAGE_HEADER_LEN..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<RawIdxLabels, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_be_u32(bytes, 4)? as usize;
    let expected = LABEL_HEADER_LEN
        .checked_add(count)
        .ok_or(IdxError::Overflow)?;
    check_length(bytes.len(), expected)?;

    let labels = bytes[LABEL_HEADER_LEN..].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > MAX_LABEL) {
        return Err(IdxError::LabelOutOfRange { index, label });
    }
    Ok(RawIdxLabels { count, labels })
}

/// Maps a raw pixel intensity onto [-1, 1].
#[inline]
pub fn normalize_pixel(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

#[inline]
pub fn denormalize_pixel(x: f64) -> f64 {
    (x + 1.0) * 127.5
}

/// Normalized samples with their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<u8>,
}

impl Dataset {
    /// Builds a dataset, checking that every entry lies in [-1, 1] and every
    /// label is a digit.
    pub fn new(samples: Matrix, labels: Vec<u8>) -> Result<Self, IdxError> {
        if samples.rows() != labels.len() {
            return Err(IdxError::CountMismatch {
                images: samples.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > MAX_LABEL) {
            return Err(IdxError::LabelOutOfRange { index, label });
        }
        if let Some(index) = samples.data().iter().position(|x| !(-1.0..=1.0).contains(x)) {
            return Err(IdxError::SampleOutOfRange { index });
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Dataset made of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            samples: Matrix::from_vec(indices.len(), d, data).expect("row length is dim"),
            labels,
        }
    }

    /// First `n` samples (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

pub fn normalize(raw: &RawIdxImages, raw_labels: &RawIdxLabels) -> Result<Dataset, IdxError> {
    if raw.count != raw_labels.count {
        return Err(IdxError::CountMismatch {
            images: raw.count,
            labels: raw_labels.count,
        });
    }
    let data = raw.pixels.iter().map(|&p| normalize_pixel(p)).collect();
    let samples = Matrix::from_vec(raw.count, raw.pixels_per_image(), data)
        .expect("pixel buffer length checked by the parser");
    Dataset::new(samples, raw_labels.labels.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitSpec {
    pub validation_count: usize,
    pub shuffle_seed: Option<u64>,
}

/// Splits into `(train, validation)`. Without a seed the last
/// `validation_count` samples become the validation set; with a seed a
/// Fisher-Yates permutation is applied first.
pub fn split_train_validation(
    full: &Dataset,
    spec: SplitSpec,
) -> Result<(Dataset, Dataset), IdxError> {
    let n = full.len();
    if spec.validation_count > n {
        return Err(IdxError::ValidationTooLarge {
            requested: spec.validation_count,
            available: n,
        });
    }
    let order = match spec.shuffle_seed {
        None => (0..n).collect::<Vec<_>>(),
        Some(seed) => {
            let mut rng = Rng::new(split_seed(seed, 0));
            rng.permutation(n)
        }
    };
    let cut = n - spec.validation_count;
    Ok((full.select(&order[..cut]), full.select(&order[cut..])))
}

/// Label histogram, used to check that splits conserve the label multiset.
pub fn label_counts(labels: &[u8]) -> [usize; 10] {
    let mut counts = [0usize; 10];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn image_fixture() -> Vec<u8> {
        vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x01, // count
            0x00, 0x00, 0x00, 0x02, // rows
            0x00, 0x00, 0x00, 0x02, // cols
            0, 255, 51, 128,
        ]
    }

    #[test]
    fn parses_hand_built_image_file() {
        let bytes = image_fixture();
        assert_eq!(bytes.len(), 20);
        let raw = parse_idx_images(&bytes).unwrap();
        assert_eq!(
            raw,
            RawIdxImages {
                count: 1,
                rows: 2,
                cols: 2,
                pixels: vec![0, 255, 51, 128]
            }
        );
        assert_eq!(raw.to_bytes(), bytes);
    }

    #[test]
    fn empty_input_is_truncated() {
        assert!(matches!(parse_idx_images(&[]), Err(IdxError::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&[]), Err(IdxError::Truncated { .. })));
    }

    #[test]
    fn short_pixel_payload_is_truncated() {
        let mut bytes = image_fixture();
        bytes.pop();
        assert_eq!(
            parse_idx_images(&bytes),
            Err(IdxError::Truncated {
                needed: 20,
                actual: 19
            })
        );
    }

    #[test]
    fn extra_bytes_are_rejected() {
        let mut bytes = image_fixture();
        bytes.push(7);
        assert_eq!(
            parse_idx_images(&bytes),
            Err(IdxError::TrailingBytes {
                expected: 20,
                actual: 21
            })
        );
    }

    #[test]
    fn label_magic_is_not_an_image_file() {
        let labels = RawIdxLabels {
            count: 0,
            labels: vec![],
        }
        .to_bytes();
        assert_eq!(
            parse_idx_images(&labels),
            Err(IdxError::WrongMagic {
                expected: IMAGE_MAGIC,
                found: LABEL_MAGIC
            })
        );
    }

    #[test]
    fn parses_hand_built_label_file() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        let raw = parse_idx_labels(&bytes).unwrap();
        assert_eq!(
            raw,
            RawIdxLabels {
                count: 3,
                labels: vec![7, 0, 9]
            }
        );
        assert_eq!(raw.to_bytes(), bytes);
    }

    #[test]
    fn label_ten_is_out_of_range() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 2, 3, 10];
        assert_eq!(
            parse_idx_labels(&bytes),
            Err(IdxError::LabelOutOfRange { index: 1, label: 10 })
        );
    }

    #[test]
    fn empty_label_file() {
        let raw = parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(raw.count, 0);
        assert!(raw.labels.is_empty());
    }

    #[test]
    fn normalization_fixed_points() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(51), -0.6);
    }

    #[test]
    fn normalization_is_invertible_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for p in 0..=255u8 {
            let x = normalize_pixel(p);
            assert!((-1.0..=1.0).contains(&x));
            assert!(x > prev);
            prev = x;
            assert_eq!(denormalize_pixel(x).round(), f64::from(p));
        }
    }

    #[test]
    fn normalize_checks_counts() {
        let raw = parse_idx_images(&image_fixture()).unwrap();
        let labels = RawIdxLabels {
            count: 2,
            labels: vec![1, 2],
        };
        assert_eq!(
            normalize(&raw, &labels),
            Err(IdxError::CountMismatch {
                images: 1,
                labels: 2
            })
        );
        let ok = normalize(
            &raw,
            &RawIdxLabels {
                count: 1,
                labels: vec![4],
            },
        )
        .unwrap();
        assert_eq!(ok.sample(0), &[-1.0, 1.0, -0.6, normalize_pixel(128)]);
    }

    fn toy_dataset(n: usize) -> Dataset {
        let data = (0..n).map(|i| (i as f64) / (n as f64)).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(Matrix::from_vec(n, 1, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn unseeded_split_keeps_order() {
        let full = toy_dataset(12);
        let (train, valid) = split_train_validation(
            &full,
            SplitSpec {
                validation_count: 4,
                shuffle_seed: None,
            },
        )
        .unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(valid.len(), 4);
        assert_eq!(train.labels(), &full.labels()[..8]);
        assert_eq!(valid.labels(), &full.labels()[8..]);
    }

    #[test]
    fn zero_validation_is_identity() {
        let full = toy_dataset(5);
        let (train, valid) = split_train_validation(&full, SplitSpec::default()).unwrap();
        assert_eq!(train, full);
        assert!(valid.is_empty());
    }

    #[test]
    fn oversized_validation_fails() {
        let full = toy_dataset(3);
        let spec = SplitSpec {
            validation_count: 4,
            shuffle_seed: None,
        };
        assert_eq!(
            split_train_validation(&full, spec),
            Err(IdxError::ValidationTooLarge {
                requested: 4,
                available: 3
            })
        );
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let full = toy_dataset(50);
        let spec = SplitSpec {
            validation_count: 10,
            shuffle_seed: Some(99),
        };
        let a = split_train_validation(&full, spec).unwrap();
        let b = split_train_validation(&full, spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1.labels(), &full.labels()[40..]);
    }

    proptest! {
        #[test]
        fn image_round_trip(count in 0usize..5, rows in 0usize..4, cols in 0usize..4, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let pixels = (0..count * rows * cols).map(|_| (rng.next_u64() & 0xff) as u8).collect();
            let raw = RawIdxImages { count, rows, cols, pixels };
            let bytes = raw.to_bytes();
            let back = parse_idx_images(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, raw);
        }

        #[test]
        fn split_conserves_samples(n in 1usize..60, frac in 0.0f64..=1.0, seed in proptest::option::of(any::<u64>())) {
            let full = toy_dataset(n);
            let v = ((n as f64) * frac) as usize;
            let (train, valid) = split_train_validation(&full, SplitSpec { validation_count: v, shuffle_seed: seed }).unwrap();
            prop_assert_eq!(train.len() + valid.len(), n);
            prop_assert_eq!(valid.len(), v);
            let mut merged: Vec<u64> = train.samples().data().iter().chain(valid.samples().data()).map(|x| x.to_bits()).collect();
            let mut orig: Vec<u64> = full.samples().data().iter().map(|x| x.to_bits()).collect();
            merged.sort_unstable();
            orig.sort_unstable();
            prop_assert_eq!(merged, orig);
            let mut counts = label_counts(train.labels());
            for (c, extra) in counts.iter_mut().zip(label_counts(valid.labels())) {
                *c += extra;
            }
            prop_assert_eq!(counts, label_counts(full.labels()));
        }
    }
}
