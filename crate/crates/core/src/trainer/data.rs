//! Binary image datasets: IDX (MNIST) files and a procedural stand-in.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::RealArray;
use crate::error::{Result, TvoError};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_TRAIN: usize = 50_000;
pub const MNIST_VALID: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: RealArray,
    pub valid: Option<RealArray>,
    pub test: RealArray,
}

impl Dataset {
    pub fn data_dim(&self) -> usize {
        self.train.cols()
    }
}

/// Raw IDX image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| TvoError::Format { offset: offset as u64, detail: "truncated header".into() })
}

fn check_magic(bytes: &[u8], expect: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expect {
        return Err(TvoError::Format { offset: 0, detail: format!("magic 0x{magic:08x}, expected 0x{expect:08x}") });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(TvoError::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated image data: header promises {need} bytes, file has {}", bytes.len()),
        });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..need].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(TvoError::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated label data: header promises {need} bytes, file has {}", bytes.len()),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Rows `start..end` of an image tensor thresholded at `threshold` (intensity in `[0, 1]`).
pub fn binarize(images: &IdxImages, start: usize, end: usize, threshold: f64) -> Result<RealArray> {
    let d = images.rows * images.cols;
    let data = images.pixels[start * d..end * d]
        .iter()
        .map(|&p| if p as f64 / 255.0 > threshold { 1.0 } else { 0.0 })
        .collect();
    RealArray::matrix(end - start, d, data)
}

/// Loads the four standard MNIST files from `dir`. The training file is
/// split into the first 50k (train) and the next 10k (validation); the test
/// file is the test set. `limit` keeps a prefix of the training split.
pub fn load_mnist(dir: &Path, threshold: f64, limit: Option<usize>) -> Result<Dataset> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| TvoError::io_at(&path, e))
    };
    let train_images = parse_idx_images(&read("train-images-idx3-ubyte")?)?;
    let train_labels = parse_idx_labels(&read("train-labels-idx1-ubyte")?)?;
    let test_images = parse_idx_images(&read("t10k-images-idx3-ubyte")?)?;
    let test_labels = parse_idx_labels(&read("t10k-labels-idx1-ubyte")?)?;
    if train_labels.len() != train_images.count || test_labels.len() != test_images.count {
        return Err(TvoError::Format { offset: 4, detail: "image and label counts differ".into() });
    }
    split_mnist(&train_images, &test_images, threshold, limit)
}

pub fn split_mnist(train: &IdxImages, test: &IdxImages, threshold: f64, limit: Option<usize>) -> Result<Dataset> {
    let n_train = train.count.min(MNIST_TRAIN);
    let n_valid = (train.count - n_train).min(MNIST_VALID);
    if n_train == 0 || test.count == 0 {
        return Err(TvoError::Format { offset: 4, detail: "empty image file".into() });
    }
    let keep = limit.map_or(n_train, |l| l.min(n_train));
    let valid = (n_valid > 0).then(|| binarize(train, n_train, n_train + n_valid, threshold)).transpose()?;
    Ok(Dataset {
        train: binarize(train, 0, keep, threshold)?,
        valid,
        test: binarize(test, 0, test.count, threshold)?,
    })
}

/// Side length of the procedural digits.
pub const DESK_SIDE: usize = 14;

// segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom
const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// `n` binary 14×14 seven-segment digits with random class, shift, glyph
/// size, stroke width and 2% pixel noise. Deterministic in `seed`.
pub fn desk_digits(n: usize, seed: u64) -> RealArray {
    let mut r = rng::rng(seed);
    let s = DESK_SIDE;
    let mut data = vec![0.0; n * s * s];
    for img in data.chunks_mut(s * s) {
        let digit = r.random_range(0..10);
        let w = r.random_range(5..=7usize);
        let h = r.random_range(9..=11usize);
        let thick = r.random_range(1..=2usize);
        let x0 = r.random_range(1..=s - w - 1);
        let y0 = r.random_range(1..=s - h - 1);
        let mid = y0 + h / 2;
        let (top, bot, left, right) = (y0, y0 + h - 1, x0, x0 + w - 1);
        let mut fill = |ya: usize, yb: usize, xa: usize, xb: usize| {
            for y in ya..=yb.min(s - 1) {
                for x in xa..=xb.min(s - 1) {
                    img[y * s + x] = 1.0;
                }
            }
        };
        let seg = DIGIT_SEGMENTS[digit];
        let t = thick - 1;
        if seg[0] {
            fill(top, top + t, left, right);
        }
        if seg[1] {
            fill(top, mid, left, left + t);
        }
        if seg[2] {
            fill(top, mid, right - t, right);
        }
        if seg[3] {
            fill(mid, mid + t, left, right);
        }
        if seg[4] {
            fill(mid, bot, left, left + t);
        }
        if seg[5] {
            fill(mid, bot, right - t, right);
        }
        if seg[6] {
            fill(bot - t, bot, left, right);
        }
        for p in img.iter_mut() {
            if r.random::<f64>() < 0.02 {
                *p = 1.0 - *p;
            }
        }
    }
    RealArray::matrix(n, s * s, data).expect("non-empty")
}

/// Procedural train/test split: `train` and `test` items from disjoint streams.
pub fn desk_dataset(train: usize, test: usize, seed: u64) -> Dataset {
    Dataset {
        train: desk_digits(train, rng::derive_seed(seed, 0)),
        valid: None,
        test: desk_digits(test, rng::derive_seed(seed, 1)),
    }
}

/// Rows `indices` of `x`.
pub fn select_rows(x: &RealArray, indices: &[usize]) -> RealArray {
    let mut data = Vec::with_capacity(indices.len() * x.cols());
    for &i in indices {
        data.extend_from_slice(x.row(i));
    }
    RealArray::matrix(indices.len(), x.cols(), data).expect("non-empty selection")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(count: u32, side: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, side, side] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..(count * side * side) as usize).map(fill));
        b
    }

    #[test]
    fn parses_and_binarizes() {
        let bytes = idx_images(3, 2, |i| (i * 40 % 256) as u8);
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (3, 2, 2));
        let x = binarize(&imgs, 0, 3, 0.5).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(x.row(1), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = idx_images(2, 2, |_| 0);
        assert!(parse_idx_labels(&bytes).is_err());
        bytes.truncate(bytes.len() - 1);
        match parse_idx_images(&bytes) {
            Err(TvoError::Format { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(2u32.to_be_bytes());
        labels.extend([3u8, 7]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 7]);
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(TvoError::Format { offset: 0, .. })));
    }

    #[test]
    fn limit_takes_prefix() {
        let train = parse_idx_images(&idx_images(10, 2, |i| (i % 256) as u8)).unwrap();
        let test = parse_idx_images(&idx_images(4, 2, |_| 255)).unwrap();
        let ds = split_mnist(&train, &test, 0.5, Some(3)).unwrap();
        assert_eq!(ds.train.rows(), 3);
        assert_eq!(ds.test.rows(), 4);
        let full = split_mnist(&train, &test, 0.5, None).unwrap();
        assert_eq!(&full.train.data()[..12], ds.train.data());
    }

    #[test]
    fn desk_digits_are_binary_and_deterministic() {
        let a = desk_digits(50, 3);
        let b = desk_digits(50, 3);
        assert_eq!(a, b);
        assert_eq!(a.cols(), 196);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let on = a.data().iter().sum::<f64>() / a.len() as f64;
        assert!(on > 0.1 && on < 0.4, "{on}");
    }
}
