//! IDX container reader (the MNIST / Fashion-MNIST distribution format).

use std::path::Path;

use ndarray::Array2;

use crate::data::{LabeledDataset, Provenance};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        let b = self
            .bytes
            .get(offset..offset + 4)
            .ok_or_else(|| self.err(offset, "truncated header"))?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Checks the magic and returns the dimension sizes and the payload offset.
    fn header(&self, magic: u32, ndims: usize) -> Result<(Vec<usize>, usize)> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(self.err(
                0,
                format!("wrong magic 0x{found:08x}, expected 0x{magic:08x}"),
            ));
        }
        let dims = (0..ndims)
            .map(|i| self.u32_at(4 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 4 + 4 * ndims;
        let expected: usize = dims.iter().product();
        let available = self.bytes.len() - start;
        if available < expected {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: {available} of {expected} bytes present"),
            ));
        }
        if available > expected {
            return Err(self.err(
                start + expected,
                format!("{} trailing bytes after payload", available - expected),
            ));
        }
        Ok((dims, start))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses in-memory IDX image and label files; `*_path` only labels errors.
pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<LabeledDataset> {
    let img = Reader {
        path: images_path,
        bytes: images,
    };
    let lab = Reader {
        path: labels_path,
        bytes: labels,
    };
    let (idims, istart) = img.header(IMAGES_MAGIC, 3)?;
    let (ldims, lstart) = lab.header(LABELS_MAGIC, 1)?;
    let (n, d) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(lab.err(4, format!("label count {} does not match image count {n}", ldims[0])));
    }
    if n == 0 {
        return Err(img.err(4, "file contains no images"));
    }
    let features = Array2::from_shape_fn((n, d), |(i, j)| f64::from(images[istart + i * d + j]) / 255.0);
    let labels: Vec<usize> = labels[lstart..].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(features, labels, class_count, Provenance::Custom)
}

/// Loads an IDX image / label pair, scaling pixels by 1/255 and flattening
/// each image row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    parse_idx(&read(ip)?, ip, &read(lp)?, lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend([0, 255, 128, 0, 1, 2, 254, 64]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    fn parse(i: &[u8], l: &[u8]) -> Result<LabeledDataset> {
        parse_idx(i, Path::new("img"), l, Path::new("lab"))
    }

    #[test]
    fn fixture_values() {
        let (i, l) = fixture();
        let d = parse(&i, &l).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.labels(), &[7, 3]);
        let f = d.features();
        assert_eq!(f[[0, 0]], 0.0);
        assert_eq!(f[[0, 1]], 1.0);
        // 128 / 255 = 0.50196078...
        assert_eq!(f[[0, 2]], 128.0 / 255.0);
        assert!((f[[0, 2]] - 0.501_960_784_313_725_5).abs() < 1e-15);
        assert_eq!(f[[1, 3]], 64.0 / 255.0);
    }

    #[test]
    fn distinct_errors() {
        let (i, l) = fixture();
        let mut bad = l.clone();
        bad[3] = 3;
        let e = parse(&i, &bad).unwrap_err().to_string();
        assert!(e.contains("wrong magic") && e.contains("offset 0"), "{e}");

        let e = parse(&i[..i.len() - 1], &l).unwrap_err().to_string();
        assert!(e.contains("truncated payload") && e.contains("offset 23"), "{e}");

        let e = parse(&i[..6], &l).unwrap_err().to_string();
        assert!(e.contains("truncated header"), "{e}");

        let mut short = l.clone();
        short[7] = 1;
        short.pop();
        let e = parse(&i, &short).unwrap_err().to_string();
        assert!(e.contains("does not match image count"), "{e}");
    }
}
