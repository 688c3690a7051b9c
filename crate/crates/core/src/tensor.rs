//! Dense latent tensors, binary masks, and the `PNPL` binary latent format.
//!
//! A [`LatentTensor`] is a `[channels, height, width]` array of `f32` in
//! row-major order. A [`BinaryMask`] is an `H×W` boolean grid that gates a
//! tensor spatially; the same bit applies to every channel.
//!
//! `PNPL` layout (all little-endian):
//!
//! | bytes | content                  |
//! |-------|--------------------------|
//! | 4     | magic `b"PNPL"`          |
//! | 2     | version `u16 = 1`        |
//! | 12    | channels, height, width as `u32` |
//! | 4·n   | `f32` payload            |

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PNPL_MAGIC: &[u8; 4] = b"PNPL";
pub const PNPL_VERSION: u16 = 1;
pub const PNPL_HEADER_LEN: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(shape.numel() > 0, "tensor dimensions must be positive");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(Error::Parameter(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.numel() {
            return Err(Error::dims(
                format!("{shape} ({} elements)", shape.numel()),
                format!("{} values", data.len()),
            ));
        }
        let t = Self { shape, data };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.shape.height + h) * self.shape.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f32) {
        let idx = (c * self.shape.height + h) * self.shape.width + w;
        self.data[idx] = value;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn ensure_mask_fits(&self, mask: &BinaryMask) -> Result<()> {
        if self.shape.spatial() != mask.shape() {
            return Err(Error::dims(
                format!("tensor {}", self.shape),
                format!("mask {}x{}", mask.height(), mask.width()),
            ));
        }
        Ok(())
    }

    /// `out[c,h,w] = t[c,h,w]` where the mask is set, `0` elsewhere.
    pub fn hadamard(&self, mask: &BinaryMask) -> Result<LatentTensor> {
        self.ensure_mask_fits(mask)?;
        let plane = self.shape.plane();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.bits[i % plane] { v } else { 0.0 })
            .collect();
        Ok(Self::from_vec_unchecked(self.shape, data))
    }

    /// Elementwise `a·t1 + b·t2`.
    pub fn lincomb(a: f32, t1: &LatentTensor, b: f32, t2: &LatentTensor) -> Result<LatentTensor> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Parameter(format!(
                "lincomb coefficients must be finite (a={a}, b={b})"
            )));
        }
        t1.ensure_same_shape(t2)?;
        let data = t1
            .data
            .iter()
            .zip(&t2.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        let out = Self::from_vec_unchecked(t1.shape, data);
        out.check_finite("lincomb")?;
        Ok(out)
    }

    pub fn scale(&self, k: f32) -> Result<LatentTensor> {
        let out = Self::from_vec_unchecked(self.shape, self.data.iter().map(|v| v * k).collect());
        out.check_finite("scale")?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f32> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Largest absolute difference over pixels where `mask` is set.
    pub fn max_abs_diff_masked(&self, other: &LatentTensor, mask: &BinaryMask) -> Result<f32> {
        self.ensure_same_shape(other)?;
        self.ensure_mask_fits(mask)?;
        let plane = self.shape.plane();
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .enumerate()
            .filter(|(i, _)| mask.bits[i % plane])
            .map(|(_, (a, b))| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(PNPL_HEADER_LEN + 4 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(PNPL_MAGIC)?;
        w.write_all(&PNPL_VERSION.to_le_bytes())?;
        for dim in [self.shape.channels, self.shape.height, self.shape.width] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LatentTensor> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after PNPL payload",
                cursor.len()
            )));
        }
        Ok(t)
    }

    /// Reads one PNPL block, leaving the reader positioned after it.
    pub fn read_from<R: Read>(r: &mut R) -> Result<LatentTensor> {
        let mut header = [0u8; PNPL_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated PNPL header".into()))?;
        if &header[0..4] != PNPL_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"PNPL\"",
                String::from_utf8_lossy(&header[0..4])
            )));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != PNPL_VERSION {
            return Err(Error::Format(format!(
                "unsupported PNPL version {version}, expected {PNPL_VERSION}"
            )));
        }
        let dim = |i: usize| u32::from_le_bytes(header[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        let shape = Shape::new(dim(0) as usize, dim(1) as usize, dim(2) as usize);
        if shape.numel() == 0 {
            return Err(Error::Format(format!("zero-sized PNPL tensor {shape}")));
        }
        let mut payload = vec![0u8; 4 * shape.numel()];
        r.read_exact(&mut payload).map_err(|_| {
            Error::Format(format!("truncated PNPL payload for tensor {shape}"))
        })?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        LatentTensor::from_vec(shape, data).map_err(|e| match e {
            Error::Numeric(msg) => Error::Format(msg),
            other => other,
        })
    }

    /// SHA-256 of the serialized tensor, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LatentTensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_latent(t: &LatentTensor, path: impl AsRef<Path>) -> Result<()> {
    t.save(path)
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    LatentTensor::load(path)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::dims(
                format!("{height}x{width}"),
                format!("{} bits", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from rows of 0/1 values; handy in tests.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Parameter("ragged mask rows".into()));
        }
        let bits = rows.iter().flat_map(|r| r.iter().map(|&b| b != 0)).collect();
        Self::from_bits(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: bool) {
        self.bits[h * self.width + w] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn ensure_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                format!("mask {}x{}", self.height, self.width),
                format!("mask {}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.ensure_same_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// First pixel `(row, col)` set in both masks.
    pub fn first_overlap(&self, other: &BinaryMask) -> Option<(usize, usize)> {
        self.bits
            .iter()
            .zip(&other.bits)
            .position(|(&a, &b)| a && b)
            .map(|i| (i / self.width, i % self.width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(h: usize, w: usize, v: &[f32]) -> LatentTensor {
        LatentTensor::from_vec(Shape::new(1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_matches_per_element_loop() {
        let t = t1(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m = BinaryMask::from_rows(&[&[1, 0], &[0, 1]]).unwrap();
        let out = t.hadamard(&m).unwrap();
        let mut expect = [0.0f32; 4];
        for h in 0..2 {
            for w in 0..2 {
                if m.get(h, w) {
                    expect[h * 2 + w] = t.get(0, h, w);
                }
            }
        }
        assert_eq!(out.data(), &expect[..]);
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn hadamard_identity_and_annihilator() {
        let t = LatentTensor::from_vec(Shape::new(2, 2, 3), (0..12).map(|i| i as f32 - 5.5).collect())
            .unwrap();
        assert_eq!(t.hadamard(&BinaryMask::new(2, 3, true)).unwrap(), t);
        let z = t.hadamard(&BinaryMask::new(2, 3, false)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_shape_mismatch_names_both_shapes() {
        let t = LatentTensor::zeros(Shape::new(3, 4, 4));
        let err = t.hadamard(&BinaryMask::new(4, 5, true)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x4x4") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn lincomb_cases() {
        let a = t1(1, 1, &[3.0]);
        let b = t1(1, 1, &[1.0]);
        assert_eq!(LatentTensor::lincomb(2.0, &a, -1.0, &b).unwrap().data(), &[5.0]);
        assert_eq!(LatentTensor::lincomb(1.0, &a, 0.0, &b).unwrap(), a);
        assert_eq!(LatentTensor::lincomb(0.5, &a, 0.5, &a).unwrap(), a);
        assert!(matches!(
            LatentTensor::lincomb(1.0, &a, 1.0, &LatentTensor::zeros(Shape::new(1, 1, 2))),
            Err(Error::Dimension { .. })
        ));
        assert!(LatentTensor::lincomb(f32::NAN, &a, 1.0, &b).is_err());
    }

    #[test]
    fn lincomb_overflow_is_numeric_error() {
        let a = t1(1, 1, &[f32::MAX]);
        assert!(matches!(
            LatentTensor::lincomb(2.0, &a, 0.0, &a),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn pnpl_byte_count_for_scalar() {
        let t = LatentTensor::zeros(Shape::new(1, 1, 1));
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 4 + 2 + 12 + 4);
        assert_eq!(&bytes[0..4], b"PNPL");
        assert_eq!(&bytes[4..6], &[1, 0]);
    }

    #[test]
    fn pnpl_rejects_bad_input() {
        let mut bytes = LatentTensor::zeros(Shape::new(1, 2, 2)).to_bytes();
        let good = bytes.clone();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(LatentTensor::from_bytes(&bytes), Err(Error::Format(_))));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(LatentTensor::from_bytes(&v2), Err(Error::Format(_))));

        assert!(matches!(
            LatentTensor::from_bytes(&good[..good.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(LatentTensor::from_bytes(&good[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn pnpl_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pnpl");
        let t = LatentTensor::from_vec(Shape::new(2, 1, 2), vec![-0.0, 1e-40, 3.5, -7.25]).unwrap();
        save_latent(&t, &path).unwrap();
        let back = load_latent(&path).unwrap();
        let bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
        assert!(matches!(load_latent(dir.path().join("missing.pnpl")), Err(Error::NotFound(_))));
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        any::<u32>()
            .prop_map(f32::from_bits)
            .prop_filter("finite", |v| v.is_finite())
    }

    proptest! {
        #[test]
        fn pnpl_round_trip_is_bit_exact(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in proptest::collection::vec(finite_f32(), 64)
        ) {
            let shape = Shape::new(c, h, w);
            let data: Vec<f32> = (0..shape.numel()).map(|i| seed[i % seed.len()]).collect();
            let t = LatentTensor::from_vec(shape, data).unwrap();
            let back = LatentTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), shape);
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn disjoint_hadamards_sum_to_union(
            vals in proptest::collection::vec(-100.0f32..100.0, 2 * 3 * 4),
            labels in proptest::collection::vec(0u8..3, 12),
        ) {
            let t = LatentTensor::from_vec(Shape::new(2, 3, 4), vals).unwrap();
            let m1 = BinaryMask::from_bits(3, 4, labels.iter().map(|&l| l == 1).collect()).unwrap();
            let m2 = BinaryMask::from_bits(3, 4, labels.iter().map(|&l| l == 2).collect()).unwrap();
            let sum = LatentTensor::lincomb(1.0, &t.hadamard(&m1).unwrap(), 1.0, &t.hadamard(&m2).unwrap()).unwrap();
            let joined = t.hadamard(&m1.union(&m2).unwrap()).unwrap();
            prop_assert_eq!(sum, joined);
        }
    }
}
