//! Object/background masks and the expanded rectangle used for dilution.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::BinaryMask;

pub const DEFAULT_ME_MARGIN: usize = 8;

/// `M_1..M_n` plus the background `M_B`; together they partition the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    objects: Vec<BinaryMask>,
    background: BinaryMask,
}

impl MaskSet {
    /// Derives `M_B` as the complement of the objects' union.
    pub fn from_objects(objects: Vec<BinaryMask>) -> Result<Self> {
        let background = derive_background(&objects)?;
        Ok(Self { objects, background })
    }

    /// Uses a supplied background, checking that it completes the partition.
    pub fn with_background(objects: Vec<BinaryMask>, background: BinaryMask) -> Result<Self> {
        let derived = derive_background(&objects)?;
        if background.shape() != derived.shape() {
            return Err(Error::Validation(format!(
                "background mask is {}x{}, object masks are {}x{}",
                background.height(),
                background.width(),
                derived.height(),
                derived.width()
            )));
        }
        for h in 0..derived.height() {
            for w in 0..derived.width() {
                if background.get(h, w) != derived.get(h, w) {
                    let why = if background.get(h, w) { "overlaps an object" } else { "is uncovered" };
                    return Err(Error::Validation(format!(
                        "background mask does not partition the image: pixel ({h}, {w}) {why}"
                    )));
                }
            }
        }
        Ok(Self { objects, background })
    }

    pub fn n(&self) -> usize {
        self.objects.len()
    }

    pub fn objects(&self) -> &[BinaryMask] {
        &self.objects
    }

    pub fn object(&self, i: usize) -> &BinaryMask {
        &self.objects[i]
    }

    pub fn background(&self) -> &BinaryMask {
        &self.background
    }

    pub fn shape(&self) -> (usize, usize) {
        self.background.shape()
    }

    /// `M_E` for every object.
    pub fn expanded(&self, margin: usize) -> Result<Vec<BinaryMask>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, m)| expand_to_rect(m, margin).map_err(|e| e.with_role(format!("mask_{}", i + 1))))
            .collect()
    }

    /// Drops object `i`, folding its pixels into the background.
    pub fn without(&self, i: usize) -> Result<Self> {
        if i >= self.n() || self.n() == 1 {
            return Err(Error::Parameter(format!("cannot remove object {i} of {}", self.n())));
        }
        let mut objects = self.objects.clone();
        objects.remove(i);
        Self::from_objects(objects)
    }
}

pub fn derive_background(objects: &[BinaryMask]) -> Result<BinaryMask> {
    let first = objects
        .first()
        .ok_or_else(|| Error::Validation("at least one object mask is required".into()))?;
    let mut union = BinaryMask::new(first.height(), first.width(), false);
    for (i, m) in objects.iter().enumerate() {
        if m.shape() != union.shape() {
            return Err(Error::Validation(format!(
                "mask {} is {}x{}, expected {}x{}",
                i + 1,
                m.height(),
                m.width(),
                union.height(),
                union.width()
            )));
        }
        if let Some((h, w)) = union.first_overlap(m) {
            return Err(Error::Validation(format!(
                "object mask {} overlaps an earlier mask at pixel ({h}, {w})",
                i + 1
            )));
        }
        union = union.union(m)?;
    }
    Ok(union.complement())
}

/// Filled bounding rectangle of `m`, grown by `margin` on each side and clipped.
pub fn expand_to_rect(m: &BinaryMask, margin: usize) -> Result<BinaryMask> {
    let (height, width) = m.shape();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for h in 0..height {
        for w in 0..width {
            if m.get(h, w) {
                bounds = Some(match bounds {
                    None => (h, h, w, w),
                    Some((r0, r1, c0, c1)) => (r0.min(h), r1.max(h), c0.min(w), c1.max(w)),
                });
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or_else(|| Error::Validation("cannot expand an empty mask".into()))?;
    let r0 = r0.saturating_sub(margin);
    let c0 = c0.saturating_sub(margin);
    let r1 = r1.saturating_add(margin).min(height - 1);
    let c1 = c1.saturating_add(margin).min(width - 1);
    let mut out = BinaryMask::new(height, width, false);
    for h in r0..=r1 {
        for w in c0..=c1 {
            out.set(h, w, true);
        }
    }
    Ok(out)
}

pub fn mask_to_pgm(m: &BinaryMask) -> Vec<u8> {
    let mut bytes = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    bytes.extend(m.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    bytes
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM {what}: {:?}", String::from_utf8_lossy(tok))))
}

pub fn mask_from_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let mut pos = 0;
    let magic = pgm_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "expected binary PGM (P5), found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = pgm_number(bytes, &mut pos, "width")?;
    let height = pgm_number(bytes, &mut pos, "height")?;
    let maxval = pgm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval must be 255, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {}x{}",
            raster.len(),
            width,
            height
        )));
    }
    let mut bits = Vec::with_capacity(raster.len());
    for (i, &v) in raster.iter().enumerate() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(Error::Format(format!(
                    "mask pixel ({}, {}) has value {other}; only 0 and 255 are allowed",
                    i / width,
                    i % width
                )))
            }
        }
    }
    BinaryMask::from_bits(height, width, bits)
}

pub fn save_mask_pgm(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mask_to_pgm(m)).map_err(|e| Error::io(path, e))
}

pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect_oracle(m: &BinaryMask, margin: usize) -> Vec<bool> {
        let (hh, ww) = m.shape();
        let hits: Vec<(usize, usize)> =
            (0..hh).flat_map(|h| (0..ww).map(move |w| (h, w))).filter(|&(h, w)| m.get(h, w)).collect();
        let rmin = hits.iter().map(|p| p.0).min().unwrap() as i64 - margin as i64;
        let rmax = hits.iter().map(|p| p.0).max().unwrap() as i64 + margin as i64;
        let cmin = hits.iter().map(|p| p.1).min().unwrap() as i64 - margin as i64;
        let cmax = hits.iter().map(|p| p.1).max().unwrap() as i64 + margin as i64;
        (0..hh as i64)
            .flat_map(|h| (0..ww as i64).map(move |w| (h, w)))
            .map(|(h, w)| h >= rmin && h <= rmax && w >= cmin && w <= cmax)
            .collect()
    }

    #[test]
    fn empty_object_gives_full_background() {
        let bg = derive_background(&[BinaryMask::new(3, 2, false)]).unwrap();
        assert_eq!(bg.count(), 6);
    }

    #[test]
    fn two_objects_background() {
        let a = BinaryMask::from_rows(&[&[1, 0], &[0, 0]]).unwrap();
        let b = BinaryMask::from_rows(&[&[0, 0], &[0, 1]]).unwrap();
        let bg = derive_background(&[a.clone(), b.clone()]).unwrap();
        for h in 0..2 {
            for w in 0..2 {
                assert_eq!(bg.get(h, w), !(a.get(h, w) || b.get(h, w)));
            }
        }
        assert_eq!(bg, BinaryMask::from_rows(&[&[0, 1], &[1, 0]]).unwrap());
    }

    #[test]
    fn overlap_names_pixel() {
        let a = BinaryMask::from_rows(&[&[0, 1], &[1, 0]]).unwrap();
        let b = BinaryMask::from_rows(&[&[0, 0], &[1, 1]]).unwrap();
        let err = derive_background(&[a, b]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("(1, 0)"), "{err}");
    }

    #[test]
    fn empty_list_and_shape_mismatch() {
        assert!(matches!(derive_background(&[]), Err(Error::Validation(_))));
        let err = derive_background(&[BinaryMask::new(2, 2, false), BinaryMask::new(2, 3, false)]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn supplied_background_checked() {
        let a = BinaryMask::from_rows(&[&[1, 0], &[0, 0]]).unwrap();
        assert!(MaskSet::with_background(vec![a.clone()], a.complement()).is_ok());
        let err = MaskSet::with_background(vec![a.clone()], BinaryMask::new(2, 2, true)).unwrap_err();
        assert!(err.to_string().contains("(0, 0)"), "{err}");
        let err = MaskSet::with_background(vec![a], BinaryMask::new(2, 2, false)).unwrap_err();
        assert!(err.to_string().contains("uncovered"), "{err}");
    }

    #[test]
    fn rect_examples() {
        let mut m = BinaryMask::new(6, 6, false);
        m.set(1, 1, true);
        m.set(3, 4, true);
        let r = expand_to_rect(&m, 0).unwrap();
        assert_eq!(r.bits(), rect_oracle(&m, 0).as_slice());
        assert_eq!(r.count(), 3 * 4);
        assert!(r.get(1, 1) && r.get(3, 4) && r.get(2, 3) && !r.get(0, 1) && !r.get(1, 5));
        let r1 = expand_to_rect(&m, 1).unwrap();
        assert_eq!(r1.bits(), rect_oracle(&m, 1).as_slice());
        assert_eq!(r1.count(), 5 * 6);
        assert!(!r1.get(5, 0));
        let full = BinaryMask::new(4, 5, true);
        assert_eq!(expand_to_rect(&full, 3).unwrap(), full);
        assert!(matches!(expand_to_rect(&BinaryMask::new(3, 3, false), 1), Err(Error::Validation(_))));
    }

    #[test]
    fn pgm_negative_cases() {
        let mut bytes = mask_to_pgm(&BinaryMask::new(2, 2, true));
        *bytes.last_mut().unwrap() = 128;
        assert!(matches!(mask_from_pgm(&bytes), Err(Error::Format(_))));
        assert!(matches!(mask_from_pgm(b"P2\n2 1\n255\n0 255\n"), Err(Error::Format(_))));
        assert!(matches!(mask_from_pgm(b"P5\n2 1\n1\n\x00\x01"), Err(Error::Format(_))));
        assert!(matches!(mask_from_pgm(b"P5\n2 2\n255\n\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_comments_and_file_round_trip() {
        let m = mask_from_pgm(b"P5\n# made by hand\n2 1\n255\n\xff\x00").unwrap();
        assert_eq!(m, BinaryMask::from_rows(&[&[1, 0]]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        save_mask_pgm(&m, &p).unwrap();
        assert_eq!(load_mask_pgm(&p).unwrap(), m);
        assert!(matches!(load_mask_pgm(dir.path().join("nope.pgm")), Err(Error::NotFound(_))));
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w).prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn pgm_round_trip(m in mask_strategy()) {
            prop_assert_eq!(mask_from_pgm(&mask_to_pgm(&m)).unwrap(), m);
        }

        #[test]
        fn rect_matches_oracle_and_is_monotone(m in mask_strategy(), a in 0usize..4, b in 0usize..4) {
            prop_assume!(!m.is_empty());
            let ra = expand_to_rect(&m, a).unwrap();
            let want = rect_oracle(&m, a);
            prop_assert_eq!(ra.bits(), want.as_slice());
            prop_assert!(m.is_subset_of(&expand_to_rect(&m, 0).unwrap()));
            prop_assert!(ra.is_subset_of(&expand_to_rect(&m, a + b).unwrap()));
            let twice = expand_to_rect(&ra, b).unwrap();
            prop_assert!(expand_to_rect(&m, a + b).unwrap().is_subset_of(&twice));
        }

        #[test]
        fn partition_counts(m in mask_strategy(), cut in 0usize..100) {
            // Split one random mask into two disjoint objects.
            let (h, w) = m.shape();
            let cut = cut % (h * w + 1);
            let first: Vec<bool> = m.bits().iter().enumerate().map(|(i, &b)| b && i < cut).collect();
            let second: Vec<bool> = m.bits().iter().enumerate().map(|(i, &b)| b && i >= cut).collect();
            let set = MaskSet::from_objects(vec![
                BinaryMask::from_bits(h, w, first).unwrap(),
                BinaryMask::from_bits(h, w, second).unwrap(),
            ]).unwrap();
            let total = set.background().count() + set.objects().iter().map(|o| o.count()).sum::<usize>();
            prop_assert_eq!(total, h * w);
        }
    }
}
