//! Segmentation agreement metrics: overlap ratios, contour distances in mm,
//! and physical area.

use thiserror::Error;

use crate::imageops::BinaryMask;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("masks lie on different grids: {0}x{1} vs {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error("both masks are empty; overlap metrics are undefined")]
    BothEmpty,
    #[error("cannot extract a contour from an empty mask")]
    EmptyContour,
}

/// Overlap-based agreement between an automatic mask `a` and a manual mask `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub dice: f64,
    pub jaccard: f64,
    /// false positive Dice: fraction of |a| + |b| claimed by a alone, doubled
    pub fpd: f64,
    /// false negative Dice: same for pixels of b that a missed
    pub fnd: f64,
}

pub fn region_metrics(a: &BinaryMask, b: &BinaryMask) -> Result<RegionMetrics, MetricError> {
    check_grids(a, b)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        match (x, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => {}
        }
    }
    let denom = (2 * tp + fp + fne) as f64;
    if denom == 0.0 {
        return Err(MetricError::BothEmpty);
    }
    let dice = 2.0 * tp as f64 / denom;
    let union = (tp + fp + fne) as f64;
    Ok(RegionMetrics {
        dice,
        jaccard: tp as f64 / union,
        fpd: 2.0 * fp as f64 / denom,
        fnd: 2.0 * fne as f64 / denom,
    })
}

fn check_grids(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricError::GridMismatch(a.height, a.width, b.height, b.width));
    }
    Ok(())
}

/// Boundary pixels of the foreground, in physical mm coordinates
/// (row * row_spacing, col * col_spacing). A foreground pixel is boundary if
/// any 4-neighbor is background or lies outside the image.
pub fn extract_contour(mask: &BinaryMask) -> Result<Vec<(f64, f64)>, MetricError> {
    let (h, w) = (mask.height, mask.width);
    let (sr, sc) = mask.spacing();
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) != 1 {
                continue;
            }
            let edge = r == 0
                || r == h - 1
                || c == 0
                || c == w - 1
                || mask.at(r - 1, c) == 0
                || mask.at(r + 1, c) == 0
                || mask.at(r, c - 1) == 0
                || mask.at(r, c + 1) == 0;
            if edge {
                pts.push((r as f64 * sr, c as f64 * sc));
            }
        }
    }
    if pts.is_empty() {
        return Err(MetricError::EmptyContour);
    }
    Ok(pts)
}

/// Contour distance statistics in mm between two masks on the same grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMetrics {
    pub hausdorff: f64,
    /// mean of distances from a's contour to b's
    pub mad_ab: f64,
    pub mad_ba: f64,
    /// symmetric mean: all point-to-contour distances pooled over both directions
    pub smad: f64,
}

fn directed(from: &[(f64, f64)], to: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let mut dists = Vec::with_capacity(from.len());
    let mut max = 0.0f64;
    for &(pr, pc) in from {
        let mut best = f64::INFINITY;
        for &(qr, qc) in to {
            let d2 = (pr - qr) * (pr - qr) + (pc - qc) * (pc - qc);
            if d2 < best {
                best = d2;
            }
        }
        let d = best.sqrt();
        max = max.max(d);
        dists.push(d);
    }
    (dists, max)
}

pub fn distance_metrics(a: &BinaryMask, b: &BinaryMask) -> Result<DistanceMetrics, MetricError> {
    check_grids(a, b)?;
    let ca = extract_contour(a)?;
    let cb = extract_contour(b)?;
    let (dab, max_ab) = directed(&ca, &cb);
    let (dba, max_ba) = directed(&cb, &ca);
    let sum_ab: f64 = dab.iter().sum();
    let sum_ba: f64 = dba.iter().sum();
    Ok(DistanceMetrics {
        hausdorff: max_ab.max(max_ba),
        mad_ab: sum_ab / dab.len() as f64,
        mad_ba: sum_ba / dba.len() as f64,
        smad: (sum_ab + sum_ba) / (dab.len() + dba.len()) as f64,
    })
}

/// Foreground area in cm^2 from the pixel count and mm spacing.
pub fn area_cm2(mask: &BinaryMask) -> f64 {
    let (sr, sc) = mask.spacing();
    mask.area_px() as f64 * sr * sc / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
        rect_sp(h, w, r0, r1, c0, c1, (1.0, 1.0))
    }

    fn rect_sp(
        h: usize,
        w: usize,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
        sp: (f64, f64),
    ) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w, sp);
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, 1);
            }
        }
        m
    }

    #[test]
    fn overlap_hand_counts() {
        // |a|=12, |b|=12, overlap 6
        let a = rect(10, 10, 2, 5, 2, 6);
        let b = rect(10, 10, 2, 5, 4, 8);
        let m = region_metrics(&a, &b).unwrap();
        assert!((m.dice - 0.5).abs() < 1e-15);
        assert!((m.jaccard - 6.0 / 18.0).abs() < 1e-15);
        assert!((m.fpd - 0.5).abs() < 1e-15);
        assert!((m.fnd - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let a = rect(8, 8, 1, 4, 1, 4);
        let m = region_metrics(&a, &a).unwrap();
        assert_eq!(m.dice, 1.0);
        assert_eq!(m.jaccard, 1.0);
        assert_eq!(m.fpd, 0.0);

        let b = rect(8, 8, 5, 7, 5, 7);
        let m = region_metrics(&a, &b).unwrap();
        assert_eq!(m.dice, 0.0);
        assert_eq!(m.jaccard, 0.0);
        assert!((m.fpd + m.fnd - 2.0).abs() < 1e-15);

        let empty = BinaryMask::zeros(8, 8, (1.0, 1.0));
        assert!(region_metrics(&empty, &empty).is_err());
        let grid = BinaryMask::zeros(4, 8, (1.0, 1.0));
        assert!(matches!(region_metrics(&a, &grid), Err(MetricError::GridMismatch(..))));
    }

    #[test]
    fn contour_of_rectangle() {
        // 4x5 solid block: boundary = perimeter pixels only
        let m = rect_sp(10, 10, 2, 6, 3, 8, (0.5, 2.0));
        let pts = extract_contour(&m).unwrap();
        assert_eq!(pts.len(), 2 * 4 + 2 * 5 - 4);
        // all scaled by spacing
        assert!(pts.contains(&(1.0, 6.0))); // pixel (2,3)
        assert!(!pts.contains(&(1.5, 8.0))); // pixel (3,4) is interior

        let empty = BinaryMask::zeros(4, 4, (1.0, 1.0));
        assert!(extract_contour(&empty).is_err());
    }

    #[test]
    fn single_pixel_distance() {
        let mut a = BinaryMask::zeros(10, 10, (1.0, 1.0));
        a.set(2, 2, 1);
        let mut b = BinaryMask::zeros(10, 10, (1.0, 1.0));
        b.set(5, 6, 1);
        let d = distance_metrics(&a, &b).unwrap();
        let expect = 5.0; // 3-4-5 triangle
        assert!((d.hausdorff - expect).abs() < 1e-12);
        assert!((d.mad_ab - expect).abs() < 1e-12);
        assert!((d.smad - expect).abs() < 1e-12);
    }

    #[test]
    fn shifted_rectangle_distances() {
        // same shape shifted by 2 rows; directed means are equal by symmetry
        let a = rect(20, 20, 4, 9, 4, 12);
        let b = rect(20, 20, 6, 11, 4, 12);
        let d = distance_metrics(&a, &b).unwrap();
        assert!((d.mad_ab - d.mad_ba).abs() < 1e-12);
        assert!((d.hausdorff - 2.0).abs() < 1e-12);
        assert!(d.smad <= 2.0 && d.smad > 0.0);
    }

    #[test]
    fn spacing_scales_distances() {
        let a = rect_sp(20, 20, 4, 9, 4, 12, (0.5, 0.5));
        let b = rect_sp(20, 20, 6, 11, 4, 12, (0.5, 0.5));
        let d = distance_metrics(&a, &b).unwrap();
        assert!((d.hausdorff - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_masks_zero_distance() {
        let a = rect(12, 12, 3, 8, 2, 9);
        let d = distance_metrics(&a, &a).unwrap();
        assert_eq!(d.hausdorff, 0.0);
        assert_eq!(d.smad, 0.0);
    }

    #[test]
    fn area_in_cm2() {
        let m = rect_sp(30, 30, 0, 10, 0, 20, (0.5, 0.4));
        // 200 px * 0.2 mm^2 = 40 mm^2 = 0.4 cm^2
        assert!((area_cm2(&m) - 0.4).abs() < 1e-12);
        assert_eq!(area_cm2(&BinaryMask::zeros(5, 5, (1.0, 1.0))), 0.0);
    }

    fn arb_mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
            let cells = proptest::collection::vec(0u8..2, h * w);
            (cells.clone(), cells).prop_map(move |(va, vb)| {
                (
                    BinaryMask::new(h, w, (1.0, 1.0), va),
                    BinaryMask::new(h, w, (1.0, 1.0), vb),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn overlap_identities((a, b) in arb_mask_pair()) {
            if let Ok(m) = region_metrics(&a, &b) {
                // dice + (fpd + fnd)/2 partitions the combined mass
                prop_assert!((m.dice + (m.fpd + m.fnd) / 2.0 - 1.0).abs() < 1e-12);
                prop_assert!((m.jaccard - m.dice / (2.0 - m.dice)).abs() < 1e-12);
                prop_assert!(m.dice >= 0.0 && m.dice <= 1.0);
            }
        }

        #[test]
        fn overlap_symmetry((a, b) in arb_mask_pair()) {
            if let (Ok(ab), Ok(ba)) = (region_metrics(&a, &b), region_metrics(&b, &a)) {
                prop_assert_eq!(ab.dice, ba.dice);
                prop_assert_eq!(ab.fpd, ba.fnd);
            }
        }

        #[test]
        fn distance_symmetry_and_bounds((a, b) in arb_mask_pair()) {
            if let (Ok(ab), Ok(ba)) = (distance_metrics(&a, &b), distance_metrics(&b, &a)) {
                prop_assert!((ab.hausdorff - ba.hausdorff).abs() < 1e-12);
                prop_assert!((ab.smad - ba.smad).abs() < 1e-12);
                prop_assert_eq!(ab.mad_ab, ba.mad_ba);
                prop_assert!(ab.smad <= ab.hausdorff + 1e-12);
                prop_assert!(ab.mad_ab.max(ab.mad_ba) <= ab.hausdorff + 1e-12);
            }
        }
    }
}
