//! Geometric pre-processing, affine augmentation and morphological
//! post-processing on grayscale images and binary masks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("target extent must be at least 1, got {0}x{1}")]
    BadTarget(usize, usize),
    #[error("image and mask grids differ: {0}x{1} vs {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error("{0}")]
    Invalid(String),
}

/// 2D grayscale image with physical pixel spacing in mm (row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub spacing: (f64, f64),
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, spacing: (f64, f64), values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        assert!(spacing.0 > 0.0 && spacing.1 > 0.0);
        GrayImage { width, height, spacing, values }
    }

    pub fn zeros(height: usize, width: usize, spacing: (f64, f64)) -> Self {
        GrayImage::new(height, width, spacing, vec![0.0; height * width])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Binary mask on the same grid as its source image; values strictly {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Spacing in mm, stored as micro-mm-free f64 pair in the image; masks
    /// carry the same pair for mm-aware metrics.
    spacing_bits: (u64, u64),
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, spacing: (f64, f64), values: Vec<u8>) -> Self {
        assert_eq!(values.len(), height * width);
        assert!(values.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        BinaryMask {
            width,
            height,
            spacing_bits: (spacing.0.to_bits(), spacing.1.to_bits()),
            values,
        }
    }

    pub fn zeros(height: usize, width: usize, spacing: (f64, f64)) -> Self {
        BinaryMask::new(height, width, spacing, vec![0; height * width])
    }

    pub fn spacing(&self) -> (f64, f64) {
        (f64::from_bits(self.spacing_bits.0), f64::from_bits(self.spacing_bits.1))
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.values[row * self.width + col] = v & 1;
    }

    pub fn area_px(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.at(r, c) == 1 {
                    n += 1;
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }
}

// ── crop / pad / resize ─────────────────────────────────────────────

fn crop_or_pad_axis(in_len: usize, target: usize) -> (isize, usize) {
    // returns (offset of target window in input coordinates, copy length)
    if target <= in_len {
        let margin = (in_len - target) / 2;
        (margin as isize, target)
    } else {
        let margin = (target - in_len) / 2;
        (-(margin as isize), in_len)
    }
}

fn crop_or_pad_buf<T: Copy + Default>(
    v: &[T],
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    let (ro, _) = crop_or_pad_axis(h, th);
    let (co, _) = crop_or_pad_axis(w, tw);
    let mut out = vec![T::default(); th * tw];
    for r in 0..th {
        let sr = r as isize + ro;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..tw {
            let sc = c as isize + co;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            out[r * tw + c] = v[sr as usize * w + sc as usize];
        }
    }
    out
}

/// Center-aligned crop or zero-pad to the target grid; the extra pixel of an
/// odd margin goes to the bottom/right. Spacing is unchanged.
pub fn crop_or_pad(img: &GrayImage, target_h: usize, target_w: usize) -> GrayImage {
    let values = crop_or_pad_buf(&img.values, img.height, img.width, target_h, target_w);
    GrayImage::new(target_h, target_w, img.spacing, values)
}

pub fn crop_or_pad_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> BinaryMask {
    let values = crop_or_pad_buf(&mask.values, mask.height, mask.width, target_h, target_w);
    BinaryMask::new(target_h, target_w, mask.spacing(), values)
}

fn bilinear_sample(v: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
        return 0.0;
    }
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = v[r0 * w + c0] * (1.0 - fc) + v[r0 * w + c1] * fc;
    let bot = v[r1 * w + c0] * (1.0 - fc) + v[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

fn resize_buf(v: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    // corner-aligned sampling
    let rs = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let cs = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = vec![0.0; th * tw];
    for r in 0..th {
        for c in 0..tw {
            out[r * tw + c] = bilinear_sample(v, h, w, r as f64 * rs, c as f64 * cs);
        }
    }
    out
}

/// Bilinear resize with corner-aligned sampling; spacing is rescaled by the
/// size ratio so the physical extent is preserved.
pub fn resize_bilinear(
    img: &GrayImage,
    target_h: usize,
    target_w: usize,
) -> Result<GrayImage, ImageError> {
    if target_h < 1 || target_w < 1 {
        return Err(ImageError::BadTarget(target_h, target_w));
    }
    if (target_h, target_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let values = resize_buf(&img.values, img.height, img.width, target_h, target_w);
    let spacing = (
        img.spacing.0 * img.height as f64 / target_h as f64,
        img.spacing.1 * img.width as f64 / target_w as f64,
    );
    Ok(GrayImage::new(target_h, target_w, spacing, values))
}

/// Masks are resized on their {0,1} probability representation and
/// re-thresholded at 0.5.
pub fn resize_mask(
    mask: &BinaryMask,
    target_h: usize,
    target_w: usize,
) -> Result<BinaryMask, ImageError> {
    if target_h < 1 || target_w < 1 {
        return Err(ImageError::BadTarget(target_h, target_w));
    }
    if (target_h, target_w) == (mask.height, mask.width) {
        return Ok(mask.clone());
    }
    let float: Vec<f64> = mask.values.iter().map(|&v| v as f64).collect();
    let resized = resize_buf(&float, mask.height, mask.width, target_h, target_w);
    let spacing = (
        mask.spacing().0 * mask.height as f64 / target_h as f64,
        mask.spacing().1 * mask.width as f64 / target_w as f64,
    );
    let values = resized.iter().map(|&v| u8::from(v >= 0.5)).collect();
    Ok(BinaryMask::new(target_h, target_w, spacing, values))
}

/// Nearest-neighbor 2x upsampling (network grid back to the analysis grid).
pub fn upsample2_nearest(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = BinaryMask::zeros(2 * h, 2 * w, (mask.spacing().0 / 2.0, mask.spacing().1 / 2.0));
    for r in 0..2 * h {
        for c in 0..2 * w {
            let v = mask.at(r / 2, c / 2);
            out.set(r, c, v);
        }
    }
    out
}

// ── affine augmentation ─────────────────────────────────────────────

/// 6 degrees of freedom: rotation, 2 translations, 2 scales, 1 shear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub translation: (f64, f64),
    pub scale: (f64, f64),
    pub shear: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams { rotation: 0.0, translation: (0.0, 0.0), scale: (1.0, 1.0), shear: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    pub rotation_deg: f64,
    pub translation_px: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub shear: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            rotation_deg: 10.0,
            translation_px: 8.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            shear: 0.1,
        }
    }
}

impl AffineRanges {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> AffineParams {
        let rot = self.rotation_deg.to_radians();
        AffineParams {
            rotation: rng.gen_range(-rot..=rot),
            translation: (
                rng.gen_range(-self.translation_px..=self.translation_px),
                rng.gen_range(-self.translation_px..=self.translation_px),
            ),
            scale: (
                rng.gen_range(self.scale_lo..=self.scale_hi),
                rng.gen_range(self.scale_lo..=self.scale_hi),
            ),
            shear: rng.gen_range(-self.shear..=self.shear),
        }
    }
}

/// 2x2 inverse of the linear part rotation * shear * scale.
fn inverse_linear(p: &AffineParams) -> [[f64; 2]; 2] {
    let (s, c) = p.rotation.sin_cos();
    let (sr, sc) = p.scale;
    // forward: R * Shear * Scale, rows/cols vector convention
    let m = [
        [c * sr, -s * sc + c * p.shear * sc],
        [s * sr, c * sc + s * p.shear * sc],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ]
}

/// Apply the same affine transform to an image (bilinear) and its mask
/// (nearest neighbor); out-of-bounds samples are 0.
pub fn apply_affine(
    img: &GrayImage,
    mask: &BinaryMask,
    params: &AffineParams,
) -> Result<(GrayImage, BinaryMask), ImageError> {
    if (img.height, img.width) != (mask.height, mask.width) {
        return Err(ImageError::GridMismatch(img.height, img.width, mask.height, mask.width));
    }
    if *params == AffineParams::identity() {
        return Ok((img.clone(), mask.clone()));
    }
    let (h, w) = (img.height, img.width);
    let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let inv = inverse_linear(params);
    let mut out_img = GrayImage::zeros(h, w, img.spacing);
    let mut out_mask = BinaryMask::zeros(h, w, mask.spacing());
    let mask_f: Vec<f64> = mask.values.iter().map(|&v| v as f64).collect();
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cr - params.translation.0;
            let dc = c as f64 - cc - params.translation.1;
            let sr = inv[0][0] * dr + inv[0][1] * dc + cr;
            let sc = inv[1][0] * dr + inv[1][1] * dc + cc;
            out_img.values_mut()[r * w + c] = bilinear_sample(&img.values, h, w, sr, sc);
            let (nr, nc) = (sr.round(), sc.round());
            let mv = if nr < 0.0 || nc < 0.0 || nr > (h - 1) as f64 || nc > (w - 1) as f64 {
                0.0
            } else {
                mask_f[nr as usize * w + nc as usize]
            };
            out_mask.set(r, c, mv as u8);
        }
    }
    Ok((out_img, out_mask))
}

/// Draw affine parameters from the configured ranges and apply them.
pub fn random_affine<R: Rng>(
    img: &GrayImage,
    mask: &BinaryMask,
    ranges: &AffineRanges,
    rng: &mut R,
) -> Result<(GrayImage, BinaryMask), ImageError> {
    let params = ranges.sample(rng);
    apply_affine(img, mask, &params)
}

// ── morphological post-processing ───────────────────────────────────

/// Flood-fill the background from all border pixels (4-connected); any
/// background pixel not reached becomes foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut reached = vec![false; h * w];
    let mut stack = Vec::new();
    for r in 0..h {
        for c in [0, w - 1] {
            if mask.at(r, c) == 0 && !reached[r * w + c] {
                reached[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    for c in 0..w {
        for r in [0, h - 1] {
            if mask.at(r, c) == 0 && !reached[r * w + c] {
                reached[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let mut visit = |nr: usize, nc: usize, stack: &mut Vec<(usize, usize)>| {
            if mask.at(nr, nc) == 0 && !reached[nr * w + nc] {
                reached[nr * w + nc] = true;
                stack.push((nr, nc));
            }
        };
        if r > 0 {
            visit(r - 1, c, &mut stack);
        }
        if r + 1 < h {
            visit(r + 1, c, &mut stack);
        }
        if c > 0 {
            visit(r, c - 1, &mut stack);
        }
        if c + 1 < w {
            visit(r, c + 1, &mut stack);
        }
    }
    let values = (0..h * w)
        .map(|i| if mask.values[i] == 1 || !reached[i] { 1 } else { 0 })
        .collect();
    BinaryMask::new(h, w, mask.spacing(), values)
}

/// Keep only the largest 8-connected foreground component; ties break toward
/// the component containing the smallest row-major pixel index. An empty mask
/// stays empty.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize, usize)> = None; // (area, first_index, label)
    let mut next_label = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.values[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let mut area = 0usize;
        label[start] = next_label;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (r, c) = (idx / w, idx % w);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if mask.values[nidx] == 1 && label[nidx] == usize::MAX {
                        label[nidx] = next_label;
                        stack.push(nidx);
                    }
                }
            }
        }
        // scan order guarantees `start` is the component's smallest index
        let better = match best {
            None => true,
            Some((ba, _, _)) => area > ba,
        };
        if better {
            best = Some((area, start, next_label));
        }
        next_label += 1;
    }
    let Some((_, _, keep)) = best else {
        return mask.clone();
    };
    let values = (0..h * w).map(|i| u8::from(label[i] == keep)).collect();
    BinaryMask::new(h, w, mask.spacing(), values)
}

/// fill_holes then largest_component: the standard mask clean-up order.
pub fn post_process(mask: &BinaryMask) -> BinaryMask {
    largest_component(&fill_holes(mask))
}
