//! Synthetic phantom dataset: hiatus-like closed shapes on speckled
//! ultrasound-style backgrounds, with three simulated operator labels.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Manifest, ManifestEntry};
use super::{HarnessError, Result};
use crate::imageops::{BinaryMask, GrayImage};
use crate::metrics::region_metrics;
use crate::pgm;
use crate::stats::STAGES;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_patients: 8, images_per_patient: 3, height: 64, width: 64, seed: 0 }
    }
}

/// Smoothed random-star polygon: a radial function r(theta) built from a few
/// low-order harmonics on top of a base radius.
#[derive(Debug, Clone)]
struct StarShape {
    center: (f64, f64),
    base_radius: f64,
    /// (order, amplitude, phase)
    harmonics: Vec<(usize, f64, f64)>,
}

impl StarShape {
    fn radius(&self, theta: f64) -> f64 {
        let mut r = 1.0;
        for &(k, a, p) in &self.harmonics {
            r += a * (k as f64 * theta + p).cos();
        }
        (self.base_radius * r).max(1.0)
    }

    fn rasterize(&self, h: usize, w: usize, spacing: (f64, f64)) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w, spacing);
        for row in 0..h {
            for col in 0..w {
                let dr = row as f64 - self.center.0;
                let dc = col as f64 - self.center.1;
                let theta = dr.atan2(dc);
                if (dr * dr + dc * dc).sqrt() <= self.radius(theta) {
                    m.set(row, col, 1);
                }
            }
        }
        m
    }
}

fn stage_radius_factor(stage: &str) -> f64 {
    // area ratios contraction 0.8 : rest 1.0 : valsalva 1.3; radius goes as sqrt
    match stage {
        "contraction" => 0.8f64.sqrt(),
        "rest" => 1.0,
        "valsalva" => 1.3f64.sqrt(),
        _ => unreachable!("unknown stage {stage}"),
    }
}

fn box_blur(img: &mut GrayImage) {
    let (h, w) = (img.height, img.width);
    let src = img.values().to_vec();
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64 {
                        sum += src[nr as usize * w + nc as usize];
                        n += 1.0;
                    }
                }
            }
            img.values_mut()[r * w + c] = sum / n;
        }
    }
}

fn render_image(truth: &BinaryMask, rng: &mut ChaCha8Rng) -> GrayImage {
    let (h, w) = (truth.height, truth.width);
    let speckle: Normal<f64> = Normal::new(1.0, 0.18).unwrap();
    let mut img = GrayImage::zeros(h, w, truth.spacing());
    for r in 0..h {
        for c in 0..w {
            // dark hiatus interior against a brighter tissue background
            let base = if truth.at(r, c) == 1 { 0.25 } else { 0.65 };
            let v = base * speckle.sample(rng).max(0.0);
            img.values_mut()[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    box_blur(&mut img);
    box_blur(&mut img);
    img
}

/// Perturbed copy of a shape standing in for one human operator's contour.
fn perturbed_shape(shape: &StarShape, magnitude: f64, rng: &mut ChaCha8Rng) -> StarShape {
    let mut out = shape.clone();
    out.center.0 += rng.gen_range(-1.0..=1.0) * magnitude * shape.base_radius;
    out.center.1 += rng.gen_range(-1.0..=1.0) * magnitude * shape.base_radius;
    out.base_radius *= 1.0 + rng.gen_range(-magnitude..=magnitude);
    let k = rng.gen_range(2..7);
    out.harmonics.push((k, rng.gen_range(0.0..magnitude), rng.gen_range(0.0..std::f64::consts::TAU)));
    out
}

/// Draw one operator-style mask whose Dice against the truth lands in
/// [0.88, 0.99] and whose Dice against previously drawn masks stays >= 0.82.
fn draw_operator_mask(
    shape: &StarShape,
    truth: &BinaryMask,
    previous: &[BinaryMask],
    rng: &mut ChaCha8Rng,
) -> Result<BinaryMask> {
    let mut magnitude = 0.06;
    for _ in 0..60 {
        let candidate = perturbed_shape(shape, magnitude, rng)
            .rasterize(truth.height, truth.width, truth.spacing());
        if candidate.area_px() == 0 {
            magnitude *= 0.7;
            continue;
        }
        let dice = region_metrics(&candidate, truth).map_err(|e| HarnessError::Invalid(e.to_string()))?.dice;
        if dice > 0.99 {
            magnitude = (magnitude * 1.5).min(0.5);
            continue;
        }
        if dice < 0.88 {
            magnitude *= 0.7;
            continue;
        }
        let pairwise_ok = previous.iter().all(|p| {
            region_metrics(&candidate, p).map(|m| m.dice >= 0.82).unwrap_or(false)
        });
        if pairwise_ok {
            return Ok(candidate);
        }
        magnitude *= 0.8;
    }
    Err(HarnessError::Invalid("could not draw an operator mask in band".into()))
}

/// Generate the full phantom dataset under `root` and return its manifest.
/// Deterministic in `cfg.seed`.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    if cfg.n_patients < 2 {
        return Err(HarnessError::Invalid(format!(
            "need at least 2 patients, got {}",
            cfg.n_patients
        )));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(HarnessError::Invalid("images must be at least 16x16".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    std::fs::create_dir_all(root.join("images"))?;
    for op in 1..=3 {
        std::fs::create_dir_all(root.join(format!("masks/op{op}")))?;
    }

    let (h, w) = (cfg.height, cfg.width);
    let min_dim = h.min(w) as f64;
    let spacing_dist: Normal<f64> = Normal::new(0.54, 0.07).unwrap();
    let mut entries = Vec::new();
    for p in 0..cfg.n_patients {
        let patient_id = format!("p{p:02}");
        let spacing = (
            spacing_dist.sample(&mut rng).max(0.2),
            spacing_dist.sample(&mut rng).max(0.2),
        );
        // per-patient anatomy: base shape shared by all of the patient's images
        let base = StarShape {
            center: ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
            base_radius: min_dim * rng.gen_range(0.20..0.26),
            harmonics: (2..6)
                .map(|k| (k, rng.gen_range(0.0..0.07), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect(),
        };
        for i in 0..cfg.images_per_patient {
            let stage = STAGES[i % STAGES.len()];
            let mut shape = base.clone();
            shape.base_radius =
                (base.base_radius * stage_radius_factor(stage)).min(0.42 * min_dim);
            shape.center.0 += rng.gen_range(-0.05..0.05) * min_dim;
            shape.center.1 += rng.gen_range(-0.05..0.05) * min_dim;
            let truth = shape.rasterize(h, w, spacing);
            let image = render_image(&truth, &mut rng);

            let mut op_masks: Vec<BinaryMask> = Vec::with_capacity(3);
            for _ in 0..3 {
                let m = draw_operator_mask(&shape, &truth, &op_masks, &mut rng)?;
                op_masks.push(m);
            }

            let name = format!("{patient_id}_i{i:02}");
            let image_path = format!("images/{name}.pgm");
            pgm::save_gray(&root.join(&image_path), &image)?;
            let mut mask_paths = Vec::with_capacity(3);
            for (j, m) in op_masks.iter().enumerate() {
                let path = format!("masks/op{}/{name}.pgm", j + 1);
                pgm::save_mask(&root.join(&path), m)?;
                mask_paths.push(path);
            }
            entries.push(ManifestEntry {
                patient_id: patient_id.clone(),
                stage: stage.into(),
                image: image_path,
                masks: mask_paths.try_into().unwrap(),
                spacing_row_mm: spacing.0,
                spacing_col_mm: spacing.1,
            });
        }
    }
    let manifest = Manifest { entries };
    manifest.save(root)?;
    Ok(manifest)
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::load_all;
    use crate::metrics::area_cm2;
    use std::collections::BTreeMap;

    fn quick_cfg(seed: u64) -> SynthConfig {
        SynthConfig { n_patients: 3, images_per_patient: 3, height: 48, width: 48, seed }
    }

    #[test]
    fn deterministic_in_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_dataset(d1.path(), &quick_cfg(7)).unwrap();
        let m2 = synth_dataset(d2.path(), &quick_cfg(7)).unwrap();
        assert_eq!(m1, m2);
        for e in &m1.entries {
            for p in std::iter::once(&e.image).chain(e.masks.iter()) {
                let b1 = std::fs::read(d1.path().join(p)).unwrap();
                let b2 = std::fs::read(d2.path().join(p)).unwrap();
                assert_eq!(b1, b2, "file {p} differs between identical seeds");
            }
        }
        let m3 = synth_dataset(tempfile::tempdir().unwrap().path(), &quick_cfg(8)).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn operator_masks_agree_with_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(dir.path(), &quick_cfg(3)).unwrap();
        let cases = load_all(dir.path(), &manifest).unwrap();
        for case in &cases {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    let d = region_metrics(&case.masks[a], &case.masks[b]).unwrap().dice;
                    assert!(d >= 0.8, "pairwise dice {d} in {}", case.name);
                }
            }
        }
    }

    #[test]
    fn stage_area_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_patients: 8, ..quick_cfg(11) };
        let manifest = synth_dataset(dir.path(), &cfg).unwrap();
        let cases = load_all(dir.path(), &manifest).unwrap();
        let mut by_stage: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for case in &cases {
            // first operator mask as the area proxy
            by_stage
                .entry(match case.stage.as_str() {
                    "rest" => "rest",
                    "valsalva" => "valsalva",
                    _ => "contraction",
                })
                .or_default()
                .push(area_cm2(&case.masks[0]));
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let contraction = mean(&by_stage["contraction"]);
        let rest = mean(&by_stage["rest"]);
        let valsalva = mean(&by_stage["valsalva"]);
        assert!(valsalva > rest && rest > contraction, "{valsalva} > {rest} > {contraction}");
    }

    #[test]
    fn manifest_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(dir.path(), &quick_cfg(1)).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 9);
        assert_eq!(m.patients().len(), 3);
        let cases = load_all(dir.path(), &m).unwrap();
        assert!(cases.iter().all(|c| c.masks.iter().all(|m| m.area_px() > 0)));

        // damaging a referenced file makes validation fail
        std::fs::remove_file(dir.path().join(&m.entries[0].image)).unwrap();
        assert!(Manifest::load(dir.path()).is_err());
    }

    #[test]
    fn image_values_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(dir.path(), &quick_cfg(2)).unwrap();
        let cases = load_all(dir.path(), &manifest).unwrap();
        for case in &cases {
            assert!(case.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
