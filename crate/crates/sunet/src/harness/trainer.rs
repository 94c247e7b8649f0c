//! Cross-validation driver: per-fold training, evaluation against the three
//! operator masks, and CSV emission.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{load_all, LabeledCase, Manifest};
use super::folds::{plan_lopo, Fold};
use super::{HarnessError, Result};
use crate::imageops::{
    crop_or_pad, crop_or_pad_mask, post_process, random_affine, resize_bilinear, resize_mask,
    upsample2_nearest, AffineRanges, BinaryMask, GrayImage,
};
use crate::metrics::{area_cm2, distance_metrics, region_metrics};
use crate::network::{
    build_network, train_step, AdamConfig, AdamState, LossConfig, Network, NetworkConfig,
};
use crate::stats::{fmt_sig6, write_metric_csv, MetricRow};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub augment: AffineRanges,
    pub adam: AdamConfig,
    /// iterations (1-based) at which the first fold writes checkpoints
    pub checkpoint_iterations: Vec<usize>,
    /// record a per-iteration test Dice curve on the first fold
    pub eval_curve: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: 600,
            seed: 0,
            augment: AffineRanges::default(),
            adam: AdamConfig::default(),
            checkpoint_iterations: Vec::new(),
            eval_curve: false,
        }
    }
}

/// Desk-scale defaults: 16 channels, 600 iterations at a learning rate tuned
/// for the short budget, and gentle augmentation for small synthetic images.
/// Pairs with the default `SynthConfig` (8 patients, 64x64).
pub fn desk_preset() -> (NetworkConfig, TrainConfig) {
    let net = NetworkConfig { channels: 16, ..NetworkConfig::default() };
    let mut train = TrainConfig::default();
    train.adam.lr = 1e-3;
    train.augment = AffineRanges {
        rotation_deg: 8.0,
        translation_px: 3.0,
        scale_lo: 0.95,
        scale_hi: 1.05,
        shear: 0.05,
    };
    (net, train)
}

/// A case resampled onto the shared analysis grid plus its half-resolution
/// network inputs.
#[derive(Debug, Clone)]
struct Prepped {
    patient_id: String,
    stage: String,
    name: String,
    analysis_masks: [BinaryMask; 3],
    net_image: GrayImage,
    net_masks: [BinaryMask; 3],
}

/// Smallest even grid covering every image in the set.
fn analysis_dims(cases: &[LabeledCase]) -> (usize, usize) {
    let h = cases.iter().map(|c| c.image.height).max().unwrap_or(2);
    let w = cases.iter().map(|c| c.image.width).max().unwrap_or(2);
    (h + h % 2, w + w % 2)
}

fn prep_case(case: &LabeledCase, dims: (usize, usize)) -> Result<Prepped> {
    let (ah, aw) = dims;
    let image = crop_or_pad(&case.image, ah, aw);
    let analysis_masks: Vec<BinaryMask> =
        case.masks.iter().map(|m| crop_or_pad_mask(m, ah, aw)).collect();
    let net_image = resize_bilinear(&image, ah / 2, aw / 2)?;
    let net_masks: Vec<BinaryMask> = analysis_masks
        .iter()
        .map(|m| resize_mask(m, ah / 2, aw / 2))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Prepped {
        patient_id: case.patient_id.clone(),
        stage: case.stage.clone(),
        name: case.name.clone(),
        analysis_masks: analysis_masks.try_into().unwrap(),
        net_image,
        net_masks: net_masks.try_into().unwrap(),
    })
}

fn batch_tensors(batch: &[(GrayImage, BinaryMask)]) -> (Tensor, Tensor) {
    let (h, w) = (batch[0].0.height, batch[0].0.width);
    let b = batch.len();
    let mut images = Tensor::zeros(&[b, 1, h, w]);
    let mut masks = Tensor::zeros(&[b, h, w]);
    for (i, (img, m)) in batch.iter().enumerate() {
        images.data_mut()[i * h * w..(i + 1) * h * w].copy_from_slice(img.values());
        for (dst, &v) in masks.data_mut()[i * h * w..(i + 1) * h * w]
            .iter_mut()
            .zip(m.values())
        {
            *dst = v as f64;
        }
    }
    (images, masks)
}

fn mask_from_plane(data: &[f64], h: usize, w: usize, spacing: (f64, f64)) -> BinaryMask {
    let values = data.iter().map(|&v| u8::from(v >= 0.5)).collect();
    BinaryMask::new(h, w, spacing, values)
}

/// Pairwise metric row; distance metrics fall back to NaN when one side has
/// no contour (an empty prediction).
fn make_row(
    patient: &str,
    image: &str,
    stage: &str,
    rater_a: &str,
    rater_b: &str,
    a: &BinaryMask,
    b: &BinaryMask,
) -> Result<MetricRow> {
    let rm = region_metrics(a, b).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let dm = distance_metrics(a, b).ok();
    Ok(MetricRow {
        patient: patient.into(),
        image: image.into(),
        stage: stage.into(),
        rater_a: rater_a.into(),
        rater_b: rater_b.into(),
        dice: rm.dice,
        jaccard: rm.jaccard,
        hausdorff_mm: dm.map_or(f64::NAN, |d| d.hausdorff),
        mad_mm: dm.map_or(f64::NAN, |d| d.mad_ab),
        smad_mm: dm.map_or(f64::NAN, |d| d.smad),
        fpd: rm.fpd,
        fnd: rm.fnd,
        area_a_cm2: area_cm2(a),
        area_b_cm2: area_cm2(b),
    })
}

#[derive(Debug, Default)]
struct FoldOutput {
    rows: Vec<MetricRow>,
    inter: Vec<MetricRow>,
    losses: Vec<f64>,
    dice_curve: Vec<(usize, f64)>,
}

fn fold_rng(seed: u64, fold_idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (fold_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// Mean Dice of raw network predictions over the fold's test images and all
/// three operators, at network resolution without post-processing.
fn quick_test_dice(net: &mut Network, test: &[&Prepped]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in test {
        let (h, w) = (p.net_image.height, p.net_image.width);
        let mut images = Tensor::zeros(&[1, 1, h, w]);
        images.data_mut().copy_from_slice(p.net_image.values());
        let pred = net.predict(&images)?;
        let mask = mask_from_plane(pred.data(), h, w, p.net_image.spacing);
        for m in &p.net_masks {
            let d = region_metrics(&mask, m).map(|r| r.dice).unwrap_or(0.0);
            sum += d;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn run_fold(
    fold_idx: usize,
    fold: &Fold,
    prepped: &[Prepped],
    net_cfg: &NetworkConfig,
    loss_cfg: &LossConfig,
    tc: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FoldOutput> {
    let mut rng = fold_rng(tc.seed, fold_idx);
    let mut net = build_network(net_cfg.clone(), &mut rng)?;
    let mut adam = AdamState::new(tc.adam.clone(), net.params());

    // one training sample per (image, operator) pair
    let samples: Vec<(usize, usize)> = fold
        .train
        .iter()
        .flat_map(|&ci| (0..3).map(move |op| (ci, op)))
        .collect();
    if samples.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "fold {fold_idx} ({}) has no training samples",
            fold.patient_id
        )));
    }
    let test: Vec<&Prepped> = fold.test.iter().map(|&i| &prepped[i]).collect();

    let mut out = FoldOutput::default();
    for iter in 0..tc.iterations {
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let (ci, op) = samples[rng.gen_range(0..samples.len())];
            let p = &prepped[ci];
            let (img, mask) = random_affine(&p.net_image, &p.net_masks[op], &tc.augment, &mut rng)?;
            batch.push((img, mask));
        }
        let (images, masks) = batch_tensors(&batch);
        let loss = train_step(&mut net, &images, &masks, loss_cfg, &mut adam, &mut rng)
            .map_err(|e| {
                HarnessError::Invalid(format!(
                    "fold {fold_idx} ({}) aborted at iteration {}: {e}",
                    fold.patient_id,
                    iter + 1
                ))
            })?;
        out.losses.push(loss);
        if tc.eval_curve && fold_idx == 0 {
            out.dice_curve.push((iter + 1, quick_test_dice(&mut net, &test)?));
        }
        if fold_idx == 0 && tc.checkpoint_iterations.contains(&(iter + 1)) {
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                net.save_checkpoint(&dir.join(format!("ckpt_{:05}.bin", iter + 1)), (iter + 1) as u64)?;
            }
        }
    }

    for p in test {
        let (h, w) = (p.net_image.height, p.net_image.width);
        let mut images = Tensor::zeros(&[1, 1, h, w]);
        images.data_mut().copy_from_slice(p.net_image.values());
        let pred = net.predict(&images)?;
        let net_mask = mask_from_plane(pred.data(), h, w, p.net_image.spacing);
        let automatic = post_process(&upsample2_nearest(&net_mask));
        for (j, op_mask) in p.analysis_masks.iter().enumerate() {
            out.rows.push(make_row(
                &p.patient_id,
                &p.name,
                &p.stage,
                "computer",
                &format!("op{}", j + 1),
                &automatic,
                op_mask,
            )?);
        }
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            out.inter.push(make_row(
                &p.patient_id,
                &p.name,
                &p.stage,
                &format!("op{}", a + 1),
                &format!("op{}", b + 1),
                &p.analysis_masks[a],
                &p.analysis_masks[b],
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct CrossvalOutput {
    /// computer-to-operator rows, 3 per test image
    pub metrics: Vec<MetricRow>,
    /// operator-pair rows, 3 per test image
    pub interobserver: Vec<MetricRow>,
    /// (fold, iteration, loss)
    pub loss_curves: Vec<(usize, usize, f64)>,
    /// (iteration, mean test dice) on the first fold, when enabled
    pub dice_curve: Vec<(usize, f64)>,
}

/// Full leave-one-patient-out run. Folds execute in parallel, each with its
/// own RNG stream derived from (seed, fold); outputs are assembled in fold
/// order so results are independent of scheduling.
pub fn run_crossval(
    root: &Path,
    manifest: &Manifest,
    net_cfg: &NetworkConfig,
    loss_cfg: &LossConfig,
    tc: &TrainConfig,
) -> Result<CrossvalOutput> {
    let cases = load_all(root, manifest)?;
    let dims = analysis_dims(&cases);
    let prepped: Vec<Prepped> = cases.iter().map(|c| prep_case(c, dims)).collect::<Result<_>>()?;
    let plan = plan_lopo(manifest)?;
    let fold_outputs: Vec<Result<FoldOutput>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(i, f, &prepped, net_cfg, loss_cfg, tc, None))
        .collect();
    let mut out = CrossvalOutput::default();
    for (fold_idx, fo) in fold_outputs.into_iter().enumerate() {
        let fo = fo?;
        out.metrics.extend(fo.rows);
        out.interobserver.extend(fo.inter);
        out.loss_curves
            .extend(fo.losses.into_iter().enumerate().map(|(i, l)| (fold_idx, i + 1, l)));
        if fold_idx == 0 {
            out.dice_curve = fo.dice_curve;
        }
    }
    Ok(out)
}

pub fn write_crossval_outputs(out_dir: &Path, out: &CrossvalOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_metric_csv(&out_dir.join("metrics.csv"), &out.metrics)?;
    write_metric_csv(&out_dir.join("interobserver.csv"), &out.interobserver)?;
    let mut curves = String::from("fold,iteration,loss\n");
    for &(fold, iter, loss) in &out.loss_curves {
        curves.push_str(&format!("{fold},{iter},{}\n", fmt_sig6(loss)));
    }
    std::fs::write(out_dir.join("curves.csv"), curves)?;
    if !out.dice_curve.is_empty() {
        let mut dc = String::from("iteration,dice\n");
        for &(iter, dice) in &out.dice_curve {
            dc.push_str(&format!("{iter},{}\n", fmt_sig6(dice)));
        }
        std::fs::write(out_dir.join("dice_curve.csv"), dc)?;
    }
    Ok(())
}

/// Single-split training (the first LOPO fold), with optional checkpoints for
/// activation histograms; writes the same file set as `run_crossval` but for
/// one fold only.
pub fn train_single(
    root: &Path,
    manifest: &Manifest,
    net_cfg: &NetworkConfig,
    loss_cfg: &LossConfig,
    tc: &TrainConfig,
    out_dir: &Path,
) -> Result<CrossvalOutput> {
    let cases = load_all(root, manifest)?;
    let dims = analysis_dims(&cases);
    let prepped: Vec<Prepped> = cases.iter().map(|c| prep_case(c, dims)).collect::<Result<_>>()?;
    let plan = plan_lopo(manifest)?;
    std::fs::create_dir_all(out_dir)?;
    let fo = run_fold(
        0,
        &plan.folds[0],
        &prepped,
        net_cfg,
        loss_cfg,
        tc,
        Some(&out_dir.join("checkpoints")),
    )?;
    let out = CrossvalOutput {
        metrics: fo.rows,
        interobserver: fo.inter,
        loss_curves: fo.losses.into_iter().enumerate().map(|(i, l)| (0, i + 1, l)).collect(),
        dice_curve: fo.dice_curve,
    };
    write_crossval_outputs(out_dir, &out)?;
    Ok(out)
}

// ── activation histograms ───────────────────────────────────────────

pub const HIST_BINS: usize = 64;
pub const HIST_LO: f64 = -2.0;
pub const HIST_HI: f64 = 4.0;

/// Histogram of last-block activations of a saved network on a probe input.
/// Out-of-range values clamp into the edge bins, so counts always sum to the
/// activation count.
pub fn activation_histogram(checkpoint: &Path, probe: &Tensor) -> Result<Vec<u64>> {
    let (mut net, _) = Network::load_checkpoint(checkpoint)?;
    let mut tape = Tape::new();
    let input = tape.leaf(probe.clone(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = net.forward(&mut tape, input, false, &mut rng)?;
    let acts = tape.value(pass.last_act);
    let mut bins = vec![0u64; HIST_BINS];
    let scale = HIST_BINS as f64 / (HIST_HI - HIST_LO);
    for &v in acts.data() {
        let b = (((v - HIST_LO) * scale).floor() as i64).clamp(0, HIST_BINS as i64 - 1);
        bins[b as usize] += 1;
    }
    Ok(bins)
}

/// CSV with one row per (checkpoint, bin).
pub fn emit_activation_histogram(
    checkpoints: &[(usize, PathBuf)],
    probe: &Tensor,
    out_path: &Path,
) -> Result<()> {
    let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    let mut text = String::from("iteration,bin_low,bin_high,count\n");
    for (iteration, path) in checkpoints {
        if !path.is_file() {
            return Err(HarnessError::Invalid(format!(
                "missing checkpoint for iteration {iteration}: {}",
                path.display()
            )));
        }
        let bins = activation_histogram(path, probe)?;
        for (i, count) in bins.iter().enumerate() {
            text.push_str(&format!(
                "{iteration},{},{},{count}\n",
                fmt_sig6(HIST_LO + i as f64 * width),
                fmt_sig6(HIST_LO + (i + 1) as f64 * width),
            ));
        }
    }
    std::fs::write(out_path, text)?;
    Ok(())
}
