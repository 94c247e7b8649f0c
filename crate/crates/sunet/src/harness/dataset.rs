//! On-disk dataset layout: `<root>/manifest.json`, `<root>/images/*.pgm`,
//! `<root>/masks/<op1|op2|op3>/*.pgm`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::imageops::{BinaryMask, GrayImage};
use crate::pgm;
use crate::stats::STAGES;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub stage: String,
    /// paths relative to the dataset root
    pub image: String,
    pub masks: [String; 3],
    pub spacing_row_mm: f64,
    pub spacing_col_mm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(root.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate(root)?;
        Ok(m)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.patient_id.is_empty() {
                return Err(HarnessError::Invalid(format!("entry {i}: empty patient id")));
            }
            if !STAGES.contains(&e.stage.as_str()) {
                return Err(HarnessError::Invalid(format!(
                    "entry {i}: unknown stage '{}'",
                    e.stage
                )));
            }
            if e.spacing_row_mm <= 0.0 || e.spacing_col_mm <= 0.0 {
                return Err(HarnessError::Invalid(format!("entry {i}: nonpositive spacing")));
            }
            for p in std::iter::once(&e.image).chain(e.masks.iter()) {
                if !root.join(p).is_file() {
                    return Err(HarnessError::Invalid(format!("entry {i}: missing file {p}")));
                }
            }
        }
        Ok(())
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.patient_id) {
                out.push(e.patient_id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LabeledCase {
    pub patient_id: String,
    pub stage: String,
    /// image file stem, used as the image id in reports
    pub name: String,
    pub image: GrayImage,
    pub masks: [BinaryMask; 3],
}

pub fn load_case(root: &Path, entry: &ManifestEntry) -> Result<LabeledCase> {
    let spacing = (entry.spacing_row_mm, entry.spacing_col_mm);
    let image = pgm::load_gray(&root.join(&entry.image), spacing)?;
    let mut masks = Vec::with_capacity(3);
    for p in &entry.masks {
        let m = pgm::load_mask(&root.join(p), spacing)?;
        if (m.height, m.width) != (image.height, image.width) {
            return Err(HarnessError::Invalid(format!(
                "mask {p} grid {}x{} does not match image {}x{}",
                m.height, m.width, image.height, image.width
            )));
        }
        if m.area_px() == 0 {
            return Err(HarnessError::Invalid(format!("mask {p} is empty")));
        }
        masks.push(m);
    }
    let name = Path::new(&entry.image)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(&entry.image)
        .to_string();
    Ok(LabeledCase {
        patient_id: entry.patient_id.clone(),
        stage: entry.stage.clone(),
        name,
        image,
        masks: masks.try_into().unwrap(),
    })
}

pub fn load_all(root: &Path, manifest: &Manifest) -> Result<Vec<LabeledCase>> {
    manifest.entries.iter().map(|e| load_case(root, e)).collect()
}
