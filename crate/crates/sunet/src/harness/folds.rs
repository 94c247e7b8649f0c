//! Leave-one-patient-out fold planning.

use super::dataset::Manifest;
use super::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub patient_id: String,
    /// manifest entry indices
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// One fold per patient; the fold's test set is every image of that patient.
pub fn plan_lopo(manifest: &Manifest) -> Result<FoldPlan> {
    let patients = manifest.patients();
    if patients.len() < 2 {
        return Err(HarnessError::Invalid(format!(
            "leave-one-patient-out needs at least 2 patients, got {}",
            patients.len()
        )));
    }
    let folds = patients
        .into_iter()
        .map(|patient_id| {
            let (test, train) = (0..manifest.entries.len())
                .partition(|&i| manifest.entries[i].patient_id == patient_id);
            Fold { patient_id, train, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}
