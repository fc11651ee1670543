use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FOLDS: usize = 5;
const MIN_PATIENTS: usize = N_FOLDS + 1;

/// Patient-level partition into a held-out test set and five
/// cross-validation folds. Serialized as `split.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(rename = "test")]
    pub test_patients: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Test,
    Fold(usize),
}

impl SplitManifest {
    pub fn partition_of(&self, patient_id: &str) -> Option<Partition> {
        if self.test_patients.iter().any(|p| p == patient_id) {
            return Some(Partition::Test);
        }
        self.folds
            .iter()
            .position(|f| f.iter().any(|p| p == patient_id))
            .map(Partition::Fold)
    }

    pub fn development_patients(&self) -> BTreeSet<&str> {
        self.folds.iter().flatten().map(String::as_str).collect()
    }

    /// Patients of every fold except `validation_fold`.
    pub fn training_patients(&self, validation_fold: usize) -> BTreeSet<&str> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != validation_fold)
            .flat_map(|(_, f)| f.iter().map(String::as_str))
            .collect()
    }

    pub fn validation_patients(&self, validation_fold: usize) -> BTreeSet<&str> {
        self.folds
            .get(validation_fold)
            .map(|f| f.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn test_set(&self) -> BTreeSet<&str> {
        self.test_patients.iter().map(String::as_str).collect()
    }

    /// Checks fold count, pairwise disjointness and (when given) coverage of
    /// exactly `all_patients`.
    pub fn validate(&self, all_patients: Option<&[String]>) -> Result<()> {
        if self.folds.len() != N_FOLDS {
            return Err(Error::Format {
                file: "split.json".into(),
                reason: format!("expected {N_FOLDS} folds, found {}", self.folds.len()),
            });
        }
        let mut seen = BTreeSet::new();
        for p in self.test_patients.iter().chain(self.folds.iter().flatten()) {
            if !seen.insert(p.as_str()) {
                return Err(Error::Format {
                    file: "split.json".into(),
                    reason: format!("patient {p} appears in more than one partition"),
                });
            }
        }
        if let Some(all) = all_patients {
            let expected: BTreeSet<&str> = all.iter().map(String::as_str).collect();
            if expected != seen {
                return Err(Error::Format {
                    file: "split.json".into(),
                    reason: "partitions do not cover exactly the dataset's patients".into(),
                });
            }
        }
        Ok(())
    }
}

/// Randomly assigns 20% of patients (rounded half up) to the test set and
/// deals the rest into five folds; fold remainders go to the earliest folds.
pub fn build_patient_split(patient_ids: &[String], seed: u64) -> Result<SplitManifest> {
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < MIN_PATIENTS {
        return Err(Error::SplitInfeasible {
            patients: n,
            required: MIN_PATIENTS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_test = (2 * n + 5) / 10;
    let dev = n - n_test;
    let base = dev / N_FOLDS;
    let extra = dev % N_FOLDS;

    let mut rest = ids.split_off(n_test);
    let mut test_patients = ids;
    test_patients.sort();

    let mut folds = Vec::with_capacity(N_FOLDS);
    for k in 0..N_FOLDS {
        let size = base + usize::from(k < extra);
        let tail = rest.split_off(size);
        let mut fold = rest;
        fold.sort();
        folds.push(fold);
        rest = tail;
    }
    Ok(SplitManifest {
        test_patients,
        folds,
    })
}
