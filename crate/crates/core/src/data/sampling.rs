use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A training unit: a frame index or a clip start index within a video.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub video_id: String,
    pub index: usize,
}

impl UnitId {
    pub fn new(video_id: impl Into<String>, index: usize) -> Self {
        Self {
            video_id: video_id.into(),
            index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub id: UnitId,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeight {
    pub unit: UnitId,
    pub weight: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    /// One entry per input unit, in input order.
    pub weights: Vec<SampleWeight>,
    /// Factor applied to every negative weight.
    pub correction: f64,
    /// Catalog videos that contributed no units.
    pub excluded_videos: Vec<String>,
}

impl WeightTable {
    pub fn total(&self, polarity: Polarity) -> f64 {
        self.weights
            .iter()
            .filter(|w| w.polarity == polarity)
            .map(|w| w.weight)
            .sum()
    }

    pub fn weight_of(&self, unit: &UnitId) -> Option<f64> {
        self.weights.iter().find(|w| &w.unit == unit).map(|w| w.weight)
    }
}

/// Each unit gets the reciprocal of the number of units its video
/// contributes (per polarity); negative weights are then rescaled so both
/// polarities carry the same total weight.
pub fn compute_sample_weights(units: &[Unit], catalog: &[String]) -> Result<WeightTable> {
    let known: BTreeSet<&str> = catalog.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<(&str, Polarity), usize> = BTreeMap::new();
    for u in units {
        if !known.contains(u.id.video_id.as_str()) {
            return Err(Error::UnknownVideo(u.id.video_id.clone()));
        }
        *counts.entry((u.id.video_id.as_str(), u.polarity)).or_default() += 1;
    }

    let mut weights: Vec<SampleWeight> = units
        .iter()
        .map(|u| SampleWeight {
            unit: u.id.clone(),
            weight: 1.0 / counts[&(u.id.video_id.as_str(), u.polarity)] as f64,
            polarity: u.polarity,
        })
        .collect();

    let sum = |ws: &[SampleWeight], p: Polarity| -> f64 {
        ws.iter().filter(|w| w.polarity == p).map(|w| w.weight).sum()
    };
    let pos = sum(&weights, Polarity::Positive);
    let neg = sum(&weights, Polarity::Negative);
    let correction = if pos > 0.0 && neg > 0.0 { pos / neg } else { 1.0 };
    for w in weights.iter_mut().filter(|w| w.polarity == Polarity::Negative) {
        w.weight *= correction;
    }

    let used: BTreeSet<&str> = counts.keys().map(|(v, _)| *v).collect();
    let excluded_videos: Vec<String> = catalog
        .iter()
        .filter(|v| !used.contains(v.as_str()))
        .cloned()
        .collect();
    if !excluded_videos.is_empty() {
        log::warn!("{} videos contribute no units and are excluded", excluded_videos.len());
    }
    Ok(WeightTable {
        weights,
        correction,
        excluded_videos,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch<U> {
    pub positives: Vec<U>,
    pub negatives: Vec<U>,
}

impl<U> Batch<U> {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One epoch: every positive unit exactly once in shuffled order, each batch
/// half positives and half negatives drawn uniformly with replacement. A
/// trailing short batch keeps the two halves equal.
pub fn make_epoch_schedule<U: Clone>(
    positives: &[U],
    negatives: &[U],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch<U>>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be a positive even number, got {batch_size}"
        )));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Config(
            "an epoch needs at least one positive and one negative unit".into(),
        ));
    }
    let half = batch_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(&mut rng);

    Ok(order
        .chunks(half)
        .map(|chunk| {
            let positives = chunk.iter().map(|&i| positives[i].clone()).collect();
            let negatives = (0..chunk.len())
                .map(|_| negatives[rng.random_range(0..negatives.len())].clone())
                .collect();
            Batch { positives, negatives }
        })
        .collect())
}
