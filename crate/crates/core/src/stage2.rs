//! Stage 2: anomaly scoring against the full history.
//!
//! A candidate's mean embedding in `X` is compared with its mean embedding
//! (same grid cells) in every historical step `T_1..T_n`. The anomaly score
//! is the minimum of those distances: a change that already happened at some
//! point in history is normal and scores low, however different `T_1` is.
//!
//! The printed aggregation `min(sum_i D(x, t_i))` is read as
//! `min_i D(x, t_i)`; a sum over steps has nothing to minimise and would
//! grow with history length instead of being suppressed by any single match.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{distance, mask_mean_embedding, EmbeddingMap, Metric};
use crate::error::{Error, Result};
use crate::maps::{BinaryMap, ChangeDensityMap, Provenance};
use crate::scalar::Scalar;
use crate::stage1::{CandidateInstance, CandidateLine};

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreRecord<T> {
    /// Index into the candidate list that was scored.
    pub candidate: usize,
    /// `D(x, t_i)` for `i = 1..=n`, nearest step first.
    pub distances: Vec<T>,
    pub s_a: T,
    /// 1-based history index of the minimum (first one on ties).
    pub argmin_step: usize,
}

/// `S_a = min_i D(x, t_i)` over the supplied history vectors (`T_1` first).
pub fn anomaly_score<T: Scalar>(
    x_vec: &[T],
    history: &[&[T]],
    metric: Metric,
) -> Result<AnomalyScoreRecord<T>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let distances = history
        .iter()
        .map(|t| distance(x_vec, t, metric))
        .collect::<Result<Vec<_>>>()?;
    let (argmin, s_a) = distances
        .iter()
        .copied()
        .enumerate()
        .fold((0, distances[0]), |best, (i, d)| if d < best.1 { (i, d) } else { best });
    Ok(AnomalyScoreRecord {
        candidate: 0,
        distances,
        s_a,
        argmin_step: argmin + 1,
    })
}

/// Embeddings keyed by `(tile index, step index)`.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore<T> {
    maps: HashMap<(usize, usize), EmbeddingMap<T>>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new() -> Self {
        Self {
            maps: HashMap::new(),
        }
    }

    pub fn insert(&mut self, tile: usize, step: usize, emb: EmbeddingMap<T>) {
        self.maps.insert((tile, step), emb);
    }

    pub fn get(&self, tile: usize, step: usize) -> Option<&EmbeddingMap<T>> {
        self.maps.get(&(tile, step))
    }

    pub fn contains(&self, tile: usize, step: usize) -> bool {
        self.maps.contains_key(&(tile, step))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn lookup<'a, T: Scalar>(
    store: &'a EmbeddingStore<T>,
    tile: usize,
    step: usize,
) -> Result<&'a EmbeddingMap<T>> {
    store.get(tile, step).ok_or_else(|| {
        Error::Manifest(format!("missing embedding for tile {tile}, step {step}"))
    })
}

/// Scores every candidate. `x_step` is the step index of `X` and
/// `history_steps` lists the step indices of `T_1, T_2, ...` in that order.
/// The candidate's grid mask is shared across all steps.
pub fn score_candidates<T: Scalar>(
    candidates: &[CandidateInstance<T>],
    store: &EmbeddingStore<T>,
    x_step: usize,
    history_steps: &[usize],
    metric: Metric,
) -> Result<Vec<AnomalyScoreRecord<T>>> {
    if history_steps.is_empty() {
        return Err(Error::EmptyHistory);
    }
    candidates
        .par_iter()
        .enumerate()
        .map(|(idx, c)| {
            let x_vec = mask_mean_embedding(lookup(store, c.tile_index, x_step)?, &c.grid)?;
            let history = history_steps
                .iter()
                .map(|&s| mask_mean_embedding(lookup(store, c.tile_index, s)?, &c.grid))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[T]> = history.iter().map(Vec::as_slice).collect();
            let mut rec = anomaly_score(&x_vec, &refs, metric)?;
            rec.candidate = idx;
            Ok(rec)
        })
        .collect()
}

/// Paints each candidate's pixels with its `S_a` (pixel-wise max where
/// candidates overlap) and thresholds at the scene-level rank quantile.
pub fn binarize_anomalies<T: Scalar>(
    records: &[AnomalyScoreRecord<T>],
    candidates: &[CandidateInstance<T>],
    height: usize,
    width: usize,
    q: f64,
) -> Result<(ChangeDensityMap<T>, BinaryMap)> {
    let mut density: ChangeDensityMap<T> = ChangeDensityMap::zeros(height, width, Provenance::Stage2);
    {
        let data = density.data_mut();
        for rec in records {
            let c = candidates.get(rec.candidate).ok_or_else(|| {
                Error::Manifest(format!("record refers to unknown candidate {}", rec.candidate))
            })?;
            for (y, x) in c.scene_pixels() {
                if y >= height || x >= width {
                    return Err(Error::DimensionMismatch(format!(
                        "candidate pixel ({x}, {y}) outside {width}x{height} scene"
                    )));
                }
                let v = &mut data[y * width + x];
                *v = v.max(rec.s_a);
            }
        }
    }
    let binary = density.binarize_quantile(q)?;
    Ok((density, binary))
}

/// JSON-lines record for exported anomaly scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub candidate: CandidateLine,
    pub distances: Vec<f64>,
    pub s_a: f64,
    pub argmin_step: usize,
}

impl ScoreLine {
    pub fn new<T: Scalar>(rec: &AnomalyScoreRecord<T>, cand: &CandidateInstance<T>) -> Self {
        Self {
            candidate: cand.into(),
            distances: rec.distances.iter().map(|d| d.as_f64()).collect(),
            s_a: rec.s_a.as_f64(),
            argmin_step: rec.argmin_step,
        }
    }
}
