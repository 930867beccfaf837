//! Label-free comparison detectors.
//!
//! `image_diff` and `cva` work on raw intensities of `T_1` and `X`.
//! `ts_cva` is the per-cell, non-instance counterpart of the two-stage
//! detector: every embedding cell of `X` is compared with the same cell in
//! each historical step and keeps the smallest distance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{distance_unchecked, EmbeddingMap, Metric};
use crate::error::{Error, Result};
use crate::maps::{ChangeDensityMap, Provenance};
use crate::scalar::Scalar;
use crate::scene::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Image differencing.
    Id,
    /// Change vector analysis.
    Cva,
    /// Per-cell embedding distance between `T_1` and `X`.
    EmbedDiff,
    /// Per-cell embedding distance, minimised over all history steps.
    TsCva,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Id, Baseline::Cva, Baseline::EmbedDiff, Baseline::TsCva];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Id => "id",
            Baseline::Cva => "cva",
            Baseline::EmbedDiff => "embed-diff",
            Baseline::TsCva => "ts-cva",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter {
                field: "baseline",
                reason: format!("unknown baseline `{s}`"),
            })
    }
}

fn check_pair<T: Scalar>(t1: &Raster<T>, x: &Raster<T>) -> Result<()> {
    if !t1.same_shape(x) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            t1.height(),
            t1.width(),
            t1.channels(),
            x.height(),
            x.width(),
            x.channels()
        )));
    }
    Ok(())
}

/// Mean absolute difference over channels.
pub fn image_diff<T: Scalar>(t1: &Raster<T>, x: &Raster<T>) -> Result<ChangeDensityMap<T>> {
    check_pair(t1, x)?;
    let c = t1.channels();
    let inv = T::one() / T::from_usize_lossy(c);
    let data = t1
        .data()
        .chunks_exact(c)
        .zip(x.data().chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .fold(T::zero(), |acc, (&p, &q)| acc + (q - p).abs())
                * inv
        })
        .collect();
    ChangeDensityMap::from_vec(t1.height(), t1.width(), data, Provenance::Baseline)
}

/// Euclidean magnitude of the per-pixel channel difference vector.
pub fn cva<T: Scalar>(t1: &Raster<T>, x: &Raster<T>) -> Result<ChangeDensityMap<T>> {
    check_pair(t1, x)?;
    let c = t1.channels();
    let data = t1
        .data()
        .chunks_exact(c)
        .zip(x.data().chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .fold(T::zero(), |acc, (&p, &q)| acc + (q - p) * (q - p))
                .sqrt()
        })
        .collect();
    ChangeDensityMap::from_vec(t1.height(), t1.width(), data, Provenance::Baseline)
}

/// Per-cell `min_i D(x(c), t_i(c))`, replicated to pixel resolution
/// (`h*stride x w*stride`). `history` lists `T_1` first.
pub fn ts_cva_tile<T: Scalar>(
    x: &EmbeddingMap<T>,
    history: &[&EmbeddingMap<T>],
    metric: Metric,
) -> Result<ChangeDensityMap<T>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if let Some(bad) = history.iter().find(|t| !t.same_grid(x)) {
        return Err(Error::DimensionMismatch(format!(
            "history grid {}x{}x{} vs X grid {}x{}x{}",
            bad.dim(),
            bad.h(),
            bad.w(),
            x.dim(),
            x.h(),
            x.w()
        )));
    }
    let (gh, gw, s) = (x.h(), x.w(), x.stride());
    let cell_scores: Vec<T> = (0..gh * gw)
        .map(|i| {
            history
                .iter()
                .map(|t| distance_unchecked(x.cell_at(i), t.cell_at(i), metric))
                .fold(T::infinity(), T::min)
        })
        .collect();
    let (h, w) = (gh * s, gw * s);
    let mut data = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            data.push(cell_scores[(py / s) * gw + px / s]);
        }
    }
    ChangeDensityMap::from_vec(h, w, data, Provenance::Baseline)
}
