//! Stage 1: bidirectional bi-temporal change detection between `T_1` and `X`.
//!
//! Each image of the pair is segmented; every instance is scored by the
//! distance between its mean embeddings in `T_1` and `X`, and the score is
//! painted over the instance's pixels. Instances from `T_1` catch
//! disappearing objects, instances from `X` catch appearing ones. The two
//! density maps are fused by a pixel-wise maximum and binarized at a
//! scene-level rank quantile.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embed::{
    distance_unchecked, mask_mean_embedding, project_mask, EmbedKey, Embedder, EmbeddingMap,
    GridMask, Metric, PixelMask,
};
use crate::error::{Error, Result};
use crate::maps::{BinaryMap, ChangeDensityMap, Provenance};
use crate::scalar::Scalar;
use crate::scene::{Raster, TileSpec};
use crate::segment::{InstanceMaskSet, Segmenter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Masks segmented in `T_1` (object disappearance).
    FromT1,
    /// Masks segmented in `X` (object appearance).
    FromX,
}

/// A scored Stage-1 instance.
#[derive(Clone, Debug)]
pub struct CandidateInstance<T> {
    /// Index of the tile in the scene's tile plan.
    pub tile_index: usize,
    pub tile: TileSpec,
    pub instance: u32,
    pub direction: Direction,
    pub score: T,
    /// Tile-local pixels, padding included.
    pub mask: PixelMask,
    pub grid: GridMask,
}

impl<T: Scalar> CandidateInstance<T> {
    /// Scene coordinates of the candidate's non-padding pixels.
    pub fn scene_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mask
            .coords()
            .filter_map(|(ty, tx)| self.tile.to_scene(ty, tx))
    }
}

/// JSON-lines record for exported candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub tile: [usize; 2],
    pub instance: u32,
    pub direction: Direction,
    pub score: f64,
}

impl<T: Scalar> From<&CandidateInstance<T>> for CandidateLine {
    fn from(c: &CandidateInstance<T>) -> Self {
        Self {
            tile: [c.tile.x0, c.tile.y0],
            instance: c.instance,
            direction: c.direction,
            score: c.score.as_f64(),
        }
    }
}

/// Distance between the mask's mean embeddings in `f_t` and `f_x`.
pub fn change_score<T: Scalar>(
    m: &GridMask,
    f_t: &EmbeddingMap<T>,
    f_x: &EmbeddingMap<T>,
    metric: Metric,
) -> Result<T> {
    if !f_t.same_grid(f_x) {
        return Err(Error::DimensionMismatch(format!(
            "embedding grids {}x{}x{} and {}x{}x{}",
            f_t.dim(),
            f_t.h(),
            f_t.w(),
            f_x.dim(),
            f_x.h(),
            f_x.w()
        )));
    }
    let a = mask_mean_embedding(f_t, m)?;
    let b = mask_mean_embedding(f_x, m)?;
    Ok(distance_unchecked(&a, &b, metric))
}

/// Scores every instance of `masks` and paints the scores into a tile-sized
/// density map. Returns `(map, [(instance id, score, pixel mask, grid mask)])`.
#[allow(clippy::type_complexity)]
pub fn score_instances<T: Scalar>(
    masks: &InstanceMaskSet,
    f_t: &EmbeddingMap<T>,
    f_x: &EmbeddingMap<T>,
    metric: Metric,
) -> Result<(ChangeDensityMap<T>, Vec<(u32, T, PixelMask, GridMask)>)> {
    let mut map = ChangeDensityMap::zeros(masks.height(), masks.width(), Provenance::Stage1);
    let mut scored = Vec::with_capacity(masks.len());
    for (rec, pm) in masks.instances().iter().zip(masks.pixel_masks()) {
        let gm = project_mask(&pm, f_t.stride())?;
        let s = change_score(&gm, f_t, f_x, metric)?;
        let data = map.data_mut();
        for &p in pm.pixels() {
            data[p as usize] = s;
        }
        scored.push((rec.id, s, pm, gm));
    }
    Ok((map, scored))
}

/// Per-tile Stage-1 output with the embeddings it computed, so Stage 2 can
/// reuse them.
#[derive(Clone, Debug)]
pub struct Stage1Tile<T> {
    pub tile_index: usize,
    pub tile: TileSpec,
    pub c_t: ChangeDensityMap<T>,
    pub c_x: ChangeDensityMap<T>,
    pub candidates: Vec<CandidateInstance<T>>,
    pub f_t: EmbeddingMap<T>,
    pub f_x: EmbeddingMap<T>,
}

/// Runs both directions on one tile pair. `ts_t`/`ts_x` are the step
/// timestamps passed to the embedder.
#[allow(clippy::too_many_arguments)]
pub fn run_tile<T: Scalar>(
    tile_index: usize,
    tile: TileSpec,
    tile_t: &Raster<T>,
    tile_x: &Raster<T>,
    ts_t: &str,
    ts_x: &str,
    embedder: &dyn Embedder<T>,
    segmenter: &dyn Segmenter<T>,
    metric: Metric,
) -> Result<Stage1Tile<T>> {
    if !tile_t.same_shape(tile_x) {
        return Err(Error::DimensionMismatch("T1 and X tiles differ in shape".into()));
    }
    let f_t = embedder.embed(tile_t, &EmbedKey { timestamp: ts_t, tile })?;
    let f_x = embedder.embed(tile_x, &EmbedKey { timestamp: ts_x, tile })?;
    let mut candidates = Vec::new();
    let mut maps = Vec::with_capacity(2);
    for (direction, source) in [(Direction::FromT1, tile_t), (Direction::FromX, tile_x)] {
        let masks = segmenter.segment(source)?;
        let (map, scored) = score_instances(&masks, &f_t, &f_x, metric)?;
        maps.push(map);
        candidates.extend(scored.into_iter().map(|(instance, score, mask, grid)| {
            CandidateInstance {
                tile_index,
                tile,
                instance,
                direction,
                score,
                mask,
                grid,
            }
        }));
    }
    let c_x = maps.pop().expect("two directions");
    let c_t = maps.pop().expect("two directions");
    Ok(Stage1Tile {
        tile_index,
        tile,
        c_t,
        c_x,
        candidates,
        f_t,
        f_x,
    })
}

/// Density map and candidates for one direction on a single tile pair.
pub fn direction_density<T: Scalar>(
    tile_t: &Raster<T>,
    tile_x: &Raster<T>,
    masks_from: Direction,
    metric: Metric,
    embedder: &dyn Embedder<T>,
    segmenter: &dyn Segmenter<T>,
) -> Result<(ChangeDensityMap<T>, Vec<CandidateInstance<T>>)> {
    let tile = TileSpec {
        x0: 0,
        y0: 0,
        size: tile_t.width(),
        pad_right: 0,
        pad_bottom: 0,
    };
    if !tile_t.same_shape(tile_x) {
        return Err(Error::DimensionMismatch("T1 and X tiles differ in shape".into()));
    }
    let f_t = embedder.embed(tile_t, &EmbedKey { timestamp: "t1", tile })?;
    let f_x = embedder.embed(tile_x, &EmbedKey { timestamp: "x", tile })?;
    let source = match masks_from {
        Direction::FromT1 => tile_t,
        Direction::FromX => tile_x,
    };
    let masks = segmenter.segment(source)?;
    let (map, scored) = score_instances(&masks, &f_t, &f_x, metric)?;
    let cands = scored
        .into_iter()
        .map(|(instance, score, mask, grid)| CandidateInstance {
            tile_index: 0,
            tile,
            instance,
            direction: masks_from,
            score,
            mask,
            grid,
        })
        .collect();
    Ok((map, cands))
}

/// `g1(max(C_t, C_x))`: pixel-wise max then rank-quantile threshold.
pub fn fuse_binarize<T: Scalar>(
    c_t: &ChangeDensityMap<T>,
    c_x: &ChangeDensityMap<T>,
    q: f64,
) -> Result<BinaryMap> {
    c_t.max_with(c_x)?.binarize_quantile(q)
}

/// Ranking order: score descending, then tile, direction and instance
/// ascending.
pub fn candidate_order<T: Scalar>(a: &CandidateInstance<T>, b: &CandidateInstance<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.tile_index.cmp(&b.tile_index))
        .then(a.direction.cmp(&b.direction))
        .then(a.instance.cmp(&b.instance))
}

/// Number kept out of `k` at `keep_fraction`: `ceil(keep_fraction * k)`.
pub fn keep_count(k: usize, keep_fraction: f64) -> usize {
    // the epsilon stops products like 0.3 * 10 from rounding up to 4
    (((keep_fraction * k as f64) - 1e-9).ceil().max(0.0) as usize).min(k)
}

/// Keeps the top `ceil(keep_fraction * K)` candidates by score.
pub fn select_candidates<T: Scalar>(
    mut cands: Vec<CandidateInstance<T>>,
    keep_fraction: f64,
) -> Result<Vec<CandidateInstance<T>>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            field: "keep_fraction",
            reason: format!("{keep_fraction} not in (0, 1]"),
        });
    }
    cands.sort_by(candidate_order);
    let keep = keep_count(cands.len(), keep_fraction);
    cands.truncate(keep);
    Ok(cands)
}
