//! Dense embedding grids and everything that compares them.
//!
//! All change and anomaly scores are computed in embedding space: a tile is
//! mapped to a `D x h x w` grid of feature vectors at a fixed pixel stride,
//! pixel masks are projected onto that grid, and masks are represented by the
//! mean vector of their member cells.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::{Raster, TileSpec};

pub const DEFAULT_STRIDE: usize = 16;

/// Row-major grid of `dim`-vectors; cell `(y, x)` covers pixels
/// `[y*stride, (y+1)*stride) x [x*stride, (x+1)*stride)` of its tile.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap<T> {
    dim: usize,
    h: usize,
    w: usize,
    stride: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingMap<T> {
    pub fn new(dim: usize, h: usize, w: usize, stride: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || h == 0 || w == 0 || stride == 0 {
            return Err(Error::DimensionMismatch(format!(
                "degenerate embedding D={dim} h={h} w={w} stride={stride}"
            )));
        }
        if data.len() != dim * h * w {
            return Err(Error::DimensionMismatch(format!(
                "{} values for D={dim} h={h} w={w}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite embedding value at {i}")));
        }
        Ok(Self {
            dim,
            h,
            w,
            stride,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.w + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn cell_at(&self, idx: usize) -> &[T] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dim == other.dim && self.h == other.h && self.w == other.w
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    L1,
    L2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::L1, Metric::L2];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter {
                field: "metric",
                reason: format!("unknown metric `{s}` (expected cosine, l1 or l2)"),
            })
    }
}

/// Distance between two equal-length vectors.
///
/// Cosine distance is `1 - u.v / (|u| |v|)`, taken as 0 when either vector
/// is zero and clamped to `[0, 2]`.
pub fn distance<T: Scalar>(u: &[T], v: &[T], metric: Metric) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "vector lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(distance_unchecked(u, v, metric))
}

#[inline]
pub(crate) fn distance_unchecked<T: Scalar>(u: &[T], v: &[T], metric: Metric) -> T {
    match metric {
        Metric::Cosine => {
            let mut dot = T::zero();
            let mut nu = T::zero();
            let mut nv = T::zero();
            for (&a, &b) in u.iter().zip(v) {
                dot = dot + a * b;
                nu = nu + a * a;
                nv = nv + b * b;
            }
            if nu == T::zero() || nv == T::zero() {
                return T::zero();
            }
            let d = T::one() - dot / (nu * nv).sqrt();
            d.max(T::zero()).min(T::lit(2.0))
        }
        Metric::L1 => u
            .iter()
            .zip(v)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs()),
        Metric::L2 => u
            .iter()
            .zip(v)
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            .sqrt(),
    }
}

/// Set of tile-local pixels, stored as sorted row-major indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u32>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, mut pixels: Vec<u32>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        debug_assert!(pixels.last().map_or(true, |&p| (p as usize) < height * width));
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if f(y, x) {
                    pixels.push((y * width + x) as u32);
                }
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[u32] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pixels
            .iter()
            .map(|&p| (p as usize / self.width, p as usize % self.width))
    }
}

/// Cell membership of a mask at embedding resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl GridMask {
    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {h}x{w} grid",
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { h, w, bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    /// Row-major indices of the member cells.
    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Projects a pixel mask onto the `stride` grid: a cell is a member when at
/// least half of its footprint is covered. A mask that covers no cell that
/// much maps to the single cell holding its centroid.
pub fn project_mask(mask: &PixelMask, stride: usize) -> Result<GridMask> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if stride == 0 || mask.height % stride != 0 || mask.width % stride != 0 {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} not divisible by stride {stride}",
            mask.height, mask.width
        )));
    }
    let (gh, gw) = (mask.height / stride, mask.width / stride);
    let mut counts = vec![0usize; gh * gw];
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for (y, x) in mask.coords() {
        counts[(y / stride) * gw + x / stride] += 1;
        sy += y as f64;
        sx += x as f64;
    }
    // 2 * count >= stride^2 avoids rounding for odd strides
    let full = stride * stride;
    let mut bits: Vec<bool> = counts.iter().map(|&c| 2 * c >= full).collect();
    if !bits.iter().any(|&b| b) {
        let n = mask.len() as f64;
        let cy = ((sy / n) as usize / stride).min(gh - 1);
        let cx = ((sx / n) as usize / stride).min(gw - 1);
        bits[cy * gw + cx] = true;
    }
    Ok(GridMask { h: gh, w: gw, bits })
}

/// Arithmetic mean of the member cells' vectors.
pub fn mask_mean_embedding<T: Scalar>(emb: &EmbeddingMap<T>, gm: &GridMask) -> Result<Vec<T>> {
    if emb.h != gm.h || emb.w != gm.w {
        return Err(Error::DimensionMismatch(format!(
            "grid mask {}x{} vs embedding {}x{}",
            gm.h, gm.w, emb.h, emb.w
        )));
    }
    let mut acc = vec![T::zero(); emb.dim];
    let mut n = 0usize;
    for idx in gm.cells() {
        for (a, &v) in acc.iter_mut().zip(emb.cell_at(idx)) {
            *a = *a + v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = T::one() / T::from_usize_lossy(n);
    acc.iter_mut().for_each(|a| *a = *a * inv);
    Ok(acc)
}

/// Identifies which tile of which step is being embedded, so cache-backed
/// embedders can locate precomputed features.
#[derive(Clone, Copy, Debug)]
pub struct EmbedKey<'a> {
    pub timestamp: &'a str,
    pub tile: TileSpec,
}

/// Maps a tile to an embedding grid. Implementations must be deterministic.
pub trait Embedder<T: Scalar>: Send + Sync {
    fn embed(&self, tile: &Raster<T>, key: &EmbedKey<'_>) -> Result<EmbeddingMap<T>>;
}

/// Hand-crafted deterministic embedder used when no foundation-model
/// features are available.
///
/// Each cell vector is `[mean_c, std_c, orient_hist_8]` over the cell's own
/// footprint followed by the same features over a `2*stride` context window
/// centred on the cell (coordinates clamped to the tile), L2-normalized.
/// The orientation histogram bins the luminance gradient angle into eight
/// 45-degree sectors centred on 0, 45, ..., 315 degrees, weighted by
/// gradient magnitude and divided by the window's pixel count.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceEmbedder {
    pub stride: usize,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
        }
    }
}

pub const ORIENTATION_BINS: usize = 8;

impl ReferenceEmbedder {
    pub fn dim_for(channels: usize) -> usize {
        2 * (2 * channels + ORIENTATION_BINS)
    }

    pub fn embed_tile<T: Scalar>(&self, tile: &Raster<T>) -> Result<EmbeddingMap<T>> {
        let s = self.stride;
        let (h, w, c) = (tile.height(), tile.width(), tile.channels());
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::DimensionMismatch(format!(
                "tile {h}x{w} not divisible by stride {s}"
            )));
        }
        let (gx_mag, bins) = gradient_field(tile);
        let (gh, gw) = (h / s, w / s);
        let block = 2 * c + ORIENTATION_BINS;
        let dim = 2 * block;
        let mut data = Vec::with_capacity(gh * gw * dim);
        let mut v = vec![T::zero(); dim];
        let half = s / 2;
        for cy in 0..gh {
            for cx in 0..gw {
                let y0 = (cy * s) as isize;
                let x0 = (cx * s) as isize;
                window_features(tile, &gx_mag, &bins, y0, x0, s, &mut v[..block]);
                window_features(
                    tile,
                    &gx_mag,
                    &bins,
                    y0 - half as isize,
                    x0 - half as isize,
                    2 * s,
                    &mut v[block..],
                );
                let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
                if norm > T::zero() {
                    data.extend(v.iter().map(|&x| x / norm));
                } else {
                    data.extend_from_slice(&v);
                }
            }
        }
        EmbeddingMap::new(dim, gh, gw, s, data)
    }
}

impl<T: Scalar> Embedder<T> for ReferenceEmbedder {
    fn embed(&self, tile: &Raster<T>, _key: &EmbedKey<'_>) -> Result<EmbeddingMap<T>> {
        self.embed_tile(tile)
    }
}

/// Central-difference luminance gradient magnitude and orientation bin per
/// pixel, with edge-clamped neighbours.
fn gradient_field<T: Scalar>(tile: &Raster<T>) -> (Vec<T>, Vec<u8>) {
    let (h, w) = (tile.height(), tile.width());
    let lum = tile.luminance();
    let half = T::lit(0.5);
    let mut mag = Vec::with_capacity(h * w);
    let mut bins = Vec::with_capacity(h * w);
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            let gx = (lum[y * w + right] - lum[y * w + left]) * half;
            let gy = (lum[down * w + x] - lum[up * w + x]) * half;
            mag.push((gx * gx + gy * gy).sqrt());
            bins.push(orientation_bin(gy.as_f64(), gx.as_f64()));
        }
    }
    (mag, bins)
}

#[inline]
pub(crate) fn orientation_bin(gy: f64, gx: f64) -> u8 {
    let sector = (gy.atan2(gx) / FRAC_PI_4).round() as i64;
    sector.rem_euclid(ORIENTATION_BINS as i64) as u8
}

/// Writes `[mean_c, std_c, hist_8]` for the `size x size` window at
/// `(y0, x0)` (clamped to the tile) into `out`.
fn window_features<T: Scalar>(
    tile: &Raster<T>,
    mag: &[T],
    bins: &[u8],
    y0: isize,
    x0: isize,
    size: usize,
    out: &mut [T],
) {
    let (h, w, c) = (tile.height(), tile.width(), tile.channels());
    let clamp_y = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let clamp_x = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let n = T::from_usize_lossy(size * size);
    out.iter_mut().for_each(|v| *v = T::zero());
    let (means, rest) = out.split_at_mut(c);
    let (stds, hist) = rest.split_at_mut(c);

    for dy in 0..size {
        let y = clamp_y(y0 + dy as isize);
        for dx in 0..size {
            let x = clamp_x(x0 + dx as isize);
            let px = tile.pixel(y, x);
            for ch in 0..c {
                means[ch] = means[ch] + px[ch];
            }
            let i = y * w + x;
            let b = bins[i] as usize;
            hist[b] = hist[b] + mag[i];
        }
    }
    means.iter_mut().for_each(|m| *m = *m / n);
    hist.iter_mut().for_each(|v| *v = *v / n);

    for dy in 0..size {
        let y = clamp_y(y0 + dy as isize);
        for dx in 0..size {
            let x = clamp_x(x0 + dx as isize);
            let px = tile.pixel(y, x);
            for ch in 0..c {
                let d = px[ch] - means[ch];
                stds[ch] = stds[ch] + d * d;
            }
        }
    }
    stds.iter_mut().for_each(|v| *v = (*v / n).sqrt());
}

/// Embedder that reads pre-exported `.aecd` files named
/// `<timestamp>_<x0>_<y0>.aecd` from a directory.
#[derive(Clone, Debug)]
pub struct CacheEmbedder {
    pub dir: PathBuf,
}

impl CacheEmbedder {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, key: &EmbedKey<'_>) -> PathBuf {
        self.dir.join(cache::cache_file_name(key.timestamp, &key.tile))
    }
}

impl<T: Scalar> Embedder<T> for CacheEmbedder {
    fn embed(&self, tile: &Raster<T>, key: &EmbedKey<'_>) -> Result<EmbeddingMap<T>> {
        let path = self.path_for(key);
        if !path.exists() {
            return Err(Error::MissingEmbedding {
                timestamp: key.timestamp.to_string(),
                x0: key.tile.x0,
                y0: key.tile.y0,
                path,
            });
        }
        let emb: EmbeddingMap<T> = cache::read_cache(&path)?;
        if emb.h * emb.stride != tile.height() || emb.w * emb.stride != tile.width() {
            return Err(Error::DimensionMismatch(format!(
                "{}: grid {}x{} at stride {} does not cover a {}x{} tile",
                path.display(),
                emb.h,
                emb.w,
                emb.stride,
                tile.height(),
                tile.width()
            )));
        }
        Ok(emb)
    }
}
