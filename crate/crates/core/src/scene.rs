//! Aligned time-series rasters, tile planning and stitching.
//!
//! A scene is an ordered stack of co-registered rasters `{T_n, ..., T_1, X}`
//! (oldest first, current image last). Large scenes are cut into
//! non-overlapping square tiles; edge tiles are replication-padded so every
//! tile handed to the embedder and segmenter has the same shape.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::BinaryMap;
use crate::scalar::Scalar;

/// Row-major, channel-interleaved intensity raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidRaster(format!(
                "zero-sized raster {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidRaster(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
    }

    /// Builds a raster from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Per-pixel luminance: Rec.601 weights for RGB, channel mean otherwise.
    pub fn luminance(&self) -> Vec<T> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(n);
        if self.channels == 3 {
            let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
            for px in self.data.chunks_exact(3) {
                out.push(wr * px[0] + wg * px[1] + wb * px[2]);
            }
        } else {
            let inv = T::one() / T::from_usize_lossy(self.channels);
            for px in self.data.chunks_exact(self.channels) {
                out.push(px.iter().copied().sum::<T>() * inv);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::zero))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Explosion,
    Collapse,
    Landslide,
    Fire,
    DamBreak,
    Others,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Explosion,
        Category::Collapse,
        Category::Landslide,
        Category::Fire,
        Category::DamBreak,
        Category::Others,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Explosion => "explosion",
            Category::Collapse => "collapse",
            Category::Landslide => "landslide",
            Category::Fire => "fire",
            Category::DamBreak => "dam_break",
            Category::Others => "others",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown category `{s}`")))
    }
}

/// Pixel-aligned stack of acquisitions, oldest first; the last step is the
/// current image `X`, the one before it `T_1`.
#[derive(Clone, Debug)]
pub struct TimeSeriesScene<T> {
    pub event_id: String,
    pub category: Category,
    steps: Vec<Raster<T>>,
    timestamps: Vec<String>,
    gt_mask: Option<BinaryMap>,
}

impl<T: Scalar> TimeSeriesScene<T> {
    pub fn new(
        event_id: impl Into<String>,
        category: Category,
        steps: Vec<Raster<T>>,
        timestamps: Vec<String>,
        gt_mask: Option<BinaryMap>,
    ) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::InsufficientSteps {
                found: steps.len(),
                required: 2,
            });
        }
        if timestamps.len() != steps.len() {
            return Err(Error::Manifest(format!(
                "{} timestamps for {} steps",
                timestamps.len(),
                steps.len()
            )));
        }
        let first = &steps[0];
        for (i, s) in steps.iter().enumerate().skip(1) {
            if !s.same_shape(first) {
                return Err(Error::DimensionMismatch(format!(
                    "step {i} is {}x{}x{}, step 0 is {}x{}x{}",
                    s.height(),
                    s.width(),
                    s.channels(),
                    first.height(),
                    first.width(),
                    first.channels()
                )));
            }
        }
        if let Some(gt) = &gt_mask {
            if gt.height() != first.height() || gt.width() != first.width() {
                return Err(Error::DimensionMismatch(format!(
                    "gt mask is {}x{}, rasters are {}x{}",
                    gt.height(),
                    gt.width(),
                    first.height(),
                    first.width()
                )));
            }
        }
        Ok(Self {
            event_id: event_id.into(),
            category,
            steps,
            timestamps,
            gt_mask,
        })
    }

    pub fn steps(&self) -> &[Raster<T>] {
        &self.steps
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn gt_mask(&self) -> Option<&BinaryMap> {
        self.gt_mask.as_ref()
    }

    pub fn height(&self) -> usize {
        self.steps[0].height()
    }

    pub fn width(&self) -> usize {
        self.steps[0].width()
    }

    pub fn current(&self) -> &Raster<T> {
        self.steps.last().expect("scene has >= 2 steps")
    }

    /// Number of historical steps `n` (all steps except `X`).
    pub fn history_len(&self) -> usize {
        self.steps.len() - 1
    }

    /// Historical step `T_i`, 1-based with `T_1` the most recent.
    pub fn history(&self, i: usize) -> &Raster<T> {
        assert!(i >= 1 && i <= self.history_len(), "history index {i} out of range");
        &self.steps[self.steps.len() - 1 - i]
    }

    /// Step index (into `steps()`) of historical step `T_i`.
    pub fn history_step_index(&self, i: usize) -> usize {
        self.steps.len() - 1 - i
    }

    /// Copy of the scene with the `k` oldest historical steps removed.
    pub fn drop_oldest(&self, k: usize) -> Result<Self> {
        if self.history_len() < k + 1 {
            return Err(Error::InsufficientSteps {
                found: self.history_len(),
                required: k + 1,
            });
        }
        Ok(Self {
            event_id: self.event_id.clone(),
            category: self.category,
            steps: self.steps[k..].to_vec(),
            timestamps: self.timestamps[k..].to_vec(),
            gt_mask: self.gt_mask.clone(),
        })
    }
}

/// One square tile of a plan; `pad_right`/`pad_bottom` count replicated
/// pixels beyond the image edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileSpec {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
}

impl TileSpec {
    /// Width of the tile footprint that lies inside the image.
    pub fn valid_width(&self) -> usize {
        self.size - self.pad_right
    }

    pub fn valid_height(&self) -> usize {
        self.size - self.pad_bottom
    }

    /// Maps a tile-local pixel to scene coordinates, `None` if it is padding.
    #[inline]
    pub fn to_scene(&self, ty: usize, tx: usize) -> Option<(usize, usize)> {
        (ty < self.valid_height() && tx < self.valid_width()).then(|| (self.y0 + ty, self.x0 + tx))
    }
}

pub const MIN_TILE_SIZE: usize = 64;

/// Non-overlapping row-major tiling of an `height` x `width` image.
pub fn plan_tiles(height: usize, width: usize, tile_size: usize) -> Result<Vec<TileSpec>> {
    if tile_size < MIN_TILE_SIZE {
        return Err(Error::InvalidParameter {
            field: "tile_size",
            reason: format!("{tile_size} < {MIN_TILE_SIZE}"),
        });
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidRaster(format!("zero-sized image {height}x{width}")));
    }
    let rows = height.div_ceil(tile_size);
    let cols = width.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y0 = r * tile_size;
        let pad_bottom = (y0 + tile_size).saturating_sub(height);
        for c in 0..cols {
            let x0 = c * tile_size;
            let pad_right = (x0 + tile_size).saturating_sub(width);
            tiles.push(TileSpec {
                x0,
                y0,
                size: tile_size,
                pad_right,
                pad_bottom,
            });
        }
    }
    Ok(tiles)
}

/// Crops `spec` out of `raster`, replicating the last row/column into padding.
pub fn extract_tile<T: Scalar>(raster: &Raster<T>, spec: &TileSpec) -> Raster<T> {
    let (h, w) = (raster.height(), raster.width());
    Raster::from_fn(spec.size, spec.size, raster.channels(), |ty, tx, c| {
        let y = (spec.y0 + ty).min(h - 1);
        let x = (spec.x0 + tx).min(w - 1);
        raster.get(y, x, c)
    })
}

/// Reassembles per-tile planes (`channels` interleaved values per pixel).
/// Returns `(height, width, data)`; padding is discarded and the result does
/// not depend on the order of `tiles`.
pub(crate) fn stitch_planes<V: Copy + Default>(
    channels: usize,
    tiles: &[(TileSpec, &[V])],
) -> Result<(usize, usize, Vec<V>)> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::IncompleteCoverage("no tiles supplied".into()))?;
    let size = first.0.size;
    let mut height = 0;
    let mut width = 0;
    for (spec, plane) in tiles {
        if spec.size != size {
            return Err(Error::DimensionMismatch(format!(
                "mixed tile sizes {} and {}",
                spec.size, size
            )));
        }
        if plane.len() != spec.size * spec.size * channels {
            return Err(Error::DimensionMismatch(format!(
                "tile ({}, {}) has {} values, expected {}",
                spec.x0,
                spec.y0,
                plane.len(),
                spec.size * spec.size * channels
            )));
        }
        height = height.max(spec.y0 + spec.valid_height());
        width = width.max(spec.x0 + spec.valid_width());
    }

    let mut seen = BTreeSet::new();
    for (spec, _) in tiles {
        if !seen.insert(*spec) {
            return Err(Error::DuplicateTile {
                x0: spec.x0,
                y0: spec.y0,
            });
        }
    }
    let expected: BTreeSet<TileSpec> = plan_tiles(height, width, size)?.into_iter().collect();
    if seen != expected {
        let missing = expected.difference(&seen).count();
        let stray = seen.difference(&expected).count();
        return Err(Error::IncompleteCoverage(format!(
            "{missing} planned tile(s) missing, {stray} tile(s) off-plan"
        )));
    }

    let mut out = vec![V::default(); height * width * channels];
    for (spec, plane) in tiles {
        let row_len = spec.valid_width() * channels;
        for ty in 0..spec.valid_height() {
            let src = ty * spec.size * channels;
            let dst = ((spec.y0 + ty) * width + spec.x0) * channels;
            out[dst..dst + row_len].copy_from_slice(&plane[src..src + row_len]);
        }
    }
    Ok((height, width, out))
}

/// Stitches tiles cut by [`extract_tile`] back into a scene raster.
pub fn stitch_raster<T: Scalar>(tiles: &[(TileSpec, Raster<T>)]) -> Result<Raster<T>> {
    let channels = tiles.first().map(|(_, r)| r.channels()).unwrap_or(1);
    if tiles.iter().any(|(_, r)| r.channels() != channels) {
        return Err(Error::DimensionMismatch("mixed channel counts".into()));
    }
    let planes: Vec<(TileSpec, &[T])> = tiles.iter().map(|(s, r)| (*s, r.data())).collect();
    let (h, w, data) = stitch_planes(channels, &planes)?;
    Raster::new(h, w, channels, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub timestamp: String,
    pub file: String,
}

/// `manifest.json` of a scene directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub event_id: String,
    pub category: Category,
    pub steps: Vec<ManifestStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads an image as `[0, 1]` intensities: grayscale inputs give one channel,
/// anything with color gives three (alpha dropped).
pub fn read_image<T: Scalar>(path: &Path) -> Result<Raster<T>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = if img.color().has_color() {
        (3, img.to_rgb32f().into_raw())
    } else {
        (1, img.to_luma32f().into_raw())
    };
    let data = data
        .into_iter()
        .map(|v| T::from_f32(v).unwrap_or_else(T::zero))
        .collect();
    Raster::new(h, w, channels, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
pub fn write_png<T: Scalar>(raster: &Raster<T>, path: &Path) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let bytes: Vec<u8> = raster.data().iter().map(|v| to_u8(v.as_f64())).collect();
    let img = match raster.channels() {
        1 => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer sized"),
        ),
        3 => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer sized"),
        ),
        c => {
            return Err(Error::InvalidRaster(format!(
                "cannot encode {c}-channel raster as PNG"
            )))
        }
    };
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a single-channel mask: any value above mid-range counts as set.
pub fn read_mask(path: &Path) -> Result<BinaryMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma32f();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok(BinaryMap::from_vec(
        h,
        w,
        luma.into_raw().into_iter().map(|v| v > 0.5).collect(),
    ))
}

/// Loads a scene directory (see [`SceneManifest`]); steps are sorted by
/// timestamp so the newest becomes `X`.
pub fn load_scene<T: Scalar>(scene_dir: &Path) -> Result<TimeSeriesScene<T>> {
    let manifest_path = scene_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Manifest(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let mut manifest: SceneManifest = serde_json::from_str(&text)?;
    if manifest.steps.len() < 2 {
        return Err(Error::InsufficientSteps {
            found: manifest.steps.len(),
            required: 2,
        });
    }
    manifest.steps.sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
    for pair in manifest.steps.windows(2) {
        if pair[0].timestamp == pair[1].timestamp {
            return Err(Error::Manifest(format!(
                "duplicate timestamp `{}`",
                pair[0].timestamp
            )));
        }
    }
    let steps = manifest
        .steps
        .iter()
        .map(|s| read_image::<T>(&scene_dir.join(&s.file)))
        .collect::<Result<Vec<_>>>()?;
    let gt = manifest
        .gt_mask
        .as_ref()
        .map(|f| read_mask(&scene_dir.join(f)))
        .transpose()?;
    TimeSeriesScene::new(
        manifest.event_id,
        manifest.category,
        steps,
        manifest.steps.into_iter().map(|s| s.timestamp).collect(),
        gt,
    )
}

/// Writes a scene in the directory layout [`load_scene`] reads.
pub fn write_scene<T: Scalar>(scene: &TimeSeriesScene<T>, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut steps = Vec::with_capacity(scene.steps().len());
    for (raster, ts) in scene.steps().iter().zip(scene.timestamps()) {
        let file = format!("{ts}.png");
        write_png(raster, &dir.join(&file))?;
        steps.push(ManifestStep {
            timestamp: ts.clone(),
            file,
        });
    }
    let gt_mask = match scene.gt_mask() {
        Some(gt) => {
            let file = "gt_mask.png".to_string();
            gt.write_png8(&dir.join(&file))?;
            Some(file)
        }
        None => None,
    };
    let manifest = SceneManifest {
        event_id: scene.event_id.clone(),
        category: scene.category,
        steps,
        gt_mask,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Raster<f64> {
        Raster::from_fn(h, w, c, |y, x, ch| ((y * w + x) * c + ch) as f64 / (h * w * c) as f64)
    }

    #[test]
    fn raster_rejects_bad_length_and_nan() {
        assert!(Raster::<f32>::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Raster::<f32>::new(1, 2, 1, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn plan_exact_division() {
        let tiles = plan_tiles(4096, 4096, 2048).unwrap();
        assert_eq!(tiles.len(), 4);
        assert!(tiles.iter().all(|t| t.pad_right == 0 && t.pad_bottom == 0));
    }

    #[test]
    fn plan_non_divisible_scene() {
        let tiles = plan_tiles(6160, 6111, 2048).unwrap();
        let (rows, cols) = (6160usize.div_ceil(2048), 6111usize.div_ceil(2048));
        assert_eq!((rows, cols), (4, 3));
        assert_eq!(tiles.len(), rows * cols);
        let pad_b = rows * 2048 - 6160;
        let pad_r = cols * 2048 - 6111;
        assert_eq!((pad_b, pad_r), (2032, 33));
        for t in &tiles {
            assert_eq!(t.pad_bottom, if t.y0 == 6144 { 2032 } else { 0 });
            assert_eq!(t.pad_right, if t.x0 == 4096 { 33 } else { 0 });
        }
    }

    #[test]
    fn plan_single_padded_tile() {
        let tiles = plan_tiles(100, 100, 2048).unwrap();
        assert_eq!(
            tiles,
            vec![TileSpec {
                x0: 0,
                y0: 0,
                size: 2048,
                pad_right: 1948,
                pad_bottom: 1948
            }]
        );
    }

    #[test]
    fn plan_rejects_small_tiles() {
        assert!(plan_tiles(100, 100, 32).is_err());
    }

    #[test]
    fn extract_replicates_edges() {
        let r = ramp(70, 70, 1);
        let spec = plan_tiles(70, 70, 64).unwrap()[3];
        let t = extract_tile(&r, &spec);
        assert_eq!(t.get(0, 0, 0), r.get(64, 64, 0));
        assert_eq!(t.get(63, 63, 0), r.get(69, 69, 0));
        assert_eq!(t.get(2, 40, 0), r.get(66, 69, 0));
    }

    #[test]
    fn stitch_errors() {
        let r = ramp(100, 100, 1);
        let plan = plan_tiles(100, 100, 64).unwrap();
        let mut tiles: Vec<_> = plan.iter().map(|s| (*s, extract_tile(&r, s))).collect();
        let dup = tiles[0].clone();
        tiles.push(dup);
        assert!(matches!(stitch_raster(&tiles), Err(Error::DuplicateTile { .. })));
        tiles.pop();
        tiles.remove(1);
        assert!(matches!(stitch_raster(&tiles), Err(Error::IncompleteCoverage(_))));
    }

    #[test]
    fn drop_oldest_keeps_recent_steps() {
        let steps: Vec<_> = (0..4).map(|i| Raster::filled(4, 4, 1, i as f64 / 4.0)).collect();
        let ts = (0..4).map(|i| format!("t{i}")).collect();
        let scene = TimeSeriesScene::new("e", Category::Fire, steps, ts, None).unwrap();
        let dropped = scene.drop_oldest(2).unwrap();
        assert_eq!(dropped.history_len(), 1);
        assert_eq!(dropped.history(1), scene.history(1));
        assert!(scene.drop_oldest(3).is_err());
    }

    #[test]
    fn scene_validates_dimensions() {
        let a = Raster::filled(4, 4, 3, 0.0f32);
        let b = Raster::filled(4, 5, 3, 0.0f32);
        let err = TimeSeriesScene::new("e", Category::Fire, vec![a.clone(), b], vec!["1".into(), "2".into()], None)
            .unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
        let err = TimeSeriesScene::new("e", Category::Fire, vec![a], vec!["1".into()], None).unwrap_err();
        assert!(err.to_string().contains("insufficient time steps"));
    }
}
