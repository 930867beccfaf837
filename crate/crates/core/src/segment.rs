//! Class-agnostic instance proposals.
//!
//! [`RegionGrowSegmenter`] seeds a uniform lattice of points (the analog of
//! grid point prompts) and grows a region from every seed that is still
//! unclaimed. A region admits 4-neighbours whose luminance lies within
//! `theta` of the region's running mean. Its stability is the area ratio of
//! the regions grown at `0.9 * theta` and `1.1 * theta`; small or unstable
//! regions are dropped and their pixels released.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::PixelMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
    pub stability: f64,
    /// Seed point `(y, x)` the instance grew from.
    pub seed: (usize, usize),
}

/// Partition-style instance labelling of a tile: label 0 is unassigned,
/// instances are numbered densely from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    height: usize,
    width: usize,
    label_map: Vec<u32>,
    instances: Vec<InstanceRecord>,
}

impl InstanceMaskSet {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_map(&self) -> &[u32] {
        &self.label_map
    }

    pub fn instances(&self) -> &[InstanceRecord] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Pixel masks of all instances, index `k - 1` for instance `k`.
    pub fn pixel_masks(&self) -> Vec<PixelMask> {
        let mut buckets: Vec<Vec<u32>> = self
            .instances
            .iter()
            .map(|r| Vec::with_capacity(r.area))
            .collect();
        for (i, &l) in self.label_map.iter().enumerate() {
            if l > 0 {
                buckets[l as usize - 1].push(i as u32);
            }
        }
        buckets
            .into_iter()
            .map(|px| PixelMask::new(self.height, self.width, px))
            .collect()
    }

    /// Writes the label map as a 16-bit grayscale PNG and the instance
    /// records as a JSON sidecar next to it (`<stem>.json`).
    pub fn export(&self, png_path: &Path) -> Result<()> {
        let labels: Vec<u16> = self
            .label_map
            .iter()
            .map(|&l| {
                u16::try_from(l).map_err(|_| Error::InvalidParameter {
                    field: "label",
                    reason: format!("{l} exceeds 16-bit label range"),
                })
            })
            .collect::<Result<_>>()?;
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            labels,
        )
        .expect("buffer sized");
        img.save(png_path).map_err(|source| Error::Image {
            path: png_path.to_path_buf(),
            source,
        })?;
        let sidecar = png_path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.instances)?)?;
        Ok(())
    }
}

/// Instance id at pixel `(x, y)`, `None` when unassigned.
pub fn masks_at_pixel(set: &InstanceMaskSet, x: usize, y: usize) -> Result<Option<u32>> {
    if x >= set.width || y >= set.height {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: set.width,
            height: set.height,
        });
    }
    let l = set.label_map[y * set.width + x];
    Ok((l > 0).then_some(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterParams {
    /// Seeds per side.
    pub grid: usize,
    /// Luminance tolerance against the running region mean, in `[0, 1]` units.
    pub theta: f64,
    pub min_area: usize,
    pub stability_min: f64,
}

impl Default for SegmenterParams {
    fn default() -> Self {
        Self {
            grid: 16,
            theta: 0.08,
            min_area: 64,
            stability_min: 0.4,
        }
    }
}

impl SegmenterParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::InvalidParameter {
                field: "segmenter.grid",
                reason: "must be >= 1".into(),
            });
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "segmenter.theta",
                reason: format!("{} must be positive", self.theta),
            });
        }
        if !(0.0..=1.0).contains(&self.stability_min) {
            return Err(Error::InvalidParameter {
                field: "segmenter.stability_min",
                reason: format!("{} not in [0, 1]", self.stability_min),
            });
        }
        Ok(())
    }
}

pub trait Segmenter<T: Scalar>: Send + Sync {
    fn segment(&self, tile: &Raster<T>) -> Result<InstanceMaskSet>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RegionGrowSegmenter {
    pub params: SegmenterParams,
}

impl RegionGrowSegmenter {
    pub fn new(params: SegmenterParams) -> Self {
        Self { params }
    }
}

impl<T: Scalar> Segmenter<T> for RegionGrowSegmenter {
    fn segment(&self, tile: &Raster<T>) -> Result<InstanceMaskSet> {
        self.params.validate()?;
        let lum: Vec<f64> = tile.luminance().into_iter().map(Scalar::as_f64).collect();
        Ok(grow_regions(&lum, tile.height(), tile.width(), &self.params))
    }
}

/// Seed lattice in raster-scan order.
pub fn seed_points(height: usize, width: usize, grid: usize) -> Vec<(usize, usize)> {
    let mut seeds = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        let y = ((2 * i + 1) * height) / (2 * grid);
        for j in 0..grid {
            let x = ((2 * j + 1) * width) / (2 * grid);
            seeds.push((y.min(height - 1), x.min(width - 1)));
        }
    }
    seeds
}

struct Flooder<'a> {
    lum: &'a [f64],
    height: usize,
    width: usize,
    stamp: Vec<u32>,
    generation: u32,
    queue: VecDeque<usize>,
}

impl<'a> Flooder<'a> {
    fn new(lum: &'a [f64], height: usize, width: usize) -> Self {
        Self {
            lum,
            height,
            width,
            stamp: vec![0; lum.len()],
            generation: 0,
            queue: VecDeque::new(),
        }
    }

    /// BFS from `start` over pixels with `labels == 0`.
    fn flood(&mut self, start: usize, theta: f64, labels: &[u32], out: &mut Vec<usize>) {
        out.clear();
        self.generation += 1;
        let gen = self.generation;
        self.stamp[start] = gen;
        self.queue.clear();
        self.queue.push_back(start);
        let mut sum = 0.0;
        let (h, w) = (self.height, self.width);
        while let Some(p) = self.queue.pop_front() {
            out.push(p);
            sum += self.lum[p];
            let mean = sum / out.len() as f64;
            let (y, x) = (p / w, p % w);
            let neighbours = [
                (y > 0).then(|| p - w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbours.into_iter().flatten() {
                if self.stamp[q] != gen && labels[q] == 0 && (self.lum[q] - mean).abs() <= theta {
                    self.stamp[q] = gen;
                    self.queue.push_back(q);
                }
            }
        }
    }
}

pub(crate) fn grow_regions(
    lum: &[f64],
    height: usize,
    width: usize,
    params: &SegmenterParams,
) -> InstanceMaskSet {
    let mut labels = vec![0u32; height * width];
    let mut instances = Vec::new();
    let mut flooder = Flooder::new(lum, height, width);
    let mut region = Vec::new();
    let mut probe = Vec::new();

    for (sy, sx) in seed_points(height, width, params.grid) {
        let start = sy * width + sx;
        if labels[start] != 0 {
            continue;
        }
        flooder.flood(start, params.theta, &labels, &mut region);
        if region.len() < params.min_area {
            continue;
        }
        flooder.flood(start, params.theta * 0.9, &labels, &mut probe);
        let tight = probe.len();
        flooder.flood(start, params.theta * 1.1, &labels, &mut probe);
        let loose = probe.len();
        let stability = (tight as f64 / loose as f64).clamp(0.0, 1.0);
        if stability < params.stability_min {
            continue;
        }
        let id = instances.len() as u32 + 1;
        let mut bbox = BBox {
            x_min: usize::MAX,
            y_min: usize::MAX,
            x_max: 0,
            y_max: 0,
        };
        for &p in &region {
            labels[p] = id;
            let (y, x) = (p / width, p % width);
            bbox.x_min = bbox.x_min.min(x);
            bbox.y_min = bbox.y_min.min(y);
            bbox.x_max = bbox.x_max.max(x);
            bbox.y_max = bbox.y_max.max(y);
        }
        instances.push(InstanceRecord {
            id,
            area: region.len(),
            bbox,
            stability,
            seed: (sy, sx),
        });
    }

    InstanceMaskSet {
        height,
        width,
        label_map: labels,
        instances,
    }
}
