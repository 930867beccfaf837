//! Scene-sized score and binary maps, and the rank-quantile binarization
//! shared by both detection stages and the baselines.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::{stitch_planes, TileSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Stage1,
    Stage2,
    Baseline,
}

/// Per-pixel continuous change (or anomaly) score.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeDensityMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> ChangeDensityMap<T> {
    pub fn zeros(height: usize, width: usize, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width],
            provenance,
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        data: Vec<T>,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRaster(format!("non-finite score at index {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Pixel-wise maximum of two maps.
    pub fn max_with(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a.max(b))
                .collect(),
            provenance: self.provenance,
        })
    }

    /// Threshold at the nearest-rank quantile `q` of this map's own values.
    pub fn binarize_quantile(&self, q: f64) -> Result<BinaryMap> {
        let tau = quantile_threshold(&self.data, q)?;
        Ok(BinaryMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > tau).collect(),
        })
    }
}

/// Stitches per-tile density maps (tile-sized, padding included).
pub fn stitch<T: Scalar>(tiles: &[(TileSpec, ChangeDensityMap<T>)]) -> Result<ChangeDensityMap<T>> {
    let provenance = tiles
        .first()
        .map(|(_, m)| m.provenance)
        .ok_or_else(|| Error::IncompleteCoverage("no tiles supplied".into()))?;
    for (spec, m) in tiles {
        if m.height != spec.size || m.width != spec.size {
            return Err(Error::DimensionMismatch(format!(
                "tile ({}, {}) map is {}x{}, tile size {}",
                spec.x0, spec.y0, m.height, m.width, spec.size
            )));
        }
    }
    let planes: Vec<(TileSpec, &[T])> = tiles.iter().map(|(s, m)| (*s, m.data())).collect();
    let (height, width, data) = stitch_planes(1, &planes)?;
    Ok(ChangeDensityMap {
        height,
        width,
        data,
        provenance,
    })
}

/// Nearest-rank quantile: `sorted_ascending[floor(q * (N - 1))]`.
pub fn quantile_threshold<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter {
            field: "quantile",
            reason: format!("{q} not in (0, 1)"),
        });
    }
    if values.is_empty() {
        return Err(Error::InvalidRaster("quantile of an empty map".into()));
    }
    let rank = (q * (values.len() - 1) as f64).floor() as usize;
    let mut buf = values.to_vec();
    let (_, tau, _) = buf.select_nth_unstable_by(rank, |a, b| {
        a.partial_cmp(b).expect("finite scores")
    });
    Ok(*tau)
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Panics if `data.len() != height * width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "binary map length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Writes a 1-bit grayscale PNG (1 = set).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header()?;
        let stride = self.width.div_ceil(8);
        let mut bytes = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&bytes)?;
        writer.finish()?;
        Ok(())
    }

    /// Writes an 8-bit grayscale PNG with 0 = unset, 255 = set.
    pub fn write_png8(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
