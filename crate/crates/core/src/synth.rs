//! Seeded synthetic time-series scenes with ground truth.
//!
//! A static low-frequency background is shared by all steps. Movers are
//! solid bright squares that cycle through `period` positions (step `t`
//! shows position `t % period`), so every mover state seen in the current
//! image has also been seen in history. Each step gets its own global
//! brightness offset and pixel noise. The final step additionally contains
//! one anomaly that appears nowhere in history.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, purpose, step, object)`, so a scene does not depend on the order
//! in which its parts are generated.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::BinaryMap;
use crate::scalar::Scalar;
use crate::scene::{write_scene, Category, Raster, TimeSeriesScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Scene side length in pixels.
    pub size: usize,
    pub steps: usize,
    pub movers: usize,
    /// Inclusive side-length range of mover squares.
    pub mover_size: (usize, usize),
    /// Inclusive side-length range of the anomaly rectangle.
    pub anomaly_size: (usize, usize),
    /// Per-step global brightness offset is drawn from `[-j, j]`.
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
    pub category: Category,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 512,
            steps: 5,
            movers: 8,
            mover_size: (12, 32),
            anomaly_size: (24, 64),
            brightness_jitter: 0.05,
            noise_sigma: 0.01,
            category: Category::Others,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::InvalidParameter { field, reason });
        if self.steps < 2 {
            return bad("steps", format!("{} < 2", self.steps));
        }
        if self.size < 64 {
            return bad("size", format!("{} < 64", self.size));
        }
        for (field, (lo, hi)) in [("mover_size", self.mover_size), ("anomaly_size", self.anomaly_size)] {
            if lo == 0 || lo > hi || hi + 2 * EDGE_MARGIN > self.size {
                return bad(field, format!("range [{lo}, {hi}] invalid for size {}", self.size));
            }
        }
        if !(self.brightness_jitter >= 0.0 && self.brightness_jitter.is_finite()) {
            return bad("brightness_jitter", format!("{}", self.brightness_jitter));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("{}", self.noise_sigma));
        }
        Ok(())
    }
}

const EDGE_MARGIN: usize = 4;
const SPACING: usize = 4;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.x < o.x + o.w + gap
            && o.x < self.x + self.w + gap
            && self.y < o.y + o.h + gap
            && o.y < self.y + self.h + gap
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Corner points `[x, y]`, clockwise from the top-left.
    pub fn polygon(&self) -> [[usize; 2]; 4] {
        [
            [self.x, self.y],
            [self.x + self.w, self.y],
            [self.x + self.w, self.y + self.h],
            [self.x, self.y + self.h],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoverTruth {
    pub period: usize,
    pub side: usize,
    pub color: [f64; 3],
    /// Footprint per phase; step `t` uses `positions[t % period]`.
    pub positions: Vec<Rect>,
}

impl MoverTruth {
    pub fn footprint_at(&self, step: usize) -> Rect {
        self.positions[step % self.period]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyTruth {
    pub rect: Rect,
    pub polygon: [[usize; 2]; 4],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub fy: f64,
    pub fx: f64,
    pub phase: f64,
}

/// Everything needed to re-render the scene, written as `truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub base_color: [f64; 3],
    pub waves: Vec<[Wave; 3]>,
    pub movers: Vec<MoverTruth>,
    pub anomaly: AnomalyTruth,
    pub brightness_offsets: Vec<f64>,
    /// Only one historical step: Stage 2 reduces to Stage 1.
    pub stage2_degenerate: bool,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Background = 1,
    Anomaly = 2,
    Mover = 3,
    Brightness = 4,
    Noise = 5,
}

fn stream(seed: u64, purpose: Purpose, step: usize, object: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | ((step as u64 & 0xff_ffff) << 32) | object as u64 & 0xffff_ffff);
    rng
}

fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    w: usize,
    h: usize,
    avoid: &[Rect],
    what: &str,
) -> Result<Rect> {
    let max_x = size - EDGE_MARGIN - w;
    let max_y = size - EDGE_MARGIN - h;
    for _ in 0..MAX_ATTEMPTS {
        let r = Rect {
            x: rng.gen_range(EDGE_MARGIN..=max_x),
            y: rng.gen_range(EDGE_MARGIN..=max_y),
            w,
            h,
        };
        if avoid.iter().all(|a| !a.overlaps(&r, SPACING)) {
            return Ok(r);
        }
    }
    Err(Error::Placement(format!(
        "could not place {what} ({w}x{h}) after {MAX_ATTEMPTS} attempts"
    )))
}

/// Draws the scene layout (background, movers, anomaly, offsets).
pub fn plan(cfg: &SynthConfig) -> Result<SynthTruth> {
    cfg.validate()?;
    let size = cfg.size;

    let mut rng = stream(cfg.seed, Purpose::Background, 0, 0);
    let base_color = [
        rng.gen_range(0.30..0.45),
        rng.gen_range(0.32..0.48),
        rng.gen_range(0.25..0.40),
    ];
    let waves = (0..3)
        .map(|_| {
            let mut wave = || {
                let period = rng.gen_range(160.0..512.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                Wave {
                    amplitude: rng.gen_range(0.02..0.05),
                    fy: angle.sin() / period,
                    fx: angle.cos() / period,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            };
            [wave(), wave(), wave()]
        })
        .collect();

    let mut rng = stream(cfg.seed, Purpose::Anomaly, 0, 0);
    let (lo, hi) = cfg.anomaly_size;
    let (aw, ah) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
    let rect = place(&mut rng, size, aw, ah, &[], "anomaly")?;
    let anomaly = AnomalyTruth {
        rect,
        polygon: rect.polygon(),
        color: [
            rng.gen_range(0.04..0.10),
            rng.gen_range(0.10..0.18),
            rng.gen_range(0.45..0.60),
        ],
    };

    let mut occupied = vec![rect];
    let mut movers = Vec::with_capacity(cfg.movers);
    for m in 0..cfg.movers {
        let mut rng = stream(cfg.seed, Purpose::Mover, 0, m);
        let period = if rng.gen_bool(0.5) { 2 } else { 3 };
        let side = rng.gen_range(cfg.mover_size.0..=cfg.mover_size.1);
        let g = rng.gen_range(0.82..0.95);
        let color = [g, g - rng.gen_range(0.0..0.05), g - rng.gen_range(0.0..0.08)];
        let mut positions = Vec::with_capacity(period);
        for _ in 0..period {
            let r = place(&mut rng, size, side, side, &occupied, &format!("mover {m}"))?;
            occupied.push(r);
            positions.push(r);
        }
        movers.push(MoverTruth {
            period,
            side,
            color,
            positions,
        });
    }

    let brightness_offsets = (0..cfg.steps)
        .map(|t| {
            let mut rng = stream(cfg.seed, Purpose::Brightness, t, 0);
            if cfg.brightness_jitter > 0.0 {
                rng.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter)
            } else {
                0.0
            }
        })
        .collect();

    Ok(SynthTruth {
        config: cfg.clone(),
        base_color,
        waves,
        movers,
        anomaly,
        brightness_offsets,
        stage2_degenerate: cfg.steps < 3,
    })
}

/// Pre-noise, pre-offset rendering of step `t`.
pub fn render_clean(truth: &SynthTruth, step: usize) -> Raster<f64> {
    let size = truth.config.size;
    let last = truth.config.steps - 1;
    Raster::from_fn(size, size, 3, |y, x, c| {
        if step == last && truth.anomaly.rect.contains(y, x) {
            // mild texture so the anomaly is not a perfectly flat patch
            let ripple = 0.03 * (((x + 2 * y) % 6) as f64 / 5.0);
            return truth.anomaly.color[c] + ripple;
        }
        for m in &truth.movers {
            if m.footprint_at(step).contains(y, x) {
                return m.color[c];
            }
        }
        let (yf, xf) = (y as f64, x as f64);
        truth.base_color[c]
            + truth.waves[c]
                .iter()
                .map(|w| w.amplitude * (std::f64::consts::TAU * (w.fy * yf + w.fx * xf) + w.phase).sin())
                .sum::<f64>()
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Final rendering of step `t`: offset, noise, clipping and 8-bit
/// quantization (so in-memory scenes match what a PNG round trip yields).
pub fn render_step(truth: &SynthTruth, step: usize) -> Raster<f64> {
    let cfg = &truth.config;
    let clean = render_clean(truth, step);
    let offset = truth.brightness_offsets[step];
    let mut rng = stream(cfg.seed, Purpose::Noise, step, 0);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize(v + offset + n)
        })
        .collect();
    Raster::new(clean.height(), clean.width(), 3, data).expect("finite rendering")
}

pub fn timestamp(step: usize) -> String {
    format!("{:04}-06-01", 2000 + step)
}

#[derive(Clone, Debug)]
pub struct SynthScene<T> {
    pub scene: TimeSeriesScene<T>,
    pub truth: SynthTruth,
}

/// Generates the scene and its ground truth.
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthScene<T>> {
    let truth = plan(cfg)?;
    if truth.stage2_degenerate {
        log::warn!(
            "synthetic scene {} has a single historical step; stage 2 is degenerate",
            cfg.seed
        );
    }
    let steps = (0..cfg.steps).map(|t| render_step(&truth, t).cast::<T>()).collect();
    let size = cfg.size;
    let rect = truth.anomaly.rect;
    let gt = BinaryMap::from_vec(
        size,
        size,
        (0..size * size).map(|i| rect.contains(i / size, i % size)).collect(),
    );
    let scene = TimeSeriesScene::new(
        format!("synth-{:04}", cfg.seed),
        cfg.category,
        steps,
        (0..cfg.steps).map(timestamp).collect(),
        Some(gt),
    )?;
    Ok(SynthScene { scene, truth })
}

pub const TRUTH_FILE: &str = "truth.json";

/// Generates a scene and writes it in the scene-directory layout plus
/// `truth.json`.
pub fn write_synth(cfg: &SynthConfig, dir: &Path) -> Result<SynthTruth> {
    let synth = generate::<f64>(cfg)?;
    write_scene(&synth.scene, dir)?;
    std::fs::write(dir.join(TRUTH_FILE), serde_json::to_string_pretty(&synth.truth)?)?;
    Ok(synth.truth)
}
