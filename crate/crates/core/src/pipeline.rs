//! End-to-end detection over a scene.
//!
//! Per-tile work (embedding, segmentation, instance scoring) runs on a fixed
//! rayon pool; scene-level steps (stitching, quantile thresholds, candidate
//! selection) run after all tiles finish. Every reduction is order
//! independent, so outputs do not depend on the worker count.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{cva, image_diff, ts_cva_tile, Baseline};
use crate::embed::{CacheEmbedder, EmbedKey, Embedder, Metric, ReferenceEmbedder};
use crate::error::{Error, Result};
use crate::eval::{aggregate, EvalReport, EventScore, DEFAULT_BETA};
use crate::maps::{stitch, BinaryMap, ChangeDensityMap};
use crate::scalar::Scalar;
use crate::scene::{extract_tile, plan_tiles, TileSpec, TimeSeriesScene};
use crate::segment::{RegionGrowSegmenter, Segmenter, SegmenterParams};
use crate::stage1::{self, candidate_order, CandidateInstance, CandidateLine, Stage1Tile};
use crate::stage2::{binarize_anomalies, score_candidates, AnomalyScoreRecord, EmbeddingStore, ScoreLine};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Reference,
    Cache,
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "cache" => Ok(Self::Cache),
            _ => Err(Error::InvalidParameter {
                field: "embedder",
                reason: format!("unknown embedder `{s}` (expected reference or cache)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tile_size: usize,
    pub quantile: f64,
    pub keep_fraction: f64,
    pub metric: Metric,
    pub embedder: EmbedderKind,
    /// Directory of `.aecd` files, required for the cache embedder.
    pub cache_dir: Option<PathBuf>,
    pub segmenter: SegmenterParams,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    pub beta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tile_size: 2048,
            quantile: 0.94,
            keep_fraction: 0.30,
            metric: Metric::Cosine,
            embedder: EmbedderKind::Reference,
            cache_dir: None,
            segmenter: SegmenterParams::default(),
            workers: None,
            beta: DEFAULT_BETA,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = crate::embed::DEFAULT_STRIDE;
        if self.tile_size < crate::scene::MIN_TILE_SIZE || self.tile_size % stride != 0 {
            return Err(Error::InvalidParameter {
                field: "tile_size",
                reason: format!("{} must be >= 64 and a multiple of {stride}", self.tile_size),
            });
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::InvalidParameter {
                field: "quantile",
                reason: format!("{} not in (0, 1)", self.quantile),
            });
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                field: "keep_fraction",
                reason: format!("{} not in (0, 1]", self.keep_fraction),
            });
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "beta",
                reason: format!("{} must be positive", self.beta),
            });
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidParameter {
                field: "workers",
                reason: "must be >= 1".into(),
            });
        }
        if self.embedder == EmbedderKind::Cache && self.cache_dir.is_none() {
            return Err(Error::InvalidParameter {
                field: "cache_dir",
                reason: "required when embedder is `cache`".into(),
            });
        }
        self.segmenter.validate()
    }
}

/// Wall-clock per phase, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage1: f64,
    pub stage2: f64,
    pub total: f64,
}

/// Scene-level Stage-1 output.
#[derive(Clone, Debug)]
pub struct Stage1Result<T> {
    pub tiles: Vec<TileSpec>,
    pub c_t: ChangeDensityMap<T>,
    pub c_x: ChangeDensityMap<T>,
    /// `max(C_t, C_x)`.
    pub fused: ChangeDensityMap<T>,
    /// `C_b`.
    pub binary: BinaryMap,
    /// All scored instances, in ranking order.
    pub candidates: Vec<CandidateInstance<T>>,
    /// The top `keep_fraction`, in ranking order.
    pub selected: Vec<CandidateInstance<T>>,
    /// Embeddings keyed by (tile index, step index); holds `T_1` and `X`
    /// for every tile and any history steps computed later.
    pub store: EmbeddingStore<T>,
}

#[derive(Clone, Debug)]
pub struct Stage2Result<T> {
    /// Step indices of `T_1, T_2, ...` that were compared.
    pub history_steps: Vec<usize>,
    /// One record per selected candidate, same order.
    pub records: Vec<AnomalyScoreRecord<T>>,
    pub density: ChangeDensityMap<T>,
    pub anomaly_map: BinaryMap,
}

#[derive(Clone, Debug)]
pub struct Detection<T> {
    pub stage1: Stage1Result<T>,
    pub stage2: Stage2Result<T>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

pub struct Pipeline<T: Scalar> {
    config: RunConfig,
    embedder: Box<dyn Embedder<T>>,
    segmenter: Box<dyn Segmenter<T>>,
    pool: rayon::ThreadPool,
}

impl<T: Scalar> fmt::Debug for Pipeline<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish_non_exhaustive()
    }
}

impl<T: Scalar> Pipeline<T> {
    /// Builds the embedder and segmenter the config names.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let embedder: Box<dyn Embedder<T>> = match config.embedder {
            EmbedderKind::Reference => Box::new(ReferenceEmbedder::default()),
            EmbedderKind::Cache => Box::new(CacheEmbedder::new(
                config.cache_dir.clone().expect("validated"),
            )),
        };
        let segmenter = Box::new(RegionGrowSegmenter::new(config.segmenter));
        Self::with_components(config, embedder, segmenter)
    }

    pub fn with_components(
        config: RunConfig,
        embedder: Box<dyn Embedder<T>>,
        segmenter: Box<dyn Segmenter<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::InvalidParameter {
                field: "workers",
                reason: e.to_string(),
            })?;
        Ok(Self {
            config,
            embedder,
            segmenter,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Runs both stages.
    pub fn detect(&self, scene: &TimeSeriesScene<T>) -> Result<Detection<T>> {
        let start = Instant::now();
        let mut warnings = Vec::new();
        if scene.history_len() == 1 {
            let msg = format!(
                "scene {} has a single historical step; stage 2 compares against T_1 only",
                scene.event_id
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut s1 = self.stage1(scene)?;
        let t1 = start.elapsed().as_secs_f64();
        let s2 = self.stage2(scene, &mut s1, 0)?;
        let total = start.elapsed().as_secs_f64();
        Ok(Detection {
            stage1: s1,
            stage2: s2,
            warnings,
            timings: Timings {
                stage1: t1,
                stage2: total - t1,
                total,
            },
        })
    }

    /// With the cache embedder, every (step, tile) file must exist before
    /// any work starts.
    fn check_cache(&self, scene: &TimeSeriesScene<T>, tiles: &[TileSpec]) -> Result<()> {
        let (EmbedderKind::Cache, Some(dir)) = (self.config.embedder, &self.config.cache_dir) else {
            return Ok(());
        };
        let cache = CacheEmbedder::new(dir.clone());
        for ts in scene.timestamps() {
            for tile in tiles {
                let key = EmbedKey { timestamp: ts, tile: *tile };
                let path = cache.path_for(&key);
                if !path.is_file() {
                    return Err(Error::MissingEmbedding {
                        timestamp: ts.clone(),
                        x0: tile.x0,
                        y0: tile.y0,
                        path,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn stage1(&self, scene: &TimeSeriesScene<T>) -> Result<Stage1Result<T>> {
        let cfg = &self.config;
        let tiles = plan_tiles(scene.height(), scene.width(), cfg.tile_size)?;
        self.check_cache(scene, &tiles)?;
        let x_step = scene.steps().len() - 1;
        let t1_step = scene.history_step_index(1);
        let ts = scene.timestamps();
        let per_tile: Vec<Stage1Tile<T>> = self.pool.install(|| {
            tiles
                .par_iter()
                .enumerate()
                .map(|(i, spec)| {
                    let tile_t = extract_tile(scene.history(1), spec);
                    let tile_x = extract_tile(scene.current(), spec);
                    stage1::run_tile(
                        i,
                        *spec,
                        &tile_t,
                        &tile_x,
                        &ts[t1_step],
                        &ts[x_step],
                        self.embedder.as_ref(),
                        self.segmenter.as_ref(),
                        cfg.metric,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut ct_tiles = Vec::with_capacity(tiles.len());
        let mut cx_tiles = Vec::with_capacity(tiles.len());
        let mut candidates = Vec::new();
        let mut store = EmbeddingStore::new();
        for t in per_tile {
            ct_tiles.push((t.tile, t.c_t));
            cx_tiles.push((t.tile, t.c_x));
            candidates.extend(t.candidates);
            store.insert(t.tile_index, t1_step, t.f_t);
            store.insert(t.tile_index, x_step, t.f_x);
        }
        let c_t = stitch(&ct_tiles)?;
        let c_x = stitch(&cx_tiles)?;
        let fused = c_t.max_with(&c_x)?;
        let binary = fused.binarize_quantile(cfg.quantile)?;
        candidates.sort_by(candidate_order);
        let selected = stage1::select_candidates(candidates.clone(), cfg.keep_fraction)?;
        Ok(Stage1Result {
            tiles,
            c_t,
            c_x,
            fused,
            binary,
            candidates,
            selected,
            store,
        })
    }

    /// Computes any embeddings in `tiles x steps` missing from `store`.
    fn fill_store(
        &self,
        scene: &TimeSeriesScene<T>,
        tiles: &[TileSpec],
        wanted_tiles: &BTreeSet<usize>,
        steps: &[usize],
        store: &mut EmbeddingStore<T>,
    ) -> Result<()> {
        let jobs: Vec<(usize, usize)> = wanted_tiles
            .iter()
            .flat_map(|&t| steps.iter().map(move |&s| (t, s)))
            .filter(|&(t, s)| !store.contains(t, s))
            .collect();
        let ts = scene.timestamps();
        let computed = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(t, s)| {
                    let spec = tiles[t];
                    let tile = extract_tile(&scene.steps()[s], &spec);
                    let emb = self.embedder.embed(
                        &tile,
                        &EmbedKey {
                            timestamp: &ts[s],
                            tile: spec,
                        },
                    )?;
                    Ok((t, s, emb))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (t, s, emb) in computed {
            store.insert(t, s, emb);
        }
        Ok(())
    }

    /// Stage 2 over the selected candidates, ignoring the `drop_oldest`
    /// oldest historical steps. History embeddings are computed only for
    /// tiles that hold a candidate and are cached in `s1.store`.
    pub fn stage2(
        &self,
        scene: &TimeSeriesScene<T>,
        s1: &mut Stage1Result<T>,
        drop_oldest: usize,
    ) -> Result<Stage2Result<T>> {
        let n = scene.history_len();
        if drop_oldest + 1 > n {
            return Err(Error::InsufficientSteps {
                found: n,
                required: drop_oldest + 1,
            });
        }
        let history_steps: Vec<usize> =
            (1..=n - drop_oldest).map(|i| scene.history_step_index(i)).collect();
        let x_step = scene.steps().len() - 1;
        let wanted: BTreeSet<usize> = s1.selected.iter().map(|c| c.tile_index).collect();
        let tiles = s1.tiles.clone();
        self.fill_store(scene, &tiles, &wanted, &history_steps, &mut s1.store)?;
        let records = self.pool.install(|| {
            score_candidates(&s1.selected, &s1.store, x_step, &history_steps, self.config.metric)
        })?;
        let (density, anomaly_map) = binarize_anomalies(
            &records,
            &s1.selected,
            scene.height(),
            scene.width(),
            self.config.quantile,
        )?;
        Ok(Stage2Result {
            history_steps,
            records,
            density,
            anomaly_map,
        })
    }

    /// Density map of a comparison detector.
    pub fn baseline(&self, scene: &TimeSeriesScene<T>, which: Baseline) -> Result<ChangeDensityMap<T>> {
        match which {
            Baseline::Id => image_diff(scene.history(1), scene.current()),
            Baseline::Cva => cva(scene.history(1), scene.current()),
            Baseline::EmbedDiff => self.embedding_baseline(scene, 1),
            Baseline::TsCva => self.embedding_baseline(scene, scene.history_len()),
        }
    }

    /// Per-cell min distance between `X` and `T_1..T_n_history`.
    fn embedding_baseline(&self, scene: &TimeSeriesScene<T>, n_history: usize) -> Result<ChangeDensityMap<T>> {
        let tiles = plan_tiles(scene.height(), scene.width(), self.config.tile_size)?;
        let x_step = scene.steps().len() - 1;
        let steps: Vec<usize> = (1..=n_history).map(|i| scene.history_step_index(i)).collect();
        let ts = scene.timestamps();
        let metric = self.config.metric;
        let maps = self.pool.install(|| {
            tiles
                .par_iter()
                .map(|spec| {
                    let embed = |s: usize| {
                        self.embedder.embed(
                            &extract_tile(&scene.steps()[s], spec),
                            &EmbedKey {
                                timestamp: &ts[s],
                                tile: *spec,
                            },
                        )
                    };
                    let x = embed(x_step)?;
                    let hist = steps.iter().map(|&s| embed(s)).collect::<Result<Vec<_>>>()?;
                    let refs: Vec<_> = hist.iter().collect();
                    Ok((*spec, ts_cva_tile(&x, &refs, metric)?))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        stitch(&maps)
    }

    /// Scores for one event given a binary prediction.
    pub fn score_event(&self, scene: &TimeSeriesScene<T>, pred: &BinaryMap) -> Result<EventScore> {
        let gt = scene
            .gt_mask()
            .ok_or_else(|| Error::Manifest(format!("scene {} has no ground truth", scene.event_id)))?;
        EventScore::from_maps(scene.event_id.clone(), scene.category, pred, gt, self.config.beta)
    }

    /// Runs Stage 2 with `k = 0..=k_max` oldest steps removed and returns one
    /// report per `k` over all scenes.
    pub fn ablate_timesteps(&self, scenes: &[TimeSeriesScene<T>], k_max: usize) -> Result<Vec<EvalReport>> {
        let mut per_k: Vec<Vec<EventScore>> = vec![Vec::new(); k_max + 1];
        for scene in scenes {
            let mut s1 = self.stage1(scene)?;
            for (k, events) in per_k.iter_mut().enumerate() {
                let s2 = self.stage2(scene, &mut s1, k)?;
                events.push(self.score_event(scene, &s2.anomaly_map)?);
            }
        }
        per_k
            .into_iter()
            .enumerate()
            .map(|(k, events)| {
                let mut echo = self.config_echo();
                echo["steps_removed"] = serde_json::json!(k);
                aggregate(events, echo)
            })
            .collect()
    }

    pub fn config_echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

/// Writes detection artifacts:
/// `stage1_change_map.png`, `anomaly_map.png` (1-bit), `candidates.jsonl`,
/// `scores.jsonl`, `config.json` and `timing.json`.
pub fn write_detection<T: Scalar>(det: &Detection<T>, config: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    det.stage1.binary.write_png(&out_dir.join("stage1_change_map.png"))?;
    det.stage2.anomaly_map.write_png(&out_dir.join("anomaly_map.png"))?;
    let mut cands = String::new();
    for c in &det.stage1.selected {
        cands.push_str(&serde_json::to_string(&CandidateLine::from(c))?);
        cands.push('\n');
    }
    std::fs::write(out_dir.join("candidates.jsonl"), cands)?;
    let mut scores = String::new();
    for rec in &det.stage2.records {
        let line = ScoreLine::new(rec, &det.stage1.selected[rec.candidate]);
        scores.push_str(&serde_json::to_string(&line)?);
        scores.push('\n');
    }
    std::fs::write(out_dir.join("scores.jsonl"), scores)?;
    let echo = serde_json::json!({
        "config": config,
        "history_steps": det.stage2.history_steps.len(),
        "warnings": det.warnings,
    });
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&echo)?)?;
    std::fs::write(
        out_dir.join("timing.json"),
        serde_json::to_string_pretty(&det.timings)?,
    )?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Quantile,
    TileSize,
    Metric,
    Timesteps,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(Self::Quantile),
            "tile_size" | "tile" => Ok(Self::TileSize),
            "metric" => Ok(Self::Metric),
            "timesteps" => Ok(Self::Timesteps),
            _ => Err(Error::InvalidParameter {
                field: "param",
                reason: format!("unknown sweep parameter `{s}` (quantile, tile_size, metric, timesteps)"),
            }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    /// Full two-stage pipeline.
    pub report: EvalReport,
    /// Stage-1 binary map alone.
    pub stage1_report: EvalReport,
    pub seconds: f64,
}

fn parse_value<V: FromStr>(field: &'static str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::InvalidParameter {
        field,
        reason: format!("cannot parse `{v}`"),
    })
}

/// Runs the pipeline once per value of `param` over `scenes`.
pub fn run_sweep<T: Scalar>(
    param: SweepParam,
    values: &[String],
    scenes: &[TimeSeriesScene<T>],
    base: &RunConfig,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        let mut drop = 0;
        match param {
            SweepParam::Quantile => cfg.quantile = parse_value("quantile", value)?,
            SweepParam::TileSize => cfg.tile_size = parse_value("tile_size", value)?,
            SweepParam::Metric => cfg.metric = value.trim().parse()?,
            SweepParam::Timesteps => drop = parse_value("timesteps", value)?,
        }
        let pipeline = Pipeline::<T>::new(cfg)?;
        let start = Instant::now();
        let mut full = Vec::with_capacity(scenes.len());
        let mut first = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let mut s1 = pipeline.stage1(scene)?;
            let s2 = pipeline.stage2(scene, &mut s1, drop)?;
            full.push(pipeline.score_event(scene, &s2.anomaly_map)?);
            first.push(pipeline.score_event(scene, &s1.binary)?);
        }
        let seconds = start.elapsed().as_secs_f64();
        let mut echo = pipeline.config_echo();
        echo["steps_removed"] = serde_json::json!(drop);
        points.push(SweepPoint {
            value: value.clone(),
            report: aggregate(full, echo.clone())?,
            stage1_report: aggregate(first, echo)?,
            seconds,
        });
    }
    Ok(points)
}
