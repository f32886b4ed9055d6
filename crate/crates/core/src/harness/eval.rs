use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::config::{ExperimentConfig, Variant};
use super::train::TrainedModel;
use crate::autoencoder::extract_segmentation;
use crate::dataset::{make_split, sample_seed, split_seed, stack_images, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::{ari, foreground_ari};
use crate::tensor::Tape;

/// Environment variable capping the number of evaluation workers.
pub const THREADS_ENV: &str = "SLOTNORM_THREADS";

/// Object-count cell of a sweep: all scenes pooled, or one count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectCount {
    All,
    Exactly(usize),
}

impl fmt::Display for ObjectCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectCount::All => f.write_str("all"),
            ObjectCount::Exactly(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for ObjectCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ObjectCount::All);
        }
        s.parse().map(ObjectCount::Exactly).map_err(|_| {
            Error::Config(format!(
                "object count must be \"all\" or an integer, got {s:?}"
            ))
        })
    }
}

impl Serialize for ObjectCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One row of the results table. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub variant: Variant,
    pub seed: u64,
    #[serde(rename = "O")]
    pub train_objects: usize,
    #[serde(rename = "K")]
    pub train_slots: usize,
    pub eval_slots: usize,
    pub eval_objects: ObjectCount,
    pub f_ari: f64,
    pub ari: f64,
    pub l2: f64,
    pub n_scenes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneMetrics {
    pub f_ari: f64,
    pub ari: f64,
    pub l2: f64,
}

/// Metrics of one scene at every requested slot count.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub object_count: usize,
    pub per_slot_count: Vec<SceneMetrics>,
}

/// Means over scenes matching `objects`, in scene order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledMetrics {
    pub f_ari: f64,
    pub ari: f64,
    pub l2: f64,
    pub n_scenes: usize,
}

pub fn pool(
    scores: &[SceneScore],
    slot_index: usize,
    objects: ObjectCount,
) -> Option<PooledMetrics> {
    let mut acc = PooledMetrics {
        f_ari: 0.0,
        ari: 0.0,
        l2: 0.0,
        n_scenes: 0,
    };
    for s in scores {
        if objects == ObjectCount::All || objects == ObjectCount::Exactly(s.object_count) {
            let m = s.per_slot_count[slot_index];
            acc.f_ari += m.f_ari;
            acc.ari += m.ari;
            acc.l2 += m.l2;
            acc.n_scenes += 1;
        }
    }
    (acc.n_scenes > 0).then(|| {
        let n = acc.n_scenes as f64;
        PooledMetrics {
            f_ari: acc.f_ari / n,
            ari: acc.ari / n,
            l2: acc.l2 / n,
            n_scenes: acc.n_scenes,
        }
    })
}

/// F-ARI (background label 0 ignored) and full ARI of a predicted
/// segmentation against instance labels.
pub fn score_segmentation(pred: &[usize], labels: &[u8]) -> Result<(f64, f64)> {
    let pred: Vec<u32> = pred
        .iter()
        .map(|&p| {
            u32::try_from(p)
                .map_err(|_| Error::contract("score_segmentation", "slot index exceeds u32"))
        })
        .collect::<Result<_>>()?;
    Ok((foreground_ari(&pred, labels, 0)?, ari(&pred, labels)?))
}

/// Segments one scene with `slots` slots drawn from `slot_seed`; returns the
/// per-pixel slot index and the reconstruction loss.
pub fn segment(
    trained: &TrainedModel,
    scene: &SceneSample,
    slots: usize,
    iters: usize,
    slot_seed: u64,
) -> Result<(Vec<usize>, f64)> {
    let images = stack_images([scene])?;
    let stats = trained.inference_stats();
    let mut tape = Tape::new();
    let p = trained.store.bind_frozen(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
    let out = trained.model.forward(
        &mut tape,
        &p,
        &images,
        slots,
        iters,
        stats.as_ref(),
        &mut rng,
    )?;
    let pixels = scene.labels.len();
    let masks = out.masks.reshape(&[slots, pixels])?;
    Ok((extract_segmentation(&masks)?, tape.value(out.loss).item()?))
}

/// Builds the evaluation worker pool, honoring [`THREADS_ENV`].
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "{THREADS_ENV} must be a non-negative integer, got {v:?}"
            ))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Scores every scene at every slot count. Scenes run in parallel, each on
/// its own tape with slots seeded by `(seed, scene index)`, so the result
/// does not depend on the worker count.
pub fn evaluate_scenes(
    trained: &TrainedModel,
    scenes: &[SceneSample],
    slot_counts: &[usize],
    iters: usize,
    seed: u64,
) -> Result<Vec<SceneScore>> {
    let slot_stream = split_seed(seed, "eval-slots");
    worker_pool()?.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, scene)| {
                let slot_seed = sample_seed(slot_stream, i as u64);
                let per_slot_count = slot_counts
                    .iter()
                    .map(|&k| {
                        let (pred, l2) = segment(trained, scene, k, iters, slot_seed)?;
                        let (f_ari, ari) = score_segmentation(&pred, &scene.labels)?;
                        Ok(SceneMetrics { f_ari, ari, l2 })
                    })
                    .collect::<Result<_>>()?;
                Ok(SceneScore {
                    object_count: scene.object_count,
                    per_slot_count,
                })
            })
            .collect()
    })
}

/// Evaluates `trained` on the test split described by `config` at every
/// slot count in `config.eval_slots`: one pooled record per slot count, plus
/// one per object count present when `config.eval_by_object_count` is set.
pub fn evaluate_sweep(
    trained: &TrainedModel,
    config: &ExperimentConfig,
) -> Result<Vec<SweepResult>> {
    config.validate()?;
    if config.variant != trained.config.variant
        || config.autoencoder_config()? != trained.model.config
    {
        return Err(Error::contract(
            "evaluate_sweep",
            format!(
                "checkpoint is a {} model, config describes {}",
                trained.config.variant, config.variant
            ),
        ));
    }
    let spec = config.scene_spec();
    let test_seed = split_seed(config.dataset_seed, "test");
    let scenes = worker_pool()?.install(|| {
        make_split(
            &spec,
            config.eval_scenes,
            config.eval_max_objects,
            test_seed,
        )
    })?;
    let scores = evaluate_scenes(
        trained,
        &scenes,
        &config.eval_slots,
        config.eval_iters,
        trained.seed,
    )?;

    let mut cells = vec![ObjectCount::All];
    if config.eval_by_object_count {
        cells.extend((config.min_objects..=config.eval_max_objects).map(ObjectCount::Exactly));
    }
    let mut out = Vec::new();
    for (si, &k) in config.eval_slots.iter().enumerate() {
        for &objects in &cells {
            if let Some(m) = pool(&scores, si, objects) {
                out.push(SweepResult {
                    variant: trained.config.variant,
                    seed: trained.seed,
                    train_objects: trained.config.train_objects,
                    train_slots: trained.config.train_slots,
                    eval_slots: k,
                    eval_objects: objects,
                    f_ari: m.f_ari,
                    ari: m.ari,
                    l2: m.l2,
                    n_scenes: m.n_scenes,
                });
            }
        }
    }
    Ok(out)
}
