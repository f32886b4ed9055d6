use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::eval::{evaluate_scenes, pool, ObjectCount};
use crate::autoencoder::Autoencoder;
use crate::checkpoint;
use crate::dataset::{
    augment_hflip, make_split, scene_at, split_seed, stack_images, SceneSample, SceneSpec,
};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::slot_attention::{BatchStats, NormalizationMode};
use crate::tensor::Tape;

/// A model with its parameters and (batch variant) running statistics.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model: Autoencoder,
    pub store: ParamStore,
    pub stats: Option<BatchStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub variant: Variant,
    pub seed: u64,
    pub entries: Vec<LogEntry>,
    /// F-ARI at the training slot count on the validation split.
    pub val_f_ari: f64,
    pub val_l2: f64,
}

/// Deterministic stream of training scenes with at most `max_objects`.
struct SceneStream {
    spec: SceneSpec,
    seed: u64,
    max_objects: usize,
    next: u64,
}

impl SceneStream {
    fn batch(&mut self, n: usize) -> Result<Vec<SceneSample>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = scene_at(&self.spec, self.seed, self.next)?;
            self.next += 1;
            if s.object_count <= self.max_objects {
                out.push(s);
            }
        }
        Ok(out)
    }
}

fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, purpose))
}

impl TrainedModel {
    /// Freshly initialized model for `(config, seed)`.
    pub fn init(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Autoencoder::new(
            &mut store,
            &mut rng_for(seed, "init"),
            config.autoencoder_config()?,
        )?;
        let stats = match config.variant.mode() {
            NormalizationMode::BatchScaled { momentum, .. } => Some(BatchStats::new(momentum)),
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            seed,
            model,
            store,
            stats,
        })
    }

    /// Statistics to use at evaluation time.
    pub fn inference_stats(&self) -> Option<BatchStats> {
        self.stats.as_ref().map(BatchStats::inference)
    }

    fn metadata(&self) -> serde_json::Value {
        let stats = self.stats.as_ref().map(|s| {
            serde_json::json!({ "m": s.m, "v": s.v, "ema_m": s.ema_m, "ema_v": s.ema_v, "momentum": s.momentum })
        });
        serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "batch_stats": stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let bad = |detail: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        let meta = &ckpt.metadata;
        let config: ExperimentConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(format!("config: {e}")))?;
        let seed = meta["seed"]
            .as_u64()
            .ok_or_else(|| bad("missing seed".into()))?;
        let mut trained = Self::init(&config, seed)?;
        trained.store.load_named(ckpt.tensors)?;
        if let Some(stats) = trained.stats.as_mut() {
            let s = &meta["batch_stats"];
            stats.m = s["m"].as_f64().unwrap_or(0.0);
            stats.v = s["v"].as_f64().unwrap_or(0.0);
            stats.ema_m = s["ema_m"].as_f64();
            stats.ema_v = s["ema_v"].as_f64();
            if stats.ema_m.is_none() || stats.ema_v.is_none() {
                return Err(bad("batch variant without running statistics".into()));
            }
        }
        Ok(trained)
    }
}

/// Trains one model. Every random draw derives from `seed` (initialization,
/// slot noise, flips) or from the config's dataset seed (scenes), so equal
/// inputs give bitwise-equal parameters and logs.
pub fn train(config: &ExperimentConfig, seed: u64) -> Result<(TrainedModel, TrainingLog)> {
    let mut trained = TrainedModel::init(config, seed)?;
    let schedule = config.schedule();
    let mut adam = Adam::new(&trained.store);
    let mut slot_rng = rng_for(seed, "train-slots");
    let mut flip_rng = rng_for(seed, "flip");
    let mut stream = SceneStream {
        spec: config.scene_spec(),
        seed: split_seed(config.dataset_seed, "train"),
        max_objects: config.train_objects,
        next: 0,
    };
    let mut entries = Vec::new();
    let mut last_finite = (0, f64::NAN);

    for step in 0..config.steps {
        // Step `step` applies lr(step + 1) so the first update is not zero.
        let lr = schedule.at(step + 1);
        let batch: Vec<SceneSample> = stream
            .batch(config.batch_size)?
            .iter()
            .map(|s| augment_hflip(s, &mut flip_rng))
            .collect();
        let images = stack_images(&batch)?;

        let mut tape = Tape::new();
        let p = trained.store.bind(&mut tape);
        let out = trained.model.forward(
            &mut tape,
            &p,
            &images,
            config.train_slots,
            config.train_iters,
            trained.stats.as_ref(),
            &mut slot_rng,
        )?;
        let loss = tape.value(out.loss).item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite_step: last_finite.0,
                last_finite_loss: last_finite.1,
            });
        }
        last_finite = (step, loss);
        let mut grads = tape.backward(out.loss)?;
        let grads: Vec<_> = trained
            .store
            .ids()
            .map(|id| grads.take(p.var(id)))
            .collect();
        adam.update(&mut trained.store, &grads, lr)?;
        if let (Some(stats), Some((m, v))) = (trained.stats.as_mut(), out.moments) {
            *stats = stats.ema_update(m, v)?;
        }
        if step % config.log_every == 0 || step + 1 == config.steps {
            log::info!(
                "{} step {step}: loss {loss:.6} lr {lr:.3e}",
                config.run_name(seed)
            );
            entries.push(LogEntry { step, lr, loss });
        }
    }

    let spec = config.scene_spec();
    let val = make_split(
        &spec,
        config.val_scenes,
        config.train_objects,
        split_seed(config.dataset_seed, "val"),
    )?;
    let scores = evaluate_scenes(
        &trained,
        &val,
        &[config.train_slots],
        config.eval_iters,
        seed,
    )?;
    let pooled = pool(&scores, 0, ObjectCount::All)
        .ok_or_else(|| Error::contract("train", "empty validation split"))?;
    let log = TrainingLog {
        variant: config.variant,
        seed,
        entries,
        val_f_ari: pooled.f_ari,
        val_l2: pooled.l2,
    };
    Ok((trained, log))
}

/// Files written for one run.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
}

/// Writes `checkpoint.bin`, `train_log.json` and `config.json` under
/// `<out_dir>/<run name>/`.
pub fn save_run(out_dir: &Path, trained: &TrainedModel, log: &TrainingLog) -> Result<RunFiles> {
    let dir = out_dir.join(trained.config.run_name(trained.seed));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let files = RunFiles {
        checkpoint: dir.join("checkpoint.bin"),
        log: dir.join("train_log.json"),
        config: dir.join("config.json"),
        dir,
    };
    trained.save(&files.checkpoint)?;
    for (path, value) in [
        (&files.log, serde_json::to_string_pretty(log)?),
        (
            &files.config,
            serde_json::to_string_pretty(&trained.config)?,
        ),
    ] {
        std::fs::write(path, value).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
