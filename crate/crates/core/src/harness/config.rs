use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderConfig;
use crate::dataset::{SceneSpec, Shape};
use crate::error::{Error, Result};
use crate::optim::{default_peak_lr, LrSchedule};
use crate::slot_attention::{NormalizationMode, SumScale};

/// Model variant, named by its update-code normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Layer,
    WeightedSum,
    Batch,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Layer,
        Variant::WeightedSum,
        Variant::Batch,
    ];

    pub fn mode(self) -> NormalizationMode {
        match self {
            Variant::Baseline => NormalizationMode::WeightedMean,
            Variant::Layer => NormalizationMode::LayerNormed,
            Variant::WeightedSum => NormalizationMode::WeightedSum {
                scale: SumScale::TokenCount,
            },
            Variant::Batch => NormalizationMode::batch_scaled(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Layer => "layer",
            Variant::WeightedSum => "weighted_sum",
            Variant::Batch => "batch",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected baseline, layer, weighted_sum or batch)"
                ))
            })
    }
}

/// Everything one training/evaluation run depends on, as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Largest object count in training scenes (O).
    pub train_objects: usize,
    /// Slots used during training (K).
    pub train_slots: usize,
    pub eval_slots: Vec<usize>,
    /// Add one record per object count next to the pooled record.
    pub eval_by_object_count: bool,
    /// Largest object count in evaluation scenes.
    pub eval_max_objects: usize,
    pub eval_scenes: usize,
    /// Validation scenes scored at the end of training.
    pub val_scenes: usize,
    pub seeds: Vec<u64>,

    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub half_life: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub train_iters: usize,
    pub eval_iters: usize,
    pub log_every: usize,
    /// Runs whose F-ARI at the training slot count falls below this are
    /// reported as failed and left out of plots.
    pub failure_threshold: f64,

    pub resolution: usize,
    pub encoder_channels: usize,
    pub encoder_layers: usize,
    pub decoder_channels: usize,
    pub broadcast: usize,
    pub dim: usize,
    pub slot_mlp_hidden: usize,

    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub min_size: usize,
    pub max_size: usize,
    pub allow_occlusion: bool,
    pub dataset_seed: u64,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            variant: Variant::Baseline,
            train_objects: 4,
            train_slots: 5,
            eval_slots: vec![5, 7, 9, 11],
            eval_by_object_count: true,
            eval_max_objects: 4,
            eval_scenes: 512,
            val_scenes: 64,
            seeds: vec![0, 1, 2],
            peak_lr: default_peak_lr(),
            warmup_steps: 1_000,
            half_life: 5_000,
            batch_size: 16,
            steps: 20_000,
            train_iters: 3,
            eval_iters: 5,
            log_every: 100,
            failure_threshold: 0.5,
            resolution: scene.height,
            encoder_channels: 32,
            encoder_layers: 4,
            decoder_channels: 32,
            broadcast: 4,
            dim: 32,
            slot_mlp_hidden: 64,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            shapes: scene.shapes,
            min_size: scene.min_size,
            max_size: scene.max_size,
            allow_occlusion: scene.allow_occlusion,
            dataset_seed: scene.seed,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides. Values are parsed as JSON and fall back
    /// to plain strings, so `variant=batch` and `eval_slots=[5,7]` both work.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let object = value
            .as_object_mut()
            .expect("config serializes to an object");
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            if !object.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            object.insert(key.to_string(), parsed);
        }
        let config: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.eval_slots.is_empty() || self.eval_slots.contains(&0) {
            return fail(format!(
                "eval_slots must be non-empty and positive, got {:?}",
                self.eval_slots
            ));
        }
        for (name, v) in [
            ("train_slots", self.train_slots),
            ("batch_size", self.batch_size),
            ("train_iters", self.train_iters),
            ("eval_iters", self.eval_iters),
            ("eval_scenes", self.eval_scenes),
            ("val_scenes", self.val_scenes),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !self.failure_threshold.is_finite() {
            return fail("failure_threshold must be finite".into());
        }
        for (name, o) in [
            ("train_objects", self.train_objects),
            ("eval_max_objects", self.eval_max_objects),
        ] {
            if o < self.min_objects || o > self.max_objects {
                return fail(format!(
                    "{name} = {o} outside the generated range {}..={}",
                    self.min_objects, self.max_objects
                ));
            }
        }
        self.scene_spec().validate()?;
        self.autoencoder_config()?.validate()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.resolution,
            width: self.resolution,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            shapes: self.shapes.clone(),
            min_size: self.min_size,
            max_size: self.max_size,
            allow_occlusion: self.allow_occlusion,
            seed: self.dataset_seed,
            ..SceneSpec::default()
        }
    }

    pub fn autoencoder_config(&self) -> Result<AutoencoderConfig> {
        let ratio = if self.broadcast == 0 {
            0
        } else {
            self.resolution / self.broadcast
        };
        if ratio == 0 || !ratio.is_power_of_two() || ratio * self.broadcast != self.resolution {
            return Err(Error::Config(format!(
                "resolution {} must be broadcast {} times a power of two",
                self.resolution, self.broadcast
            )));
        }
        Ok(AutoencoderConfig {
            resolution: self.resolution,
            encoder_channels: self.encoder_channels,
            encoder_layers: self.encoder_layers,
            decoder_channels: self.decoder_channels,
            broadcast: self.broadcast,
            upsample_layers: ratio.trailing_zeros() as usize,
            dim: self.dim,
            slot_mlp_hidden: self.slot_mlp_hidden,
            mode: self.variant.mode(),
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup_steps,
            half_life: self.half_life,
        }
    }

    /// `<variant>_O<O>_K<K>_seed<seed>`
    pub fn run_name(&self, seed: u64) -> String {
        format!(
            "{}_O{}_K{}_seed{seed}",
            self.variant, self.train_objects, self.train_slots
        )
    }
}
