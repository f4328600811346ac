//! The run configuration file. Every section has defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use stnas_core::data::{CorpusKind, Motion, SamplingConfig, SynthConfig};
use stnas_core::network::NetworkSpec;
use stnas_core::search::{Order, SearchConfig};
use stnas_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub sampling: SamplingSection,
    pub search: SearchSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Motion,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderName {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Corpus directory holding `train.manifest` and `test.manifest`.
    pub dir: PathBuf,
    pub kind: Kind,
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub speed: i32,
    /// Per-class `[dx, dy]`; empty selects left, right, static, up, down.
    pub motions: Vec<[i32; 2]>,
    pub noise: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub segments: usize,
    pub per_segment: usize,
    pub crop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub depth: usize,
    pub init_channels: usize,
    pub nodes: usize,
    pub reduce_every: usize,
    pub epochs: usize,
    pub weight_lr: f64,
    pub weight_lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    /// Virtual step size; absent means "current weight learning rate".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub order: OrderName,
    pub hvp_r: f64,
    pub batch_size: usize,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub depth: usize,
    pub init_channels: usize,
    pub reduce_every: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Floor of the cosine schedule `lr_min + ½(lr − lr_min)(1 + cos(πe/E))`.
    pub lr_min: f64,
    pub momentum: f64,
    /// Not applied to batch-norm scale and shift.
    pub weight_decay: f64,
    /// Clips per mini-batch.
    pub batch_size: usize,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            sampling: SamplingSection::default(),
            search: SearchSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DataSection {
            dir: PathBuf::from("data"),
            kind: Kind::Motion,
            classes: s.classes,
            clips_per_class: s.clips_per_class,
            frames: s.frames,
            height: s.height,
            width: s.width,
            shape_size: s.shape_size,
            speed: s.speed,
            motions: Vec::new(),
            noise: s.noise,
            test_fraction: s.test_fraction,
        }
    }
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            segments: 4,
            per_segment: 2,
            crop: 112,
        }
    }
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchSection {
            depth: 3,
            init_channels: 4,
            nodes: 4,
            reduce_every: 2,
            epochs: s.epochs,
            weight_lr: s.weight_lr,
            weight_lr_min: s.weight_lr_min,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            alpha_lr: s.alpha_lr,
            epsilon: s.epsilon,
            order: OrderName::Second,
            hvp_r: s.hvp_r,
            batch_size: s.batch_size,
            valid_fraction: s.valid_fraction,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            depth: 6,
            init_channels: 8,
            reduce_every: 2,
            epochs: t.epochs,
            lr: t.lr,
            lr_min: t.lr_min,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 16 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.to_string().trim_end()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            kind: match d.kind {
                Kind::Motion => CorpusKind::Motion,
                Kind::Static => CorpusKind::Static,
            },
            classes: d.classes,
            clips_per_class: d.clips_per_class,
            frames: d.frames,
            height: d.height,
            width: d.width,
            shape_size: d.shape_size,
            speed: d.speed,
            motions: d.motions.iter().map(|m| Motion { dx: m[0], dy: m[1] }).collect(),
            noise: d.noise,
            test_fraction: d.test_fraction,
            seed: self.seed,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            segments: self.sampling.segments,
            per_segment: self.sampling.per_segment,
            crop: self.sampling.crop,
        }
    }

    pub fn search_spec(&self, classes: usize) -> NetworkSpec {
        let s = &self.search;
        NetworkSpec {
            reduce_every: s.reduce_every,
            ..NetworkSpec::new(s.depth, s.init_channels, s.nodes, classes)
        }
    }

    pub fn train_spec(&self, nodes: usize, classes: usize) -> NetworkSpec {
        let t = &self.train;
        NetworkSpec {
            reduce_every: t.reduce_every,
            ..NetworkSpec::new(t.depth, t.init_channels, nodes, classes)
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            epochs: s.epochs,
            weight_lr: s.weight_lr,
            weight_lr_min: s.weight_lr_min,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            alpha_lr: s.alpha_lr,
            epsilon: s.epsilon,
            order: match s.order {
                OrderName::First => Order::First,
                OrderName::Second => Order::Second,
            },
            hvp_r: s.hvp_r,
            batch_size: s.batch_size,
            seed: self.seed,
            valid_fraction: s.valid_fraction,
            sampling: self.sampling(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            lr_min: t.lr_min,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            sampling: self.sampling(),
        }
    }
}
