//! Run configuration: the TOML schema, flag overrides, exhaustive validation
//! and seed derivation.

use feddy_core::dynamic_gnn::{Activation, Hyperparams, NeighborFrame};
use feddy_core::federated::{Mode, PartitionStrategy, RoundPlan, DEFAULT_VALUE_BOUND};
use feddy_core::graph_model::DEFAULT_MIN_EDGE_WEIGHT;
use feddy_core::ingest::{RecordFilter, SynthConfig};
use feddy_core::secure_agg::{DEFAULT_FIXED_E, DEFAULT_MODULUS_BITS, MIN_MODULUS_BITS};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Native,
    Sdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Input files for `native` and `sdd`; one sequence (video) per file.
    pub paths: Vec<PathBuf>,
    /// Number of synthetic videos, each drawn with its own seed.
    pub videos: usize,
    /// Frame size and rate for `sdd` annotations.
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub fps: Option<f64>,
    pub filter: RecordFilter,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            paths: Vec::new(),
            videos: 1,
            width: None,
            height: None,
            fps: None,
            filter: RecordFilter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub activation: Activation,
    pub delta_t: usize,
    pub neighbor_frame: NeighborFrame,
    pub min_edge_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n: 2,
            alpha: 0.1,
            beta: 0.1,
            activation: Activation::Tanh,
            delta_t: 10,
            neighbor_frame: NeighborFrame::Previous,
            min_edge_weight: DEFAULT_MIN_EDGE_WEIGHT,
        }
    }
}

impl ModelConfig {
    pub fn hyperparams(&self, k: usize) -> Hyperparams {
        let mut h = Hyperparams::new(self.d, k, self.n, self.alpha, self.beta, self.activation);
        h.neighbor_frame = self.neighbor_frame;
        h.min_edge_weight = self.min_edge_weight;
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub m: usize,
    pub eta: f64,
    pub epochs: usize,
    pub sync_every: usize,
    pub seed: u64,
    pub partition: PartitionStrategy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Central,
            m: 1,
            eta: 0.1,
            epochs: 200,
            sync_every: 10,
            seed: 0,
            partition: PartitionStrategy::ByVideo,
        }
    }
}

impl TrainingConfig {
    pub fn plan(&self) -> RoundPlan {
        RoundPlan {
            sync_every: self.sync_every,
            eta: self.eta,
            epochs: self.epochs,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecureConfig {
    pub modulus_bits: u64,
    pub fixed_e: u32,
    pub session_id: u32,
    /// Largest plausible magnitude of an aggregated coordinate.
    pub value_bound: f64,
}

impl Default for SecureConfig {
    fn default() -> Self {
        Self {
            modulus_bits: DEFAULT_MODULUS_BITS,
            fixed_e: DEFAULT_FIXED_E,
            session_id: 1,
            value_bound: DEFAULT_VALUE_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub secure: SecureConfig,
    pub output: OutputConfig,
}

/// Named sub-seeds, all derived from `training.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub synth: u64,
    pub keygen: u64,
    pub pads: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Self {
            init: rng.next_u64(),
            synth: rng.next_u64(),
            keygen: rng.next_u64(),
            pads: rng.next_u64(),
        }
    }

    /// Seed of synthetic video `i`.
    pub fn synth_video(&self, i: usize) -> u64 {
        self.synth.wrapping_add(i as u64)
    }
}

/// Loads a TOML config, or the `config` object of a JSON run manifest.
pub fn load(path: &Path) -> Result<RunConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    if path.extension().is_some_and(|e| e == "json") {
        #[derive(Deserialize)]
        struct ManifestConfig {
            config: RunConfig,
        }
        serde_json::from_str::<ManifestConfig>(&text)
            .map(|m| m.config)
            .map_err(|e| vec![format!("{}: {e}", path.display())])
    } else {
        toml::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])
    }
}

/// Every problem with `cfg`, in section order. Empty means valid.
pub fn validate(cfg: &RunConfig) -> Vec<String> {
    let mut errs = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            errs.push(msg);
        }
    };

    let data = &cfg.data;
    match data.source {
        DataSource::Synth => {
            check(data.videos >= 1, "data.videos must be at least 1".into());
            check(
                data.paths.is_empty(),
                "data.paths is only used with source = \"native\" or \"sdd\"".into(),
            );
            if let Err(e) = cfg.synth.validate(cfg.model.delta_t) {
                check(false, format!("synth: {e}"));
            }
        }
        DataSource::Native | DataSource::Sdd => {
            check(!data.paths.is_empty(), "data.paths must list at least one file".into());
            for p in &data.paths {
                check(p.is_file(), format!("data.paths: {} is not a readable file", p.display()));
            }
        }
    }
    if data.source == DataSource::Sdd {
        for (name, v) in [("width", data.width), ("height", data.height), ("fps", data.fps)] {
            check(
                v.is_some_and(|v| v > 0.0 && v.is_finite()),
                format!("data.{name} must be a positive number for sdd input"),
            );
        }
    }

    let model = &cfg.model;
    check(model.d >= 1, "model.d must be at least 1".into());
    check(model.n >= 1, "model.n must be at least 1".into());
    check(
        (0.0..=1.0).contains(&model.alpha),
        format!("model.alpha = {} must lie in [0, 1]", model.alpha),
    );
    check(
        (0.0..=1.0).contains(&model.beta),
        format!("model.beta = {} must lie in [0, 1]", model.beta),
    );
    check(
        model.alpha + model.beta <= 1.0,
        format!(
            "model.alpha + model.beta = {} must not exceed 1",
            model.alpha + model.beta
        ),
    );
    check(model.delta_t >= 1, "model.delta_t must be at least 1".into());
    check(
        model.min_edge_weight > 0.0 && model.min_edge_weight.is_finite(),
        "model.min_edge_weight must be a positive number".into(),
    );

    let tr = &cfg.training;
    check(tr.m >= 1, "training.m must be at least 1".into());
    check(
        tr.eta > 0.0 && tr.eta.is_finite(),
        format!("training.eta = {} must be a positive number", tr.eta),
    );
    check(tr.epochs >= 1, "training.epochs must be at least 1".into());
    check(tr.sync_every >= 1, "training.sync_every must be at least 1".into());
    let videos = match data.source {
        DataSource::Synth => data.videos,
        _ => data.paths.len(),
    };
    match tr.partition {
        PartitionStrategy::ByVideo => check(
            tr.m <= videos,
            format!("training.m = {} exceeds the {videos} available videos for by_video", tr.m),
        ),
        PartitionStrategy::ByTime => check(
            videos == 1,
            format!("by_time partitioning needs exactly one video, got {videos}"),
        ),
    }

    let sec = &cfg.secure;
    check(
        sec.modulus_bits >= MIN_MODULUS_BITS,
        format!(
            "secure.modulus_bits = {} is below the floor of {MIN_MODULUS_BITS}",
            sec.modulus_bits
        ),
    );
    check(
        (1..=52).contains(&sec.fixed_e),
        format!("secure.fixed_e = {} must lie in [1, 52]", sec.fixed_e),
    );
    check(
        sec.value_bound > 0.0,
        "secure.value_bound must be positive".into(),
    );

    check(
        !cfg.output.dir.as_os_str().is_empty(),
        "output.dir must not be empty".into(),
    );
    errs
}
