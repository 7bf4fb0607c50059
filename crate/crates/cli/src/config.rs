//! Run configuration: a TOML file plus flag overrides, flags winning.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use pedalign_core::losses::{Algo, Beta};
use pedalign_core::policy::TrainConfig;
use pedalign_core::prefgen::SplitSpec;

/// Where the rejected stream for pair building comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    /// Perturb the gold stream's signatures with the built-in noisy annotator.
    Noisy,
    /// Read a second corpus file (`paths.rejected`).
    RejectedFile,
    /// Reinterpret misaligned-action probes as pairs.
    Probes,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub sft: TrainSection,
    #[serde(default = "TrainSection::lhp_default")]
    pub lhp: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            split: Split::default(),
            policy: PolicySection::default(),
            sft: TrainSection::default(),
            lhp: TrainSection::lhp_default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub solutions: Option<PathBuf>,
    pub rejected: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("fixtures/corpus.jsonl"),
            solutions: Some(PathBuf::from("fixtures/solutions.json")),
            rejected: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub seed: u64,
    pub n_sft: usize,
    pub n_lhp: usize,
    pub n_test: usize,
}

impl Default for Split {
    fn default() -> Self {
        Split { seed: 42, n_sft: 16, n_lhp: 16, n_test: 8 }
    }
}

impl Split {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            n_sft: self.n_sft,
            n_lhp: self.n_lhp,
            n_test: self.n_test,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub n_buckets: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection { n_buckets: 64 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// LHP only.
    #[serde(default = "default_algo")]
    pub algo: String,
    /// LHP only.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// LHP only: initialize from the SFT checkpoint.
    #[serde(default = "default_true")]
    pub from_sft: bool,
    /// LHP only: rejected-stream source for pair building.
    #[serde(default = "default_pair_source")]
    pub pair_source: PairSource,
    /// LHP only: per-field flip probability of the noisy annotator.
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    /// LHP only: seed of the noisy annotator.
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
}

fn default_algo() -> String {
    "dpo".into()
}

fn default_beta() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_pair_source() -> PairSource {
    PairSource::Noisy
}

fn default_flip_prob() -> f64 {
    0.3
}

fn default_noise_seed() -> u64 {
    7
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 3,
            weight_decay: 0.05,
            warmup_ratio: 0.1,
            seed: 42,
            algo: default_algo(),
            beta: default_beta(),
            from_sft: true,
            pair_source: default_pair_source(),
            flip_prob: default_flip_prob(),
            noise_seed: default_noise_seed(),
        }
    }
}

impl TrainSection {
    fn lhp_default() -> Self {
        TrainSection { learning_rate: 1e-3, ..TrainSection::default() }
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let algo = Algo::parse(&self.algo)
            .ok_or_else(|| format!("unknown algorithm `{}` (expected dpo, ipo, or kto)", self.algo))?;
        let beta = Beta::new(self.beta).map_err(|e| e.to_string())?;
        Ok(TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            seed: self.seed,
            beta,
            algo,
        })
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub rounds_cap: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { rounds_cap: 8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub betas: Vec<f64>,
    pub algos: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            betas: vec![0.1, 0.3, 0.6, 0.9],
            algos: vec!["dpo".into(), "ipo".into(), "kto".into()],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config `{}`: {e}", path.display()))
    }

    /// Applies the global flag overrides; flags win over the file.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        algo: Option<&str>,
        beta: Option<f64>,
    ) {
        if let Some(seed) = seed {
            self.split.seed = seed;
            self.sft.seed = seed;
            self.lhp.seed = seed;
        }
        if let Some(algo) = algo {
            self.lhp.algo = algo.to_string();
            self.sweep.algos = vec![algo.to_string()];
        }
        if let Some(beta) = beta {
            self.lhp.beta = beta;
            self.sweep.betas = vec![beta];
        }
    }
}
