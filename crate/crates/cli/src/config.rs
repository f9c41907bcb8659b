//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maskopt_core::decode::DecodeMode;
use maskopt_core::model::{AttentionMode, Precision};
use maskopt_core::oracle::{SpaceKind, TaskSpec};
use maskopt_core::pool::{ContextMode, SubSampling};
use maskopt_core::text::DelimiterMode;
use maskopt_core::train::RlWeighting;
use maskopt_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskBlock,
    pub pool: PoolBlock,
    pub corpus: CorpusBlock,
    pub model: ModelBlock,
    pub stages: StagesBlock,
    pub harvest: HarvestBlock,
    pub eval: EvalBlock,
    pub delimiter_mode: DelimiterMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskBlock::default(),
            pool: PoolBlock::default(),
            corpus: CorpusBlock::default(),
            model: ModelBlock::default(),
            stages: StagesBlock::default(),
            harvest: HarvestBlock::default(),
            eval: EvalBlock::default(),
            delimiter_mode: DelimiterMode::Tokens,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskBlock {
    pub kind: SpaceKind,
    pub oracle_id: String,
    pub seed: u64,
    /// Sequence length (discrete) or dimension (continuous).
    pub length: usize,
    pub alphabet: Vec<char>,
    /// Per-dimension [lo, hi]; defaults to [-1, 1] per dimension.
    pub bounds: Vec<(f64, f64)>,
    /// CSV covering the full space; switches the oracle to lookup mode.
    pub lookup_path: Option<PathBuf>,
    pub negate_labels: bool,
    /// Fraction of the top of the label-sorted dataset dropped before pool
    /// construction (0 keeps everything).
    pub truncate_top_frac: f64,
    /// Uniform samples standing in for a raw dataset on continuous tasks.
    pub continuous_dataset_size: usize,
}

impl Default for TaskBlock {
    fn default() -> Self {
        TaskBlock {
            kind: SpaceKind::Discrete,
            oracle_id: "pwm".into(),
            seed: 7,
            length: 8,
            alphabet: vec!['A', 'C', 'G', 'T'],
            bounds: Vec::new(),
            lookup_path: None,
            negate_labels: false,
            truncate_top_frac: 0.0,
            continuous_dataset_size: 4096,
        }
    }
}

impl TaskBlock {
    pub fn to_task_spec(&self) -> Result<TaskSpec> {
        match self.kind {
            SpaceKind::Discrete => TaskSpec::discrete(
                self.alphabet.clone(),
                self.length,
                self.oracle_id.clone(),
                self.seed,
            ),
            SpaceKind::Continuous => {
                let bounds = if self.bounds.is_empty() {
                    vec![(-1.0, 1.0); self.length]
                } else {
                    self.bounds.clone()
                };
                TaskSpec::continuous(bounds, self.oracle_id.clone(), self.seed)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolBlock {
    pub n_pool: usize,
    pub sub_sampling: SubSampling,
    pub partition_ratio: f64,
    pub seed: u64,
}

impl Default for PoolBlock {
    fn default() -> Self {
        PoolBlock { n_pool: 500, sub_sampling: SubSampling::Even, partition_ratio: 0.8, seed: 101 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusBlock {
    pub n_few: usize,
    pub n_sft_pairs: usize,
    pub n_rl_pairs: usize,
    /// Directory of train_*.txt / val_*.txt templates; built-ins when unset.
    pub templates_dir: Option<PathBuf>,
    pub context_mode: ContextMode,
    pub seed: u64,
}

impl Default for CorpusBlock {
    fn default() -> Self {
        CorpusBlock {
            n_few: 3,
            n_sft_pairs: 512,
            n_rl_pairs: 512,
            templates_dir: None,
            context_mode: ContextMode::Similar,
            seed: 202,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub attention_mode: AttentionMode,
    pub precision: Precision,
    pub init_seed: u64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 512,
            attention_mode: AttentionMode::Bidirectional,
            precision: Precision::Fast,
            init_seed: 303,
        }
    }
}

impl ModelBlock {
    pub fn to_model_config(&self, vocab_size: usize) -> maskopt_core::model::ModelConfig {
        maskopt_core::model::ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            attention_mode: self.attention_mode,
            precision: self.precision,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageBlock {
    pub enabled: bool,
    pub base_lr: f64,
    pub steps: usize,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Only read by the RL stage.
    pub rl_weighting: RlWeighting,
}

impl Default for StageBlock {
    fn default() -> Self {
        StageBlock {
            enabled: true,
            base_lr: 1e-3,
            steps: 512,
            grad_accum: 4,
            batch_size: 4,
            seed: 404,
            warmup_steps: 100,
            weight_decay: 0.01,
            rl_weighting: RlWeighting::Prob,
        }
    }
}

/// Desk defaults keep the staged step budget at DA 512 / SFT 512 / RL 128
/// with a 20x smaller RL learning rate, mirroring the DA = SFT >> RL shape
/// of the full-scale recipe (DA/SFT 1024-2048 steps at 2e-5, RL 128 at 1e-6).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesBlock {
    pub da: StageBlock,
    pub sft: StageBlock,
    pub rl: StageBlock,
}

impl Default for StagesBlock {
    fn default() -> Self {
        StagesBlock {
            da: StageBlock { seed: 404, ..StageBlock::default() },
            sft: StageBlock { seed: 505, ..StageBlock::default() },
            rl: StageBlock {
                base_lr: 5e-5,
                steps: 128,
                seed: 606,
                ..StageBlock::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarvestBlock {
    pub n_candidates: usize,
    pub max_attempts_multiplier: usize,
    pub decode_mode: DecodeMode,
    pub iterative_steps: usize,
    pub context_mode: ContextMode,
    pub use_val_templates: bool,
    pub seed: u64,
}

impl Default for HarvestBlock {
    fn default() -> Self {
        HarvestBlock {
            n_candidates: 128,
            max_attempts_multiplier: 50,
            decode_mode: DecodeMode::OnePass,
            iterative_steps: 8,
            context_mode: ContextMode::Random,
            use_val_templates: false,
            seed: 707,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    /// Full pipeline repetitions, one per seed.
    pub seeds: Vec<u64>,
    pub random_baseline_n: usize,
    pub run_probe: bool,
    pub probe_k: usize,
    pub probe_groups: usize,
    pub probe_seed: u64,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            seeds: vec![1, 2, 3],
            random_baseline_n: 128,
            run_probe: false,
            probe_k: 3,
            probe_groups: 500,
            probe_seed: 505,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.to_task_spec()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Format("eval.seeds must be non-empty".into()));
        }
        if let Some(dir) = &self.corpus.templates_dir {
            if !dir.is_dir() {
                return Err(Error::Format(format!("templates_dir {dir:?} does not exist")));
            }
        }
        if let Some(path) = &self.task.lookup_path {
            if !path.is_file() {
                return Err(Error::Format(format!("lookup_path {path:?} does not exist")));
            }
        }
        if !(0.0..1.0).contains(&self.task.truncate_top_frac) {
            return Err(Error::Range("truncate_top_frac must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.pool.n_pool, 500);
        assert_eq!(back.stages.rl.steps, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"pool": {"n_pool": 10, "typo_key": 1}}"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("typo_key"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let json = r#"{"pool": {"n_pool": 64}, "eval": {"seeds": [9]}}"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.pool.n_pool, 64);
        assert_eq!(cfg.pool.partition_ratio, 0.8);
        assert_eq!(cfg.eval.seeds, vec![9]);
        assert_eq!(cfg.corpus.n_few, 3);
    }
}
