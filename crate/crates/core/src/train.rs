//! The three training stages: joint masked reconstruction over prompt and
//! response, response-only masked reconstruction on a clean prompt, and
//! reward-weighted one-step reinforcement learning.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_logits, forward_on_tape, loss_and_grad, row_log_softmax_at, save_checkpoint,
    AdamWConfig, Grads, ModelConfig, OptimizerState, ParamIds, Params, Scalar, Tape,
};
use crate::oracle::Design;
use crate::pool::{OfflinePool, PairSpec};
use crate::text::{self, DelimiterMode, RenderMode, TemplateSet};
use crate::vocab::{Role, TokenSeq, Vocab};

const MAX_MASK_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Da,
    Sft,
    Rl,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Da => write!(f, "da"),
            Stage::Sft => write!(f, "sft"),
            Stage::Rl => write!(f, "rl"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlWeighting {
    /// Raw probabilities weighted by the advantage.
    Prob,
    /// Log probabilities weighted by the advantage.
    LogProb,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub base_lr: f64,
    pub steps: usize,
    pub grad_accum: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub rl_weighting: RlWeighting,
}

impl StageConfig {
    pub fn new(stage: Stage, base_lr: f64, steps: usize, seed: u64) -> StageConfig {
        StageConfig {
            stage,
            base_lr,
            steps,
            grad_accum: 4,
            batch_size: 4,
            seed,
            warmup_steps: 100,
            weight_decay: 0.01,
            rl_weighting: RlWeighting::Prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Range("steps must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Range("base_lr must be > 0".into()));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Range("grad_accum and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One corruption of a token sequence: the timestep, the masked positions,
/// and the corrupted sequence itself.
#[derive(Clone, Debug)]
pub struct MaskingDraw {
    pub t: f64,
    pub masked: Vec<usize>,
    pub corrupted: TokenSeq,
}

fn eligible_positions(seq: &TokenSeq, stage: Stage) -> Vec<usize> {
    seq.roles
        .iter()
        .enumerate()
        .filter(|(_, &r)| match stage {
            Stage::Da => r == Role::Prompt || r == Role::Response,
            Stage::Sft | Stage::Rl => r == Role::Response,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Samples t ~ U(0,1] and masks each eligible position independently with
/// probability t. All-clear patterns are redrawn with the same t, then one
/// position is force-masked.
pub fn draw_mask(
    seq: &TokenSeq,
    stage: Stage,
    mask_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskingDraw> {
    let t = 1.0 - rng.random::<f64>();
    draw_mask_with_t(seq, stage, mask_id, t, rng)
}

pub fn draw_mask_with_t(
    seq: &TokenSeq,
    stage: Stage,
    mask_id: usize,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskingDraw> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Range(format!("timestep must be in (0,1], got {t}")));
    }
    let eligible = eligible_positions(seq, stage);
    if eligible.is_empty() {
        return Err(Error::Shape("no eligible positions to mask".into()));
    }
    let mut masked = Vec::new();
    for _ in 0..MAX_MASK_REDRAWS {
        masked.clear();
        for &pos in &eligible {
            if rng.random::<f64>() < t {
                masked.push(pos);
            }
        }
        if !masked.is_empty() {
            break;
        }
    }
    if masked.is_empty() {
        masked.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut corrupted = seq.clone();
    for &pos in &masked {
        corrupted.ids[pos] = mask_id;
    }
    Ok(MaskingDraw { t, masked, corrupted })
}

/// The fully masked response corruption used by the RL objective and by
/// one-step scoring.
pub fn full_response_mask(seq: &TokenSeq, mask_id: usize) -> Result<MaskingDraw> {
    let masked = eligible_positions(seq, Stage::Rl);
    if masked.is_empty() {
        return Err(Error::Shape("response span is empty".into()));
    }
    let mut corrupted = seq.clone();
    for &pos in &masked {
        corrupted.ids[pos] = mask_id;
    }
    Ok(MaskingDraw { t: 1.0, masked, corrupted })
}

/// Masked-reconstruction loss: (1/t) * sum of cross entropy at the masked
/// positions, model fed the corrupted sequence.
pub fn reconstruction_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &ParamIds,
    mcfg: &ModelConfig,
    clean: &TokenSeq,
    draw: &MaskingDraw,
) -> Result<usize> {
    if draw.masked.is_empty() {
        return Err(Error::Shape("masking draw has no masked positions".into()));
    }
    let logits = forward_on_tape(tape, ids, mcfg, &draw.corrupted)?;
    let picked = tape.gather_rows(logits, &draw.masked);
    let targets: Vec<usize> = draw.masked.iter().map(|&p| clean.ids[p]).collect();
    let ce = tape.cross_entropy_rows(picked, &targets);
    let total = tape.sum_all(ce);
    Ok(tape.scale(total, 1.0 / draw.t))
}

/// Joint prompt+response reconstruction (domain adaptation). The draw must
/// come from the DA eligibility rule.
pub fn da_loss<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    clean: &TokenSeq,
    draw: &MaskingDraw,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = crate::model::register_params(&mut tape, params);
    let loss = reconstruction_loss_on_tape(&mut tape, &ids, mcfg, clean, draw)?;
    Ok(tape.scalar(loss).to_f64())
}

/// Response-only reconstruction on a clean prompt (supervised fine-tuning).
pub fn sft_loss<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    clean: &TokenSeq,
    draw: &MaskingDraw,
) -> Result<f64> {
    for &p in &draw.masked {
        if clean.roles[p] != Role::Response {
            return Err(Error::Shape("sft draw masks a non-response position".into()));
        }
    }
    da_loss(params, mcfg, clean, draw)
}

/// Advantage-weighted mean over per-token probabilities (or log
/// probabilities), negated: the shared tail of the RL objective.
pub fn rl_objective_from_scores<T: Scalar>(
    tape: &mut Tape<T>,
    scores: usize,
    reward: f64,
    sigma_r: f64,
    weighting: RlWeighting,
) -> Result<usize> {
    if !(sigma_r > 0.0) {
        return Err(Error::Degenerate(format!("sigma_r must be > 0, got {sigma_r}")));
    }
    let m = tape.value(scores).nrows();
    let advantage = reward / sigma_r;
    let total = tape.sum_all(scores);
    // scores are probabilities (Prob) or cross entropies (LogProb, where
    // sum log p = -sum ce).
    let factor = match weighting {
        RlWeighting::Prob => -advantage / m as f64,
        RlWeighting::LogProb => advantage / m as f64,
    };
    Ok(tape.scale(total, factor))
}

/// Reward-weighted one-step loss: the prompt stays clean, the response is
/// fully masked, and each response token's probability is read from a single
/// forward pass.
pub fn rl_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &ParamIds,
    mcfg: &ModelConfig,
    tokens: &TokenSeq,
    mask_id: usize,
    reward: f64,
    sigma_r: f64,
    weighting: RlWeighting,
) -> Result<usize> {
    let draw = full_response_mask(tokens, mask_id)?;
    let logits = forward_on_tape(tape, ids, mcfg, &draw.corrupted)?;
    let range = tokens.response_range();
    let realized: Vec<usize> = tokens.ids[range.clone()].to_vec();
    let resp_logits = tape.slice_rows(logits, range);
    let scores = match weighting {
        RlWeighting::Prob => {
            let probs = tape.softmax_rows(resp_logits);
            tape.pick_per_row(probs, &realized)
        }
        RlWeighting::LogProb => tape.cross_entropy_rows(resp_logits, &realized),
    };
    rl_objective_from_scores(tape, scores, reward, sigma_r, weighting)
}

pub fn rl_loss<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    tokens: &TokenSeq,
    mask_id: usize,
    reward: f64,
    sigma_r: f64,
    weighting: RlWeighting,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = crate::model::register_params(&mut tape, params);
    let loss = rl_loss_on_tape(&mut tape, &ids, mcfg, tokens, mask_id, reward, sigma_r, weighting)?;
    Ok(tape.scalar(loss).to_f64())
}

/// One-step response log probability: sum of log-softmax values at the
/// response positions of a fully masked response, gathered at the realized
/// tokens.
pub fn one_step_logprob<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    tokens: &TokenSeq,
    mask_id: usize,
) -> Result<f64> {
    let draw = full_response_mask(tokens, mask_id)?;
    let logits = forward_logits(params, mcfg, &draw.corrupted)?;
    Ok(logprob_from_logits(&logits, tokens))
}

/// The same sum computed from already-available logits of the fully masked
/// sequence.
pub fn logprob_from_logits<T: Scalar>(logits: &ndarray::Array2<T>, tokens: &TokenSeq) -> f64 {
    let range = tokens.response_range();
    let mut total = 0.0;
    for p in range {
        total += row_log_softmax_at(&logits.row(p), tokens.ids[p]).to_f64();
    }
    total
}

/// One training example: the clean token sequence and, for RL, its reward.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub tokens: TokenSeq,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub examples: Vec<TrainExample>,
    /// Population standard deviation of rewards (RL datasets).
    pub sigma_r: Option<f64>,
}

/// Renders and encodes pair records into training examples.
pub fn build_train_examples(
    pool: &OfflinePool,
    pairs: &[PairSpec],
    templates: &TemplateSet,
    task: &crate::oracle::TaskSpec,
    vocab: &Vocab,
    delim: DelimiterMode,
    mode: RenderMode,
) -> Result<TrainData> {
    let n_few = pairs.first().map(|p| p.context.len()).unwrap_or(1);
    let align = crate::vocab::prompt_alignment(vocab, task, templates, delim, n_few)?;
    let mut examples = Vec::with_capacity(pairs.len());
    let mut rewards = Vec::new();
    for pair in pairs {
        let context: Vec<(Design, f64)> = pair
            .context
            .iter()
            .map(|&i| (pool.entries[i].design.clone(), pool.entries[i].label))
            .collect();
        let target = &pool.entries[pair.target].design;
        let template = templates
            .train
            .get(pair.template)
            .ok_or_else(|| Error::Template(format!("template id {} out of range", pair.template)))?;
        let rendered = text::render_example(template, task, &context, target, mode, delim)?;
        let mut tokens = vocab.encode(&rendered.full_text(), rendered.prompt_text.len())?;
        tokens.pos_offset = align.saturating_sub(tokens.prompt_len());
        if let Some(r) = pair.reward {
            rewards.push(r);
        }
        examples.push(TrainExample { tokens, reward: pair.reward });
    }
    let sigma_r = if rewards.is_empty() {
        None
    } else {
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let var =
            rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rewards.len() as f64;
        Some(var.sqrt())
    };
    Ok(TrainData { examples, sigma_r })
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Default)]
pub struct StageReport {
    pub steps: Vec<StepLog>,
}

impl StageReport {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.steps[range];
        slice.iter().map(|s| s.loss).sum::<f64>() / slice.len() as f64
    }
}

enum Prepared {
    Masked { example_idx: usize, draw: MaskingDraw },
    Rl { example_idx: usize, reward: f64 },
}

/// Runs one stage: `steps` optimization steps of `grad_accum` micro-batches
/// of `batch_size` examples each. Micro-batch gradients are computed in
/// parallel with frozen parameters and reduced in index order, so results
/// do not depend on thread scheduling. Writes a CSV loss log line per step
/// (flushed) and a checkpoint at the end when paths are given.
pub fn run_stage<T: Scalar>(
    cfg: &StageConfig,
    mcfg: &ModelConfig,
    data: &TrainData,
    params: &mut Params<T>,
    mask_id: usize,
    mut log: Option<&mut dyn Write>,
    checkpoint_path: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(Error::Capacity("training data is empty".into()));
    }
    let sigma_r = match cfg.stage {
        Stage::Rl => {
            let s = data.sigma_r.ok_or_else(|| {
                Error::Degenerate("RL stage needs a reward standard deviation".into())
            })?;
            if !(s > 0.0) {
                return Err(Error::Degenerate(format!("sigma_r must be > 0, got {s}")));
            }
            for ex in &data.examples {
                if ex.reward.is_none() {
                    return Err(Error::Degenerate("RL stage needs rewards on every example".into()));
                }
            }
            s
        }
        _ => 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(params);
    let acfg = AdamWConfig {
        lr: cfg.base_lr,
        weight_decay: cfg.weight_decay,
        warmup_steps: cfg.warmup_steps,
        ..AdamWConfig::new(cfg.base_lr)
    };
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,stage,loss,lr")?;
        w.flush()?;
    }

    let window = cfg.grad_accum * cfg.batch_size;
    let mut report = StageReport::default();
    for step in 1..=cfg.steps {
        // Draw the whole window sequentially so the RNG stream is
        // independent of parallel execution.
        let mut prepared = Vec::with_capacity(window);
        for _ in 0..window {
            let example_idx = rng.random_range(0..data.examples.len());
            let ex = &data.examples[example_idx];
            match cfg.stage {
                Stage::Da | Stage::Sft => {
                    let stage = cfg.stage;
                    let draw = draw_mask(&ex.tokens, stage, mask_id, &mut rng)
                        .map_err(|e| stage_err(cfg.stage, step, e))?;
                    prepared.push(Prepared::Masked { example_idx, draw });
                }
                Stage::Rl => {
                    prepared.push(Prepared::Rl {
                        example_idx,
                        reward: ex.reward.expect("checked above"),
                    });
                }
            }
        }

        let results: Vec<Result<(f64, Grads<T>)>> = prepared
            .par_iter()
            .map(|job| match job {
                Prepared::Masked { example_idx, draw } => {
                    let clean = &data.examples[*example_idx].tokens;
                    loss_and_grad(params, |tape, ids| {
                        reconstruction_loss_on_tape(tape, ids, mcfg, clean, draw)
                    })
                }
                Prepared::Rl { example_idx, reward } => {
                    let tokens = &data.examples[*example_idx].tokens;
                    loss_and_grad(params, |tape, ids| {
                        rl_loss_on_tape(
                            tape,
                            ids,
                            mcfg,
                            tokens,
                            mask_id,
                            *reward,
                            sigma_r,
                            cfg.rl_weighting,
                        )
                    })
                }
            })
            .collect();

        let mut total = Grads::zeros_like(params);
        let mut loss_sum = 0.0;
        let scale = T::from_f64(1.0 / window as f64);
        for r in results {
            let (loss, grads) = r.map_err(|e| stage_err(cfg.stage, step, e))?;
            loss_sum += loss;
            total.add_scaled(&grads, scale);
        }
        let loss = loss_sum / window as f64;
        let lr = opt
            .apply(&acfg, params, &total)
            .map_err(|e| stage_err(cfg.stage, step, e))?;

        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step},{},{loss},{lr}", cfg.stage)?;
            w.flush()?;
        }
        report.steps.push(StepLog { step, stage: cfg.stage, loss, lr });
    }

    params
        .assert_finite()
        .map_err(|e| stage_err(cfg.stage, cfg.steps, e))?;
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, mcfg, params)?;
    }
    Ok(report)
}

fn stage_err(stage: Stage, step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { stage: inner, detail } => Error::Numeric {
            stage: format!("{stage} step {step} ({inner})"),
            detail,
        },
        other => other,
    }
}
