//! Candidate generation: one-pass greedy unmasking, optional iterative
//! refinement, and dedup harvesting with context resampling.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_logits, ModelConfig, Params, Scalar};
use crate::oracle::{Design, DesignKey, Oracle, SpaceKind, TaskSpec};
use crate::pool::{ContextMode, OfflinePool, SimilarityIndex};
use crate::text::{self, DelimiterMode, RenderMode, TemplateSet};
use crate::vocab::{Role, TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    OnePass,
    Iterative,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarvestConfig {
    /// Unique valid candidates to collect.
    pub n_candidates: usize,
    /// Context entries per inference prompt.
    pub n_few: usize,
    /// Attempt budget = multiplier * n_candidates.
    pub max_attempts_multiplier: usize,
    pub decode_mode: DecodeMode,
    /// Refinement rounds when decode_mode is iterative.
    pub iterative_steps: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        HarvestConfig {
            n_candidates: 128,
            n_few: 3,
            max_attempts_multiplier: 50,
            decode_mode: DecodeMode::OnePass,
            iterative_steps: 8,
        }
    }
}

/// One harvested design with its oracle scores.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub design: Design,
    pub raw: f64,
    pub norm: f64,
    /// Running index of the prompt that produced this candidate.
    pub prompt_id: usize,
    /// Attempt counter at the time the candidate was accepted.
    pub attempt: usize,
    /// Whether any continuous value was clipped into bounds at parse time.
    pub clipped: bool,
}

/// Outcome of a harvest run, including rejection statistics.
#[derive(Clone, Debug, Default)]
pub struct HarvestReport {
    pub candidates: Vec<Candidate>,
    pub requested: usize,
    pub attempts: usize,
    pub parse_failures: usize,
    pub duplicates: usize,
    pub clipped: usize,
}

impl HarvestReport {
    /// Parse failures over attempts; 0 when nothing was attempted.
    pub fn parse_failure_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.parse_failures as f64 / self.attempts as f64
        }
    }
}

/// Appends `response_len` mask tokens to a prompt-only sequence.
fn with_masked_response(prompt: &TokenSeq, mask_id: usize, response_len: usize) -> TokenSeq {
    let mut seq = prompt.clone();
    for _ in 0..response_len {
        seq.ids.push(mask_id);
        seq.roles.push(Role::Response);
    }
    seq
}

/// Argmax with ties broken by the lowest token id.
fn argmax_row<T: Scalar>(row: &ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fills a masked response in a single forward pass: every response position
/// takes its argmax token. Deterministic.
pub fn greedy_fill<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    prompt: &TokenSeq,
    mask_id: usize,
    response_len: usize,
) -> Result<Vec<usize>> {
    if response_len == 0 {
        return Err(Error::Shape("response length must be >= 1".into()));
    }
    let seq = with_masked_response(prompt, mask_id, response_len);
    let logits = forward_logits(params, mcfg, &seq)?;
    let start = prompt.len();
    Ok((0..response_len).map(|i| argmax_row(&logits.row(start + i))).collect())
}

/// Confidence-ordered refinement: each round fixes the
/// ceil(remaining/rounds_left) still-masked positions whose predicted token
/// has the highest probability, then re-runs the forward pass. One round
/// reduces exactly to [`greedy_fill`].
pub fn iterative_fill<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    prompt: &TokenSeq,
    mask_id: usize,
    response_len: usize,
    rounds: usize,
) -> Result<Vec<usize>> {
    Ok(iterative_fill_with_trace(params, mcfg, prompt, mask_id, response_len, rounds)?.0)
}

/// [`iterative_fill`] plus the positions fixed in each round.
pub fn iterative_fill_with_trace<T: Scalar>(
    params: &Params<T>,
    mcfg: &ModelConfig,
    prompt: &TokenSeq,
    mask_id: usize,
    response_len: usize,
    rounds: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if rounds == 0 {
        return Err(Error::Range("iterative fill needs at least one round".into()));
    }
    if response_len == 0 {
        return Err(Error::Shape("response length must be >= 1".into()));
    }
    let start = prompt.len();
    let mut seq = with_masked_response(prompt, mask_id, response_len);
    let mut still_masked: Vec<usize> = (0..response_len).collect();
    let mut out = vec![0usize; response_len];
    let mut trace = Vec::with_capacity(rounds);
    for round in 0..rounds {
        if still_masked.is_empty() {
            trace.push(Vec::new());
            continue;
        }
        let rounds_left = rounds - round;
        let take = still_masked.len().div_ceil(rounds_left);
        let logits = forward_logits(params, mcfg, &seq)?;
        // Confidence of a masked position: probability of its argmax token.
        let mut ranked: Vec<(f64, usize)> = still_masked
            .iter()
            .map(|&i| {
                let row = logits.row(start + i);
                let best = argmax_row(&row);
                let m = row[best];
                let mut denom = T::zero();
                for &x in row.iter() {
                    denom = denom + (x - m).exp();
                }
                let conf = (T::one() / denom).to_f64();
                (conf, i)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let fixed: Vec<usize> = ranked.iter().take(take).map(|&(_, i)| i).collect();
        for &i in &fixed {
            let row = logits.row(start + i);
            let tok = argmax_row(&row);
            out[i] = tok;
            seq.ids[start + i] = tok;
        }
        still_masked.retain(|i| !fixed.contains(i));
        trace.push(fixed);
    }
    if !still_masked.is_empty() {
        return Err(Error::Shape("iterative fill left masked positions".into()));
    }
    Ok((out, trace))
}

/// Token length of a rendered response line; constant per task because
/// labels and designs render at fixed width.
pub fn response_token_length(task: &TaskSpec, vocab: &Vocab, delim: DelimiterMode) -> Result<usize> {
    let design = match task.kind {
        SpaceKind::Discrete => Design::Discrete(vec![0; task.length]),
        SpaceKind::Continuous => Design::Continuous(
            task.bounds.iter().map(|&(lo, hi)| (lo + hi) / 2.0).collect(),
        ),
    };
    let line = text::render_response(task, &design, delim)?;
    Ok(vocab.encode(&line, 0)?.len())
}

/// Everything a harvest run reads: the pool for contexts, the oracle for
/// scoring, the text/vocab stack for rendering and parsing.
pub struct Harvester<'a> {
    pub pool: &'a OfflinePool,
    pub oracle: &'a Oracle,
    pub templates: &'a TemplateSet,
    pub vocab: &'a Vocab,
    pub delim: DelimiterMode,
    pub context_mode: ContextMode,
    /// Required when context_mode is Similar.
    pub similarity: Option<&'a SimilarityIndex>,
    /// Sample inference templates from the held-out set instead of training
    /// templates.
    pub use_val_templates: bool,
}

impl Harvester<'_> {
    /// Generates until `cfg.n_candidates` unique parseable designs are
    /// collected, resampling the context for every attempt. Exhausting the
    /// attempt budget returns the partial results inside the error.
    pub fn run<T: Scalar>(
        &self,
        params: &Params<T>,
        mcfg: &ModelConfig,
        cfg: &HarvestConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<HarvestReport> {
        if self.pool.is_empty() {
            return Err(Error::Capacity("harvest needs a non-empty pool".into()));
        }
        if cfg.n_few == 0 || cfg.n_few > self.pool.len() {
            return Err(Error::Capacity(format!(
                "n_few {} out of range for pool of {}",
                cfg.n_few,
                self.pool.len()
            )));
        }
        let task = self.oracle.task();
        let templates = if self.use_val_templates {
            &self.templates.val
        } else {
            &self.templates.train
        };
        if templates.is_empty() {
            return Err(Error::Template("no templates to sample from".into()));
        }
        let response_len = response_token_length(task, self.vocab, self.delim)?;
        let align =
            crate::vocab::prompt_alignment(self.vocab, task, self.templates, self.delim, cfg.n_few)?;
        let budget = cfg.max_attempts_multiplier * cfg.n_candidates;

        let mut report = HarvestReport { requested: cfg.n_candidates, ..Default::default() };
        let mut seen: HashSet<DesignKey> = HashSet::with_capacity(cfg.n_candidates);
        let mut prompt_id = 0usize;
        while report.candidates.len() < cfg.n_candidates && report.attempts < budget {
            report.attempts += 1;
            let template = &templates[rng.random_range(0..templates.len())];
            let context_ids: Vec<usize> = match self.context_mode {
                ContextMode::Random => {
                    let picks = rand::seq::index::sample(rng, self.pool.len(), cfg.n_few);
                    let mut ids: Vec<usize> = picks.iter().collect();
                    ids.sort_unstable();
                    ids
                }
                ContextMode::Similar => {
                    let index = self.similarity.ok_or_else(|| {
                        Error::Shape("similar context mode needs a similarity index".into())
                    })?;
                    let anchor = rng.random_range(0..self.pool.len());
                    let all: Vec<usize> = (0..self.pool.len()).collect();
                    index.top_similar(anchor, cfg.n_few, &all)
                }
            };
            let context: Vec<(Design, f64)> = context_ids
                .iter()
                .map(|&i| (self.pool.entries[i].design.clone(), self.pool.entries[i].label))
                .collect();
            let prompt = text::render_prompt(template, task, &context, RenderMode::Inference, self.delim)?;
            let mut prompt_tokens = self.vocab.encode(&prompt.text, prompt.text.len())?;
            prompt_tokens.pos_offset = align.saturating_sub(prompt_tokens.len());
            prompt_id += 1;

            let response_ids = match cfg.decode_mode {
                DecodeMode::OnePass => {
                    greedy_fill(params, mcfg, &prompt_tokens, self.vocab.mask_id, response_len)?
                }
                DecodeMode::Iterative => iterative_fill(
                    params,
                    mcfg,
                    &prompt_tokens,
                    self.vocab.mask_id,
                    response_len,
                    cfg.iterative_steps,
                )?,
            };
            let response_text: String =
                response_ids.iter().map(|&id| self.vocab.token(id)).collect();
            let parsed = match text::parse_design(task, &response_text, self.delim) {
                Ok(p) => p,
                Err(_) => {
                    report.parse_failures += 1;
                    continue;
                }
            };
            let key = parsed.design.dedup_key();
            if seen.contains(&key) {
                report.duplicates += 1;
                continue;
            }
            let raw = self.oracle.score(&parsed.design)?;
            let norm = self.oracle.normalization().normalize(raw);
            seen.insert(key);
            if parsed.clipped {
                report.clipped += 1;
            }
            report.candidates.push(Candidate {
                design: parsed.design,
                raw,
                norm,
                prompt_id: prompt_id - 1,
                attempt: report.attempts - 1,
                clipped: parsed.clipped,
            });
        }
        if report.candidates.len() < cfg.n_candidates {
            return Err(Error::HarvestExhausted { report: Box::new(report) });
        }
        Ok(report)
    }
}

#[derive(Serialize, Deserialize)]
struct HarvestRecord {
    design: serde_json::Value,
    raw: f64,
    norm: f64,
    attempt: usize,
}

pub fn save_harvest_jsonl(candidates: &[Candidate], task: &TaskSpec, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in candidates {
        let design = match &c.design {
            Design::Discrete(_) => serde_json::Value::String(c.design.symbol_string(task)?),
            Design::Continuous(values) => serde_json::json!(values),
        };
        let record = HarvestRecord { design, raw: c.raw, norm: c.norm, attempt: c.attempt };
        serde_json::to_writer(&mut f, &record).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads back the (norm, raw, attempt) triples of a harvest file; designs are
/// re-parsed against the task.
pub fn load_harvest_jsonl(task: &TaskSpec, path: &Path) -> Result<Vec<Candidate>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: HarvestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?;
        let design = match (&record.design, task.kind) {
            (serde_json::Value::String(s), SpaceKind::Discrete) => {
                Design::from_symbol_string(task, s)?
            }
            (serde_json::Value::Array(items), SpaceKind::Continuous) => {
                let values: Option<Vec<f64>> = items.iter().map(|v| v.as_f64()).collect();
                let d = Design::Continuous(
                    values.ok_or_else(|| Error::Format("non-numeric design".into()))?,
                );
                d.validate(task)?;
                d
            }
            _ => return Err(Error::Format("design value does not match task kind".into())),
        };
        out.push(Candidate {
            design,
            raw: record.raw,
            norm: record.norm,
            prompt_id: 0,
            attempt: record.attempt,
            clipped: false,
        });
    }
    Ok(out)
}
