//! Orchestration: data generation, staged training, harvesting, evaluation,
//! probing, and the stage-ablation driver. Every step reads and writes
//! artifacts under a run directory, so a run can resume from any checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maskopt_core::decode::{
    save_harvest_jsonl, Candidate, HarvestConfig, Harvester,
};
use maskopt_core::eval::{
    aggregate, baseline_pool_best, baseline_random, evaluate_candidates, ranking_probe,
    write_probe_csv, write_report_csv, MetricsRow, ProbeConfig, ProbeReport, ReportLine,
};
use maskopt_core::model::{
    load_checkpoint, save_checkpoint, ModelConfig, Params, Precision, Scalar,
};
use maskopt_core::oracle::Oracle;
use maskopt_core::pool::{
    build_partition, build_pool, build_similarity_index, build_rl_pairs, build_sft_pairs,
    load_pairs_jsonl, load_pool_jsonl, save_pairs_jsonl, save_pool_jsonl, OfflinePool,
};
use maskopt_core::seed::derive_seed_indexed;
use maskopt_core::text::{RenderMode, TemplateSet};
use maskopt_core::train::{
    build_train_examples, run_stage, Stage, StageConfig, TrainData,
};
use maskopt_core::vocab::Vocab;
use maskopt_core::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;

/// Which of the three training stages a pipeline run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSet {
    pub da: bool,
    pub sft: bool,
    pub rl: bool,
}

impl StageSet {
    pub fn from_config(cfg: &RunConfig) -> StageSet {
        StageSet { da: cfg.stages.da.enabled, sft: cfg.stages.sft.enabled, rl: cfg.stages.rl.enabled }
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.da {
            parts.push("da");
        }
        if self.sft {
            parts.push("sft");
        }
        if self.rl {
            parts.push("rl");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// The seven non-empty stage combinations, in ablation-table order.
    pub fn all_seven() -> [StageSet; 7] {
        [
            StageSet { da: true, sft: false, rl: false },
            StageSet { da: false, sft: true, rl: false },
            StageSet { da: false, sft: false, rl: true },
            StageSet { da: true, sft: true, rl: false },
            StageSet { da: true, sft: false, rl: true },
            StageSet { da: false, sft: true, rl: true },
            StageSet { da: true, sft: true, rl: true },
        ]
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut out = Vec::new();
        if self.da {
            out.push(Stage::Da);
        }
        if self.sft {
            out.push(Stage::Sft);
        }
        if self.rl {
            out.push(Stage::Rl);
        }
        out
    }
}

/// Artifact paths inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> RunPaths {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.tsv")
    }
    pub fn templates_dir(&self) -> PathBuf {
        self.root.join("templates")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn probe(&self) -> PathBuf {
        self.root.join("probe.csv")
    }
    pub fn failure(&self) -> PathBuf {
        self.root.join("failure.json")
    }
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }
    pub fn pool(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("pool.jsonl")
    }
    pub fn sft_pairs(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("sft_pairs.jsonl")
    }
    pub fn rl_pairs(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("rl_pairs.jsonl")
    }
    pub fn sigma_r(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("rl_sigma.json")
    }
    pub fn checkpoint(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn loss_log(&self, seed: u64, stage: Stage) -> PathBuf {
        self.seed_dir(seed).join(format!("loss_{stage}.csv"))
    }
    pub fn harvest(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("harvest.jsonl")
    }
    pub fn harvest_stats(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("harvest_stats.json")
    }
    pub fn seed_report(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("eval.csv")
    }
}

/// Oracle, templates, and vocab shared across seeds. Templates and vocab are
/// written once by gen-data and reloaded bit-exactly by later commands.
pub struct Shared {
    pub task: maskopt_core::oracle::TaskSpec,
    pub oracle: Oracle,
    pub templates: TemplateSet,
    pub vocab: Vocab,
}

fn build_oracle(cfg: &RunConfig) -> Result<Oracle> {
    let task = cfg.task.to_task_spec()?;
    match &cfg.task.lookup_path {
        Some(path) => Oracle::from_lookup_csv(task, path, cfg.task.negate_labels),
        None => Oracle::new(task),
    }
}

/// Builds shared state from the config alone (gen-data path).
pub fn build_shared(cfg: &RunConfig) -> Result<Shared> {
    let oracle = build_oracle(cfg)?;
    let templates = match &cfg.corpus.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let vocab = Vocab::build(oracle.task(), &templates, cfg.delimiter_mode)?;
    Ok(Shared { task: oracle.task().clone(), oracle, templates, vocab })
}

/// Reloads shared state from run-directory artifacts (post-gen-data path).
pub fn load_shared(cfg: &RunConfig, paths: &RunPaths) -> Result<Shared> {
    let oracle = build_oracle(cfg)?;
    let templates = TemplateSet::load_dir(&paths.templates_dir())?;
    let vocab = Vocab::load(&paths.vocab(), cfg.delimiter_mode)?;
    Ok(Shared { task: oracle.task().clone(), oracle, templates, vocab })
}

#[derive(Serialize, Deserialize)]
struct SigmaRecord {
    sigma_r: f64,
}

/// The labeled dataset the pool is drawn from: the enumerated space for
/// discrete tasks, uniform samples for continuous ones, optionally truncated
/// at the top of the label range.
pub fn build_dataset(
    cfg: &RunConfig,
    oracle: &Oracle,
) -> Result<Vec<(maskopt_core::oracle::Design, f64)>> {
    let mut dataset = match oracle.task().kind {
        maskopt_core::oracle::SpaceKind::Discrete => oracle.enumerate_all()?,
        maskopt_core::oracle::SpaceKind::Continuous => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
                cfg.task.seed,
                "dataset",
                cfg.task.continuous_dataset_size as u64,
            ));
            oracle.sample_dataset(cfg.task.continuous_dataset_size, &mut rng)?
        }
    };
    if cfg.task.truncate_top_frac > 0.0 {
        dataset.sort_by(|a, b| a.1.total_cmp(&b.1));
        let drop = (cfg.task.truncate_top_frac * dataset.len() as f64).floor() as usize;
        dataset.truncate(dataset.len() - drop);
    }
    Ok(dataset)
}

/// gen-data: writes the resolved config, templates, vocab, and per-seed
/// pool + pair files.
pub fn cmd_gen_data(cfg: &RunConfig, paths: &RunPaths) -> Result<Shared> {
    std::fs::create_dir_all(&paths.root)?;
    cfg.save(&paths.config())?;
    let shared = build_shared(cfg)?;
    shared.templates.save_dir(&paths.templates_dir())?;
    shared.vocab.save(&paths.vocab())?;

    let dataset = build_dataset(cfg, &shared.oracle)?;
    let norm = shared.oracle.normalization();
    for &seed in &cfg.eval.seeds {
        let dir = paths.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let pool = build_pool(
            &dataset,
            cfg.pool.n_pool,
            &norm,
            cfg.pool.sub_sampling,
            derive_seed_indexed(cfg.pool.seed, "pool", seed),
        )?;
        save_pool_jsonl(&pool, &shared.task, &paths.pool(seed))?;

        let partition = build_partition(&pool, cfg.pool.partition_ratio)?;
        let index = build_similarity_index(&pool, &shared.task)?;
        let sft_pairs = build_sft_pairs(
            &pool,
            &partition,
            &index,
            cfg.corpus.n_few,
            cfg.corpus.n_sft_pairs,
            shared.templates.train.len(),
            cfg.corpus.context_mode,
            derive_seed_indexed(cfg.corpus.seed, "sft", seed),
        )?;
        save_pairs_jsonl(&sft_pairs, &paths.sft_pairs(seed))?;

        let (rl_pairs, sigma_r) = build_rl_pairs(
            &pool,
            &index,
            cfg.corpus.n_few,
            cfg.corpus.n_rl_pairs,
            shared.templates.train.len(),
            cfg.corpus.context_mode,
            derive_seed_indexed(cfg.corpus.seed, "rl", seed),
        )?;
        save_pairs_jsonl(&rl_pairs, &paths.rl_pairs(seed))?;
        let sigma = serde_json::to_string(&SigmaRecord { sigma_r })
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(paths.sigma_r(seed), sigma + "\n")?;
    }
    Ok(shared)
}

fn stage_block<'a>(cfg: &'a RunConfig, stage: Stage) -> &'a crate::config::StageBlock {
    match stage {
        Stage::Da => &cfg.stages.da,
        Stage::Sft => &cfg.stages.sft,
        Stage::Rl => &cfg.stages.rl,
    }
}

fn stage_config(cfg: &RunConfig, stage: Stage, seed: u64) -> StageConfig {
    let block = stage_block(cfg, stage);
    StageConfig {
        stage,
        base_lr: block.base_lr,
        steps: block.steps,
        grad_accum: block.grad_accum,
        batch_size: block.batch_size,
        seed: derive_seed_indexed(block.seed, &stage.to_string(), seed),
        warmup_steps: block.warmup_steps,
        weight_decay: block.weight_decay,
        rl_weighting: block.rl_weighting,
    }
}

/// The checkpoint a stage (or harvest/probe) starts from: the latest stage
/// in da < sft < rl order whose checkpoint file exists, else the (created on
/// demand) initialization checkpoint.
fn resume_checkpoint<T: Scalar>(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
    below: Option<Stage>,
) -> Result<(ModelConfig, Params<T>)> {
    let order = [Stage::Da, Stage::Sft, Stage::Rl];
    let cutoff = below
        .map(|s| order.iter().position(|&x| x == s).unwrap())
        .unwrap_or(order.len());
    for stage in order[..cutoff].iter().rev() {
        let path = paths.checkpoint(seed, &stage.to_string());
        if path.is_file() {
            return load_checkpoint(&path);
        }
    }
    let init = paths.checkpoint(seed, "init");
    if !init.is_file() {
        let mcfg = cfg.model.to_model_config(shared.vocab.size());
        let params = Params::<T>::init(&mcfg, derive_seed_indexed(cfg.model.init_seed, "init", seed))?;
        std::fs::create_dir_all(init.parent().unwrap())?;
        save_checkpoint(&init, &mcfg, &params)?;
    }
    load_checkpoint(&init)
}

fn load_train_data(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
    stage: Stage,
) -> Result<(OfflinePool, TrainData)> {
    let pool = load_pool_jsonl(&shared.task, &paths.pool(seed))?;
    let (pairs_path, mode) = match stage {
        Stage::Da | Stage::Sft => (paths.sft_pairs(seed), RenderMode::Sft),
        Stage::Rl => (paths.rl_pairs(seed), RenderMode::Rl),
    };
    let pairs = load_pairs_jsonl(&pairs_path)?;
    let mut data = build_train_examples(
        &pool,
        &pairs,
        &shared.templates,
        &shared.task,
        &shared.vocab,
        cfg.delimiter_mode,
        mode,
    )?;
    if stage == Stage::Rl {
        // The dataset-level sigma recorded at build time, not the per-load
        // recomputation (they agree, but the artifact is the contract).
        let text = std::fs::read_to_string(paths.sigma_r(seed))?;
        let record: SigmaRecord =
            serde_json::from_str(text.trim()).map_err(|e| Error::Format(e.to_string()))?;
        data.sigma_r = Some(record.sigma_r);
    }
    Ok((pool, data))
}

/// train --stage: runs one stage for every seed, resuming from the latest
/// earlier checkpoint.
pub fn cmd_train(cfg: &RunConfig, paths: &RunPaths, stage: Stage) -> Result<()> {
    match cfg.model.precision {
        Precision::Fast => cmd_train_typed::<f32>(cfg, paths, stage),
        Precision::Check => cmd_train_typed::<f64>(cfg, paths, stage),
    }
}

fn cmd_train_typed<T: Scalar>(cfg: &RunConfig, paths: &RunPaths, stage: Stage) -> Result<()> {
    let shared = load_shared(cfg, paths)?;
    for &seed in &cfg.eval.seeds {
        train_one_stage::<T>(cfg, paths, &shared, seed, stage)?;
    }
    Ok(())
}

fn train_one_stage<T: Scalar>(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
    stage: Stage,
) -> Result<()> {
    let (_pool, data) = load_train_data(cfg, paths, shared, seed, stage)?;
    let (mcfg, mut params) = resume_checkpoint::<T>(cfg, paths, shared, seed, Some(stage))?;
    let scfg = stage_config(cfg, stage, seed);
    let mut log = std::io::BufWriter::new(std::fs::File::create(paths.loss_log(seed, stage))?);
    run_stage(
        &scfg,
        &mcfg,
        &data,
        &mut params,
        shared.vocab.mask_id,
        Some(&mut log),
        Some(&paths.checkpoint(seed, &stage.to_string())),
    )?;
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HarvestStats {
    pub requested: usize,
    pub obtained: usize,
    pub attempts: usize,
    pub parse_failures: usize,
    pub duplicates: usize,
    pub clipped: usize,
    pub exhausted: bool,
}

impl HarvestStats {
    pub fn parse_failure_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.parse_failures as f64 / self.attempts as f64
        }
    }
}

/// Harvests one seed, writing candidates and statistics. Exhaustion is
/// reported in the stats rather than raised, so ablation floors (untrained
/// or RL-only models that cannot fill the quota) still produce artifacts.
pub fn harvest_one_seed<T: Scalar>(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
) -> Result<HarvestStats> {
    let pool = load_pool_jsonl(&shared.task, &paths.pool(seed))?;
    let index = build_similarity_index(&pool, &shared.task)?;
    let (mcfg, params) = resume_checkpoint::<T>(cfg, paths, shared, seed, None)?;
    let harvester = Harvester {
        pool: &pool,
        oracle: &shared.oracle,
        templates: &shared.templates,
        vocab: &shared.vocab,
        delim: cfg.delimiter_mode,
        context_mode: cfg.harvest.context_mode,
        similarity: Some(&index),
        use_val_templates: cfg.harvest.use_val_templates,
    };
    let hcfg = HarvestConfig {
        n_candidates: cfg.harvest.n_candidates,
        n_few: cfg.corpus.n_few,
        max_attempts_multiplier: cfg.harvest.max_attempts_multiplier,
        decode_mode: cfg.harvest.decode_mode,
        iterative_steps: cfg.harvest.iterative_steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.harvest.seed, "harvest", seed));
    let (report, exhausted) = match harvester.run(&params, &mcfg, &hcfg, &mut rng) {
        Ok(report) => (report, false),
        Err(Error::HarvestExhausted { report }) => (*report, true),
        Err(other) => return Err(other),
    };
    save_harvest_jsonl(&report.candidates, &shared.task, &paths.harvest(seed))?;
    let stats = HarvestStats {
        requested: report.requested,
        obtained: report.candidates.len(),
        attempts: report.attempts,
        parse_failures: report.parse_failures,
        duplicates: report.duplicates,
        clipped: report.clipped,
        exhausted,
    };
    let text = serde_json::to_string_pretty(&stats).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(paths.harvest_stats(seed), text + "\n")?;
    Ok(stats)
}

/// harvest subcommand: exhaustion on any seed is an error (partial artifacts
/// are still written first).
pub fn cmd_harvest(cfg: &RunConfig, paths: &RunPaths) -> Result<()> {
    let shared = load_shared(cfg, paths)?;
    let mut exhausted = Vec::new();
    for &seed in &cfg.eval.seeds {
        let stats = match cfg.model.precision {
            Precision::Fast => harvest_one_seed::<f32>(cfg, paths, &shared, seed)?,
            Precision::Check => harvest_one_seed::<f64>(cfg, paths, &shared, seed)?,
        };
        if stats.exhausted {
            exhausted.push((seed, stats));
        }
    }
    if let Some((seed, stats)) = exhausted.first() {
        return Err(Error::Capacity(format!(
            "harvest exhausted on seed {seed}: {} of {} after {} attempts",
            stats.obtained, stats.requested, stats.attempts
        )));
    }
    Ok(())
}

/// Per-seed evaluation products consumed by reports and by the ablation
/// driver.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Option<MetricsRow>,
    pub stats: HarvestStats,
    pub pool_best: f64,
    pub random_baseline: MetricsRow,
}

pub fn eval_one_seed(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
) -> Result<SeedOutcome> {
    let pool = load_pool_jsonl(&shared.task, &paths.pool(seed))?;
    let candidates: Vec<Candidate> =
        maskopt_core::decode::load_harvest_jsonl(&shared.task, &paths.harvest(seed))?;
    let stats: HarvestStats = {
        let text = std::fs::read_to_string(paths.harvest_stats(seed))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?
    };
    let metrics = if candidates.is_empty() {
        None
    } else {
        Some(evaluate_candidates(&candidates)?)
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed_indexed(cfg.harvest.seed, "random-baseline", seed));
    let random_baseline = baseline_random(&shared.oracle, cfg.eval.random_baseline_n, &mut rng)?;
    Ok(SeedOutcome {
        seed,
        metrics,
        stats,
        pool_best: baseline_pool_best(&pool),
        random_baseline,
    })
}

fn seed_report_lines(outcome: &SeedOutcome) -> Vec<ReportLine> {
    let seed = outcome.seed.to_string();
    let mut lines = Vec::new();
    if let Some(m) = &outcome.metrics {
        for (name, value) in m.as_pairs() {
            lines.push(ReportLine::new(&seed, name, value));
        }
    }
    lines.push(ReportLine::new(&seed, "n_candidates", outcome.stats.obtained as f64));
    lines.push(ReportLine::new(&seed, "parse_failure_rate", outcome.stats.parse_failure_rate()));
    lines.push(ReportLine::new(
        &seed,
        "harvest_exhausted",
        if outcome.stats.exhausted { 1.0 } else { 0.0 },
    ));
    lines.push(ReportLine::new(&seed, "clipped_candidates", outcome.stats.clipped as f64));
    lines.push(ReportLine::new(&seed, "pool_best", outcome.pool_best));
    lines.push(ReportLine::new(&seed, "random_max", outcome.random_baseline.max));
    lines
}

fn full_report_lines(outcomes: &[SeedOutcome]) -> Result<Vec<ReportLine>> {
    let mut lines = Vec::new();
    for outcome in outcomes {
        lines.extend(seed_report_lines(outcome));
    }
    let rows: Vec<MetricsRow> = outcomes.iter().filter_map(|o| o.metrics).collect();
    lines.push(ReportLine::new("aggregate", "seeds_evaluated", rows.len() as f64));
    if !rows.is_empty() {
        let (mean, std) = aggregate(&rows)?;
        for (name, value) in mean.as_pairs() {
            lines.push(ReportLine::new("aggregate", format!("{name}_mean"), value));
        }
        for (name, value) in std.as_pairs() {
            lines.push(ReportLine::new("aggregate", format!("{name}_std"), value));
        }
    }
    let n = outcomes.len() as f64;
    let pool_best_mean = outcomes.iter().map(|o| o.pool_best).sum::<f64>() / n;
    let random_rows: Vec<MetricsRow> = outcomes.iter().map(|o| o.random_baseline).collect();
    let (rand_mean, rand_std) = aggregate(&random_rows)?;
    lines.push(ReportLine::new("baseline", "pool_best_mean", pool_best_mean));
    lines.push(ReportLine::new("baseline", "random_max_mean", rand_mean.max));
    lines.push(ReportLine::new("baseline", "random_max_std", rand_std.max));
    Ok(lines)
}

pub fn cmd_eval(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<SeedOutcome>> {
    let shared = load_shared(cfg, paths)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.eval.seeds {
        let outcome = eval_one_seed(cfg, paths, &shared, seed)?;
        write_report_csv(&paths.seed_report(seed), &seed_report_lines(&outcome))?;
        outcomes.push(outcome);
    }
    write_report_csv(&paths.report(), &full_report_lines(&outcomes)?)?;
    Ok(outcomes)
}

/// probe subcommand: scores the ranking probe with the latest checkpoint of
/// the first seed (the initialization checkpoint when nothing was trained).
pub fn cmd_probe(cfg: &RunConfig, paths: &RunPaths) -> Result<ProbeReport> {
    let shared = load_shared(cfg, paths)?;
    let seed = cfg.eval.seeds[0];
    let pool = load_pool_jsonl(&shared.task, &paths.pool(seed))?;
    let pcfg = ProbeConfig { k: cfg.eval.probe_k, groups: cfg.eval.probe_groups, seed: cfg.eval.probe_seed };
    let report = match cfg.model.precision {
        Precision::Fast => {
            let (mcfg, params) = resume_checkpoint::<f32>(cfg, paths, &shared, seed, None)?;
            ranking_probe(&params, &mcfg, &pool, &shared.task, &shared.vocab, cfg.delimiter_mode, &pcfg)?
        }
        Precision::Check => {
            let (mcfg, params) = resume_checkpoint::<f64>(cfg, paths, &shared, seed, None)?;
            ranking_probe(&params, &mcfg, &pool, &shared.task, &shared.vocab, cfg.delimiter_mode, &pcfg)?
        }
    };
    write_probe_csv(&paths.probe(), &[report.clone()])?;
    Ok(report)
}

/// pipeline: gen-data, the enabled stages in DA -> SFT -> RL order, harvest,
/// evaluate, and optionally the probe, for every seed.
pub fn cmd_pipeline(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<SeedOutcome>> {
    let shared = cmd_gen_data(cfg, paths)?;
    let set = StageSet::from_config(cfg);
    for &seed in &cfg.eval.seeds {
        match cfg.model.precision {
            Precision::Fast => pipeline_seed::<f32>(cfg, paths, &shared, seed, &set)?,
            Precision::Check => pipeline_seed::<f64>(cfg, paths, &shared, seed, &set)?,
        }
    }
    let mut outcomes = Vec::new();
    for &seed in &cfg.eval.seeds {
        let outcome = eval_one_seed(cfg, paths, &shared, seed)?;
        write_report_csv(&paths.seed_report(seed), &seed_report_lines(&outcome))?;
        outcomes.push(outcome);
    }
    write_report_csv(&paths.report(), &full_report_lines(&outcomes)?)?;
    if cfg.eval.run_probe {
        cmd_probe(cfg, paths)?;
    }
    Ok(outcomes)
}

fn pipeline_seed<T: Scalar>(
    cfg: &RunConfig,
    paths: &RunPaths,
    shared: &Shared,
    seed: u64,
    set: &StageSet,
) -> Result<()> {
    for stage in set.stages() {
        train_one_stage::<T>(cfg, paths, shared, seed, stage)?;
    }
    harvest_one_seed::<T>(cfg, paths, shared, seed)?;
    Ok(())
}

/// One ablation row: the stage subset plus aggregate scores and parse
/// statistics.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub subset: String,
    pub max_mean: Option<f64>,
    pub max_std: Option<f64>,
    pub p50_mean: Option<f64>,
    pub parse_failure_rate_mean: f64,
    pub exhausted_seeds: usize,
}

/// ablate: runs the pipeline once per non-empty stage subset (Table-style
/// seven rows) into subdirectories, then writes a comparison CSV.
pub fn cmd_ablate(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&paths.root)?;
    let mut rows = Vec::new();
    for set in StageSet::all_seven() {
        let mut sub_cfg = cfg.clone();
        sub_cfg.stages.da.enabled = set.da;
        sub_cfg.stages.sft.enabled = set.sft;
        sub_cfg.stages.rl.enabled = set.rl;
        let sub_paths = RunPaths::new(paths.root.join(format!("ablate_{}", set.name().replace('+', "_"))));
        let outcomes = cmd_pipeline(&sub_cfg, &sub_paths)?;
        rows.push(ablation_row(&set, &outcomes)?);
    }
    write_ablation_csv(&paths.root.join("ablate.csv"), &rows)?;
    Ok(rows)
}

pub fn ablation_row(set: &StageSet, outcomes: &[SeedOutcome]) -> Result<AblationRow> {
    let metric_rows: Vec<MetricsRow> = outcomes.iter().filter_map(|o| o.metrics).collect();
    let (max_mean, max_std, p50_mean) = if metric_rows.is_empty() {
        (None, None, None)
    } else {
        let (mean, std) = aggregate(&metric_rows)?;
        (Some(mean.max), Some(std.max), Some(mean.median))
    };
    let parse_failure_rate_mean = outcomes
        .iter()
        .map(|o| o.stats.parse_failure_rate())
        .sum::<f64>()
        / outcomes.len() as f64;
    Ok(AblationRow {
        subset: set.name(),
        max_mean,
        max_std,
        p50_mean,
        parse_failure_rate_mean,
        exhausted_seeds: outcomes.iter().filter(|o| o.stats.exhausted).count(),
    })
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "subset,max_mean,max_std,p50_mean,parse_failure_rate_mean,exhausted_seeds")?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.subset,
            fmt(r.max_mean),
            fmt(r.max_std),
            fmt(r.p50_mean),
            r.parse_failure_rate_mean,
            r.exhausted_seeds
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Machine-readable failure record written next to the artifacts.
#[derive(Serialize)]
pub struct FailureRecord<'a> {
    pub command: &'a str,
    pub error: String,
}

pub fn write_failure_record(paths: &RunPaths, command: &str, error: &Error) -> Result<PathBuf> {
    std::fs::create_dir_all(&paths.root)?;
    let record = FailureRecord { command, error: error.to_string() };
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?;
    let path = paths.failure();
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Aggregate view used by summaries and tests.
pub fn outcome_summary(outcomes: &[SeedOutcome]) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    let rows: Vec<MetricsRow> = outcomes.iter().filter_map(|o| o.metrics).collect();
    if let Ok((mean, _)) = aggregate(&rows) {
        map.insert("max_mean".into(), mean.max);
        map.insert("p50_mean".into(), mean.median);
    }
    map.insert(
        "parse_failure_rate_mean".into(),
        outcomes.iter().map(|o| o.stats.parse_failure_rate()).sum::<f64>() / outcomes.len() as f64,
    );
    map.insert(
        "pool_best_mean".into(),
        outcomes.iter().map(|o| o.pool_best).sum::<f64>() / outcomes.len() as f64,
    );
    map.insert(
        "random_max_mean".into(),
        outcomes.iter().map(|o| o.random_baseline.max).sum::<f64>() / outcomes.len() as f64,
    );
    map
}
