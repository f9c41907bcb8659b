//! Shared fixtures for the criterion benchmarks.

use maskopt_core::model::{AttentionMode, ModelConfig, Params, Precision};
use maskopt_core::oracle::{Oracle, TaskSpec};
use maskopt_core::pool::{build_pool, OfflinePool, SubSampling};
use maskopt_core::text::{DelimiterMode, RenderMode, TemplateSet};
use maskopt_core::train::{build_train_examples, TrainData};
use maskopt_core::vocab::Vocab;

pub struct Fixture {
    pub task: TaskSpec,
    pub oracle: Oracle,
    pub pool: OfflinePool,
    pub templates: TemplateSet,
    pub vocab: Vocab,
    pub mcfg: ModelConfig,
    pub params: Params<f32>,
    pub data: TrainData,
}

/// The desk task wired up end to end with a freshly initialized model.
pub fn desk_fixture() -> Fixture {
    let task = TaskSpec::desk_discrete(7);
    let oracle = Oracle::new(task.clone()).unwrap();
    let dataset = oracle.enumerate_all().unwrap();
    let pool =
        build_pool(&dataset, 500, &oracle.normalization(), SubSampling::Even, 0).unwrap();
    let templates = TemplateSet::builtin();
    let vocab = Vocab::build(&task, &templates, DelimiterMode::Tokens).unwrap();

    let partition = maskopt_core::pool::build_partition(&pool, 0.8).unwrap();
    let index = maskopt_core::pool::build_similarity_index(&pool, &task).unwrap();
    let pairs = maskopt_core::pool::build_sft_pairs(
        &pool,
        &partition,
        &index,
        3,
        64,
        templates.train.len(),
        maskopt_core::pool::ContextMode::Similar,
        1,
    )
    .unwrap();
    let data = build_train_examples(
        &pool,
        &pairs,
        &templates,
        &task,
        &vocab,
        DelimiterMode::Tokens,
        RenderMode::Sft,
    )
    .unwrap();

    let mcfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        max_len: 512,
        vocab_size: vocab.size(),
        attention_mode: AttentionMode::Bidirectional,
        precision: Precision::Fast,
    };
    let params = Params::<f32>::init(&mcfg, 3).unwrap();
    Fixture { task, oracle, pool, templates, vocab, mcfg, params, data }
}
