// scratch: context sensitivity of a trained checkpoint
use maskopt_core::decode::{greedy_fill, response_token_length};
use maskopt_core::model::load_checkpoint;
use maskopt_core::oracle::{Design, Oracle, TaskSpec};
use maskopt_core::pool::load_pool_jsonl;
use maskopt_core::text::{self, DelimiterMode, RenderMode, TemplateSet};
use maskopt_core::vocab::{prompt_alignment, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::path::Path;

fn main() {
    let which = std::env::args().nth(1).unwrap_or("sft".into());
    let run = Path::new("/tmp/pilot3");
    let task = TaskSpec::desk_discrete(7);
    let oracle = Oracle::new(task.clone()).unwrap();
    let templates = TemplateSet::load_dir(&run.join("templates")).unwrap();
    let vocab = Vocab::load(&run.join("vocab.tsv"), DelimiterMode::Tokens).unwrap();
    let pool = load_pool_jsonl(&task, &run.join("seed_1/pool.jsonl")).unwrap();
    let (mcfg, params) =
        load_checkpoint::<f32>(&run.join(format!("seed_1/checkpoints/{which}.ckpt"))).unwrap();

    let response_len = response_token_length(&task, &vocab, DelimiterMode::Tokens).unwrap();
    let align = prompt_alignment(&vocab, &task, &templates, DelimiterMode::Tokens, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut unique: HashSet<Vec<usize>> = HashSet::new();
    let mut parses = 0;
    let mut best = f64::MIN;
    let mut scores = vec![];
    let n_trials = 400;
    for t in 0..n_trials {
        let mode = std::env::args().nth(2).unwrap_or("random".into());
        let ids: Vec<usize> = if mode == "similar" {
            let index = maskopt_core::pool::build_similarity_index(&pool, &task).unwrap();
            let anchor = rng.random_range(0..pool.len());
            let all: Vec<usize> = (0..pool.len()).collect();
            index.top_similar(anchor, 3, &all)
        } else {
            let picks = rand::seq::index::sample(&mut rng, pool.len(), 3);
            let mut ids: Vec<usize> = picks.iter().collect();
            ids.sort_unstable();
            ids
        };
        let context: Vec<(Design, f64)> =
            ids.iter().map(|&i| (pool.entries[i].design.clone(), pool.entries[i].label)).collect();
        let template = &templates.train[t % 4];
        let prompt = text::render_prompt(template, &task, &context, RenderMode::Inference, DelimiterMode::Tokens).unwrap();
        let mut ptoks = vocab.encode(&prompt.text, prompt.text.len()).unwrap();
        ptoks.pos_offset = align - ptoks.len();
        let out = greedy_fill(&params, &mcfg, &ptoks, vocab.mask_id, response_len).unwrap();
        let text_out: String = out.iter().map(|&id| vocab.token(id)).collect();
        if let Ok(p) = text::parse_design(&task, &text_out, DelimiterMode::Tokens) {
            parses += 1;
            let y = oracle.normalization().normalize(oracle.score(&p.design).unwrap());
            scores.push(y);
            best = best.max(y);
            let Design::Discrete(s) = p.design else { panic!() };
            unique.insert(s);
        }
    }
    scores.sort_by(f64::total_cmp);
    println!("{which}: {n_trials} prompts -> parses {parses}, unique {}, best {:.3}, median {:.3}",
        unique.len(), best, if scores.is_empty() { f64::NAN } else { scores[scores.len()/2] });
}
