//! Tokenizer for the rendered corpus: delimiter and mask specials plus
//! greedy longest-match over word and single-character units harvested from
//! the templates.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::oracle::{Design, SpaceKind, TaskSpec};
use crate::text::{
    self, DelimiterMode, RenderMode, TemplateSet, DESIGN_END, DESIGN_START, LABEL_END,
    LABEL_START, MASK_TOKEN, OPTION_LETTERS, PAD_TOKEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Response,
    Pad,
}

/// Token ids plus per-position roles. Response positions are contiguous and
/// trailing (before any padding).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
    /// First positional-embedding row this sequence occupies. Prompts of
    /// different templates are right-aligned by offsetting shorter ones, so
    /// response tokens always land on the same embedding rows.
    pub pos_offset: usize,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, roles: Vec<Role>) -> TokenSeq {
        TokenSeq { ids, roles, pos_offset: 0 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token index range of the response span.
    pub fn response_range(&self) -> std::ops::Range<usize> {
        let start = self.roles.iter().position(|&r| r == Role::Response);
        match start {
            None => 0..0,
            Some(s) => {
                let e = self.roles.iter().rposition(|&r| r == Role::Response).unwrap() + 1;
                s..e
            }
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.roles.iter().filter(|&&r| r == Role::Prompt).count()
    }

    /// Roles must run prompt*, response*, pad*.
    pub fn validate_layout(&self) -> Result<()> {
        if self.ids.len() != self.roles.len() {
            return Err(Error::Shape("ids and roles length differ".into()));
        }
        let mut phase = 0;
        for &r in &self.roles {
            let p = match r {
                Role::Prompt => 0,
                Role::Response => 1,
                Role::Pad => 2,
            };
            if p < phase {
                return Err(Error::Shape("roles out of prompt/response/pad order".into()));
            }
            phase = p;
        }
        Ok(())
    }

    pub fn padded_to(&self, len: usize, pad_id: usize) -> TokenSeq {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(pad_id);
            out.roles.push(Role::Pad);
        }
        out
    }
}

/// Immutable token inventory with dense ids, specials first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    pub pad_id: usize,
    pub mask_id: usize,
    /// design-start, design-end, label-start, label-end; None in plain mode.
    pub delimiter_ids: Option<[usize; 4]>,
    max_unit_len: usize,
    delimiter_mode: DelimiterMode,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn delimiter_mode(&self) -> DelimiterMode {
        self.delimiter_mode
    }

    /// Builds the vocabulary from the task and template set. Unit inventory:
    /// specials, then word and single-character units in first-occurrence
    /// order over a deterministic coverage corpus (every template rendered
    /// once, plus the probe scaffold and a guarantee string of all label and
    /// format characters).
    pub fn build(task: &TaskSpec, templates: &TemplateSet, delim: DelimiterMode) -> Result<Vocab> {
        let corpus = coverage_corpus(task, templates, delim)?;

        let mut tokens: Vec<String> = Vec::new();
        let mut id_of: HashMap<String, usize> = HashMap::new();
        let add = |tok: &str, tokens: &mut Vec<String>, id_of: &mut HashMap<String, usize>| {
            if !id_of.contains_key(tok) {
                id_of.insert(tok.to_string(), tokens.len());
                tokens.push(tok.to_string());
            }
        };

        add(PAD_TOKEN, &mut tokens, &mut id_of);
        add(MASK_TOKEN, &mut tokens, &mut id_of);
        let delimiter_ids = match delim {
            DelimiterMode::Tokens => {
                let base = tokens.len();
                for d in [DESIGN_START, DESIGN_END, LABEL_START, LABEL_END] {
                    add(d, &mut tokens, &mut id_of);
                }
                Some([base, base + 1, base + 2, base + 3])
            }
            DelimiterMode::PlainText => None,
        };

        for piece in &corpus {
            let mut rest = piece.as_str();
            while !rest.is_empty() {
                if delim == DelimiterMode::Tokens {
                    if let Some(d) = [DESIGN_START, DESIGN_END, LABEL_START, LABEL_END]
                        .iter()
                        .find(|d| rest.starts_with(**d))
                    {
                        rest = &rest[d.len()..];
                        continue;
                    }
                }
                let c = rest.chars().next().unwrap();
                if c.is_alphabetic() {
                    let end = rest
                        .char_indices()
                        .find(|(_, c)| !c.is_alphabetic())
                        .map(|(i, _)| i)
                        .unwrap_or(rest.len());
                    let word = &rest[..end];
                    add(word, &mut tokens, &mut id_of);
                    // Single characters of every word keep coverage total.
                    for (i, ch) in word.char_indices() {
                        add(&word[i..i + ch.len_utf8()], &mut tokens, &mut id_of);
                    }
                    rest = &rest[end..];
                } else {
                    let end = c.len_utf8();
                    add(&rest[..end], &mut tokens, &mut id_of);
                    rest = &rest[end..];
                }
            }
        }

        let max_unit_len = tokens.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(Vocab { tokens, id_of, pad_id: 0, mask_id: 1, delimiter_ids, max_unit_len, delimiter_mode: delim })
    }

    /// Greedy longest-match encoding. Delimiters match before any other rule;
    /// `[MASK]`/`[PAD]` never match text. The prompt/response boundary (a byte
    /// offset) must land on a token boundary.
    pub fn encode(&self, full_text: &str, prompt_len_bytes: usize) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        let mut roles = Vec::new();
        let mut i = 0usize;
        while i < full_text.len() {
            let rest = &full_text[i..];
            let mut matched: Option<(usize, usize)> = None; // (id, byte_len)
            if let Some(dids) = self.delimiter_ids {
                for (k, lit) in [DESIGN_START, DESIGN_END, LABEL_START, LABEL_END]
                    .iter()
                    .enumerate()
                {
                    if rest.starts_with(lit) {
                        matched = Some((dids[k], lit.len()));
                        break;
                    }
                }
            }
            if matched.is_none() {
                let cap = self.max_unit_len.min(rest.len());
                for len in (1..=cap).rev() {
                    let Some(prefix) = rest.get(..len) else { continue };
                    if let Some(&id) = self.id_of.get(prefix) {
                        if id == self.pad_id || id == self.mask_id {
                            continue;
                        }
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            let Some((id, len)) = matched else {
                let head: String = rest.chars().take(12).collect();
                return Err(Error::Encoding(format!("uncoverable text at byte {i}: {head:?}")));
            };
            if i < prompt_len_bytes && i + len > prompt_len_bytes {
                return Err(Error::Encoding(
                    "prompt/response boundary splits a token".into(),
                ));
            }
            ids.push(id);
            roles.push(if i < prompt_len_bytes { Role::Prompt } else { Role::Response });
            i += len;
        }
        Ok(TokenSeq::new(ids, roles))
    }

    /// Inverse of [`Vocab::encode`]; padding is skipped.
    pub fn decode(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for (&id, &role) in seq.ids.iter().zip(&seq.roles) {
            if role == Role::Pad {
                continue;
            }
            out.push_str(&self.tokens[id]);
        }
        out
    }

    /// Text of the response span only.
    pub fn decode_response(&self, seq: &TokenSeq) -> String {
        let range = seq.response_range();
        let mut out = String::new();
        for &id in &seq.ids[range] {
            out.push_str(&self.tokens[id]);
        }
        out
    }

    /// Persists as `id<TAB>token` lines with backslash escapes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(f, "{id}\t{}", escape(tok))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, delim: DelimiterMode) -> Result<Vocab> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let (id_str, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line {}: missing tab", lineno + 1)))?;
            let id: usize = id_str
                .parse()
                .map_err(|_| Error::Format(format!("vocab line {}: bad id", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!(
                    "vocab line {}: ids must be dense, expected {}",
                    lineno + 1,
                    tokens.len()
                )));
            }
            tokens.push(unescape(tok)?);
        }
        let id_of: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if id_of.len() != tokens.len() {
            return Err(Error::Format("duplicate token strings".into()));
        }
        let get = |lit: &str| -> Result<usize> {
            id_of
                .get(lit)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocab missing special {lit:?}")))
        };
        let pad_id = get(PAD_TOKEN)?;
        let mask_id = get(MASK_TOKEN)?;
        let delimiter_ids = match delim {
            DelimiterMode::Tokens => Some([
                get(DESIGN_START)?,
                get(DESIGN_END)?,
                get(LABEL_START)?,
                get(LABEL_END)?,
            ]),
            DelimiterMode::PlainText => None,
        };
        let max_unit_len = tokens.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(Vocab { tokens, id_of, pad_id, mask_id, delimiter_ids, max_unit_len, delimiter_mode: delim })
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(Error::Format(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

/// Deterministic text that exercises every unit the pipeline can render.
fn coverage_corpus(
    task: &TaskSpec,
    templates: &TemplateSet,
    delim: DelimiterMode,
) -> Result<Vec<String>> {
    let design_a = canonical_design(task, 0);
    let design_b = canonical_design(task, 1);
    let context = vec![(design_a.clone(), 123.456), (design_b.clone(), -987.654)];

    let mut corpus = Vec::new();
    for t in templates.train.iter().chain(&templates.val) {
        let p = text::render_prompt(t, task, &context, RenderMode::Sft, delim)?;
        corpus.push(p.text);
    }
    corpus.push(text::render_response(task, &design_a, delim)?);

    let k = OPTION_LETTERS.len().min(match task.kind {
        SpaceKind::Discrete => task.alphabet.len().max(2),
        SpaceKind::Continuous => OPTION_LETTERS.len(),
    });
    let options: Vec<Design> = (0..k).map(|i| canonical_design(task, i)).collect();
    corpus.push(text::render_probe_prompt(task, &options, delim)?);
    corpus.push(text::render_ranking(&(0..k).collect::<Vec<_>>()));

    let mut guarantee = String::from("0123456789+-.,[]' \n:>[MASK][PAD]");
    for &c in &task.alphabet {
        guarantee.push(c);
    }
    for c in OPTION_LETTERS {
        guarantee.push(c);
    }
    corpus.push(guarantee);
    Ok(corpus)
}

/// Longest prompt token length across all templates for an `n_few`-entry
/// context. Designs and labels render at fixed width, so every prompt of a
/// given template has this exact token length; shorter templates are
/// position-offset against it so that response tokens always occupy the same
/// positional-embedding rows.
pub fn prompt_alignment(
    vocab: &Vocab,
    task: &TaskSpec,
    templates: &TemplateSet,
    delim: DelimiterMode,
    n_few: usize,
) -> Result<usize> {
    let context: Vec<(Design, f64)> =
        (0..n_few).map(|i| (canonical_design(task, i), 0.0)).collect();
    let mut max_len = 0;
    for t in templates.train.iter().chain(&templates.val) {
        let p = text::render_prompt(t, task, &context, RenderMode::Inference, delim)?;
        max_len = max_len.max(vocab.encode(&p.text, p.text.len())?.len());
    }
    Ok(max_len)
}

fn canonical_design(task: &TaskSpec, variant: usize) -> Design {
    match task.kind {
        SpaceKind::Discrete => {
            let a = task.alphabet.len();
            Design::Discrete((0..task.length).map(|i| (i + variant) % a).collect())
        }
        SpaceKind::Continuous => Design::Continuous(
            task.bounds
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| {
                    let frac = ((i + variant) % 5) as f64 / 4.0;
                    let v = lo + frac * (hi - lo);
                    ((v * 1000.0).round() / 1000.0).clamp(lo, hi)
                })
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TaskSpec, TemplateSet, Vocab) {
        let task = TaskSpec::desk_discrete(1);
        let templates = TemplateSet::builtin();
        let vocab = Vocab::build(&task, &templates, DelimiterMode::Tokens).unwrap();
        (task, templates, vocab)
    }

    #[test]
    fn delimiters_are_single_ids() {
        let (_, _, vocab) = setup();
        for lit in [DESIGN_START, DESIGN_END, LABEL_START, LABEL_END, MASK_TOKEN, PAD_TOKEN] {
            assert!(vocab.id(lit).is_some(), "{lit} missing");
        }
        let seq = vocab.encode(DESIGN_START, DESIGN_START.len()).unwrap();
        assert_eq!(seq.ids.len(), 1);
        assert_eq!(seq.ids[0], vocab.delimiter_ids.unwrap()[0]);
    }

    #[test]
    fn build_is_deterministic() {
        let (task, templates, vocab) = setup();
        let again = Vocab::build(&task, &templates, DelimiterMode::Tokens).unwrap();
        assert_eq!(vocab, again);
    }

    #[test]
    fn corpus_fully_covered_and_roundtrips() {
        let (task, templates, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let template = &templates.train[trial % templates.train.len()];
            let context: Vec<(Design, f64)> = (0..3)
                .map(|_| {
                    let d = Design::Discrete((0..8).map(|_| rng.random_range(0..4)).collect());
                    (d, rng.random_range(-999.0..999.0))
                })
                .collect();
            let target = Design::Discrete((0..8).map(|_| rng.random_range(0..4)).collect());
            let ex = text::render_example(
                template,
                &task,
                &context,
                &target,
                RenderMode::Sft,
                DelimiterMode::Tokens,
            )
            .unwrap();
            let full = ex.full_text();
            let seq = vocab.encode(&full, ex.prompt_text.len()).unwrap();
            seq.validate_layout().unwrap();
            assert_eq!(vocab.decode(&seq), full);
            assert_eq!(vocab.decode_response(&seq), ex.response_text);
            assert!(!seq.ids.contains(&vocab.mask_id));
        }
    }

    #[test]
    fn label_segmentation_fixture() {
        let (_, _, vocab) = setup();
        let seq = vocab.encode("+000.018", 8).unwrap();
        let pieces: Vec<&str> = seq.ids.iter().map(|&id| vocab.token(id)).collect();
        assert_eq!(pieces, vec!["+", "0", "0", "0", ".", "0", "1", "8"]);
    }

    #[test]
    fn empty_response_region() {
        let (_, _, vocab) = setup();
        let text = "Response:\n";
        let seq = vocab.encode(text, text.len()).unwrap();
        assert_eq!(seq.response_range().len(), 0);
        assert_eq!(seq.prompt_len(), seq.len());
    }

    #[test]
    fn mask_literal_in_text_does_not_produce_mask_id() {
        let (_, _, vocab) = setup();
        let seq = vocab.encode("[MASK]", 0).unwrap();
        assert!(!seq.ids.contains(&vocab.mask_id));
        assert_eq!(vocab.decode(&seq), "[MASK]");
    }

    #[test]
    fn boundary_must_align() {
        let (_, _, vocab) = setup();
        // "Response" is a single word unit; splitting it is an error.
        let err = vocab.encode("Response:", 4).unwrap_err();
        assert!(matches!(err, Error::Encoding(_)));
    }

    #[test]
    fn unknown_char_is_encoding_error() {
        let (_, _, vocab) = setup();
        let err = vocab.encode("héllo", 0).unwrap_err();
        assert!(matches!(err, Error::Encoding(_)));
    }

    #[test]
    fn save_load_bit_exact() {
        let (_, _, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path, DelimiterMode::Tokens).unwrap();
        assert_eq!(vocab, loaded);
        loaded.save(dir.path().join("again.tsv").as_path()).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("again.tsv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_mode_drops_delimiter_specials() {
        let task = TaskSpec::desk_discrete(1);
        let templates = TemplateSet::builtin();
        let vocab = Vocab::build(&task, &templates, DelimiterMode::PlainText).unwrap();
        assert!(vocab.delimiter_ids.is_none());
        assert!(vocab.id(DESIGN_START).is_none());
        assert!(vocab.id("Designs").is_some());
        // Plain examples still roundtrip.
        let context = vec![(Design::Discrete(vec![0; 8]), 0.5)];
        let ex = text::render_example(
            &templates.train[0],
            &task,
            &context,
            &Design::Discrete(vec![1; 8]),
            RenderMode::Sft,
            DelimiterMode::PlainText,
        )
        .unwrap();
        let full = ex.full_text();
        let seq = vocab.encode(&full, ex.prompt_text.len()).unwrap();
        assert_eq!(vocab.decode(&seq), full);
    }

    #[test]
    fn padding_layout() {
        let (_, _, vocab) = setup();
        let text = "Response:\n+000.018";
        let seq = vocab.encode(text, 10).unwrap();
        let padded = seq.padded_to(seq.len() + 4, vocab.pad_id);
        padded.validate_layout().unwrap();
        assert_eq!(padded.response_range(), seq.response_range());
        assert_eq!(vocab.decode(&padded), text);
    }
}
