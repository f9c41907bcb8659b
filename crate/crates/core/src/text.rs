//! Prompt and response rendering, and parsing of generated responses.
//!
//! All text is assembled deterministically: fixed-width labels, fixed design
//! formats, single-newline separation. Rendering is the single source of
//! truth for continuous values — they are quantized to three decimals here
//! and scored in that form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{Design, SpaceKind, TaskSpec};

pub const DESIGN_START: &str = "|design-start|";
pub const DESIGN_END: &str = "|design-end|";
pub const LABEL_START: &str = "|label-start|";
pub const LABEL_END: &str = "|label-end|";
pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const RESPONSE_CUE: &str = "Response:";

/// Plain-text field markers used when delimiter tokens are disabled.
pub const PLAIN_DESIGN_MARKER: &str = "Designs:";
pub const PLAIN_LABEL_MARKER: &str = "Labels:";

/// Option letters for ranking-probe prompts (K <= 5).
pub const OPTION_LETTERS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelimiterMode {
    /// Field boundaries marked by the four single-token delimiters.
    Tokens,
    /// Field boundaries marked by ordinary words.
    PlainText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    Sft,
    Rl,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    ContextDesign,
    ContextLabel,
    ResponseDesign,
}

/// Byte range into the concatenated prompt + response text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

/// One instruction template with `{task_description}`, `{examples_block}`,
/// and `{ask_block}` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
}

const PLACEHOLDERS: [&str; 3] = ["{task_description}", "{examples_block}", "{ask_block}"];

impl Template {
    pub fn new(text: impl Into<String>) -> Result<Template> {
        let text = text.into();
        for ph in PLACEHOLDERS {
            match text.matches(ph).count() {
                1 => {}
                0 => return Err(Error::Template(format!("missing slot {ph}"))),
                n => return Err(Error::Template(format!("slot {ph} appears {n} times"))),
            }
        }
        if !text.contains(RESPONSE_CUE) {
            return Err(Error::Template(format!("missing {RESPONSE_CUE:?} cue")));
        }
        Ok(Template { text })
    }
}

/// Training templates plus held-out validation templates.
#[derive(Clone, Debug)]
pub struct TemplateSet {
    pub train: Vec<Template>,
    pub val: Vec<Template>,
}

impl TemplateSet {
    /// The built-in desk set: 4 training templates, 1 held out.
    pub fn builtin() -> TemplateSet {
        let train = [
            "You are an optimization assistant. Your job is to produce {task_description}.\n\n\
             Here are some known designs together with their measured scores:\n\n\
             {examples_block}\n\n{ask_block}\n\nResponse:\n",
            "The goal is to find {task_description}.\n\n\
             Scored reference designs:\n\n\
             {examples_block}\n\n{ask_block}\n\nResponse:\n",
            "Optimization task: search for {task_description}.\n\n\
             The labeled data below lists designs next to their scores:\n\n\
             {examples_block}\n\n{ask_block}\n\nResponse:\n",
            "You are assisting with an automated design search. We want {task_description}.\n\n\
             Observed designs and scores so far:\n\n\
             {examples_block}\n\n{ask_block}\n\nResponse:\n",
        ];
        let val = [
            "Below is a reference set of scored designs. We are looking for {task_description}.\n\n\
             {examples_block}\n\n{ask_block}\n\nResponse:\n",
        ];
        TemplateSet {
            train: train.iter().map(|t| Template::new(*t).unwrap()).collect(),
            val: val.iter().map(|t| Template::new(*t).unwrap()).collect(),
        }
    }

    /// Loads templates from a directory: `train_*.txt` and `val_*.txt`,
    /// one template per file, sorted by filename.
    pub fn load_dir(dir: &std::path::Path) -> Result<TemplateSet> {
        let mut train_files = Vec::new();
        let mut val_files = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = match path.file_name().and_then(|n| n.to_str()) {
                Some(n) => n.to_string(),
                None => continue,
            };
            if name.starts_with("train_") && name.ends_with(".txt") {
                train_files.push(path);
            } else if name.starts_with("val_") && name.ends_with(".txt") {
                val_files.push(path);
            }
        }
        train_files.sort();
        val_files.sort();
        let read = |paths: Vec<std::path::PathBuf>| -> Result<Vec<Template>> {
            paths
                .into_iter()
                .map(|p| Template::new(std::fs::read_to_string(p)?))
                .collect()
        };
        let set = TemplateSet { train: read(train_files)?, val: read(val_files)? };
        if set.train.is_empty() {
            return Err(Error::Template(format!("no train_*.txt templates in {dir:?}")));
        }
        for t in &set.train {
            if set.val.contains(t) {
                return Err(Error::Template("train and val templates overlap".into()));
            }
        }
        Ok(set)
    }

    /// Writes the set into a directory in the `load_dir` layout.
    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, t) in self.train.iter().enumerate() {
            std::fs::write(dir.join(format!("train_{i}.txt")), &t.text)?;
        }
        for (i, t) in self.val.iter().enumerate() {
            std::fs::write(dir.join(format!("val_{i}.txt")), &t.text)?;
        }
        Ok(())
    }
}

/// Fixed-width signed label: sign, three integer digits, dot, three decimals.
/// Rounds half away from zero.
pub fn render_label(y: f64) -> Result<String> {
    if !y.is_finite() || y.abs() >= 1000.0 {
        return Err(Error::Range(format!("label {y} not renderable as +ddd.ddd")));
    }
    let milli = (y.abs() * 1000.0).round() as i64;
    if milli >= 1_000_000 {
        return Err(Error::Range(format!("label {y} rounds past +999.999")));
    }
    let sign = if y < 0.0 && milli > 0 { '-' } else { '+' };
    Ok(format!("{sign}{:03}.{:03}", milli / 1000, milli % 1000))
}

/// Parses a label previously produced by [`render_label`].
pub fn parse_label(s: &str) -> Option<f64> {
    let s = s.trim();
    let (sign, rest) = match s.as_bytes().first()? {
        b'+' => (1.0, &s[1..]),
        b'-' => (-1.0, &s[1..]),
        _ => (1.0, s),
    };
    let v: f64 = rest.parse().ok()?;
    Some(sign * v)
}

/// Bracketed design rendering: quoted symbols for discrete designs, signed
/// three-decimal values for continuous ones.
pub fn render_design(task: &TaskSpec, design: &Design) -> Result<String> {
    design.validate(task)?;
    match design {
        Design::Discrete(symbols) => {
            let items: Vec<String> = symbols
                .iter()
                .map(|&s| format!("'{}'", task.alphabet[s]))
                .collect();
            Ok(format!("[{}]", items.join(",")))
        }
        Design::Continuous(values) => {
            let items: Vec<String> = values
                .iter()
                .map(|&v| render_label(v))
                .collect::<Result<_>>()?;
            Ok(format!("[{}]", items.join(", ")))
        }
    }
}

/// Noun phrase describing what the model is asked to produce.
pub fn task_description(task: &TaskSpec) -> String {
    match task.kind {
        SpaceKind::Discrete => {
            let symbols: Vec<String> = task.alphabet.iter().map(|c| c.to_string()).collect();
            format!(
                "a length-{} sequence over the symbols {} that achieves the highest possible score",
                task.length,
                symbols.join(", ")
            )
        }
        SpaceKind::Continuous => format!(
            "a {}-dimensional parameter vector, each value within its allowed range, \
             that achieves the highest possible score",
            task.length
        ),
    }
}

/// Closing instruction placed after the examples.
pub fn ask_block(task: &TaskSpec) -> String {
    let mut ask = String::from(
        "Propose one new design that is different from every design above and achieves a higher score.",
    );
    if task.kind == SpaceKind::Continuous {
        ask.push_str(" Write each value as a signed number with exactly three decimal places.");
    }
    ask
}

fn design_line(task: &TaskSpec, design: &Design, mode: DelimiterMode) -> Result<(String, Span)> {
    let payload = render_design(task, design)?;
    let (line, start) = match mode {
        DelimiterMode::Tokens => (
            format!("{DESIGN_START}{payload}{DESIGN_END}"),
            DESIGN_START.len(),
        ),
        DelimiterMode::PlainText => (
            format!("{PLAIN_DESIGN_MARKER} {payload}"),
            PLAIN_DESIGN_MARKER.len() + 1,
        ),
    };
    let span = Span { kind: SpanKind::ContextDesign, start, end: start + payload.len() };
    Ok((line, span))
}

fn label_line(y: f64, mode: DelimiterMode) -> Result<(String, Span)> {
    let payload = render_label(y)?;
    let (line, start) = match mode {
        DelimiterMode::Tokens => (
            format!("{LABEL_START}{payload}{LABEL_END}"),
            LABEL_START.len(),
        ),
        DelimiterMode::PlainText => (
            format!("{PLAIN_LABEL_MARKER} {payload}"),
            PLAIN_LABEL_MARKER.len() + 1,
        ),
    };
    let span = Span { kind: SpanKind::ContextLabel, start, end: start + payload.len() };
    Ok((line, span))
}

/// A rendered prompt with byte spans for each embedded field.
#[derive(Clone, Debug)]
pub struct RenderedPrompt {
    pub text: String,
    pub spans: Vec<Span>,
}

/// Renders the instruction, the design/label example lines, the ask block,
/// and the response cue. Deterministic: same inputs give identical bytes.
pub fn render_prompt(
    template: &Template,
    task: &TaskSpec,
    context: &[(Design, f64)],
    _mode: RenderMode,
    delim: DelimiterMode,
) -> Result<RenderedPrompt> {
    if context.is_empty() {
        return Err(Error::Shape("prompt context must be non-empty".into()));
    }
    // Examples block with spans local to the block.
    let mut block = String::new();
    let mut spans = Vec::new();
    for (i, (design, y)) in context.iter().enumerate() {
        if i > 0 {
            block.push('\n');
        }
        let (dline, dspan) = design_line(task, design, delim)?;
        spans.push(Span { start: dspan.start + block.len(), end: dspan.end + block.len(), ..dspan });
        block.push_str(&dline);
        block.push('\n');
        let (lline, lspan) = label_line(*y, delim)?;
        spans.push(Span { start: lspan.start + block.len(), end: lspan.end + block.len(), ..lspan });
        block.push_str(&lline);
    }

    let desc = task_description(task);
    let ask = ask_block(task);
    let mut text = String::with_capacity(template.text.len() + block.len() + desc.len() + ask.len());
    let mut rest = template.text.as_str();
    loop {
        // Next placeholder in the remaining template text.
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|ph| rest.find(ph).map(|pos| (pos, *ph)))
            .min();
        match next {
            Some((pos, ph)) => {
                text.push_str(&rest[..pos]);
                if ph == "{examples_block}" {
                    let base = text.len();
                    for s in &mut spans {
                        s.start += base;
                        s.end += base;
                    }
                    text.push_str(&block);
                } else if ph == "{task_description}" {
                    text.push_str(&desc);
                } else {
                    text.push_str(&ask);
                }
                rest = &rest[pos + ph.len()..];
            }
            None => {
                text.push_str(rest);
                break;
            }
        }
    }
    Ok(RenderedPrompt { text, spans })
}

/// The response line for a target design.
pub fn render_response(task: &TaskSpec, design: &Design, delim: DelimiterMode) -> Result<String> {
    let (line, _) = design_line(task, design, delim)?;
    Ok(line)
}

/// A full prompt + response pair with byte spans over the concatenation.
#[derive(Clone, Debug)]
pub struct RenderedExample {
    pub prompt_text: String,
    pub response_text: String,
    pub spans: Vec<Span>,
}

impl RenderedExample {
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.prompt_text.len() + self.response_text.len());
        s.push_str(&self.prompt_text);
        s.push_str(&self.response_text);
        s
    }
}

pub fn render_example(
    template: &Template,
    task: &TaskSpec,
    context: &[(Design, f64)],
    target: &Design,
    mode: RenderMode,
    delim: DelimiterMode,
) -> Result<RenderedExample> {
    let prompt = render_prompt(template, task, context, mode, delim)?;
    let (response_text, rspan) = design_line(task, target, delim)?;
    let mut spans = prompt.spans;
    spans.push(Span {
        kind: SpanKind::ResponseDesign,
        start: prompt.text.len() + rspan.start,
        end: prompt.text.len() + rspan.end,
    });
    Ok(RenderedExample { prompt_text: prompt.text, response_text, spans })
}

/// Why a generated response could not be read back as a design.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseFailure {
    MissingMarkers,
    WrongArity { expected: usize, got: usize },
    UnknownSymbol(String),
    BadNumber(String),
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseFailure::MissingMarkers => write!(f, "missing or garbled field markers"),
            ParseFailure::WrongArity { expected, got } => {
                write!(f, "expected {expected} items, got {got}")
            }
            ParseFailure::UnknownSymbol(s) => write!(f, "unknown symbol {s:?}"),
            ParseFailure::BadNumber(s) => write!(f, "unparseable value {s:?}"),
        }
    }
}

/// A parsed design plus whether any continuous value had to be clipped into
/// bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedDesign {
    pub design: Design,
    pub clipped: bool,
}

/// Extracts the first rendered design from a response and converts it back.
/// Continuous values are quantized to three decimals and clipped into bounds.
pub fn parse_design(
    task: &TaskSpec,
    response_text: &str,
    delim: DelimiterMode,
) -> std::result::Result<ParsedDesign, ParseFailure> {
    let region = match delim {
        DelimiterMode::Tokens => {
            let start = response_text.find(DESIGN_START).ok_or(ParseFailure::MissingMarkers)?;
            let after = &response_text[start + DESIGN_START.len()..];
            let end = after.find(DESIGN_END).ok_or(ParseFailure::MissingMarkers)?;
            &after[..end]
        }
        DelimiterMode::PlainText => {
            let start = response_text
                .find(PLAIN_DESIGN_MARKER)
                .ok_or(ParseFailure::MissingMarkers)?;
            &response_text[start + PLAIN_DESIGN_MARKER.len()..]
        }
    };
    let open = region.find('[').ok_or(ParseFailure::MissingMarkers)?;
    let close = region[open..].find(']').ok_or(ParseFailure::MissingMarkers)? + open;
    let payload = &region[open + 1..close];
    let items: Vec<&str> = if payload.trim().is_empty() {
        Vec::new()
    } else {
        payload.split(',').map(|s| s.trim()).collect()
    };
    if items.len() != task.length {
        return Err(ParseFailure::WrongArity { expected: task.length, got: items.len() });
    }
    match task.kind {
        SpaceKind::Discrete => {
            let mut symbols = Vec::with_capacity(task.length);
            for item in items {
                let inner = item
                    .strip_prefix('\'')
                    .and_then(|s| s.strip_suffix('\''))
                    .ok_or_else(|| ParseFailure::UnknownSymbol(item.to_string()))?;
                let mut chars = inner.chars();
                let (c, tail) = (chars.next(), chars.next());
                let c = match (c, tail) {
                    (Some(c), None) => c,
                    _ => return Err(ParseFailure::UnknownSymbol(item.to_string())),
                };
                let idx = task
                    .symbol_index(c)
                    .ok_or_else(|| ParseFailure::UnknownSymbol(item.to_string()))?;
                symbols.push(idx);
            }
            Ok(ParsedDesign { design: Design::Discrete(symbols), clipped: false })
        }
        SpaceKind::Continuous => {
            let mut values = Vec::with_capacity(task.length);
            let mut clipped = false;
            for (k, item) in items.iter().enumerate() {
                let v: f64 = item
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| ParseFailure::BadNumber(item.to_string()))?;
                let v = (v * 1000.0).round() / 1000.0;
                let (lo, hi) = task.bounds[k];
                let c = v.clamp(lo, hi);
                if c != v {
                    clipped = true;
                }
                values.push(c);
            }
            Ok(ParsedDesign { design: Design::Continuous(values), clipped })
        }
    }
}

/// Ranking-probe prompt: lettered design options, no labels, an answer cue.
pub fn render_probe_prompt(
    task: &TaskSpec,
    options: &[Design],
    delim: DelimiterMode,
) -> Result<String> {
    if options.is_empty() || options.len() > OPTION_LETTERS.len() {
        return Err(Error::Shape(format!(
            "probe takes 1..={} options, got {}",
            OPTION_LETTERS.len(),
            options.len()
        )));
    }
    let mut text = format!(
        "You are given {} candidate designs.\n\
         Order them from the highest score to the lowest score.\n\
         Reply with a ranking of the option letters only.\n\n",
        options.len()
    );
    for (i, design) in options.iter().enumerate() {
        let (line, _) = design_line(task, design, delim)?;
        text.push_str(&format!("{}: {}\n", OPTION_LETTERS[i], line));
    }
    text.push_str("\nAnswer:\n");
    Ok(text)
}

/// Ranking answer string for a permutation of option indices, e.g. "B > A > C".
pub fn render_ranking(order: &[usize]) -> String {
    let letters: Vec<String> = order.iter().map(|&i| OPTION_LETTERS[i].to_string()).collect();
    letters.join(" > ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> TaskSpec {
        TaskSpec::desk_discrete(1)
    }

    #[test]
    fn label_fixed_width() {
        assert_eq!(render_label(0.018).unwrap(), "+000.018");
        assert_eq!(render_label(-1.86).unwrap(), "-001.860");
        assert_eq!(render_label(0.0).unwrap(), "+000.000");
        assert_eq!(render_label(999.999).unwrap(), "+999.999");
        assert!(matches!(render_label(1000.0), Err(Error::Range(_))));
        assert!(matches!(render_label(-12345.0), Err(Error::Range(_))));
    }

    #[test]
    fn label_rounds_half_away_from_zero() {
        assert_eq!(render_label(0.0005).unwrap(), "+000.001");
        assert_eq!(render_label(-0.0005).unwrap(), "-000.001");
        assert_eq!(render_label(0.0004).unwrap(), "+000.000");
        assert_eq!(render_label(-0.0004).unwrap(), "+000.000");
    }

    #[test]
    fn design_formats() {
        let task = TaskSpec::discrete(vec!['A', 'C'], 2, "pwm", 0).unwrap();
        let d = Design::Discrete(vec![0, 1]);
        assert_eq!(render_design(&task, &d).unwrap(), "['A','C']");

        let ctask = TaskSpec::continuous(vec![(-2.0, 2.0); 2], "quadratic", 0).unwrap();
        let c = Design::Continuous(vec![1.0, -1.5]);
        assert_eq!(render_design(&ctask, &c).unwrap(), "[+001.000, -001.500]");
    }

    #[test]
    fn discrete_roundtrip_exact() {
        let task = desk();
        let d = Design::Discrete(vec![0, 1, 2, 3, 3, 2, 1, 0]);
        let line = render_response(&task, &d, DelimiterMode::Tokens).unwrap();
        let parsed = parse_design(&task, &line, DelimiterMode::Tokens).unwrap();
        assert_eq!(parsed.design, d);
        assert!(!parsed.clipped);
    }

    #[test]
    fn paper_style_response_parses() {
        let task = desk();
        let text = "|design-start|['A','C','G','T','A','C','G','T']|design-end|";
        let parsed = parse_design(&task, text, DelimiterMode::Tokens).unwrap();
        assert_eq!(parsed.design, Design::Discrete(vec![0, 1, 2, 3, 0, 1, 2, 3]));
    }

    #[test]
    fn wrong_arity_rejected() {
        let task = desk();
        let text = "|design-start|['A','C','G','T','A','C','G']|design-end|";
        assert_eq!(
            parse_design(&task, text, DelimiterMode::Tokens).unwrap_err(),
            ParseFailure::WrongArity { expected: 8, got: 7 }
        );
    }

    #[test]
    fn garbled_markers_rejected() {
        let task = desk();
        for text in [
            "['A','C','G','T','A','C','G','T']",
            "|design-start|['A','C','G','T','A','C','G','T']",
            "|design-start|'A','C'|design-end|",
        ] {
            assert_eq!(
                parse_design(&task, text, DelimiterMode::Tokens).unwrap_err(),
                ParseFailure::MissingMarkers,
                "{text}"
            );
        }
    }

    #[test]
    fn continuous_out_of_bounds_clipped() {
        let task = TaskSpec::continuous(vec![(-1.0, 1.0); 2], "quadratic", 0).unwrap();
        let text = "|design-start|[+002.000, -000.250]|design-end|";
        let parsed = parse_design(&task, text, DelimiterMode::Tokens).unwrap();
        assert!(parsed.clipped);
        assert_eq!(parsed.design, Design::Continuous(vec![1.0, -0.25]));
    }

    #[test]
    fn prompt_structure() {
        let task = desk();
        let set = TemplateSet::builtin();
        let context = vec![
            (Design::Discrete(vec![0, 1, 2, 3, 0, 1, 2, 3]), 0.018),
            (Design::Discrete(vec![3, 1, 2, 1, 3, 0, 2, 2]), 0.027),
        ];
        let p = render_prompt(&set.train[0], &task, &context, RenderMode::Sft, DelimiterMode::Tokens)
            .unwrap();
        assert_eq!(p.text.matches(LABEL_START).count(), 2);
        assert_eq!(p.text.matches(DESIGN_START).count(), 2);
        // Skeleton order: instruction, pairs, ask, response cue.
        let first_design = p.text.find(DESIGN_START).unwrap();
        let ask_pos = p.text.find("Propose one new design").unwrap();
        let cue = p.text.rfind(RESPONSE_CUE).unwrap();
        assert!(first_design < ask_pos && ask_pos < cue);
        assert!(p.text.ends_with("Response:\n"));
        // Determinism.
        let q = render_prompt(&set.train[0], &task, &context, RenderMode::Sft, DelimiterMode::Tokens)
            .unwrap();
        assert_eq!(p.text, q.text);
        // Spans point at the payloads.
        for s in &p.spans {
            let payload = &p.text[s.start..s.end];
            match s.kind {
                SpanKind::ContextDesign => assert!(payload.starts_with('[')),
                SpanKind::ContextLabel => assert!(payload.starts_with('+')),
                SpanKind::ResponseDesign => unreachable!(),
            }
        }
    }

    #[test]
    fn prompt_label_count_matches_context_len() {
        let task = desk();
        let set = TemplateSet::builtin();
        for n in 1..6 {
            let context: Vec<(Design, f64)> = (0..n)
                .map(|i| (Design::Discrete(vec![i % 4; 8]), i as f64 * 0.1))
                .collect();
            for t in set.train.iter().chain(&set.val) {
                let p = render_prompt(t, &task, &context, RenderMode::Sft, DelimiterMode::Tokens)
                    .unwrap();
                assert_eq!(p.text.matches(LABEL_START).count(), n);
            }
        }
    }

    #[test]
    fn templates_produce_identical_structure() {
        // Paraphrase invariance: span counts and response format agree across
        // all templates.
        let task = desk();
        let set = TemplateSet::builtin();
        let context = vec![(Design::Discrete(vec![0; 8]), 0.1), (Design::Discrete(vec![1; 8]), 0.2)];
        let target = Design::Discrete(vec![2; 8]);
        let mut shapes = Vec::new();
        for t in set.train.iter().chain(&set.val) {
            let ex =
                render_example(t, &task, &context, &target, RenderMode::Sft, DelimiterMode::Tokens)
                    .unwrap();
            shapes.push((ex.spans.len(), ex.response_text.clone()));
        }
        for w in shapes.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn spans_non_overlapping_and_in_bounds() {
        let task = desk();
        let set = TemplateSet::builtin();
        let context = vec![(Design::Discrete(vec![0; 8]), 0.1), (Design::Discrete(vec![1; 8]), 0.2)];
        let target = Design::Discrete(vec![2; 8]);
        let ex = render_example(&set.train[1], &task, &context, &target, RenderMode::Sft, DelimiterMode::Tokens)
            .unwrap();
        let full = ex.full_text();
        let mut sorted = ex.spans.clone();
        sorted.sort_by_key(|s| s.start);
        for w in sorted.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert!(sorted.last().unwrap().end <= full.len());
        // Response span carries the rendered target.
        let rspan = ex.spans.iter().find(|s| s.kind == SpanKind::ResponseDesign).unwrap();
        assert_eq!(&full[rspan.start..rspan.end], &render_design(&task, &target).unwrap());
    }

    #[test]
    fn plain_text_mode_renders_and_parses() {
        let task = desk();
        let set = TemplateSet::builtin();
        let context = vec![(Design::Discrete(vec![0; 8]), 0.1)];
        let p = render_prompt(&set.train[0], &task, &context, RenderMode::Sft, DelimiterMode::PlainText)
            .unwrap();
        assert!(p.text.contains(PLAIN_DESIGN_MARKER));
        assert!(p.text.contains(PLAIN_LABEL_MARKER));
        assert!(!p.text.contains(DESIGN_START));
        let d = Design::Discrete(vec![3, 2, 1, 0, 0, 1, 2, 3]);
        let line = render_response(&task, &d, DelimiterMode::PlainText).unwrap();
        let parsed = parse_design(&task, &line, DelimiterMode::PlainText).unwrap();
        assert_eq!(parsed.design, d);
    }

    #[test]
    fn missing_slot_is_template_error() {
        let err = Template::new("no slots here. Response:\n").unwrap_err();
        assert!(matches!(err, Error::Template(_)));
        let err = Template::new("{task_description}{examples_block}{ask_block}").unwrap_err();
        assert!(matches!(err, Error::Template(_)));
    }

    #[test]
    fn probe_prompt_layout() {
        let task = desk();
        let options = vec![
            Design::Discrete(vec![0; 8]),
            Design::Discrete(vec![1; 8]),
            Design::Discrete(vec![2; 8]),
        ];
        let p = render_probe_prompt(&task, &options, DelimiterMode::Tokens).unwrap();
        assert!(p.contains("A: |design-start|"));
        assert!(p.contains("B: |design-start|"));
        assert!(p.contains("C: |design-start|"));
        assert!(!p.contains(LABEL_START));
        assert!(p.ends_with("Answer:\n"));
        assert_eq!(render_ranking(&[1, 0, 2]), "B > A > C");
    }

    proptest! {
        #[test]
        fn prop_discrete_roundtrip(symbols in proptest::collection::vec(0usize..4, 8)) {
            let task = desk();
            let d = Design::Discrete(symbols);
            let line = render_response(&task, &d, DelimiterMode::Tokens).unwrap();
            let parsed = parse_design(&task, &line, DelimiterMode::Tokens).unwrap();
            prop_assert_eq!(parsed.design, d);
        }

        #[test]
        fn prop_continuous_roundtrip_after_quantization(
            values in proptest::collection::vec(-1.0f64..1.0, 4)
        ) {
            let task = TaskSpec::continuous(vec![(-1.0, 1.0); 4], "quadratic", 0).unwrap();
            let d = Design::Continuous(values.clone());
            let line = render_response(&task, &d, DelimiterMode::Tokens).unwrap();
            let parsed = parse_design(&task, &line, DelimiterMode::Tokens).unwrap();
            let Design::Continuous(got) = parsed.design else { panic!() };
            for (g, v) in got.iter().zip(&values) {
                let q = (v * 1000.0).round() / 1000.0;
                prop_assert_eq!(*g, q.clamp(-1.0, 1.0));
            }
            // Idempotent: re-render and re-parse is exact.
            let d2 = Design::Continuous(got.clone());
            let line2 = render_response(&task, &d2, DelimiterMode::Tokens).unwrap();
            let parsed2 = parse_design(&task, &line2, DelimiterMode::Tokens).unwrap();
            prop_assert_eq!(parsed2.design, d2);
        }

        #[test]
        fn prop_label_roundtrip(y in -999.0f64..999.0) {
            let s = render_label(y).unwrap();
            prop_assert_eq!(s.len(), 8);
            let back = parse_label(&s).unwrap();
            prop_assert!((back - y).abs() <= 0.0005 + 1e-12);
        }
    }
}
