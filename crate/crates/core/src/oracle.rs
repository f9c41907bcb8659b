//! Desk-scale ground-truth objectives.
//!
//! Two built-in task families stand in for lab-measured objectives while
//! staying exactly enumerable (discrete) or analytically bounded (continuous):
//!
//! - `"pwm"`: a seeded position-weight matrix plus a pairwise coupling table
//!   over a small symbol alphabet. Couplings act on centered per-symbol codes,
//!   which makes the landscape multi-modal rather than position-separable.
//! - `"quadratic"`: negative squared distance to a seeded target center inside
//!   a bounded box.
//!
//! A third kind loads a lookup table from a CSV covering the full discrete
//! space, for users who have real measurements.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Default cap on full-space enumeration: 2^20 designs.
pub const ENUMERATION_CAP: u64 = 1 << 20;

/// Scale of the per-position weight table of the `"pwm"` oracle.
pub const PWM_WEIGHT_SCALE: f64 = 0.3;
/// Mean of the pairwise coupling entries of the `"pwm"` oracle.
pub const PWM_COUPLING_MEAN: f64 = 0.25;
/// Spread of the pairwise coupling entries of the `"pwm"` oracle.
pub const PWM_COUPLING_STD: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Discrete,
    Continuous,
}

/// Static description of a design space plus the oracle it is scored by.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: SpaceKind,
    /// Ordered symbol list; single characters. Empty for continuous tasks.
    pub alphabet: Vec<char>,
    /// Sequence length (discrete) or dimension (continuous).
    pub length: usize,
    /// Per-dimension closed bounds. Empty for discrete tasks.
    pub bounds: Vec<(f64, f64)>,
    pub oracle_id: String,
    pub seed: u64,
}

impl TaskSpec {
    pub fn discrete(
        alphabet: Vec<char>,
        length: usize,
        oracle_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::Shape("alphabet must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &alphabet {
            if !seen.insert(c) {
                return Err(Error::Shape(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        if length == 0 {
            return Err(Error::Shape("length must be >= 1".into()));
        }
        Ok(TaskSpec {
            kind: SpaceKind::Discrete,
            alphabet,
            length,
            bounds: Vec::new(),
            oracle_id: oracle_id.into(),
            seed,
        })
    }

    pub fn continuous(
        bounds: Vec<(f64, f64)>,
        oracle_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Shape("bounds must be non-empty".into()));
        }
        for &(lo, hi) in &bounds {
            if !(lo < hi) {
                return Err(Error::Shape(format!("bounds must satisfy lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(TaskSpec {
            kind: SpaceKind::Continuous,
            alphabet: Vec::new(),
            length: bounds.len(),
            bounds,
            oracle_id: oracle_id.into(),
            seed,
        })
    }

    /// The default desk task: length-8 sequences over A,C,G,T.
    pub fn desk_discrete(seed: u64) -> Self {
        TaskSpec::discrete(vec!['A', 'C', 'G', 'T'], 8, "pwm", seed).unwrap()
    }

    /// The default continuous desk task: [-1,1]^8 quadratic bowl.
    pub fn desk_continuous(seed: u64) -> Self {
        TaskSpec::continuous(vec![(-1.0, 1.0); 8], "quadratic", seed).unwrap()
    }

    /// Number of designs in a discrete space, if it fits in u64.
    pub fn space_size(&self) -> Option<u64> {
        match self.kind {
            SpaceKind::Discrete => {
                let a = self.alphabet.len() as u64;
                let mut n: u64 = 1;
                for _ in 0..self.length {
                    n = n.checked_mul(a)?;
                }
                Some(n)
            }
            SpaceKind::Continuous => None,
        }
    }

    pub fn symbol_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&s| s == c)
    }
}

/// One candidate point in a task's design space.
#[derive(Clone, Debug, PartialEq)]
pub enum Design {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

/// Hashable identity of a design; continuous values are keyed on their
/// three-decimal rendered grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DesignKey {
    Discrete(Vec<usize>),
    Continuous(Vec<i64>),
}

impl Design {
    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        match (self, task.kind) {
            (Design::Discrete(symbols), SpaceKind::Discrete) => {
                if symbols.len() != task.length {
                    return Err(Error::Shape(format!(
                        "design has {} symbols, task length is {}",
                        symbols.len(),
                        task.length
                    )));
                }
                for &s in symbols {
                    if s >= task.alphabet.len() {
                        return Err(Error::Shape(format!(
                            "symbol index {s} out of alphabet range {}",
                            task.alphabet.len()
                        )));
                    }
                }
                Ok(())
            }
            (Design::Continuous(values), SpaceKind::Continuous) => {
                if values.len() != task.length {
                    return Err(Error::Shape(format!(
                        "design has {} values, task dimension is {}",
                        values.len(),
                        task.length
                    )));
                }
                for (k, &v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Shape(format!("non-finite value at dimension {k}")));
                    }
                    let (lo, hi) = task.bounds[k];
                    if v < lo || v > hi {
                        return Err(Error::Shape(format!(
                            "value {v} at dimension {k} outside bounds [{lo}, {hi}]"
                        )));
                    }
                }
                Ok(())
            }
            _ => Err(Error::Shape("design kind does not match task kind".into())),
        }
    }

    pub fn dedup_key(&self) -> DesignKey {
        match self {
            Design::Discrete(s) => DesignKey::Discrete(s.clone()),
            Design::Continuous(v) => {
                DesignKey::Continuous(v.iter().map(|&x| (x * 1000.0).round() as i64).collect())
            }
        }
    }

    /// Bare symbol string, e.g. "ACGTACGT". Discrete designs only.
    pub fn symbol_string(&self, task: &TaskSpec) -> Result<String> {
        match self {
            Design::Discrete(symbols) => {
                Ok(symbols.iter().map(|&s| task.alphabet[s]).collect())
            }
            Design::Continuous(_) => {
                Err(Error::Shape("symbol_string on continuous design".into()))
            }
        }
    }

    pub fn from_symbol_string(task: &TaskSpec, s: &str) -> Result<Design> {
        let mut symbols = Vec::with_capacity(task.length);
        for c in s.chars() {
            match task.symbol_index(c) {
                Some(idx) => symbols.push(idx),
                None => return Err(Error::Format(format!("unknown symbol {c:?}"))),
            }
        }
        let design = Design::Discrete(symbols);
        design.validate(task)?;
        Ok(design)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Design::Discrete(s) => write!(f, "{s:?}"),
            Design::Continuous(v) => write!(f, "{v:?}"),
        }
    }
}

/// Exact label extrema over the full design space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizationSpec {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_min < y_max) {
            return Err(Error::Degenerate(format!(
                "normalization needs y_min < y_max, got ({y_min}, {y_max})"
            )));
        }
        Ok(NormalizationSpec { y_min, y_max })
    }

    /// (y - y_min) / (y_max - y_min). Not clamped.
    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }
}

#[derive(Clone, Debug)]
enum OracleKind {
    Pwm {
        /// length x alphabet position weights.
        weights: Vec<Vec<f64>>,
        /// length x length pairwise couplings; entries above the diagonal are used.
        couplings: Vec<Vec<f64>>,
    },
    Quadratic {
        center: Vec<f64>,
    },
    Lookup {
        table: HashMap<Vec<usize>, f64>,
    },
}

/// Deterministic ground-truth evaluator. Immutable after construction; safe
/// to score from multiple threads.
#[derive(Clone, Debug)]
pub struct Oracle {
    task: TaskSpec,
    kind: OracleKind,
    norm: NormalizationSpec,
}

/// Centered per-symbol code in [-1, 1] used by the pairwise coupling term.
pub fn symbol_code(symbol: usize, alphabet_size: usize) -> f64 {
    if alphabet_size <= 1 {
        return 0.0;
    }
    (2.0 * symbol as f64 - (alphabet_size as f64 - 1.0)) / (alphabet_size as f64 - 1.0)
}

impl Oracle {
    /// Builds one of the seeded built-in oracles (`"pwm"` or `"quadratic"`).
    pub fn new(task: TaskSpec) -> Result<Oracle> {
        Self::with_cap(task, ENUMERATION_CAP)
    }

    pub fn with_cap(task: TaskSpec, enumeration_cap: u64) -> Result<Oracle> {
        let kind = match (task.oracle_id.as_str(), task.kind) {
            ("pwm", SpaceKind::Discrete) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, "pwm"));
                let unit = Normal::new(0.0, 1.0).expect("unit normal");
                let weights = (0..task.length)
                    .map(|_| {
                        (0..task.alphabet.len())
                            .map(|_| PWM_WEIGHT_SCALE * unit.sample(&mut rng))
                            .collect()
                    })
                    .collect();
                let coupling = Normal::new(PWM_COUPLING_MEAN, PWM_COUPLING_STD).expect("normal");
                let mut couplings = vec![vec![0.0; task.length]; task.length];
                for i in 0..task.length {
                    for j in (i + 1)..task.length {
                        couplings[i][j] = coupling.sample(&mut rng);
                    }
                }
                OracleKind::Pwm { weights, couplings }
            }
            ("quadratic", SpaceKind::Continuous) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, "quadratic"));
                // Center lands on the three-decimal render grid so the global
                // optimum is representable in text.
                let center = task
                    .bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let c: f64 = rng.random_range(lo..hi);
                        ((c * 1000.0).round() / 1000.0).clamp(lo, hi)
                    })
                    .collect();
                OracleKind::Quadratic { center }
            }
            (other, kind) => {
                return Err(Error::Format(format!(
                    "unknown oracle id {other:?} for {kind:?} task"
                )))
            }
        };
        let norm = extrema(&task, &kind, enumeration_cap)?;
        Ok(Oracle { task, kind, norm })
    }

    /// Loads a lookup oracle from a CSV with header `design,label`. The file
    /// must cover the full discrete space exactly once.
    pub fn from_lookup_csv(task: TaskSpec, path: &Path, negate_labels: bool) -> Result<Oracle> {
        if task.kind != SpaceKind::Discrete {
            return Err(Error::Shape("lookup oracle requires a discrete task".into()));
        }
        let space = task.space_size().ok_or_else(|| {
            Error::Capacity("lookup space size overflows u64".into())
        })?;
        if space > ENUMERATION_CAP {
            return Err(Error::Capacity(format!(
                "lookup space size {space} exceeds enumeration cap {ENUMERATION_CAP}"
            )));
        }
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty lookup file".into()))??;
        if header.trim() != "design,label" {
            return Err(Error::Format(format!(
                "expected header 'design,label', got {header:?}"
            )));
        }
        let mut table: HashMap<Vec<usize>, f64> = HashMap::with_capacity(space as usize);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (design_str, label_str) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!("line {}: missing comma", lineno + 2))
            })?;
            let design = Design::from_symbol_string(&task, design_str.trim())?;
            let mut label: f64 = label_str.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: bad label {label_str:?}", lineno + 2))
            })?;
            if negate_labels {
                label = -label;
            }
            if !label.is_finite() || label.abs() >= 1000.0 {
                return Err(Error::Range(format!(
                    "line {}: label {label} outside renderable range",
                    lineno + 2
                )));
            }
            let Design::Discrete(symbols) = design else { unreachable!() };
            if table.insert(symbols, label).is_some() {
                return Err(Error::Format(format!(
                    "line {}: duplicate design {design_str:?}",
                    lineno + 2
                )));
            }
        }
        if table.len() as u64 != space {
            return Err(Error::Format(format!(
                "lookup covers {} designs, space has {space}",
                table.len()
            )));
        }
        let kind = OracleKind::Lookup { table };
        let norm = extrema(&task, &kind, ENUMERATION_CAP)?;
        Ok(Oracle { task, kind, norm })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn normalization(&self) -> NormalizationSpec {
        self.norm
    }

    /// Ground-truth raw label f(design).
    pub fn score(&self, design: &Design) -> Result<f64> {
        design.validate(&self.task)?;
        Ok(match (&self.kind, design) {
            (OracleKind::Pwm { weights, couplings }, Design::Discrete(symbols)) => {
                let a = self.task.alphabet.len();
                let mut y = 0.0;
                for (i, &s) in symbols.iter().enumerate() {
                    y += weights[i][s];
                }
                for i in 0..symbols.len() {
                    for j in (i + 1)..symbols.len() {
                        y += couplings[i][j]
                            * symbol_code(symbols[i], a)
                            * symbol_code(symbols[j], a);
                    }
                }
                y
            }
            (OracleKind::Quadratic { center }, Design::Continuous(values)) => {
                let mut d2 = 0.0;
                for (v, c) in values.iter().zip(center) {
                    d2 += (v - c) * (v - c);
                }
                -d2
            }
            (OracleKind::Lookup { table }, Design::Discrete(symbols)) => *table
                .get(symbols)
                .expect("validated design is covered by lookup table"),
            _ => unreachable!("kind/design mismatch caught by validate"),
        })
    }

    pub fn normalized_score(&self, design: &Design) -> Result<f64> {
        Ok(self.norm.normalize(self.score(design)?))
    }

    /// Exact extrema over the full space (enumeration or closed form).
    pub fn enumerate_extrema(&self) -> Result<NormalizationSpec> {
        extrema(&self.task, &self.kind, ENUMERATION_CAP)
    }

    pub fn enumerate_extrema_with_cap(&self, cap: u64) -> Result<NormalizationSpec> {
        extrema(&self.task, &self.kind, cap)
    }

    /// Every design in the discrete space with its raw label, in enumeration
    /// order.
    pub fn enumerate_all(&self) -> Result<Vec<(Design, f64)>> {
        let space = self.checked_space(ENUMERATION_CAP)?;
        let mut out = Vec::with_capacity(space as usize);
        let mut symbols = vec![0usize; self.task.length];
        loop {
            let design = Design::Discrete(symbols.clone());
            let y = self.score(&design)?;
            out.push((design, y));
            if !advance(&mut symbols, self.task.alphabet.len()) {
                break;
            }
        }
        Ok(out)
    }

    /// Uniformly sampled labeled designs; the continuous stand-in for a raw
    /// dataset. Values are drawn on the three-decimal grid.
    pub fn sample_dataset(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(Design, f64)>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let design = self.sample_design(rng);
            let y = self.score(&design)?;
            out.push((design, y));
        }
        Ok(out)
    }

    /// One uniform design from the task's space.
    pub fn sample_design(&self, rng: &mut ChaCha8Rng) -> Design {
        match self.task.kind {
            SpaceKind::Discrete => {
                let a = self.task.alphabet.len();
                Design::Discrete((0..self.task.length).map(|_| rng.random_range(0..a)).collect())
            }
            SpaceKind::Continuous => Design::Continuous(
                self.task
                    .bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let v: f64 = rng.random_range(lo..hi);
                        ((v * 1000.0).round() / 1000.0).clamp(lo, hi)
                    })
                    .collect(),
            ),
        }
    }

    fn checked_space(&self, cap: u64) -> Result<u64> {
        match self.task.kind {
            SpaceKind::Continuous => Err(Error::Capacity(
                "continuous space cannot be enumerated".into(),
            )),
            SpaceKind::Discrete => {
                let space = self.task.space_size().ok_or_else(|| {
                    Error::Capacity("space size overflows u64".into())
                })?;
                if space > cap {
                    Err(Error::Capacity(format!(
                        "space size {space} exceeds enumeration cap {cap}"
                    )))
                } else {
                    Ok(space)
                }
            }
        }
    }
}

fn extrema(task: &TaskSpec, kind: &OracleKind, cap: u64) -> Result<NormalizationSpec> {
    match kind {
        OracleKind::Quadratic { center } => {
            // Farthest corner of the box from the center, in closed form.
            let mut worst = 0.0;
            for (&(lo, hi), &c) in task.bounds.iter().zip(center) {
                let d = (c - lo).max(hi - c);
                worst += d * d;
            }
            NormalizationSpec::new(-worst, 0.0)
        }
        OracleKind::Pwm { weights, couplings } => {
            let space = space_checked(task, cap)?;
            let a = task.alphabet.len();
            let mut symbols = vec![0usize; task.length];
            let mut y_min = f64::INFINITY;
            let mut y_max = f64::NEG_INFINITY;
            for _ in 0..space {
                let mut y = 0.0;
                for (i, &s) in symbols.iter().enumerate() {
                    y += weights[i][s];
                }
                for i in 0..symbols.len() {
                    for j in (i + 1)..symbols.len() {
                        y += couplings[i][j] * symbol_code(symbols[i], a) * symbol_code(symbols[j], a);
                    }
                }
                y_min = y_min.min(y);
                y_max = y_max.max(y);
                advance(&mut symbols, a);
            }
            NormalizationSpec::new(y_min, y_max)
        }
        OracleKind::Lookup { table } => {
            let mut y_min = f64::INFINITY;
            let mut y_max = f64::NEG_INFINITY;
            for &y in table.values() {
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
            NormalizationSpec::new(y_min, y_max)
        }
    }
}

fn space_checked(task: &TaskSpec, cap: u64) -> Result<u64> {
    let space = task
        .space_size()
        .ok_or_else(|| Error::Capacity("space size overflows u64".into()))?;
    if space > cap {
        return Err(Error::Capacity(format!(
            "space size {space} exceeds enumeration cap {cap}"
        )));
    }
    Ok(space)
}

/// Odometer increment over symbol indices; returns false after wrapping.
fn advance(symbols: &mut [usize], alphabet: usize) -> bool {
    for slot in symbols.iter_mut().rev() {
        *slot += 1;
        if *slot < alphabet {
            return true;
        }
        *slot = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line re-computation of the pwm oracle, kept independent of
    /// `Oracle::score`.
    fn naive_pwm_score(
        weights: &[Vec<f64>],
        couplings: &[Vec<f64>],
        alphabet: usize,
        symbols: &[usize],
    ) -> f64 {
        let mut total = 0.0;
        for i in 0..symbols.len() {
            total += weights[i][symbols[i]];
        }
        for i in 0..symbols.len() {
            for j in (i + 1)..symbols.len() {
                let code = |s: usize| {
                    (2.0 * s as f64 - (alphabet as f64 - 1.0)) / (alphabet as f64 - 1.0)
                };
                total += couplings[i][j] * code(symbols[i]) * code(symbols[j]);
            }
        }
        total
    }

    fn pwm_tables(oracle: &Oracle) -> (&Vec<Vec<f64>>, &Vec<Vec<f64>>) {
        match &oracle.kind {
            OracleKind::Pwm { weights, couplings } => (weights, couplings),
            _ => panic!("not a pwm oracle"),
        }
    }

    #[test]
    fn continuous_center_scores_zero() {
        let oracle = Oracle::new(TaskSpec::desk_continuous(7)).unwrap();
        let OracleKind::Quadratic { center } = &oracle.kind else { panic!() };
        let at_center = Design::Continuous(center.clone());
        assert_eq!(oracle.score(&at_center).unwrap(), 0.0);
    }

    #[test]
    fn continuous_known_distance() {
        // bounds [-1,1]^2, center forced to the origin.
        let task = TaskSpec::continuous(vec![(-1.0, 1.0); 2], "quadratic", 0).unwrap();
        let mut oracle = Oracle::new(task).unwrap();
        oracle.kind = OracleKind::Quadratic { center: vec![0.0, 0.0] };
        let x = Design::Continuous(vec![1.0, 1.0]);
        assert_eq!(oracle.score(&x).unwrap(), -2.0);
    }

    #[test]
    fn discrete_matches_naive_recomputation() {
        let oracle = Oracle::new(TaskSpec::desk_discrete(42)).unwrap();
        let (weights, couplings) = pwm_tables(&oracle);
        let symbols = vec![0, 2, 1, 3, 3, 0, 1, 2];
        let expected = naive_pwm_score(weights, couplings, 4, &symbols);
        let got = oracle.score(&Design::Discrete(symbols)).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn continuous_extrema_closed_form() {
        let task = TaskSpec::continuous(vec![(-1.0, 1.0); 2], "quadratic", 0).unwrap();
        let mut oracle = Oracle::new(task).unwrap();
        oracle.kind = OracleKind::Quadratic { center: vec![0.0, 0.0] };
        let norm = oracle.enumerate_extrema().unwrap();
        assert_eq!(norm.y_min, -2.0);
        assert_eq!(norm.y_max, 0.0);
    }

    #[test]
    fn discrete_extrema_match_brute_force() {
        let oracle = Oracle::new(TaskSpec::desk_discrete(5)).unwrap();
        let (weights, couplings) = pwm_tables(&oracle);
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        let mut symbols = vec![0usize; 8];
        loop {
            let y = naive_pwm_score(weights, couplings, 4, &symbols);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            if !advance(&mut symbols, 4) {
                break;
            }
        }
        let norm = oracle.enumerate_extrema().unwrap();
        assert_eq!(norm.y_min, y_min);
        assert_eq!(norm.y_max, y_max);
    }

    #[test]
    fn degenerate_constant_oracle_rejected() {
        let task = TaskSpec::desk_discrete(0);
        let kind = OracleKind::Pwm {
            weights: vec![vec![0.0; 4]; 8],
            couplings: vec![vec![0.0; 8]; 8],
        };
        let err = extrema(&task, &kind, ENUMERATION_CAP).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn normalize_endpoints_and_interior() {
        let spec = NormalizationSpec::new(0.0, 2.0).unwrap();
        assert_eq!(spec.normalize(0.0), 0.0);
        assert_eq!(spec.normalize(2.0), 1.0);
        assert_eq!(spec.normalize(0.878), 0.439);
    }

    #[test]
    fn normalize_strictly_increasing() {
        let spec = NormalizationSpec::new(-3.0, 5.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let y = -4.0 + 0.1 * i as f64;
            let n = spec.normalize(y);
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn score_is_pure() {
        let oracle = Oracle::new(TaskSpec::desk_discrete(3)).unwrap();
        let design = Design::Discrete(vec![1, 3, 0, 2, 2, 1, 0, 3]);
        let first = oracle.score(&design).unwrap();
        for _ in 0..9 {
            assert_eq!(oracle.score(&design).unwrap(), first);
        }
    }

    #[test]
    fn parameters_reproducible() {
        let a = Oracle::new(TaskSpec::desk_discrete(11)).unwrap();
        let b = Oracle::new(TaskSpec::desk_discrete(11)).unwrap();
        let (wa, ca) = pwm_tables(&a);
        let (wb, cb) = pwm_tables(&b);
        assert_eq!(wa, wb);
        assert_eq!(ca, cb);
        let c = Oracle::new(TaskSpec::desk_discrete(12)).unwrap();
        let (wc, _) = pwm_tables(&c);
        assert_ne!(wa, wc);
    }

    #[test]
    fn enumeration_cap_enforced() {
        // 4^11 = 4M > 2^20.
        let task = TaskSpec::discrete(vec!['A', 'C', 'G', 'T'], 11, "pwm", 0).unwrap();
        let err = Oracle::new(task).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn all_normalized_scores_in_unit_interval() {
        let oracle = Oracle::new(TaskSpec::desk_discrete(9)).unwrap();
        for (design, y) in oracle.enumerate_all().unwrap() {
            let n = oracle.normalization().normalize(y);
            assert!((0.0..=1.0).contains(&n), "{design} -> {n}");
        }
    }

    #[test]
    fn shape_errors() {
        let oracle = Oracle::new(TaskSpec::desk_discrete(1)).unwrap();
        assert!(matches!(
            oracle.score(&Design::Discrete(vec![0; 7])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            oracle.score(&Design::Discrete(vec![9; 8])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            oracle.score(&Design::Continuous(vec![0.0; 8])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lookup_roundtrip_and_validation() {
        use std::io::Write;
        let task = TaskSpec::discrete(vec!['A', 'C'], 3, "pwm", 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lookup.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "design,label").unwrap();
        let symbols = ['A', 'C'];
        let mut idx = 0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    writeln!(f, "{}{}{},{}", symbols[a], symbols[b], symbols[c], idx).unwrap();
                    idx += 1;
                }
            }
        }
        drop(f);
        let oracle = Oracle::from_lookup_csv(task.clone(), &path, false).unwrap();
        assert_eq!(oracle.score(&Design::Discrete(vec![0, 0, 0])).unwrap(), 0.0);
        assert_eq!(oracle.score(&Design::Discrete(vec![1, 1, 1])).unwrap(), 7.0);
        assert_eq!(oracle.normalization().y_max, 7.0);

        let negated = Oracle::from_lookup_csv(task.clone(), &path, true).unwrap();
        assert_eq!(negated.score(&Design::Discrete(vec![1, 1, 1])).unwrap(), -7.0);

        // Missing a row -> coverage error.
        let partial = dir.path().join("partial.csv");
        let mut f = std::fs::File::create(&partial).unwrap();
        writeln!(f, "design,label").unwrap();
        writeln!(f, "AAA,1.0").unwrap();
        drop(f);
        assert!(matches!(
            Oracle::from_lookup_csv(task, &partial, false),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn sampled_designs_respect_space() {
        let oracle = Oracle::new(TaskSpec::desk_continuous(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (design, y) in oracle.sample_dataset(200, &mut rng).unwrap() {
            design.validate(oracle.task()).unwrap();
            let n = oracle.normalization().normalize(y);
            assert!((0.0..=1.0).contains(&n));
        }
    }
}
