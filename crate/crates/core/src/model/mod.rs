//! A tiny transformer with switchable bidirectional/causal attention,
//! reverse-mode autodiff, and AdamW.

pub mod adamw;
pub mod tensor;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Role, TokenSeq};

pub use adamw::{AdamWConfig, OptimizerState};
pub use tensor::{row_log_softmax_at, Scalar, Tape};

const ATTN_MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit floats.
    Fast,
    /// 64-bit floats.
    Check,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub attention_mode: AttentionMode,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Shape("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Desk default: 2 layers, 4 heads, d_model 64, d_ff 256, max_len 512.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 512,
            vocab_size,
            attention_mode: AttentionMode::Bidirectional,
            precision: Precision::Fast,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams<T: Scalar> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    pub wq: Array2<T>,
    pub bq: Array2<T>,
    pub wk: Array2<T>,
    pub bk: Array2<T>,
    pub wv: Array2<T>,
    pub bv: Array2<T>,
    pub wo: Array2<T>,
    pub bo: Array2<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    pub w1: Array2<T>,
    pub b1: Array2<T>,
    pub w2: Array2<T>,
    pub b2: Array2<T>,
}

/// All learnable tensors, iterated in one canonical order everywhere
/// (forward registration, optimizer state, checkpoints).
#[derive(Clone, Debug)]
pub struct Params<T: Scalar> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Array2<T>,
    pub lnf_b: Array2<T>,
    pub w_out: Array2<T>,
    pub b_out: Array2<T>,
}

impl<T: Scalar> Params<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Params<T>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("normal");
        let mut randn = |r: usize, c: usize| -> Array2<T> {
            Array2::from_shape_fn((r, c), |_| T::from_f64(normal.sample(&mut rng)))
        };
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array2::from_elem((1, d), T::one()),
                ln1_b: Array2::zeros((1, d)),
                wq: randn(d, d),
                bq: Array2::zeros((1, d)),
                wk: randn(d, d),
                bk: Array2::zeros((1, d)),
                wv: randn(d, d),
                bv: Array2::zeros((1, d)),
                wo: randn(d, d),
                bo: Array2::zeros((1, d)),
                ln2_g: Array2::from_elem((1, d), T::one()),
                ln2_b: Array2::zeros((1, d)),
                w1: randn(d, cfg.d_ff),
                b1: Array2::zeros((1, cfg.d_ff)),
                w2: randn(cfg.d_ff, d),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        Ok(Params {
            tok_emb: randn(cfg.vocab_size, d),
            pos_emb: randn(cfg.max_len, d),
            layers,
            lnf_g: Array2::from_elem((1, d), T::one()),
            lnf_b: Array2::zeros((1, d)),
            w_out: randn(d, cfg.vocab_size),
            b_out: Array2::zeros((1, cfg.vocab_size)),
        })
    }

    /// Canonical (name, tensor) walk. Registration, optimizer and checkpoint
    /// order all come from here.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Array2<T>)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.ln1_g"), &l.ln1_g);
            f(&format!("layer{i}.ln1_b"), &l.ln1_b);
            f(&format!("layer{i}.wq"), &l.wq);
            f(&format!("layer{i}.bq"), &l.bq);
            f(&format!("layer{i}.wk"), &l.wk);
            f(&format!("layer{i}.bk"), &l.bk);
            f(&format!("layer{i}.wv"), &l.wv);
            f(&format!("layer{i}.bv"), &l.bv);
            f(&format!("layer{i}.wo"), &l.wo);
            f(&format!("layer{i}.bo"), &l.bo);
            f(&format!("layer{i}.ln2_g"), &l.ln2_g);
            f(&format!("layer{i}.ln2_b"), &l.ln2_b);
            f(&format!("layer{i}.w1"), &l.w1);
            f(&format!("layer{i}.b1"), &l.b1);
            f(&format!("layer{i}.w2"), &l.w2);
            f(&format!("layer{i}.b2"), &l.b2);
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<T>)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.ln1_g"), &mut l.ln1_g);
            f(&format!("layer{i}.ln1_b"), &mut l.ln1_b);
            f(&format!("layer{i}.wq"), &mut l.wq);
            f(&format!("layer{i}.bq"), &mut l.bq);
            f(&format!("layer{i}.wk"), &mut l.wk);
            f(&format!("layer{i}.bk"), &mut l.bk);
            f(&format!("layer{i}.wv"), &mut l.wv);
            f(&format!("layer{i}.bv"), &mut l.bv);
            f(&format!("layer{i}.wo"), &mut l.wo);
            f(&format!("layer{i}.bo"), &mut l.bo);
            f(&format!("layer{i}.ln2_g"), &mut l.ln2_g);
            f(&format!("layer{i}.ln2_b"), &mut l.ln2_b);
            f(&format!("layer{i}.w1"), &mut l.w1);
            f(&format!("layer{i}.b1"), &mut l.b1);
            f(&format!("layer{i}.w2"), &mut l.w2);
            f(&format!("layer{i}.b2"), &mut l.b2);
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }

    pub fn assert_finite(&self) -> Result<()> {
        let mut bad = None;
        self.for_each(|name, t| {
            if bad.is_none() && t.iter().any(|x| !x.is_finite_val()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::numeric("params", format!("non-finite values in {name}"))),
            None => Ok(()),
        }
    }
}

/// Gradients in the canonical tensor order; zero tensors where the loss did
/// not touch a parameter.
pub struct Grads<T: Scalar> {
    pub tensors: Vec<Array2<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(params: &Params<T>) -> Grads<T> {
        let mut tensors = Vec::new();
        params.for_each(|_, t| tensors.push(Array2::zeros(t.dim())));
        Grads { tensors }
    }

    pub fn add_scaled(&mut self, other: &Grads<T>, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.zip_mut_with(b, |x, &y| *x += y * scale);
        }
    }
}

/// Node ids of every parameter on a tape, in canonical order.
pub struct ParamIds {
    ids: Vec<usize>,
    per_layer: usize,
    n_layers: usize,
}

impl ParamIds {
    pub fn tok_emb(&self) -> usize {
        self.ids[0]
    }
    pub fn pos_emb(&self) -> usize {
        self.ids[1]
    }
    fn layer_field(&self, layer: usize, field: usize) -> usize {
        self.ids[2 + layer * self.per_layer + field]
    }
    pub fn lnf_g(&self) -> usize {
        self.ids[2 + self.n_layers * self.per_layer]
    }
    pub fn lnf_b(&self) -> usize {
        self.ids[2 + self.n_layers * self.per_layer + 1]
    }
    pub fn w_out(&self) -> usize {
        self.ids[2 + self.n_layers * self.per_layer + 2]
    }
    pub fn b_out(&self) -> usize {
        self.ids[2 + self.n_layers * self.per_layer + 3]
    }
    pub fn all(&self) -> &[usize] {
        &self.ids
    }
}

const PER_LAYER_TENSORS: usize = 16;

/// Registers every parameter tensor as a tape leaf, canonical order.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>) -> ParamIds {
    let mut ids = Vec::with_capacity(params.tensor_count());
    params.for_each(|_, t| {
        ids.push(tape.leaf(t.clone()));
    });
    ParamIds { ids, per_layer: PER_LAYER_TENSORS, n_layers: params.layers.len() }
}

/// Additive attention mask: 0 where position i may attend to j, a large
/// negative value elsewhere. Pad columns are always masked; causal mode
/// additionally masks j > i.
fn attention_mask<T: Scalar>(tokens: &TokenSeq, mode: AttentionMode) -> Array2<T> {
    let n = tokens.len();
    let neg = T::from_f64(ATTN_MASK_NEG);
    let mut mask = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let pad = tokens.roles[j] == Role::Pad;
            let causal_blocked = mode == AttentionMode::Causal && j > i;
            if pad || causal_blocked {
                mask[(i, j)] = neg;
            }
        }
    }
    mask
}

/// Builds the transformer forward graph on an existing tape; returns the
/// logits node (positions x vocab).
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &ParamIds,
    cfg: &ModelConfig,
    tokens: &TokenSeq,
) -> Result<usize> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if tokens.pos_offset + n > cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence occupies positions {}..{} beyond max_len {}",
            tokens.pos_offset,
            tokens.pos_offset + n,
            cfg.max_len
        )));
    }
    for &id in &tokens.ids {
        if id >= cfg.vocab_size {
            return Err(Error::Shape(format!("token id {id} >= vocab size {}", cfg.vocab_size)));
        }
    }

    let d_head = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mask = attention_mask::<T>(tokens, cfg.attention_mode);

    let tok = tape.gather_rows(ids.tok_emb(), &tokens.ids);
    let pos = tape.slice_rows(ids.pos_emb(), tokens.pos_offset..tokens.pos_offset + n);
    let mut x = tape.add(tok, pos);

    for layer in 0..cfg.n_layers {
        let f = |field: usize| ids.layer_field(layer, field);
        // Field order mirrors LayerParams/for_each.
        let (ln1_g, ln1_b) = (f(0), f(1));
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (f(2), f(3), f(4), f(5), f(6), f(7), f(8), f(9));
        let (ln2_g, ln2_b) = (f(10), f(11));
        let (w1, b1, w2, b2) = (f(12), f(13), f(14), f(15));

        let h = tape.layer_norm_rows(x, ln1_g, ln1_b);
        let q = tape.matmul(h, wq);
        let q = tape.add_row(q, bq);
        let k = tape.matmul(h, wk);
        let k = tape.add_row(k, bk);
        let v = tape.matmul(h, wv);
        let v = tape.add_row(v, bv);

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let cols = hd * d_head..(hd + 1) * d_head;
            let qh = tape.slice_cols(q, cols.clone());
            let kh = tape.slice_cols(k, cols.clone());
            let vh = tape.slice_cols(v, cols);
            let scores = tape.matmul_tt(qh, false, kh, true);
            let scores = tape.scale(scores, scale);
            let masked = tape.add_const(scores, &mask);
            let attn = tape.softmax_rows(masked);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let proj = tape.matmul(cat, wo);
        let proj = tape.add_row(proj, bo);
        x = tape.add(x, proj);

        let h2 = tape.layer_norm_rows(x, ln2_g, ln2_b);
        let up = tape.matmul(h2, w1);
        let up = tape.add_row(up, b1);
        let act = tape.gelu(up);
        let down = tape.matmul(act, w2);
        let down = tape.add_row(down, b2);
        x = tape.add(x, down);
    }

    let hf = tape.layer_norm_rows(x, ids.lnf_g(), ids.lnf_b());
    let logits = tape.matmul(hf, ids.w_out());
    let logits = tape.add_row(logits, ids.b_out());
    Ok(logits)
}

/// One forward pass without gradients; returns the logits values.
pub fn forward_logits<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    tokens: &TokenSeq,
) -> Result<Array2<T>> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params);
    let logits = forward_on_tape(&mut tape, &ids, cfg, tokens)?;
    let out = tape.value(logits).clone();
    if out.iter().any(|x| !x.is_finite_val()) {
        return Err(Error::numeric("forward", "non-finite logits"));
    }
    Ok(out)
}

/// Runs an objective built from tape primitives and returns the loss with
/// gradients for every parameter (zeros for untouched ones).
pub fn loss_and_grad<T: Scalar>(
    params: &Params<T>,
    objective: impl FnOnce(&mut Tape<T>, &ParamIds) -> Result<usize>,
) -> Result<(f64, Grads<T>)> {
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params);
    let loss_id = objective(&mut tape, &ids)?;
    let loss = tape.scalar(loss_id).to_f64();
    if !loss.is_finite() {
        return Err(Error::numeric("loss", format!("non-finite loss {loss}")));
    }
    let mut node_grads = tape.backward(loss_id);
    let mut grads = Grads::zeros_like(params);
    for (slot, &node) in grads.tensors.iter_mut().zip(ids.all()) {
        if let Some(g) = node_grads[node].take() {
            *slot = g;
        }
    }
    for g in &grads.tensors {
        if g.iter().any(|x| !x.is_finite_val()) {
            return Err(Error::numeric("backward", "non-finite gradient"));
        }
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line (config + tensor manifest), then raw
// little-endian f32 values in manifest order.

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    params: &Params<T>,
) -> Result<()> {
    let mut tensors = Vec::new();
    params.for_each(|name, t| {
        tensors.push(TensorMeta { name: name.to_string(), shape: [t.nrows(), t.ncols()] });
    });
    let header = CheckpointHeader { config: cfg.clone(), tensors };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header).map_err(|e| Error::Format(e.to_string()))?;
    f.write_all(b"\n")?;
    let mut buf = Vec::new();
    params.for_each(|_, t| {
        for &x in t.iter() {
            buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    });
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, Params<T>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
    header.config.validate()?;

    // Shapes the config implies, in canonical order.
    let expected = Params::<T>::init(&header.config, 0)?;
    let mut expected_meta = Vec::new();
    expected.for_each(|name, t| {
        expected_meta.push((name.to_string(), [t.nrows(), t.ncols()]));
    });
    if expected_meta.len() != header.tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, config implies {}",
            header.tensors.len(),
            expected_meta.len()
        )));
    }
    for (meta, (name, shape)) in header.tensors.iter().zip(&expected_meta) {
        if &meta.name != name || &meta.shape != shape {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} {:?} does not match expected {} {:?}",
                meta.name, meta.shape, name, shape
            )));
        }
    }

    let mut params = expected;
    let mut ok = Ok(());
    params.for_each_mut(|name, t| {
        if ok.is_err() {
            return;
        }
        let count = t.len();
        let mut bytes = vec![0u8; count * 4];
        if let Err(e) = reader.read_exact(&mut bytes) {
            ok = Err(Error::Format(format!("checkpoint truncated at {name}: {e}")));
            return;
        }
        for (slot, chunk) in t.iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *slot = T::from_f64(v as f64);
        }
    });
    ok?;
    let mut extra = [0u8; 1];
    if reader.read(&mut extra)? != 0 {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok((header.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Role;

    fn tiny_cfg(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            vocab_size: 11,
            attention_mode: mode,
            precision: Precision::Check,
        }
    }

    fn seq(ids: Vec<usize>) -> TokenSeq {
        let roles = vec![Role::Prompt; ids.len()];
        TokenSeq::new(ids, roles)
    }

    #[test]
    fn bidirectional_sees_suffix() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 1).unwrap();
        let a = seq(vec![1, 2, 3, 4, 5]);
        let mut b = a.clone();
        b.ids[4] = 9; // flip a token after position 1
        let la = forward_logits(&params, &cfg, &a).unwrap();
        let lb = forward_logits(&params, &cfg, &b).unwrap();
        let delta: f64 = la
            .row(1)
            .iter()
            .zip(lb.row(1))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(delta > 1e-9, "suffix flip changed nothing: {delta}");
    }

    #[test]
    fn causal_ignores_suffix_bit_exactly() {
        let cfg = tiny_cfg(AttentionMode::Causal);
        let params = Params::<f64>::init(&cfg, 1).unwrap();
        let a = seq(vec![1, 2, 3, 4, 5]);
        let mut b = a.clone();
        b.ids[4] = 9;
        let la = forward_logits(&params, &cfg, &a).unwrap();
        let lb = forward_logits(&params, &cfg, &b).unwrap();
        for p in 0..4 {
            for v in 0..cfg.vocab_size {
                assert_eq!(la[(p, v)], lb[(p, v)], "position {p} vocab {v}");
            }
        }
        // And the flipped position itself does differ.
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn pad_positions_masked_out() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 3).unwrap();
        let a = TokenSeq::new(vec![1, 2, 3], vec![Role::Prompt; 3]);
        let mut b = TokenSeq::new(
            vec![1, 2, 3, 0, 0],
            vec![Role::Prompt, Role::Prompt, Role::Prompt, Role::Pad, Role::Pad],
        );
        let la = forward_logits(&params, &cfg, &a).unwrap();
        let lb = forward_logits(&params, &cfg, &b).unwrap();
        for p in 0..3 {
            for v in 0..cfg.vocab_size {
                assert_eq!(la[(p, v)], lb[(p, v)]);
            }
        }
        // Pad content is irrelevant.
        b.ids[3] = 7;
        let lc = forward_logits(&params, &cfg, &b).unwrap();
        for p in 0..3 {
            assert_eq!(lb.row(p), lc.row(p));
        }
    }

    #[test]
    fn zero_output_projection_gives_uniform_softmax() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let mut params = Params::<f64>::init(&cfg, 5).unwrap();
        params.w_out.fill(0.0);
        params.b_out.fill(0.0);
        let logits = forward_logits(&params, &cfg, &seq(vec![1, 2, 3])).unwrap();
        let v = cfg.vocab_size as f64;
        for p in 0..3 {
            let row = logits.row(p);
            let lse = {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            };
            // Cross entropy of any target under uniform logits is ln V.
            for t in 0..cfg.vocab_size {
                assert!((lse - row[t] - v.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn length_overflow_is_shape_error() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 5).unwrap();
        let long = seq(vec![1; 17]);
        assert!(matches!(
            forward_logits(&params, &cfg, &long),
            Err(Error::Shape(_))
        ));
        let bad = seq(vec![99]);
        assert!(matches!(
            forward_logits(&params, &cfg, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_check_cross_entropy_objective() {
        // Full-model gradient check on a masked cross-entropy objective.
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 7).unwrap();
        let tokens = seq(vec![1, 4, 2, 9, 3]);
        let targets = [5usize, 6, 7];
        let rows = [0usize, 2, 4];

        let objective = |tape: &mut Tape<f64>, ids: &ParamIds| {
            let logits = forward_on_tape(tape, ids, &cfg, &tokens)?;
            let picked = tape.gather_rows(logits, &rows);
            let ce = tape.cross_entropy_rows(picked, &targets);
            Ok(tape.mean_all(ce))
        };
        let (loss, grads) = loss_and_grad(&params, objective).unwrap();
        assert!(loss.is_finite());

        // Spot-check coordinates across tensors with central differences.
        // Coordinates whose gradient is below the finite-difference noise
        // floor (eps * |loss| / h) cannot be certified at 1e-6 relative and
        // are skipped.
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        use rand::Rng;
        let mut names = Vec::new();
        params.for_each(|name, _| names.push(name.to_string()));
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut draws = 0;
        while checked < 24 && draws < 500 {
            draws += 1;
            let ti = draws % names.len();
            let (r, c) = {
                let mut dims = (0, 0);
                let mut i = 0;
                params.for_each(|_, t| {
                    if i == ti {
                        dims = t.dim();
                    }
                    i += 1;
                });
                (rng.random_range(0..dims.0), rng.random_range(0..dims.1))
            };
            let eval = |delta: f64| -> f64 {
                let mut p2 = params.clone();
                let mut i = 0;
                p2.for_each_mut(|_, t| {
                    if i == ti {
                        t[(r, c)] += delta;
                    }
                    i += 1;
                });
                let (l, _) = loss_and_grad(&p2, |tape, ids| {
                    let logits = forward_on_tape(tape, ids, &cfg, &tokens)?;
                    let picked = tape.gather_rows(logits, &rows);
                    let ce = tape.cross_entropy_rows(picked, &targets);
                    Ok(tape.mean_all(ce))
                })
                .unwrap();
                l
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.tensors[ti][(r, c)];
            if an.abs().max(fd.abs()) < 1e-3 {
                continue;
            }
            checked += 1;
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            max_rel = max_rel.max(rel);
            assert!(rel <= 1e-6, "{}[{r},{c}]: analytic {an} vs fd {fd} rel {rel}", names[ti]);
        }
        assert!(checked >= 20, "only {checked} measurable coordinates found");
        assert!(max_rel <= 1e-6);
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 2).unwrap();
        let tokens = seq(vec![1, 2]);
        let (_, grads) = loss_and_grad(&params, |tape, ids| {
            let logits = forward_on_tape(tape, ids, &cfg, &tokens)?;
            let ce = tape.cross_entropy_rows(logits, &[3, 4]);
            Ok(tape.mean_all(ce))
        })
        .unwrap();
        // Unused token embedding rows have zero grad, used rows nonzero.
        let mut names = Vec::new();
        params.for_each(|n, _| names.push(n.to_string()));
        let tok_idx = names.iter().position(|n| n == "tok_emb").unwrap();
        let g = &grads.tensors[tok_idx];
        assert!(g.row(1).iter().any(|&x| x != 0.0));
        assert!(g.row(9).iter().all(|&x| x == 0.0));
        // Position embeddings beyond the sequence are untouched.
        let pos_idx = names.iter().position(|n| n == "pos_emb").unwrap();
        let gp = &grads.tensors[pos_idx];
        assert!(gp.row(0).iter().any(|&x| x != 0.0));
        assert!(gp.row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_in_both_precisions() {
        let cfg_f32 = ModelConfig { precision: Precision::Fast, ..tiny_cfg(AttentionMode::Bidirectional) };
        let p32 = Params::<f32>::init(&cfg_f32, 11).unwrap();
        let tokens = seq(vec![1, 2, 3, 4]);
        let logits = forward_logits(&p32, &cfg_f32, &tokens).unwrap();
        for i in 0..4 {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            let sum: f32 = row.iter().map(|x| (x - m).exp()).sum();
            let total: f32 = row.iter().map(|x| (x - m).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip_f32_bit_identical() {
        let cfg = ModelConfig { precision: Precision::Fast, ..tiny_cfg(AttentionMode::Bidirectional) };
        let params = Params::<f32>::init(&cfg, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(cfg, cfg2);
        let tokens = seq(vec![1, 2, 3, 4, 5]);
        let la = forward_logits(&params, &cfg, &tokens).unwrap();
        let lb = forward_logits(&params2, &cfg2, &tokens).unwrap();
        assert_eq!(la, lb);
        // Saving again is byte-stable.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_f64_save_load_save_stable() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &cfg, &params).unwrap();
        let (cfg2, loaded) = load_checkpoint::<f64>(&a).unwrap();
        save_checkpoint(&b, &cfg2, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn checkpoint_shape_validation() {
        let cfg = tiny_cfg(AttentionMode::Bidirectional);
        let params = Params::<f64>::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        // Truncate the data section.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
