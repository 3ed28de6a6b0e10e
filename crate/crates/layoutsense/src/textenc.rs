//! Tokenizer and transformer text encoder with CLS pooling.
//!
//! The same encoder family serves three roles: the stage-1 caption encoder
//! that absorbs layout supervision, the frozen knowledge encoder inside the
//! reasoner, and the caption-MLM ablation encoder.

use crate::num::Scalar;
use crate::tape::{ParamId, ParamSet, Tape, Var};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";
pub const CLS: &str = "[cls]";
pub const SEP: &str = "[sep]";
pub const MASK: &str = "[mask]";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("token vocabulary at {path} is missing special token {token}")]
    MissingSpecial { path: String, token: String },
    #[error("empty text")]
    EmptyText,
    #[error("token id {id} out of vocabulary range {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("sequence has no maskable position")]
    NoMaskablePosition,
    #[error("missing parameter {0} (wrong checkpoint for this config?)")]
    MissingParam(String),
}

/// Word-level token vocabulary; specials are ordinary entries found by name.
#[derive(Debug, Clone)]
pub struct TokenVocab {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
    pub pad: usize,
    pub unk: usize,
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl TokenVocab {
    fn from_tokens(tokens: Vec<String>, origin: &str) -> Result<Self, TextError> {
        let mut lookup = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            lookup.insert(t.clone(), i);
        }
        let find = |name: &str| {
            lookup.get(name).copied().ok_or_else(|| TextError::MissingSpecial {
                path: origin.to_string(),
                token: name.to_string(),
            })
        };
        let (pad, unk, cls, sep, mask) =
            (find(PAD)?, find(UNK)?, find(CLS)?, find(SEP)?, find(MASK)?);
        Ok(TokenVocab { tokens, lookup, pad, unk, cls, sep, mask })
    }

    /// Builds a vocabulary from raw texts: the five specials first, then
    /// every distinct word in first-seen order.
    pub fn build(texts: &[String]) -> Self {
        let mut tokens: Vec<String> =
            [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        for text in texts {
            for word in split_words(text) {
                if seen.insert(word.clone(), ()).is_none() {
                    tokens.push(word);
                }
            }
        }
        TokenVocab::from_tokens(tokens, "<built>").expect("specials just inserted")
    }

    /// One token per line; line number = index.
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        TokenVocab::from_tokens(tokens, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.cls || id == self.sep || id == self.mask
    }
}

/// Lowercases and splits on whitespace; punctuation runs become their own
/// tokens. Bracketed specials like `[sep]` pass through intact.
fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        if lower.starts_with('[') && lower.ends_with(']') {
            words.push(lower);
            continue;
        }
        let mut current = String::new();
        let mut current_alnum = None;
        for ch in lower.chars() {
            let alnum = ch.is_alphanumeric() || ch == '\'';
            if current_alnum != Some(alnum) && !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            current.push(ch);
            current_alnum = Some(alnum);
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Token ids with CLS at position 0 and SEP closing the real content;
/// positions at `valid` and beyond are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends pad tokens up to `len`.
    pub fn pad_to(&self, vocab: &TokenVocab, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        while ids.len() < len {
            ids.push(vocab.pad);
        }
        TokenSequence { ids, valid: self.valid }
    }
}

/// Deterministic tokenization: CLS prepended, SEP appended, truncation to
/// `max_len` keeps CLS and the final SEP.
pub fn tokenize(
    vocab: &TokenVocab,
    text: &str,
    max_len: usize,
) -> Result<TokenSequence, TextError> {
    if text.trim().is_empty() {
        return Err(TextError::EmptyText);
    }
    let mut ids = vec![vocab.cls];
    for word in split_words(text) {
        ids.push(vocab.id_of(&word).unwrap_or(vocab.unk));
    }
    ids.push(vocab.sep);
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(vocab.sep);
    }
    let valid = ids.len();
    Ok(TokenSequence { ids, valid })
}

/// Per-token contextual vectors aligned with a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings<F: Scalar> {
    pub vectors: Array2<F>,
}

/// The tanh-squashed sentence vector from the CLS position.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding<F: Scalar> {
    pub vector: Array1<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_t: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_t % self.heads != 0 {
            return Err(format!("d_t {} not divisible by heads {}", self.d_t, self.heads));
        }
        if self.max_len < 8 {
            return Err(format!("max_len {} below minimum 8", self.max_len));
        }
        Ok(())
    }
}

/// Forward mode: evaluation is deterministic; training applies dropout from
/// the supplied stream.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    fn dropout_mask<F: Scalar>(&mut self, shape: &[usize]) -> Option<ArrayD<F>> {
        match self {
            Mode::Eval => None,
            Mode::Train { rng, dropout } => {
                if *dropout <= 0.0 {
                    return None;
                }
                let keep = 1.0 - *dropout;
                let scale = F::from_f64(1.0 / keep);
                Some(ArrayD::from_shape_fn(IxDyn(shape), |_| {
                    if rng.random_range(0.0..1.0) < keep {
                        scale
                    } else {
                        F::zero()
                    }
                }))
            }
        }
    }
}

struct BlockIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Transformer encoder bound to parameter slots inside one [`ParamSet`].
pub struct Encoder {
    pub cfg: EncoderConfig,
    prefix: String,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    pooler_w: ParamId,
    pooler_b: ParamId,
}

/// Samples a normal(0, 0.02) matrix in f64 and converts, so initialization
/// bits agree across scalar types.
pub fn init_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<F> {
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::from_f64(normal.sample(rng)))
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

impl Encoder {
    /// Registers fresh parameters (seeded from `cfg.seed`) under `prefix.`.
    pub fn init<F: Scalar>(cfg: EncoderConfig, params: &mut ParamSet<F>, prefix: &str) -> Self {
        use rand::SeedableRng;
        cfg.validate().expect("invalid encoder config");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_t;
        let tok_emb = params.add(
            format!("{prefix}.tok_emb"),
            init_normal::<F>(&mut rng, &[cfg.vocab_size, d]),
        );
        let pos_emb =
            params.add(format!("{prefix}.pos_emb"), init_normal::<F>(&mut rng, &[cfg.max_len, d]));
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(BlockIds {
                wq: params.add(format!("{p}.wq"), init_normal::<F>(&mut rng, &[d, d])),
                bq: params.add(format!("{p}.bq"), zeros::<F>(&[d])),
                wk: params.add(format!("{p}.wk"), init_normal::<F>(&mut rng, &[d, d])),
                bk: params.add(format!("{p}.bk"), zeros::<F>(&[d])),
                wv: params.add(format!("{p}.wv"), init_normal::<F>(&mut rng, &[d, d])),
                bv: params.add(format!("{p}.bv"), zeros::<F>(&[d])),
                wo: params.add(format!("{p}.wo"), init_normal::<F>(&mut rng, &[d, d])),
                bo: params.add(format!("{p}.bo"), zeros::<F>(&[d])),
                ln1_g: params.add(format!("{p}.ln1_g"), ones::<F>(&[d])),
                ln1_b: params.add(format!("{p}.ln1_b"), zeros::<F>(&[d])),
                w1: params.add(format!("{p}.w1"), init_normal::<F>(&mut rng, &[d, cfg.ff])),
                b1: params.add(format!("{p}.b1"), zeros::<F>(&[cfg.ff])),
                w2: params.add(format!("{p}.w2"), init_normal::<F>(&mut rng, &[cfg.ff, d])),
                b2: params.add(format!("{p}.b2"), zeros::<F>(&[cfg.ff.max(d).min(d)])),
                ln2_g: params.add(format!("{p}.ln2_g"), ones::<F>(&[d])),
                ln2_b: params.add(format!("{p}.ln2_b"), zeros::<F>(&[d])),
            });
        }
        let pooler_w =
            params.add(format!("{prefix}.pooler_w"), init_normal::<F>(&mut rng, &[d, d]));
        let pooler_b = params.add(format!("{prefix}.pooler_b"), zeros::<F>(&[d]));
        Encoder { cfg, prefix: prefix.to_string(), tok_emb, pos_emb, blocks, pooler_w, pooler_b }
    }

    /// Binds to already-present parameters (e.g. a loaded checkpoint).
    pub fn attach<F: Scalar>(
        cfg: EncoderConfig,
        params: &ParamSet<F>,
        prefix: &str,
    ) -> Result<Self, TextError> {
        cfg.validate().map_err(TextError::MissingParam)?;
        let find = |name: String| {
            params.id_of(&name).ok_or_else(|| TextError::MissingParam(name.clone()))
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.block{l}");
            blocks.push(BlockIds {
                wq: find(format!("{p}.wq"))?,
                bq: find(format!("{p}.bq"))?,
                wk: find(format!("{p}.wk"))?,
                bk: find(format!("{p}.bk"))?,
                wv: find(format!("{p}.wv"))?,
                bv: find(format!("{p}.bv"))?,
                wo: find(format!("{p}.wo"))?,
                bo: find(format!("{p}.bo"))?,
                ln1_g: find(format!("{p}.ln1_g"))?,
                ln1_b: find(format!("{p}.ln1_b"))?,
                w1: find(format!("{p}.w1"))?,
                b1: find(format!("{p}.b1"))?,
                w2: find(format!("{p}.w2"))?,
                b2: find(format!("{p}.b2"))?,
                ln2_g: find(format!("{p}.ln2_g"))?,
                ln2_b: find(format!("{p}.ln2_b"))?,
            });
        }
        Ok(Encoder {
            tok_emb: find(format!("{prefix}.tok_emb"))?,
            pos_emb: find(format!("{prefix}.pos_emb"))?,
            blocks,
            pooler_w: find(format!("{prefix}.pooler_w"))?,
            pooler_b: find(format!("{prefix}.pooler_b"))?,
            cfg,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Contextual embeddings `[L, d_t]`; pad positions are excluded from
    /// every attention distribution via the prefix mask.
    pub fn encode_vars<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        seq: &TokenSequence,
        mode: &mut Mode,
    ) -> Result<Var, TextError> {
        let d = self.cfg.d_t;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let len = seq.ids.len();
        assert!(len <= self.cfg.max_len, "sequence longer than max_len");
        for &id in &seq.ids {
            if id >= self.cfg.vocab_size {
                return Err(TextError::IdOutOfRange { id, size: self.cfg.vocab_size });
            }
        }
        let tok = tape.param(params, self.tok_emb);
        let pos = tape.param(params, self.pos_emb);
        let te = tape.gather_rows(tok, &seq.ids);
        let positions: Vec<usize> = (0..len).collect();
        let pe = tape.gather_rows(pos, &positions);
        let mut x = tape.add(te, pe);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        for block in &self.blocks {
            let wq = tape.param(params, block.wq);
            let bq = tape.param(params, block.bq);
            let wk = tape.param(params, block.wk);
            let bk = tape.param(params, block.bk);
            let wv = tape.param(params, block.wv);
            let bv = tape.param(params, block.bv);
            let q0 = tape.matmul(x, wq);
            let q = tape.add_row(q0, bq);
            let k0 = tape.matmul(x, wk);
            let k = tape.add_row(k0, bk);
            let v0 = tape.matmul(x, wv);
            let v = tape.add_row(v0, bv);
            let mut head_ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let kt = tape.transpose(kh);
                let scores0 = tape.matmul(qh, kt);
                let scores = tape.scale(scores0, scale);
                let probs = tape.softmax_rows(scores, seq.valid);
                head_ctx.push(tape.matmul(probs, vh));
            }
            let ctx = tape.concat_cols(&head_ctx);
            let wo = tape.param(params, block.wo);
            let bo = tape.param(params, block.bo);
            let attn0 = tape.matmul(ctx, wo);
            let mut attn = tape.add_row(attn0, bo);
            if let Some(mask) = mode.dropout_mask::<F>(&[len, d]) {
                attn = tape.mul_mask(attn, mask);
            }
            let res1 = tape.add(x, attn);
            let g1 = tape.param(params, block.ln1_g);
            let b1n = tape.param(params, block.ln1_b);
            let x1 = tape.layer_norm(res1, g1, b1n, F::from_f64(1e-5));
            let w1 = tape.param(params, block.w1);
            let b1 = tape.param(params, block.b1);
            let w2 = tape.param(params, block.w2);
            let b2 = tape.param(params, block.b2);
            let h0 = tape.matmul(x1, w1);
            let h1 = tape.add_row(h0, b1);
            let h2 = tape.tanh(h1);
            let h3 = tape.matmul(h2, w2);
            let mut ffn = tape.add_row(h3, b2);
            if let Some(mask) = mode.dropout_mask::<F>(&[len, d]) {
                ffn = tape.mul_mask(ffn, mask);
            }
            let res2 = tape.add(x1, ffn);
            let g2 = tape.param(params, block.ln2_g);
            let b2n = tape.param(params, block.ln2_b);
            x = tape.layer_norm(res2, g2, b2n, F::from_f64(1e-5));
        }
        Ok(x)
    }

    /// `e^S = tanh(W e_0 + b)` from the CLS position only.
    pub fn pool_var<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
        embeddings: Var,
    ) -> Var {
        let cls_row = tape.gather_rows(embeddings, &[0]);
        let cls = tape.reshape(cls_row, &[self.cfg.d_t]);
        let w = tape.param(params, self.pooler_w);
        let b = tape.param(params, self.pooler_b);
        let wx = tape.matvec(w, cls);
        let pre = tape.add(wx, b);
        tape.tanh(pre)
    }

    /// Evaluation-mode encode; deterministic in (tokens, weights).
    pub fn encode<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        seq: &TokenSequence,
    ) -> Result<TokenEmbeddings<F>, TextError> {
        let mut tape = Tape::new();
        let emb = self.encode_vars(&mut tape, params, seq, &mut Mode::Eval)?;
        let v = tape.value(emb);
        let m = Array2::from_shape_vec(
            (seq.ids.len(), self.cfg.d_t),
            v.iter().cloned().collect(),
        )
        .unwrap();
        Ok(TokenEmbeddings { vectors: m })
    }

    /// Evaluation-mode pooled sentence vector.
    pub fn encode_pooled<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        seq: &TokenSequence,
    ) -> Result<PooledEmbedding<F>, TextError> {
        let mut tape = Tape::new();
        let emb = self.encode_vars(&mut tape, params, seq, &mut Mode::Eval)?;
        let pooled = self.pool_var(&mut tape, params, emb);
        let v = tape.value(pooled);
        Ok(PooledEmbedding { vector: Array1::from(v.iter().cloned().collect::<Vec<F>>()) })
    }
}

/// Linear vocabulary head for masked-token prediction.
pub struct MlmHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl MlmHead {
    pub fn init<F: Scalar>(
        cfg: &EncoderConfig,
        params: &mut ParamSet<F>,
        prefix: &str,
    ) -> Self {
        let mut rng = {
            use rand::SeedableRng;
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d4c4d)
        };
        MlmHead {
            w: params.add(
                format!("{prefix}.w"),
                init_normal::<F>(&mut rng, &[cfg.d_t, cfg.vocab_size]),
            ),
            b: params.add(format!("{prefix}.b"), zeros::<F>(&[cfg.vocab_size])),
        }
    }
}

/// One masked-language-model step over a batch: masks `ceil(rate * L)`
/// non-special positions per sequence and returns the mean cross-entropy of
/// recovering the originals.
#[allow(clippy::too_many_arguments)]
pub fn mlm_step<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    encoder: &Encoder,
    head: &MlmHead,
    vocab: &TokenVocab,
    batch: &[TokenSequence],
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TextError> {
    assert!(mask_rate > 0.0 && mask_rate < 1.0, "mask_rate must be in (0,1)");
    let mut losses = Vec::new();
    for seq in batch {
        let maskable: Vec<usize> =
            (0..seq.valid).filter(|&i| !vocab.is_special(seq.ids[i])).collect();
        if maskable.is_empty() {
            return Err(TextError::NoMaskablePosition);
        }
        let m = ((mask_rate * maskable.len() as f64).ceil() as usize).max(1);
        let mut order = maskable.clone();
        for j in (1..order.len()).rev() {
            let swap = rng.random_range(0..=j);
            order.swap(j, swap);
        }
        let chosen: Vec<usize> = order.into_iter().take(m).collect();
        let mut masked = seq.clone();
        for &pos in &chosen {
            masked.ids[pos] = vocab.mask;
        }
        let emb = encoder.encode_vars(tape, params, &masked, &mut Mode::Eval)?;
        let rows = tape.gather_rows(emb, &chosen);
        let w = tape.param(params, head.w);
        let b = tape.param(params, head.b);
        let logits0 = tape.matmul(rows, w);
        let logits = tape.add_row(logits0, b);
        for (r, &pos) in chosen.iter().enumerate() {
            let row = tape.gather_rows(logits, &[r]);
            let row = tape.reshape(row, &[vocab.len()]);
            let ls = tape.log_softmax(row);
            let picked = tape.pick(ls, seq.ids[pos]);
            losses.push(tape.neg(picked));
        }
    }
    let total = losses
        .iter()
        .skip(1)
        .fold(losses[0], |acc, &l| tape.add(acc, l));
    let inv = F::from_f64(1.0 / losses.len() as f64);
    Ok(tape.scale(total, inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_vocab() -> TokenVocab {
        TokenVocab::build(&["a cat sat".into(), "a dog ran".into()])
    }

    fn tiny_cfg(vocab: &TokenVocab) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            d_t: 16,
            layers: 2,
            heads: 2,
            ff: 32,
            max_len: 16,
            dropout: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn tokenize_wraps_with_cls_and_sep() {
        let v = tiny_vocab();
        let seq = tokenize(&v, "a cat", 16).unwrap();
        assert_eq!(seq.ids[0], v.cls);
        assert_eq!(*seq.ids.last().unwrap(), v.sep);
        assert_eq!(seq.ids.len(), 4);
        assert_eq!(seq.ids[1], v.id_of("a").unwrap());
        assert_eq!(seq.ids[2], v.id_of("cat").unwrap());
    }

    #[test]
    fn tokenize_truncates_to_max_len_keeping_sep() {
        let v = tiny_vocab();
        let long: String = vec!["cat"; 500].join(" ");
        let seq = tokenize(&v, &long, 128).unwrap();
        assert_eq!(seq.ids.len(), 128);
        assert_eq!(seq.ids[0], v.cls);
        assert_eq!(*seq.ids.last().unwrap(), v.sep);
    }

    #[test]
    fn tokenize_is_deterministic_and_unknowns_map_to_unk() {
        let v = tiny_vocab();
        let a = tokenize(&v, "a zebra!", 16).unwrap();
        let b = tokenize(&v, "a zebra!", 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids[2], v.unk);
        assert_eq!(tokenize(&v, "   ", 16).unwrap_err().to_string(), "empty text");
    }

    #[test]
    fn punctuation_splits_into_own_tokens() {
        let words = split_words("Where's the dog? A: garage");
        assert_eq!(words, vec!["where's", "the", "dog", "?", "a", ":", "garage"]);
    }

    #[test]
    fn special_tokens_survive_splitting() {
        let words = split_words("question [SEP] answer");
        assert_eq!(words, vec!["question", "[sep]", "answer"]);
    }

    #[test]
    fn encode_is_deterministic_in_eval_mode() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, "enc");
        let seq = tokenize(&v, "a cat sat", 16).unwrap();
        let a = enc.encode(&params, &seq).unwrap();
        let b = enc.encode(&params, &seq).unwrap();
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.vectors.nrows(), seq.ids.len());
    }

    #[test]
    fn position_encoding_distinguishes_permuted_tokens() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, "enc");
        let ab = tokenize(&v, "cat dog", 16).unwrap();
        let ba = tokenize(&v, "dog cat", 16).unwrap();
        let ea = enc.encode(&params, &ab).unwrap();
        let eb = enc.encode(&params, &ba).unwrap();
        assert_ne!(ea.vectors, eb.vectors);
    }

    #[test]
    fn pooled_components_stay_inside_tanh_range() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, "enc");
        let seq = tokenize(&v, "a dog ran", 16).unwrap();
        let pooled = enc.encode_pooled(&params, &seq).unwrap();
        assert!(pooled.vector.iter().all(|&x| x > -1.0 && x < 1.0));
    }

    #[test]
    fn pool_reads_only_the_cls_position() {
        // Zero pooler weight, zero CLS embedding contribution: pool output
        // depends only on position 0 of the embeddings.
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, "enc");
        let mut tape = Tape::new();
        let d = enc.cfg.d_t;
        let mut m = Array2::<f64>::zeros((3, d));
        m.row_mut(1).fill(7.0);
        let emb = tape.constant(m.clone().into_dyn());
        let p1 = enc.pool_var(&mut tape, &params, emb);
        m.row_mut(2).fill(-3.0); // change a non-CLS row
        let mut tape2 = Tape::new();
        let emb2 = tape2.constant(m.into_dyn());
        let p2 = enc.pool_var(&mut tape2, &params, emb2);
        assert_eq!(tape.value(p1), tape2.value(p2));
    }

    #[test]
    fn pad_invariance_beyond_tolerance() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg, &mut params, "enc");
        let seq = tokenize(&v, "a cat sat", 16).unwrap();
        let padded = seq.pad_to(&v, 9);
        let plain = enc.encode(&params, &seq).unwrap();
        let with_pad = enc.encode(&params, &padded).unwrap();
        for i in 0..seq.valid {
            for j in 0..enc.cfg.d_t {
                assert!(
                    (plain.vectors[(i, j)] - with_pad.vectors[(i, j)]).abs() < 1e-6,
                    "position {i} comp {j} changed under padding"
                );
            }
        }
    }

    #[test]
    fn uniform_mlm_predictor_loss_is_ln_vocab() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg.clone(), &mut params, "enc");
        let head = MlmHead::init(&cfg, &mut params, "mlm");
        // Zero head weights -> uniform distribution over the vocab.
        *params.value_mut(head.w) = zeros::<f64>(&[cfg.d_t, v.len()]);
        let seq = tokenize(&v, "a cat sat", 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let loss =
            mlm_step(&mut tape, &params, &enc, &head, &v, &[seq], 0.5, &mut rng).unwrap();
        let expect = (v.len() as f64).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn mlm_masks_ceil_of_rate_times_length() {
        // 10 maskable tokens at rate 0.15 -> exactly 2 masked positions, so
        // the loss sums over 2 terms; verify via a sequence with known ids.
        let v = tiny_vocab();
        let text = vec!["cat"; 10].join(" ");
        let seq = tokenize(&v, &text, 32).unwrap();
        let maskable = seq.ids.iter().filter(|&&id| !v.is_special(id)).count();
        assert_eq!(maskable, 10);
        assert_eq!((0.15f64 * 10.0).ceil() as usize, 2);
    }

    #[test]
    fn mlm_errors_without_maskable_positions() {
        let v = tiny_vocab();
        let cfg = tiny_cfg(&v);
        let mut params: ParamSet<f64> = ParamSet::new();
        let enc = Encoder::init(cfg.clone(), &mut params, "enc");
        let head = MlmHead::init(&cfg, &mut params, "mlm");
        let seq = TokenSequence { ids: vec![v.cls, v.sep], valid: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let err = mlm_step(&mut tape, &params, &enc, &head, &v, &[seq], 0.15, &mut rng)
            .unwrap_err();
        assert!(matches!(err, TextError::NoMaskablePosition));
    }
}
