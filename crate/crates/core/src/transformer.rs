//! Small pre-LayerNorm transformer, usable as a bidirectional encoder (triple
//! scorer) or as a causal decoder LM. Token embeddings are tied to the LM head.

use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::text::{TokenId, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Bidirectional => "bidirectional",
            AttentionMode::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(AttentionMode::Bidirectional),
            "causal" => Ok(AttentionMode::Causal),
            _ => Err(Error::Config(format!("unknown attention mode `{s}`"))),
        }
    }
}

/// Number of segment markers used by serialized triples.
pub const NUM_SEGMENTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub mode: AttentionMode,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, d_model 64, 4 heads.
    pub fn desk(vocab_size: usize, mode: AttentionMode) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 64,
            mode,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq {} must be >= 2", self.max_seq));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Expected parameter names and shapes, sorted by name.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut m = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq, d]),
            ("lm_head.bias".to_string(), vec![self.vocab_size]),
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
        ];
        if self.mode == AttentionMode::Bidirectional {
            m.push(("seg_emb".to_string(), vec![NUM_SEGMENTS, d]));
        }
        for l in 0..self.n_layers {
            let p = layer_prefix(l);
            for (name, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("ffn.w1", vec![d, f]),
                ("ffn.b1", vec![f]),
                ("ffn.w2", vec![f, d]),
                ("ffn.b2", vec![d]),
            ] {
                m.push((format!("{p}.{name}"), shape));
            }
        }
        m.sort();
        m
    }

    pub fn num_parameters(&self) -> usize {
        self.manifest()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

fn layer_prefix(l: usize) -> String {
    format!("layers.{l:02}")
}

/// Initial value for a named parameter: LayerNorm gains 1, biases 0,
/// everything else N(0, 0.02).
pub fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor {
    if name.ends_with(".gamma") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with(".beta") || name.ends_with("bias") || is_bias(name) {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, 0.02, rng)
    }
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|last| last.starts_with('b') && last.len() <= 3)
}

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[batch, len]`.
    pub ids: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
    pub segments: Option<Vec<usize>>,
}

impl Batch {
    /// Right-pads with [PAD] to the longest sequence.
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        Batch {
            ids,
            batch: seqs.len(),
            len,
            segments: None,
        }
    }

    pub fn with_segments(mut self, segs: &[Vec<usize>]) -> Self {
        let mut out = vec![0; self.batch * self.len];
        for (b, s) in segs.iter().enumerate() {
            for (i, &m) in s.iter().enumerate().take(self.len) {
                out[b * self.len + i] = m;
            }
        }
        self.segments = Some(out);
        self
    }

    pub fn token(&self, b: usize, i: usize) -> TokenId {
        self.ids[b * self.len + i]
    }

    pub fn is_pad(&self, b: usize, i: usize) -> bool {
        self.token(b, i) == PAD
    }
}

/// Extension points for knowledge fusion.
pub trait ForwardHook {
    /// May replace the hidden state leaving layer `layer`; the shape must be
    /// preserved.
    fn after_layer(&mut self, _tape: &mut Tape, _layer: usize, h: Var) -> Result<Var> {
        Ok(h)
    }

    /// Extra `[batch, len, d_model]` contribution added to the output
    /// projection of `layer`'s self-attention. `normed` is the LayerNorm'd
    /// block input.
    fn extra_attention(&mut self, _tape: &mut Tape, _layer: usize, _normed: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl ForwardHook for NoHooks {}

pub struct ForwardOutput {
    /// Residual stream after each layer (post-hook), `[batch, len, d_model]`.
    pub hidden: Vec<Var>,
    /// After the final LayerNorm.
    pub final_hidden: Var,
    /// `[batch, len, vocab]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl TransformerModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.manifest() {
            let t = init_tensor(&name, &shape, rng);
            params.insert(name, t);
        }
        Ok(TransformerModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let want = config.manifest();
        let have: Vec<_> = params
            .manifest()
            .into_iter()
            .filter(|(n, _)| want.iter().any(|(w, _)| w == n))
            .collect();
        if have != want {
            return Err(Error::Checkpoint(
                "parameter manifest does not match the model config".into(),
            ));
        }
        Ok(TransformerModel { config, params })
    }

    /// Attention blocking mask `[batch, len, len]`: padded keys always,
    /// future keys in causal mode.
    pub fn attention_mask(&self, batch: &Batch) -> Rc<Vec<bool>> {
        attention_mask(&self.config, batch)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        hook: &mut dyn ForwardHook,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        forward(&self.config, tape, p, batch, hook, dropout_rng)
    }

    /// Logits without gradient tracking, `[batch, len, vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, batch, &mut NoHooks, None)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Greedy continuation of `prompt`.
    pub fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        if self.config.mode != AttentionMode::Causal {
            return Err(Error::invalid("generation requires a causal model"));
        }
        greedy_decode(prompt, max_new, self.config.max_seq, |ids| {
            let logits = self.logits(&Batch::from_sequences(&[ids.to_vec()]))?;
            let v = self.config.vocab_size;
            Ok(logits.data()[(ids.len() - 1) * v..ids.len() * v].to_vec())
        })
    }
}

/// Attention blocking mask `[batch, len, len]`: padded keys always,
/// future keys in causal mode.
pub fn attention_mask(cfg: &ModelConfig, batch: &Batch) -> Rc<Vec<bool>> {
    let (b, t) = (batch.batch, batch.len);
    let causal = cfg.mode == AttentionMode::Causal;
    let mut m = vec![false; b * t * t];
    for bi in 0..b {
        for i in 0..t {
            for j in 0..t {
                m[(bi * t + i) * t + j] = batch.is_pad(bi, j) || (causal && j > i);
            }
        }
    }
    Rc::new(m)
}

/// Forward pass of a model with configuration `cfg` over bound parameters.
/// Dropout is active only when `dropout_rng` is given.
pub fn forward(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &Bound,
    batch: &Batch,
    hook: &mut dyn ForwardHook,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<ForwardOutput> {
    let (b, t, d) = (batch.batch, batch.len, cfg.d_model);
    if t == 0 || b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if t > cfg.max_seq {
        return Err(Error::invalid(format!(
            "sequence length {t} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::UnknownToken(bad));
    }
    let rate = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let tok = tape.embedding(p.get("tok_emb")?, &batch.ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = tape.embedding(p.get("pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    if cfg.mode == AttentionMode::Bidirectional {
        let segs = batch.segments.clone().unwrap_or_else(|| vec![0; b * t]);
        if segs.iter().any(|&s| s >= NUM_SEGMENTS) {
            return Err(Error::invalid("segment marker out of range"));
        }
        let seg = tape.embedding(p.get("seg_emb")?, &segs)?;
        x = tape.add(x, seg)?;
    }
    x = tape.reshape(x, &[b, t, d])?;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        x = tape.dropout(x, rate, rng)?;
    }

    let mask = attention_mask(cfg, batch);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = layer_prefix(l);
        let g = |n: &str| p.get(&format!("{pre}.{n}"));

        let a = layer_norm_affine(tape, x, g("ln1.gamma")?, g("ln1.beta")?)?;
        let heads = self_attention_heads(tape, a, &g, cfg, mask.clone())?;
        let cat = tape.concat(&heads)?;
        let mut att = linear(tape, cat, g("attn.wo")?, g("attn.bo")?)?;
        if let Some(extra) = hook.extra_attention(tape, l, a)? {
            if tape.shape(extra) != tape.shape(att) {
                return Err(Error::shape("extra_attention hook", tape.shape(att), tape.shape(extra)));
            }
            att = tape.add(att, extra)?;
        }
        if let Some(rng) = dropout_rng.as_deref_mut() {
            att = tape.dropout(att, rate, rng)?;
        }
        x = tape.add(x, att)?;

        let f = layer_norm_affine(tape, x, g("ln2.gamma")?, g("ln2.beta")?)?;
        let f = linear(tape, f, g("ffn.w1")?, g("ffn.b1")?)?;
        let f = tape.gelu(f)?;
        let mut f = linear(tape, f, g("ffn.w2")?, g("ffn.b2")?)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            f = tape.dropout(f, rate, rng)?;
        }
        x = tape.add(x, f)?;

        let replaced = hook.after_layer(tape, l, x)?;
        if tape.shape(replaced) != tape.shape(x) {
            return Err(Error::shape("after_layer hook", tape.shape(x), tape.shape(replaced)));
        }
        x = replaced;
        hidden.push(x);
    }

    let final_hidden = layer_norm_affine(tape, x, p.get("ln_f.gamma")?, p.get("ln_f.beta")?)?;
    let emb_t = tape.transpose(p.get("tok_emb")?)?;
    let logits = tape.matmul(final_hidden, emb_t)?;
    let logits = tape.add(logits, p.get("lm_head.bias")?)?;
    Ok(ForwardOutput {
        hidden,
        final_hidden,
        logits,
    })
}

/// Greedy decoding loop shared by the base and fused models. `next_logits`
/// returns the vocabulary logits at the last position of its input. Stops
/// after [EOS] (which is kept), after `max_new` tokens, or at `max_seq`.
pub fn greedy_decode<F>(prompt: &[TokenId], max_new: usize, max_seq: usize, mut next_logits: F) -> Result<Vec<TokenId>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    if prompt.len() > max_seq {
        return Err(Error::invalid(format!(
            "prompt length {} exceeds max_seq {max_seq}",
            prompt.len()
        )));
    }
    let mut ids = prompt.to_vec();
    for _ in 0..max_new {
        if ids.len() >= max_seq {
            break;
        }
        let next = argmax(&next_logits(&ids)?);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let n = tape.mul(n, gamma)?;
    tape.add(n, beta)
}

/// Per-head self-attention outputs `[batch, len, head_dim]`.
fn self_attention_heads(
    tape: &mut Tape,
    a: Var,
    g: &dyn Fn(&str) -> Result<Var>,
    cfg: &ModelConfig,
    mask: Rc<Vec<bool>>,
) -> Result<Vec<Var>> {
    let q = linear(tape, a, g("attn.wq")?, g("attn.bq")?)?;
    let k = linear(tape, a, g("attn.wk")?, g("attn.bk")?)?;
    let v = linear(tape, a, g("attn.wv")?, g("attn.bv")?)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, lo, hi)?;
        let kh = tape.slice(k, lo, hi)?;
        let vh = tape.slice(v, lo, hi)?;
        let (_, out) = attend(tape, qh, kh, vh, mask.clone())?;
        heads.push(out);
    }
    Ok(heads)
}

/// Scaled dot-product attention. Returns `(weights, output)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, blocked: Rc<Vec<bool>>) -> Result<(Var, Var)> {
    let dh = *tape.shape(q).last().unwrap();
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let w = tape.softmax_masked(scores, Some(blocked))?;
    let out = tape.matmul(w, v)?;
    Ok((w, out))
}

/// Mean next-token cross-entropy; position `i` predicts token `i + 1`, and
/// [PAD] targets are skipped.
pub fn next_token_loss(tape: &mut Tape, logits: Var, batch: &Batch) -> Result<Var> {
    let (b, t) = (batch.batch, batch.len);
    let v = *tape.shape(logits).last().unwrap();
    let flat = tape.reshape(logits, &[b * t, v])?;
    tape.cross_entropy(flat, &shifted_targets(batch), Some(PAD))
}

pub fn shifted_targets(batch: &Batch) -> Vec<TokenId> {
    let (b, t) = (batch.batch, batch.len);
    let mut targets = vec![PAD; b * t];
    for bi in 0..b {
        for i in 0..t.saturating_sub(1) {
            targets[bi * t + i] = batch.token(bi, i + 1);
        }
    }
    targets
}
