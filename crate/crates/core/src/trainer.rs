//! Training loops for the three objectives: causal LM, triple scorer and
//! fused LM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::FusedModel;
use crate::kg_store::KnowledgeGraph;
use crate::linker::{EntityLexicon, LinkedSequence};
use crate::optim::{run_steps, OptimOptions};
use crate::text::{TokenId, Vocab, EOS};
use crate::transformer::{self, next_token_loss, Batch, NoHooks, TransformerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimOptions,
    pub seed: u64,
}

/// Encoded sentences, each followed by [EOS].
pub fn encode_corpus<S: AsRef<str>>(vocab: &Vocab, lines: &[S]) -> Vec<Vec<TokenId>> {
    lines
        .iter()
        .map(|l| {
            let mut ids = vocab.encode_ids(l.as_ref());
            ids.push(EOS);
            ids
        })
        .filter(|ids| ids.len() > 1)
        .collect()
}

/// Index batches for every epoch, shuffled with one seeded stream.
pub fn batch_schedule(n: usize, epochs: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    out
}

pub(crate) fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64))
}

/// Next-token training of a causal model. Returns per-step losses.
pub fn train_lm(model: &mut TransformerModel, data: &[Vec<TokenId>], opts: &TrainOptions) -> Result<Vec<f64>> {
    let schedule = batch_schedule(data.len(), opts.epochs, opts.batch_size, opts.seed);
    let cfg = model.config.clone();
    run_steps(&mut model.params, &|_| true, &opts.optim, schedule.len(), |step, tape, p| {
        let seqs: Vec<Vec<TokenId>> = schedule[step].iter().map(|&i| data[i].clone()).collect();
        let batch = Batch::from_sequences(&seqs);
        let mut rng = dropout_rng(opts.seed, step);
        let drop: Option<&mut dyn rand::RngCore> = (cfg.dropout > 0.0).then_some(&mut rng as _);
        let out = transformer::forward(&cfg, tape, p, &batch, &mut NoHooks, drop)?;
        next_token_loss(tape, out.logits, &batch)
    })
}

/// Link every training sentence once.
pub fn link_corpus(lexicon: &EntityLexicon, vocab: &Vocab, data: &[Vec<TokenId>]) -> Vec<LinkedSequence> {
    data.iter()
        .map(|ids| lexicon.link(&crate::text::TokenizedSequence::from_ids(ids.clone()), vocab))
        .collect()
}

/// Which fused-model tensors receive updates.
pub fn fused_trainable(fm: &FusedModel, train_base: bool) -> impl Fn(&str) -> bool + 'static {
    let cotrain = fm.fusion.cotrain_kg;
    move |name: &str| {
        if name.starts_with("kg.") {
            cotrain
        } else if name.starts_with("fusion.") {
            true
        } else {
            train_base
        }
    }
}

/// Next-token training through the fusion path.
pub fn train_fused(
    fm: &mut FusedModel,
    data: &[LinkedSequence],
    g: &KnowledgeGraph,
    opts: &TrainOptions,
    train_base: bool,
) -> Result<Vec<f64>> {
    let schedule = batch_schedule(data.len(), opts.epochs, opts.batch_size, opts.seed);
    let trainable = fused_trainable(fm, train_base);
    let model = fm.clone();
    let dropout = fm.base_config.dropout;
    run_steps(&mut fm.params, &trainable, &opts.optim, schedule.len(), |step, tape, p| {
        let seqs: Vec<LinkedSequence> = schedule[step].iter().map(|&i| data[i].clone()).collect();
        let mut rng = dropout_rng(opts.seed, step);
        let drop: Option<&mut dyn rand::RngCore> = (dropout > 0.0).then_some(&mut rng as _);
        let (out, batch, _) = model.forward(tape, p, &seqs, g, drop)?;
        next_token_loss(tape, out.logits, &batch)
    })
}
