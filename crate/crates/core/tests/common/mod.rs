#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgfuse::autodiff::{grad_check_params, Coords, GradCheckReport, Tape, Tensor, Var};
use kgfuse::fusion::{FusedModel, FusionConfig, FusionMode};
use kgfuse::kg_store::KnowledgeGraph;
use kgfuse::kgbert::{labeled_examples, KgEmbeddingTable, SerializedTriple, TripleScorer};
use kgfuse::linker::{EntityLexicon, LinkedSequence};
use kgfuse::params::ParamSet;
use kgfuse::synth::{self, SynthSpec};
use kgfuse::text::Vocab;
use kgfuse::trainer::{encode_corpus, link_corpus};
use kgfuse::transformer::{next_token_loss, AttentionMode, ModelConfig, TransformerModel};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn check(params: ParamSet, loss: impl Fn(&mut Tape, &kgfuse::params::Bound) -> kgfuse::Result<Var>, seed: u64) -> GradCheckReport {
    grad_check_params(&params, loss, GRAD_EPS, GRAD_TOL, Coords::All, &mut rng(seed)).unwrap()
}

fn params(items: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in items {
        p.insert(n, t);
    }
    p
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> kgfuse::Result<Var> {
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng(seed ^ 0xabcd));
    let w = tape.constant(w);
    let z = tape.mul(y, w)?;
    tape.sum(z)
}

/// Finite-difference check of every differentiable tape op at one seed.
/// Returns `(op name, report)` pairs.
pub fn op_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    let (b, m, k, n) = (2, 1 + r.random_range(1..4), 1 + r.random_range(1..4), 1 + r.random_range(1..4));
    let mut out = Vec::new();
    let mut run = |name: &'static str, p: ParamSet, f: &dyn Fn(&mut Tape, &kgfuse::params::Bound) -> kgfuse::Result<Var>| {
        out.push((name, check(p, |t, bnd| f(t, bnd), seed)));
    };
    let ab = |r: &mut ChaCha8Rng, sa: &[usize], sb: &[usize]| params(vec![("a", randn(sa, r)), ("b", randn(sb, r))]);

    run("add", ab(&mut r, &[b, m, n], &[n]), &|t, p| {
        let y = t.add(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("sub", ab(&mut r, &[m, n], &[m, 1]), &|t, p| {
        let y = t.sub(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("mul", ab(&mut r, &[b, m, n], &[b, 1, n]), &|t, p| {
        let y = t.mul(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("affine", ab(&mut r, &[m, n], &[1]), &|t, p| {
        let y = t.affine(p.get("a")?, -1.7, 0.3)?;
        let y = t.scale(y, 0.5)?;
        project(t, y, seed)
    });
    run("matmul", ab(&mut r, &[m, k], &[k, n]), &|t, p| {
        let y = t.matmul(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("matmul_batched", ab(&mut r, &[b, m, k], &[b, k, n]), &|t, p| {
        let y = t.matmul(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("matmul_shared_rhs", ab(&mut r, &[b, m, k], &[k, n]), &|t, p| {
        let y = t.matmul(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("matmul_shared_lhs", ab(&mut r, &[m, k], &[b, k, n]), &|t, p| {
        let y = t.matmul(p.get("a")?, p.get("b")?)?;
        project(t, y, seed)
    });
    run("transpose", params(vec![("a", randn(&[b, m, n], &mut r))]), &|t, p| {
        let y = t.transpose(p.get("a")?)?;
        project(t, y, seed)
    });
    run("reshape", params(vec![("a", randn(&[b, m, n], &mut r))]), &|t, p| {
        let y = t.reshape(p.get("a")?, &[b * m, n])?;
        project(t, y, seed)
    });
    run("concat_slice", ab(&mut r, &[m, n], &[m, k]), &|t, p| {
        let y = t.concat(&[p.get("a")?, p.get("b")?])?;
        let y = t.slice(y, 1, n + k)?;
        project(t, y, seed)
    });
    run("sum_mean", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let a = p.get("a")?;
        let sq = t.mul(a, a)?;
        let s = t.sum(sq)?;
        let mu = t.mean(a)?;
        let y = t.mul(s, mu)?;
        t.sum(y)
    });
    run("relu", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let y = t.relu(p.get("a")?)?;
        project(t, y, seed)
    });
    run("gelu", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let y = t.gelu(p.get("a")?)?;
        project(t, y, seed)
    });
    run("sigmoid", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let y = t.sigmoid(p.get("a")?)?;
        project(t, y, seed)
    });
    run("tanh", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let y = t.tanh(p.get("a")?)?;
        project(t, y, seed)
    });
    run("softmax", params(vec![("a", randn(&[b, m, n + 1], &mut r))]), &|t, p| {
        let y = t.softmax(p.get("a")?)?;
        project(t, y, seed)
    });
    let blocked: Rc<Vec<bool>> = Rc::new((0..m * (n + 1)).map(|i| i % (n + 1) == 0 || (i / (n + 1) == 0 && i % 2 == 1)).collect());
    run("softmax_masked", params(vec![("a", randn(&[m, n + 1], &mut r))]), &|t, p| {
        let y = t.softmax_masked(p.get("a")?, Some(blocked.clone()))?;
        project(t, y, seed)
    });
    run("layer_norm", params(vec![("a", randn(&[m, n + 2], &mut r))]), &|t, p| {
        let y = t.layer_norm(p.get("a")?)?;
        project(t, y, seed)
    });
    let ids: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..k + 1)).collect();
    run("embedding", params(vec![("a", randn(&[k + 1, n], &mut r))]), &|t, p| {
        let y = t.embedding(p.get("a")?, &ids)?;
        project(t, y, seed)
    });
    let targets: Vec<usize> = (0..b * m).map(|i| if i == 0 { 0 } else { r.random_range(0..n + 1) }).collect();
    run("cross_entropy", params(vec![("a", randn(&[b * m, n + 1], &mut r))]), &|t, p| {
        t.cross_entropy(p.get("a")?, &targets, Some(0))
    });
    let labels: Vec<f64> = (0..m).map(|i| (i % 2) as f64).collect();
    run("bce_with_logits", params(vec![("a", randn(&[m, 1], &mut r))]), &|t, p| {
        t.bce_with_logits(p.get("a")?, &labels)
    });
    run("dropout", params(vec![("a", randn(&[m, n], &mut r))]), &|t, p| {
        let y = t.dropout(p.get("a")?, 0.3, &mut rng(seed ^ 0xd00d))?;
        project(t, y, seed)
    });
    out
}

/// Small synthetic world for fused-model tests.
pub struct World {
    pub graph: KnowledgeGraph,
    pub vocab: Vocab,
    pub lexicon: EntityLexicon,
    pub linked: Vec<LinkedSequence>,
}

pub fn world(seed: u64, entities: usize) -> World {
    let spec = SynthSpec {
        entities,
        relations: 3,
        types: 3,
        triples_per_entity: 1,
        seed,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec).unwrap();
    let vocab = kgfuse::pipeline::build_vocab(&data).unwrap();
    let lexicon = EntityLexicon::build(&data.graph, None, true).unwrap();
    let mut lines = data.pretrain_corpus.clone();
    lines.extend(data.fusion_corpus.iter().cloned());
    let linked = link_corpus(&lexicon, &vocab, &encode_corpus(&vocab, &lines));
    World {
        graph: data.graph,
        vocab,
        lexicon,
        linked,
    }
}

pub fn tiny_config(vocab: usize, mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 16,
        mode,
        dropout: 0.0,
    }
}

pub fn random_table(g: &KnowledgeGraph, d: usize, seed: u64) -> KgEmbeddingTable {
    let mut r = rng(seed);
    KgEmbeddingTable {
        d_kg: d,
        entities: Tensor::randn(&[g.num_entities(), d], 1.0, &mut r),
        relations: Tensor::randn(&[g.num_relations(), d], 1.0, &mut r),
    }
}

/// A fused model over the tiny config with every parameter randomized.
pub fn fused_model(w: &World, mode: FusionMode, seed: u64, alpha: f64) -> FusedModel {
    let mut r = rng(seed);
    let base = TransformerModel::init(tiny_config(w.vocab.len(), AttentionMode::Causal), &mut r).unwrap();
    let mut fm = FusedModel::init(&base, &random_table(&w.graph, 8, seed), FusionConfig::new(mode, &base.config), &mut r).unwrap();
    for (_, t) in fm.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.1 * r.random::<f64>();
        }
    }
    fm.set_alpha(alpha).unwrap();
    fm
}

/// Gradient check of the next-token loss through the fusion path, probing
/// `per_tensor` coordinates of every parameter.
pub fn fused_grad_check(w: &World, mode: FusionMode, seed: u64, per_tensor: usize) -> GradCheckReport {
    let fm = fused_model(w, mode, seed, 0.5);
    let mut r = rng(seed);
    let mut seqs: Vec<LinkedSequence> = Vec::new();
    while seqs.len() < 2 {
        let s = &w.linked[r.random_range(0..w.linked.len())];
        if !s.alignments.is_empty() {
            seqs.push(s.clone());
        }
    }
    let g = &w.graph;
    grad_check_params(
        &fm.params,
        |tape, p| {
            let (out, batch, _) = fm.forward(tape, p, &seqs, g, None)?;
            next_token_loss(tape, out.logits, &batch)
        },
        GRAD_EPS,
        GRAD_TOL,
        Coords::SamplePerTensor(per_tensor),
        &mut r,
    )
    .unwrap()
}

/// Gradient check of the scorer's binary cross-entropy.
pub fn scorer_grad_check(w: &World, seed: u64, per_tensor: usize) -> GradCheckReport {
    let mut r = rng(seed);
    let scorer = TripleScorer::init(tiny_config(w.vocab.len(), AttentionMode::Bidirectional), &mut r).unwrap();
    let triples: Vec<_> = w.graph.triples()[..3].to_vec();
    let ex = labeled_examples(&w.graph, &w.vocab, &triples, 1, &mut r).unwrap();
    let items: Vec<SerializedTriple> = ex.iter().map(|e| e.serialized.clone()).collect();
    let labels: Vec<f64> = ex.iter().map(|e| f64::from(u8::from(e.positive))).collect();
    grad_check_params(
        scorer.params(),
        |tape, p| {
            let z = scorer.logits_var(tape, p, &items)?;
            tape.bce_with_logits(z, &labels)
        },
        GRAD_EPS,
        GRAD_TOL,
        Coords::SamplePerTensor(per_tensor),
        &mut r,
    )
    .unwrap()
}
