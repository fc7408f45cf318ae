//! Triple plausibility scoring over `[CLS] s [SEP] r [SEP] o [SEP]`
//! serializations, and export of entity/relation vectors from the encoder.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg_store::{KnowledgeGraph, Side, Triple};
use crate::optim::{run_steps, OptimOptions};
use crate::trainer::dropout_rng;
use crate::params::{Bound, ParamSet};
use crate::text::{TokenId, Vocab, CLS, SEP};
use crate::transformer::{init_tensor, AttentionMode, Batch, ModelConfig, NoHooks, TransformerModel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializedTriple {
    pub ids: Vec<TokenId>,
    /// 0 subject, 1 relation, 2 object; each [SEP] carries the marker of the
    /// span it closes and [CLS] carries 0.
    pub segments: Vec<usize>,
}

fn label_ids(vocab: &Vocab, label: &str, what: &str) -> Result<Vec<TokenId>> {
    let ids = vocab.encode_ids(label);
    if ids.is_empty() {
        return Err(Error::invalid(format!("{what} label `{label}` has no tokens")));
    }
    Ok(ids)
}

pub fn serialize_triple(g: &KnowledgeGraph, t: &Triple, vocab: &Vocab) -> Result<SerializedTriple> {
    g.check_entity(t.subject)?;
    g.check_entity(t.object)?;
    if t.relation.index() >= g.num_relations() {
        return Err(Error::UnknownRelation(format!("#{}", t.relation.0)));
    }
    let spans = [
        label_ids(vocab, g.entity_label(t.subject), "subject")?,
        label_ids(vocab, g.relation_label(t.relation), "relation")?,
        label_ids(vocab, g.entity_label(t.object), "object")?,
    ];
    let mut ids = vec![CLS];
    let mut segments = vec![0];
    for (seg, span) in spans.iter().enumerate() {
        ids.extend(span);
        ids.push(SEP);
        segments.extend(std::iter::repeat_n(seg, span.len() + 1));
    }
    Ok(SerializedTriple { ids, segments })
}

/// `[CLS] label [SEP]` with a constant segment marker.
fn serialize_label(vocab: &Vocab, label: &str, segment: usize) -> Result<(Vec<TokenId>, Vec<usize>)> {
    let mut ids = vec![CLS];
    ids.extend(label_ids(vocab, label, "entity")?);
    ids.push(SEP);
    let n = ids.len();
    Ok((ids, vec![segment; n]))
}

/// Bidirectional encoder with a logistic head on the [CLS] state.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleScorer {
    pub model: TransformerModel,
}

const HEAD_W: &str = "score_head.w";
const HEAD_B: &str = "score_head.b";

impl TripleScorer {
    pub fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut m = cfg.manifest();
        m.push((HEAD_B.to_string(), vec![1]));
        m.push((HEAD_W.to_string(), vec![cfg.d_model, 1]));
        m.sort();
        m
    }

    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.mode != AttentionMode::Bidirectional {
            return Err(Error::invalid("triple scorer requires a bidirectional model"));
        }
        let mut model = TransformerModel::init(cfg.clone(), rng)?;
        model.params.insert(HEAD_B, Tensor::zeros(&[1]));
        model.params.insert(HEAD_W, init_tensor(HEAD_W, &[cfg.d_model, 1], rng));
        Ok(TripleScorer { model })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        if cfg.mode != AttentionMode::Bidirectional {
            return Err(Error::invalid("triple scorer requires a bidirectional model"));
        }
        if params.manifest() != Self::manifest(&cfg) {
            return Err(Error::Checkpoint("parameter manifest does not match a triple scorer".into()));
        }
        Ok(TripleScorer {
            model: TransformerModel { config: cfg, params },
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn check_mode(&self) -> Result<()> {
        if self.model.config.mode != AttentionMode::Bidirectional {
            return Err(Error::invalid("triple scoring requires a bidirectional model"));
        }
        Ok(())
    }

    fn batch(items: &[SerializedTriple]) -> Batch {
        let ids: Vec<Vec<TokenId>> = items.iter().map(|s| s.ids.clone()).collect();
        let segs: Vec<Vec<usize>> = items.iter().map(|s| s.segments.clone()).collect();
        Batch::from_sequences(&ids).with_segments(&segs)
    }

    /// [CLS] state after the final LayerNorm, `[batch, d_model]`.
    fn cls_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let out = self.model.forward(tape, p, batch, &mut NoHooks, dropout_rng)?;
        let (b, t, d) = (batch.batch, batch.len, self.model.config.d_model);
        let flat = tape.reshape(out.final_hidden, &[b * t, d])?;
        let rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        tape.embedding(flat, &rows)
    }

    /// Plausibility logits `[batch, 1]` on the tape.
    pub fn logits_var(&self, tape: &mut Tape, p: &Bound, items: &[SerializedTriple]) -> Result<Var> {
        self.logits_dropout(tape, p, items, None)
    }

    fn logits_dropout(
        &self,
        tape: &mut Tape,
        p: &Bound,
        items: &[SerializedTriple],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_mode()?;
        let cls = self.cls_var(tape, p, &Self::batch(items), dropout_rng)?;
        let y = tape.matmul(cls, p.get(HEAD_W)?)?;
        tape.add(y, p.get(HEAD_B)?)
    }

    pub fn score_logits(&self, items: &[SerializedTriple]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.model.params.bind_frozen(&mut tape);
        let y = self.logits_var(&mut tape, &p, items)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Probabilities `sigmoid(logit)` for each item.
    pub fn score_batch(&self, items: &[SerializedTriple]) -> Result<Vec<f64>> {
        Ok(self.score_logits(items)?.into_iter().map(sigmoid).collect())
    }

    pub fn score(&self, s: &SerializedTriple) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(s))?[0])
    }

    fn cls_states(&self, seqs: Vec<(Vec<TokenId>, Vec<usize>)>) -> Result<Tensor> {
        let (ids, segs): (Vec<_>, Vec<_>) = seqs.into_iter().unzip();
        let batch = Batch::from_sequences(&ids).with_segments(&segs);
        let mut tape = Tape::new();
        let p = self.model.params.bind_frozen(&mut tape);
        let cls = self.cls_var(&mut tape, &p, &batch, None)?;
        Ok(tape.value(cls).clone())
    }
}

#[derive(Clone, Debug)]
pub struct ScorerTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimOptions,
    pub seed: u64,
    pub negatives_per_positive: usize,
}

impl Default for ScorerTrainOptions {
    fn default() -> Self {
        ScorerTrainOptions {
            epochs: 30,
            batch_size: 16,
            optim: OptimOptions::adam(1e-3),
            seed: 0,
            negatives_per_positive: 1,
        }
    }
}

/// One training example: a serialized triple and its 0/1 label.
#[derive(Clone, Debug)]
pub struct LabeledTriple {
    pub triple: Triple,
    pub positive: bool,
    pub serialized: SerializedTriple,
}

/// Positives from `triples`, each followed by `ratio` corruptions with the
/// side drawn uniformly. Corruptions are checked against the whole graph.
pub fn labeled_examples<R: Rng + ?Sized>(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    triples: &[Triple],
    ratio: usize,
    rng: &mut R,
) -> Result<Vec<LabeledTriple>> {
    let mut out = Vec::with_capacity(triples.len() * (1 + ratio));
    for t in triples {
        out.push(LabeledTriple {
            triple: *t,
            positive: true,
            serialized: serialize_triple(g, t, vocab)?,
        });
        for _ in 0..ratio {
            let side = if rng.random::<bool>() { Side::Head } else { Side::Tail };
            let c = g.corrupt_triple(t, side, rng)?;
            out.push(LabeledTriple {
                triple: c,
                positive: false,
                serialized: serialize_triple(g, &c, vocab)?,
            });
        }
    }
    Ok(out)
}

/// Binary cross-entropy training on `train` positives with fresh corruptions
/// every epoch. Returns the per-step loss curve.
pub fn train_scorer(
    g: &KnowledgeGraph,
    vocab: &Vocab,
    scorer: &mut TripleScorer,
    train: &[Triple],
    opts: &ScorerTrainOptions,
) -> Result<Vec<f64>> {
    if train.is_empty() || opts.epochs == 0 {
        return Ok(Vec::new());
    }
    let bs = opts.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<Triple> = train.to_vec();
    let mut batches: Vec<Vec<LabeledTriple>> = Vec::new();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            batches.push(labeled_examples(g, vocab, chunk, opts.negatives_per_positive, &mut rng)?);
        }
    }
    let model = scorer.clone();
    let dropout = model.model.config.dropout;
    run_steps(&mut scorer.model.params, &|_| true, &opts.optim, batches.len(), |step, tape, p| {
        let items: Vec<SerializedTriple> = batches[step].iter().map(|e| e.serialized.clone()).collect();
        let labels: Vec<f64> = batches[step]
            .iter()
            .map(|e| if e.positive { 1.0 } else { 0.0 })
            .collect();
        let mut rng = dropout_rng(opts.seed, step);
        let drop: Option<&mut dyn RngCore> = (dropout > 0.0).then_some(&mut rng as _);
        let logits = model.logits_dropout(tape, p, &items, drop)?;
        tape.bce_with_logits(logits, &labels)
    })
}

/// Fraction of examples on the right side of probability 0.5.
pub fn classification_accuracy(scorer: &TripleScorer, examples: &[LabeledTriple]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to classify"));
    }
    let mut correct = 0;
    for chunk in examples.chunks(64) {
        let items: Vec<SerializedTriple> = chunk.iter().map(|e| e.serialized.clone()).collect();
        let probs = scorer.score_batch(&items)?;
        correct += chunk
            .iter()
            .zip(probs)
            .filter(|(e, p)| (*p > 0.5) == e.positive)
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Entity and relation vectors, one row per handle.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbeddingTable {
    pub d_kg: usize,
    /// `[num_entities, d_kg]`
    pub entities: Tensor,
    /// `[num_relations, d_kg]`
    pub relations: Tensor,
}

impl KgEmbeddingTable {
    pub fn entity(&self, e: crate::kg_store::EntityId) -> Result<&[f64]> {
        if e.index() >= self.entities.shape()[0] {
            return Err(Error::UnknownEntity(format!("#{} (not in embedding table)", e.0)));
        }
        Ok(self.entities.row(e.index()))
    }

    pub fn relation(&self, r: crate::kg_store::RelationId) -> Result<&[f64]> {
        if r.index() >= self.relations.shape()[0] {
            return Err(Error::UnknownRelation(format!("#{} (not in embedding table)", r.0)));
        }
        Ok(self.relations.row(r.index()))
    }

    pub fn to_file_string(&self, g: &KnowledgeGraph) -> String {
        let mut s = format!("d_kg={}\n", self.d_kg);
        let row = |v: &[f64]| v.iter().map(|x| format!("{x:.8e}")).collect::<Vec<_>>().join(",");
        for e in g.entity_ids() {
            let _ = writeln!(s, "E\t{}\t{}", g.entity_name(e), row(self.entities.row(e.index())));
        }
        for r in g.relation_ids() {
            let _ = writeln!(s, "R\t{}\t{}", g.relation_name(r), row(self.relations.row(r.index())));
        }
        s
    }

    pub fn parse(text: &str, g: &KnowledgeGraph, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let d_kg: usize = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("d_kg="))
            .and_then(|v| v.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| perr(1, "expected header `d_kg=<int>`".into()))?;
        let mut ents: Vec<Option<Vec<f64>>> = vec![None; g.num_entities()];
        let mut rels: Vec<Option<Vec<f64>>> = vec![None; g.num_relations()];
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(perr(i + 1, "expected 3 tab-separated fields".into()));
            }
            let v: Vec<f64> = f[2]
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(i + 1, e.to_string()))?;
            if v.len() != d_kg || v.iter().any(|x| !x.is_finite()) {
                return Err(perr(i + 1, format!("expected {d_kg} finite values")));
            }
            let slot = match f[0] {
                "E" => &mut ents[g.entity(f[1])?.index()],
                "R" => &mut rels[g.relation(f[1])?.index()],
                k => return Err(perr(i + 1, format!("unknown row kind `{k}`"))),
            };
            if slot.replace(v).is_some() {
                return Err(perr(i + 1, format!("duplicate row for `{}`", f[1])));
            }
        }
        let stack = |rows: Vec<Option<Vec<f64>>>, what: &str| -> Result<Tensor> {
            let n = rows.len();
            let mut data = Vec::with_capacity(n * d_kg);
            for (i, r) in rows.into_iter().enumerate() {
                data.extend(r.ok_or_else(|| Error::invalid(format!("embedding table misses {what} #{i}")))?);
            }
            Tensor::new(&[n, d_kg], data)
        };
        Ok(KgEmbeddingTable {
            d_kg,
            entities: stack(ents, "entity")?,
            relations: stack(rels, "relation")?,
        })
    }

    pub fn load(path: &Path, g: &KnowledgeGraph) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, g, &path.display().to_string())
    }
}

/// Entity vector = [CLS] state of `[CLS] label [SEP]` (segment 0); relation
/// vectors likewise with segment 1.
pub fn export_embeddings(g: &KnowledgeGraph, vocab: &Vocab, scorer: &TripleScorer) -> Result<KgEmbeddingTable> {
    let d = scorer.model.config.d_model;
    let encode = |labels: Vec<&str>, seg: usize| -> Result<Tensor> {
        if labels.is_empty() {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let mut rows = Vec::with_capacity(labels.len() * d);
        for chunk in labels.chunks(64) {
            let seqs = chunk
                .iter()
                .map(|l| serialize_label(vocab, l, seg))
                .collect::<Result<Vec<_>>>()?;
            rows.extend_from_slice(scorer.cls_states(seqs)?.data());
        }
        Tensor::new(&[labels.len(), d], rows)
    };
    let entities = encode(g.entity_ids().map(|e| g.entity_label(e)).collect(), 0)?;
    let relations = encode(g.relation_ids().map(|r| g.relation_label(r)).collect(), 1)?;
    Ok(KgEmbeddingTable {
        d_kg: d,
        entities,
        relations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::parse_tsv;
    use crate::text::UNK;

    fn setup() -> (KnowledgeGraph, Vocab) {
        let g = parse_tsv("paris\tcapital_of\tfrance\nlyon\tlocated_in\tfrance\n", "t", true)
            .unwrap()
            .graph;
        let vocab = Vocab::build(["paris capital of france lyon located in"], 1).unwrap();
        (g, vocab)
    }

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 16,
            mode: AttentionMode::Bidirectional,
            dropout: 0.0,
        }
    }

    #[test]
    fn serialization_layout_and_segments() {
        let (g, v) = setup();
        let s = serialize_triple(&g, &g.triples()[0], &v).unwrap();
        let words: Vec<&str> = s.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(words, ["[CLS]", "paris", "[SEP]", "capital", "of", "[SEP]", "france", "[SEP]"]);
        assert_eq!(s.segments, vec![0, 0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn oov_labels_become_unk() {
        let (g, _) = setup();
        let v = Vocab::build(Vec::<String>::new(), 1).unwrap();
        let s = serialize_triple(&g, &g.triples()[0], &v).unwrap();
        assert_eq!(s.ids, vec![CLS, UNK, SEP, UNK, UNK, SEP, UNK, SEP]);
    }

    #[test]
    fn scores_are_probabilities_and_batch_independent() {
        let (g, v) = setup();
        let sc = TripleScorer::init(tiny_cfg(v.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = serialize_triple(&g, &g.triples()[0], &v).unwrap();
        let b = serialize_triple(&g, &g.triples()[1], &v).unwrap();
        let alone = sc.score(&a).unwrap();
        let batched = sc.score_batch(&[b.clone(), a.clone()]).unwrap();
        assert!(alone > 0.0 && alone < 1.0);
        assert_eq!(alone, batched[1]);
        let logit = sc.score_logits(std::slice::from_ref(&a)).unwrap()[0];
        assert_eq!(sigmoid(logit), alone);
    }

    #[test]
    fn causal_model_is_rejected() {
        let (_, v) = setup();
        let mut cfg = tiny_cfg(v.len());
        cfg.mode = AttentionMode::Causal;
        assert!(TripleScorer::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (g, v) = setup();
        let mut sc = TripleScorer::init(tiny_cfg(v.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = sc.clone();
        let opts = ScorerTrainOptions {
            epochs: 0,
            ..Default::default()
        };
        let curve = train_scorer(&g, &v, &mut sc, g.triples(), &opts).unwrap();
        assert!(curve.is_empty());
        assert_eq!(sc, before);
    }

    #[test]
    fn export_covers_graph_and_depends_on_label_only() {
        let g = parse_tsv("a_x\tr\tb\nc\tr\td\tsame|r|same\n", "t", true).unwrap().graph;
        let v = Vocab::build(["same a x b r"], 1).unwrap();
        let sc = TripleScorer::init(tiny_cfg(v.len()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let table = export_embeddings(&g, &v, &sc).unwrap();
        assert_eq!(table.entities.shape(), &[4, 16]);
        assert_eq!(table.relations.shape(), &[1, 16]);
        let (c, d) = (g.entity("c").unwrap(), g.entity("d").unwrap());
        assert_eq!(table.entity(c).unwrap(), table.entity(d).unwrap());
        assert!(table.entities.is_finite());
        let text = table.to_file_string(&g);
        let back = KgEmbeddingTable::parse(&text, &g, "t").unwrap();
        assert!(back.entities.max_abs_diff(&table.entities) < 1e-8);
        assert!(table.entity(crate::kg_store::EntityId(9)).is_err());
    }
}
