mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kgfuse::autodiff::{Tape, Tensor};
use kgfuse::fusion::FusionMode;
use kgfuse::kg_store::{parse_tsv, EntityId, KnowledgeGraph, Side};
use kgfuse::kgbert::{labeled_examples, serialize_triple, TripleScorer};
use kgfuse::linker::EntityLexicon;
use kgfuse::metrics::{bleu, bleu_stats, rouge_l, rouge_l_counts, BleuStats};
use kgfuse::synth::{self, SynthSpec};
use kgfuse::text::{normalize, tokenize, Vocab, CLS, PAD, SEP};
use kgfuse::transformer::{AttentionMode, Batch, TransformerModel};

use common::*;

fn graph_text() -> impl Strategy<Value = String> {
    prop::collection::vec((0u8..8, 0u8..3, 0u8..8), 1..25)
        .prop_map(|ts| ts.iter().map(|(s, r, o)| format!("e{s}\tr{r}\te{o}\n")).collect())
}

fn graph(text: &str) -> KnowledgeGraph {
    parse_tsv(text, "prop", true).unwrap().graph
}

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec((0..WORDS.len(), any::<bool>()), 1..12).prop_map(|ws| {
        ws.iter()
            .map(|&(i, upper)| if upper { WORDS[i].to_uppercase() } else { WORDS[i].to_string() })
            .collect::<Vec<_>>()
            .join(" ")
    })
}

fn word_vocab() -> Vocab {
    Vocab::from_tokens(WORDS.iter().map(|w| w.to_string())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn subject_index_sums_to_triple_count(text in graph_text()) {
        let g = graph(&text);
        let total: usize = g.entity_ids().map(|e| g.by_subject(e).count()).sum();
        prop_assert_eq!(total, g.num_triples());
        prop_assert_eq!(g.subject_index_size(), g.num_triples());
    }

    #[test]
    fn corruptions_are_never_facts(text in graph_text(), seed: u64, head: bool) {
        let g = graph(&text);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = if head { Side::Head } else { Side::Tail };
        for t in g.triples() {
            if let Ok(c) = g.corrupt_triple(t, side, &mut rng) {
                prop_assert!(!g.contains(&c));
                prop_assert_eq!(c.relation, t.relation);
            }
        }
    }

    #[test]
    fn ingest_is_idempotent(text in graph_text()) {
        let g = graph(&text);
        let again = graph(&g.to_tsv());
        prop_assert_eq!(&again, &g);
    }

    #[test]
    fn neighborhoods_grow_with_radius(text in graph_text(), r1 in 1usize..4, extra in 0usize..3) {
        let g = graph(&text);
        for e in g.entity_ids() {
            let small: BTreeSet<_> = g.neighbors(e, r1).unwrap().into_iter().collect();
            let large: BTreeSet<_> = g.neighbors(e, r1 + extra).unwrap().into_iter().collect();
            prop_assert!(small.is_subset(&large));
        }
    }

    #[test]
    fn in_vocab_text_round_trips(s in sentence()) {
        let v = word_vocab();
        let ids = v.encode_ids(&s);
        prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&s));
    }

    #[test]
    fn token_spans_reconstruct_normalized_input(s in sentence()) {
        let norm = normalize(&s);
        for (tok, (a, b)) in tokenize(&s) {
            prop_assert_eq!(&norm[a..b], tok.as_str());
        }
    }

    #[test]
    fn vocab_build_is_deterministic(lines in prop::collection::vec(sentence(), 0..6), min in 1usize..3) {
        prop_assert_eq!(Vocab::build(lines.clone(), min).unwrap(), Vocab::build(lines, min).unwrap());
    }

    #[test]
    fn linking_ignores_lexicon_insertion_order(
        forms in prop::collection::vec((prop::collection::vec(0..WORDS.len(), 1..3), 0u32..6), 1..8),
        toks in prop::collection::vec(0..WORDS.len(), 0..20),
    ) {
        let surface = |f: &Vec<usize>| f.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        let mut a = EntityLexicon::new();
        let mut b = EntityLexicon::new();
        for (f, e) in &forms {
            a.insert(&surface(f), EntityId(*e));
        }
        for (f, e) in forms.iter().rev() {
            b.insert(&surface(f), EntityId(*e));
        }
        let tokens: Vec<&str> = toks.iter().map(|&i| WORDS[i]).collect();
        let la = a.link_tokens(&tokens);
        prop_assert_eq!(&la, &b.link_tokens(&tokens));
        prop_assert_eq!(&la, &a.link_tokens(&tokens));
        for w in la.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
        for al in &la {
            prop_assert!(a.is_surface_of(&tokens[al.start..al.end].join(" "), al.entity));
        }
    }

    #[test]
    fn self_references_score_one(s in sentence()) {
        let c = normalize(&s);
        prop_assert_eq!(bleu(&c, &[&c], 4).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&c, &c), 1.0);
    }

    #[test]
    fn corpus_scores_are_order_free(pairs in prop::collection::vec((sentence(), sentence()), 1..8), seed: u64) {
        let corpus = |ps: &[(String, String)]| {
            let mut stats = BleuStats::default();
            let (mut lcs, mut cl, mut rl) = (0, 0, 0);
            for (c, r) in ps {
                stats.add(&bleu_stats(c, &[r.as_str()], 4).unwrap());
                let (l, a, b) = rouge_l_counts(c, r);
                lcs += l;
                cl += a;
                rl += b;
            }
            (stats.score(), lcs, cl, rl)
        };
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(corpus(&pairs), corpus(&shuffled));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed: u64) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[rows, cols], 5.0, &mut r);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, cols in 2usize..9, seed: u64) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[rows, cols], 30.0, &mut r);
        let stats = |row: &[f64]| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            (mean, row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.layer_norm(v).unwrap();
        for (inp, row) in x.data().chunks(cols).zip(tape.value(y).data().chunks(cols)) {
            let (mean, var) = stats(row);
            prop_assert!(mean.abs() < 1e-9);
            // The stabilizing epsilon (1e-5) shrinks the variance by var / (var + eps).
            if stats(inp).1 >= 10.0 {
                prop_assert!((var - 1.0).abs() < 1e-6, "variance {}", var);
            }
        }
    }

    #[test]
    fn repeated_backward_doubles_gradients(n in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[n], 1.0, &mut r));
        let y = tape.tanh(x).unwrap();
        let y = tape.mul(y, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn every_op_passes_gradient_check(seed in 0u64..1000) {
        for (op, rep) in op_suite(seed) {
            prop_assert!(rep.passed(), "{}: {:?}", op, rep);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn future_tokens_never_change_past_logits(seed: u64, len in 3usize..10, cut in 1usize..9, tok in 5usize..13) {
        let cut = cut.min(len - 1);
        let mut r = rng(seed);
        let m = TransformerModel::init(tiny_config(13, AttentionMode::Causal), &mut r).unwrap();
        let a: Vec<usize> = (0..len).map(|i| 5 + (i * 7 + seed as usize) % 8).collect();
        let mut b = a.clone();
        b[cut] = tok;
        let la = m.logits(&Batch::from_sequences(&[a])).unwrap();
        let lb = m.logits(&Batch::from_sequences(&[b])).unwrap();
        let v = 13;
        prop_assert_eq!(&la.data()[..cut * v], &lb.data()[..cut * v]);
    }

    #[test]
    fn padding_never_changes_real_positions(seed: u64, len in 1usize..8, pads in 1usize..6) {
        let mut r = rng(seed);
        let m = TransformerModel::init(tiny_config(13, AttentionMode::Causal), &mut r).unwrap();
        let a: Vec<usize> = (0..len).map(|i| 5 + (i * 3 + seed as usize) % 8).collect();
        let mut b = a.clone();
        b.extend(std::iter::repeat_n(PAD, pads));
        let la = m.logits(&Batch::from_sequences(&[a])).unwrap();
        let lb = m.logits(&Batch::from_sequences(&[b])).unwrap();
        prop_assert_eq!(la.data(), &lb.data()[..len * 13]);
    }

    #[test]
    fn scores_are_sigmoids_of_finite_logits(seed in 0u64..1000) {
        let w = world(seed, 10);
        let mut r = rng(seed);
        let sc = TripleScorer::init(tiny_config(w.vocab.len(), AttentionMode::Bidirectional), &mut r).unwrap();
        let items: Vec<_> = w.graph.triples().iter().map(|t| serialize_triple(&w.graph, t, &w.vocab).unwrap()).collect();
        let logits = sc.score_logits(&items).unwrap();
        let probs = sc.score_batch(&items).unwrap();
        for (l, p) in logits.iter().zip(&probs) {
            prop_assert!(l.is_finite());
            prop_assert_eq!(*p, kgfuse::autodiff::sigmoid(*l));
        }
    }

    #[test]
    fn serialized_triples_are_well_formed(seed in 0u64..1000) {
        let w = world(seed, 10);
        for t in w.graph.triples() {
            let s = serialize_triple(&w.graph, t, &w.vocab).unwrap();
            prop_assert_eq!(s.ids.len(), s.segments.len());
            prop_assert_eq!(s.ids[0], CLS);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == CLS).count(), 1);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == SEP).count(), 3);
            prop_assert!(s.segments.windows(2).all(|p| p[0] <= p[1]));
        }
    }

    #[test]
    fn negatives_are_labeled_correctly(seed in 0u64..1000) {
        let w = world(seed, 10);
        let ex = labeled_examples(&w.graph, &w.vocab, w.graph.triples(), 2, &mut rng(seed)).unwrap();
        for e in ex {
            prop_assert_eq!(e.positive, w.graph.contains(&e.triple));
        }
    }

    #[test]
    fn fusion_preserves_shapes_causality_and_gate_bounds(seed in 0u64..1000, mode_ix in 0usize..4, cut in 1usize..6) {
        let w = world(seed % 50, 12);
        let mode = FusionMode::ALL[mode_ix];
        let fm = fused_model(&w, mode, seed, 0.7);
        let seq = w.linked.iter().find(|s| !s.alignments.is_empty() && s.tokens.len() > 3).unwrap().clone();
        let base = fm.base_model();
        let fl = fm.logits(std::slice::from_ref(&seq), &w.graph).unwrap();
        let bl = base.logits(&Batch::from_sequences(&[seq.tokens.ids.clone()])).unwrap();
        prop_assert_eq!(fl.shape(), bl.shape());

        // Truncating the future leaves every earlier position unchanged.
        let cut = cut.min(seq.tokens.len() - 1);
        let prefix = w.lexicon.link(&kgfuse::text::TokenizedSequence::from_ids(seq.tokens.ids[..cut].to_vec()), &w.vocab);
        let pl = fm.logits(std::slice::from_ref(&prefix), &w.graph).unwrap();
        let v = w.vocab.len();
        for (a, b) in pl.data().iter().zip(&fl.data()[..cut * v]) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }

        let trace = fm.trace(std::slice::from_ref(&seq), &w.graph).unwrap();
        for &(_, _, _, gate) in &trace.gates {
            prop_assert!(gate > 0.0 && gate < 1.0);
        }
        if mode == FusionMode::GatedInjection {
            prop_assert!(!trace.gates.is_empty());
        }
    }

    #[test]
    fn synthetic_data_is_pure_separated_and_answerable(seed in 0u64..1000, holdout in 0.0f64..0.5) {
        let spec = SynthSpec { entities: 20, relations: 3, types: 3, seed, holdout_frac: holdout, ..SynthSpec::default() };
        let a = synth::generate(&spec).unwrap();
        let b = synth::generate(&spec).unwrap();
        prop_assert_eq!(&a.graph, &b.graph);
        prop_assert_eq!(&a.pretrain_corpus, &b.pretrain_corpus);
        prop_assert_eq!(&a.qa_holdout, &b.qa_holdout);
        let corpus: BTreeSet<&String> = a.pretrain_corpus.iter().chain(&a.fusion_corpus).collect();
        for t in &a.split.holdout {
            let s = synth::render_sentence(&a.graph, &a.templates, t).unwrap();
            prop_assert!(!corpus.contains(&s));
        }
        for q in a.qa_holdout.iter().chain(&a.qa_seen) {
            prop_assert!(a.graph.contains(&q.triple));
            prop_assert_eq!(&q.answer, a.graph.entity_label(q.triple.object));
        }
    }
}
