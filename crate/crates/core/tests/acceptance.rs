//! Acceptance suite: one pass/fail line per criterion, then a nonzero exit
//! if any criterion failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgfuse::autodiff::{Tape, Tensor};
use kgfuse::checkpoint::Checkpoint;
use kgfuse::fusion::FusionMode;
use kgfuse::kg_store::{parse_tsv, EntityId, KnowledgeGraph, Side, Triple};
use kgfuse::kgbert::{classification_accuracy, labeled_examples, train_scorer, ScorerTrainOptions, TripleScorer};
use kgfuse::linker::{EntityLexicon, LinkedSequence};
use kgfuse::metrics::{bleu, bleu_stats, perplexity, rouge_l, rouge_l_counts, token_prf, LanguageModel};
use kgfuse::optim::OptimOptions;
use kgfuse::pipeline::{run_experiment, ExperimentConfig, ExperimentResult, ModelShape};
use kgfuse::synth::{self, SynthSpec};
use kgfuse::text::{TokenId, TokenizedSequence, Vocab};
use kgfuse::transformer::{next_token_loss, AttentionMode, Batch, TransformerModel};

use common::*;

const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const FUSED_COORDS_PER_TENSOR: usize = 3;

const EQUIV_INPUTS: usize = 100;
const EQUIV_BUDGET: Duration = Duration::from_secs(60);

const SCORER_MIN_ACCURACY: f64 = 0.85;
const SCORER_BUDGET: Duration = Duration::from_secs(300);

const HOLDOUT_MAX_P: f64 = 0.05;
const HOLDOUT_BUDGET: Duration = Duration::from_secs(15 * 60);
const HOLDOUT_REQUIRED: [FusionMode; 2] = [FusionMode::GatedInjection, FusionMode::KgAttentionLayer];

const PPL_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(1);

const DETERMINISM_BUDGET: Duration = Duration::from_secs(20 * 60);

const PROPERTY_CASES: u32 = 1000;
const PROPERTY_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < budget, format!("{:.1}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

// ---------------------------------------------------------------- 1

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failing: BTreeSet<String> = BTreeSet::new();
    let mut checked = 0;
    for seed in 0..GRAD_SEEDS {
        for (op, rep) in op_suite(seed) {
            worst = worst.max(rep.max_rel_error);
            checked += rep.checked;
            if !rep.passed() {
                failing.insert(op.to_string());
            }
        }
        let w = world(seed, 12);
        for mode in FusionMode::ALL {
            let rep = fused_grad_check(&w, mode, seed, FUSED_COORDS_PER_TENSOR);
            worst = worst.max(rep.max_rel_error);
            checked += rep.checked;
            if !rep.passed() {
                failing.insert(format!("fused/{mode}"));
            }
        }
        let rep = scorer_grad_check(&w, seed, FUSED_COORDS_PER_TENSOR);
        worst = worst.max(rep.max_rel_error);
        checked += rep.checked;
        if !rep.passed() {
            failing.insert("scorer".into());
        }
    }
    let (fast, time) = within(t, GRAD_BUDGET);
    outcome(
        failing.is_empty() && fast,
        format!(
            "{GRAD_SEEDS} seeds, {checked} coordinates, max rel err {worst:.2e} (tol {GRAD_TOL:e}), failing {failing:?}, {time}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_linked(w: &World, rng: &mut ChaCha8Rng) -> LinkedSequence {
    let words = w.vocab.words();
    let labels: Vec<EntityId> = w.graph.entity_ids().collect();
    let mut text: Vec<String> = Vec::new();
    let len = rng.random_range(3..12);
    while text.len() < len {
        if rng.random_bool(0.3) {
            let e = *labels.choose(rng).unwrap();
            text.extend(w.graph.entity_label(e).split(' ').map(String::from));
        } else {
            text.push(words[rng.random_range(5..words.len())].clone());
        }
    }
    text.truncate(14);
    let ids = text.iter().map(|t| w.vocab.id(t).unwrap()).collect();
    w.lexicon.link(&TokenizedSequence::from_ids(ids), &w.vocab)
}

fn baseline_equivalence() -> Outcome {
    let t = Instant::now();
    let w = world(5, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<LinkedSequence> = (0..EQUIV_INPUTS).map(|_| random_linked(&w, &mut rng)).collect();
    let linked_inputs = inputs.iter().filter(|s| !s.alignments.is_empty()).count();
    let mut mismatches = 0;
    for (i, mode) in FusionMode::ALL.into_iter().enumerate() {
        let fm = fused_model(&w, mode, 100 + i as u64, 0.0);
        let base = fm.base_model();
        for s in &inputs {
            let a = fm.logits(std::slice::from_ref(s), &w.graph).unwrap();
            let b = base.logits(&Batch::from_sequences(&[s.tokens.ids.clone()])).unwrap();
            if a.shape() != b.shape() || a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                mismatches += 1;
            }
        }
    }
    let (fast, time) = within(t, EQUIV_BUDGET);
    outcome(
        mismatches == 0 && fast,
        format!(
            "{EQUIV_INPUTS} inputs ({linked_inputs} with links) x 4 modes, {mismatches} not bit-identical, {time}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion3_data() -> (KnowledgeGraph, Vec<Triple>, Vec<Triple>) {
    let spec = SynthSpec {
        entities: 50,
        relations: 5,
        functional: true,
        seed: 3,
        ..SynthSpec::default()
    };
    let g = synth::generate_kg(&spec).unwrap();
    let mut triples = g.triples().to_vec();
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let cut = triples.len() * 4 / 5;
    let test = triples.split_off(cut);
    (g, triples, test)
}

/// Logistic regression on relation x label-token features of each side.
fn logistic_oracle(g: &KnowledgeGraph, train: &[(Triple, bool)], test: &[(Triple, bool)]) -> f64 {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let feats = |t: &Triple, index: &mut BTreeMap<String, usize>, grow: bool| -> Vec<usize> {
        let r = g.relation_name(t.relation);
        let mut out = Vec::new();
        for (side, e) in [("s", t.subject), ("o", t.object)] {
            for tok in g.entity_label(e).split(' ') {
                let key = format!("{r}|{side}|{tok}");
                let n = index.len();
                match index.get(&key) {
                    Some(&i) => out.push(i),
                    None if grow => {
                        index.insert(key, n);
                        out.push(n);
                    }
                    None => {}
                }
            }
        }
        out
    };
    let xs: Vec<(Vec<usize>, f64)> = train
        .iter()
        .map(|(t, y)| (feats(t, &mut index, true), f64::from(u8::from(*y))))
        .collect();
    let mut w = vec![0.0; index.len()];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let z: f64 = b + x.iter().map(|&i| w[i]).sum::<f64>();
            let d = 1.0 / (1.0 + (-z).exp()) - y;
            gb += d;
            for &i in x {
                gw[i] += d;
            }
        }
        let n = xs.len() as f64;
        b -= 0.5 * gb / n;
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= 0.5 * (g / n + 1e-3 * *wi);
        }
    }
    let correct = test
        .iter()
        .filter(|(t, y)| {
            let z: f64 = b + feats(t, &mut index, false).iter().map(|&i| w[i]).sum::<f64>();
            (z > 0.0) == *y
        })
        .count();
    correct as f64 / test.len() as f64
}

fn with_corruptions(g: &KnowledgeGraph, ts: &[Triple], rng: &mut ChaCha8Rng) -> Vec<(Triple, bool)> {
    let mut out = Vec::new();
    for t in ts {
        out.push((*t, true));
        let side = if rng.random_bool(0.5) { Side::Head } else { Side::Tail };
        out.push((g.corrupt_triple(t, side, rng).unwrap(), false));
    }
    out
}

fn scorer_separability() -> Outcome {
    let t = Instant::now();
    let (g, train, test) = criterion3_data();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let oracle_train: Vec<(Triple, bool)> = (0..10).flat_map(|_| with_corruptions(&g, &train, &mut rng)).collect();
    let oracle_test = with_corruptions(&g, &test, &mut rng);
    let oracle = logistic_oracle(&g, &oracle_train, &oracle_test);

    let mut lines = synth::vocab_lines(&g, &synth::default_templates(&g));
    lines.sort();
    let vocab = Vocab::build(lines, 1).unwrap();
    let shape = ModelShape::default();
    let mut scorer = TripleScorer::init(shape.config(vocab.len(), AttentionMode::Bidirectional), &mut rng).unwrap();
    let opts = ScorerTrainOptions {
        epochs: 300,
        batch_size: 16,
        optim: OptimOptions::adam(1e-3),
        seed: 6,
        negatives_per_positive: 1,
    };
    train_scorer(&g, &vocab, &mut scorer, &train, &opts).unwrap();
    let held_out = labeled_examples(&g, &vocab, &test, 1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let acc = classification_accuracy(&scorer, &held_out).unwrap();
    let (fast, time) = within(t, SCORER_BUDGET);
    outcome(
        acc >= SCORER_MIN_ACCURACY && fast,
        format!(
            "held-out accuracy {acc:.3} (threshold {SCORER_MIN_ACCURACY}, logistic oracle {oracle:.3}) on {} positives + {} corruptions, {time}",
            test.len(),
            held_out.len() - test.len()
        ),
    )
}

// ---------------------------------------------------------------- 4, 6

fn holdout_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.modes = HOLDOUT_REQUIRED.to_vec();
    cfg
}

static FIRST_RUN: OnceLock<(ExperimentResult, Duration)> = OnceLock::new();

fn first_run() -> &'static (ExperimentResult, Duration) {
    FIRST_RUN.get_or_init(|| {
        let t = Instant::now();
        let (_, r) = run_experiment(&holdout_config()).unwrap();
        (r, t.elapsed())
    })
}

fn direction_of_gain() -> Outcome {
    let (r, took) = first_run();
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in HOLDOUT_REQUIRED {
        let c = &r.comparisons.iter().find(|(m, _)| *m == mode).unwrap().1;
        let ok = c.fused.factual_accuracy > c.baseline.factual_accuracy && c.p_value < HOLDOUT_MAX_P;
        pass &= ok;
        parts.push(format!(
            "{mode}: {:.1}% vs {:.1}%, p = {:.4} [{}]",
            100.0 * c.fused.factual_accuracy,
            100.0 * c.baseline.factual_accuracy,
            c.p_value,
            if ok { "ok" } else { "no gain" }
        ));
    }
    let fast = *took < HOLDOUT_BUDGET;
    outcome(
        pass && fast,
        format!("{}; {:.1}s of {}s", parts.join("; "), took.as_secs_f64(), HOLDOUT_BUDGET.as_secs()),
    )
}

fn determinism() -> Outcome {
    let (first, took) = first_run();
    let t = Instant::now();
    let (_, second) = run_experiment(&holdout_config()).unwrap();
    let total = *took + t.elapsed();
    let same = first.tsv.as_bytes() == second.tsv.as_bytes() && first.table == second.table;
    outcome(
        same && total < DETERMINISM_BUDGET,
        format!(
            "two runs, report TSVs {} ({} bytes), {:.1}s of {}s",
            if same { "byte-identical" } else { "differ" },
            first.tsv.len(),
            total.as_secs_f64(),
            DETERMINISM_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- 5

struct FixedLm {
    vocab: Vocab,
    /// `None`: uniform logits; `Some(seq)`: all mass on the next token of `seq`.
    perfect: Option<Vec<TokenId>>,
}

impl LanguageModel for FixedLm {
    fn name(&self) -> &str {
        "fixed"
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn logits(&self, seqs: &[Vec<TokenId>]) -> kgfuse::Result<Tensor> {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let v = self.vocab.len();
        let mut out = Tensor::zeros(&[seqs.len(), t, v]);
        if let Some(p) = &self.perfect {
            let d = out.data_mut();
            for b in 0..seqs.len() {
                for i in 0..t.saturating_sub(1) {
                    d[(b * t + i) * v + p[i + 1]] = 1e4;
                }
            }
        }
        Ok(out)
    }

    fn generate(&self, prompt: &[TokenId], _max_new: usize) -> kgfuse::Result<Vec<TokenId>> {
        Ok(prompt.to_vec())
    }
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut fails: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            fails.push(name);
        }
    };
    let p = token_prf("paris", "paris");
    check((p.precision, p.recall, p.f1) == (1.0, 1.0, 1.0), "prf exact");
    let p = token_prf("in paris", "paris");
    check((p.precision, p.recall, p.f1) == (0.5, 1.0, 2.0 / 3.0), "prf partial");
    let p = token_prf("rome", "paris");
    check((p.precision, p.recall, p.f1) == (0.0, 0.0, 0.0), "prf disjoint");
    let p = token_prf("", "paris");
    check((p.precision, p.recall, p.f1) == (0.0, 0.0, 0.0), "prf empty prediction");
    let p = token_prf("", "");
    check((p.precision, p.recall, p.f1) == (1.0, 1.0, 1.0), "prf both empty");

    check(bleu("the cat sat on the mat", &["the cat sat on the mat"], 4).unwrap() == 1.0, "bleu identical");
    let s = bleu_stats("the the the", &["the cat"], 4).unwrap();
    check((s.matches[0], s.totals[0]) == (1, 3), "bleu clipped unigram 1/3");
    check(bleu("dog runs", &["the cat"], 4).unwrap() == 0.0, "bleu disjoint");
    check(bleu("x", &[], 4).is_err(), "bleu empty references");

    check(rouge_l("a b c d", "a b c d") == 1.0, "rouge identical");
    check(rouge_l_counts("a b c d", "a c d") == (3, 4, 3), "rouge lcs counts");
    check(rouge_l("a b c d", "a c d") == 6.0 / 7.0, "rouge 6/7");
    check(rouge_l("a b", "c d") == 0.0, "rouge disjoint");

    let vocab = Vocab::from_tokens((0..5).map(|i| format!("w{i}"))).unwrap();
    check(vocab.len() == 10, "vocab of 10");
    let seqs = vec![vec![5, 6, 7, 8, 9, 4], vec![9, 8, 4]];
    let uniform = FixedLm {
        vocab: vocab.clone(),
        perfect: None,
    };
    check((perplexity(&uniform, &seqs).unwrap() - 10.0).abs() < PPL_TOL, "ppl uniform = 10");
    let one = vec![vec![5, 6, 7, 8, 4]];
    let perfect = FixedLm {
        vocab: vocab.clone(),
        perfect: Some(one[0].clone()),
    };
    check((perplexity(&perfect, &one).unwrap() - 1.0).abs() < PPL_TOL, "ppl perfect = 1");

    // Perplexity against exp(cross-entropy) from the tape on the same logits.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lm = TransformerModel::init(tiny_config(vocab.len(), AttentionMode::Causal), &mut rng).unwrap();
    let seq = vec![vec![5, 7, 9, 6, 8, 4]];
    let wrapped = kgfuse::metrics::BaseLm {
        name: "lm".into(),
        model: &lm,
        vocab: &vocab,
    };
    let ppl = perplexity(&wrapped, &seq).unwrap();
    let batch = Batch::from_sequences(&seq);
    let mut tape = Tape::new();
    let logits = tape.constant(lm.logits(&batch).unwrap());
    let ce = next_token_loss(&mut tape, logits, &batch).unwrap();
    check((ppl - tape.scalar_value(ce).exp()).abs() < PPL_TOL, "ppl = exp(ce)");

    let (fast, time) = within(t, METRIC_BUDGET);
    outcome(fails.is_empty() && fast, format!("failing {fails:?}, {time}"))
}

// ---------------------------------------------------------------- 7

fn report_fidelity() -> Outcome {
    let (first, _) = first_run();
    let table = &first.table;
    let mut fails = Vec::new();
    for needle in ["| Prec. |", "| Rec. |", "|    F1 |", "| BLEU |", "| ROUGE |", "| PPL |", "Gain"] {
        let compact = needle.split_whitespace().collect::<Vec<_>>().join(" ");
        let flat = table.split_whitespace().collect::<Vec<_>>().join(" ");
        if !flat.contains(&compact) {
            fails.push(format!("missing column {needle}"));
        }
    }
    for mode in HOLDOUT_REQUIRED {
        if !table.lines().next().unwrap_or("").contains(mode.as_str()) {
            fails.push(format!("header lacks mode {mode}"));
        }
    }
    if !table.contains("baseline: base LM") {
        fails.push("header lacks baseline name".into());
    }
    let pct_cells: Vec<&str> = table
        .split('|')
        .map(str::trim)
        .filter(|c| c.ends_with('%'))
        .collect();
    let one_decimal = |c: &&str| {
        let num = c.trim_end_matches('%').trim_start_matches(['+', '-']);
        num.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 1)
    };
    if pct_cells.is_empty() || !pct_cells.iter().all(one_decimal) {
        fails.push(format!("percent cells not one-decimal: {pct_cells:?}"));
    }

    // The CLI on two identical checkpoints: every gain is zero.
    let cli = cli_identical_compare();
    match &cli {
        Ok(out) => {
            let zero = out
                .lines()
                .filter(|l| l.starts_with('|') && !l.contains("Gain"))
                .all(|l| matches!(l.trim_end_matches('|').rsplit('|').next().map(str::trim), Some("-" | "+0.0%")));
            if !zero || !out.contains("(gain +0.0%") {
                fails.push("identical checkpoints gave non-zero gains".into());
            }
        }
        Err(e) => fails.push(format!("cli failed: {e}")),
    }
    outcome(fails.is_empty(), format!("{} percent cells checked; failing {fails:?}", pct_cells.len()))
}

fn cli_identical_compare() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = world(9, 12);
    let g = dir.path().join("g.tsv");
    let v = dir.path().join("v.txt");
    let qa = dir.path().join("qa.tsv");
    let ck = dir.path().join("lm.ckpt");
    std::fs::write(&g, w.graph.to_tsv()).unwrap();
    std::fs::write(&v, w.vocab.to_file_string()).unwrap();
    let triples: Vec<Triple> = w.graph.triples()[..4].to_vec();
    let items = synth::make_qa(&w.graph, &synth::default_templates(&w.graph), &triples).unwrap();
    std::fs::write(&qa, synth::qa_to_tsv(&w.graph, &items)).unwrap();
    let lm = TransformerModel::init(tiny_config(w.vocab.len(), AttentionMode::Causal), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    Checkpoint::from_lm(&lm, 0, 1).save(&ck).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kgfuse"))
        .args(["report", "compare", "--kg"])
        .arg(&g)
        .arg("--vocab")
        .arg(&v)
        .arg("--qa")
        .arg(&qa)
        .arg("--baseline")
        .arg(&ck)
        .arg("--fused")
        .arg(&ck)
        .arg("--out")
        .arg(dir.path().join("report"))
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// ---------------------------------------------------------------- 8

fn small_graph_text() -> impl Strategy<Value = String> {
    prop::collection::vec((0u8..8, 0u8..3, 0u8..8), 1..25).prop_map(|ts| {
        ts.iter()
            .map(|(s, r, o)| format!("e{s}\tr{r}\te{o}\n"))
            .collect()
    })
}

fn property_suites() -> Outcome {
    let t = Instant::now();
    let cfg = || PtConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..PtConfig::default()
    };
    let mut results = Vec::new();

    // Alignments never overlap and each span spells a surface form.
    let lex_and_tokens = (
        prop::collection::vec((prop::collection::vec(0usize..6, 1..4), 0u32..5), 1..10),
        prop::collection::vec(0usize..6, 0..30),
    );
    let r = TestRunner::new(cfg()).run(&lex_and_tokens, |(forms, toks)| {
        let word = |i: usize| format!("w{i}");
        let mut lex = EntityLexicon::new();
        for (f, e) in &forms {
            lex.insert(&f.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" "), EntityId(*e));
        }
        let tokens: Vec<String> = toks.iter().map(|&i| word(i)).collect();
        let al = lex.link_tokens(&tokens);
        for pair in al.windows(2) {
            prop_assert!(pair[0].end <= pair[1].start, "overlap {:?}", pair);
        }
        for a in &al {
            prop_assert!(a.start < a.end && a.end <= tokens.len());
            prop_assert!(lex.is_surface_of(&tokens[a.start..a.end].join(" "), a.entity));
        }
        Ok(())
    });
    results.push(("alignment non-overlap", r.map_err(|e| e.to_string())));

    // Corruptions are never facts of the graph.
    let r = TestRunner::new(cfg()).run(&(small_graph_text(), any::<u64>(), any::<bool>()), |(text, seed, head)| {
        let g = parse_tsv(&text, "p", true).unwrap().graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = if head { Side::Head } else { Side::Tail };
        for tr in g.triples().to_vec() {
            match g.corrupt_triple(&tr, side, &mut rng) {
                Ok(c) => prop_assert!(!g.contains(&c), "{c} is a fact"),
                Err(kgfuse::Error::Saturated(..)) | Err(kgfuse::Error::InvalidArgument(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
        Ok(())
    });
    results.push(("corruption never in graph", r.map_err(|e| e.to_string())));

    // Ingesting the serialized form reproduces an equal graph.
    let r = TestRunner::new(cfg()).run(&small_graph_text(), |text| {
        let g = parse_tsv(&text, "p", true).unwrap().graph;
        let again = parse_tsv(&g.to_tsv(), "p", true).unwrap().graph;
        prop_assert_eq!(&again, &g);
        prop_assert_eq!(again.to_tsv(), g.to_tsv());
        Ok(())
    });
    results.push(("ingest idempotence", r.map_err(|e| e.to_string())));

    let (fast, time) = within(t, PROPERTY_BUDGET);
    let failing: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    outcome(
        failing.is_empty() && fast,
        format!(
            "{} suites x {PROPERTY_CASES} cases, failing {failing:?}, {time}",
            results.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient oracle", gradient_oracle),
        ("2 baseline equivalence at alpha = 0", baseline_equivalence),
        ("3 scorer separability", scorer_separability),
        ("4 direction of gain on held-out facts", direction_of_gain),
        ("5 metric oracles", metric_oracles),
        ("6 end-to-end determinism", determinism),
        ("7 report fidelity", report_fidelity),
        ("8 linker/store property suites", property_suites),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let o = f();
        println!("[{}] criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
