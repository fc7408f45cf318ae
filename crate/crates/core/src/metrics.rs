//! QA and generation metrics, KG-verified factual accuracy, paired
//! comparison and the report tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::kg_store::{KnowledgeGraph, Triple};
use crate::linker::EntityLexicon;
use crate::synth::QaExample;
use crate::text::{normalize, TokenId, TokenizedSequence, Vocab, EOS, PAD};
use crate::transformer::{Batch, TransformerModel};

fn words(text: &str) -> Vec<String> {
    let n = normalize(text);
    if n.is_empty() {
        Vec::new()
    } else {
        n.split(' ').map(str::to_string).collect()
    }
}

fn counts<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset token overlap between a prediction and the gold answer.
pub fn token_prf(prediction: &str, gold: &str) -> Prf {
    let (p, g) = (words(prediction), words(gold));
    match (p.is_empty(), g.is_empty()) {
        (true, true) => {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return Prf {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        }
        _ => {}
    }
    let gc = counts(g.iter());
    let overlap: usize = counts(p.iter())
        .iter()
        .map(|(w, &c)| c.min(gc.get(w).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    Prf {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

/// Sufficient statistics for BLEU; sums over examples give corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        let n = self.matches.len().max(other.matches.len());
        self.matches.resize(n, 0);
        self.totals.resize(n, 0);
        for i in 0..other.matches.len() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Geometric mean of the modified precisions over every order with at
    /// least one candidate n-gram, times the brevity penalty. No smoothing.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let used: Vec<(usize, usize)> = self
            .matches
            .iter()
            .zip(&self.totals)
            .filter(|(_, &t)| t > 0)
            .map(|(&m, &t)| (m, t))
            .collect();
        if used.is_empty() || used.iter().any(|&(m, _)| m == 0) {
            return 0.0;
        }
        let log_p: f64 = used.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / used.len() as f64;
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * log_p.exp()
    }
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    if toks.len() < n {
        return HashMap::new();
    }
    counts(toks.windows(n))
}

pub fn bleu_stats(candidate: &str, references: &[&str], max_n: usize) -> Result<BleuStats> {
    if references.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    let c = words(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| words(r)).collect();
    let mut st = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        cand_len: c.len(),
        ref_len: refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0),
    };
    for n in 1..=max_n {
        let cand = ngrams(&c, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        st.totals[n - 1] = cand.values().sum();
        st.matches[n - 1] = cand
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(st)
}

pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(candidate, references, max_n)?.score())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(lcs, candidate length, reference length)`.
pub fn rouge_l_counts(candidate: &str, reference: &str) -> (usize, usize, usize) {
    let (c, r) = (words(candidate), words(reference));
    (lcs_len(&c, &r), c.len(), r.len())
}

fn rouge_from_counts(lcs: usize, c: usize, r: usize) -> f64 {
    match (c, r) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => harmonic(lcs as f64 / c as f64, lcs as f64 / r as f64),
    }
}

/// LCS-based F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (l, c, r) = rouge_l_counts(candidate, reference);
    rouge_from_counts(l, c, r)
}

/// `exp` of the mean next-token NLL over non-pad targets, from logits
/// `[batch, len, vocab]`.
pub fn perplexity_from_logits(logits: &Tensor, batch: &Batch) -> Result<f64> {
    let (nll, n) = nll_sum(logits, batch)?;
    if n == 0 {
        return Err(Error::invalid("perplexity needs at least one scored token"));
    }
    Ok((nll / n as f64).exp())
}

/// Summed NLL and the number of scored positions.
fn nll_sum(logits: &Tensor, batch: &Batch) -> Result<(f64, usize)> {
    let (b, t) = (batch.batch, batch.len);
    let s = logits.shape();
    if s.len() != 3 || s[0] != b || s[1] != t {
        return Err(Error::shape("perplexity", s, &[b, t]));
    }
    let v = s[2];
    let mut total = 0.0;
    let mut n = 0;
    for bi in 0..b {
        for i in 1..t {
            let target = batch.token(bi, i);
            if target == PAD {
                continue;
            }
            let row = &logits.data()[(bi * t + i - 1) * v..(bi * t + i) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
            n += 1;
        }
    }
    Ok((total, n))
}

/// A causal LM that can be scored and decoded from text.
pub trait LanguageModel: Sync {
    fn name(&self) -> &str;
    fn vocab(&self) -> &Vocab;
    /// Logits `[batch, len, vocab]` for already-encoded sequences.
    fn logits(&self, seqs: &[Vec<TokenId>]) -> Result<Tensor>;
    /// Greedy continuation of `prompt` (prompt included).
    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>>;
}

pub struct BaseLm<'a> {
    pub name: String,
    pub model: &'a TransformerModel,
    pub vocab: &'a Vocab,
}

impl LanguageModel for BaseLm<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab(&self) -> &Vocab {
        self.vocab
    }

    fn logits(&self, seqs: &[Vec<TokenId>]) -> Result<Tensor> {
        self.model.logits(&Batch::from_sequences(seqs))
    }

    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.model.generate(prompt, max_new)
    }
}

pub struct FusedLm<'a> {
    pub name: String,
    pub model: &'a FusedModel,
    pub vocab: &'a Vocab,
    pub lexicon: &'a EntityLexicon,
    pub graph: &'a KnowledgeGraph,
}

impl FusedLm<'_> {
    fn link(&self, ids: &[TokenId]) -> crate::linker::LinkedSequence {
        self.lexicon.link(&TokenizedSequence::from_ids(ids.to_vec()), self.vocab)
    }
}

impl LanguageModel for FusedLm<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab(&self) -> &Vocab {
        self.vocab
    }

    fn logits(&self, seqs: &[Vec<TokenId>]) -> Result<Tensor> {
        let linked: Vec<_> = seqs.iter().map(|s| self.link(s)).collect();
        self.model.logits(&linked, self.graph)
    }

    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.model.generate(&self.link(prompt), self.graph, max_new)
    }
}

/// Perplexity of `model` over `sequences` (each already ending in [EOS]).
pub fn perplexity(model: &dyn LanguageModel, sequences: &[Vec<TokenId>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in sequences.chunks(32) {
        let logits = model.logits(chunk)?;
        let (s, k) = nll_sum(&logits, &Batch::from_sequences(chunk))?;
        total += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::invalid("perplexity needs at least one scored token"));
    }
    Ok((total / n as f64).exp())
}

pub const MAX_ANSWER_TOKENS: usize = 8;

/// Generated answer text: tokens after the prompt, up to [EOS].
pub fn answer(model: &dyn LanguageModel, question: &str) -> Result<String> {
    let prompt = model.vocab().encode_ids(question);
    let out = model.generate(&prompt, MAX_ANSWER_TOKENS)?;
    let gen: Vec<TokenId> = out[prompt.len()..].iter().copied().take_while(|&t| t != EOS).collect();
    model.vocab().decode(&gen)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaOutcome {
    pub triple: Triple,
    pub prediction: String,
    pub gold: String,
    pub prf: Prf,
    pub exact: bool,
    /// Prediction is a registered surface form of the gold entity.
    pub factual: bool,
}

/// Answer every question, in parallel; outcomes keep the input order.
pub fn run_qa(model: &dyn LanguageModel, qa: &[QaExample], lexicon: &EntityLexicon) -> Result<Vec<QaOutcome>> {
    qa.par_iter()
        .map(|q| {
            let prediction = answer(model, &q.question)?;
            Ok(QaOutcome {
                triple: q.triple,
                prf: token_prf(&prediction, &q.answer),
                exact: normalize(&prediction) == normalize(&q.answer),
                factual: lexicon.is_surface_of(&prediction, q.triple.object),
                gold: q.answer.clone(),
                prediction,
            })
        })
        .collect()
}

pub fn factual_accuracy(model: &dyn LanguageModel, qa: &[QaExample], lexicon: &EntityLexicon) -> Result<f64> {
    if qa.is_empty() {
        return Err(Error::invalid("factual accuracy needs at least one question"));
    }
    let out = run_qa(model, qa, lexicon)?;
    Ok(out.iter().filter(|o| o.factual).count() as f64 / out.len() as f64)
}

/// One generation item: the prompt is completed and compared to `reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenExample {
    pub prompt: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOutcome {
    pub candidate: String,
    pub reference: String,
    pub bleu: BleuStats,
    pub lcs: (usize, usize, usize),
}

pub fn run_gen(model: &dyn LanguageModel, gen: &[GenExample]) -> Result<Vec<GenOutcome>> {
    gen.par_iter()
        .map(|g| {
            let prompt = model.vocab().encode_ids(&g.prompt);
            let out = model.generate(&prompt, MAX_ANSWER_TOKENS)?;
            let ids: Vec<TokenId> = out.into_iter().take_while(|&t| t != EOS).collect();
            let candidate = model.vocab().decode(&ids)?;
            Ok(GenOutcome {
                bleu: bleu_stats(&candidate, &[&g.reference], 4)?,
                lcs: rouge_l_counts(&candidate, &g.reference),
                candidate,
                reference: g.reference.clone(),
            })
        })
        .collect()
}

/// Scores for one model on one task set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub factual_accuracy: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub perplexity: f64,
    pub n_qa: usize,
    pub n_gen: usize,
}

/// Per-example results kept for paired comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub qa: Vec<QaOutcome>,
    pub gen: Vec<GenOutcome>,
}

pub fn summarize(model: &str, qa: Vec<QaOutcome>, gen: Vec<GenOutcome>, perplexity: f64) -> Result<Evaluation> {
    if qa.is_empty() {
        return Err(Error::invalid("empty QA set"));
    }
    let n = qa.len() as f64;
    let mean = |f: &dyn Fn(&QaOutcome) -> f64| qa.iter().map(f).sum::<f64>() / n;
    let mut stats = BleuStats::default();
    let (mut lcs, mut c, mut r) = (0, 0, 0);
    for g in &gen {
        stats.add(&g.bleu);
        lcs += g.lcs.0;
        c += g.lcs.1;
        r += g.lcs.2;
    }
    let report = MetricsReport {
        model: model.to_string(),
        precision: mean(&|o| o.prf.precision),
        recall: mean(&|o| o.prf.recall),
        f1: mean(&|o| o.prf.f1),
        exact_match: mean(&|o| f64::from(u8::from(o.exact))),
        factual_accuracy: mean(&|o| f64::from(u8::from(o.factual))),
        bleu: if gen.is_empty() { 0.0 } else { stats.score() },
        rouge_l: if gen.is_empty() { 0.0 } else { rouge_from_counts(lcs, c, r) },
        perplexity,
        n_qa: qa.len(),
        n_gen: gen.len(),
    };
    Ok(Evaluation { report, qa, gen })
}

/// QA, generation and perplexity for one model.
pub fn evaluate(
    model: &dyn LanguageModel,
    qa: &[QaExample],
    gen: &[GenExample],
    ppl_corpus: &[Vec<TokenId>],
    lexicon: &EntityLexicon,
) -> Result<Evaluation> {
    let q = run_qa(model, qa, lexicon)?;
    let g = run_gen(model, gen)?;
    summarize(model.name(), q, g, perplexity(model, ppl_corpus)?)
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// One-sided paired bootstrap p-value for `mean(treated - control) > 0`:
/// the share of resamples whose mean difference is <= 0, with the +1
/// correction so it is never exactly 0.
pub fn paired_bootstrap(control: &[bool], treated: &[bool], resamples: usize, seed: u64) -> Result<f64> {
    if control.len() != treated.len() || control.is_empty() {
        return Err(Error::invalid("paired bootstrap needs two equal, non-empty outcome lists"));
    }
    let d: Vec<i64> = control
        .iter()
        .zip(treated)
        .map(|(&c, &t)| i64::from(t) - i64::from(c))
        .collect();
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let s: i64 = (0..n).map(|_| d[rng.random_range(0..n)]).sum();
        if s <= 0 {
            not_better += 1;
        }
    }
    Ok((not_better + 1) as f64 / (resamples + 1) as f64)
}

/// Both reports, gains in percentage points and the bootstrap p-value for
/// factual accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub baseline: MetricsReport,
    pub fused: MetricsReport,
    pub qa_gain: f64,
    pub gen_gain: f64,
    pub factual_gain: f64,
    pub p_value: f64,
}

pub fn evaluate_pair(baseline: &Evaluation, fused: &Evaluation, seed: u64) -> Result<Comparison> {
    let same_qa = baseline.qa.len() == fused.qa.len()
        && baseline.qa.iter().zip(&fused.qa).all(|(a, b)| a.triple == b.triple && a.gold == b.gold);
    let same_gen = baseline.gen.len() == fused.gen.len()
        && baseline.gen.iter().zip(&fused.gen).all(|(a, b)| a.reference == b.reference);
    if !same_qa || !same_gen {
        return Err(Error::invalid("baseline and fused were evaluated on different task sets"));
    }
    let c: Vec<bool> = baseline.qa.iter().map(|o| o.factual).collect();
    let t: Vec<bool> = fused.qa.iter().map(|o| o.factual).collect();
    let (b, f) = (&baseline.report, &fused.report);
    Ok(Comparison {
        qa_gain: 100.0 * (f.f1 - b.f1),
        gen_gain: 100.0 * (f.bleu - b.bleu),
        factual_gain: 100.0 * (f.factual_accuracy - b.factual_accuracy),
        p_value: paired_bootstrap(&c, &t, BOOTSTRAP_RESAMPLES, seed)?,
        baseline: b.clone(),
        fused: f.clone(),
    })
}

pub fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

pub fn signed_pct_points(x: f64) -> String {
    format!("{x:+.1}%")
}

fn table(title: &str, header: [&str; 5], rows: &[[String; 5]]) -> String {
    let mut w = header.map(str::len);
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = format!("| {:<w0$} |", cells[0], w0 = w[0]);
        for i in 1..5 {
            let _ = write!(s, " {:>wi$} |", cells[i], wi = w[i]);
        }
        s
    };
    let rule = format!("+{}+", w.iter().map(|x| "-".repeat(x + 2)).collect::<Vec<_>>().join("+"));
    let mut out = format!("{title}\n{rule}\n{}\n{rule}\n", line(header));
    for r in rows {
        let _ = writeln!(out, "{}", line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

/// Aligned QA and generation tables with gains relative to the baseline.
pub fn render_comparison(mode: &str, cmp: &[(&str, &Comparison)]) -> String {
    let baseline = cmp.first().map_or("baseline", |(_, c)| c.baseline.model.as_str());
    let mut qa_rows = Vec::new();
    let mut gen_rows = Vec::new();
    if let Some((_, c)) = cmp.first() {
        let b = &c.baseline;
        qa_rows.push([b.model.clone(), pct(b.precision), pct(b.recall), pct(b.f1), "-".into()]);
        gen_rows.push([
            b.model.clone(),
            format!("{:.1}", 100.0 * b.bleu),
            format!("{:.1}", 100.0 * b.rouge_l),
            format!("{:.1}", b.perplexity),
            "-".into(),
        ]);
    }
    for (_, c) in cmp {
        let f = &c.fused;
        qa_rows.push([f.model.clone(), pct(f.precision), pct(f.recall), pct(f.f1), signed_pct_points(c.qa_gain)]);
        gen_rows.push([
            f.model.clone(),
            format!("{:.1}", 100.0 * f.bleu),
            format!("{:.1}", 100.0 * f.rouge_l),
            format!("{:.1}", f.perplexity),
            signed_pct_points(c.gen_gain),
        ]);
    }
    let mut out = format!("fusion mode: {mode}\nbaseline: {baseline} (gain = model - baseline, percentage points)\n\n");
    out.push_str(&table("QA performance", ["Model", "Prec.", "Rec.", "F1", "Gain"], &qa_rows));
    out.push('\n');
    out.push_str(&table("Text generation performance", ["Model", "BLEU", "ROUGE", "PPL", "Gain"], &gen_rows));
    out.push('\n');
    for (_, c) in cmp {
        let _ = writeln!(
            out,
            "factual accuracy: {} {} vs {} {} (gain {}, paired bootstrap p = {:.4})",
            c.fused.model,
            pct(c.fused.factual_accuracy),
            c.baseline.model,
            pct(c.baseline.factual_accuracy),
            signed_pct_points(c.factual_gain),
            c.p_value
        );
    }
    out
}

/// One row per (model, metric); values printed with 6 decimals.
pub fn comparison_tsv(cmp: &[(&str, &Comparison)]) -> String {
    let mut out = String::from("model\tmetric\tvalue\n");
    let mut row = |m: &str, k: &str, v: f64| {
        let _ = writeln!(out, "{m}\t{k}\t{v:.6}");
    };
    let emit = |row: &mut dyn FnMut(&str, &str, f64), r: &MetricsReport| {
        for (k, v) in report_rows(r) {
            row(&r.model, k, v);
        }
    };
    if let Some((_, c)) = cmp.first() {
        emit(&mut row, &c.baseline);
    }
    for (_, c) in cmp {
        emit(&mut row, &c.fused);
        row(&c.fused.model, "qa_gain_points", c.qa_gain);
        row(&c.fused.model, "gen_gain_points", c.gen_gain);
        row(&c.fused.model, "factual_gain_points", c.factual_gain);
        row(&c.fused.model, "factual_p_value", c.p_value);
    }
    out
}

fn report_rows(r: &MetricsReport) -> [(&'static str, f64); 8] {
    [
        ("precision", r.precision),
        ("recall", r.recall),
        ("f1", r.f1),
        ("exact_match", r.exact_match),
        ("factual_accuracy", r.factual_accuracy),
        ("bleu", r.bleu),
        ("rouge_l", r.rouge_l),
        ("perplexity", r.perplexity),
    ]
}

/// One model's report in the same `model\tmetric\tvalue` layout.
pub fn report_tsv(r: &MetricsReport) -> String {
    let mut out = String::from("model\tmetric\tvalue\n");
    for (k, v) in report_rows(r) {
        let _ = writeln!(out, "{}\t{k}\t{v:.6}", r.model);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prf_examples() {
        assert_eq!(token_prf("paris", "paris").f1, 1.0);
        let p = token_prf("in paris", "paris");
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
        assert_eq!(p.f1, 2.0 / 3.0);
        assert_eq!(token_prf("rome", "paris").f1, 0.0);
        assert_eq!(token_prf("", "paris").f1, 0.0);
        assert_eq!(token_prf("", "").f1, 1.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("the cat sat on the mat", &["the cat sat on the mat"], 4).unwrap(), 1.0);
        let st = bleu_stats("the the the", &["the cat"], 4).unwrap();
        assert_eq!((st.matches[0], st.totals[0]), (1, 3));
        assert_eq!(bleu("dog", &["the cat"], 4).unwrap(), 0.0);
        assert!(bleu("x", &[], 4).is_err());
        assert_eq!(bleu("", &["a"], 4).unwrap(), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b c d", "a c d"), 6.0 / 7.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", ""), 1.0);
    }

    #[test]
    fn bootstrap_identical_is_one_and_clear_win_is_small() {
        let c = vec![false; 20];
        assert_eq!(paired_bootstrap(&c, &c, 1000, 0).unwrap(), 1.0);
        let t = vec![true; 20];
        assert!(paired_bootstrap(&c, &t, 1000, 0).unwrap() < 0.01);
        assert!(paired_bootstrap(&c, &t[..3], 10, 0).is_err());
    }

    #[test]
    fn percent_rendering() {
        assert_eq!(pct(0.947), "94.7%");
        assert_eq!(signed_pct_points(6.2), "+6.2%");
        assert_eq!(signed_pct_points(0.0), "+0.0%");
    }
}
