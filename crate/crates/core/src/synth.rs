//! Synthetic typed knowledge graphs, template-rendered corpora and cloze QA.
//!
//! Entities are `type_name` ids (label "type name") with pseudo-word names.
//! Relation `j` links entities of type `j mod K` to entities of type
//! `(j + 1) mod K`, so every fact has a well-typed subject and object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg_store::{parse_tsv, GraphBuilder, KnowledgeGraph, RelationId, Triple};
use crate::text::normalize;

const TYPE_WORDS: [&str; 8] = ["city", "person", "river", "company", "planet", "mineral", "film", "tribe"];
const RELATION_WORDS: [&str; 12] = [
    "capital", "founder", "neighbor", "rival", "partner", "origin", "leader", "sponsor", "mentor", "successor",
    "owner", "twin",
];
const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub entities: usize,
    pub relations: usize,
    /// Entity types; relation `j` maps type `j mod types` to `(j+1) mod types`.
    pub types: usize,
    pub triples_per_entity: usize,
    pub functional: bool,
    /// Share of triples kept out of every corpus.
    pub holdout_frac: f64,
    /// Share of the remaining triples whose sentences go to the fusion corpus
    /// rather than the pretraining corpus.
    pub fusion_frac: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            entities: 50,
            relations: 5,
            types: 5,
            triples_per_entity: 1,
            functional: true,
            holdout_frac: 0.2,
            fusion_frac: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entities < 2 || self.relations == 0 {
            return bad("synthetic graph needs >= 2 entities and >= 1 relation".into());
        }
        if self.types == 0 || self.types > self.entities {
            return bad(format!("type count {} must be in 1..={}", self.types, self.entities));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) || !(0.0..=1.0).contains(&self.fusion_frac) {
            return bad("holdout_frac must be in [0,1) and fusion_frac in [0,1]".into());
        }
        for k in 0..self.types {
            let rels = self.domain_relations(k).len();
            let objects = self.objects_of_type((k + 1) % self.types, k);
            let cap = match (self.functional, objects) {
                (_, 0) => 0,
                (true, _) => rels,
                (false, _) => rels * objects,
            };
            if self.triples_per_entity > cap {
                return bad(format!(
                    "unsatisfiable: type {k} entities cannot carry {} distinct triples",
                    self.triples_per_entity
                ));
            }
        }
        Ok(())
    }

    fn domain_relations(&self, k: usize) -> Vec<usize> {
        (0..self.relations).filter(|j| j % self.types == k).collect()
    }

    /// Entities of type `range` available as objects for a subject of type
    /// `domain` (excluding the subject itself when types coincide).
    fn objects_of_type(&self, range: usize, domain: usize) -> usize {
        let n = (0..self.entities).filter(|i| i % self.types == range).count();
        if range == domain {
            n.saturating_sub(1)
        } else {
            n
        }
    }
}

pub fn type_word(k: usize) -> String {
    TYPE_WORDS.get(k).map_or_else(|| format!("kind{k}"), |w| w.to_string())
}

pub fn relation_word(j: usize) -> String {
    RELATION_WORDS.get(j).map_or_else(|| format!("link{j}"), |w| w.to_string())
}

/// `n` distinct pseudo-words, none a prefix of another or of a reserved word.
fn pseudo_words<R: Rng + ?Sized>(n: usize, reserved: &BTreeSet<String>, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    let clash = |w: &str, other: &str| w.starts_with(other) || other.starts_with(w);
    while out.len() < n {
        let syllables = 2 + usize::from(out.len() >= 200);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*ONSETS.choose(rng).unwrap() as char);
            w.push(*VOWELS.choose(rng).unwrap() as char);
        }
        w.push(*ONSETS.choose(rng).unwrap() as char);
        if reserved.iter().any(|r| clash(&w, r)) || out.iter().any(|o| clash(&w, o)) {
            continue;
        }
        out.push(w);
    }
    out
}

/// Random typed graph; a pure function of `spec`.
pub fn generate_kg(spec: &SynthSpec) -> Result<KnowledgeGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut reserved: BTreeSet<String> = (0..spec.types).map(type_word).collect();
    reserved.extend((0..spec.relations).map(relation_word));
    reserved.extend(["the", "of", "is"].map(String::from));
    let names = pseudo_words(spec.entities, &reserved, &mut rng);
    let ids: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{}_{n}", type_word(i % spec.types)))
        .collect();
    let by_type: Vec<Vec<usize>> = (0..spec.types)
        .map(|k| (0..spec.entities).filter(|i| i % spec.types == k).collect())
        .collect();

    let mut facts: Vec<(usize, usize, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    for s in 0..spec.entities {
        let k = s % spec.types;
        let rels = spec.domain_relations(k);
        let range = &by_type[(k + 1) % spec.types];
        let mut made = 0;
        while made < spec.triples_per_entity {
            let r = if spec.functional {
                rels[made]
            } else {
                *rels.choose(&mut rng).unwrap()
            };
            let o = *range.choose(&mut rng).unwrap();
            if o == s || !seen.insert((s, r, o)) {
                continue;
            }
            facts.push((s, r, o));
            made += 1;
        }
    }
    facts.shuffle(&mut rng);
    let mut b = GraphBuilder::new();
    for (s, r, o) in facts {
        b.add(&ids[s], &relation_word(r), &ids[o]);
    }
    Ok(b.build())
}

/// Sentence and question patterns for one relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub sentence: String,
    pub question: String,
}

pub type Templates = BTreeMap<String, Template>;

/// "the {relation} of {SUBJ} is {OBJ}" for every relation of `g`.
pub fn default_templates(g: &KnowledgeGraph) -> Templates {
    g.relation_ids()
        .map(|r| {
            let phrase = g.relation_label(r);
            (
                g.relation_name(r).to_string(),
                Template {
                    sentence: format!("the {phrase} of {{SUBJ}} is {{OBJ}}"),
                    question: format!("the {phrase} of {{SUBJ}} is"),
                },
            )
        })
        .collect()
}

pub fn templates_to_tsv(t: &Templates) -> String {
    let mut s = String::new();
    for (rel, tp) in t {
        let _ = writeln!(s, "{rel}\t{}\t{}", tp.sentence, tp.question);
    }
    s
}

pub fn parse_templates(text: &str, source: &str) -> Result<Templates> {
    let mut out = Templates::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: &str| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(perr("expected `relation<TAB>sentence<TAB>question`"));
        }
        if !f[1].contains("{SUBJ}") || !f[1].contains("{OBJ}") {
            return Err(perr("sentence template needs {SUBJ} and {OBJ}"));
        }
        if !f[2].contains("{SUBJ}") || f[2].contains("{OBJ}") {
            return Err(perr("question template needs {SUBJ} and no {OBJ}"));
        }
        let tp = Template {
            sentence: f[1].to_string(),
            question: f[2].to_string(),
        };
        if out.insert(f[0].to_string(), tp).is_some() {
            return Err(perr("duplicate relation"));
        }
    }
    Ok(out)
}

pub fn load_templates(path: &Path) -> Result<Templates> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&text, &path.display().to_string())
}

fn template_for<'a>(g: &KnowledgeGraph, t: &'a Templates, r: RelationId) -> Result<&'a Template> {
    t.get(g.relation_name(r))
        .ok_or_else(|| Error::invalid(format!("no template for relation `{}`", g.relation_name(r))))
}

pub fn render_sentence(g: &KnowledgeGraph, templates: &Templates, t: &Triple) -> Result<String> {
    let tp = template_for(g, templates, t.relation)?;
    Ok(tp
        .sentence
        .replace("{SUBJ}", g.entity_label(t.subject))
        .replace("{OBJ}", g.entity_label(t.object)))
}

/// One sentence per triple of `g` outside `holdout`, in graph order.
pub fn render_corpus(g: &KnowledgeGraph, templates: &Templates, holdout: &BTreeSet<Triple>) -> Result<Vec<String>> {
    for r in g.relation_ids() {
        template_for(g, templates, r)?;
    }
    g.triples()
        .iter()
        .filter(|t| !holdout.contains(t))
        .map(|t| render_sentence(g, templates, t))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub triple: Triple,
}

/// Cloze questions for `targets`, each answered by its object's label.
pub fn make_qa(g: &KnowledgeGraph, templates: &Templates, targets: &[Triple]) -> Result<Vec<QaExample>> {
    targets
        .iter()
        .map(|t| {
            if !g.contains(t) {
                return Err(Error::invalid(format!("triple {t} is not in the graph")));
            }
            if g.by_subject_relation(t.subject, t.relation).count() > 1 {
                return Err(Error::invalid(format!(
                    "relation `{}` has several objects for `{}`",
                    g.relation_name(t.relation),
                    g.entity_name(t.subject)
                )));
            }
            let tp = template_for(g, templates, t.relation)?;
            Ok(QaExample {
                question: tp.question.replace("{SUBJ}", g.entity_label(t.subject)),
                answer: g.entity_label(t.object).to_string(),
                triple: *t,
            })
        })
        .collect()
}

pub fn qa_to_tsv(g: &KnowledgeGraph, qa: &[QaExample]) -> String {
    let mut s = String::new();
    for q in qa {
        let t = q.triple;
        let _ = writeln!(
            s,
            "{}\t{}\t{} {} {}",
            q.question,
            q.answer,
            g.entity_name(t.subject),
            g.relation_name(t.relation),
            g.entity_name(t.object)
        );
    }
    s
}

pub fn parse_qa(text: &str, g: &KnowledgeGraph, source: &str) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        let parts: Vec<&str> = f.get(2).map(|x| x.split(' ').collect()).unwrap_or_default();
        if f.len() != 3 || parts.len() != 3 {
            return Err(perr("expected `question<TAB>answer<TAB>subject relation object`".into()));
        }
        let triple = Triple::new(g.entity(parts[0])?, g.relation(parts[1])?, g.entity(parts[2])?);
        if !g.contains(&triple) {
            return Err(perr(format!("supporting triple {triple} is not in the graph")));
        }
        out.push(QaExample {
            question: f[0].to_string(),
            answer: f[1].to_string(),
            triple,
        });
    }
    Ok(out)
}

pub fn load_qa(path: &Path, g: &KnowledgeGraph) -> Result<Vec<QaExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qa(&text, g, &path.display().to_string())
}

/// Triples partitioned for the holdout experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// In the KG, in no corpus.
    pub holdout: Vec<Triple>,
    /// Sentences for LM pretraining.
    pub pretrain: Vec<Triple>,
    /// Sentences for fusion training.
    pub fusion: Vec<Triple>,
}

/// Seeded partition of the graph's triples by `spec`'s fractions; each part
/// keeps graph order.
pub fn split_triples(g: &KnowledgeGraph, spec: &SynthSpec) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5917);
    let n = g.num_triples();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = (spec.holdout_frac * n as f64).round() as usize;
    let n_fuse = (spec.fusion_frac * (n - n_hold) as f64).round() as usize;
    let mut part = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        part[i] = if rank < n_hold {
            0
        } else if rank < n_hold + n_fuse {
            2
        } else {
            1
        };
    }
    let pick = |k: u8| -> Vec<Triple> {
        g.triples()
            .iter()
            .zip(&part)
            .filter(|(_, &p)| p == k)
            .map(|(t, _)| *t)
            .collect()
    };
    Split {
        holdout: pick(0),
        pretrain: pick(1),
        fusion: pick(2),
    }
}

/// Graph, templates, split and QA sets; a pure function of the spec.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub graph: KnowledgeGraph,
    pub templates: Templates,
    pub split: Split,
    pub pretrain_corpus: Vec<String>,
    pub fusion_corpus: Vec<String>,
    pub qa_holdout: Vec<QaExample>,
    pub qa_seen: Vec<QaExample>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    let graph = generate_kg(spec)?;
    let templates = default_templates(&graph);
    let split = split_triples(&graph, spec);
    let render = |ts: &[Triple]| -> Result<Vec<String>> { ts.iter().map(|t| render_sentence(&graph, &templates, t)).collect() };
    let pretrain_corpus = render(&split.pretrain)?;
    let fusion_corpus = render(&split.fusion)?;
    let qa_holdout = make_qa(&graph, &templates, &split.holdout)?;
    let qa_seen = make_qa(&graph, &templates, &split.pretrain)?;
    Ok(SynthData {
        graph,
        templates,
        split,
        pretrain_corpus,
        fusion_corpus,
        qa_holdout,
        qa_seen,
    })
}

/// Lines for building a vocabulary that covers every KG label and template
/// word, so held-out answers are expressible.
pub fn vocab_lines(g: &KnowledgeGraph, templates: &Templates) -> Vec<String> {
    let mut lines: Vec<String> = g.entity_ids().map(|e| g.entity_label(e).to_string()).collect();
    lines.extend(g.relation_ids().map(|r| g.relation_label(r).to_string()));
    for tp in templates.values() {
        lines.push(tp.sentence.replace("{SUBJ}", " ").replace("{OBJ}", " "));
        lines.push(tp.question.replace("{SUBJ}", " "));
    }
    lines.iter().map(|l| normalize(l)).collect()
}

/// Re-read a graph written with `to_tsv`.
pub fn reparse(g: &KnowledgeGraph) -> Result<KnowledgeGraph> {
    Ok(parse_tsv(&g.to_tsv(), "<memory>", true)?.graph)
}
