//! Knowledge graph of (subject, relation, object) triples.
//!
//! Triples are read from TSV lines `subject<TAB>relation<TAB>object[<TAB>labels]`.
//! The optional fourth field overrides label text: `subject|relation|object`,
//! where any part may be left empty to keep the default. A field without `|`
//! overrides the subject label only. Default labels are the identifier with
//! underscores turned into spaces.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject.0, self.relation.0, self.object.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// Canonical identifier plus label text for each dense handle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Dictionary {
    ids: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Dictionary {
    fn intern(&mut self, id: &str, label: Option<&str>) -> u32 {
        if let Some(&h) = self.index.get(id) {
            if let Some(l) = label {
                self.labels[h as usize] = l.to_string();
            }
            return h;
        }
        let h = self.ids.len() as u32;
        self.ids.push(id.to_string());
        self.labels
            .push(label.map_or_else(|| default_label(id), str::to_string));
        self.index.insert(id.to_string(), h);
        h
    }
}

/// Identifier with underscores as spaces, whitespace collapsed.
pub fn default_label(id: &str) -> String {
    id.replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Immutable graph with subject, subject-relation and object indexes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Dictionary,
    relations: Dictionary,
    /// Insertion order; serialization replays it so handles round-trip.
    triples: Vec<Triple>,
    members: BTreeSet<Triple>,
    by_subject: Vec<Vec<usize>>,
    by_object: Vec<Vec<usize>>,
    by_subject_relation: BTreeMap<(EntityId, RelationId), Vec<usize>>,
}

#[derive(Default)]
pub struct GraphBuilder {
    entities: Dictionary,
    relations: Dictionary,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a fact; returns false when it was already present.
    pub fn add(&mut self, subject: &str, relation: &str, object: &str) -> bool {
        self.add_labeled(subject, relation, object, [None, None, None])
    }

    pub fn add_labeled(&mut self, subject: &str, relation: &str, object: &str, labels: [Option<&str>; 3]) -> bool {
        let s = EntityId(self.entities.intern(subject, labels[0]));
        let r = RelationId(self.relations.intern(relation, labels[1]));
        let o = EntityId(self.entities.intern(object, labels[2]));
        let t = Triple::new(s, r, o);
        if self.seen.insert(t) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    pub fn build(self) -> KnowledgeGraph {
        let n = self.entities.ids.len();
        let mut by_subject = vec![Vec::new(); n];
        let mut by_object = vec![Vec::new(); n];
        let mut by_subject_relation: BTreeMap<_, Vec<usize>> = BTreeMap::new();
        let mut order: Vec<usize> = (0..self.triples.len()).collect();
        order.sort_by_key(|&i| self.triples[i]);
        for i in order {
            let t = self.triples[i];
            by_subject[t.subject.index()].push(i);
            by_object[t.object.index()].push(i);
            by_subject_relation
                .entry((t.subject, t.relation))
                .or_default()
                .push(i);
        }
        KnowledgeGraph {
            members: self.triples.iter().copied().collect(),
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            by_subject,
            by_object,
            by_subject_relation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub graph: KnowledgeGraph,
    /// Malformed lines dropped in lenient mode.
    pub skipped: usize,
    pub duplicates: usize,
}

pub fn ingest_tsv(path: impl AsRef<Path>, strict: bool) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, &path.display().to_string(), strict)
}

pub fn parse_tsv(text: &str, source: &str, strict: bool) -> Result<Ingested> {
    let mut b = GraphBuilder::new();
    let (mut skipped, mut duplicates) = (0, 0);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Ok((s, r, o, labels)) => {
                if !b.add_labeled(s, r, o, labels) {
                    duplicates += 1;
                }
            }
            Err(msg) if strict => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: i + 1,
                    msg,
                })
            }
            Err(_) => skipped += 1,
        }
    }
    Ok(Ingested {
        graph: b.build(),
        skipped,
        duplicates,
    })
}

type ParsedLine<'a> = (&'a str, &'a str, &'a str, [Option<&'a str>; 3]);

fn parse_line(line: &str) -> std::result::Result<ParsedLine<'_>, String> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(format!("expected 3 or 4 tab-separated fields, found {}", fields.len()));
    }
    for f in &fields[..3] {
        if f.is_empty() || f.chars().any(char::is_whitespace) {
            return Err(format!("invalid identifier `{f}`"));
        }
        if default_label(f).is_empty() {
            return Err(format!("identifier `{f}` has an empty default label"));
        }
    }
    let mut labels = [None, None, None];
    if let Some(over) = fields.get(3) {
        let parts: Vec<&str> = over.split('|').map(str::trim).collect();
        if parts.len() > 3 {
            return Err("label override has more than three parts".into());
        }
        for (slot, p) in labels.iter_mut().zip(parts) {
            if !p.is_empty() {
                *slot = Some(p);
            }
        }
    }
    Ok((fields[0], fields[1], fields[2], labels))
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        GraphBuilder::new().build()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.ids.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.ids.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations() as u32).map(RelationId)
    }

    pub fn entity(&self, id: &str) -> Result<EntityId> {
        self.entities
            .index
            .get(id)
            .map(|&h| EntityId(h))
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn relation(&self, id: &str) -> Result<RelationId> {
        self.relations
            .index
            .get(id)
            .map(|&h| RelationId(h))
            .ok_or_else(|| Error::UnknownRelation(id.to_string()))
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities.ids[e.index()]
    }

    pub fn entity_label(&self, e: EntityId) -> &str {
        &self.entities.labels[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations.ids[r.index()]
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations.labels[r.index()]
    }

    pub fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::UnknownEntity(format!("#{}", e.0)))
        }
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    /// Triples in insertion order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Triples sorted by (subject, relation, object) handles.
    pub fn sorted_triples(&self) -> impl Iterator<Item = &Triple> {
        self.members.iter()
    }

    pub fn by_subject(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.by_subject[e.index()].iter().map(|&i| &self.triples[i])
    }

    pub fn by_object(&self, e: EntityId) -> impl Iterator<Item = &Triple> {
        self.by_object[e.index()].iter().map(|&i| &self.triples[i])
    }

    pub fn by_subject_relation(&self, s: EntityId, r: RelationId) -> impl Iterator<Item = &Triple> {
        self.by_subject_relation
            .get(&(s, r))
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    /// Total entries across the subject index.
    pub fn subject_index_size(&self) -> usize {
        self.by_subject.iter().map(Vec::len).sum()
    }

    /// Triples touching an entity within `radius - 1` hops of `e` (so radius 1
    /// is exactly the triples incident to `e`), sorted.
    pub fn neighbors(&self, e: EntityId, radius: usize) -> Result<Vec<Triple>> {
        self.check_entity(e)?;
        if radius == 0 {
            return Err(Error::invalid("neighbors radius must be >= 1"));
        }
        let mut dist = vec![usize::MAX; self.num_entities()];
        let mut queue = VecDeque::from([e]);
        dist[e.index()] = 0;
        let mut out = BTreeSet::new();
        while let Some(u) = queue.pop_front() {
            let d = dist[u.index()];
            if d >= radius {
                continue;
            }
            for t in self.by_subject(u).chain(self.by_object(u)) {
                out.insert(*t);
                let other = if t.subject == u { t.object } else { t.subject };
                if dist[other.index()] == usize::MAX {
                    dist[other.index()] = d + 1;
                    queue.push_back(other);
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Replace one side of `t` with a uniformly drawn entity so that the
    /// result is not a fact of the graph.
    pub fn corrupt_triple<R: Rng + ?Sized>(&self, t: &Triple, side: Side, rng: &mut R) -> Result<Triple> {
        const ATTEMPTS: usize = 64;
        if !self.contains(t) {
            return Err(Error::invalid(format!("triple {t} is not in the graph")));
        }
        let n = self.num_entities();
        if n < 2 {
            return Err(Error::invalid("corruption needs at least two entities"));
        }
        let with = |e: u32| match side {
            Side::Head => Triple::new(EntityId(e), t.relation, t.object),
            Side::Tail => Triple::new(t.subject, t.relation, EntityId(e)),
        };
        for _ in 0..ATTEMPTS {
            let c = with(rng.random_range(0..n as u32));
            if !self.contains(&c) {
                return Ok(c);
            }
        }
        // Dense neighborhoods: fall back to drawing among the valid set, which
        // keeps the distribution uniform over non-facts.
        let valid: Vec<Triple> = (0..n as u32).map(with).filter(|c| !self.contains(c)).collect();
        if valid.is_empty() {
            return Err(Error::Saturated(t.to_string(), ATTEMPTS));
        }
        Ok(valid[rng.random_range(0..valid.len())])
    }

    /// TSV form that re-ingests to an equal graph.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let (s, r, o) = (t.subject, t.relation, t.object);
            out.push_str(self.entity_name(s));
            out.push('\t');
            out.push_str(self.relation_name(r));
            out.push('\t');
            out.push_str(self.entity_name(o));
            let overrides = [
                (self.entity_label(s), self.entity_name(s)),
                (self.relation_label(r), self.relation_name(r)),
                (self.entity_label(o), self.entity_name(o)),
            ];
            if overrides.iter().any(|(l, id)| *l != default_label(id)) {
                out.push('\t');
                let parts: Vec<&str> = overrides.iter().map(|(l, _)| *l).collect();
                out.push_str(&parts.join("|"));
            }
            out.push('\n');
        }
        out
    }
}
