//! Dictionary entity linking by greedy longest match over normalized tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg_store::{EntityId, KnowledgeGraph};
use crate::text::{normalize, TokenizedSequence, Vocab};

/// Normalized surface forms (token sequences) and the entities they name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityLexicon {
    forms: BTreeMap<Vec<String>, BTreeSet<EntityId>>,
    by_entity: BTreeMap<EntityId, BTreeSet<String>>,
    max_len: usize,
}

/// A `[start, end)` token span linked to one entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Alignment {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LinkedSequence {
    pub tokens: TokenizedSequence,
    pub alignments: Vec<Alignment>,
}

impl LinkedSequence {
    pub fn unlinked(tokens: TokenizedSequence) -> Self {
        LinkedSequence {
            tokens,
            alignments: Vec::new(),
        }
    }

    /// Distinct linked entities, sorted.
    pub fn entities(&self) -> Vec<EntityId> {
        let set: BTreeSet<EntityId> = self.alignments.iter().map(|a| a.entity).collect();
        set.into_iter().collect()
    }
}

impl EntityLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `surface` for `entity`. Returns false if it normalizes to nothing.
    pub fn insert(&mut self, surface: &str, entity: EntityId) -> bool {
        let norm = normalize(surface);
        if norm.is_empty() {
            return false;
        }
        let toks: Vec<String> = norm.split(' ').map(str::to_string).collect();
        self.max_len = self.max_len.max(toks.len());
        self.forms.entry(toks).or_default().insert(entity);
        self.by_entity.entry(entity).or_default().insert(norm);
        true
    }

    /// Every entity label, plus alias rows from `extra` when given.
    pub fn build(g: &KnowledgeGraph, extra: Option<&Path>, strict: bool) -> Result<Self> {
        let mut lex = EntityLexicon::new();
        for e in g.entity_ids() {
            if !lex.insert(g.entity_label(e), e) {
                return Err(Error::invalid(format!(
                    "entity `{}` has an empty label",
                    g.entity_name(e)
                )));
            }
        }
        if let Some(path) = extra {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            lex.add_aliases(g, &text, &path.display().to_string(), strict)?;
        }
        Ok(lex)
    }

    /// Parse alias rows `entity_id<TAB>surface form`. Returns rows skipped in
    /// lenient mode.
    pub fn add_aliases(&mut self, g: &KnowledgeGraph, text: &str, source: &str, strict: bool) -> Result<usize> {
        let mut skipped = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let row = line
                .split_once('\t')
                .ok_or_else(|| "expected `entity_id<TAB>surface form`".to_string())
                .and_then(|(id, form)| {
                    let e = g.entity(id.trim()).map_err(|e| e.to_string())?;
                    if self.insert(form, e) {
                        Ok(())
                    } else {
                        Err("empty surface form".to_string())
                    }
                });
            match row {
                Ok(()) => {}
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
        Ok(skipped)
    }

    pub fn num_forms(&self) -> usize {
        self.forms.len()
    }

    pub fn lookup(&self, surface: &str) -> Option<&BTreeSet<EntityId>> {
        let norm = normalize(surface);
        let key: Vec<String> = norm.split(' ').map(str::to_string).collect();
        self.forms.get(&key)
    }

    /// Normalized surface forms registered for `e`.
    pub fn surface_forms(&self, e: EntityId) -> impl Iterator<Item = &str> {
        self.by_entity.get(&e).into_iter().flatten().map(String::as_str)
    }

    pub fn is_surface_of(&self, text: &str, e: EntityId) -> bool {
        self.by_entity
            .get(&e)
            .is_some_and(|forms| forms.contains(&normalize(text)))
    }

    /// Greedy left-to-right longest match; ambiguous forms take the lowest id.
    pub fn link_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Alignment> {
        let mut out = Vec::new();
        let mut i = 0;
        let mut key: Vec<String> = Vec::with_capacity(self.max_len);
        while i < tokens.len() {
            let longest = self.max_len.min(tokens.len() - i);
            let hit = (1..=longest).rev().find_map(|len| {
                key.clear();
                key.extend(tokens[i..i + len].iter().map(|t| t.as_ref().to_string()));
                self.forms
                    .get(&key)
                    .and_then(|ids| ids.first())
                    .map(|&e| (len, e))
            });
            match hit {
                Some((len, entity)) => {
                    out.push(Alignment {
                        start: i,
                        end: i + len,
                        entity,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }

    /// Link an encoded sequence; [UNK] positions never match.
    pub fn link(&self, seq: &TokenizedSequence, vocab: &Vocab) -> LinkedSequence {
        let toks: Vec<&str> = seq
            .ids
            .iter()
            .map(|&i| match i {
                crate::text::UNK => "",
                _ => vocab.token(i).unwrap_or(""),
            })
            .collect();
        LinkedSequence {
            tokens: seq.clone(),
            alignments: self.link_tokens(&toks),
        }
    }
}
