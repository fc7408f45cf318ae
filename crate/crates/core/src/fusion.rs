//! Knowledge fusion into the causal LM: a per-sequence KG memory of entity
//! and neighbor-triple vectors, consumed by one of four mechanisms installed
//! at a single layer. Every mechanism is scaled by a learned `fusion.alpha`
//! that starts at 0, so a fresh fused model computes exactly the base logits.
//!
//! A memory row becomes visible at the last token of the earliest mention
//! that brings it in; the KG path never sees a mention before it is complete.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg_store::{EntityId, KnowledgeGraph, Triple};
use crate::kgbert::KgEmbeddingTable;
use crate::linker::{Alignment, LinkedSequence};
use crate::params::{Bound, ParamSet};
use crate::text::TokenId;
use crate::transformer::{
    self, attend, greedy_decode, init_tensor, layer_norm_affine, linear, AttentionMode, Batch, ForwardHook,
    ForwardOutput, ModelConfig, TransformerModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FusionMode {
    GatedInjection,
    KgAttentionLayer,
    CrossLayerAdapter,
    DedicatedHead,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::GatedInjection,
        FusionMode::KgAttentionLayer,
        FusionMode::CrossLayerAdapter,
        FusionMode::DedicatedHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::GatedInjection => "gated-injection",
            FusionMode::KgAttentionLayer => "kg-attention-layer",
            FusionMode::CrossLayerAdapter => "cross-layer-adapter",
            FusionMode::DedicatedHead => "dedicated-head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Fusion acts on the residual stream leaving this layer (dedicated-head:
    /// inside this layer's attention, which must be the last one).
    pub layer: usize,
    /// Neighbor hops for memory triples.
    pub radius: usize,
    /// Train the entity/relation table along with the fusion parameters.
    pub cotrain_kg: bool,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, model: &ModelConfig) -> Self {
        FusionConfig {
            mode,
            layer: Self::default_layer(mode, model),
            radius: 1,
            cotrain_kg: false,
        }
    }

    /// The middle of the stack, or the last layer for the dedicated head.
    pub fn default_layer(mode: FusionMode, model: &ModelConfig) -> usize {
        match mode {
            FusionMode::DedicatedHead => model.n_layers - 1,
            _ => (model.n_layers - 1) / 2,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if model.mode != AttentionMode::Causal {
            return Err(Error::Config("fusion requires a causal base model".into()));
        }
        if self.layer >= model.n_layers {
            return Err(Error::Config(format!(
                "fusion.layer {} outside the model's {} layers",
                self.layer, model.n_layers
            )));
        }
        if self.mode == FusionMode::DedicatedHead && self.layer + 1 != model.n_layers {
            return Err(Error::Config(format!(
                "dedicated-head fusion must sit on the last layer ({}), not {}",
                model.n_layers - 1,
                self.layer
            )));
        }
        if self.radius == 0 {
            return Err(Error::Config("fusion.radius must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MemorySource {
    Entity(EntityId),
    Triple(Triple),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryRow {
    pub source: MemorySource,
    /// First token position allowed to attend to this row.
    pub visible_from: usize,
}

/// Row layout for one sequence: distinct linked entities sorted by id, then
/// triples within `radius` of any of them, sorted.
pub fn memory_rows(alignments: &[Alignment], g: &KnowledgeGraph, radius: usize) -> Result<Vec<MemoryRow>> {
    let mut entities: BTreeMap<EntityId, usize> = BTreeMap::new();
    for a in alignments {
        g.check_entity(a.entity)?;
        if a.end <= a.start {
            return Err(Error::invalid(format!("empty alignment at {}", a.start)));
        }
        let at = entities.entry(a.entity).or_insert(usize::MAX);
        *at = (*at).min(a.end - 1);
    }
    let mut triples: BTreeMap<Triple, usize> = BTreeMap::new();
    for (&e, &vis) in &entities {
        for t in g.neighbors(e, radius)? {
            let at = triples.entry(t).or_insert(usize::MAX);
            *at = (*at).min(vis);
        }
    }
    let ents = entities.into_iter().map(|(e, v)| MemoryRow {
        source: MemorySource::Entity(e),
        visible_from: v,
    });
    let trips = triples.into_iter().map(|(t, v)| MemoryRow {
        source: MemorySource::Triple(t),
        visible_from: v,
    });
    Ok(ents.chain(trips).collect())
}

/// Memory rows for one sequence with their vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct KgMemory {
    pub rows: Vec<MemoryRow>,
    /// `[rows, dim]`
    pub vectors: Tensor,
}

impl KgMemory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Unprojected memory: entity rows carry the entity vector, triple rows the
/// mean of subject, relation and object vectors.
pub fn build_memory(ls: &LinkedSequence, g: &KnowledgeGraph, table: &KgEmbeddingTable, radius: usize) -> Result<KgMemory> {
    let rows = memory_rows(&ls.alignments, g, radius)?;
    let d = table.d_kg;
    let mut data = Vec::with_capacity(rows.len() * d);
    for row in &rows {
        match row.source {
            MemorySource::Entity(e) => data.extend_from_slice(table.entity(e)?),
            MemorySource::Triple(t) => {
                let (s, r, o) = (table.entity(t.subject)?, table.relation(t.relation)?, table.entity(t.object)?);
                data.extend((0..d).map(|k| (s[k] + r[k] + o[k]) / 3.0));
            }
        }
    }
    let vectors = Tensor::new(&[rows.len(), d], data)?;
    Ok(KgMemory { rows, vectors })
}

pub const ALPHA: &str = "fusion.alpha";
pub const KG_ENTITY: &str = "kg.entity";
pub const KG_RELATION: &str = "kg.relation";

/// Names and shapes of the fusion and KG-table parameters, sorted.
pub fn fusion_manifest(
    fc: &FusionConfig,
    mc: &ModelConfig,
    d_kg: usize,
    n_entities: usize,
    n_relations: usize,
) -> Vec<(String, Vec<usize>)> {
    let (d, f, dh) = (mc.d_model, mc.d_ff, mc.head_dim());
    let mut m: Vec<(String, Vec<usize>)> = vec![
        (ALPHA.into(), vec![1]),
        ("fusion.w_k".into(), vec![d_kg, d]),
        ("fusion.b_k".into(), vec![d]),
        (KG_ENTITY.into(), vec![n_entities, d_kg]),
        (KG_RELATION.into(), vec![n_relations, d_kg]),
    ];
    let mut add = |prefix: &str, items: &[(&str, Vec<usize>)]| {
        for (n, s) in items {
            m.push((format!("{prefix}.{n}"), s.clone()));
        }
    };
    match fc.mode {
        FusionMode::GatedInjection => add("fusion", &[("w_g", vec![2 * d, 1]), ("b_g", vec![1])]),
        FusionMode::KgAttentionLayer => add(
            "fusion.xattn",
            &[
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("wq", vec![d, d]),
                ("bq", vec![d]),
                ("wk", vec![d, d]),
                ("bk", vec![d]),
                ("wv", vec![d, d]),
                ("bv", vec![d]),
                ("wo", vec![d, d]),
                ("bo", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("w1", vec![d, f]),
                ("b1", vec![f]),
                ("w2", vec![f, d]),
                ("b2", vec![d]),
            ],
        ),
        FusionMode::CrossLayerAdapter => add(
            "fusion.adapter",
            &[
                ("ln.gamma", vec![d]),
                ("ln.beta", vec![d]),
                ("wq", vec![d, d]),
                ("bq", vec![d]),
                ("wk", vec![d, d]),
                ("bk", vec![d]),
                ("wv", vec![d, d]),
                ("bv", vec![d]),
                ("w_a", vec![d, d]),
            ],
        ),
        FusionMode::DedicatedHead => add(
            "fusion.head",
            &[
                ("wq", vec![d, dh]),
                ("bq", vec![dh]),
                ("wk", vec![d, dh]),
                ("bk", vec![dh]),
                ("wv", vec![d, dh]),
                ("bv", vec![dh]),
                ("wo", vec![dh, d]),
            ],
        ),
    }
    m.sort();
    m
}

/// Inspection data from one fused forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionTrace {
    /// `(sequence, position, entity, gate)` at every injection site.
    pub gates: Vec<(usize, usize, EntityId, f64)>,
    /// Memory attention weights per head, `[batch, len, rows]`.
    pub memory_attention: Vec<Tensor>,
    pub memory_rows: Vec<Vec<MemoryRow>>,
}

/// A causal LM with one fusion mechanism. `params` holds the base model's
/// tensors together with `fusion.*` and `kg.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub base_config: ModelConfig,
    pub fusion: FusionConfig,
    pub params: ParamSet,
}

impl FusedModel {
    /// Wrap `base`, copying `table` into `kg.*` and drawing fresh fusion
    /// parameters with `fusion.alpha = 0`.
    pub fn init<R: Rng + ?Sized>(base: &TransformerModel, table: &KgEmbeddingTable, fusion: FusionConfig, rng: &mut R) -> Result<Self> {
        fusion.validate(&base.config)?;
        let mc = &base.config;
        let mut params = base.params.clone();
        let manifest = fusion_manifest(
            &fusion,
            mc,
            table.d_kg,
            table.entities.shape()[0],
            table.relations.shape()[0],
        );
        for (name, shape) in manifest {
            let t = match name.as_str() {
                ALPHA => Tensor::zeros(&shape),
                KG_ENTITY => table.entities.clone(),
                KG_RELATION => table.relations.clone(),
                _ => init_tensor(&name, &shape, rng),
            };
            params.insert(name, t);
        }
        Ok(FusedModel {
            base_config: mc.clone(),
            fusion,
            params,
        })
    }

    pub fn from_params(base_config: ModelConfig, fusion: FusionConfig, params: ParamSet) -> Result<Self> {
        fusion.validate(&base_config)?;
        let shape = |n: &str| params.get(n).map(|t| t.shape().to_vec());
        let (ent, rel) = (shape(KG_ENTITY)?, shape(KG_RELATION)?);
        if ent.len() != 2 || rel.len() != 2 || ent[1] != rel[1] {
            return Err(Error::Checkpoint("malformed KG table parameters".into()));
        }
        let mut want = base_config.manifest();
        want.extend(fusion_manifest(&fusion, &base_config, ent[1], ent[0], rel[0]));
        want.sort();
        if params.manifest() != want {
            return Err(Error::Checkpoint(format!(
                "parameter manifest does not match a {} fused model",
                fusion.mode
            )));
        }
        Ok(FusedModel {
            base_config,
            fusion,
            params,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(ALPHA).map(|t| t.data()[0]).unwrap_or(0.0)
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.params.get_mut(ALPHA)?.data_mut()[0] = alpha;
        Ok(())
    }

    pub fn is_fusion_param(name: &str) -> bool {
        name.starts_with("fusion.") || name.starts_with("kg.")
    }

    /// The host model alone, with the current base weights.
    pub fn base_model(&self) -> TransformerModel {
        let mut params = ParamSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| !Self::is_fusion_param(n)) {
            params.insert(n, t.clone());
        }
        TransformerModel {
            config: self.base_config.clone(),
            params,
        }
    }

    fn table_rows(&self) -> Result<(usize, usize)> {
        Ok((
            self.params.get(KG_ENTITY)?.shape()[0],
            self.params.get(KG_RELATION)?.shape()[0],
        ))
    }

    /// Full fused forward over linked sequences.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seqs: &[LinkedSequence],
        g: &KnowledgeGraph,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardOutput, Batch, FusionTrace)> {
        let ids: Vec<Vec<TokenId>> = seqs.iter().map(|s| s.tokens.ids.clone()).collect();
        let batch = Batch::from_sequences(&ids);
        let ctx = BatchContext::new(self, seqs, g, &batch)?;
        let mut hook = FusionHook {
            model: self,
            p,
            ctx: &ctx,
            memory: None,
            trace: FusionTrace {
                memory_rows: ctx.rows.clone(),
                ..Default::default()
            },
        };
        let out = transformer::forward(&self.base_config, tape, p, &batch, &mut hook, dropout_rng)?;
        let trace = hook.trace;
        Ok((out, batch, trace))
    }

    /// Logits `[batch, len, vocab]` without gradient tracking.
    pub fn logits(&self, seqs: &[LinkedSequence], g: &KnowledgeGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (out, _, _) = self.forward(&mut tape, &p, seqs, g, None)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn trace(&self, seqs: &[LinkedSequence], g: &KnowledgeGraph) -> Result<FusionTrace> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        Ok(self.forward(&mut tape, &p, seqs, g, None)?.2)
    }

    /// Projected memory (`[rows, d_model]`) for one sequence.
    pub fn memory(&self, ls: &LinkedSequence, g: &KnowledgeGraph) -> Result<KgMemory> {
        let ctx = BatchContext::new(self, std::slice::from_ref(ls), g, &Batch::from_sequences(&[ls.tokens.ids.clone()]))?;
        let d = self.base_config.d_model;
        let n = ctx.rows[0].len();
        if n == 0 {
            return Ok(KgMemory {
                rows: Vec::new(),
                vectors: Tensor::zeros(&[0, d]),
            });
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let m = ctx.memory_var(&mut tape, &p)?;
        let vectors = tape.value(m).clone().reshape(&[n, d])?;
        Ok(KgMemory {
            rows: ctx.rows[0].clone(),
            vectors,
        })
    }

    /// Greedy continuation. Alignments of the prompt stay fixed; generated
    /// tokens are not linked.
    pub fn generate(&self, prompt: &LinkedSequence, g: &KnowledgeGraph, max_new: usize) -> Result<Vec<TokenId>> {
        let v = self.base_config.vocab_size;
        greedy_decode(&prompt.tokens.ids, max_new, self.base_config.max_seq, |ids| {
            let seq = LinkedSequence {
                tokens: crate::text::TokenizedSequence::from_ids(ids.to_vec()),
                alignments: prompt.alignments.clone(),
            };
            let logits = self.logits(std::slice::from_ref(&seq), g)?;
            Ok(logits.data()[(ids.len() - 1) * v..ids.len() * v].to_vec())
        })
    }
}

/// Constant tensors describing one batch's memory and injection sites.
struct BatchContext {
    b: usize,
    t: usize,
    m: usize,
    rows: Vec<Vec<MemoryRow>>,
    /// `[b, m, n_entities]` and `[b, m, n_relations]` row composition.
    sel_e: Tensor,
    sel_r: Tensor,
    /// `[b, t, m]`, true where a position may not read a row.
    blocked: Rc<Vec<bool>>,
    /// `[b, t, 1]`, 1 where at least one row is readable.
    visible: Tensor,
    /// `[b, t, n_entities]` one-hot entity at each injection site.
    site_sel: Tensor,
    /// `[b, t, 1]`
    site_mask: Tensor,
    sites: Vec<(usize, usize, EntityId)>,
}

impl BatchContext {
    fn new(model: &FusedModel, seqs: &[LinkedSequence], g: &KnowledgeGraph, batch: &Batch) -> Result<Self> {
        let (n_e, n_r) = model.table_rows()?;
        if g.num_entities() > n_e || g.num_relations() > n_r {
            return Err(Error::invalid(format!(
                "KG table has {n_e} entities and {n_r} relations, graph has {} and {}",
                g.num_entities(),
                g.num_relations()
            )));
        }
        let (b, t) = (batch.batch, batch.len);
        let mut rows = Vec::with_capacity(b);
        let mut sites = Vec::new();
        for (bi, s) in seqs.iter().enumerate() {
            for a in &s.alignments {
                if a.end > s.tokens.ids.len() {
                    return Err(Error::invalid(format!(
                        "alignment [{}, {}) outside a sequence of length {}",
                        a.start,
                        a.end,
                        s.tokens.ids.len()
                    )));
                }
                sites.push((bi, a.end - 1, a.entity));
            }
            rows.push(memory_rows(&s.alignments, g, model.fusion.radius)?);
        }
        let m = rows.iter().map(Vec::len).max().unwrap_or(0);

        let mut sel_e = Tensor::zeros(&[b, m, n_e]);
        let mut sel_r = Tensor::zeros(&[b, m, n_r]);
        let mut blocked = vec![true; b * t * m];
        let mut visible = Tensor::zeros(&[b, t, 1]);
        for (bi, rs) in rows.iter().enumerate() {
            for (ri, row) in rs.iter().enumerate() {
                let at = (bi * m + ri) * n_e;
                match row.source {
                    MemorySource::Entity(e) => sel_e.data_mut()[at + e.index()] = 1.0,
                    MemorySource::Triple(tr) => {
                        sel_e.data_mut()[at + tr.subject.index()] += 1.0 / 3.0;
                        sel_e.data_mut()[at + tr.object.index()] += 1.0 / 3.0;
                        sel_r.data_mut()[(bi * m + ri) * n_r + tr.relation.index()] = 1.0 / 3.0;
                    }
                }
                for i in row.visible_from..t {
                    blocked[(bi * t + i) * m + ri] = false;
                    visible.data_mut()[bi * t + i] = 1.0;
                }
            }
        }
        let mut site_sel = Tensor::zeros(&[b, t, n_e]);
        let mut site_mask = Tensor::zeros(&[b, t, 1]);
        for &(bi, i, e) in &sites {
            site_sel.data_mut()[(bi * t + i) * n_e + e.index()] = 1.0;
            site_mask.data_mut()[bi * t + i] = 1.0;
        }
        Ok(BatchContext {
            b,
            t,
            m,
            rows,
            sel_e,
            sel_r,
            blocked: Rc::new(blocked),
            visible,
            site_sel,
            site_mask,
            sites,
        })
    }

    /// Projected memory `[b, m, d_model]` on the tape.
    fn memory_var(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let se = tape.constant(self.sel_e.clone());
        let sr = tape.constant(self.sel_r.clone());
        let e = tape.matmul(se, p.get(KG_ENTITY)?)?;
        let r = tape.matmul(sr, p.get(KG_RELATION)?)?;
        let raw = tape.add(e, r)?;
        linear(tape, raw, p.get("fusion.w_k")?, p.get("fusion.b_k")?)
    }
}

struct FusionHook<'a> {
    model: &'a FusedModel,
    p: &'a Bound,
    ctx: &'a BatchContext,
    memory: Option<Var>,
    trace: FusionTrace,
}

impl FusionHook<'_> {
    fn memory(&mut self, tape: &mut Tape) -> Result<Var> {
        if let Some(m) = self.memory {
            return Ok(m);
        }
        let m = self.ctx.memory_var(tape, self.p)?;
        self.memory = Some(m);
        Ok(m)
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.p.get(name)
    }

    /// Cross-attention of `x` over memory through projections under `prefix`,
    /// with the head's query/key/value columns `[lo, hi)`.
    fn cross_attend(&mut self, tape: &mut Tape, x: Var, prefix: &str, lo: usize, hi: usize) -> Result<Var> {
        let mem = self.memory(tape)?;
        let g = |n: &str| self.get(&format!("{prefix}.{n}"));
        let q = linear(tape, x, g("wq")?, g("bq")?)?;
        let k = linear(tape, mem, g("wk")?, g("bk")?)?;
        let v = linear(tape, mem, g("wv")?, g("bv")?)?;
        let full = tape.shape(q).last().copied().unwrap_or(0);
        let (q, k, v) = if (lo, hi) == (0, full) {
            (q, k, v)
        } else {
            (tape.slice(q, lo, hi)?, tape.slice(k, lo, hi)?, tape.slice(v, lo, hi)?)
        };
        let (w, out) = attend(tape, q, k, v, self.ctx.blocked.clone())?;
        self.trace.memory_attention.push(tape.value(w).clone());
        Ok(out)
    }

    fn scaled_residual(&self, tape: &mut Tape, h: Var, delta: Var) -> Result<Var> {
        let scaled = tape.mul(delta, self.get(ALPHA)?)?;
        tape.add(h, scaled)
    }

    fn gated(&mut self, tape: &mut Tape, h: Var) -> Result<Var> {
        if self.ctx.sites.is_empty() {
            return Ok(h);
        }
        let sel = tape.constant(self.ctx.site_sel.clone());
        let ent = tape.matmul(sel, self.get(KG_ENTITY)?)?;
        let pv = linear(tape, ent, self.get("fusion.w_k")?, self.get("fusion.b_k")?)?;
        let both = tape.concat(&[h, pv])?;
        let z = linear(tape, both, self.get("fusion.w_g")?, self.get("fusion.b_g")?)?;
        let gate = tape.sigmoid(z)?;
        let keep = tape.affine(gate, -1.0, 1.0)?;
        let diff = tape.sub(pv, h)?;
        let delta = tape.mul(diff, keep)?;
        let mask = tape.constant(self.ctx.site_mask.clone());
        let delta = tape.mul(delta, mask)?;
        let t = self.ctx.t;
        let gv = tape.value(gate).data();
        self.trace.gates = self.ctx.sites.iter().map(|&(b, i, e)| (b, i, e, gv[b * t + i])).collect();
        self.scaled_residual(tape, h, delta)
    }

    fn attention_layer(&mut self, tape: &mut Tape, h: Var) -> Result<Var> {
        let cfg = &self.model.base_config;
        let pre = "fusion.xattn";
        let g = |s: &Self, n: &str| s.get(&format!("{pre}.{n}"));
        let x = layer_norm_affine(tape, h, g(self, "ln1.gamma")?, g(self, "ln1.beta")?)?;
        let dh = cfg.head_dim();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            heads.push(self.cross_attend(tape, x, pre, hd * dh, (hd + 1) * dh)?);
        }
        let cat = tape.concat(&heads)?;
        let u = linear(tape, cat, g(self, "wo")?, g(self, "bo")?)?;
        let vis = tape.constant(self.ctx.visible.clone());
        let u = tape.mul(u, vis)?;
        // The FFN reads only the retrieved content, not the residual stream.
        let f = layer_norm_affine(tape, u, g(self, "ln2.gamma")?, g(self, "ln2.beta")?)?;
        let f = linear(tape, f, g(self, "w1")?, g(self, "b1")?)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, g(self, "w2")?, g(self, "b2")?)?;
        let block = tape.add(u, f)?;
        let block = tape.mul(block, vis)?;
        self.scaled_residual(tape, h, block)
    }

    fn adapter(&mut self, tape: &mut Tape, h: Var) -> Result<Var> {
        let pre = "fusion.adapter";
        let x = layer_norm_affine(tape, h, self.get(&format!("{pre}.ln.gamma"))?, self.get(&format!("{pre}.ln.beta"))?)?;
        let d = self.model.base_config.d_model;
        let out = self.cross_attend(tape, x, pre, 0, d)?;
        let avg = tape.constant(self.prefix_mean());
        let c = tape.matmul(avg, out)?;
        let z = tape.matmul(c, self.get(&format!("{pre}.w_a"))?)?;
        let z = tape.tanh(z)?;
        self.scaled_residual(tape, h, z)
    }

    /// `[b, t, t]` causal averaging over the non-pad prefix of each position.
    fn prefix_mean(&self) -> Tensor {
        let (b, t) = (self.ctx.b, self.ctx.t);
        let mut a = Tensor::zeros(&[b, t, t]);
        let data = a.data_mut();
        for bi in 0..b {
            for i in 0..t {
                let n = (i + 1) as f64;
                for j in 0..=i {
                    data[(bi * t + i) * t + j] = 1.0 / n;
                }
            }
        }
        a
    }
}

impl ForwardHook for FusionHook<'_> {
    fn after_layer(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let fc = &self.model.fusion;
        if layer != fc.layer {
            return Ok(h);
        }
        match fc.mode {
            FusionMode::GatedInjection => self.gated(tape, h),
            FusionMode::KgAttentionLayer if self.ctx.m > 0 => self.attention_layer(tape, h),
            FusionMode::CrossLayerAdapter if self.ctx.m > 0 => self.adapter(tape, h),
            _ => Ok(h),
        }
    }

    fn extra_attention(&mut self, tape: &mut Tape, layer: usize, normed: Var) -> Result<Option<Var>> {
        let fc = &self.model.fusion;
        if fc.mode != FusionMode::DedicatedHead || layer != fc.layer || self.ctx.m == 0 {
            return Ok(None);
        }
        let dh = self.model.base_config.head_dim();
        let out = self.cross_attend(tape, normed, "fusion.head", 0, dh)?;
        let out = tape.mul(out, self.get(ALPHA)?)?;
        Ok(Some(tape.matmul(out, self.get("fusion.head.wo")?)?))
    }
}
