//! End-to-end holdout experiment: synthetic KG, triple scorer, LM
//! pretraining, fusion training per mode, paired evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{FusedModel, FusionConfig, FusionMode};
use crate::kgbert::{export_embeddings, train_scorer, KgEmbeddingTable, ScorerTrainOptions, TripleScorer};
use crate::linker::EntityLexicon;
use crate::metrics::{evaluate, evaluate_pair, BaseLm, Comparison, Evaluation, FusedLm, GenExample};
use crate::optim::OptimOptions;
use crate::synth::{self, QaExample, SynthData, SynthSpec};
use crate::text::Vocab;
use crate::trainer::{encode_corpus, link_corpus, train_fused, train_lm, TrainOptions};
use crate::transformer::{AttentionMode, ModelConfig, TransformerModel};

/// Shape of the models; vocabulary size and attention mode are filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub dropout: f64,
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            mode,
            dropout: self.dropout,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1, AttentionMode::Causal);
        ModelShape {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_seq: d.max_seq,
            dropout: d.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub scorer_shape: ModelShape,
    pub lm_shape: ModelShape,
    pub scorer_train: TrainOptions,
    pub lm_train: TrainOptions,
    pub fusion_train: TrainOptions,
    pub modes: Vec<FusionMode>,
    pub radius: usize,
    pub cotrain_kg: bool,
    /// Also update the host LM's weights during fusion training.
    pub train_base: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let opts = |epochs, lr| TrainOptions {
            epochs,
            batch_size: 16,
            optim: OptimOptions::adam(lr),
            seed: 0,
        };
        ExperimentConfig {
            seed: 0,
            synth: SynthSpec {
                entities: 40,
                relations: 8,
                types: 2,
                triples_per_entity: 4,
                ..SynthSpec::default()
            },
            scorer_shape: ModelShape::default(),
            lm_shape: ModelShape::default(),
            scorer_train: opts(60, 1e-3),
            lm_train: opts(60, 3e-3),
            fusion_train: opts(200, 3e-3),
            modes: FusionMode::ALL.to_vec(),
            radius: 1,
            cotrain_kg: true,
            train_base: false,
        }
    }
}

impl ExperimentConfig {
    /// Derive every component seed from the run seed.
    pub fn reseed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.scorer_train.seed = seed.wrapping_add(1);
        self.lm_train.seed = seed.wrapping_add(2);
        self.fusion_train.seed = seed.wrapping_add(3);
        self
    }
}

/// Vocabulary over both corpora, every KG label and the templates.
pub fn build_vocab(data: &SynthData) -> Result<Vocab> {
    let mut lines = data.pretrain_corpus.clone();
    lines.extend(data.fusion_corpus.iter().cloned());
    lines.extend(synth::vocab_lines(&data.graph, &data.templates));
    Vocab::build(lines, 1)
}

/// Generation items: complete the question, compare with the full sentence.
pub fn gen_examples(data: &SynthData, qa: &[QaExample]) -> Result<Vec<GenExample>> {
    qa.iter()
        .map(|q| {
            Ok(GenExample {
                prompt: q.question.clone(),
                reference: synth::render_sentence(&data.graph, &data.templates, &q.triple)?,
            })
        })
        .collect()
}

pub struct Artifacts {
    pub data: SynthData,
    pub vocab: Vocab,
    pub scorer: TripleScorer,
    pub table: KgEmbeddingTable,
    pub lm: TransformerModel,
    pub lexicon: EntityLexicon,
    pub fused: BTreeMap<FusionMode, FusedModel>,
    pub scorer_losses: Vec<f64>,
    pub lm_losses: Vec<f64>,
    pub fusion_losses: BTreeMap<FusionMode, Vec<f64>>,
}

/// Train everything the comparison needs.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let data = synth::generate(&cfg.synth)?;
    let vocab = build_vocab(&data)?;
    let g = &data.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut scorer = TripleScorer::init(cfg.scorer_shape.config(vocab.len(), AttentionMode::Bidirectional), &mut rng)?;
    let sopts = ScorerTrainOptions {
        epochs: cfg.scorer_train.epochs,
        batch_size: cfg.scorer_train.batch_size,
        optim: cfg.scorer_train.optim.clone(),
        seed: cfg.scorer_train.seed,
        negatives_per_positive: 1,
    };
    let scorer_losses = train_scorer(g, &vocab, &mut scorer, g.triples(), &sopts)?;
    let table = export_embeddings(g, &vocab, &scorer)?;

    let mut lm = TransformerModel::init(cfg.lm_shape.config(vocab.len(), AttentionMode::Causal), &mut rng)?;
    let lm_losses = train_lm(&mut lm, &encode_corpus(&vocab, &data.pretrain_corpus), &cfg.lm_train)?;

    let lexicon = EntityLexicon::build(g, None, true)?;
    let fusion_data = link_corpus(&lexicon, &vocab, &encode_corpus(&vocab, &data.fusion_corpus));
    let mut fused = BTreeMap::new();
    let mut fusion_losses = BTreeMap::new();
    for &mode in &cfg.modes {
        let fc = FusionConfig {
            radius: cfg.radius,
            cotrain_kg: cfg.cotrain_kg,
            ..FusionConfig::new(mode, &lm.config)
        };
        let mut fm = FusedModel::init(&lm, &table, fc, &mut rng)?;
        let losses = train_fused(&mut fm, &fusion_data, g, &cfg.fusion_train, cfg.train_base)?;
        fused.insert(mode, fm);
        fusion_losses.insert(mode, losses);
    }
    Ok(Artifacts {
        data,
        vocab,
        scorer,
        table,
        lm,
        lexicon,
        fused,
        scorer_losses,
        lm_losses,
        fusion_losses,
    })
}

pub const BASELINE_NAME: &str = "base LM";

pub fn fused_name(mode: FusionMode) -> String {
    format!("base LM + KG ({mode})")
}

/// Evaluations on the held-out QA set: baseline first, then each mode.
pub fn evaluate_holdout(a: &Artifacts) -> Result<(Evaluation, Vec<(FusionMode, Evaluation)>)> {
    let qa = &a.data.qa_holdout;
    let gen = gen_examples(&a.data, qa)?;
    let sentences: Vec<String> = gen.iter().map(|g| g.reference.clone()).collect();
    let ppl = encode_corpus(&a.vocab, &sentences);
    let base = BaseLm {
        name: BASELINE_NAME.into(),
        model: &a.lm,
        vocab: &a.vocab,
    };
    let baseline = evaluate(&base, qa, &gen, &ppl, &a.lexicon)?;
    let mut out = Vec::new();
    for (&mode, fm) in &a.fused {
        let lm = FusedLm {
            name: fused_name(mode),
            model: fm,
            vocab: &a.vocab,
            lexicon: &a.lexicon,
            graph: &a.data.graph,
        };
        out.push((mode, evaluate(&lm, qa, &gen, &ppl, &a.lexicon)?));
    }
    Ok((baseline, out))
}

pub struct ExperimentResult {
    pub comparisons: Vec<(FusionMode, Comparison)>,
    pub table: String,
    pub tsv: String,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Artifacts, ExperimentResult)> {
    let a = train_all(cfg)?;
    let (baseline, fused) = evaluate_holdout(&a)?;
    let comparisons = fused
        .iter()
        .map(|(m, e)| Ok((*m, evaluate_pair(&baseline, e, cfg.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &Comparison)> = comparisons.iter().map(|(m, c)| (m.as_str(), c)).collect();
    let modes = cfg.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ");
    let table = crate::metrics::render_comparison(&modes, &refs);
    let tsv = crate::metrics::comparison_tsv(&refs);
    Ok((a, ExperimentResult { comparisons, table, tsv }))
}
