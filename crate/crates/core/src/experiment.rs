//! End-to-end experiment runs: configuration, artefact layout, resumable
//! stages and the report sweep over methods, granularities and variants.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{em_train, load_pharaoh, write_pharaoh, AlignOrigin, AlignmentMatrix, Direction, EmConfig, EmInit};
use crate::autoenc::{train_autoencoder, AeConfig};
use crate::confidence::{AlignmentSource, MethodSpec, Scorer, SentenceInput};
use crate::config::KvConfig;
use crate::corpus::{
    generate_corpus, segment, CorpusSpec, ParallelCorpus, SentencePair, SplitName, SubwordSequence, Task,
};
use crate::error::{Error, Result};
use crate::evalharness::{
    evaluate, label_from_reference, pseudo_labels, report_table, report_tsv, segment_label, synth_source_labels,
    write_labels, EvalReport, LabelSequence, SearchPair,
};
use crate::optim::OptimizerKind;
use crate::rng::{stage_rng, substream_seed};
use crate::seq2seq::{
    collect_states, read_hsd, train, write_hsd, ModelConfig, Seq2Seq, Side, StateMatrix, TrainConfig,
};
use crate::shallow::{FitConfig, ShallowNet};
use crate::similarity::{write_scores, Granularity, Method, ScoreSequence};
use crate::statestore::{build_index, ForestParams, IndexGranularity, IndexMode, VectorIndex};

const KNOWN_KEYS: &[&str] = &["seed", "out", "methods", "granularities", "budgets", "beam"];
const KNOWN_SECTIONS: &[&str] = &["corpus", "model", "train", "ae", "align", "index", "eval", "alignment"];

/// Where external source-word alignments come from in an experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum ExternalAlignment {
    None,
    File(PathBuf),
    /// Gold correspondence of the judged output with this fraction of links
    /// moved to a random target word.
    Synthetic(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ae_sides: Vec<Side>,
    pub bottlenecks: Vec<usize>,
    pub ae_fit: FitConfig,
    pub align_hidden: Vec<usize>,
    pub em: EmConfig,
    /// Training sentences used for EM.
    pub align_sentences: usize,
    pub index: IndexMode,
    pub methods: Vec<Method>,
    pub granularities: Vec<Granularity>,
    pub budgets: Vec<f64>,
    pub beam: usize,
    pub eval_splits: Vec<SplitName>,
    pub external: ExternalAlignment,
    canonical: String,
}

fn fit_from(c: &KvConfig, d: FitConfig) -> Result<FitConfig> {
    Ok(FitConfig {
        epochs: c.get_or("epochs", d.epochs)?,
        batch: c.get_or("batch", d.batch)?,
        lr: c.get_or("lr", d.lr)?,
        optimizer: c.get_or::<OptimizerKind>("optimizer", d.optimizer)?,
    })
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        for k in kv.keys() {
            let known = KNOWN_KEYS.contains(&k) || k.split_once('.').is_some_and(|(s, _)| KNOWN_SECTIONS.contains(&s));
            if !known {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        let seed: u64 = kv.get_or("seed", 1)?;
        let mut corpus = CorpusSpec::from_config(&kv.section("corpus"))?;
        corpus.seed = substream_seed(seed, "corpus");
        let mut model = ModelConfig::from_config(&kv.section("model"))?;
        model.seed = substream_seed(seed, "model");
        let train = TrainConfig::from_config(&kv.section("train"))?;
        let ae = kv.section("ae");
        let ae_sides = ae.get_list("sides")?.unwrap_or(vec![Side::Encoder, Side::Decoder]);
        let bottlenecks = ae.get_list("bottleneck")?.unwrap_or(vec![model.d / 2]);
        let ae_fit = fit_from(&ae, FitConfig::default())?;
        let al = kv.section("align");
        let d = model.d;
        let align_hidden = al.get_list("hidden")?.unwrap_or(vec![d / 2, d, 4 * d, 16 * d]);
        let em_default = EmConfig::default();
        let em = EmConfig {
            hidden: 0,
            iters: al.get_or("em_iters", em_default.iters)?,
            fit: fit_from(&al, em_default.fit)?,
            init: al.get_or::<EmInit>("init", em_default.init)?,
            seed: 0,
        };
        let align_sentences = al.get_or("sentences", 1000)?;
        let ix = kv.section("index");
        let index = match ix.raw("mode").unwrap_or("approximate") {
            "exact" => IndexMode::Exact,
            "approximate" => {
                let p = ForestParams::default();
                IndexMode::Approximate(ForestParams {
                    trees: ix.get_or("trees", p.trees)?,
                    leaf_size: ix.get_or("leaf_size", p.leaf_size)?,
                    search_k: ix.get_or("search_k", p.search_k)?,
                    seed: substream_seed(seed, "index"),
                })
            }
            other => return Err(Error::Config(format!("unknown index mode {other:?}"))),
        };
        let methods = kv.get_list("methods")?.unwrap_or(Method::ALL.to_vec());
        let granularities = kv.get_list("granularities")?.unwrap_or(vec![
            Granularity::Segment,
            Granularity::TargetWord,
            Granularity::SourceWord,
        ]);
        if let Some(g) = granularities
            .iter()
            .find(|g| matches!(g, Granularity::SourceSubword | Granularity::TargetSubword))
        {
            return Err(Error::Config(format!("granularity {g} is not reported")));
        }
        let budgets: Vec<f64> = kv.get_list("budgets")?.unwrap_or(vec![0.1, 0.2]);
        if budgets.is_empty() || budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("budgets must be fractions in [0, 1]".into()));
        }
        let ev = kv.section("eval");
        let eval_splits = ev
            .get_list("splits")?
            .unwrap_or(vec![SplitName::TestIn, SplitName::TestOod]);
        let alg = kv.section("alignment");
        let external = match (alg.raw("pharaoh"), alg.get::<f64>("synthetic_noise")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "alignment.pharaoh and alignment.synthetic_noise are exclusive".into(),
                ))
            }
            (Some(p), None) => ExternalAlignment::File(PathBuf::from(p)),
            (None, Some(n)) if (0.0..=1.0).contains(&n) => ExternalAlignment::Synthetic(n),
            (None, Some(n)) => return Err(Error::Config(format!("synthetic noise {n} outside [0, 1]"))),
            (None, None) => ExternalAlignment::Synthetic(0.15),
        };
        let cfg = ExperimentConfig {
            seed,
            out: PathBuf::from(kv.raw("out").unwrap_or("experiment")),
            corpus,
            model,
            train,
            ae_sides,
            bottlenecks,
            ae_fit,
            align_hidden,
            em,
            align_sentences,
            index,
            methods,
            granularities,
            budgets,
            beam: kv.get_or("beam", 8)?,
            eval_splits,
            external,
            canonical: kv.to_string(),
        };
        if cfg.beam == 0 || cfg.bottlenecks.contains(&0) || cfg.align_hidden.contains(&0) {
            return Err(Error::Config(
                "beam, bottleneck and hidden sizes must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    /// Hash of the canonical configuration text.
    pub fn hash(&self) -> String {
        hex(&self.canonical)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out)
    }

    fn ae_config(&self, side: Side, bottleneck: usize) -> AeConfig {
        AeConfig {
            bottleneck: Some(bottleneck),
            fit: self.ae_fit.clone(),
            seed: substream_seed(self.seed, &format!("ae/{side}/b{bottleneck}")),
        }
    }

    fn em_config(&self, hidden: usize) -> EmConfig {
        EmConfig {
            hidden,
            seed: substream_seed(self.seed, &format!("align/h{hidden}")),
            ..self.em.clone()
        }
    }
}

fn hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable config")
}

/// File locations of every artefact under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn states(&self, split: SplitName, side: Side) -> PathBuf {
        self.root
            .join("states")
            .join(format!("{}.{side}.hsd", split.file_stem()))
    }

    pub fn index(&self, g: IndexGranularity) -> PathBuf {
        let name = match g {
            IndexGranularity::Token => "token",
            IndexGranularity::SentenceAverage => "sentence",
        };
        self.root.join("index").join(format!("{name}.vidx"))
    }

    pub fn autoencoder(&self, side: Side, bottleneck: usize) -> PathBuf {
        self.root.join("ae").join(format!("{side}-b{bottleneck}.snet"))
    }

    pub fn aligner(&self, hidden: usize) -> PathBuf {
        self.root.join("align").join(format!("h{hidden}.snet"))
    }

    pub fn synthetic_pharaoh(&self) -> PathBuf {
        self.root.join("align").join("synthetic.pharaoh")
    }

    pub fn search(&self, split: SplitName) -> PathBuf {
        self.root
            .join("outputs")
            .join(format!("{}.search.json", split.file_stem()))
    }

    pub fn labels(&self, kind: &str, g: Granularity) -> PathBuf {
        self.root.join("labels").join(format!("{kind}.{g}.tsv"))
    }

    pub fn scores(&self, method: Method, g: Granularity, variant: &str) -> PathBuf {
        let name = if variant == "-" {
            format!("{method}.{g}.tsv")
        } else {
            format!("{method}.{g}.{variant}.tsv")
        };
        self.root.join("scores").join(name)
    }

    pub fn report_tsv(&self) -> PathBuf {
        self.root.join("report.tsv")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// `path` if it exists, otherwise an error naming the producing subcommand.
    pub fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                producer: producer.to_string(),
            })
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    pub seed: Option<u64>,
    pub paths: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub root_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    pub reports: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).expect("serialisable manifest");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Beam and greedy searches over a split, in corpus order.
pub fn run_searches(
    model: &Seq2Seq,
    corpus: &ParallelCorpus,
    split: SplitName,
    beam: usize,
) -> Result<Vec<SearchPair>> {
    corpus
        .split(split)
        .iter()
        .map(|p| SearchPair::run(model, &segment(&p.source, &corpus.table), beam))
        .collect()
}

pub fn save_searches(path: &Path, pairs: &[SearchPair]) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string(pairs).expect("serialisable search output");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_searches(path: &Path) -> Result<Vec<SearchPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// A sentence under evaluation: the corpus pair, its segmentation and the
/// judged (beam) output.
#[derive(Clone, Debug)]
pub struct EvalSentence {
    pub pair: SentencePair,
    pub source: SubwordSequence,
    pub search: SearchPair,
    pub output: SubwordSequence,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub task: Task,
    pub sentences: Vec<EvalSentence>,
}

impl EvalSet {
    pub fn new(model: &Seq2Seq, corpus: &ParallelCorpus, splits: &[(SplitName, Vec<SearchPair>)]) -> Result<Self> {
        let mut sentences = Vec::new();
        for (split, pairs) in splits {
            let ps = corpus.split(*split);
            if ps.len() != pairs.len() {
                return Err(Error::ItemMismatch(format!(
                    "{} search results for {} sentences in {}",
                    pairs.len(),
                    ps.len(),
                    split.file_stem()
                )));
            }
            for (p, s) in ps.iter().zip(pairs) {
                if p.id() != s.sentence_id {
                    return Err(Error::ItemMismatch(format!(
                        "search result for sentence {} where {} expected",
                        s.sentence_id,
                        p.id()
                    )));
                }
                let output = model
                    .hypothesis_subwords(p.id(), &s.beam)
                    .map_or_else(|| SubwordSequence::from_units(p.id(), Vec::new()), Ok)?;
                sentences.push(EvalSentence {
                    pair: p.clone(),
                    source: segment(&p.source, &corpus.table),
                    search: s.clone(),
                    output,
                });
            }
        }
        Ok(EvalSet {
            task: corpus.spec.task,
            sentences,
        })
    }

    /// `(sentence_id, source words, output words)` per sentence.
    pub fn shapes(&self) -> Vec<(u32, usize, usize)> {
        self.sentences
            .iter()
            .map(|s| (s.pair.id(), s.pair.source.len(), s.search.beam_words.len()))
            .collect()
    }

    pub fn gold_labels(&self, g: Granularity) -> Result<Vec<LabelSequence>> {
        self.sentences
            .iter()
            .map(|s| {
                let id = s.pair.id();
                let (hyp, reference) = (&s.search.beam_words, &s.pair.target.words);
                match g {
                    Granularity::Segment => Ok(segment_label(id, hyp, reference)),
                    Granularity::TargetWord => label_from_reference(id, hyp, reference),
                    Granularity::SourceWord => {
                        Ok(synth_source_labels(self.task, id, s.pair.source.len(), hyp, reference))
                    }
                    g => Err(Error::InvalidCombination(format!("no gold labels at {g}"))),
                }
            })
            .collect()
    }

    pub fn pseudo_labels(&self, g: Granularity) -> Result<Vec<LabelSequence>> {
        self.sentences
            .iter()
            .map(|s| pseudo_labels(&s.search, g, self.task))
            .collect()
    }

    /// Scores every sentence; empty outputs are skipped at target-word level.
    pub fn score(
        &self,
        scorer: &Scorer,
        spec: &MethodSpec,
        external: Option<&BTreeMap<u32, AlignmentMatrix>>,
    ) -> Result<Vec<ScoreSequence>> {
        let mut out = Vec::with_capacity(self.sentences.len());
        for s in &self.sentences {
            if s.output.is_empty() && spec.granularity == Granularity::TargetWord {
                continue;
            }
            let input = SentenceInput {
                source: &s.source,
                output: &s.output,
                external: external.and_then(|m| m.get(&s.pair.id())),
            };
            out.push(scorer.score(spec, &input)?);
        }
        Ok(out)
    }
}

/// Word alignment from the task's gold correspondence between source words
/// and output positions, clipped to the output length, with a fraction
/// `noise` of links moved to a uniformly drawn output word.
pub fn synthetic_alignments(set: &EvalSet, noise: f64, seed: u64) -> Vec<AlignmentMatrix> {
    let mut rng = stage_rng(seed, "alignment/synthetic");
    set.shapes()
        .into_iter()
        .map(|(id, src_len, tgt_len)| {
            let mut links = Vec::new();
            for i in 0..src_len {
                let gold = set.task.gold_target_index(i, src_len);
                let noisy = rng.gen::<f64>() < noise;
                let j = if noisy && tgt_len > 0 {
                    rng.gen_range(0..tgt_len)
                } else {
                    gold
                };
                if j < tgt_len {
                    links.push((i, j));
                }
            }
            links.sort_unstable();
            links.dedup();
            AlignmentMatrix {
                sentence_id: id,
                src_len,
                tgt_len,
                soft: None,
                links,
                origin: AlignOrigin::ExternalPharaoh,
            }
        })
        .collect()
}

/// In-memory results of a run.
pub struct ExperimentOutcome {
    pub reports: Vec<EvalReport>,
    pub manifest: Manifest,
    pub model: Seq2Seq,
    pub corpus: ParallelCorpus,
    pub eval: EvalSet,
    pub token_index: VectorIndex,
    pub sentence_index: VectorIndex,
    pub autoencoders: BTreeMap<(Side, usize), ShallowNet>,
    pub aligners: BTreeMap<usize, ShallowNet>,
    /// Stages rebuilt in this run, in execution order.
    pub rebuilt: Vec<String>,
}

impl ExperimentOutcome {
    pub fn report(&self, method: Method, g: Granularity, variant: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.granularity == g && r.variant == variant)
    }

    pub fn scorer(&self, bottleneck: usize, hidden: Option<usize>) -> Scorer<'_> {
        Scorer {
            model: &self.model,
            token_index: Some(&self.token_index),
            sentence_index: Some(&self.sentence_index),
            enc_ae: self.autoencoders.get(&(Side::Encoder, bottleneck)),
            dec_ae: self.autoencoders.get(&(Side::Decoder, bottleneck)),
            aligner: hidden.and_then(|h| self.aligners.get(&h)),
        }
    }
}

struct Runner {
    layout: Layout,
    manifest: Manifest,
    rebuilt: Vec<String>,
}

impl Runner {
    fn stage<T>(
        &mut self,
        name: &str,
        hash: String,
        seed: Option<u64>,
        paths: &[PathBuf],
        load: impl FnOnce() -> Result<T>,
        build: impl FnOnce() -> Result<T>,
    ) -> Result<(T, String)> {
        let fresh = self
            .manifest
            .stages
            .get(name)
            .is_some_and(|r| r.hash == hash && paths.iter().all(|p| p.exists()));
        let value = if fresh {
            load()?
        } else {
            for p in paths {
                ensure_parent(p)?;
            }
            let v = build()?;
            self.rebuilt.push(name.to_string());
            v
        };
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                hash: hash.clone(),
                seed,
                paths: paths.iter().map(|p| self.layout.rel(p)).collect(),
            },
        );
        self.manifest.save(&self.layout.manifest())?;
        Ok((value, hash))
    }
}

/// Report label of a cell: autoencoder bottleneck and alignment source.
pub fn variant_name(bottleneck: Option<usize>, alignment: Option<(&AlignmentSource, Option<usize>)>) -> String {
    let mut parts = Vec::new();
    if let Some(b) = bottleneck {
        parts.push(format!("b{b}"));
    }
    match alignment {
        Some((AlignmentSource::Internal, Some(h))) => parts.push(format!("internal-h{h}")),
        Some((AlignmentSource::Internal, None)) => parts.push("internal".into()),
        Some((AlignmentSource::Pharaoh(_), _)) => parts.push("pharaoh".into()),
        None => {}
    }
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

/// Autoencoder side a method depends on.
pub fn needs_ae(m: Method) -> Option<Side> {
    match m {
        Method::EncAuto | Method::EncAutoProb => Some(Side::Encoder),
        Method::DecAuto | Method::DecAutoProb => Some(Side::Decoder),
        _ => None,
    }
}

/// Runs every stage, reusing artefacts whose stage hash is unchanged, and
/// writes the report, label and score files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let layout = cfg.layout();
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let manifest = match Manifest::load(&layout.manifest()) {
        Ok(m) => m,
        Err(Error::Io { .. }) => Manifest::default(),
        Err(e) => return Err(e),
    };
    let mut run = Runner {
        layout: layout.clone(),
        manifest,
        rebuilt: Vec::new(),
    };
    run.manifest.config_hash = cfg.hash();
    run.manifest.root_seed = cfg.seed;
    run.manifest.reports.clear();

    let cdir = layout.corpus();
    let (corpus, h_corpus) = run.stage(
        "corpus",
        hex(&format!("corpus\n{}", cfg.corpus.to_config())),
        Some(cfg.corpus.seed),
        &[cdir.join("corpus.cfg")],
        || ParallelCorpus::load(&cdir),
        || {
            let c = generate_corpus(&cfg.corpus)?;
            c.save(&cdir)?;
            Ok(c)
        },
    )?;

    let mpath = layout.model();
    let (model, h_model) = run.stage(
        "model",
        hex(&format!(
            "model\n{h_corpus}\n{}\n{}",
            json(&cfg.model),
            json(&cfg.train)
        )),
        Some(cfg.model.seed),
        std::slice::from_ref(&mpath),
        || Seq2Seq::load(&mpath),
        || {
            let (m, _) = train(&corpus, &cfg.model, &cfg.train)?;
            m.save(&mpath)?;
            Ok(m)
        },
    )?;

    let enc_path = layout.states(SplitName::Train, Side::Encoder);
    let dec_path = layout.states(SplitName::Train, Side::Decoder);
    let ((enc_states, dec_states), h_states) = run.stage(
        "states",
        hex(&format!("states\n{h_model}")),
        None,
        &[enc_path.clone(), dec_path.clone()],
        || {
            Ok((
                read_hsd(&enc_path, Side::Encoder)?.1,
                read_hsd(&dec_path, Side::Decoder)?.1,
            ))
        },
        || {
            let enc = collect_states(&model, &corpus, SplitName::Train, Side::Encoder)?;
            let dec = collect_states(&model, &corpus, SplitName::Train, Side::Decoder)?;
            write_hsd(&enc_path, model.d(), &enc)?;
            write_hsd(&dec_path, model.d(), &dec)?;
            Ok((enc, dec))
        },
    )?;

    let tok_path = layout.index(IndexGranularity::Token);
    let sent_path = layout.index(IndexGranularity::SentenceAverage);
    let ((token_index, sentence_index), _) = run.stage(
        "index",
        hex(&format!("index\n{h_states}\n{}", json(&cfg.index))),
        match cfg.index {
            IndexMode::Approximate(p) => Some(p.seed),
            IndexMode::Exact => None,
        },
        &[tok_path.clone(), sent_path.clone()],
        || Ok((VectorIndex::load(&tok_path)?, VectorIndex::load(&sent_path)?)),
        || {
            let t = build_index(&enc_states, IndexGranularity::Token, cfg.index)?;
            let s = build_index(&enc_states, IndexGranularity::SentenceAverage, cfg.index)?;
            t.save(&tok_path)?;
            s.save(&sent_path)?;
            Ok((t, s))
        },
    )?;

    let mut autoencoders = BTreeMap::new();
    for &side in &cfg.ae_sides {
        for &b in &cfg.bottlenecks {
            let ae_cfg = cfg.ae_config(side, b);
            let path = layout.autoencoder(side, b);
            let states = match side {
                Side::Encoder => &enc_states,
                Side::Decoder => &dec_states,
            };
            let (net, _) = run.stage(
                &format!("ae/{side}/b{b}"),
                hex(&format!("ae\n{h_states}\n{}", json(&ae_cfg))),
                Some(ae_cfg.seed),
                std::slice::from_ref(&path),
                || ShallowNet::load(&path),
                || {
                    let (net, _) = train_autoencoder(states, &ae_cfg)?;
                    net.save(&path)?;
                    Ok(net)
                },
            )?;
            autoencoders.insert((side, b), net);
        }
    }

    let mut aligners = BTreeMap::new();
    let align_pairs: Vec<(StateMatrix, StateMatrix)> = enc_states
        .iter()
        .cloned()
        .zip(dec_states.iter().cloned())
        .take(cfg.align_sentences)
        .collect();
    for &h in &cfg.align_hidden {
        let em_cfg = cfg.em_config(h);
        let path = layout.aligner(h);
        let (net, _) = run.stage(
            &format!("align/h{h}"),
            hex(&format!(
                "align\n{h_states}\n{}\n{}",
                cfg.align_sentences,
                json(&em_cfg)
            )),
            Some(em_cfg.seed),
            std::slice::from_ref(&path),
            || ShallowNet::load(&path),
            || {
                let (net, _) = em_train(&align_pairs, &em_cfg)?;
                net.save(&path)?;
                Ok(net)
            },
        )?;
        aligners.insert(h, net);
    }

    let mut searches = Vec::new();
    for &split in &cfg.eval_splits {
        let path = layout.search(split);
        let (pairs, _) = run.stage(
            &format!("search/{}", split.file_stem()),
            hex(&format!("search\n{h_model}\n{}", cfg.beam)),
            None,
            std::slice::from_ref(&path),
            || load_searches(&path),
            || {
                let pairs = run_searches(&model, &corpus, split, cfg.beam)?;
                save_searches(&path, &pairs)?;
                Ok(pairs)
            },
        )?;
        searches.push((split, pairs));
    }
    let eval = EvalSet::new(&model, &corpus, &searches)?;

    let external = match &cfg.external {
        ExternalAlignment::None => None,
        ExternalAlignment::File(p) => Some(load_pharaoh(p, Direction::SourceTarget, &eval.shapes())?),
        ExternalAlignment::Synthetic(noise) => {
            let seed = substream_seed(cfg.seed, "alignment");
            let a = synthetic_alignments(&eval, *noise, seed);
            write_pharaoh(&layout.synthetic_pharaoh(), &a)?;
            Some(a)
        }
    };
    let external_path = match &cfg.external {
        ExternalAlignment::None => None,
        ExternalAlignment::File(p) => Some(p.clone()),
        ExternalAlignment::Synthetic(_) => Some(layout.synthetic_pharaoh()),
    };
    let external: Option<BTreeMap<u32, AlignmentMatrix>> =
        external.map(|v| v.into_iter().map(|a| (a.sentence_id, a)).collect());

    let mut reports = Vec::new();
    for &g in &cfg.granularities {
        let gold = eval.gold_labels(g)?;
        let pseudo = eval.pseudo_labels(g)?;
        let gold_path = layout.labels("gold", g);
        let pseudo_path = layout.labels("pseudo", g);
        ensure_parent(&gold_path)?;
        write_labels(&gold_path, g, &gold)?;
        write_labels(&pseudo_path, g, &pseudo)?;
        for &m in &cfg.methods {
            let bottlenecks: Vec<Option<usize>> = match needs_ae(m) {
                Some(side) if !cfg.ae_sides.contains(&side) => {
                    return Err(Error::Config(format!(
                        "method {m} needs a {side} autoencoder (ae.sides)"
                    )))
                }
                Some(_) => cfg.bottlenecks.iter().copied().map(Some).collect(),
                None => vec![None],
            };
            let mut alignments: Vec<Option<(AlignmentSource, Option<usize>)>> = vec![None];
            if g == Granularity::SourceWord && MethodSpec::new(m, g, None).is_err() {
                alignments = cfg
                    .align_hidden
                    .iter()
                    .map(|&h| Some((AlignmentSource::Internal, Some(h))))
                    .collect();
                if let Some(p) = &external_path {
                    alignments.push(Some((AlignmentSource::Pharaoh(p.clone()), None)));
                }
            }
            for b in &bottlenecks {
                for a in &alignments {
                    let spec = MethodSpec {
                        method: m,
                        granularity: g,
                        alignment: a.as_ref().map(|x| x.0.clone()),
                    };
                    if spec.validate().is_err() {
                        continue;
                    }
                    let variant = variant_name(*b, a.as_ref().map(|x| (&x.0, x.1)));
                    let scorer = Scorer {
                        model: &model,
                        token_index: Some(&token_index),
                        sentence_index: Some(&sentence_index),
                        enc_ae: b.and_then(|b| autoencoders.get(&(Side::Encoder, b))),
                        dec_ae: b.and_then(|b| autoencoders.get(&(Side::Decoder, b))),
                        aligner: a.as_ref().and_then(|x| x.1).and_then(|h| aligners.get(&h)),
                    };
                    let scores = eval.score(&scorer, &spec, external.as_ref())?;
                    let spath = layout.scores(m, g, &variant);
                    ensure_parent(&spath)?;
                    write_scores(&spath, &scores)?;
                    let mut r = evaluate(&scores, &gold, Some(&pseudo), &cfg.budgets)?;
                    r.variant = variant;
                    reports.push(r);
                }
            }
        }
    }
    fs::write(layout.report_tsv(), report_tsv(&reports)?).map_err(|e| Error::io(layout.report_tsv(), e))?;
    fs::write(layout.report_txt(), report_table(&reports)?).map_err(|e| Error::io(layout.report_txt(), e))?;
    run.manifest.reports = vec![layout.rel(&layout.report_tsv()), layout.rel(&layout.report_txt())];
    run.manifest.save(&layout.manifest())?;
    let (manifest, rebuilt) = (run.manifest, run.rebuilt);
    Ok(ExperimentOutcome {
        reports,
        manifest,
        model,
        corpus,
        eval,
        token_index,
        sentence_index,
        autoencoders,
        aligners,
        rebuilt,
    })
}
