use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seqconf_core::align::{em_train, load_pharaoh, project_to_source, AlignmentMatrix, Direction};
use seqconf_core::autoenc::{train_autoencoder, AeConfig};
use seqconf_core::confidence::{AlignmentSource, MethodSpec, Scorer, SentenceInput};
use seqconf_core::config::KvConfig;
use seqconf_core::corpus::{generate_corpus, ParallelCorpus, SplitName};
use seqconf_core::evalharness::{
    evaluate, read_labels, report_table, report_tsv, write_labels, LabelSequence, SearchPair,
};
use seqconf_core::experiment::{
    load_searches, needs_ae, run_experiment, run_searches, save_searches, variant_name, EvalSet, ExperimentConfig,
    Layout,
};
use seqconf_core::seq2seq::{collect_states, read_hsd, train, write_hsd, DecodeMode, Seq2Seq, Side, StateMatrix};
use seqconf_core::shallow::ShallowNet;
use seqconf_core::similarity::{read_scores, write_scores, Granularity, Method, ScoreSequence};
use seqconf_core::statestore::{build_index, IndexGranularity, VectorIndex};

#[derive(Parser)]
#[command(
    name = "seqconf",
    version,
    about = "Confidence estimation for sequence-to-sequence models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding every artefact; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Variant {
    /// Autoencoder bottleneck (default: the first configured one).
    #[arg(long)]
    bottleneck: Option<usize>,
    /// Alignment predictor hidden size (default: the largest configured one).
    #[arg(long)]
    hidden: Option<usize>,
    /// Source-word alignment: internal or pharaoh:PATH.
    #[arg(long)]
    alignment: Option<AlignmentSource>,
    /// Beam width of the judged output (default: the configured width).
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic parallel corpus.
    GenCorpus,
    /// Train the sequence-to-sequence model.
    TrainModel,
    /// Write hidden states of a split.
    DumpStates {
        #[arg(long)]
        side: Option<Side>,
        #[arg(long, default_value = "train")]
        split: SplitName,
    },
    /// Build token and sentence indexes over training encoder states.
    BuildIndex,
    /// Train a state autoencoder.
    TrainAuto {
        #[arg(long)]
        side: Option<Side>,
        #[arg(long)]
        bottleneck: Option<usize>,
    },
    /// Train the alignment predictor with EM.
    TrainAlign {
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        em_iters: Option<usize>,
    },
    /// Score the evaluation outputs with one method.
    Score {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        granularity: Granularity,
        #[command(flatten)]
        variant: Variant,
    },
    /// Project target-word scores to source words.
    Project {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        variant: Variant,
    },
    /// Label outputs where beam and greedy search disagree.
    PseudoLabel {
        #[arg(long)]
        granularity: Option<Granularity>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Evaluate a score file against gold labels.
    Evaluate {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        granularity: Granularity,
        /// Comma-separated selection budgets.
        #[arg(long)]
        budget: Option<String>,
        #[command(flatten)]
        variant: Variant,
    },
    /// Run every stage and write the full report.
    RunExperiment {
        #[arg(long)]
        beam: Option<usize>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    layout: Layout,
}

impl Ctx {
    fn new(common: &Common, extra: &[(&str, String)]) -> Result<Self> {
        let mut kv = match &common.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        if let Some(s) = common.seed {
            kv.set("seed", s);
        }
        if let Some(o) = &common.out {
            kv.set("out", o.display());
        }
        for (k, v) in extra {
            kv.set(*k, v);
        }
        let cfg = ExperimentConfig::from_kv(&kv)?;
        let layout = cfg.layout();
        Ok(Ctx { cfg, layout })
    }

    fn corpus(&self) -> Result<ParallelCorpus> {
        let dir = self.layout.corpus();
        Layout::require(dir.join("corpus.cfg"), "gen-corpus")?;
        Ok(ParallelCorpus::load(&dir)?)
    }

    fn model(&self) -> Result<Seq2Seq> {
        Ok(Seq2Seq::load(&Layout::require(self.layout.model(), "train-model")?)?)
    }

    fn states(&self, side: Side) -> Result<Vec<StateMatrix>> {
        let p = Layout::require(self.layout.states(SplitName::Train, side), "dump-states")?;
        Ok(read_hsd(&p, side)?.1)
    }

    fn index(&self, g: IndexGranularity) -> Result<VectorIndex> {
        Ok(VectorIndex::load(&Layout::require(
            self.layout.index(g),
            "build-index",
        )?)?)
    }

    fn autoencoder(&self, side: Side, b: usize) -> Result<ShallowNet> {
        Ok(ShallowNet::load(&Layout::require(
            self.layout.autoencoder(side, b),
            "train-auto",
        )?)?)
    }

    fn aligner(&self, h: usize) -> Result<ShallowNet> {
        Ok(ShallowNet::load(&Layout::require(
            self.layout.aligner(h),
            "train-align",
        )?)?)
    }

    /// Search outputs of the evaluation splits, reusing cached ones made with
    /// the same beam width after the model was last written.
    fn eval_set(&self, model: &Seq2Seq, corpus: &ParallelCorpus, beam: Option<usize>) -> Result<EvalSet> {
        let beam = beam.unwrap_or(self.cfg.beam);
        let model_time = fs::metadata(self.layout.model()).and_then(|m| m.modified()).ok();
        let mut splits = Vec::new();
        for &split in &self.cfg.eval_splits {
            let path = self.layout.search(split);
            let fresh = match (fs::metadata(&path).and_then(|m| m.modified()), model_time) {
                (Ok(t), Some(m)) => t >= m,
                _ => false,
            };
            let cached: Option<Vec<SearchPair>> = if fresh { Some(load_searches(&path)?) } else { None };
            let pairs = match cached {
                Some(p) if p.iter().all(|s| s.beam.mode == DecodeMode::Beam(beam)) => p,
                _ => {
                    let p = run_searches(model, corpus, split, beam)?;
                    save_searches(&path, &p)?;
                    p
                }
            };
            splits.push((split, pairs));
        }
        Ok(EvalSet::new(model, corpus, &splits)?)
    }

    fn external(&self, path: &Path, eval: &EvalSet) -> Result<BTreeMap<u32, AlignmentMatrix>> {
        Ok(load_pharaoh(path, Direction::SourceTarget, &eval.shapes())?
            .into_iter()
            .map(|a| (a.sentence_id, a))
            .collect())
    }
}

fn sides(side: Option<Side>) -> Vec<Side> {
    side.map_or(vec![Side::Encoder, Side::Decoder], |s| vec![s])
}

fn resolved(ctx: &Ctx, method: Method, v: &Variant) -> (Option<usize>, Option<usize>) {
    let b = needs_ae(method).map(|_| v.bottleneck.unwrap_or(ctx.cfg.bottlenecks[0]));
    let largest = ctx.cfg.align_hidden.iter().copied().max().unwrap_or(ctx.cfg.model.d);
    let h = match v.alignment {
        Some(AlignmentSource::Internal) => Some(v.hidden.unwrap_or(largest)),
        _ => None,
    };
    (b, h)
}

fn cell_variant(ctx: &Ctx, method: Method, g: Granularity, v: &Variant) -> String {
    let (b, h) = resolved(ctx, method, v);
    let alignment = match (&v.alignment, g) {
        (Some(a), Granularity::SourceWord) if MethodSpec::new(method, g, None).is_err() => Some((a, h)),
        _ => None,
    };
    variant_name(b, alignment)
}

struct Parts {
    token: Option<VectorIndex>,
    sentence: Option<VectorIndex>,
    enc: Option<ShallowNet>,
    dec: Option<ShallowNet>,
    aligner: Option<ShallowNet>,
}

fn scorer_parts(ctx: &Ctx, method: Method, g: Granularity, v: &Variant) -> Result<Parts> {
    let (b, h) = resolved(ctx, method, v);
    let token = match method {
        Method::EncDist => Some(ctx.index(IndexGranularity::Token)?),
        _ => None,
    };
    let sentence = match method {
        Method::EncSentDist => Some(ctx.index(IndexGranularity::SentenceAverage)?),
        _ => None,
    };
    let (mut enc, mut dec) = (None, None);
    match (needs_ae(method), b) {
        (Some(Side::Encoder), Some(b)) => enc = Some(ctx.autoencoder(Side::Encoder, b)?),
        (Some(Side::Decoder), Some(b)) => dec = Some(ctx.autoencoder(Side::Decoder, b)?),
        _ => {}
    }
    let aligner = match (h, g) {
        (Some(h), Granularity::SourceWord) => Some(ctx.aligner(h)?),
        _ => None,
    };
    Ok(Parts {
        token,
        sentence,
        enc,
        dec,
        aligner,
    })
}

fn make_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    make_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Cmd::GenCorpus => {
            let ctx = Ctx::new(common, &[])?;
            let c = generate_corpus(&ctx.cfg.corpus)?;
            c.save(&ctx.layout.corpus())?;
            println!(
                "corpus: {} train, {} dev, {} test_in, {} test_ood -> {}",
                c.train.len(),
                c.dev.len(),
                c.test_in.len(),
                c.test_ood.len(),
                ctx.layout.corpus().display()
            );
        }
        Cmd::TrainModel => {
            let ctx = Ctx::new(common, &[])?;
            let corpus = ctx.corpus()?;
            let (model, report) = train(&corpus, &ctx.cfg.model, &ctx.cfg.train)?;
            model.save(&ctx.layout.model())?;
            for (e, l) in report.epoch_loss.iter().enumerate() {
                eprintln!("epoch {} loss {l:.5}", e + 1);
            }
            println!(
                "dev cross-entropy {:.5} -> {}",
                report.dev_xent,
                ctx.layout.model().display()
            );
        }
        Cmd::DumpStates { side, split } => {
            let ctx = Ctx::new(common, &[])?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            for s in sides(side) {
                let states = collect_states(&model, &corpus, split, s)?;
                let path = ctx.layout.states(split, s);
                make_parent(&path)?;
                write_hsd(&path, model.d(), &states)?;
                println!("{} {s} records -> {}", states.len(), path.display());
            }
        }
        Cmd::BuildIndex => {
            let ctx = Ctx::new(common, &[])?;
            let states = ctx.states(Side::Encoder)?;
            for g in [IndexGranularity::Token, IndexGranularity::SentenceAverage] {
                let ix = build_index(&states, g, ctx.cfg.index)?;
                let path = ctx.layout.index(g);
                make_parent(&path)?;
                ix.save(&path)?;
                println!("{} vectors -> {}", ix.len(), path.display());
            }
        }
        Cmd::TrainAuto { side, bottleneck } => {
            let ctx = Ctx::new(common, &[])?;
            let bs = bottleneck.map_or(ctx.cfg.bottlenecks.clone(), |b| vec![b]);
            for (s, b) in sides(side).into_iter().flat_map(|s| bs.iter().map(move |&b| (s, b))) {
                let states = ctx.states(s)?;
                let cfg = AeConfig {
                    bottleneck: Some(b),
                    fit: ctx.cfg.ae_fit.clone(),
                    seed: seqconf_core::rng::substream_seed(ctx.cfg.seed, &format!("ae/{s}/b{b}")),
                };
                let (net, report) = train_autoencoder(&states, &cfg)?;
                let path = ctx.layout.autoencoder(s, b);
                make_parent(&path)?;
                net.save(&path)?;
                println!(
                    "{s} autoencoder b{b}: final mse {:.6} -> {}",
                    report.final_mse(),
                    path.display()
                );
            }
        }
        Cmd::TrainAlign { hidden, em_iters } => {
            let mut extra = Vec::new();
            if let Some(n) = em_iters {
                extra.push(("align.em_iters", n.to_string()));
            }
            let ctx = Ctx::new(common, &extra)?;
            let enc = ctx.states(Side::Encoder)?;
            let dec = ctx.states(Side::Decoder)?;
            let pairs: Vec<_> = enc.into_iter().zip(dec).take(ctx.cfg.align_sentences).collect();
            for h in hidden.map_or(ctx.cfg.align_hidden.clone(), |h| vec![h]) {
                let mut em = ctx.cfg.em.clone();
                em.hidden = h;
                em.seed = seqconf_core::rng::substream_seed(ctx.cfg.seed, &format!("align/h{h}"));
                let (net, report) = em_train(&pairs, &em)?;
                let path = ctx.layout.aligner(h);
                make_parent(&path)?;
                net.save(&path)?;
                for (i, l) in report.m_step_loss.iter().enumerate() {
                    eprintln!("h{h} EM iteration {} M-step loss {:?}", i + 1, l);
                }
                println!("alignment predictor h{h} -> {}", path.display());
            }
        }
        Cmd::Score {
            method,
            granularity,
            variant,
        } => {
            let ctx = Ctx::new(common, &[])?;
            let spec = MethodSpec::new(method, granularity, variant.alignment.clone())?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let eval = ctx.eval_set(&model, &corpus, variant.beam)?;
            let parts = scorer_parts(&ctx, method, granularity, &variant)?;
            let scorer = Scorer {
                model: &model,
                token_index: parts.token.as_ref(),
                sentence_index: parts.sentence.as_ref(),
                enc_ae: parts.enc.as_ref(),
                dec_ae: parts.dec.as_ref(),
                aligner: parts.aligner.as_ref(),
            };
            let external = match &spec.alignment {
                Some(AlignmentSource::Pharaoh(p)) if granularity == Granularity::SourceWord => {
                    Some(ctx.external(p, &eval)?)
                }
                _ => None,
            };
            let scores = eval.score(&scorer, &spec, external.as_ref())?;
            let path = ctx
                .layout
                .scores(method, granularity, &cell_variant(&ctx, method, granularity, &variant));
            make_parent(&path)?;
            write_scores(&path, &scores)?;
            println!("{} sentences scored -> {}", scores.len(), path.display());
        }
        Cmd::Project { method, variant } => {
            let ctx = Ctx::new(common, &[])?;
            let Some(alignment) = variant.alignment.clone() else {
                bail!("project needs --alignment internal or --alignment pharaoh:PATH");
            };
            MethodSpec::new(method, Granularity::SourceWord, Some(alignment.clone()))?;
            let (b, _) = resolved(&ctx, method, &variant);
            let src = ctx
                .layout
                .scores(method, Granularity::TargetWord, &variant_name(b, None));
            let target = read_scores(&Layout::require(src, "score")?)?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let eval = ctx.eval_set(&model, &corpus, variant.beam)?;
            let alignments: BTreeMap<u32, AlignmentMatrix> = match &alignment {
                AlignmentSource::Pharaoh(p) => ctx.external(p, &eval)?,
                AlignmentSource::Internal => {
                    let parts = scorer_parts(&ctx, method, Granularity::SourceWord, &variant)?;
                    let mut scorer = Scorer::new(&model);
                    scorer.aligner = parts.aligner.as_ref();
                    let mut out = BTreeMap::new();
                    for s in eval.sentences.iter().filter(|s| !s.output.is_empty()) {
                        let input = SentenceInput {
                            source: &s.source,
                            output: &s.output,
                            external: None,
                        };
                        out.insert(s.pair.id(), scorer.internal_word_alignment(&input)?);
                    }
                    out
                }
            };
            let mut projected: Vec<ScoreSequence> = Vec::new();
            let mut flags = String::new();
            let mut unlinked = 0;
            for t in &target {
                let a = alignments
                    .get(&t.sentence_id)
                    .with_context(|| format!("no alignment for sentence {}", t.sentence_id))?;
                let (s, f) = project_to_source(t, a)?;
                for (i, &u) in f.iter().enumerate() {
                    flags.push_str(&format!("{}\t{i}\t{}\n", t.sentence_id, u8::from(u)));
                    unlinked += usize::from(u);
                }
                projected.push(s);
            }
            let name = cell_variant(&ctx, method, Granularity::SourceWord, &variant);
            let path = ctx.layout.scores(method, Granularity::SourceWord, &name);
            make_parent(&path)?;
            write_scores(&path, &projected)?;
            write_text(&path.with_extension("unlinked.tsv"), &flags)?;
            println!(
                "{} sentences projected, {unlinked} unlinked source words -> {}",
                projected.len(),
                path.display()
            );
        }
        Cmd::PseudoLabel { granularity, beam } => {
            let ctx = Ctx::new(common, &[])?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let eval = ctx.eval_set(&model, &corpus, beam)?;
            let gs = granularity.map_or(ctx.cfg.granularities.clone(), |g| vec![g]);
            for g in gs {
                let labels = eval.pseudo_labels(g)?;
                let path = ctx.layout.labels("pseudo", g);
                make_parent(&path)?;
                write_labels(&path, g, &labels)?;
                let (err, n): (usize, usize) = labels.iter().fold((0, 0), |a, l| (a.0 + l.errors(), a.1 + l.len()));
                println!("{g}: {err} of {n} items pseudo-ERR -> {}", path.display());
            }
        }
        Cmd::Evaluate {
            method,
            granularity,
            budget,
            variant,
        } => {
            let mut extra = Vec::new();
            if let Some(b) = budget {
                extra.push(("budgets", b));
            }
            let ctx = Ctx::new(common, &extra)?;
            let name = cell_variant(&ctx, method, granularity, &variant);
            let producer = if granularity == Granularity::SourceWord && name.contains("pharaoh") {
                "score or project"
            } else {
                "score"
            };
            let scores = read_scores(&Layout::require(
                ctx.layout.scores(method, granularity, &name),
                producer,
            )?)?;
            let corpus = ctx.corpus()?;
            let model = ctx.model()?;
            let eval = ctx.eval_set(&model, &corpus, variant.beam)?;
            let gold = eval.gold_labels(granularity)?;
            let pseudo: Vec<LabelSequence> = {
                let p = ctx.layout.labels("pseudo", granularity);
                if p.exists() {
                    read_labels(&p)?.1
                } else {
                    eval.pseudo_labels(granularity)?
                }
            };
            let mut report = evaluate(&scores, &gold, Some(&pseudo), &ctx.cfg.budgets)?;
            report.variant = name.clone();
            let reports = [report];
            print!("{}", report_table(&reports)?);
            let path = ctx
                .layout
                .root
                .join("eval")
                .join(format!("{method}.{granularity}.{name}.tsv"));
            write_text(&path, &report_tsv(&reports)?)?;
        }
        Cmd::RunExperiment { beam } => {
            let mut extra = Vec::new();
            if let Some(b) = beam {
                extra.push(("beam", b.to_string()));
            }
            let ctx = Ctx::new(common, &extra)?;
            let outcome = run_experiment(&ctx.cfg)?;
            for s in &outcome.rebuilt {
                eprintln!("stage rebuilt: {s}");
            }
            print!("{}", report_table(&outcome.reports)?);
            println!("report -> {}", ctx.layout.report_tsv().display());
            println!("manifest -> {}", ctx.layout.manifest().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
