//! Gold and pseudo labels, errors-found@budget and F-score sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{SubwordSequence, Task};
use crate::error::{Error, Result};
use crate::seq2seq::{DecodeMode, Hypothesis, Seq2Seq};
use crate::similarity::{Granularity, Method, Polarity, ScoreSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Ok,
    Err,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Ok => "OK",
            Label::Err => "ERR",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OK" => Ok(Label::Ok),
            "ERR" => Ok(Label::Err),
            other => Err(Error::Config(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub sentence_id: u32,
    pub granularity: Granularity,
    pub labels: Vec<Label>,
    /// Set when the labelled output was empty; `labels` is then empty for
    /// target-side granularities.
    pub empty_output: bool,
}

impl LabelSequence {
    pub fn new(sentence_id: u32, granularity: Granularity, labels: Vec<Label>) -> Self {
        LabelSequence {
            sentence_id,
            granularity,
            labels,
            empty_output: false,
        }
    }

    pub fn errors(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Err).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One step of an edit alignment between a hypothesis and a reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match {
        hyp: usize,
        reference: usize,
    },
    Sub {
        hyp: usize,
        reference: usize,
    },
    /// Reference word missing from the hypothesis; `at` hypothesis words
    /// precede the deletion point.
    Del {
        reference: usize,
        at: usize,
    },
    Ins {
        hyp: usize,
    },
}

fn cost_table<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    cost_table(hyp, reference)[hyp.len()][reference.len()]
}

/// Minimum-cost alignment with unit costs. Traced back from the end, ties
/// prefer match, then substitution, deletion and insertion.
pub fn edit_alignment<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<EditOp> {
    let d = cost_table(hyp, reference);
    let (mut i, mut j) = (hyp.len(), reference.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && hyp[i - 1] == reference[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(EditOp::Match {
                hyp: i - 1,
                reference: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(EditOp::Sub {
                hyp: i - 1,
                reference: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(EditOp::Del {
                reference: j - 1,
                at: i,
            });
            j -= 1;
        } else {
            ops.push(EditOp::Ins { hyp: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

fn hyp_labels<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Label> {
    let mut labels = vec![Label::Ok; hyp.len()];
    for op in edit_alignment(hyp, reference) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { hyp: h, .. } | EditOp::Ins { hyp: h } => labels[h] = Label::Err,
            EditOp::Del { at, .. } => {
                if at > 0 {
                    labels[at - 1] = Label::Err;
                }
                if at < hyp.len() {
                    labels[at] = Label::Err;
                }
            }
        }
    }
    labels
}

/// Target-word labels of `hyp` against `reference`. Substituted and inserted
/// words are errors, as are both neighbours of every deletion point.
pub fn label_from_reference(sentence_id: u32, hyp: &[String], reference: &[String]) -> Result<LabelSequence> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let mut out = LabelSequence::new(sentence_id, Granularity::TargetWord, hyp_labels(hyp, reference));
    out.empty_output = hyp.is_empty();
    Ok(out)
}

pub fn segment_label(sentence_id: u32, hyp: &[String], reference: &[String]) -> LabelSequence {
    let l = if hyp == reference { Label::Ok } else { Label::Err };
    LabelSequence::new(sentence_id, Granularity::Segment, vec![l])
}

/// Source-word labels: word `i` is an error unless the reference word the task
/// maps it to is matched in the edit alignment of `hyp` against `reference`.
pub fn synth_source_labels(
    task: Task,
    sentence_id: u32,
    source_len: usize,
    hyp: &[String],
    reference: &[String],
) -> LabelSequence {
    let mut matched = vec![false; reference.len()];
    for op in edit_alignment(hyp, reference) {
        if let EditOp::Match { reference: r, .. } = op {
            matched[r] = true;
        }
    }
    let labels = (0..source_len)
        .map(|i| {
            let j = task.gold_target_index(i, source_len);
            if matched.get(j).copied().unwrap_or(false) {
                Label::Ok
            } else {
                Label::Err
            }
        })
        .collect();
    let mut out = LabelSequence::new(sentence_id, Granularity::SourceWord, labels);
    out.empty_output = hyp.is_empty();
    out
}

/// Beam and greedy outputs for one source sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPair {
    pub sentence_id: u32,
    pub source_words: usize,
    pub beam: Hypothesis,
    pub greedy: Hypothesis,
    pub beam_words: Vec<String>,
    pub greedy_words: Vec<String>,
}

impl SearchPair {
    pub fn run(model: &Seq2Seq, source: &SubwordSequence, width: usize) -> Result<Self> {
        let e = model.encode(source)?;
        let beam = model.search(&e, DecodeMode::Beam(width))?;
        let greedy = model.search(&e, DecodeMode::Greedy)?;
        let id = source.sentence_id;
        Ok(SearchPair {
            sentence_id: id,
            source_words: source.word_count(),
            beam_words: model.hypothesis_words(id, &beam),
            greedy_words: model.hypothesis_words(id, &greedy),
            beam,
            greedy,
        })
    }

    pub fn differ(&self) -> bool {
        self.beam.units() != self.greedy.units()
    }
}

/// Labels the beam output wherever it disagrees with the greedy output.
/// Word labels align the two outputs like a hypothesis against a reference;
/// source-word labels treat the greedy output as the reference.
pub fn pseudo_labels(pair: &SearchPair, granularity: Granularity, task: Task) -> Result<LabelSequence> {
    let id = pair.sentence_id;
    match granularity {
        Granularity::Segment => {
            let l = if pair.differ() { Label::Err } else { Label::Ok };
            Ok(LabelSequence::new(id, Granularity::Segment, vec![l]))
        }
        Granularity::TargetWord => {
            let mut out = LabelSequence::new(id, granularity, hyp_labels(&pair.beam_words, &pair.greedy_words));
            out.empty_output = pair.beam_words.is_empty();
            Ok(out)
        }
        Granularity::SourceWord => Ok(synth_source_labels(
            task,
            id,
            pair.source_words,
            &pair.beam_words,
            &pair.greedy_words,
        )),
        g => Err(Error::InvalidCombination(format!("no pseudo labels at {g}"))),
    }
}

pub fn write_labels(path: &Path, granularity: Granularity, seqs: &[LabelSequence]) -> Result<()> {
    let mut out = format!("# granularity={granularity}\n");
    for s in seqs {
        for (i, l) in s.labels.iter().enumerate() {
            let pos = if granularity == Granularity::Segment {
                -1
            } else {
                i as i64
            };
            out.push_str(&format!("{}\t{}\t{}\n", s.sentence_id, pos, l));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<(Granularity, Vec<LabelSequence>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let granularity: Granularity = match lines.next() {
        Some((_, h)) => h
            .strip_prefix("# granularity=")
            .ok_or_else(|| Error::format(path, "missing granularity header"))?
            .parse()?,
        None => return Err(Error::format(path, "empty label file")),
    };
    let mut out: Vec<LabelSequence> = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        let id: u32 = f[0].parse().map_err(|_| bad("bad sentence id"))?;
        let pos: i64 = f[1].parse().map_err(|_| bad("bad position"))?;
        let label: Label = f[2].parse().map_err(|_| bad("bad label"))?;
        let expect = match out.last() {
            Some(s) if s.sentence_id == id => s.len() as i64,
            _ => 0,
        };
        let pos_ok = if granularity == Granularity::Segment {
            pos == -1
        } else {
            pos == expect
        };
        if !pos_ok {
            return Err(bad("positions out of order"));
        }
        match out.last_mut() {
            Some(s) if s.sentence_id == id && granularity != Granularity::Segment => s.labels.push(label),
            _ => out.push(LabelSequence::new(id, granularity, vec![label])),
        }
    }
    Ok((granularity, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemKey {
    pub sentence_id: u32,
    pub position: i64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Item {
    pub key: ItemKey,
    pub score: f64,
    pub label: Label,
}

/// Scored, labelled items sharing one polarity.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemSet {
    pub polarity: Polarity,
    pub items: Vec<Item>,
}

impl ItemSet {
    pub fn new(polarity: Polarity, items: Vec<Item>) -> Self {
        ItemSet { polarity, items }
    }

    /// Builds items from flat score and label vectors keyed by position.
    pub fn from_slices(polarity: Polarity, scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} scores, {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let items = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&score, &label))| Item {
                key: ItemKey {
                    sentence_id: i as u32,
                    position: 0,
                },
                score,
                label,
            })
            .collect();
        Ok(ItemSet { polarity, items })
    }

    /// Pairs score and label sequences by sentence id. Empty label sequences
    /// (empty outputs at word granularity) are skipped.
    pub fn pair(scores: &[ScoreSequence], labels: &[LabelSequence]) -> Result<Self> {
        let polarity = scores.first().map_or(Polarity::Probability, |s| s.polarity);
        if let Some(s) = scores.iter().find(|s| s.polarity != polarity) {
            return Err(Error::ItemMismatch(format!(
                "sentence {}: mixed score polarities",
                s.sentence_id
            )));
        }
        let mut by_id: BTreeMap<u32, &ScoreSequence> = BTreeMap::new();
        for s in scores {
            if by_id.insert(s.sentence_id, s).is_some() {
                return Err(Error::ItemMismatch(format!("sentence {} scored twice", s.sentence_id)));
            }
        }
        let mut items = Vec::new();
        let mut used = 0;
        let mut seen = std::collections::BTreeSet::new();
        for l in labels {
            if !seen.insert(l.sentence_id) {
                return Err(Error::ItemMismatch(format!(
                    "sentence {} labelled twice",
                    l.sentence_id
                )));
            }
            if l.is_empty() {
                if by_id.contains_key(&l.sentence_id) {
                    return Err(Error::ItemMismatch(format!(
                        "sentence {}: scores for an empty output",
                        l.sentence_id
                    )));
                }
                continue;
            }
            let s = by_id
                .get(&l.sentence_id)
                .ok_or_else(|| Error::ItemMismatch(format!("sentence {} has labels but no scores", l.sentence_id)))?;
            if s.len() != l.len() {
                return Err(Error::ItemMismatch(format!(
                    "sentence {}: {} scores, {} labels",
                    l.sentence_id,
                    s.len(),
                    l.len()
                )));
            }
            used += 1;
            let seg = l.granularity == Granularity::Segment;
            for (i, (&score, &label)) in s.scores.iter().zip(&l.labels).enumerate() {
                items.push(Item {
                    key: ItemKey {
                        sentence_id: l.sentence_id,
                        position: if seg { -1 } else { i as i64 },
                    },
                    score,
                    label,
                });
            }
        }
        if used != by_id.len() {
            let extra = by_id.keys().find(|id| !seen.contains(id)).expect("unpaired score");
            return Err(Error::ItemMismatch(format!(
                "sentence {extra} has scores but no labels"
            )));
        }
        items.sort_by_key(|i| i.key);
        Ok(ItemSet { polarity, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn errors(&self) -> usize {
        self.items.iter().filter(|i| i.label == Label::Err).count()
    }

    /// Same items relabelled; keys must agree one to one.
    pub fn relabel(&self, other: &ItemSet) -> Result<ItemSet> {
        if self.len() != other.len() {
            return Err(Error::ItemMismatch(format!(
                "{} items against {} pseudo-labelled items",
                self.len(),
                other.len()
            )));
        }
        let mut out = self.clone();
        for (a, b) in out.items.iter_mut().zip(&other.items) {
            if a.key != b.key {
                return Err(Error::ItemMismatch(format!(
                    "sentence {} position {} vs sentence {} position {}",
                    a.key.sentence_id, a.key.position, b.key.sentence_id, b.key.position
                )));
            }
            a.label = b.label;
        }
        Ok(out)
    }
}

/// Fraction of all errors among the `floor(budget * N)` least confident items.
pub fn errors_found_at(set: &ItemSet, budget: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Config(format!("budget {budget} outside [0, 1]")));
    }
    let total = set.errors();
    if total == 0 {
        return Err(Error::Undefined("errors-found needs at least one ERR item".into()));
    }
    let mut order: Vec<&Item> = set.items.iter().collect();
    let pol = set.polarity;
    order.sort_by(|a, b| {
        let c = match pol {
            Polarity::Probability => a.score.total_cmp(&b.score),
            Polarity::Distance => b.score.total_cmp(&a.score),
        };
        c.then(a.key.cmp(&b.key))
    });
    let take = ((budget * order.len() as f64) + 1e-9).floor() as usize;
    let found = order[..take.min(order.len())]
        .iter()
        .filter(|i| i.label == Label::Err)
        .count();
    Ok(found as f64 / total as f64)
}

fn predicted_err(pol: Polarity, score: f64, threshold: f64) -> bool {
    match pol {
        Polarity::Probability => score < threshold,
        Polarity::Distance => score > threshold,
    }
}

/// F1 of the ERR class when items on the worst side of `threshold` are
/// predicted ERR.
pub fn f1_at(set: &ItemSet, threshold: f64) -> f64 {
    let (mut tp, mut pred) = (0usize, 0usize);
    for i in &set.items {
        if predicted_err(set.polarity, i.score, threshold) {
            pred += 1;
            if i.label == Label::Err {
                tp += 1;
            }
        }
    }
    f1(tp, pred, set.errors())
}

fn f1(tp: usize, pred: usize, pos: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (pred + pos) as f64
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m > a && m < b {
        m
    } else {
        b
    }
}

/// Best F1 over thresholds at midpoints between distinct scores and at
/// both infinities. Returns the smallest threshold reaching it.
pub fn fscore_sweep(set: &ItemSet) -> Result<(f64, f64)> {
    let pos = set.errors();
    if pos == 0 || pos == set.len() {
        return Err(Error::Undefined(format!(
            "F-score sweep needs both classes ({pos} ERR of {})",
            set.len()
        )));
    }
    let mut sorted: Vec<(f64, bool)> = set.items.iter().map(|i| (i.score, i.label == Label::Err)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // groups of equal scores, ascending
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, e) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                g.1 += 1;
                g.2 += usize::from(e);
            }
            _ => groups.push((s, 1, usize::from(e))),
        }
    }
    let n = set.len();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(groups.windows(2).map(|w| midpoint(w[0].0, w[1].0)));
    thresholds.push(f64::INFINITY);
    // below[k]: items and errors in the first k groups
    let (mut below_n, mut below_e) = (0usize, 0usize);
    let mut best = (-1.0, f64::NEG_INFINITY);
    for (k, &t) in thresholds.iter().enumerate() {
        if k > 0 {
            let g = groups[k - 1];
            below_n += g.1;
            below_e += g.2;
        }
        let (pred, tp) = match set.polarity {
            Polarity::Probability => (below_n, below_e),
            Polarity::Distance => (n - below_n, pos - below_e),
        };
        let f = f1(tp, pred, pos);
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub granularity: Granularity,
    /// Artefact variant, such as an autoencoder bottleneck or alignment source.
    pub variant: String,
    pub items: usize,
    pub errors: usize,
    /// (budget, fraction of errors found) in the requested budget order.
    pub errors_found: Vec<(f64, f64)>,
    pub f_oracle: f64,
    pub oracle_threshold: f64,
    /// Absent when the pseudo labels hold a single class.
    pub f_pseudo: Option<f64>,
    pub pseudo_threshold: Option<f64>,
    pub pseudo_errors: usize,
}

impl EvalReport {
    pub fn found_at(&self, budget: f64) -> Option<f64> {
        self.errors_found.iter().find(|(b, _)| *b == budget).map(|&(_, f)| f)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let tag = format!("{}:{}:{}", self.method, self.granularity, self.variant);
        let mut sorted = self.errors_found.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (b, f) in &sorted {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::Invariant(format!("{tag}: errors found {f} at {b}")));
            }
        }
        for w in sorted.windows(2) {
            if w[1].1 < w[0].1 {
                return Err(Error::Invariant(format!(
                    "{tag}: errors found drops from {} at {} to {} at {}",
                    w[0].1, w[0].0, w[1].1, w[1].0
                )));
            }
        }
        if let Some(p) = self.f_pseudo {
            if p > self.f_oracle {
                return Err(Error::Invariant(format!(
                    "{tag}: pseudo-label F1 {p} exceeds oracle {}",
                    self.f_oracle
                )));
            }
        }
        Ok(())
    }
}

/// Scores a method against gold labels, with thresholds chosen on pseudo
/// labels when given.
pub fn evaluate(
    scores: &[ScoreSequence],
    gold: &[LabelSequence],
    pseudo: Option<&[LabelSequence]>,
    budgets: &[f64],
) -> Result<EvalReport> {
    let first = scores.first().ok_or(Error::EmptyInput("score sequences"))?;
    let granularity = gold.first().map_or(first.granularity, |l| l.granularity);
    if first.granularity != granularity {
        return Err(Error::ItemMismatch(format!(
            "scores at {} but labels at {granularity}",
            first.granularity
        )));
    }
    let set = ItemSet::pair(scores, gold)?;
    let errors_found = budgets
        .iter()
        .map(|&b| Ok((b, errors_found_at(&set, b)?)))
        .collect::<Result<Vec<_>>>()?;
    let (f_oracle, oracle_threshold) = fscore_sweep(&set)?;
    let (mut f_pseudo, mut pseudo_threshold, mut pseudo_errors) = (None, None, 0);
    if let Some(p) = pseudo {
        let pset = set.relabel(&ItemSet::pair(scores, p)?)?;
        pseudo_errors = pset.errors();
        if pseudo_errors > 0 && pseudo_errors < pset.len() {
            let (_, t) = fscore_sweep(&pset)?;
            f_pseudo = Some(f1_at(&set, t));
            pseudo_threshold = Some(t);
        }
    }
    let report = EvalReport {
        method: first.method,
        granularity,
        variant: "-".into(),
        items: set.len(),
        errors: set.errors(),
        errors_found,
        f_oracle,
        oracle_threshold,
        f_pseudo,
        pseudo_threshold,
        pseudo_errors,
    };
    report.check_invariants()?;
    Ok(report)
}

fn budget_header(b: f64) -> String {
    format!("found@{}%", (b * 100.0 * 1e6).round() / 1e6)
}

fn budgets_of(reports: &[EvalReport]) -> Result<Vec<f64>> {
    let budgets: Vec<f64> = reports
        .first()
        .map_or(Vec::new(), |r| r.errors_found.iter().map(|x| x.0).collect());
    for r in reports {
        if r.errors_found.iter().map(|x| x.0).ne(budgets.iter().copied()) {
            return Err(Error::ItemMismatch("reports use different budgets".into()));
        }
    }
    Ok(budgets)
}

/// Machine-readable report: one row per method and granularity.
pub fn report_tsv(reports: &[EvalReport]) -> Result<String> {
    let budgets = budgets_of(reports)?;
    let mut out = String::from("method\tgranularity\tvariant\titems\terrors");
    for &b in &budgets {
        out.push('\t');
        out.push_str(&budget_header(b));
    }
    out.push_str("\toracle\tpseudo-label\toracle_threshold\tpseudo_threshold\tpseudo_errors\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}",
            r.method, r.granularity, r.variant, r.items, r.errors
        ));
        for (_, f) in &r.errors_found {
            out.push_str(&format!("\t{f:.6}"));
        }
        out.push_str(&format!(
            "\t{:.6}\t{}\t{:.6}\t{}\t{}\n",
            r.f_oracle,
            opt(r.f_pseudo),
            r.oracle_threshold,
            opt(r.pseudo_threshold),
            r.pseudo_errors
        ));
    }
    Ok(out)
}

/// Human-readable table with percentages.
pub fn report_table(reports: &[EvalReport]) -> Result<String> {
    let budgets = budgets_of(reports)?;
    let mut header = vec![
        "method".to_string(),
        "granularity".to_string(),
        "variant".to_string(),
        "items".to_string(),
        "errors".to_string(),
    ];
    header.extend(budgets.iter().map(|&b| budget_header(b)));
    header.push("Oracle".into());
    header.push("Pseudo-label".into());
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            r.method.to_string(),
            r.granularity.to_string(),
            r.variant.clone(),
            r.items.to_string(),
            r.errors.to_string(),
        ];
        row.extend(r.errors_found.iter().map(|&(_, f)| pct(f)));
        row.push(pct(r.f_oracle));
        row.push(r.f_pseudo.map_or("-".into(), pct));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c < 3 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}
