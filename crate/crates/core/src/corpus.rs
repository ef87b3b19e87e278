//! Synthetic parallel corpora and the fixed subword segmentation.
//!
//! Words are short strings over a small alphabet. A held-out stratum of word
//! types, each containing at least one character from a reserved rare
//! alphabet, never occurs in training and is injected into the out-of-domain
//! test split. Subword units carry a trailing `@@` when the word continues in
//! the next unit, so the subword-to-word mapping is recoverable from the
//! surface forms alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::stage_rng;

pub const CONTINUATION: &str = "@@";

/// Letters used by in-domain words.
pub const COMMON_ALPHABET: &str = "abcdefghijkl";
/// Letters that only ever occur inside held-out words.
pub const RARE_ALPHABET: &str = "wxyz";

/// Smallest in-domain stratum a corpus may have.
const MIN_IN_DOMAIN_WORDS: usize = 4;
const TABLE_SIZE: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSequence {
    pub sentence_id: u32,
    pub words: Vec<String>,
}

impl WordSequence {
    pub fn new(sentence_id: u32, words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::EmptyInput("word sequence"));
        }
        if let Some(w) = words.iter().find(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(Error::InvalidSpec(format!("invalid word token {w:?}")));
        }
        Ok(WordSequence { sentence_id, words })
    }

    pub fn parse_line(sentence_id: u32, line: &str) -> Result<Self> {
        Self::new(sentence_id, line.split_whitespace().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl fmt::Display for WordSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words.join(" "))
    }
}

/// Subword units of one sentence plus the mapping back to word positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordSequence {
    pub sentence_id: u32,
    /// Surface forms; non-final units of a word end in `@@`.
    pub units: Vec<String>,
    /// `true` when the unit continues into the next one.
    pub continuation: Vec<bool>,
    /// Word index of every unit.
    pub word_map: Vec<usize>,
}

impl SubwordSequence {
    /// Builds the sequence from surface units, deriving continuation flags and
    /// the word map.
    pub fn from_units(sentence_id: u32, units: Vec<String>) -> Result<Self> {
        let mut continuation = Vec::with_capacity(units.len());
        let mut word_map = Vec::with_capacity(units.len());
        let mut word = 0;
        for u in &units {
            if u.is_empty() || u == CONTINUATION || u.contains(char::is_whitespace) {
                return Err(Error::MalformedSegmentation(format!("invalid unit {u:?}")));
            }
            let cont = u.ends_with(CONTINUATION);
            continuation.push(cont);
            word_map.push(word);
            if !cont {
                word += 1;
            }
        }
        Ok(SubwordSequence {
            sentence_id,
            units,
            continuation,
            word_map,
        })
    }

    pub fn parse_line(sentence_id: u32, line: &str) -> Result<Self> {
        Self::from_units(sentence_id, line.split_whitespace().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Number of words the units group into.
    pub fn word_count(&self) -> usize {
        self.word_map.last().map_or(0, |&w| w + 1)
    }
}

impl fmt::Display for SubwordSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.units.join(" "))
    }
}

/// Fixed segmentation table: multi-character pieces matched greedily from the
/// left, with single characters as fallback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationTable {
    pieces: Vec<String>,
}

impl SegmentationTable {
    pub fn new(pieces: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = pieces.into_iter().filter(|p| !p.is_empty()).collect();
        SegmentationTable {
            pieces: set.into_iter().collect(),
        }
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let max_len = self.pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let mut taken = 1;
            for len in (2..=max_len.min(chars.len() - i)).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if self.pieces.binary_search(&cand).is_ok() {
                    taken = len;
                    break;
                }
            }
            out.push(chars[i..i + taken].iter().collect());
            i += taken;
        }
        out
    }

    /// Every surface unit this table can emit for the given alphabet.
    pub fn unit_inventory(&self, alphabet: &str) -> Vec<String> {
        let mut base: BTreeSet<String> = alphabet.chars().map(|c| c.to_string()).collect();
        base.extend(self.pieces.iter().cloned());
        let mut out = Vec::with_capacity(base.len() * 2);
        for b in base {
            out.push(format!("{b}{CONTINUATION}"));
            out.push(b);
        }
        out
    }
}

pub fn segment(s: &WordSequence, table: &SegmentationTable) -> SubwordSequence {
    let mut units = Vec::new();
    let mut continuation = Vec::new();
    let mut word_map = Vec::new();
    for (w, word) in s.words.iter().enumerate() {
        let pieces = table.split_word(word);
        let n = pieces.len();
        for (k, p) in pieces.into_iter().enumerate() {
            let cont = k + 1 < n;
            units.push(if cont { format!("{p}{CONTINUATION}") } else { p });
            continuation.push(cont);
            word_map.push(w);
        }
    }
    SubwordSequence {
        sentence_id: s.sentence_id,
        units,
        continuation,
        word_map,
    }
}

pub fn desegment(t: &SubwordSequence) -> Result<WordSequence> {
    let mut words = Vec::new();
    let mut current = String::new();
    for (u, &cont) in t.units.iter().zip(&t.continuation) {
        if cont {
            let stem = u
                .strip_suffix(CONTINUATION)
                .ok_or_else(|| Error::MalformedSegmentation(format!("unit {u:?} flagged as continuing without @@")))?;
            current.push_str(stem);
        } else {
            current.push_str(u);
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() || t.continuation.last() == Some(&true) {
        return Err(Error::MalformedSegmentation(
            "dangling continuation at end of sequence".into(),
        ));
    }
    WordSequence::new(t.sentence_id, words)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Copy,
    Reverse,
    Substitution,
}

impl Task {
    /// Target word position corresponding to source word `i` in a sentence of
    /// `len` words.
    pub fn gold_target_index(self, i: usize, len: usize) -> usize {
        match self {
            Task::Copy | Task::Substitution => i,
            Task::Reverse => len - 1 - i,
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "substitution" | "vocabulary-substitution" => Ok(Task::Substitution),
            other => Err(Error::InvalidSpec(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Substitution => "substitution",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test_in: usize,
    pub test_ood: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub task: Task,
    /// Total number of word types, held-out stratum included.
    pub vocab_size: usize,
    /// Number of held-out word types; defaults to a fifth of the vocabulary.
    pub ood_vocab: usize,
    pub length_range: (usize, usize),
    pub noise_rate: f64,
    pub seed: u64,
    pub splits: SplitSizes,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            task: Task::Copy,
            vocab_size: 40,
            ood_vocab: 8,
            length_range: (2, 6),
            noise_rate: 0.5,
            seed: 1,
            splits: SplitSizes {
                train: 3000,
                dev: 200,
                test_in: 500,
                test_ood: 500,
            },
        }
    }
}

impl CorpusSpec {
    pub fn from_config(c: &KvConfig) -> Result<Self> {
        let d = CorpusSpec::default();
        let vocab_size = c.get_or("vocab_size", d.vocab_size)?;
        let length_range = match c.raw("length_range") {
            None => d.length_range,
            Some(v) => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config("length_range must be min,max".into()))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad length_range {v:?}")))
                };
                (parse(a)?, parse(b)?)
            }
        };
        let spec = CorpusSpec {
            task: c.get_or("task", d.task)?,
            vocab_size,
            ood_vocab: c.get_or("ood_vocab", (vocab_size / 5).max(1))?,
            length_range,
            noise_rate: c.get_or("noise_rate", d.noise_rate)?,
            seed: c.get_or("seed", d.seed)?,
            splits: SplitSizes {
                train: c.get_or("train", d.splits.train)?,
                dev: c.get_or("dev", d.splits.dev)?,
                test_in: c.get_or("test_in", d.splits.test_in)?,
                test_ood: c.get_or("test_ood", d.splits.test_ood)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut c = KvConfig::default();
        c.set("task", self.task);
        c.set("vocab_size", self.vocab_size);
        c.set("ood_vocab", self.ood_vocab);
        c.set(
            "length_range",
            format!("{},{}", self.length_range.0, self.length_range.1),
        );
        c.set("noise_rate", self.noise_rate);
        c.set("seed", self.seed);
        c.set("train", self.splits.train);
        c.set("dev", self.splits.dev);
        c.set("test_in", self.splits.test_in);
        c.set("test_ood", self.splits.test_ood);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.splits;
        if [s.train, s.dev, s.test_in, s.test_ood].contains(&0) {
            return Err(Error::InvalidSpec("all split sizes must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidSpec(format!(
                "noise_rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("bad length range ({lo}, {hi})")));
        }
        if self.ood_vocab == 0 {
            return Err(Error::InvalidSpec("held-out stratum must be non-empty".into()));
        }
        if self.vocab_size < self.ood_vocab + MIN_IN_DOMAIN_WORDS {
            return Err(Error::InvalidSpec(format!(
                "vocab_size {} too small to reserve {} held-out words and keep {} in-domain words",
                self.vocab_size, self.ood_vocab, MIN_IN_DOMAIN_WORDS
            )));
        }
        let capacity = word_capacity(COMMON_ALPHABET.len());
        if self.vocab_size - self.ood_vocab > capacity {
            return Err(Error::InvalidSpec(format!(
                "vocab_size exceeds the {capacity} distinct in-domain words the alphabet allows"
            )));
        }
        Ok(())
    }
}

fn word_capacity(alphabet: usize) -> usize {
    alphabet + alphabet.pow(2) + alphabet.pow(3)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: WordSequence,
    pub target: WordSequence,
    /// Source word positions replaced by held-out words.
    pub ood_positions: Vec<usize>,
}

impl SentencePair {
    pub fn id(&self) -> u32 {
        self.source.sentence_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Dev,
    TestIn,
    TestOod,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Dev, SplitName::TestIn, SplitName::TestOod];

    pub fn file_stem(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::TestIn => "test_in",
            SplitName::TestOod => "test_ood",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.file_stem() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub spec: CorpusSpec,
    pub in_domain_words: Vec<String>,
    pub held_out_words: Vec<String>,
    pub table: SegmentationTable,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test_in: Vec<SentencePair>,
    pub test_ood: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn split(&self, name: SplitName) -> &[SentencePair] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::TestIn => &self.test_in,
            SplitName::TestOod => &self.test_ood,
        }
    }

    /// Every surface unit the segmentation can produce, in a fixed order.
    pub fn unit_inventory(&self) -> Vec<String> {
        self.table.unit_inventory(&format!("{COMMON_ALPHABET}{RARE_ALPHABET}"))
    }

    /// Writes one file per split and side plus the table and spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in SplitName::ALL {
            let pairs = self.split(name);
            let stem = name.file_stem();
            let mut src = String::new();
            let mut tgt = String::new();
            let mut ood = String::new();
            for p in pairs {
                src.push_str(&p.source.to_string());
                src.push('\n');
                tgt.push_str(&p.target.to_string());
                tgt.push('\n');
                let pos: Vec<String> = p.ood_positions.iter().map(usize::to_string).collect();
                ood.push_str(&pos.join(" "));
                ood.push('\n');
            }
            write_file(&dir.join(format!("{stem}.src")), &src)?;
            write_file(&dir.join(format!("{stem}.tgt")), &tgt)?;
            write_file(&dir.join(format!("{stem}.ood")), &ood)?;
        }
        self.table.save(&dir.join("seg.table"))?;
        write_file(&dir.join("corpus.cfg"), &self.spec.to_config().to_string())?;
        let mut words = String::new();
        for w in &self.in_domain_words {
            words.push_str(&format!("in\t{w}\n"));
        }
        for w in &self.held_out_words {
            words.push_str(&format!("held_out\t{w}\n"));
        }
        write_file(&dir.join("words.tsv"), &words)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = CorpusSpec::from_config(&KvConfig::load(&dir.join("corpus.cfg"))?)?;
        let table = SegmentationTable::load(&dir.join("seg.table"))?;
        let words_path = dir.join("words.tsv");
        let words = read_file(&words_path)?;
        let mut in_domain_words = Vec::new();
        let mut held_out_words = Vec::new();
        for line in words.lines() {
            match line.split_once('\t') {
                Some(("in", w)) => in_domain_words.push(w.to_string()),
                Some(("held_out", w)) => held_out_words.push(w.to_string()),
                _ => return Err(Error::format(&words_path, format!("bad line {line:?}"))),
            }
        }
        let mut splits = BTreeMap::new();
        for name in SplitName::ALL {
            let stem = name.file_stem();
            let src = read_file(&dir.join(format!("{stem}.src")))?;
            let tgt = read_file(&dir.join(format!("{stem}.tgt")))?;
            let ood_path = dir.join(format!("{stem}.ood"));
            let ood = read_file(&ood_path)?;
            let counts = [src.lines().count(), tgt.lines().count(), ood.lines().count()];
            if counts[0] != counts[1] || counts[0] != counts[2] {
                return Err(Error::format(dir, format!("{stem}: parallel files differ in length")));
            }
            splits.insert(name, (src, tgt, ood));
        }
        let mut next_id = 0u32;
        let mut build = |name: SplitName| -> Result<Vec<SentencePair>> {
            let (src, tgt, ood) = &splits[&name];
            let mut out = Vec::new();
            for ((s, t), o) in src.lines().zip(tgt.lines()).zip(ood.lines()) {
                let ood_positions = o
                    .split_whitespace()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::format(dir, format!("bad ood position {v:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                out.push(SentencePair {
                    source: WordSequence::parse_line(next_id, s)?,
                    target: WordSequence::parse_line(next_id, t)?,
                    ood_positions,
                });
                next_id += 1;
            }
            Ok(out)
        };
        let train = build(SplitName::Train)?;
        let dev = build(SplitName::Dev)?;
        let test_in = build(SplitName::TestIn)?;
        let test_ood = build(SplitName::TestOod)?;
        Ok(ParallelCorpus {
            spec,
            in_domain_words,
            held_out_words,
            table,
            train,
            dev,
            test_in,
            test_ood,
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn random_word<R: Rng>(rng: &mut R, alphabet: &[char]) -> String {
    let len = rng.gen_range(1..=3);
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// Applies the task transform to a source sentence.
pub fn apply_task(task: Task, source: &WordSequence, substitution: &BTreeMap<String, String>) -> WordSequence {
    let words = match task {
        Task::Copy => source.words.clone(),
        Task::Reverse => source.words.iter().rev().cloned().collect(),
        Task::Substitution => source
            .words
            .iter()
            .map(|w| substitution.get(w).cloned().unwrap_or_else(|| w.clone()))
            .collect(),
    };
    WordSequence {
        sentence_id: source.sentence_id,
        words,
    }
}

impl ParallelCorpus {
    /// The word-level substitution table (identity for tasks that do not use it).
    pub fn substitution(&self) -> BTreeMap<String, String> {
        build_substitution(self.spec.seed, &self.in_domain_words, &self.held_out_words)
    }
}

fn build_substitution(seed: u64, in_words: &[String], held: &[String]) -> BTreeMap<String, String> {
    let mut rng = stage_rng(seed, "corpus/substitution");
    let mut map = BTreeMap::new();
    for stratum in [in_words, held] {
        let mut shuffled = stratum.to_vec();
        shuffled.shuffle(&mut rng);
        for (a, b) in stratum.iter().zip(shuffled) {
            map.insert(a.clone(), b);
        }
    }
    map
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let common: Vec<char> = COMMON_ALPHABET.chars().collect();
    let rare: Vec<char> = RARE_ALPHABET.chars().collect();
    let mut rng = stage_rng(spec.seed, "corpus/words");

    let n_in = spec.vocab_size - spec.ood_vocab;
    let mut seen = BTreeSet::new();
    let mut in_domain_words = Vec::with_capacity(n_in);
    while in_domain_words.len() < n_in {
        let w = random_word(&mut rng, &common);
        if seen.insert(w.clone()) {
            in_domain_words.push(w);
        }
    }
    let mut held_out_words = Vec::with_capacity(spec.ood_vocab);
    let mut attempts = 0;
    while held_out_words.len() < spec.ood_vocab {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidSpec("cannot draw enough held-out words".into()));
        }
        let mut chars: Vec<char> = random_word(&mut rng, &common).chars().collect();
        let pos = rng.gen_range(0..chars.len());
        chars[pos] = rare[rng.gen_range(0..rare.len())];
        let w: String = chars.into_iter().collect();
        if seen.insert(w.clone()) {
            held_out_words.push(w);
        }
    }

    // Pieces: the most frequent leading bigrams and trigrams of in-domain words.
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in &in_domain_words {
        let chars: Vec<char> = w.chars().collect();
        for len in 2..=3 {
            if chars.len() >= len {
                *counts.entry(chars[..len].iter().collect()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let table = SegmentationTable::new(ranked.into_iter().take(TABLE_SIZE).map(|(p, _)| p));

    let substitution = build_substitution(spec.seed, &in_domain_words, &held_out_words);

    let mut next_id = 0u32;
    let mut sentence = |rng: &mut crate::rng::StageRng, inject: bool| -> SentencePair {
        let (lo, hi) = spec.length_range;
        let len = rng.gen_range(lo..=hi);
        let mut words: Vec<String> = (0..len)
            .map(|_| in_domain_words[rng.gen_range(0..in_domain_words.len())].clone())
            .collect();
        let mut ood_positions = Vec::new();
        if inject {
            let k = rng.gen_range(1..=(len / 3).max(1));
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(rng);
            ood_positions = positions[..k].to_vec();
            ood_positions.sort_unstable();
            for &p in &ood_positions {
                words[p] = held_out_words[rng.gen_range(0..held_out_words.len())].clone();
            }
        }
        let source = WordSequence {
            sentence_id: next_id,
            words,
        };
        next_id += 1;
        let target = apply_task(spec.task, &source, &substitution);
        SentencePair {
            source,
            target,
            ood_positions,
        }
    };

    let mut gen_split = |name: &str, n: usize, injected: usize| {
        let mut rng = stage_rng(spec.seed, &format!("corpus/{name}"));
        let mut flags: Vec<bool> = (0..n).map(|i| i < injected).collect();
        flags.shuffle(&mut rng);
        flags
            .into_iter()
            .map(|inject| sentence(&mut rng, inject))
            .collect::<Vec<_>>()
    };
    let s = spec.splits;
    let train = gen_split("train", s.train, 0);
    let dev = gen_split("dev", s.dev, 0);
    let test_in = gen_split("test_in", s.test_in, 0);
    let injected = (spec.noise_rate * s.test_ood as f64).ceil() as usize;
    let test_ood = gen_split("test_ood", s.test_ood, injected.min(s.test_ood));

    Ok(ParallelCorpus {
        spec: spec.clone(),
        in_domain_words,
        held_out_words,
        table,
        train,
        dev,
        test_in,
        test_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ws(s: &str) -> WordSequence {
        WordSequence::parse_line(0, s).unwrap()
    }

    #[test]
    fn copy_and_reverse_transforms() {
        let m = BTreeMap::new();
        assert_eq!(apply_task(Task::Copy, &ws("a b c"), &m).to_string(), "a b c");
        assert_eq!(apply_task(Task::Reverse, &ws("a b c"), &m).to_string(), "c b a");
    }

    #[test]
    fn two_piece_split() {
        let table = SegmentationTable::new(["ab".to_string(), "c".to_string()]);
        let s = segment(&ws("abc"), &table);
        assert_eq!(s.units, vec!["ab@@", "c"]);
        assert_eq!(s.word_map, vec![0, 0]);
        assert_eq!(s.continuation, vec![true, false]);
        let single = segment(&ws("a"), &table);
        assert_eq!(single.units, vec!["a"]);
        assert_eq!(single.word_map, vec![0]);
    }

    #[test]
    fn desegment_examples() {
        let t = SubwordSequence::parse_line(0, "ab@@ c").unwrap();
        assert_eq!(desegment(&t).unwrap().words, vec!["abc"]);
        let t = SubwordSequence::parse_line(0, "a").unwrap();
        assert_eq!(desegment(&t).unwrap().words, vec!["a"]);
    }

    #[test]
    fn dangling_continuation_is_rejected() {
        let t = SubwordSequence::parse_line(0, "a b@@").unwrap();
        assert!(matches!(desegment(&t), Err(Error::MalformedSegmentation(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec {
            splits: SplitSizes {
                train: 50,
                dev: 5,
                test_in: 5,
                test_ood: 20,
            },
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.save(da.path()).unwrap();
        b.save(db.path()).unwrap();
        for f in ["train.src", "train.tgt", "test_ood.ood", "seg.table", "corpus.cfg"] {
            assert_eq!(
                fs::read(da.path().join(f)).unwrap(),
                fs::read(db.path().join(f)).unwrap()
            );
        }
        assert_eq!(ParallelCorpus::load(da.path()).unwrap(), a);
    }

    #[test]
    fn held_out_words_only_in_ood_split() {
        let spec = CorpusSpec {
            noise_rate: 0.3,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let held: BTreeSet<&String> = c.held_out_words.iter().collect();
        for name in [SplitName::Train, SplitName::Dev, SplitName::TestIn] {
            for p in c.split(name) {
                assert!(p.source.words.iter().all(|w| !held.contains(w)));
                assert!(p.ood_positions.is_empty());
            }
        }
        let injected = c.test_ood.iter().filter(|p| !p.ood_positions.is_empty()).count();
        assert!(injected as f64 >= spec.noise_rate * c.test_ood.len() as f64);
        for p in &c.test_ood {
            for &i in &p.ood_positions {
                assert!(held.contains(&p.source.words[i]));
            }
        }
    }

    #[test]
    fn targets_follow_task() {
        for task in [Task::Copy, Task::Reverse, Task::Substitution] {
            let spec = CorpusSpec {
                task,
                ..CorpusSpec::default()
            };
            let c = generate_corpus(&spec).unwrap();
            let sub = c.substitution();
            for p in c.train.iter().chain(&c.test_ood) {
                assert_eq!(apply_task(task, &p.source, &sub), p.target);
            }
        }
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let spec = CorpusSpec {
            vocab_size: 4,
            ood_vocab: 1,
            ..CorpusSpec::default()
        };
        let err = generate_corpus(&spec).unwrap_err();
        assert!(err.to_string().contains("too small"));
    }

    #[test]
    fn round_trip_over_random_corpus() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        let mut checked = 0;
        for p in c.train.iter().chain(&c.test_ood).take(1000) {
            let s = segment(&p.source, &c.table);
            assert_eq!(desegment(&s).unwrap(), p.source);
            let reparsed = SubwordSequence::parse_line(s.sentence_id, &s.to_string()).unwrap();
            assert_eq!(reparsed, s);
            checked += 1;
        }
        assert_eq!(checked, 1000);
    }

    proptest! {
        #[test]
        fn segment_round_trips(words in prop::collection::vec("[a-lw-z]{1,5}", 1..8),
                               pieces in prop::collection::vec("[a-l]{2,3}", 0..10)) {
            let table = SegmentationTable::new(pieces);
            let s = WordSequence::new(3, words).unwrap();
            let seg = segment(&s, &table);
            prop_assert!(seg.word_map.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            prop_assert_eq!(seg.word_count(), s.len());
            prop_assert_eq!(&desegment(&seg).unwrap(), &s);
            let from_units = SubwordSequence::from_units(3, seg.units.clone()).unwrap();
            prop_assert_eq!(from_units, seg);
        }
    }
}
