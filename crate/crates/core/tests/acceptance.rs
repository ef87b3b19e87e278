use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use seqconf_core::align::{align, align_scores, responsibilities};
use seqconf_core::autoenc::{combined_posterior_dec, combined_posterior_enc, Identity};
use seqconf_core::confidence::AlignmentSource;
use seqconf_core::confidence::{MethodSpec, SentenceInput};
use seqconf_core::config::KvConfig;
use seqconf_core::corpus::{segment, SplitName, Task};
use seqconf_core::evalharness::{
    edit_distance, errors_found_at, evaluate, fscore_sweep, label_from_reference, Item, ItemKey, ItemSet, Label,
};
use seqconf_core::experiment::{run_experiment, variant_name, ExperimentConfig, ExperimentOutcome};
use seqconf_core::seq2seq::{pair_ids, Side, StateMatrix};
use seqconf_core::shallow::ShallowNet;
use seqconf_core::similarity::{Granularity, Method, Polarity};
use seqconf_core::statestore::{IndexGranularity, IndexMode, Payload, VectorIndex};
use seqconf_core::tensor::{l2_distance, Mat};

fn verdict(criterion: u32, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{tag} criterion {criterion}: {detail}");
}

fn reference_kv() -> KvConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg");
    KvConfig::load(&path).unwrap()
}

fn run(kv: &KvConfig) -> (TempDir, ExperimentOutcome) {
    let dir = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::from_kv(kv).unwrap();
    cfg.out = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    (dir, out)
}

fn reference() -> &'static ExperimentOutcome {
    static CELL: OnceLock<(TempDir, ExperimentOutcome)> = OnceLock::new();
    &CELL.get_or_init(|| run(&reference_kv())).1
}

fn split_ids(o: &ExperimentOutcome, split: SplitName) -> BTreeSet<u32> {
    o.corpus.split(split).iter().map(|p| p.id()).collect()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

// ---------- criterion 1 ----------

#[test]
fn c1_identity_autoencoder_is_plain_posterior() {
    let o = reference();
    let mut checked = 0;
    for s in o.eval.sentences.iter().filter(|s| !s.output.is_empty()).take(200) {
        let e = o.model.encode(&s.source).unwrap();
        let target = o.model.vocab.encode(&s.output);
        let (_, plain) = o.model.decode_forced_ids(&e, s.pair.id(), &target).unwrap();
        let dec = combined_posterior_dec(&o.model, &Identity, &e, &target).unwrap();
        let enc = combined_posterior_enc(&o.model, &Identity, &e, &target).unwrap();
        assert_eq!(dec.scores, plain.probs, "sentence {}", s.pair.id());
        assert_eq!(enc.scores, plain.probs, "sentence {}", s.pair.id());
        checked += 1;
    }
    assert_eq!(checked, 200);
    verdict(
        1,
        true,
        "identity autoencoder reproduces plain posteriors bit-exactly (200 sentences)",
    );
}

#[test]
fn c1_beam_width_one_is_greedy() {
    let o = reference();
    let mut n = 0;
    for split in [SplitName::Dev, SplitName::TestOod] {
        for p in o.corpus.split(split).iter().take(100) {
            let src = segment(&p.source, &o.corpus.table);
            let g = o.model.greedy_decode(&src).unwrap();
            let b = o.model.beam_decode(&src, 1).unwrap();
            assert_eq!(g.token_ids, b.token_ids, "sentence {}", p.id());
            assert_eq!(g.step_probs, b.step_probs, "sentence {}", p.id());
            assert_eq!(g.model_score, b.model_score, "sentence {}", p.id());
            assert_eq!(g.truncated, b.truncated, "sentence {}", p.id());
            n += 1;
        }
    }
    verdict(1, true, &format!("beam(1) equals greedy on {n} inputs"));
}

#[test]
fn c1_exact_index_equals_brute_force() {
    let dim = 8;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut vectors = Vec::with_capacity(n * dim);
    for i in 0..n {
        if i % 50 == 49 {
            // exact duplicates exercise the tie rule
            let k = rng.gen_range(0..i);
            let row = vectors[k * dim..(k + 1) * dim].to_vec();
            vectors.extend(row);
        } else {
            vectors.extend((0..dim).map(|_| f64::from(rng.gen_range(-4i32..=4)) * 0.5));
        }
    }
    let payloads: Vec<Payload> = (0..n)
        .map(|i| Payload {
            sentence_id: (i / 7) as u32,
            position: (i % 7) as u32,
        })
        .collect();
    let index = VectorIndex::from_vectors(
        dim,
        vectors.clone(),
        payloads.clone(),
        IndexGranularity::Token,
        IndexMode::Exact,
    )
    .unwrap();
    for q in 0..300 {
        let query: Vec<f64> = if q % 3 == 0 {
            let k = rng.gen_range(0..n);
            vectors[k * dim..(k + 1) * dim].to_vec()
        } else {
            (0..dim).map(|_| rng.gen_range(-2.5..2.5)).collect()
        };
        let mut best: Option<(f64, Payload)> = None;
        for (i, p) in payloads.iter().enumerate() {
            let d = l2_distance(&query, &vectors[i * dim..(i + 1) * dim]);
            if best.is_none_or(|(bd, bp)| d < bd || (d == bd && *p < bp)) {
                best = Some((d, *p));
            }
        }
        let (bd, bp) = best.unwrap();
        let got = index.nearest(&query).unwrap();
        assert_eq!(got.distance, bd, "query {q}");
        assert_eq!(got.payload, bp, "query {q}");
    }
    verdict(
        1,
        true,
        "exact index equals brute-force scan (10000 vectors, 300 queries)",
    );
}

#[derive(Clone, Copy)]
enum Step {
    Keep,
    Swap,
    Drop,
    Extra,
}

/// Top-down memoised edit oracle. Returns labels, distance.
fn oracle_labels(h: &[u8], r: &[u8]) -> (Vec<Label>, usize) {
    fn cost(i: usize, j: usize, h: &[u8], r: &[u8], memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(c) = memo[i][j] {
            return c;
        }
        let c = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let diag = cost(i - 1, j - 1, h, r, memo) + usize::from(h[i - 1] != r[j - 1]);
            let up = cost(i - 1, j, h, r, memo) + 1;
            let left = cost(i, j - 1, h, r, memo) + 1;
            diag.min(up).min(left)
        };
        memo[i][j] = Some(c);
        c
    }
    let mut memo = vec![vec![None; r.len() + 1]; h.len() + 1];
    let total = cost(h.len(), r.len(), h, r, &mut memo);
    let mut labels = vec![Label::Ok; h.len()];
    let (mut i, mut j) = (h.len(), r.len());
    while i > 0 || j > 0 {
        let here = cost(i, j, h, r, &mut memo);
        let mut options = Vec::new();
        if i > 0 && j > 0 && h[i - 1] == r[j - 1] {
            options.push((Step::Keep, cost(i - 1, j - 1, h, r, &mut memo)));
        }
        if i > 0 && j > 0 && h[i - 1] != r[j - 1] {
            options.push((Step::Swap, cost(i - 1, j - 1, h, r, &mut memo) + 1));
        }
        if j > 0 {
            options.push((Step::Drop, cost(i, j - 1, h, r, &mut memo) + 1));
        }
        if i > 0 {
            options.push((Step::Extra, cost(i - 1, j, h, r, &mut memo) + 1));
        }
        let step = options.iter().find(|(_, c)| *c == here).unwrap().0;
        match step {
            Step::Keep => {
                i -= 1;
                j -= 1;
            }
            Step::Swap => {
                labels[i - 1] = Label::Err;
                i -= 1;
                j -= 1;
            }
            Step::Drop => {
                if i > 0 {
                    labels[i - 1] = Label::Err;
                }
                if i < h.len() {
                    labels[i] = Label::Err;
                }
                j -= 1;
            }
            Step::Extra => {
                labels[i - 1] = Label::Err;
                i -= 1;
            }
        }
    }
    (labels, total)
}

fn all_strings(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn words(s: &[u8]) -> Vec<String> {
    s.iter().map(|&c| ["a", "b", "c"][c as usize].to_string()).collect()
}

fn check_pair(h: &[u8], r: &[u8]) {
    let (expect, dist) = oracle_labels(h, r);
    let (hw, rw) = (words(h), words(r));
    let got = label_from_reference(0, &hw, &rw).unwrap();
    assert_eq!(got.labels, expect, "hyp {hw:?} ref {rw:?}");
    assert_eq!(edit_distance(&hw, &rw), dist, "hyp {hw:?} ref {rw:?}");
}

#[test]
fn c1_edit_labels_match_oracle() {
    let strings = all_strings(8);
    let mut pairs = 0usize;
    for h in &strings {
        for r in strings.iter().filter(|r| !r.is_empty() && h.len() + r.len() <= 10) {
            check_pair(h, r);
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for h in &strings {
        for _ in 0..10 {
            let len = rng.gen_range(1..=8);
            let r: Vec<u8> = (0..len).map(|_| rng.gen_range(0..3u8)).collect();
            check_pair(h, &r);
            pairs += 1;
        }
    }
    verdict(
        1,
        true,
        &format!("edit labelling equals the oracle on {pairs} pairs over a 3-symbol alphabet"),
    );
}

fn monotone_map(rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64) -> f64> {
    match rng.gen_range(0..5) {
        0 => {
            let (a, b) = (rng.gen_range(0.1..10.0), rng.gen_range(-5.0..5.0));
            Box::new(move |x| a * x + b)
        }
        1 => {
            let c = rng.gen_range(0.1..3.0);
            Box::new(move |x| (c * x).exp())
        }
        2 => {
            let a = rng.gen_range(0.01..2.0);
            Box::new(move |x| x * x * x + a * x)
        }
        3 => {
            let a = rng.gen_range(0.5..3.0);
            Box::new(move |x| (x + a).ln())
        }
        _ => {
            let c = rng.gen_range(0.2..2.0);
            Box::new(move |x| (c * x).atan())
        }
    }
}

#[test]
fn c1_metrics_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let budgets = [0.05, 0.1, 0.2, 0.33, 0.5, 1.0];
    for trial in 0..100 {
        let polarity = if trial % 2 == 0 {
            Polarity::Probability
        } else {
            Polarity::Distance
        };
        let n = rng.gen_range(20..300);
        let items: Vec<Item> = (0..n)
            .map(|k| Item {
                key: ItemKey {
                    sentence_id: (k / 5) as u32,
                    position: (k % 5) as i64,
                },
                score: f64::from(rng.gen_range(0..=40)) / 40.0,
                label: if rng.gen_bool(0.3) { Label::Err } else { Label::Ok },
            })
            .collect();
        let base = ItemSet::new(polarity, items);
        let f = monotone_map(&mut rng);
        let mapped = ItemSet::new(
            polarity,
            base.items
                .iter()
                .map(|it| Item {
                    score: f(it.score),
                    ..*it
                })
                .collect(),
        );
        let distinct = |s: &ItemSet| s.items.iter().map(|i| i.score.to_bits()).collect::<BTreeSet<_>>().len();
        assert_eq!(distinct(&base), distinct(&mapped), "map {trial} merged scores");
        if base.errors() == 0 {
            continue;
        }
        for b in budgets {
            assert_eq!(
                errors_found_at(&base, b).unwrap(),
                errors_found_at(&mapped, b).unwrap(),
                "map {trial} budget {b}"
            );
        }
        assert_eq!(
            fscore_sweep(&base).unwrap().0,
            fscore_sweep(&mapped).unwrap().0,
            "map {trial}"
        );
    }
    verdict(1, true, "errors_found and F1 sweep unchanged under 100 monotone maps");
}

// ---------- criterion 2 ----------

#[test]
fn c2_model_gradient_matches_finite_differences() {
    let o = reference();
    let mut m = o.model.clone();
    let batch: Vec<(Vec<usize>, Vec<usize>)> = o
        .corpus
        .split(SplitName::Train)
        .iter()
        .take(4)
        .map(|p| pair_ids(&m, &o.corpus, p))
        .collect();
    let loss = |m: &seqconf_core::seq2seq::Seq2Seq, g: Option<&mut seqconf_core::seq2seq::model::Weights>| {
        let mut g = g;
        let mut total = 0.0;
        for (s, t) in &batch {
            total += m.example_loss(s, t, 1.0, g.as_deref_mut()).0;
        }
        total
    };
    let mut g = m.weights.zeros_like();
    loss(&m, Some(&mut g));
    let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.data().to_vec()).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (ti, gt) in grads.iter().enumerate() {
        for _ in 0..4 {
            let k = rng.gen_range(0..gt.len());
            let orig = m.weights.tensors()[ti].data()[k];
            m.weights.tensors_mut()[ti].data_mut()[k] = orig + eps;
            let lp = loss(&m, None);
            m.weights.tensors_mut()[ti].data_mut()[k] = orig - eps;
            let lm = loss(&m, None);
            m.weights.tensors_mut()[ti].data_mut()[k] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let denom = num.abs().max(gt[k].abs());
            if denom < 1e-6 {
                continue;
            }
            worst = worst.max((num - gt[k]).abs() / denom);
            checked += 1;
        }
    }
    let ok = worst < 1e-3 && checked > 100;
    verdict(
        2,
        ok,
        &format!("seq2seq gradient max relative error {worst:.2e} over {checked} entries"),
    );
    assert!(ok);
}

fn slot(n: &mut ShallowNet, i: usize) -> &mut Mat {
    match i {
        0 => &mut n.w1,
        1 => &mut n.b1,
        2 => &mut n.w2,
        _ => &mut n.b2,
    }
}

fn shallow_fd(net: &ShallowNet, x: &Mat, t: &Mat, samples: usize, seed: u64) -> (f64, usize) {
    let (_, g) = net.loss_and_grad(x, t).unwrap();
    let grads = [g.w1, g.b1, g.w2, g.b2];
    let mut probe = net.clone();
    let eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, gm) in grads.iter().enumerate() {
        let len = gm.data().len();
        let picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| rng.gen_range(0..len)).collect()
        };
        for k in picks {
            let orig = slot(&mut probe, pi).data()[k];
            let mut central = |h: f64| {
                slot(&mut probe, pi).data_mut()[k] = orig + h;
                let lp = probe.mean_loss(x, t).unwrap();
                slot(&mut probe, pi).data_mut()[k] = orig - h;
                let lm = probe.mean_loss(x, t).unwrap();
                slot(&mut probe, pi).data_mut()[k] = orig;
                (lp - lm) / (2.0 * h)
            };
            // Richardson-extrapolated central difference
            let num = (4.0 * central(eps / 2.0) - central(eps)) / 3.0;
            let a = gm.data()[k];
            let denom = num.abs().max(a.abs());
            if denom < 1e-7 {
                continue;
            }
            worst = worst.max((num - a).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked)
}

fn stacked(rows: impl Iterator<Item = Vec<f64>>) -> Mat {
    Mat::from_rows(&rows.collect::<Vec<_>>())
}

#[test]
fn c2_shallow_gradients_match_finite_differences() {
    let o = reference();
    let sents: Vec<_> = o
        .eval
        .sentences
        .iter()
        .filter(|s| !s.output.is_empty())
        .take(6)
        .collect();
    let mut enc = Vec::new();
    let mut dec = Vec::new();
    for s in &sents {
        let e = o.model.encode(&s.source).unwrap();
        let (d, _) = o.model.decode_forced(&e, &s.output).unwrap();
        enc.push(e);
        dec.push(d);
    }
    let mut all_ok = true;
    for ((side, b), net) in &o.autoencoders {
        let states: &[StateMatrix] = if *side == Side::Encoder { &enc } else { &dec };
        let x = stacked(states.iter().flat_map(|m| (0..m.rows()).map(move |i| m.row_f64(i))));
        let (worst, checked) = shallow_fd(net, &x, &x, usize::MAX, 3);
        let ok = worst < 1e-4;
        all_ok &= ok;
        verdict(
            2,
            ok,
            &format!("{side} autoencoder b{b}: max relative error {worst:.2e} over {checked} entries"),
        );
    }
    for (h, net) in &o.aligners {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for (e, d) in enc.iter().zip(&dec) {
            for i in 0..e.rows() {
                xs.push(e.row_f64(i));
                ts.push(d.row_f64(i.min(d.rows() - 1)));
            }
        }
        let (worst, checked) = shallow_fd(net, &Mat::from_rows(&xs), &Mat::from_rows(&ts), 300, 4);
        let ok = worst < 1e-4;
        all_ok &= ok;
        verdict(
            2,
            ok,
            &format!("alignment predictor h{h}: max relative error {worst:.2e} over {checked} entries"),
        );
    }
    assert!(all_ok);
}

#[test]
fn c2_distributions_and_responsibilities_normalise() {
    let o = reference();
    let nn = o.aligners.values().next_back().unwrap();
    let (mut worst_softmax, mut worst_column): (f64, f64) = (0.0, 0.0);
    for s in o.eval.sentences.iter().filter(|s| !s.output.is_empty()).take(200) {
        let e = o.model.encode(&s.source).unwrap();
        let (d, _) = o.model.decode_forced(&e, &s.output).unwrap();
        for i in 0..d.rows() {
            let sum: f64 = o.model.distribution(&d.row_f64(i)).iter().sum();
            worst_softmax = worst_softmax.max((sum - 1.0).abs());
        }
        let r = responsibilities(&align_scores(nn, &e, &d).unwrap());
        for j in 0..r.cols() {
            let sum: f64 = (0..r.rows()).map(|i| r.get(i, j)).sum();
            worst_column = worst_column.max((sum - 1.0).abs());
        }
    }
    let ok = worst_softmax <= 1e-6 && worst_column <= 1e-6;
    verdict(
        2,
        ok,
        &format!("softmax rows off by at most {worst_softmax:.1e}, E-step columns by {worst_column:.1e}"),
    );
    assert!(ok);
}

// ---------- criterion 3 ----------

#[test]
fn c3_ood_sentences_look_less_familiar() {
    let o = reference();
    let ood = split_ids(o, SplitName::TestOod);
    let b = *o.autoencoders.keys().next().map(|(_, b)| b).unwrap();
    let scorer = o.scorer(b, None);
    let mut samples: Vec<(&str, Vec<f64>, Vec<f64>)> = [
        "token distance",
        "enc-auto distance",
        "dec-auto distance",
        "pseudo-ERR rate",
    ]
    .iter()
    .map(|n| (*n, Vec::new(), Vec::new()))
    .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for s in &o.eval.sentences {
        let input = SentenceInput {
            source: &s.source,
            output: &s.output,
            external: None,
        };
        let mut vals = vec![
            Some(mean(&scorer.raw(Method::EncDist, &input).unwrap().scores)),
            Some(mean(&scorer.raw(Method::EncAuto, &input).unwrap().scores)),
            None,
            Some(if s.search.differ() { 1.0 } else { 0.0 }),
        ];
        if !s.output.is_empty() {
            vals[2] = Some(mean(&scorer.raw(Method::DecAuto, &input).unwrap().scores));
        }
        for ((_, ins, oods), v) in samples.iter_mut().zip(vals) {
            if let Some(v) = v {
                if ood.contains(&s.pair.id()) {
                    oods.push(v)
                } else {
                    ins.push(v)
                }
            }
        }
    }
    let mut all_ok = true;
    for (name, ins, oods) in &samples {
        let (mi, si) = mean_se(ins);
        let (mo, so) = mean_se(oods);
        let se = (si * si + so * so).sqrt();
        let ok = ins.len() >= 500 && oods.len() >= 500 && mo - mi > 3.0 * se;
        all_ok &= ok;
        verdict(
            3,
            ok,
            &format!(
                "{name}: in-domain {mi:.4} (n={}) vs OOD {mo:.4} (n={}), difference {:.4} = {:.1} SE",
                ins.len(),
                oods.len(),
                mo - mi,
                (mo - mi) / se
            ),
        );
    }
    assert!(all_ok);
}

// ---------- criterion 4 ----------

#[test]
fn c4_segment_ordering() {
    let o = reference();
    let mut all_ok = true;
    let mut found = std::collections::BTreeMap::new();
    for r in o.reports.iter().filter(|r| r.granularity == Granularity::Segment) {
        let f = r.found_at(0.2).unwrap();
        let ok = f >= 1.5 * 0.2;
        all_ok &= ok;
        verdict(
            4,
            ok,
            &format!(
                "(a) {} [{}] segment errors-found@20% = {:.3} (needs >= 0.300)",
                r.method, r.variant, f
            ),
        );
        found.insert(r.method, f);
    }
    assert_eq!(found.len(), Method::ALL.len());
    let (p, dp) = (found[&Method::Prob], found[&Method::DecAutoProb]);
    let ok_b = dp >= p;
    verdict(4, ok_b, &format!("(b) dec-auto+prob {dp:.3} >= prob {p:.3}"));
    assert!(all_ok && ok_b);
}

// ---------- criterion 5 ----------

#[test]
fn c5_internal_alignment_beats_external() {
    let o = reference();
    let h = *o.aligners.keys().max().unwrap();
    let b = *o.autoencoders.keys().next().map(|(_, b)| b).unwrap();
    let mut all_ok = true;
    for m in [Method::Prob, Method::DecAuto, Method::DecAutoProb] {
        let bn = (m != Method::Prob).then_some(b);
        let internal = variant_name(bn, Some((&AlignmentSource::Internal, Some(h))));
        let external = variant_name(bn, Some((&AlignmentSource::Pharaoh(PathBuf::new()), None)));
        let fi = o
            .report(m, Granularity::SourceWord, &internal)
            .unwrap()
            .found_at(0.2)
            .unwrap();
        let fe = o
            .report(m, Granularity::SourceWord, &external)
            .unwrap()
            .found_at(0.2)
            .unwrap();
        let ok = fi >= fe;
        all_ok &= ok;
        verdict(
            5,
            ok,
            &format!("{m} source-word errors-found@20%: internal h{h} {fi:.3} vs synthetic Pharaoh {fe:.3}"),
        );
    }
    assert!(
        all_ok,
        "internal alignment does not match the noisy gold-derived alignment"
    );
}

// ---------- criterion 6 ----------

fn em_accuracy(task: Task) -> f64 {
    let mut kv = reference_kv();
    kv.set("corpus.task", task);
    kv.set("methods", "prob");
    kv.set("granularities", "segment");
    kv.set("ae.sides", "enc");
    kv.set("align.hidden", 64);
    kv.set("eval.splits", "test_in");
    let (_dir, o) = run(&kv);
    for r in &o.reports {
        r.check_invariants().unwrap();
    }
    let nn = &o.aligners[&64];
    let (mut ok, mut total) = (0usize, 0usize);
    for p in o.corpus.split(SplitName::TestIn) {
        let s = segment(&p.source, &o.corpus.table);
        let t = segment(&p.target, &o.corpus.table);
        let e = o.model.encode(&s).unwrap();
        let (d, _) = o.model.decode_forced(&e, &t).unwrap();
        let a = align(nn, &e, &d).unwrap();
        for (i, j) in a.hard().into_iter().enumerate() {
            let gold = task.gold_target_index(s.word_map[i], p.source.len());
            if j.map(|j| t.word_map[j]) == Some(gold) {
                ok += 1;
            }
            total += 1;
        }
    }
    ok as f64 / total as f64
}

#[test]
fn c6_em_recovers_copy_and_reverse() {
    let mut all_ok = true;
    for task in [Task::Copy, Task::Reverse] {
        let acc = em_accuracy(task);
        let ok = acc >= 0.90;
        all_ok &= ok;
        verdict(
            6,
            ok,
            &format!("{task}: hard alignment accuracy {acc:.4} after 5 EM iterations"),
        );
    }
    assert!(all_ok);
}

// ---------- criterion 7 ----------

#[test]
fn c7_reports_respect_invariants() {
    let o = reference();
    let mut failures = Vec::new();
    for r in &o.reports {
        if let Err(e) = r.check_invariants() {
            failures.push(e.to_string());
        }
    }
    let ok = failures.is_empty();
    verdict(
        7,
        ok,
        &format!(
            "{} reports checked, {} invariant violations",
            o.reports.len(),
            failures.len()
        ),
    );
    assert!(ok, "{failures:?}");
}

// ---------- criterion 8 ----------

#[test]
fn c8_deeper_scorer_on_shallow_output() {
    let layered = |layers: usize| {
        let mut kv = reference_kv();
        kv.set("model.layers", layers);
        kv.set("methods", "dec-auto+prob");
        kv.set("granularities", "segment");
        kv.set("ae.sides", "dec");
        kv.set("align.hidden", 32);
        kv.set("align.sentences", 50);
        run(&kv)
    };
    let (_d1, shallow) = layered(1);
    let (_d4, deep) = layered(4);
    for r in shallow.reports.iter().chain(&deep.reports) {
        r.check_invariants().unwrap();
    }
    let own = shallow.reports[0].found_at(0.2).unwrap();
    let b = *deep.autoencoders.keys().next().map(|(_, b)| b).unwrap();
    let scorer = deep.scorer(b, None);
    let spec = MethodSpec::new(Method::DecAutoProb, Granularity::Segment, None).unwrap();
    let scores = shallow.eval.score(&scorer, &spec, None).unwrap();
    let gold = shallow.eval.gold_labels(Granularity::Segment).unwrap();
    let cross = evaluate(&scores, &gold, None, &[0.2]).unwrap().found_at(0.2).unwrap();
    let holds = cross >= own;
    let hard_fail = own - cross > 0.05;
    verdict(
        8,
        holds,
        &format!(
            "dec-auto+prob segment errors-found@20%: 4-layer scorer {cross:.3} vs 1-layer self {own:.3}{}",
            if holds {
                ""
            } else if hard_fail {
                " (reversed by more than 5 points)"
            } else {
                " (flagged, within 5 points)"
            }
        ),
    );
    assert!(!hard_fail);
}
