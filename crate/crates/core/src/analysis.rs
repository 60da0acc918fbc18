//! Diagnostics over attention records and decoded output: entropy, gate
//! distributions, alignment extraction with AER, n-gram precision, BLEU and
//! length-bucketed evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::data::{AlignedExample, Links, TokenId};
use crate::error::{contract, Result};
use crate::model::{argmax, Model};

/// Entropy (natural log) of a row after renormalizing it; `None` when the
/// row carries no mass.
pub fn row_entropy(row: &[f64]) -> Option<f64> {
    let mass: f64 = row.iter().sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return None;
    }
    let h = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / mass;
            -q * q.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

/// Running mean of row entropies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EntropyStats {
    pub sum: f64,
    pub rows: usize,
    /// Rows with zero mass, left out of the mean.
    pub skipped: usize,
}

impl EntropyStats {
    pub fn add_row(&mut self, row: &[f64]) {
        match row_entropy(row) {
            Some(h) => {
                self.sum += h;
                self.rows += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn merge(&mut self, other: &EntropyStats) {
        self.sum += other.sum;
        self.rows += other.rows;
        self.skipped += other.skipped;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.rows > 0).then(|| self.sum / self.rows as f64)
    }
}

/// Mean entropy over rows; zero-mass rows are skipped and counted.
pub fn attention_entropy<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> EntropyStats {
    let mut s = EntropyStats::default();
    for r in rows {
        s.add_row(r);
    }
    s
}

/// Which attention matrix of a record to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnSource {
    Alpha,
    Beta,
    Gamma,
}

impl std::str::FromStr for AttnSource {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(AttnSource::Alpha),
            "beta" => Ok(AttnSource::Beta),
            "gamma" => Ok(AttnSource::Gamma),
            _ => contract(format!(
                "unknown attention source {s:?}, expected alpha, beta or gamma"
            )),
        }
    }
}

impl AttnSource {
    pub fn matrix(self, r: &AttentionRecord) -> Option<&[f64]> {
        match self {
            AttnSource::Alpha => Some(&r.alpha),
            AttnSource::Beta => r.beta.as_deref(),
            AttnSource::Gamma => Some(&r.gamma),
        }
    }
}

/// Entropies of α, β and γ accumulated over records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TripleEntropy {
    pub alpha: EntropyStats,
    pub beta: EntropyStats,
    pub gamma: EntropyStats,
}

impl TripleEntropy {
    /// Adds every row of every record; β only where it exists.
    pub fn add_records(&mut self, records: &[AttentionRecord]) {
        for r in records {
            for i in 0..r.tgt_len {
                self.alpha.add_row(r.row(&r.alpha, i));
                self.gamma.add_row(r.row(&r.gamma, i));
                if let Some(b) = &r.beta {
                    self.beta.add_row(r.row(b, i));
                }
            }
        }
    }

    pub fn merge(&mut self, other: &TripleEntropy) {
        self.alpha.merge(&other.alpha);
        self.beta.merge(&other.beta);
        self.gamma.merge(&other.gamma);
    }
}

/// Source-length interval `(lo, hi]`; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl LengthBucket {
    pub fn contains(&self, len: usize) -> bool {
        len > self.lo && self.hi.map_or(true, |h| len <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("({},{}]", self.lo, h),
            None => format!("({},inf)", self.lo),
        }
    }

    /// Consecutive buckets split at `edges`, the last one unbounded.
    pub fn from_edges(edges: &[usize]) -> Result<Vec<LengthBucket>> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
            return contract("bucket edges must be positive and strictly increasing");
        }
        let mut out = Vec::with_capacity(edges.len() + 1);
        let mut lo = 0;
        for &e in edges {
            out.push(LengthBucket { lo, hi: Some(e) });
            lo = e;
        }
        out.push(LengthBucket { lo, hi: None });
        Ok(out)
    }
}

/// (0,20], [21,40], [41,∞): the entropy-table buckets.
pub fn entropy_buckets() -> Vec<LengthBucket> {
    LengthBucket::from_edges(&[20, 40]).expect("static edges")
}

/// (0,10], (10,20], (20,30], (30,∞)
pub fn default_length_buckets() -> Vec<LengthBucket> {
    LengthBucket::from_edges(&[10, 20, 30]).expect("static edges")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyBucket {
    pub bucket: String,
    pub sentences: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub skipped_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub buckets: Vec<EntropyBucket>,
    pub overall: EntropyBucket,
}

fn entropy_bucket(label: String, sentences: usize, t: &TripleEntropy) -> EntropyBucket {
    EntropyBucket {
        bucket: label,
        sentences,
        alpha: t.alpha.mean(),
        beta: t.beta.mean(),
        gamma: t.gamma.mean(),
        skipped_rows: t.alpha.skipped + t.beta.skipped + t.gamma.skipped,
    }
}

/// Per-bucket mean entropies; each item is one sentence's records.
pub fn entropy_report(
    sentences: &[Vec<AttentionRecord>],
    buckets: &[LengthBucket],
) -> EntropyReport {
    let mut per = vec![(0usize, TripleEntropy::default()); buckets.len()];
    let mut all = TripleEntropy::default();
    for recs in sentences {
        let Some(src_len) = recs.first().map(|r| r.src_len) else {
            continue;
        };
        let mut t = TripleEntropy::default();
        t.add_records(recs);
        all.merge(&t);
        if let Some(b) = buckets.iter().position(|b| b.contains(src_len)) {
            per[b].0 += 1;
            per[b].1.merge(&t);
        }
    }
    EntropyReport {
        buckets: buckets
            .iter()
            .zip(&per)
            .map(|(b, (n, t))| entropy_bucket(b.label(), *n, t))
            .collect(),
        overall: entropy_bucket("all".into(), sentences.len(), &all),
    }
}

pub fn entropy_report_csv(report: &EntropyReport) -> String {
    let mut out =
        String::from("bucket,sentences,entropy_alpha,entropy_beta,entropy_gamma,skipped_rows\n");
    let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for b in report
        .buckets
        .iter()
        .chain(std::iter::once(&report.overall))
    {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.bucket,
            b.sentences,
            f(b.alpha),
            f(b.beta),
            f(b.gamma),
            b.skipped_rows
        );
    }
    out
}

pub const GATE_BIN_WIDTH: f64 = 0.05;
pub const GATE_BINS: usize = 20;

/// Gate values of one decoder layer, pooled over heads and target positions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateHistogram {
    pub layer: usize,
    pub counts: Vec<usize>,
    /// `counts` divided by their total.
    pub mass: Vec<f64>,
    pub total: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateReport {
    pub bin_width: f64,
    pub layers: Vec<GateHistogram>,
}

pub fn gate_bin(g: f64) -> usize {
    ((g / GATE_BIN_WIDTH).floor().max(0.0) as usize).min(GATE_BINS - 1)
}

/// Histograms per layer, over records from any number of sentences.
pub fn gate_report<'a>(records: impl IntoIterator<Item = &'a AttentionRecord>) -> GateReport {
    let mut by_layer: std::collections::BTreeMap<usize, (Vec<usize>, f64)> = Default::default();
    for r in records {
        let e = by_layer
            .entry(r.layer)
            .or_insert_with(|| (vec![0; GATE_BINS], 0.0));
        for &g in &r.gate {
            e.0[gate_bin(g)] += 1;
            e.1 += g;
        }
    }
    let layers = by_layer
        .into_iter()
        .filter_map(|(layer, (counts, sum))| {
            let total: usize = counts.iter().sum();
            (total > 0).then(|| GateHistogram {
                layer,
                mass: counts.iter().map(|&c| c as f64 / total as f64).collect(),
                counts,
                total,
                mean: sum / total as f64,
            })
        })
        .collect();
    GateReport {
        bin_width: GATE_BIN_WIDTH,
        layers,
    }
}

/// Bar chart with one panel per layer.
pub fn gate_histogram_svg(report: &GateReport) -> String {
    let (pw, ph, margin) = (320.0, 180.0, 30.0);
    let width = margin + report.layers.len().max(1) as f64 * (pw + margin);
    let height = ph + 2.0 * margin;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (n, h) in report.layers.iter().enumerate() {
        let x0 = margin + n as f64 * (pw + margin);
        let y0 = margin;
        let peak = h.mass.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let bw = pw / GATE_BINS as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">layer {}</text>"#,
            x0 + pw / 2.0,
            y0 - 10.0,
            h.layer
        );
        for (b, &m) in h.mass.iter().enumerate() {
            let bh = ph * m / peak;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4472c4"><title>[{:.2},{:.2}) {:.4}</title></rect>"##,
                x0 + b as f64 * bw,
                y0 + ph - bh,
                bw - 1.0,
                bh,
                b as f64 * GATE_BIN_WIDTH,
                (b + 1) as f64 * GATE_BIN_WIDTH,
                m
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            y0 + ph,
            x0 + pw,
            y0 + ph
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{tick}</text>"#,
                x0 + tick * pw,
                y0 + ph + 14.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Penultimate decoder layer (1-based); a single-layer model uses layer 1.
pub fn penultimate_layer(n_layers: usize) -> usize {
    n_layers.saturating_sub(1).max(1)
}

/// Links `(i, argmax_j)` from the head-averaged matrix of `layer`.
/// Row `i - 1` of a record is the decoder step that predicts target `i`.
pub fn extract_alignment(
    records: &[AttentionRecord],
    tgt_len: usize,
    src_len: usize,
    layer: usize,
    source: AttnSource,
) -> Result<Links> {
    let heads: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == layer).collect();
    if heads.is_empty() {
        return contract(format!("no attention records for decoder layer {layer}"));
    }
    let mut avg = vec![0.0; tgt_len * src_len];
    for r in &heads {
        if r.src_len != src_len || r.width() != src_len || r.tgt_len < tgt_len {
            return contract(format!(
                "record {}x{} does not cover a {tgt_len}x{src_len} alignment",
                r.tgt_len,
                r.width()
            ));
        }
        let m = source.matrix(r).ok_or_else(|| {
            crate::error::Error::Contract(format!("layer {layer} has no beta matrix"))
        })?;
        for (a, &v) in avg.iter_mut().zip(&m[..tgt_len * src_len]) {
            *a += v;
        }
    }
    let n = heads.len() as f64;
    avg.iter_mut().for_each(|v| *v /= n);
    Ok((0..tgt_len)
        .map(|i| (i + 1, argmax(&avg[i * src_len..(i + 1) * src_len]) + 1))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentScores {
    pub aer: f64,
    pub precision: f64,
    pub recall: f64,
}

/// AER with all gold links sure.
pub fn aer(predicted: &Links, gold: &Links) -> Result<AlignmentScores> {
    if gold.is_empty() {
        return contract("gold alignment is empty");
    }
    let hit = predicted.intersection(gold).count() as f64;
    let (a, s) = (predicted.len() as f64, gold.len() as f64);
    Ok(AlignmentScores {
        aer: 1.0 - 2.0 * hit / (a + s),
        precision: if predicted.is_empty() { 0.0 } else { hit / a },
        recall: hit / s,
    })
}

/// Corpus-level AER: link counts pooled over sentences.
pub fn corpus_aer(predicted: &[Links], gold: &[Links]) -> Result<AlignmentScores> {
    if predicted.len() != gold.len() {
        return contract(format!(
            "{} predicted alignments for {} gold",
            predicted.len(),
            gold.len()
        ));
    }
    let (mut hit, mut a, mut s) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        hit += p.intersection(g).count();
        a += p.len();
        s += g.len();
    }
    if s == 0 {
        return contract("gold alignment is empty");
    }
    let (hit, a, s) = (hit as f64, a as f64, s as f64);
    Ok(AlignmentScores {
        aer: 1.0 - 2.0 * hit / (a + s),
        precision: if a == 0.0 { 0.0 } else { hit / a },
        recall: hit / s,
    })
}

fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and total hypothesis n-grams.
fn ngram_matches<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Modified n-gram precision; `None` when the hypothesis has no n-grams.
pub fn ngram_precision<T: Eq + Hash + Clone>(
    hyp: &[T],
    reference: &[T],
    n: usize,
) -> Result<Option<f64>> {
    if !(1..=4).contains(&n) {
        return contract(format!("n-gram order {n} outside 1..=4"));
    }
    let (m, total) = ngram_matches(hyp, reference, n);
    Ok((total > 0).then(|| m as f64 / total as f64))
}

/// Corpus-level modified precisions for n = 1..=4 (no smoothing).
pub fn corpus_ngram_precisions<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
) -> Result<[Option<f64>; 4]> {
    if hyps.len() != refs.len() {
        return contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        ));
    }
    let mut out = [None; 4];
    for (n, slot) in out.iter_mut().enumerate() {
        let (mut m, mut t) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b) = ngram_matches(h, r, n + 1);
            m += a;
            t += b;
        }
        *slot = (t > 0).then(|| m as f64 / t as f64);
    }
    Ok(out)
}

/// Corpus BLEU on a 0–100 scale: geometric mean of modified precisions for
/// n = 1..=4, add-one smoothing for n ≥ 2, times the brevity penalty.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return contract("BLEU of an empty corpus");
    }
    if hyps.len() != refs.len() {
        return contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        ));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let (a, b) = ngram_matches(h, rf, n);
            m += a;
            t += b;
        }
        let p = if n == 1 {
            m as f64 / t as f64
        } else {
            (m + 1) as f64 / (t + 1) as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln() / 4.0;
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketResult {
    pub bucket: String,
    pub sentences: usize,
    /// `None` for an empty bucket.
    pub bleu: Option<f64>,
    pub gamma_entropy: Option<f64>,
}

/// Greedy-decodes every sentence and reports BLEU and mean γ entropy
/// (over all decoder layers, forced decoding on the reference) per bucket.
pub fn length_bucket_eval(
    model: &Model,
    corpus: &[AlignedExample],
    buckets: &[LengthBucket],
) -> Result<Vec<BucketResult>> {
    let mut out = Vec::with_capacity(buckets.len());
    for b in buckets {
        let members: Vec<&AlignedExample> =
            corpus.iter().filter(|e| b.contains(e.src.len())).collect();
        if members.is_empty() {
            out.push(BucketResult {
                bucket: b.label(),
                sentences: 0,
                bleu: None,
                gamma_entropy: None,
            });
            continue;
        }
        let mut hyps = Vec::with_capacity(members.len());
        let mut refs = Vec::with_capacity(members.len());
        let mut ent = EntropyStats::default();
        for ex in &members {
            hyps.push(model.greedy_decode(&ex.src, decode_limit(model, ex))?);
            refs.push(ex.tgt.clone());
            for r in model.forced_decode_attention(&ex.src, &ex.tgt)? {
                for i in 0..r.tgt_len {
                    ent.add_row(r.row(&r.gamma, i));
                }
            }
        }
        out.push(BucketResult {
            bucket: b.label(),
            sentences: members.len(),
            bleu: Some(corpus_bleu(&hyps, &refs)?),
            gamma_entropy: ent.mean(),
        });
    }
    Ok(out)
}

/// Output cap for decoding `ex`: twice the reference length.
pub fn decode_limit(model: &Model, ex: &AlignedExample) -> usize {
    (2 * ex.tgt.len()).max(1).min(model.config().max_len - 1)
}

pub fn bucket_csv(rows: &[BucketResult]) -> String {
    let mut out = String::from("bucket,sentences,bleu,gamma_entropy\n");
    let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.bucket,
            r.sentences,
            f(r.bleu),
            f(r.gamma_entropy)
        );
    }
    out
}

/// One line of an attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpLine {
    pub sentence: usize,
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub records: Vec<AttentionRecord>,
}

pub fn write_attention_dump(path: &Path, lines: &[DumpLine]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn links(v: &[(usize, usize)]) -> Links {
        v.iter().copied().collect()
    }

    fn record(
        layer: usize,
        head: usize,
        tgt_len: usize,
        src_len: usize,
        gamma: Vec<f64>,
    ) -> AttentionRecord {
        AttentionRecord {
            layer,
            head,
            src_len,
            tgt_len,
            alpha: gamma.clone(),
            beta: None,
            gate: vec![0.0; tgt_len],
            gamma,
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((row_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(row_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((row_entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.0397).abs() < 5e-5);
        let s = attention_entropy([&[0.0, 0.0][..], &[0.5, 0.5][..]]);
        assert_eq!((s.rows, s.skipped), (1, 1));
        // under-normalized rows are renormalized first
        assert!((row_entropy(&[0.2, 0.2]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_examples() {
        let r = record(1, 1, 1, 3, vec![0.1, 0.7, 0.2]);
        assert_eq!(
            extract_alignment(&[r], 1, 3, 1, AttnSource::Gamma).unwrap(),
            links(&[(1, 2)])
        );
        let a = record(1, 1, 1, 2, vec![1.0, 0.0]);
        let b = record(1, 2, 1, 2, vec![0.0, 1.0]);
        assert_eq!(
            extract_alignment(&[a.clone(), b], 1, 2, 1, AttnSource::Gamma).unwrap(),
            links(&[(1, 1)])
        );
        assert!(extract_alignment(&[a.clone()], 1, 2, 2, AttnSource::Gamma).is_err());
        assert!(extract_alignment(&[a], 1, 2, 1, AttnSource::Beta).is_err());
    }

    #[test]
    fn aer_examples() {
        let s = links(&[(1, 1), (2, 2)]);
        let p = aer(&s, &s).unwrap();
        assert_eq!((p.aer, p.precision, p.recall), (0.0, 1.0, 1.0));
        assert_eq!(aer(&links(&[(1, 2)]), &s).unwrap().aer, 1.0);
        let p = aer(&links(&[(1, 1), (2, 3)]), &s).unwrap();
        assert_eq!((p.aer, p.precision, p.recall), (0.5, 0.5, 0.5));
        assert!(aer(&s, &Links::new()).is_err());
        assert_eq!(aer(&Links::new(), &s).unwrap().precision, 0.0);
    }

    #[test]
    fn ngram_examples() {
        let abc = ["a", "b", "c"];
        assert_eq!(ngram_precision(&abc, &abc, 2).unwrap(), Some(1.0));
        assert_eq!(
            ngram_precision(&abc, &["a", "b", "d"], 2).unwrap(),
            Some(0.5)
        );
        assert_eq!(
            ngram_precision(&["a", "a", "a"], &["a"], 1).unwrap(),
            Some(1.0 / 3.0)
        );
        assert_eq!(ngram_precision(&["a"], &["a"], 2).unwrap(), None);
        assert!(ngram_precision(&abc, &abc, 5).is_err());
    }

    #[test]
    fn bleu_examples() {
        let c = vec![vec!["a", "b", "c"], vec!["d", "e"]];
        assert_eq!(corpus_bleu(&c, &c).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&[vec![]], &[vec!["a"]]).unwrap(), 0.0);
        let b = corpus_bleu(
            &[vec!["a", "b", "c", "d"]],
            &[vec!["a", "b", "c", "d", "e"]],
        )
        .unwrap();
        assert!((b - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 5e-3);
        assert!(corpus_bleu::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn gate_bins() {
        assert_eq!(gate_bin(0.0), 0);
        assert_eq!(gate_bin(1.0), GATE_BINS - 1);
        assert_eq!(gate_bin(0.51), 10);
        let mut r = record(2, 1, 3, 2, vec![0.5; 6]);
        r.gate = vec![0.0, 0.5, 1.0];
        let rep = gate_report([&r]);
        assert_eq!(rep.layers.len(), 1);
        assert!((rep.layers[0].mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gate_histogram_svg(&rep).starts_with("<svg"));
    }

    #[test]
    fn buckets() {
        let b = default_length_buckets();
        assert_eq!(b.len(), 4);
        assert!(b[0].contains(10) && !b[0].contains(11) && b[1].contains(11));
        assert!(b[3].contains(1000));
        assert_eq!(entropy_buckets()[1].label(), "(20,40]");
        assert!(LengthBucket::from_edges(&[5, 5]).is_err());
    }
}
