//! Synthetic parallel corpora with exact gold alignments, batching, and
//! Pharaoh alignment files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// First id available to content tokens.
pub const FIRST_TOKEN: TokenId = 3;

/// Set of 1-based `(target i, source j)` links.
pub type Links = BTreeSet<(usize, usize)>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedExample {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub gold: Links,
}

impl AlignedExample {
    pub fn validate(&self) -> Result<()> {
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(Error::Spec("example has an empty side".into()));
        }
        if self.gold.is_empty() {
            return Err(Error::Spec("example has no gold links".into()));
        }
        let (i_max, j_max) = (self.tgt.len(), self.src.len());
        if let Some(&(i, j)) = self
            .gold
            .iter()
            .find(|&&(i, j)| i == 0 || j == 0 || i > i_max || j > j_max)
        {
            return Err(Error::Spec(format!("link {i}-{j} outside {i_max}x{j_max}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    Copy,
    Reverse,
    WindowPermute(usize),
    Expand(f64),
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::Reverse => write!(f, "reverse"),
            TaskKind::WindowPermute(w) => write!(f, "window_permute:{w}"),
            TaskKind::Expand(p) => write!(f, "expand:{p}"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once([':', '(']) {
            Some((n, a)) => (n.trim(), Some(a.trim().trim_end_matches(')').trim())),
            None => (s.trim(), None),
        };
        let bad = |what: &str| Error::Spec(format!("task {s:?}: {what}"));
        match (name, arg) {
            ("copy", None) => Ok(TaskKind::Copy),
            ("reverse", None) => Ok(TaskKind::Reverse),
            ("window_permute", Some(a)) => a
                .parse()
                .map(TaskKind::WindowPermute)
                .map_err(|_| bad("window width must be an integer")),
            ("expand", Some(a)) => a
                .parse()
                .map(TaskKind::Expand)
                .map_err(|_| bad("probability must be a number")),
            ("window_permute" | "expand", None) => Err(bad("missing parameter")),
            _ => Err(bad("expected copy, reverse, window_permute:W or expand:P")),
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary including the reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 16,
            min_len: 3,
            max_len: 10,
            corpus_size: 1000,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len < 1 {
            return Err(Error::Spec("min_len must be at least 1".into()));
        }
        if self.max_len < self.min_len {
            return Err(Error::Spec(format!(
                "max_len {} below min_len {}",
                self.max_len, self.min_len
            )));
        }
        if self.vocab_size <= FIRST_TOKEN as usize {
            return Err(Error::Spec(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        match self.kind {
            TaskKind::WindowPermute(w) if w < 1 => {
                Err(Error::Spec("window width must be at least 1".into()))
            }
            TaskKind::WindowPermute(w) if w > self.max_len => Err(Error::Spec(format!(
                "window width {w} exceeds max_len {}",
                self.max_len
            ))),
            TaskKind::Expand(p) if !(p > 0.0 && p < 1.0) => {
                Err(Error::Spec(format!("expand probability {p} outside (0,1)")))
            }
            _ => Ok(()),
        }
    }

    /// Longest target sentence the task can produce.
    pub fn max_target_len(&self) -> usize {
        match self.kind {
            TaskKind::Expand(_) => 2 * self.max_len,
            _ => self.max_len,
        }
    }
}

/// Which content tokens are emitted twice under `expand`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandRule {
    pub doubled: BTreeSet<TokenId>,
}

impl ExpandRule {
    /// Each content token is doubled with probability `p`, fixed by `seed`.
    pub fn sample(vocab_size: usize, p: f64, seed: u64) -> Self {
        let mut rng = rule_rng(seed);
        let doubled = (FIRST_TOKEN..vocab_size as TokenId)
            .filter(|_| rng.gen_bool(p))
            .collect();
        Self { doubled }
    }

    pub fn apply(&self, src: &[TokenId]) -> AlignedExample {
        let mut tgt = Vec::with_capacity(2 * src.len());
        let mut gold = Links::new();
        for (j, &t) in src.iter().enumerate() {
            let copies = if self.doubled.contains(&t) { 2 } else { 1 };
            for _ in 0..copies {
                tgt.push(t);
                gold.insert((tgt.len(), j + 1));
            }
        }
        AlignedExample {
            src: src.to_vec(),
            tgt,
            gold,
        }
    }
}

/// Fixed permutation used by `window_permute`: target slot `k` of a window
/// reads source slot `perm[k]`.
pub fn window_permutation(w: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..w).collect();
    if w < 2 {
        return perm;
    }
    let mut rng = rule_rng(seed);
    while perm.iter().enumerate().all(|(k, &p)| k == p) {
        perm.shuffle(&mut rng);
    }
    perm
}

/// Applies `perm` to each non-overlapping window; a short final window of
/// length `r` uses the entries of `perm` below `r`, in order.
pub fn permute_windows(src: &[TokenId], perm: &[usize]) -> AlignedExample {
    let w = perm.len();
    let mut tgt = Vec::with_capacity(src.len());
    let mut gold = Links::new();
    for start in (0..src.len()).step_by(w.max(1)) {
        let r = (src.len() - start).min(w);
        for &p in perm.iter().filter(|&&p| p < r) {
            tgt.push(src[start + p]);
            gold.insert((tgt.len(), start + p + 1));
        }
    }
    AlignedExample {
        src: src.to_vec(),
        tgt,
        gold,
    }
}

fn rule_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for example `n`: its own stream, so examples can be generated
/// independently of each other.
fn example_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64 + 1);
    rng
}

pub fn generate(spec: &TaskSpec) -> Result<Vec<AlignedExample>> {
    spec.validate()?;
    let perm = match spec.kind {
        TaskKind::WindowPermute(w) => window_permutation(w, spec.seed),
        _ => Vec::new(),
    };
    let rule = match spec.kind {
        TaskKind::Expand(p) => Some(ExpandRule::sample(spec.vocab_size, p, spec.seed)),
        _ => None,
    };
    let corpus = (0..spec.corpus_size)
        .map(|n| {
            let mut rng = example_rng(spec.seed, n);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<TokenId> = (0..len)
                .map(|_| rng.gen_range(FIRST_TOKEN..spec.vocab_size as TokenId))
                .collect();
            match spec.kind {
                TaskKind::Copy => AlignedExample {
                    tgt: src.clone(),
                    gold: (1..=len).map(|i| (i, i)).collect(),
                    src,
                },
                TaskKind::Reverse => AlignedExample {
                    tgt: src.iter().rev().copied().collect(),
                    gold: (1..=len).map(|i| (i, len + 1 - i)).collect(),
                    src,
                },
                TaskKind::WindowPermute(_) => permute_windows(&src, &perm),
                TaskKind::Expand(_) => rule.as_ref().expect("expand rule").apply(&src),
            }
        })
        .collect();
    Ok(corpus)
}

/// Padded batch; every per-row quantity keeps the true length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<AlignedExample>,
    /// `[B × src_width]`, padded with the pad id.
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn src_width(&self) -> usize {
        self.src.first().map_or(0, Vec::len)
    }

    pub fn tgt_width(&self) -> usize {
        self.tgt.first().map_or(0, Vec::len)
    }

    /// Non-pad source plus target tokens.
    pub fn token_count(&self) -> usize {
        self.src_lens.iter().sum::<usize>() + self.tgt_lens.iter().sum::<usize>()
    }
}

fn pad_rows(
    rows: &[&[TokenId]],
    pad_id: TokenId,
) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>, Vec<usize>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for r in rows {
        let mut p = r.to_vec();
        p.resize(width, pad_id);
        padded.push(p);
        masks.push((0..width).map(|k| k < r.len()).collect());
    }
    (padded, masks, rows.iter().map(|r| r.len()).collect())
}

/// Consecutive chunks of `batch_size` examples.
pub fn batchify(
    corpus: &[AlignedExample],
    batch_size: usize,
    pad_id: TokenId,
) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be positive".into()));
    }
    Ok(corpus
        .chunks(batch_size)
        .map(|c| make_batch(c, pad_id))
        .collect())
}

pub fn make_batch(examples: &[AlignedExample], pad_id: TokenId) -> Batch {
    let srcs: Vec<&[TokenId]> = examples.iter().map(|e| e.src.as_slice()).collect();
    let tgts: Vec<&[TokenId]> = examples.iter().map(|e| e.tgt.as_slice()).collect();
    let (src, src_mask, src_lens) = pad_rows(&srcs, pad_id);
    let (tgt, tgt_mask, tgt_lens) = pad_rows(&tgts, pad_id);
    Batch {
        examples: examples.to_vec(),
        src,
        tgt,
        src_mask,
        tgt_mask,
        src_lens,
        tgt_lens,
    }
}

pub fn write_corpus(path: &Path, corpus: &[AlignedExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in corpus {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<AlignedExample>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: AlignedExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Parsed alignment file; `empty_lines` lists 1-based lines without links.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentFile {
    pub sentences: Vec<Links>,
    pub empty_lines: Vec<usize>,
}

pub fn parse_alignment_line(line: &str, line_no: usize) -> Result<Links> {
    let mut links = Links::new();
    for pair in line.split_whitespace() {
        let parse = |s: &str| s.parse::<usize>().ok().filter(|&v| v >= 1);
        let link = pair
            .split_once('-')
            .and_then(|(i, j)| Some((parse(i)?, parse(j)?)))
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed link {pair:?}, expected 1-based i-j"),
            })?;
        links.insert(link);
    }
    Ok(links)
}

pub fn parse_alignments(text: &str) -> Result<AlignmentFile> {
    let mut file = AlignmentFile::default();
    for (n, line) in text.lines().enumerate() {
        let links = parse_alignment_line(line, n + 1)?;
        if links.is_empty() {
            file.empty_lines.push(n + 1);
        }
        file.sentences.push(links);
    }
    Ok(file)
}

/// One line per sentence, links in ascending `(i, j)` order.
pub fn format_alignments(sentences: &[Links]) -> String {
    let mut out = String::new();
    for links in sentences {
        let line: Vec<String> = links.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_alignment_file(path: &Path) -> Result<AlignmentFile> {
    parse_alignments(&std::fs::read_to_string(path)?)
}

pub fn write_alignment_file(path: &Path, sentences: &[Links]) -> Result<()> {
    std::fs::write(path, format_alignments(sentences))?;
    Ok(())
}

/// Target positions linked to each source position.
pub fn links_by_source(links: &Links) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(i, j) in links {
        m.entry(j).or_default().push(i);
    }
    m
}
