//! Datasets, tokenization, the synthetic pair task, metrics and confidence
//! measures.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Single,
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    F1,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub arity: Arity,
    pub classes: usize,
    /// Regression tasks are scored with Spearman only; no training
    /// objective exists for them.
    #[serde(default)]
    pub regression: bool,
    pub metric: MetricKind,
    pub max_len: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regression && self.metric != MetricKind::Spearman {
            return Err(Error::Config("regression tasks use the spearman metric".into()));
        }
        if !self.regression && self.classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        if self.metric == MetricKind::F1 && self.classes != 2 {
            return Err(Error::Config("f1 is defined for binary tasks only".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Writes the dataset as `label \t sentence_a [\t sentence_b]`, with a
    /// header row.
    pub fn write_tsv(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        let mut out = String::new();
        match self.spec.arity {
            Arity::Single => out.push_str("label\tsentence\n"),
            Arity::Pair => out.push_str("label\tsentence1\tsentence2\n"),
        }
        for ex in &self.examples {
            let body = ex.tokens.strip_prefix(&[CLS]).unwrap_or(&ex.tokens);
            let parts: Vec<String> = body
                .split(|&t| t == SEP)
                .filter(|s| !s.is_empty())
                .map(|s| vocab.decode(s).join(" "))
                .collect();
            let _ = writeln!(out, "{}\t{}", ex.label, parts.join("\t"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Column roles of a TSV file (zero-based column indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsvSchema {
    pub label: usize,
    pub text_a: usize,
    #[serde(default)]
    pub text_b: Option<usize>,
    #[serde(default = "default_true")]
    pub header: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvLoad {
    pub rows: Vec<RawExample>,
    /// One-based line numbers of malformed rows.
    pub skipped: Vec<usize>,
}

pub fn load_tsv(path: &Path, schema: &TsvSchema) -> Result<TsvLoad> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && schema.header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let field = |i: usize| cols.get(i).map(|s| s.trim()).filter(|s| !s.is_empty());
        let (Some(label), Some(a)) = (field(schema.label), field(schema.text_a)) else {
            skipped.push(n + 1);
            continue;
        };
        let b = match schema.text_b {
            Some(i) => match field(i) {
                Some(b) => Some(b.to_string()),
                None => {
                    skipped.push(n + 1);
                    continue;
                }
            },
            None => None,
        };
        rows.push(RawExample {
            text_a: a.to_string(),
            text_b: b,
            label: label.to_string(),
        });
    }
    if !skipped.is_empty() {
        log::warn!("{}: skipped {} malformed rows", path.display(), skipped.len());
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no valid rows", path.display())));
    }
    Ok(TsvLoad { rows, skipped })
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_vocab` most frequent tokens (ties broken
    /// lexicographically) after the reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab);
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w))
    }

    /// Reserved entries followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated to `max_len`.
    pub fn encode(&self, a: &str, b: Option<&str>, max_len: usize) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(tokenize(a).iter().map(|w| self.id(w)));
        ids.push(SEP);
        if let Some(b) = b {
            ids.extend(tokenize(b).iter().map(|w| self.id(w)));
            ids.push(SEP);
        }
        ids.truncate(max_len);
        ids
    }
}

/// Class labels as they appear in a file, mapped to ids in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Vec<String>,
}

impl LabelMap {
    pub fn from_rows(rows: &[RawExample]) -> Self {
        let set: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        Self {
            labels: set.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Builds a vocabulary over every text field and encodes the rows.
pub fn build_vocab_and_encode(
    rows: &[RawExample],
    labels: &LabelMap,
    max_vocab: usize,
    max_len: usize,
) -> Result<(Vocab, Vec<Example>)> {
    if rows.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let texts = rows
        .iter()
        .flat_map(|r| std::iter::once(r.text_a.as_str()).chain(r.text_b.as_deref()));
    let vocab = Vocab::build(texts, max_vocab);
    let examples = encode_rows(rows, &vocab, labels, max_len)?;
    Ok((vocab, examples))
}

pub fn encode_rows(
    rows: &[RawExample],
    vocab: &Vocab,
    labels: &LabelMap,
    max_len: usize,
) -> Result<Vec<Example>> {
    rows.iter()
        .map(|r| {
            let label = labels
                .id(&r.label)
                .ok_or_else(|| Error::Input(format!("unknown label `{}`", r.label)))?;
            Ok(Example {
                tokens: vocab.encode(&r.text_a, r.text_b.as_deref(), max_len),
                label,
            })
        })
        .collect()
}

/// Sentence-pair agreement task. Every sentence hides one marker token among
/// fillers; the label is 1 when both markers belong to the same class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub marker_classes: usize,
    pub markers_per_class: usize,
    pub fillers: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub train: usize,
    pub dev: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            marker_classes: 4,
            markers_per_class: 3,
            fillers: 24,
            min_words: 3,
            max_words: 6,
            train: 8000,
            dev: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.marker_classes < 2 || self.markers_per_class == 0 || self.fillers == 0 {
            return Err(Error::Config(
                "synthetic task needs ≥2 marker classes, ≥1 marker per class and ≥1 filler".into(),
            ));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("synthetic sentence lengths need 1 ≤ min ≤ max".into()));
        }
        if self.train == 0 || self.dev == 0 {
            return Err(Error::Config("synthetic splits must be nonempty".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let markers = (0..self.marker_classes)
            .flat_map(|c| (0..self.markers_per_class).map(move |j| format!("m{c}_{j}")));
        let fillers = (0..self.fillers).map(|k| format!("w{k}"));
        Vocab::from_tokens(markers.chain(fillers))
    }

    /// Longest packed sequence: `[CLS] a [SEP] b [SEP]`.
    pub fn max_len(&self) -> usize {
        2 * self.max_words + 3
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            name: "synthetic-pair".into(),
            arity: Arity::Pair,
            classes: 2,
            regression: false,
            metric: MetricKind::Accuracy,
            max_len: self.max_len(),
        }
    }

    fn marker(&self, class: usize, rng: &mut Rng) -> usize {
        RESERVED.len() + class * self.markers_per_class + rng.below(self.markers_per_class)
    }

    fn sentence(&self, class: usize, rng: &mut Rng) -> Vec<usize> {
        let first_filler = RESERVED.len() + self.marker_classes * self.markers_per_class;
        let n = self.min_words + rng.below(self.max_words - self.min_words + 1);
        let mut words: Vec<usize> = (0..n).map(|_| first_filler + rng.below(self.fillers)).collect();
        let at = rng.below(n);
        words[at] = self.marker(class, rng);
        words
    }

    fn split(&self, n: usize, rng: &mut Rng) -> Vec<Example> {
        let mut out: Vec<Example> = (0..n)
            .map(|i| {
                let same = i % 2 == 0;
                let ca = rng.below(self.marker_classes);
                let cb = if same {
                    ca
                } else {
                    (ca + 1 + rng.below(self.marker_classes - 1)) % self.marker_classes
                };
                let mut tokens = vec![CLS];
                tokens.extend(self.sentence(ca, rng));
                tokens.push(SEP);
                tokens.extend(self.sentence(cb, rng));
                tokens.push(SEP);
                Example {
                    tokens,
                    label: usize::from(same),
                }
            })
            .collect();
        rng.shuffle(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
}

pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let task = spec.task();
    let mut rng = Rng::from_name(seed, "synthetic.train");
    let train = spec.split(spec.train, &mut rng);
    let mut rng = Rng::from_name(seed, "synthetic.dev");
    let dev = spec.split(spec.dev, &mut rng);
    Ok(SyntheticData {
        vocab: spec.vocab(),
        train: Dataset {
            spec: task.clone(),
            examples: train,
        },
        dev: Dataset {
            spec: task,
            examples: dev,
        },
    })
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{a} predictions for {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::Input("metric over zero examples".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Binary F1 on the positive class (label 1). Zero when there are no true
/// positives.
pub fn f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    if preds.iter().chain(golds).any(|&x| x > 1) {
        return Err(Error::Input("f1 needs binary labels".into()));
    }
    let tp = preds.iter().zip(golds).filter(|&(&p, &g)| p == 1 && g == 1).count() as f64;
    let fp = preds.iter().zip(golds).filter(|&(&p, &g)| p == 1 && g == 0).count() as f64;
    let fneg = preds.iter().zip(golds).filter(|&(&p, &g)| p == 0 && g == 1).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp / (2.0 * tp + fp + fneg))
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with average-rank ties. Zero when either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

pub fn metric(kind: MetricKind, preds: &[usize], golds: &[usize]) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => accuracy(preds, golds),
        MetricKind::F1 => f1(preds, golds),
        MetricKind::Spearman => {
            let p: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
            let g: Vec<f64> = golds.iter().map(|&v| v as f64).collect();
            spearman(&p, &g)
        }
    }
}

/// `Σ (y_i − ȳ)²`.
pub fn variance_confidence(probs: &[f64]) -> f64 {
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    probs.iter().map(|p| (p - mean) * (p - mean)).sum()
}

/// `Σ y_i log y_i`, with `0 · log 0 = 0`.
pub fn neg_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum()
}

/// Fraction of examples per label.
pub fn label_balance(examples: &[Example]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / examples.len() as f64))
        .collect()
}
