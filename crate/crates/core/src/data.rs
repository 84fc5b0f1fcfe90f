//! Synthetic attribute language.
//!
//! A 64-token vocabulary split into neutral, positive, negative and domain
//! partitions. Each sample draws a label, then walks a label-conditioned
//! first-order Markov chain: the partition of every step follows the label's
//! mix ratios, and within the partition the previous token has a preferred
//! successor. Domain markers, drawn from a skewed frequency profile, can be
//! stamped over random positions to give a corpus a "style" unrelated to the
//! attribute. A second transition table gives domain-style corpora their own
//! dialect.

use std::fmt::Write as _;
use std::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::seqmodel::{Vocab, BOS};

/// Binary attribute class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeLabel(pub usize);

impl AttributeLabel {
    pub const NEGATIVE: Self = Self(0);
    pub const POSITIVE: Self = Self(1);

    pub fn opposite(self) -> Self {
        Self(1 - self.0)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "negative",
            1 => "positive",
            _ => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0" | "negative" => Ok(Self::NEGATIVE),
            "1" | "positive" => Ok(Self::POSITIVE),
            other => Err(invalid(format!("unknown attribute label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub label: Option<AttributeLabel>,
    /// BOS-prefixed ids.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeCorpus {
    pub samples: Vec<Sample>,
}

impl AttributeCorpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn with_label(&self, label: AttributeLabel) -> Self {
        Self { samples: self.samples.iter().filter(|s| s.label == Some(label)).cloned().collect() }
    }

    pub fn unlabeled(&self) -> Self {
        Self { samples: self.samples.iter().map(|s| Sample { label: None, tokens: s.tokens.clone() }).collect() }
    }

    pub fn take(&self, n: usize) -> Self {
        Self { samples: self.samples.iter().take(n).cloned().collect() }
    }

    pub fn labels_present(&self) -> Vec<AttributeLabel> {
        let mut l: Vec<_> = self.samples.iter().filter_map(|s| s.label).collect();
        l.sort();
        l.dedup();
        l
    }

    /// `label<TAB>tok tok ...` per line; BOS is implicit.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for s in &self.samples {
            if let Some(l) = s.label {
                let _ = write!(out, "{}\t", l.0);
            }
            out.push_str(&vocab.decode(&s.tokens));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, body) = match line.split_once('\t') {
                Some((l, b)) => (Some(AttributeLabel::parse(l)?), b),
                None => (None, line),
            };
            let mut tokens = vec![BOS];
            tokens.extend(vocab.encode(body).map_err(|e| invalid(format!("line {}: {e}", n + 1)))?);
            samples.push(Sample { label, tokens });
        }
        Ok(Self { samples })
    }
}

/// Id ranges of the four partitions. BOS and PAD sit inside the neutral
/// partition's share of the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub neutral: Range<usize>,
    pub positive: Range<usize>,
    pub negative: Range<usize>,
    pub domain: Range<usize>,
}

impl TokenLayout {
    pub fn new(pos: usize, neg: usize, neutral: usize, domain: usize) -> Result<Self> {
        if neutral < 3 || pos == 0 || neg == 0 || domain == 0 {
            return Err(invalid("partitions must be non-empty and neutral must exceed the two reserved ids"));
        }
        let neutral_r = 2..neutral;
        let positive = neutral..neutral + pos;
        let negative = positive.end..positive.end + neg;
        let domain_r = negative.end..negative.end + domain;
        Ok(Self { neutral: neutral_r, positive, negative, domain: domain_r })
    }

    pub fn vocab_size(&self) -> usize {
        self.domain.end
    }

    pub fn attribute(&self, label: AttributeLabel) -> Range<usize> {
        if label == AttributeLabel::POSITIVE {
            self.positive.clone()
        } else {
            self.negative.clone()
        }
    }

    pub fn is_domain(&self, id: usize) -> bool {
        self.domain.contains(&id)
    }

    pub fn vocab(&self) -> Vocab {
        let ordinary = (2..self.domain.start).map(|i| format!("t{i:02}"));
        let domain = (0..self.domain.len()).map(|i| format!("d{i}"));
        Vocab::new(ordinary.chain(domain)).expect("generated token names are unique")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub pos_tokens: usize,
    pub neg_tokens: usize,
    pub neutral_tokens: usize,
    pub domain_tokens: usize,
    /// Content tokens per sample, BOS excluded.
    pub seq_len: usize,
    /// Partition mix for (target attribute, neutral, opposite attribute).
    pub mix: [f64; 3],
    /// Chance that a step takes the previous token's preferred successor.
    pub stickiness: f64,
    /// Per-sample chance of stamping two domain markers, each drawn like a
    /// Markov step into the domain partition.
    pub marker_prob: f64,
    /// Samples per class, indexed by label id.
    pub counts: [usize; 2],
    pub seed: u64,
    /// Seeds the transition structure; corpora sharing it share a language.
    pub language_seed: u64,
    /// Draw from the domain dialect: same partitions, its own transitions.
    pub domain_style: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pos_tokens: 16,
            neg_tokens: 16,
            neutral_tokens: 24,
            domain_tokens: 8,
            seq_len: 24,
            mix: [0.60, 0.35, 0.05],
            stickiness: 0.5,
            marker_prob: 0.0,
            counts: [1000, 1000],
            seed: 1,
            language_seed: 0xd15c_0bad,
            domain_style: false,
        }
    }
}

pub const MARKERS_PER_SAMPLE: usize = 2;

const DOMAIN_STYLE_SALT: u64 = 0x00d0_3a1b_5e7f;

impl CorpusSpec {
    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.pos_tokens, self.neg_tokens, self.neutral_tokens, self.domain_tokens)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        if self.seq_len < 3 {
            return Err(invalid("seq_len must be at least 3"));
        }
        if self.mix.iter().any(|&m| !(0.0..=1.0).contains(&m)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mix ratios {:?} must be probabilities summing to 1", self.mix)));
        }
        if !(0.0..=1.0).contains(&self.stickiness) || !(0.0..=1.0).contains(&self.marker_prob) {
            return Err(invalid("stickiness and marker_prob must lie in [0, 1]"));
        }
        if self.counts.iter().sum::<usize>() == 0 {
            return Err(invalid("corpus must contain at least one sample"));
        }
        Ok(())
    }

    pub fn language(&self) -> Result<Language> {
        self.validate()?;
        let seed = if self.domain_style { self.language_seed ^ DOMAIN_STYLE_SALT } else { self.language_seed };
        Language::new(self.layout()?, seed, self.stickiness)
    }
}

/// Preferred-successor tables for the Markov chain.
#[derive(Clone, Debug)]
pub struct Language {
    pub layout: TokenLayout,
    stickiness: f64,
    /// `successor[prev][partition]`; partitions ordered neutral, positive,
    /// negative.
    successor: Vec<[usize; 3]>,
    /// Geometric (ratio 1/4) weights over the domain partition.
    markers: WeightedIndex<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Neutral = 0,
    Positive = 1,
    Negative = 2,
}

impl Language {
    fn new(layout: TokenLayout, seed: u64, stickiness: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successor = (0..layout.vocab_size())
            .map(|_| {
                [
                    rng.random_range(layout.neutral.clone()),
                    rng.random_range(layout.positive.clone()),
                    rng.random_range(layout.negative.clone()),
                ]
            })
            .collect();
        let markers = WeightedIndex::new(layout.domain.clone().map(|r| 0.25f64.powi((r - layout.domain.start) as i32)))
            .map_err(|e| invalid(format!("domain partition: {e}")))?;
        Ok(Self { layout, stickiness, successor, markers })
    }

    fn range(&self, p: Part) -> Range<usize> {
        match p {
            Part::Neutral => self.layout.neutral.clone(),
            Part::Positive => self.layout.positive.clone(),
            Part::Negative => self.layout.negative.clone(),
        }
    }

    fn marker<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.layout.domain.start + self.markers.sample(rng)
    }

    fn next_in<R: Rng + ?Sized>(&self, prev: usize, part: Part, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.stickiness {
            self.successor[prev][part as usize]
        } else {
            rng.random_range(self.range(part))
        }
    }

    fn walk<R: Rng + ?Sized>(&self, label: AttributeLabel, mix: [f64; 3], len: usize, rng: &mut R) -> Vec<usize> {
        let (target, opposite) = if label == AttributeLabel::POSITIVE {
            (Part::Positive, Part::Negative)
        } else {
            (Part::Negative, Part::Positive)
        };
        let mut tokens = Vec::with_capacity(len + 1);
        tokens.push(BOS);
        let mut prev = BOS;
        for _ in 0..len {
            let u: f64 = rng.random();
            let part = if u < mix[0] {
                target
            } else if u < mix[0] + mix[1] {
                Part::Neutral
            } else {
                opposite
            };
            prev = self.next_in(prev, part, rng);
            tokens.push(prev);
        }
        tokens
    }

    /// A BOS-prefixed walk confined to the neutral partition.
    pub fn neutral_walk<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut tokens = vec![BOS];
        let mut prev = BOS;
        for _ in 0..len {
            prev = self.next_in(prev, Part::Neutral, rng);
            tokens.push(prev);
        }
        tokens
    }
}

/// Generates a labeled corpus; a pure function of `spec`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<AttributeCorpus> {
    let lang = spec.language()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<AttributeLabel> = Vec::new();
    for (l, &n) in spec.counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(AttributeLabel(l), n));
    }
    labels.shuffle(&mut rng);
    let samples = labels
        .into_iter()
        .map(|label| {
            let mut tokens = lang.walk(label, spec.mix, spec.seq_len, &mut rng);
            if rng.random::<f64>() < spec.marker_prob {
                for p in rand::seq::index::sample(&mut rng, spec.seq_len, MARKERS_PER_SAMPLE.min(spec.seq_len)) {
                    tokens[1 + p] = lang.marker(&mut rng);
                }
            }
            Sample { label: Some(label), tokens }
        })
        .collect();
    Ok(AttributeCorpus { samples })
}

/// Label-stratified disjoint partitions. Within each label group the
/// samples are shuffled with `seed` and cut at rounded cumulative fractions.
pub fn split(corpus: &AttributeCorpus, fractions: &[f64], seed: u64) -> Result<Vec<AttributeCorpus>> {
    if fractions.is_empty() || fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut groups: Vec<(Option<AttributeLabel>, Vec<usize>)> = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        match groups.iter_mut().find(|(l, _)| *l == s.label) {
            Some((_, v)) => v.push(i),
            None => groups.push((s.label, vec![i])),
        }
    }
    groups.sort_by_key(|(l, _)| *l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (k, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if k + 1 == fractions.len() { idx.len() } else { (cum * n).round() as usize };
            parts[k].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            AttributeCorpus { samples: p.into_iter().map(|i| corpus.samples[i].clone()).collect() }
        })
        .collect())
}

/// Neutral opening contexts: BOS plus `len` neutral tokens.
pub fn neutral_prompts(spec: &CorpusSpec, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let lang = spec.language()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| lang.neutral_walk(len, &mut rng)).collect())
}

/// Openings (BOS plus `len` tokens) of samples carrying `label`, skipping
/// any opening that contains a domain marker.
pub fn attribute_prompts(
    corpus: &AttributeCorpus,
    layout: &TokenLayout,
    label: AttributeLabel,
    count: usize,
    len: usize,
) -> Vec<Vec<usize>> {
    corpus
        .samples
        .iter()
        .filter(|s| s.label == Some(label))
        .map(|s| s.tokens[..(len + 1).min(s.tokens.len())].to_vec())
        .filter(|p| !p.iter().any(|&t| layout.is_domain(t)))
        .take(count)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_partitions_cover_vocab() {
        let spec = CorpusSpec::default();
        let l = spec.layout().unwrap();
        assert_eq!(l.vocab_size(), 64);
        assert_eq!(l.neutral, 2..24);
        assert_eq!(l.positive.len(), 16);
        assert_eq!(l.negative.len(), 16);
        assert_eq!(l.domain, 56..64);
        let v = l.vocab();
        assert_eq!(v.len(), 64);
        assert_eq!(v.token(56), Some("d0"));
        assert_eq!(v.token(24), Some("t24"));
    }

    #[test]
    fn counts_and_labels() {
        let c = gen_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(c.len(), 2000);
        assert_eq!(c.labels_present(), vec![AttributeLabel::NEGATIVE, AttributeLabel::POSITIVE]);
        assert!(c.samples.iter().all(|s| s.tokens.len() == 25 && s.tokens[0] == BOS));
        assert!(c.samples.iter().all(|s| s.tokens.iter().all(|&t| t < 64)));
    }

    #[test]
    fn deterministic_per_spec() {
        let spec = CorpusSpec { counts: [50, 50], ..CorpusSpec::default() };
        assert_eq!(gen_corpus(&spec).unwrap(), gen_corpus(&spec).unwrap());
        let other = CorpusSpec { seed: 2, ..spec.clone() };
        assert_ne!(gen_corpus(&spec).unwrap(), gen_corpus(&other).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad_mix = CorpusSpec { mix: [0.5, 0.3, 0.1], ..CorpusSpec::default() };
        assert!(gen_corpus(&bad_mix).is_err());
        let short = CorpusSpec { seq_len: 2, ..CorpusSpec::default() };
        assert!(gen_corpus(&short).is_err());
        let empty = CorpusSpec { counts: [0, 0], ..CorpusSpec::default() };
        assert!(gen_corpus(&empty).is_err());
    }

    #[test]
    fn split_sizes_and_partition_law() {
        let c = gen_corpus(&CorpusSpec::default()).unwrap();
        let parts = split(&c, &[0.5, 0.2, 0.1, 0.1, 0.1], 9).unwrap();
        let sizes: Vec<usize> = parts.iter().map(AttributeCorpus::len).collect();
        assert_eq!(sizes, vec![1000, 400, 200, 200, 200]);
        for p in &parts {
            assert_eq!(p.with_label(AttributeLabel::POSITIVE).len() * 2, p.len());
        }
        assert_eq!(parts, split(&c, &[0.5, 0.2, 0.1, 0.1, 0.1], 9).unwrap());
        assert!(split(&c, &[0.5, 0.2], 9).is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let spec = CorpusSpec { counts: [3, 3], marker_prob: 1.0, ..CorpusSpec::default() };
        let c = gen_corpus(&spec).unwrap();
        let vocab = spec.layout().unwrap().vocab();
        let text = c.to_tsv(&vocab);
        assert!(text.lines().all(|l| l.contains('\t')));
        assert!(text.contains(" d") || text.contains("\td"));
        assert_eq!(AttributeCorpus::from_tsv(&text, &vocab).unwrap(), c);
        let unl = c.unlabeled();
        assert_eq!(AttributeCorpus::from_tsv(&unl.to_tsv(&vocab), &vocab).unwrap(), unl);
    }

    #[test]
    fn prompts_are_marker_free() {
        let spec = CorpusSpec { counts: [40, 40], marker_prob: 0.5, ..CorpusSpec::default() };
        let layout = spec.layout().unwrap();
        let c = gen_corpus(&spec).unwrap();
        let adv = attribute_prompts(&c, &layout, AttributeLabel::NEGATIVE, 100, 6);
        assert!(!adv.is_empty());
        assert!(adv.iter().all(|p| p.len() == 7 && !p.iter().any(|&t| layout.is_domain(t))));
        let neu = neutral_prompts(&spec, 5, 4, 3).unwrap();
        assert!(neu.iter().all(|p| p.len() == 5 && p[1..].iter().all(|t| layout.neutral.contains(t))));
    }
}
