//! Generation harness and automatic metrics: attribute correctness,
//! distinct-n, domain-marker coverage and judge perplexity.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use crate::data::{AttributeLabel, TokenLayout};
use crate::disc::Discriminator;
use crate::error::{invalid, Result};
use crate::grad::Tensor;
use crate::prompt::MaterializedPrompt;
use crate::scalar::Scalar;
use crate::seqmodel::{CausalLm, GenerationConfig, Vocab, BOS};

/// Domain-marker ids counted by [`coverage_rate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordList {
    ids: BTreeSet<usize>,
}

impl KeywordList {
    pub fn new(ids: impl IntoIterator<Item = usize>, vocab_size: usize) -> Result<Self> {
        let ids: BTreeSet<usize> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(invalid("keyword list is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(invalid(format!("keyword id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { ids })
    }

    /// Every domain token of the layout.
    pub fn domain(layout: &TokenLayout) -> Self {
        Self { ids: layout.domain.clone().collect() }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }
}

/// Fraction of texts whose judge probability for `attribute` is strictly
/// above one half.
pub fn correctness<S: Scalar>(
    texts: &[Vec<usize>],
    judge: &Discriminator<S>,
    attribute: AttributeLabel,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(invalid("no texts to judge"));
    }
    let mut hits = 0usize;
    for t in texts {
        if judge.score(t, attribute)?.as_f64() > 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / texts.len() as f64)
}

/// Distinct-1/2/3: unique n-grams over all texts divided by the total
/// number of n-grams of that order. Texts shorter than `n` add nothing.
pub fn distinctness(texts: &[Vec<usize>]) -> Result<[f64; 3]> {
    if texts.is_empty() {
        return Err(invalid("no texts to measure"));
    }
    let mut out = [0.0; 3];
    for (slot, n) in out.iter_mut().zip(1..=3) {
        let mut seen: HashSet<&[usize]> = HashSet::new();
        let mut total = 0usize;
        for t in texts.iter().filter(|t| t.len() >= n) {
            for w in t.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
        *slot = if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 };
    }
    Ok(out)
}

/// Fraction of texts holding at least one keyword.
pub fn coverage_rate(texts: &[Vec<usize>], keywords: &KeywordList) -> Result<f64> {
    if texts.is_empty() {
        return Err(invalid("no texts to scan"));
    }
    let hits = texts.iter().filter(|t| t.iter().any(|&id| keywords.contains(id))).count();
    Ok(hits as f64 / texts.len() as f64)
}

/// `exp` of the mean NLL of each continuation given its prompt.
pub fn continuation_perplexity<S: Scalar>(
    judge_lm: &CausalLm<S>,
    prompts: &[Vec<usize>],
    continuations: &[Vec<usize>],
) -> Result<f64> {
    if prompts.len() != continuations.len() || prompts.is_empty() {
        return Err(invalid("prompts and continuations must pair up and be non-empty"));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for (p, c) in prompts.iter().zip(continuations) {
        if p.is_empty() {
            return Err(invalid("prompts must contain at least BOS"));
        }
        if c.is_empty() {
            continue;
        }
        let full: Vec<usize> = p.iter().chain(c).copied().collect();
        let dists = judge_lm.distributions(&full[..full.len() - 1], None)?;
        for (t, &id) in c.iter().enumerate() {
            nll -= dists[p.len() - 1 + t][id].as_f64().ln();
        }
        count += c.len();
    }
    if count == 0 {
        return Err(invalid("continuations are all empty"));
    }
    Ok((nll / count as f64).exp())
}

/// Evaluation prompts split into neutral and adversarial groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalPrompts {
    pub neutral: Vec<Vec<usize>>,
    pub adversarial: Vec<Vec<usize>>,
}

impl EvalPrompts {
    pub fn len(&self) -> usize {
        self.neutral.len() + self.adversarial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Neutral prompts first, then adversarial.
    pub fn all(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.neutral.iter().chain(&self.adversarial)
    }

    /// `group<TAB>tokens` per line; BOS is implicit.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (group, list) in [("neutral", &self.neutral), ("adversarial", &self.adversarial)] {
            for p in list {
                let _ = writeln!(out, "{group}\t{}", vocab.decode(p));
            }
        }
        out
    }

    pub fn from_tsv(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut p = Self::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (group, body) = line
                .split_once('\t')
                .ok_or_else(|| invalid(format!("prompt line {}: expected group<TAB>tokens", n + 1)))?;
            let mut ids = vec![BOS];
            ids.extend(vocab.encode(body)?);
            match group {
                "neutral" => p.neutral.push(ids),
                "adversarial" => p.adversarial.push(ids),
                _ => return Err(invalid(format!("prompt line {}: unknown group `{group}`", n + 1))),
            }
        }
        Ok(p)
    }
}

/// One continuation per prompt; prompt `i` samples with `gen.seed ^ i`.
pub fn generate_all<S: Scalar>(
    clm: &CausalLm<S>,
    prefix: Option<&Tensor<S>>,
    prompts: &[Vec<usize>],
    gen: &GenerationConfig,
) -> Result<Vec<Vec<usize>>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| clm.sample_continuation(p, prefix, &GenerationConfig { seed: gen.seed ^ i as u64, ..*gen }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correctness: f64,
    pub correctness_neutral: f64,
    pub correctness_adversarial: f64,
    pub ppl: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub coverage: f64,
    pub samples: usize,
    /// Free-form `key=value` pairs describing the run.
    pub config: Vec<(String, String)>,
}

pub const REPORT_CSV_HEADER: &str =
    "correctness,correctness_neutral,correctness_adversarial,ppl,dist1,dist2,dist3,coverage,samples";

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (k, v) in self.metrics() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "samples={}", self.samples);
        s
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols: Vec<String> = self.metrics().iter().map(|(_, v)| v.to_string()).collect();
        cols.push(self.samples.to_string());
        cols.join(",")
    }

    fn metrics(&self) -> [(&'static str, f64); 8] {
        [
            ("correctness", self.correctness),
            ("correctness_neutral", self.correctness_neutral),
            ("correctness_adversarial", self.correctness_adversarial),
            ("ppl", self.ppl),
            ("dist1", self.dist1),
            ("dist2", self.dist2),
            ("dist3", self.dist3),
            ("coverage", self.coverage),
        ]
    }

    /// Parses the output of [`Self::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = EvalReport {
            correctness: f64::NAN,
            correctness_neutral: f64::NAN,
            correctness_adversarial: f64::NAN,
            ppl: f64::NAN,
            dist1: f64::NAN,
            dist2: f64::NAN,
            dist3: f64::NAN,
            coverage: f64::NAN,
            samples: 0,
            config: Vec::new(),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("malformed report line `{line}`")))?;
            if let Some(key) = k.strip_prefix("config.") {
                r.config.push((key.to_string(), v.to_string()));
                continue;
            }
            let num = || v.parse::<f64>().map_err(|_| invalid(format!("bad number for {k}: `{v}`")));
            match k {
                "correctness" => r.correctness = num()?,
                "correctness_neutral" => r.correctness_neutral = num()?,
                "correctness_adversarial" => r.correctness_adversarial = num()?,
                "ppl" => r.ppl = num()?,
                "dist1" => r.dist1 = num()?,
                "dist2" => r.dist2 = num()?,
                "dist3" => r.dist3 = num()?,
                "coverage" => r.coverage = num()?,
                "samples" => r.samples = v.parse().map_err(|_| invalid(format!("bad sample count `{v}`")))?,
                _ => return Err(invalid(format!("unknown report key `{k}`"))),
            }
        }
        if r.samples == 0 || r.metrics().iter().any(|(_, v)| v.is_nan()) {
            return Err(invalid("report is missing fields"));
        }
        Ok(r)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Continuations produced for an evaluation, grouped like the prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct Generations {
    pub prompts: Vec<Vec<usize>>,
    pub continuations: Vec<Vec<usize>>,
    pub neutral_count: usize,
}

impl Generations {
    /// Prompt followed by continuation.
    pub fn full_texts(&self) -> Vec<Vec<usize>> {
        self.prompts.iter().zip(&self.continuations).map(|(p, c)| p.iter().chain(c).copied().collect()).collect()
    }
}

/// Judges and scorers shared by every evaluation.
pub struct Evaluator<'m, S> {
    pub judge_disc: &'m Discriminator<S>,
    pub judge_lm: &'m CausalLm<S>,
    pub keywords: KeywordList,
    pub attribute: AttributeLabel,
}

impl<'m, S: Scalar> Evaluator<'m, S> {
    /// Metrics over existing generations.
    pub fn score(&self, gens: &Generations, config: Vec<(String, String)>) -> Result<EvalReport> {
        let texts = gens.full_texts();
        if texts.is_empty() {
            return Err(invalid("evaluation set is empty"));
        }
        let (neutral, adversarial) = texts.split_at(gens.neutral_count);
        let group =
            |t: &[Vec<usize>]| if t.is_empty() { Ok(0.0) } else { correctness(t, self.judge_disc, self.attribute) };
        let [dist1, dist2, dist3] = distinctness(&gens.continuations)?;
        Ok(EvalReport {
            correctness: correctness(&texts, self.judge_disc, self.attribute)?,
            correctness_neutral: group(neutral)?,
            correctness_adversarial: group(adversarial)?,
            ppl: continuation_perplexity(self.judge_lm, &gens.prompts, &gens.continuations)?,
            dist1,
            dist2,
            dist3,
            coverage: coverage_rate(&gens.continuations, &self.keywords)?,
            samples: texts.len(),
            config,
        })
    }
}

/// Generates one continuation per evaluation prompt with `prompt` (or the
/// bare model when `None`) and scores them.
pub fn run_eval_suite<S: Scalar>(
    clm: &CausalLm<S>,
    prompt: Option<&MaterializedPrompt<S>>,
    evaluator: &Evaluator<'_, S>,
    prompts: &EvalPrompts,
    gen: &GenerationConfig,
    mut config: Vec<(String, String)>,
) -> Result<(EvalReport, Generations)> {
    if prompts.is_empty() {
        return Err(invalid("no evaluation prompts"));
    }
    let all: Vec<Vec<usize>> = prompts.all().cloned().collect();
    let continuations = generate_all(clm, prompt.map(|p| &p.matrix), &all, gen)?;
    let gens = Generations { prompts: all, continuations, neutral_count: prompts.neutral.len() };
    config.extend([
        ("gen_seed".to_string(), gen.seed.to_string()),
        ("top_k".to_string(), gen.top_k.to_string()),
        ("max_new_tokens".to_string(), gen.max_new_tokens.to_string()),
    ]);
    let report = evaluator.score(&gens, config)?;
    Ok((report, gens))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    PromptLength,
    CandidateK,
    TrainSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt_length" | "prompt-length" => Ok(Self::PromptLength),
            "candidate_k" | "candidate-k" => Ok(Self::CandidateK),
            "train_size" | "train-size" => Ok(Self::TrainSize),
            _ => Err(invalid(format!("unknown sweep axis `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PromptLength => "prompt_length",
            Self::CandidateK => "candidate_k",
            Self::TrainSize => "train_size",
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = "axis_value,correctness,ppl,dist1,dist2,dist3,coverage";

/// Runs `evaluate` once per axis value, in order.
pub fn sweep<F>(values: &[usize], mut evaluate: F) -> Result<Vec<(usize, EvalReport)>>
where
    F: FnMut(usize) -> Result<EvalReport>,
{
    if values.is_empty() {
        return Err(invalid("sweep needs at least one value"));
    }
    values.iter().map(|&v| Ok((v, evaluate(v)?))).collect()
}

pub fn sweep_csv(rows: &[(usize, EvalReport)]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for (v, r) in rows {
        let _ = writeln!(s, "{v},{},{},{},{},{},{}", r.correctness, r.ppl, r.dist1, r.dist2, r.dist3, r.coverage);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::TransformerConfig;

    #[test]
    fn distinct_on_repeating_text() {
        let d = distinctness(&[vec![0, 1, 0, 1]]).unwrap();
        assert_eq!(d, [0.5, 2.0 / 3.0, 1.0]);
        let short = distinctness(&[vec![4, 5]]).unwrap();
        assert_eq!(short, [1.0, 1.0, 0.0]);
        assert!(distinctness(&[]).is_err());
    }

    #[test]
    fn identical_texts_are_less_distinct() {
        let same = vec![vec![3, 4, 5, 3, 6]; 4];
        let varied: Vec<Vec<usize>> = (0..4).map(|i| vec![3 + i, 4, 5 + i, 3, 6 + i]).collect();
        let (a, b) = (distinctness(&same).unwrap(), distinctness(&varied).unwrap());
        assert!((0..3).all(|n| a[n] < b[n]));
        assert_eq!(a[0], 4.0 / 20.0);
    }

    #[test]
    fn coverage_counts_texts_with_markers() {
        let kw = KeywordList::new(56..64, 64).unwrap();
        let texts = vec![vec![10, 56, 11], vec![10, 11, 12]];
        assert_eq!(coverage_rate(&texts, &kw).unwrap(), 0.5);
        assert_eq!(coverage_rate(&texts[1..], &kw).unwrap(), 0.0);
        assert!(KeywordList::new([], 64).is_err());
        assert!(KeywordList::new([70], 64).is_err());
        assert!(coverage_rate(&[], &kw).is_err());
    }

    #[test]
    fn zero_head_judge_is_never_correct() {
        let mut judge = Discriminator::<f64>::new(TransformerConfig::discriminator(), 1).unwrap();
        judge.zero_head();
        let texts = vec![vec![0, 5, 6], vec![0, 30, 31]];
        assert_eq!(correctness(&texts, &judge, AttributeLabel::POSITIVE).unwrap(), 0.0);
        assert!(correctness(&[], &judge, AttributeLabel::POSITIVE).is_err());
    }

    #[test]
    fn report_roundtrips_through_kv() {
        let r = EvalReport {
            correctness: 0.75,
            correctness_neutral: 0.8,
            correctness_adversarial: 0.65,
            ppl: 12.5,
            dist1: 0.3,
            dist2: 0.6,
            dist3: 0.9,
            coverage: 0.05,
            samples: 300,
            config: vec![("method".into(), "discup".into())],
        };
        assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
        assert_eq!(r.to_csv_row().split(',').count(), REPORT_CSV_HEADER.split(',').count());
        assert!(EvalReport::from_kv("bogus=1\n").is_err());
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut lm = CausalLm::<f64>::new(TransformerConfig::generator(), 1).unwrap();
        lm.zero_head();
        let ppl = continuation_perplexity(&lm, &[vec![0, 3]], &[vec![4, 5, 6]]).unwrap();
        assert!((ppl - 64.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_table_shape() {
        let rows = sweep(&[2, 6], |v| {
            Ok(EvalReport {
                correctness: v as f64 / 10.0,
                correctness_neutral: 0.0,
                correctness_adversarial: 0.0,
                ppl: 1.0,
                dist1: 0.0,
                dist2: 0.0,
                dist3: 0.0,
                coverage: 0.0,
                samples: 1,
                config: vec![],
            })
        })
        .unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("axis_value,correctness"));
        assert!(sweep(&[], |_| unreachable!()).is_err());
        assert_eq!(SweepAxis::parse("candidate_k").unwrap(), SweepAxis::CandidateK);
    }
}
