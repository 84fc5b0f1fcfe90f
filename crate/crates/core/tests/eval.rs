use std::collections::HashMap;

use discup::data::{AttributeLabel, TokenLayout};
use discup::disc::Discriminator;
use discup::eval::{
    continuation_perplexity, correctness, coverage_rate, distinctness, generate_all, run_eval_suite, sweep, sweep_csv,
    EvalPrompts, EvalReport, Evaluator, KeywordList, SWEEP_CSV_HEADER,
};
use discup::seqmodel::{CausalLm, GenerationConfig, TransformerConfig, BOS};
use proptest::prelude::*;

const POS: AttributeLabel = AttributeLabel::POSITIVE;

fn arch() -> TransformerConfig {
    TransformerConfig { vocab_size: 64, d_model: 16, layers: 1, heads: 2, max_context: 40 }
}

/// Independent n-gram counter: string keys, explicit loops.
fn oracle_distinct(texts: &[Vec<usize>]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for n in 1..=3 {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0;
        for t in texts {
            if t.len() < n {
                continue;
            }
            for i in 0..=t.len() - n {
                let key = t[i..i + n].iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                *counts.entry(key).or_default() += 1;
                total += 1;
            }
        }
        out[n - 1] = if total == 0 { 0.0 } else { counts.len() as f64 / total as f64 };
    }
    out
}

/// A judge whose output ignores the input: `p(positive) = p`.
fn constant_judge(p: f32) -> Discriminator<f32> {
    let mut d = Discriminator::<f32>::new(arch(), 1).unwrap();
    d.zero_head();
    d.b_cls.data_mut()[POS.0] = (p / (1.0 - p)).ln();
    d
}

#[test]
fn distinctness_examples() {
    let [d1, d2, d3] = distinctness(&[vec![7, 8, 7, 8]]).unwrap();
    assert_eq!(d1, 0.5);
    assert!((d2 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(d3, 1.0);
    let same = vec![vec![1, 2, 3, 4]; 5];
    let varied: Vec<Vec<usize>> = (0..5).map(|i| vec![1 + i, 2 + i, 3 + 2 * i, 4]).collect();
    let (a, b) = (distinctness(&same).unwrap(), distinctness(&varied).unwrap());
    for n in 0..3 {
        assert!(a[n] < b[n]);
    }
    assert_eq!(distinctness(&[vec![5]]).unwrap(), [1.0, 0.0, 0.0]);
    assert!(distinctness(&[]).is_err());
}

#[test]
fn distinctness_matches_brute_force_on_seeded_generations() {
    let clm = CausalLm::<f32>::new(arch(), 3).unwrap();
    let prompts: Vec<Vec<usize>> = (0..100).map(|i| vec![BOS, 2 + i % 20]).collect();
    let gens =
        generate_all(&clm, None, &prompts, &GenerationConfig { seed: 5, ..GenerationConfig::default() }).unwrap();
    assert_eq!(gens.len(), 100);
    assert_eq!(distinctness(&gens).unwrap(), oracle_distinct(&gens));
}

#[test]
fn coverage_examples() {
    let layout = TokenLayout::new(16, 16, 24, 8).unwrap();
    let kw = KeywordList::domain(&layout);
    let (x, y, z, d0) = (2, 3, 4, layout.domain.start);
    assert_eq!(coverage_rate(&[vec![x, d0, y], vec![x, y, z]], &kw).unwrap(), 0.5);
    assert_eq!(coverage_rate(&[vec![x, y, z]], &kw).unwrap(), 0.0);
    assert!(coverage_rate(&[], &kw).is_err());
    assert!(KeywordList::new([], 64).is_err());
    assert!(KeywordList::new([64], 64).is_err());
}

#[test]
fn correctness_examples() {
    let texts = vec![vec![BOS, 3, 4], vec![BOS, 9], vec![BOS, 40, 41, 42]];
    assert!((constant_judge(0.9).score(&texts[0], POS).unwrap() - 0.9).abs() < 1e-6);
    assert_eq!(correctness(&texts, &constant_judge(0.9), POS).unwrap(), 1.0);
    assert_eq!(correctness(&texts, &constant_judge(0.5), POS).unwrap(), 0.0);
    assert!(correctness(&[], &constant_judge(0.9), POS).is_err());
}

#[test]
fn uniform_judge_lm_has_vocabulary_perplexity() {
    let mut lm = CausalLm::<f64>::new(arch(), 2).unwrap();
    lm.zero_head();
    let ppl = continuation_perplexity(&lm, &[vec![BOS, 3], vec![BOS]], &[vec![4, 5, 6], vec![7]]).unwrap();
    assert!((ppl - 64.0).abs() < 1e-9);
    assert!(continuation_perplexity(&lm, &[vec![BOS]], &[]).is_err());
}

#[test]
fn eval_suite_is_deterministic_and_bounded() {
    let clm = CausalLm::<f32>::new(arch(), 4).unwrap();
    let judge_disc = Discriminator::<f32>::new(arch(), 5).unwrap();
    let judge_lm = CausalLm::<f32>::new(arch(), 6).unwrap();
    let layout = TokenLayout::new(16, 16, 24, 8).unwrap();
    let ev = Evaluator {
        judge_disc: &judge_disc,
        judge_lm: &judge_lm,
        keywords: KeywordList::domain(&layout),
        attribute: POS,
    };
    let prompts = EvalPrompts {
        neutral: (0..12).map(|i| vec![BOS, 2 + i, 3 + i]).collect(),
        adversarial: (0..6).map(|i| vec![BOS, 40 + i, 41 + i]).collect(),
    };
    let gen = GenerationConfig { seed: 9, ..GenerationConfig::default() };
    let (a, ga) = run_eval_suite(&clm, None, &ev, &prompts, &gen, vec![]).unwrap();
    let (b, gb) = run_eval_suite(&clm, None, &ev, &prompts, &gen, vec![]).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert_eq!(a.samples, 18);
    assert!(ga.continuations.iter().all(|c| c.len() == 20));
    for v in [a.correctness, a.correctness_neutral, a.correctness_adversarial, a.dist1, a.dist2, a.dist3, a.coverage] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(a.ppl.is_finite() && a.ppl > 1.0);
    assert_eq!(EvalReport::from_kv(&a.to_kv()).unwrap(), a);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let report = |v: usize| EvalReport {
        correctness: v as f64 / 20.0,
        correctness_neutral: 0.0,
        correctness_adversarial: 0.0,
        ppl: 10.0,
        dist1: 0.5,
        dist2: 0.6,
        dist3: 0.7,
        coverage: 0.0,
        samples: 1,
        config: vec![],
    };
    let rows = sweep(&[2, 6, 10, 16], |v| Ok(report(v))).unwrap();
    assert_eq!(rows.len(), 4);
    let csv = sweep_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("2,0.1,10,"));
    assert!(sweep(&[], |v| Ok(report(v))).is_err());
}

proptest! {
    #[test]
    fn distinctness_matches_oracle_on_random_corpora(
        texts in prop::collection::vec(prop::collection::vec(0usize..6, 0..9), 1..12),
    ) {
        prop_assert_eq!(distinctness(&texts).unwrap(), oracle_distinct(&texts));
    }

    #[test]
    fn correctness_ignores_text_order(
        texts in prop::collection::vec(prop::collection::vec(2usize..64, 1..8), 1..10),
        rotate in 0usize..10,
    ) {
        let judge = Discriminator::<f32>::new(arch(), 7).unwrap();
        let texts: Vec<Vec<usize>> = texts.into_iter().map(|t| std::iter::once(BOS).chain(t).collect()).collect();
        let mut permuted = texts.clone();
        permuted.rotate_left(rotate % texts.len());
        permuted.reverse();
        prop_assert_eq!(correctness(&texts, &judge, POS).unwrap(), correctness(&permuted, &judge, POS).unwrap());
    }
}
