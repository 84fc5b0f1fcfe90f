//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion that all of them held. Criteria 5 to 7 run the default
//! pipeline for seeds 1, 2 and 3 and judge the median.
//!
//! Report lines go straight to stderr so they show without `--nocapture`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use discup::checkpoint::{decode, encode, Metadata};
use discup::config::RunConfig;
use discup::data::{AttributeCorpus, AttributeLabel, Sample};
use discup::disc::Discriminator;
use discup::discup::{
    discup_train, objective_gradient_check, sign_suite, soft_targets, vanilla_prompt_train, DiscupConfig,
};
use discup::eval::{distinctness, generate_all, EvalReport};
use discup::grad::Module;
use discup::pipeline::{pipeline_run, PipelineOutcome};
use discup::prompt::PromptBlock;
use discup::seqmodel::{CausalLm, GenerationConfig, TransformerConfig, BOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHAS: [f64; 5] = [0.001, 0.005, 0.01, 0.1, 1.0];
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn tiny() -> TransformerConfig {
    TransformerConfig { vocab_size: 16, d_model: 16, layers: 1, heads: 2, max_context: 32 }
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in 1..=3 {
        for alpha in [0.01, 0.3] {
            let r = objective_gradient_check(seed, alpha, 1e-5).unwrap();
            worst = worst.max(r.max_relative_error);
            params = r.parameters;
        }
    }
    let elapsed = t.elapsed();
    Verdict {
        id: 1,
        name: "gradient correctness",
        pass: worst < 1e-4 && elapsed < Duration::from_secs(10),
        detail: format!("{params} prompt parameters x 6 cases, max rel err {worst:.3e}, {:.2}s", elapsed.as_secs_f64()),
    }
}

fn sign_suite_criterion() -> Verdict {
    let t = Instant::now();
    let s = sign_suite(1000, 17).unwrap();
    let elapsed = t.elapsed();
    Verdict {
        id: 2,
        name: "gradient sign suite",
        pass: s.passed() && elapsed < Duration::from_secs(5),
        detail: format!(
            "{}/{} signs, boundary other {:.1e}, unlike identity {:.1e}, {:.2}s",
            s.signs_held,
            s.trials,
            s.boundary_max_other,
            s.unlike_identity_error,
            elapsed.as_secs_f64()
        ),
    }
}

fn oracle_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).fold(0, |b, i| if x[i] > x[b] { i } else { b })
}

fn soft_target_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sum_err, mut mirror_err, mut argmax_fail, mut sharp_min) = (0.0f64, 0.0f64, 0, 1.0f64);
    for _ in 0..500 {
        let k = rng.random_range(2..=16);
        let d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let comp: Vec<f64> = d.iter().map(|x| 1.0 - x).collect();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        for alpha in ALPHAS {
            let s = soft_targets(&d, alpha).unwrap();
            let s2 = soft_targets(&comp, alpha).unwrap();
            sum_err = sum_err.max((s.iter().sum::<f64>() - 1.0).abs()).max((s2.iter().sum::<f64>() - 1.0).abs());
            let scaled: Vec<f64> = neg.iter().map(|x| x / alpha).collect();
            let oracle = oracle_softmax(&scaled);
            mirror_err = s2.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(mirror_err, f64::max);
            let unique_max = d.iter().filter(|&&x| x == d[argmax(&d)]).count() == 1;
            if unique_max && argmax(&s) != argmax(&d) {
                argmax_fail += 1;
            }
        }
        let mut sharp = d.iter().map(|x| x * 0.85).collect::<Vec<_>>();
        let top = rng.random_range(0..k);
        let second = sharp.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &x)| x).fold(0.0, f64::max);
        sharp[top] = second + rng.random_range(0.1..0.15);
        sharp_min = sharp_min.min(soft_targets(&sharp, 1e-3).unwrap()[top]);
    }
    Verdict {
        id: 3,
        name: "soft-target identities",
        pass: sum_err <= 1e-6 && mirror_err <= 1e-6 && argmax_fail == 0 && sharp_min >= 0.99,
        detail: format!(
            "sum err {sum_err:.1e}, mirror err {mirror_err:.1e}, argmax misses {argmax_fail}, sharp mass min {sharp_min:.6}"
        ),
    }
}

fn frozen_contract(outcomes: &[PipelineOutcome]) -> Verdict {
    let clm = CausalLm::<f32>::new(tiny(), 1).unwrap();
    let disc = Discriminator::<f32>::new(tiny(), 2).unwrap();
    let (hc, hd) = (clm.param_hash(), disc.param_hash());
    let samples = (0..6).map(|i| Sample { label: None, tokens: vec![BOS, 2 + i, 3 + i, 9, 4 + (i % 3), 11] }).collect();
    let corpus = AttributeCorpus { samples };
    let cfg = DiscupConfig { top_k: 4, epochs: 2, prompt_len: 3, batch_size: 2, lr: 1e-2, ..DiscupConfig::default() };
    vanilla_prompt_train(&clm, &corpus, &cfg).unwrap();
    discup_train(&clm, &disc, &corpus, &cfg).unwrap();
    let direct = clm.param_hash() == hc && disc.param_hash() == hd;
    let checks: Vec<&(String, bool)> = outcomes.iter().flat_map(|o| &o.frozen_checks).collect();
    let pipeline = !checks.is_empty() && checks.iter().all(|(_, ok)| *ok);
    Verdict {
        id: 4,
        name: "frozen contract",
        pass: direct && pipeline,
        detail: format!(
            "direct tuning hashes unchanged: {direct}; pipeline checks {} all unchanged: {pipeline}",
            checks.len()
        ),
    }
}

fn reports<'a>(outcomes: &'a [PipelineOutcome], method: &str) -> Vec<&'a EvalReport> {
    outcomes.iter().map(|o| &o.reports[method]).collect()
}

fn steering(outcomes: &[PipelineOutcome], slowest: Duration) -> Verdict {
    let gaps: Vec<f64> =
        outcomes.iter().map(|o| o.reports["discup"].correctness - o.reports["vanilla"].correctness).collect();
    let adv: Vec<f64> = outcomes
        .iter()
        .map(|o| o.reports["discup"].correctness_adversarial - o.reports["discup_nul"].correctness_adversarial)
        .collect();
    let (gap, adv_gap) = (median(gaps.clone()), median(adv.clone()));
    Verdict {
        id: 5,
        name: "desk-scale steering",
        pass: gap >= 0.10 && adv_gap >= 0.0 && slowest < Duration::from_secs(600),
        detail: format!(
            "median discup-vanilla {gap:+.3} {gaps:.3?}; median adversarial UL-noUL {adv_gap:+.3} {adv:.3?}; slowest run {:.0}s",
            slowest.as_secs_f64()
        ),
    }
}

fn coverage(outcomes: &[PipelineOutcome]) -> Verdict {
    let van: Vec<f64> = reports(outcomes, "vanilla").iter().map(|r| r.coverage).collect();
    let dis: Vec<f64> = reports(outcomes, "discup").iter().map(|r| r.coverage).collect();
    let samples = reports(outcomes, "discup")[0].samples;
    let (v, d) = (median(van.clone()), median(dis.clone()));
    Verdict {
        id: 6,
        name: "coverage analog",
        pass: v >= 0.30 && d <= 0.10 && samples >= 200,
        detail: format!("median vanilla {v:.3} {van:.3?}; median discup {d:.3} {dis:.3?}; {samples} prompts"),
    }
}

fn fluency(outcomes: &[PipelineOutcome]) -> Verdict {
    let ratios: Vec<f64> = outcomes.iter().map(|o| o.reports["discup"].ppl / o.reports["unconditioned"].ppl).collect();
    let r = median(ratios.clone());
    Verdict {
        id: 7,
        name: "fluency guardrail",
        pass: r <= 1.5,
        detail: format!("median discup/unconditioned perplexity {r:.3} {ratios:.3?}"),
    }
}

fn brute_distinct(texts: &[Vec<usize>]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for n in 1..=3 {
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut total = 0;
        for t in texts.iter().filter(|t| t.len() >= n) {
            for w in t.windows(n) {
                *seen.entry(format!("{w:?}")).or_default() += 1;
                total += 1;
            }
        }
        out[n - 1] = if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 };
    }
    out
}

fn reduced() -> RunConfig {
    RunConfig {
        per_class: 60,
        domain_per_class: 40,
        d_model: 16,
        layers: 1,
        heads: 2,
        disc_d_model: 16,
        clm_epochs: 1,
        disc_epochs: 1,
        epochs: 1,
        prompt_len: 4,
        neutral_prompts: 8,
        adversarial_prompts: 4,
        max_new_tokens: 6,
        ..RunConfig::default()
    }
}

fn metric_oracles() -> Verdict {
    let arch = TransformerConfig { vocab_size: 64, d_model: 16, layers: 1, heads: 2, max_context: 40 };
    let clm = CausalLm::<f32>::new(arch, 3).unwrap();
    let prompts: Vec<Vec<usize>> = (0..100).map(|i| vec![BOS, 2 + i % 20]).collect();
    let gens =
        generate_all(&clm, None, &prompts, &GenerationConfig { seed: 5, ..GenerationConfig::default() }).unwrap();
    let distinct = gens.len() == 100 && distinctness(&gens).unwrap() == brute_distinct(&gens);

    let bits = |m: &dyn Fn() -> Vec<f32>| m().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let tokens = [BOS, 4, 9, 30, 2];
    let (clm2, _): (CausalLm<f32>, _) = decode(&encode(&clm, &Metadata::default())).unwrap();
    let disc = Discriminator::<f32>::new(arch, 4).unwrap();
    let (disc2, _): (Discriminator<f32>, _) = decode(&encode(&disc, &Metadata::default())).unwrap();
    let block = PromptBlock::<f32>::init(5, 16, AttributeLabel::POSITIVE, 6).unwrap();
    let (block2, _): (PromptBlock<f32>, _) = decode(&encode(&block, &Metadata::default())).unwrap();
    let roundtrip = clm2.param_hash() == clm.param_hash()
        && disc2 == disc
        && block2.param_hash() == block.param_hash()
        && bits(&|| clm.forward(&tokens, None).unwrap().data().to_vec())
            == bits(&|| clm2.forward(&tokens, None).unwrap().data().to_vec());

    let cfg = reduced();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = pipeline_run(&cfg, a.path(), false).unwrap().manifest;
    let mb = pipeline_run(&cfg, b.path(), false).unwrap().manifest;
    let manifests = ma == mb && ma.entries.len() > 20;
    Verdict {
        id: 8,
        name: "metric oracles",
        pass: distinct && roundtrip && manifests,
        detail: format!(
            "distinctness exact: {distinct}; checkpoint bit-exact: {roundtrip}; same-seed manifests equal ({} files): {manifests}",
            ma.entries.len()
        ),
    }
}

#[test]
fn acceptance() {
    let mut verdicts = vec![gradient_correctness(), sign_suite_criterion(), soft_target_identities()];
    let root = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let t = Instant::now();
        outcomes.push(pipeline_run(&cfg, &root.path().join(format!("seed{seed}")), false).unwrap());
        slowest = slowest.max(t.elapsed());
        let summary = fs::read_to_string(root.path().join(format!("seed{seed}/reports/summary.csv"))).unwrap();
        report(&format!("seed {seed} ({:.0}s)\n{summary}", t.elapsed().as_secs_f64()));
    }
    verdicts.push(frozen_contract(&outcomes));
    verdicts.push(steering(&outcomes, slowest));
    verdicts.push(coverage(&outcomes));
    verdicts.push(fluency(&outcomes));
    verdicts.push(metric_oracles());

    let mut failed = BTreeMap::new();
    for v in &verdicts {
        report(&format!("criterion {} {}: {} ({})", v.id, v.name, if v.pass { "PASS" } else { "FAIL" }, v.detail));
        if !v.pass {
            failed.insert(v.id, v.name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
