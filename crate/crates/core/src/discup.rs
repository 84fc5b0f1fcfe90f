//! Discriminator-cooperative unlikelihood prompt tuning.
//!
//! At every position of a training sequence the frozen language model,
//! without any control prompt, proposes its top-k next tokens. The
//! discriminator scores each candidate appended to the raw context, and a
//! sharp softmax over those scores (and over their complements) gives two
//! weightings of the candidate set. The prompted model is then pulled toward
//! the first weighting with a likelihood term and pushed away from the second
//! with an unlikelihood term. Only the prompt block ever receives updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeCorpus, AttributeLabel};
use crate::disc::Discriminator;
use crate::error::{contract, invalid, Result};
use crate::grad::{finite_difference_gradient, kernels, AdamConfig, AdamState, CandidateRow, Graph, Module, Var};
use crate::prompt::PromptBlock;
use crate::scalar::Scalar;
use crate::seqmodel::{top_k_ids, CausalLm, BOS};

/// Probability clamp applied before both logarithms of the objective.
pub const PROB_EPS: f64 = 1e-7;

/// Top-k candidates at one position, with discriminator scores and soft
/// targets once filled.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet<S> {
    pub position: usize,
    pub ids: Vec<usize>,
    pub base_probs: Vec<S>,
    /// `p_d(a | x_<t ⧺ c)`.
    pub scores: Vec<S>,
    /// `1 − scores`.
    pub complements: Vec<S>,
    /// Softmax of `scores / α`: likelihood weights.
    pub like: Vec<S>,
    /// Softmax of `complements / α`: unlikelihood weights.
    pub unlike: Vec<S>,
}

impl<S: Scalar> CandidateSet<S> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fills `like` and `unlike` from the stored scores.
    pub fn set_soft_targets(&mut self, alpha: f64) -> Result<()> {
        self.like = soft_targets(&self.scores, alpha)?;
        self.unlike = soft_targets(&self.complements, alpha)?;
        Ok(())
    }
}

/// The `k` most probable ids of `distribution`, descending, ties by id.
/// `k` larger than the vocabulary is clamped with a warning.
pub fn select_candidates<S: Scalar>(distribution: &[S], k: usize, position: usize) -> Result<CandidateSet<S>> {
    if k == 0 {
        return Err(invalid("candidate count must be at least 1"));
    }
    if k > distribution.len() {
        log::warn!("candidate count {k} exceeds vocabulary {}; clamping", distribution.len());
    }
    let ids = top_k_ids(distribution, k);
    let base_probs = ids.iter().map(|&i| distribution[i]).collect();
    Ok(CandidateSet {
        position,
        ids,
        base_probs,
        scores: Vec::new(),
        complements: Vec::new(),
        like: Vec::new(),
        unlike: Vec::new(),
    })
}

/// Scores each candidate appended to the raw context (no prompt).
pub fn score_candidates<S: Scalar>(
    set: &mut CandidateSet<S>,
    context: &[usize],
    disc: &Discriminator<S>,
    attribute: AttributeLabel,
) -> Result<()> {
    set.scores = disc.score_batch(context, &set.ids, attribute)?;
    set.complements = set.scores.iter().map(|&d| S::one() - d).collect();
    Ok(())
}

/// `softmax(scores / α)` over the candidate set.
pub fn soft_targets<S: Scalar>(scores: &[S], alpha: f64) -> Result<Vec<S>> {
    if alpha.is_nan() || alpha <= 0.0 || !alpha.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {alpha}")));
    }
    let inv = S::of(1.0 / alpha);
    let mut out: Vec<S> = scores.iter().map(|&d| d * inv).collect();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// Plain evaluation of the per-position objective on candidate
/// probabilities: `−Σ s·log p − [enabled] Σ s'·log(1 − p)`, clamped.
pub fn objective_value(probs: &[f64], like: &[f64], unlike: &[f64], unlikelihood: bool) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let l: f64 = probs.iter().zip(like).map(|(&p, &s)| -s * clamp(p).ln()).sum();
    if !unlikelihood {
        return l;
    }
    l + probs.iter().zip(unlike).map(|(&p, &s)| -s * (1.0 - clamp(p)).ln()).sum::<f64>()
}

/// Candidate loss for one position of one context, with the prompt block
/// prefixed. Returns the scalar node and its likelihood/unlikelihood parts.
pub fn step_loss<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    model: &'a CausalLm<S>,
    block: &'a PromptBlock<S>,
    context: &[usize],
    set: &CandidateSet<S>,
    unlikelihood: bool,
) -> Result<(Var, S, S)> {
    g.freeze(model);
    let prompt = block.reparameterize_graph(g);
    let logits = model.logits_graph(g, &[(Some(prompt), context)])?;
    let row = context.len() - 1;
    Ok(g.candidate_loss(logits, vec![candidate_row(set, row, unlikelihood)], S::of(PROB_EPS)))
}

fn candidate_row<S: Scalar>(set: &CandidateSet<S>, row: usize, unlikelihood: bool) -> CandidateRow<S> {
    CandidateRow {
        row,
        ids: set.ids.clone(),
        like: set.like.clone(),
        unlike: if unlikelihood { set.unlike.clone() } else { vec![S::zero(); set.len()] },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscupConfig {
    pub alpha: f64,
    pub top_k: usize,
    pub attribute: AttributeLabel,
    pub epochs: usize,
    pub lr: f64,
    pub unlikelihood: bool,
    pub seed: u64,
    pub prompt_len: usize,
    pub batch_size: usize,
}

impl Default for DiscupConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            top_k: 16,
            attribute: AttributeLabel::POSITIVE,
            epochs: 6,
            lr: 1e-3,
            unlikelihood: true,
            seed: 0,
            prompt_len: 10,
            batch_size: 8,
        }
    }
}

impl DiscupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(invalid("alpha must be positive"));
        }
        if self.top_k == 0 || (self.unlikelihood && self.top_k < 2) {
            return Err(invalid("top_k must be ≥ 2 with unlikelihood enabled, ≥ 1 otherwise"));
        }
        if self.prompt_len == 0 || self.batch_size == 0 {
            return Err(invalid("prompt_len and batch_size must be positive"));
        }
        Ok(())
    }
}

/// One line per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TuneLog {
    pub header: String,
    /// `(epoch, mean likelihood loss, mean unlikelihood loss)` per position.
    pub epochs: Vec<(usize, f64, f64)>,
}

impl TuneLog {
    pub fn render(&self) -> String {
        let mut s = format!("# {}\n", self.header);
        s.push_str("epoch\tlike\tunlike\n");
        for (e, l, u) in &self.epochs {
            s.push_str(&format!("{e}\t{l:.6}\t{u:.6}\n"));
        }
        s
    }
}

/// Candidate sets for every position of a BOS-prefixed sequence.
/// Row `t` predicts `seq[t + 1]` from `seq[..=t]`.
pub fn sequence_candidates<S: Scalar>(
    clm: &CausalLm<S>,
    disc: &Discriminator<S>,
    seq: &[usize],
    cfg: &DiscupConfig,
) -> Result<Vec<CandidateSet<S>>> {
    let context = &seq[..seq.len() - 1];
    let dists = clm.distributions(context, None)?;
    dists
        .iter()
        .enumerate()
        .map(|(t, dist)| {
            let mut set = select_candidates(dist, cfg.top_k, t + 1)?;
            score_candidates(&mut set, &context[..=t], disc, cfg.attribute)?;
            set.set_soft_targets(cfg.alpha)?;
            Ok(set)
        })
        .collect()
}

fn check_tuning_corpus(corpus: &AttributeCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(invalid("tuning corpus is empty"));
    }
    if let Some(i) = corpus.samples.iter().position(|s| s.tokens.first() != Some(&BOS) || s.tokens.len() < 2) {
        return Err(invalid(format!("sample {i} must be BOS-prefixed with at least one token")));
    }
    Ok(())
}

/// Applies accumulated prompt gradients with one Adam step.
fn apply<S: Scalar>(block: &mut PromptBlock<S>, grads: Vec<Option<Vec<S>>>, adam: &mut AdamState<S>) -> Result<()> {
    for (p, gr) in block.params_mut().into_iter().zip(grads) {
        if let Some(gr) = gr {
            p.accumulate_grad(&gr)?;
        }
    }
    adam.step(&mut block.params_mut())?;
    block.zero_grad();
    Ok(())
}

/// Trains a control prompt with the discriminator-cooperative objective.
/// Labels in `corpus` are ignored. `clm` and `disc` are only read.
pub fn discup_train<S: Scalar>(
    clm: &CausalLm<S>,
    disc: &Discriminator<S>,
    corpus: &AttributeCorpus,
    cfg: &DiscupConfig,
) -> Result<(PromptBlock<S>, TuneLog)> {
    cfg.validate()?;
    check_tuning_corpus(corpus)?;
    let mut block = PromptBlock::init(cfg.prompt_len, clm.d_model(), cfg.attribute, cfg.seed)?;
    let mut log = TuneLog {
        header: format!(
            "discup alpha={} top_k={} prompt_len={} epochs={} lr={} unlikelihood={} attribute={} seed={}",
            cfg.alpha,
            cfg.top_k,
            cfg.prompt_len,
            cfg.epochs,
            cfg.lr,
            cfg.unlikelihood,
            cfg.attribute.name(),
            cfg.seed
        ),
        epochs: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok((block, log));
    }
    // The frozen models make every candidate set constant across epochs.
    let sets: Vec<Vec<CandidateSet<S>>> =
        corpus.samples.iter().map(|s| sequence_candidates(clm, disc, &s.tokens, cfg)).collect::<Result<_>>()?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00d1_5c0b);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut like_sum, mut unlike_sum, mut positions) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::new();
                g.freeze(clm);
                let prompt = block.reparameterize_graph(&mut g);
                let items: Vec<(Option<Var>, &[usize])> = batch
                    .iter()
                    .map(|&i| {
                        let t = &corpus.samples[i].tokens;
                        (Some(prompt), &t[..t.len() - 1])
                    })
                    .collect();
                let logits = clm.logits_graph(&mut g, &items)?;
                let mut rows = Vec::new();
                let mut offset = 0;
                for &i in batch {
                    for (t, set) in sets[i].iter().enumerate() {
                        rows.push(candidate_row(set, offset + t, cfg.unlikelihood));
                    }
                    offset += sets[i].len();
                }
                let n = rows.len();
                let (loss, like, unlike) = g.candidate_loss(logits, rows, S::of(PROB_EPS));
                like_sum += like.as_f64();
                unlike_sum += unlike.as_f64();
                positions += n;
                let mean = g.scale(loss, S::one() / S::of(n as f64));
                g.backward(mean)?;
                g.module_grads(&block)
            };
            apply(&mut block, grads, &mut adam)?;
        }
        let n = positions.max(1) as f64;
        log.epochs.push((epoch, like_sum / n, unlike_sum / n));
    }
    Ok((block, log))
}

/// Vanilla prompt tuning: next-token MLE on a single-attribute corpus with
/// the prompt prefixed and only the prompt trainable.
pub fn vanilla_prompt_train<S: Scalar>(
    clm: &CausalLm<S>,
    corpus: &AttributeCorpus,
    cfg: &DiscupConfig,
) -> Result<(PromptBlock<S>, TuneLog)> {
    cfg.validate()?;
    check_tuning_corpus(corpus)?;
    let labels = corpus.labels_present();
    if labels.iter().any(|&l| l != cfg.attribute) {
        return Err(invalid("vanilla prompt tuning expects a single-attribute corpus"));
    }
    let mut block = PromptBlock::init(cfg.prompt_len, clm.d_model(), cfg.attribute, cfg.seed)?;
    let mut log = TuneLog {
        header: format!(
            "vanilla prompt_len={} epochs={} lr={} attribute={} seed={}",
            cfg.prompt_len,
            cfg.epochs,
            cfg.lr,
            cfg.attribute.name(),
            cfg.seed
        ),
        epochs: Vec::new(),
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a4111a);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll_sum, mut positions) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::new();
                g.freeze(clm);
                let prompt = block.reparameterize_graph(&mut g);
                let items: Vec<(Option<Var>, &[usize])> = batch
                    .iter()
                    .map(|&i| {
                        let t = &corpus.samples[i].tokens;
                        (Some(prompt), &t[..t.len() - 1])
                    })
                    .collect();
                let targets: Vec<usize> =
                    batch.iter().flat_map(|&i| corpus.samples[i].tokens[1..].iter().copied()).collect();
                let logits = clm.logits_graph(&mut g, &items)?;
                let loss = g.cross_entropy(logits, &targets);
                nll_sum += g.scalar(loss).as_f64();
                positions += targets.len();
                let mean = g.scale(loss, S::one() / S::of(targets.len() as f64));
                g.backward(mean)?;
                g.module_grads(&block)
            };
            apply(&mut block, grads, &mut adam)?;
        }
        log.epochs.push((epoch, nll_sum / positions.max(1) as f64, 0.0));
    }
    Ok((block, log))
}

/// Directional derivatives of `L = −log p_like − log(1 − p_unlike)` with
/// respect to each logit, analytic and by central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub probs: Vec<f64>,
    pub like_idx: usize,
    pub unlike_idx: usize,
    /// `∂L/∂h_i` from the closed form.
    pub analytic: Vec<f64>,
    /// `∂L/∂h_i` by central differences.
    pub numeric: Vec<f64>,
    pub max_abs_discrepancy: f64,
}

impl ProbeReport {
    pub fn p_unlike(&self) -> f64 {
        self.probs[self.unlike_idx]
    }

    pub fn like_derivative(&self) -> f64 {
        self.analytic[self.like_idx]
    }

    pub fn unlike_derivative(&self) -> f64 {
        self.analytic[self.unlike_idx]
    }

    /// Derivatives at every index other than the two named ones.
    pub fn other_derivatives(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.analytic.iter().copied().enumerate().filter(move |&(i, _)| i != self.like_idx && i != self.unlike_idx)
    }

    /// Raising the like logit lowers the loss; raising the unlike logit
    /// raises it; every other logit's derivative has the sign of
    /// `1 − 2·p_unlike` (zero at the boundary).
    pub fn signs_hold(&self, zero_tol: f64) -> bool {
        let boundary = 1.0 - 2.0 * self.p_unlike();
        self.like_derivative() < 0.0
            && self.unlike_derivative() > 0.0
            && self.other_derivatives().all(|(_, d)| d.abs() <= zero_tol || d.signum() == boundary.signum())
    }

    /// Same signs written for gradient ascent on `−L`: every entry flips.
    pub fn ascent_convention(&self) -> Vec<f64> {
        self.analytic.iter().map(|d| -d).collect()
    }
}

fn probe_loss(logits: &[f64], like: usize, unlike: usize) -> f64 {
    let lse = kernels::log_sum_exp(logits);
    let log_like = logits[like] - lse;
    let p_unlike = (logits[unlike] - lse).exp();
    -log_like - (1.0 - p_unlike).ln()
}

/// Closed-form and finite-difference gradient of the simplified
/// single-like/single-unlike loss over `softmax(logits)`.
pub fn gradient_sign_probe(logits: &[f64], like_idx: usize, unlike_idx: usize) -> Result<ProbeReport> {
    if like_idx == unlike_idx {
        return Err(invalid("like and unlike indices must differ"));
    }
    if like_idx >= logits.len() || unlike_idx >= logits.len() {
        return Err(invalid("probe index outside the logit vector"));
    }
    let probs = crate::grad::softmax(logits)?;
    let pu = probs[unlike_idx];
    let ratio = pu / (1.0 - pu);
    // ∂L/∂h_i = −(1[i=like] − p_i) + ratio·(1[i=unlike] − p_i)
    let analytic: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let like_ind = if i == like_idx { 1.0 } else { 0.0 };
            let unlike_ind = if i == unlike_idx { 1.0 } else { 0.0 };
            -(like_ind - p) + ratio * (unlike_ind - p)
        })
        .collect();
    let numeric = finite_difference_gradient(|h| probe_loss(h, like_idx, unlike_idx), logits, 1e-5);
    let max_abs_discrepancy = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    Ok(ProbeReport { probs, like_idx, unlike_idx, analytic, numeric, max_abs_discrepancy })
}

/// Aggregate of [`sign_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SignSuite {
    pub trials: usize,
    /// Random vectors on which like/unlike/other signs all held.
    pub signs_held: usize,
    /// Largest other-token derivative on vectors built with `p_unlike = 0.5`.
    pub boundary_max_other: f64,
    /// Largest `| |∂L/∂h_unlike| − 2·p_unlike |` in the ascent convention.
    pub unlike_identity_error: f64,
    /// Largest closed-form vs central-difference gap.
    pub max_fd_discrepancy: f64,
}

impl SignSuite {
    pub fn passed(&self) -> bool {
        self.signs_held == self.trials && self.boundary_max_other <= 1e-8 && self.unlike_identity_error <= 1e-6
    }
}

/// Random logit vectors (sizes 3 to 12, entries in ±4) plus, per trial, a
/// copy whose unlike logit is moved so that `p_unlike` is exactly one half.
pub fn sign_suite(trials: usize, seed: u64) -> Result<SignSuite> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SignSuite {
        trials,
        signs_held: 0,
        boundary_max_other: 0.0,
        unlike_identity_error: 0.0,
        max_fd_discrepancy: 0.0,
    };
    for _ in 0..trials {
        let n = rng.random_range(3..=12);
        let mut logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let like = rng.random_range(0..n);
        let unlike = (like + rng.random_range(1..n)) % n;
        let r = gradient_sign_probe(&logits, like, unlike)?;
        if r.signs_hold(0.0) {
            suite.signs_held += 1;
        }
        let ascent_unlike = r.ascent_convention()[unlike];
        suite.unlike_identity_error = suite.unlike_identity_error.max((ascent_unlike.abs() - 2.0 * r.p_unlike()).abs());
        suite.max_fd_discrepancy = suite.max_fd_discrepancy.max(r.max_abs_discrepancy);
        let rest: Vec<f64> = logits.iter().enumerate().filter(|&(i, _)| i != unlike).map(|(_, &h)| h).collect();
        logits[unlike] = kernels::log_sum_exp(&rest);
        let b = gradient_sign_probe(&logits, like, unlike)?;
        let other = b.other_derivatives().fold(0.0f64, |m, (_, d)| m.max(d.abs()));
        suite.boundary_max_other = suite.boundary_max_other.max(other);
    }
    Ok(suite)
}

/// Entries of the objective gradient smaller than this are compared
/// absolutely rather than relatively. Central differences at `eps = 1e-5`
/// on a loss of order one carry rounding noise near `1e-11`, so relative
/// error is only resolvable to `1e-4` above roughly `2e-7`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Backprop against central differences for every prompt parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

/// Rescales every non-normalization tensor of `module` to RMS `std`.
fn unit_scale<S: Scalar, M: Module<S>>(module: &mut M, std: f64) {
    let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(module.params_mut()) {
        if name.contains("ln") || name.contains("lstm") {
            continue;
        }
        let data = t.data_mut();
        let n = data.len() as f64;
        let var = data.iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            let k = S::from(std / var.sqrt()).unwrap();
            data.iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Full single-step objective on a tiny `f64` model (|V| = 16, width 16,
/// one layer), candidates scored by a tiny discriminator.
pub fn objective_gradient_check(seed: u64, alpha: f64, eps: f64) -> Result<GradCheck> {
    use crate::grad::max_relative_error;
    use crate::seqmodel::TransformerConfig;
    let arch = TransformerConfig { vocab_size: 16, d_model: 16, layers: 1, heads: 2, max_context: 32 };
    let mut clm = CausalLm::<f64>::new(arch, seed)?;
    unit_scale(&mut clm, 1.0 / (arch.d_model as f64).sqrt());
    let disc = Discriminator::<f64>::new(TransformerConfig { d_model: 8, ..arch }, seed ^ 0x9e37)?;
    let mut block = PromptBlock::<f64>::init(3, arch.d_model, AttributeLabel::POSITIVE, seed.wrapping_add(1))?;
    unit_scale(&mut block, 1.0);
    let context = [BOS, 4, 9, 3, 12];
    let mut set = select_candidates(&clm.next_token_distribution(&context, None)?, 5, context.len())?;
    score_candidates(&mut set, &context, &disc, AttributeLabel::POSITIVE)?;
    set.set_soft_targets(alpha)?;
    let mut g = Graph::new();
    let (loss, _, _) = step_loss(&mut g, &clm, &block, &context, &set, true)?;
    g.backward(loss)?;
    let grads = g.module_grads(&block);
    let value = |b: &PromptBlock<f64>| -> f64 {
        let dist = clm.next_token_distribution(&context, Some(&b.reparameterize())).expect("fits context");
        let probs: Vec<f64> = set.ids.iter().map(|&i| dist[i]).collect();
        objective_value(&probs, &set.like, &set.unlike, true)
    };
    let mut report = GradCheck { parameters: 0, max_relative_error: 0.0, max_abs_error: 0.0 };
    for (k, grad) in grads.iter().enumerate() {
        let analytic = grad.as_ref().ok_or_else(|| contract("prompt parameter received no gradient"))?;
        let base = block.named_params()[k].1.data().to_vec();
        let numeric = finite_difference_gradient(
            |x| {
                let mut b = block.clone();
                b.params_mut()[k].data_mut().copy_from_slice(x);
                value(&b)
            },
            &base,
            eps,
        );
        report.parameters += base.len();
        report.max_relative_error =
            report.max_relative_error.max(max_relative_error(analytic, &numeric, GRAD_CHECK_FLOOR));
        let abs = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    Ok(report)
}
