//! Causal language model: trunk plus an untied output projection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{TransformerConfig, Trunk};
use super::vocab::BOS;
use crate::error::{invalid, Error, Result};
use crate::grad::kernels;
use crate::grad::{AdamConfig, AdamState, Graph, Module, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct CausalLm<S> {
    pub trunk: Trunk<S>,
    pub w_head: Tensor<S>,
    pub b_head: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, lr: 2e-3, batch_size: 16, seed: 0 }
    }
}

/// Per-token mean negative log-likelihoods recorded during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Before the first update.
    pub initial_loss: f64,
    /// Running mean over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
    /// Full pass over the corpus after the last update.
    pub final_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 20, top_k: 10, seed: 0, temperature: 1.0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be at least 1"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Ids of the `k` most probable entries, descending, ties broken by
/// ascending id.
pub fn top_k_ids<S: Scalar>(probs: &[S], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k.min(probs.len()));
    ids
}

impl<S: Scalar> CausalLm<S> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(config, &mut rng)?;
        let w_head = Tensor::randn(&[config.d_model, config.vocab_size], 0.02, &mut rng).trainable();
        let b_head = Tensor::zeros(&[config.vocab_size]).trainable();
        Ok(Self { trunk, w_head, b_head })
    }

    pub fn config(&self) -> TransformerConfig {
        self.trunk.config
    }

    pub fn vocab_size(&self) -> usize {
        self.trunk.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.trunk.config.d_model
    }

    /// Zeroes the output projection, making every next-token distribution
    /// uniform.
    pub fn zero_head(&mut self) {
        self.w_head.data_mut().fill(S::zero());
        self.b_head.data_mut().fill(S::zero());
    }

    fn project(&self, hidden: &[S]) -> Vec<S> {
        let v = self.vocab_size();
        let mut out = vec![S::zero(); v];
        kernels::matvec_into(hidden, self.w_head.data(), v, &mut out);
        out.iter_mut().zip(self.b_head.data()).for_each(|(o, &b)| *o += b);
        out
    }

    /// Logits for every token position, `len(tokens) × |V|`. Prefix rows,
    /// when given, occupy the first positions but produce no logits.
    pub fn forward(&self, tokens: &[usize], prefix: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        let rows = self.trunk.hidden_rows(tokens, prefix)?;
        let data: Vec<S> = rows.iter().flat_map(|h| self.project(h)).collect();
        Tensor::new(&[tokens.len(), self.vocab_size()], data)
    }

    /// Logits for the token rows of packed items, stacked in item order.
    pub fn logits_graph<'a>(&'a self, g: &mut Graph<'a, S>, items: &[(Option<Var>, &[usize])]) -> Result<Var> {
        let hidden = self.trunk.forward_graph(g, items)?;
        let mut rows = Vec::new();
        let mut offset = 0;
        for (prefix, tokens) in items {
            let plen = prefix.map_or(0, |p| g.dims(p).0);
            rows.extend(offset + plen..offset + plen + tokens.len());
            offset += plen + tokens.len();
        }
        let picked = if rows.len() == offset { hidden } else { g.select_rows(hidden, &rows) };
        let w = g.leaf(&self.w_head);
        let b = g.leaf(&self.b_head);
        let logits = g.matmul(picked, w);
        Ok(g.add_bias(logits, b))
    }

    /// Softmax over the logits following the whole context.
    pub fn next_token_distribution(&self, context: &[usize], prefix: Option<&Tensor<S>>) -> Result<Vec<S>> {
        if context.is_empty() {
            return Err(invalid("context must hold at least BOS"));
        }
        let rows = self.trunk.hidden_rows(context, prefix)?;
        let mut p = self.project(rows.last().expect("non-empty context"));
        kernels::softmax_in_place(&mut p);
        Ok(p)
    }

    /// Next-token distributions after every prefix of `tokens`:
    /// row `t` conditions on `tokens[..=t]`.
    pub fn distributions(&self, tokens: &[usize], prefix: Option<&Tensor<S>>) -> Result<Vec<Vec<S>>> {
        let rows = self.trunk.hidden_rows(tokens, prefix)?;
        Ok(rows
            .iter()
            .map(|h| {
                let mut p = self.project(h);
                kernels::softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    /// Sum of next-token log-probabilities over a BOS-prefixed sequence.
    pub fn sequence_log_prob(&self, seq: &[usize], prefix: Option<&Tensor<S>>) -> Result<f64> {
        if seq.len() < 2 {
            return Ok(0.0);
        }
        let rows = self.trunk.hidden_rows(&seq[..seq.len() - 1], prefix)?;
        Ok(rows
            .iter()
            .zip(&seq[1..])
            .map(|(h, &t)| {
                let logits = self.project(h);
                (logits[t] - kernels::log_sum_exp(&logits)).as_f64()
            })
            .sum())
    }

    /// MLE on BOS-prefixed sequences with Adam. Returns the loss log.
    pub fn fit(&mut self, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainLog> {
        validate_corpus(corpus)?;
        if cfg.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a0);
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
        let mut log = TrainLog { initial_loss: self.corpus_loss(corpus, cfg.batch_size)?, ..TrainLog::default() };
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let seqs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].as_slice()).collect();
                let (nll, n) = self.mle_step(&seqs, &mut adam)?;
                sum += nll;
                count += n;
            }
            log.epoch_losses.push(sum / count.max(1) as f64);
        }
        log.final_loss = self.corpus_loss(corpus, cfg.batch_size)?;
        Ok(log)
    }

    fn mle_step(&mut self, seqs: &[&[usize]], adam: &mut AdamState<S>) -> Result<(f64, usize)> {
        let (grads, nll, n) = {
            let mut g = Graph::new();
            let (loss, n) = self.nll_graph(&mut g, seqs)?;
            let nll = g.scalar(loss).as_f64();
            let scaled = g.scale(loss, S::one() / S::of(n as f64));
            g.backward(scaled)?;
            (g.module_grads(&*self), nll, n)
        };
        for (p, gr) in self.params_mut().into_iter().zip(grads) {
            if let Some(gr) = gr {
                p.accumulate_grad(&gr)?;
            }
        }
        adam.step(&mut self.params_mut())?;
        self.zero_grad();
        Ok((nll, n))
    }

    /// Summed next-token NLL for a batch of sequences and the number of
    /// predicted tokens.
    pub fn nll_graph<'a>(&'a self, g: &mut Graph<'a, S>, seqs: &[&[usize]]) -> Result<(Var, usize)> {
        let items: Vec<(Option<Var>, &[usize])> = seqs.iter().map(|s| (None, &s[..s.len() - 1])).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let logits = self.logits_graph(g, &items)?;
        Ok((g.cross_entropy(logits, &targets), targets.len()))
    }

    /// Per-token mean NLL over the corpus, computed on the tape path.
    pub fn corpus_loss(&self, corpus: &[Vec<usize>], batch: usize) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in corpus.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let (loss, n) = self.nll_graph(&mut g, &seqs)?;
            sum += g.scalar(loss).as_f64();
            count += n;
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Samples `max_new_tokens` ids after `prompt` with top-k sampling.
    /// Returns only the new ids.
    pub fn sample_continuation(
        &self,
        prompt: &[usize],
        prefix: Option<&Tensor<S>>,
        gen: &GenerationConfig,
    ) -> Result<Vec<usize>> {
        self.sample_traced(prompt, prefix, gen).map(|(ids, _)| ids)
    }

    /// As [`Self::sample_continuation`], also returning the distribution
    /// each token was drawn from.
    pub fn sample_traced(
        &self,
        prompt: &[usize],
        prefix: Option<&Tensor<S>>,
        gen: &GenerationConfig,
    ) -> Result<(Vec<usize>, Vec<Vec<S>>)> {
        gen.validate()?;
        if prompt.is_empty() {
            return Err(invalid("prompt must hold at least BOS"));
        }
        let plen = prefix.map_or(0, |p| p.dims2().0);
        let total = plen + prompt.len() + gen.max_new_tokens - 1;
        let max = self.config().max_context;
        if total > max {
            return Err(Error::ContextOverflow { len: total, max });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
        let mut cache = self.trunk.new_cache();
        self.trunk.feed_prefix(&mut cache, prefix)?;
        let mut hidden = Vec::new();
        for &t in prompt {
            hidden = self.trunk.step(&mut cache, self.trunk.token_row(t)?, true)?;
        }
        let inv_temp = S::of(1.0 / gen.temperature);
        let mut out = Vec::with_capacity(gen.max_new_tokens);
        let mut trace = Vec::with_capacity(gen.max_new_tokens);
        for step in 0..gen.max_new_tokens {
            let mut p: Vec<S> = self.project(&hidden).into_iter().map(|l| l * inv_temp).collect();
            kernels::softmax_in_place(&mut p);
            let support = top_k_ids(&p, gen.top_k);
            let mass: f64 = support.iter().map(|&i| p[i].as_f64()).sum();
            let mut u = rng.random::<f64>() * mass;
            let mut pick = *support.last().expect("top_k ≥ 1");
            for &i in &support {
                u -= p[i].as_f64();
                if u < 0.0 {
                    pick = i;
                    break;
                }
            }
            out.push(pick);
            trace.push(p);
            if step + 1 < gen.max_new_tokens {
                hidden = self.trunk.step(&mut cache, self.trunk.token_row(pick)?, true)?;
            }
        }
        Ok((out, trace))
    }
}

fn validate_corpus(corpus: &[Vec<usize>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(invalid("corpus is empty"));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.first() != Some(&BOS) {
            return Err(invalid(format!("sequence {i} does not start with BOS")));
        }
        if s.len() < 2 {
            return Err(invalid(format!("sequence {i} has nothing to predict")));
        }
    }
    Ok(())
}

/// Builds and trains a fresh model.
pub fn mle_train<S: Scalar>(
    corpus: &[Vec<usize>],
    arch: TransformerConfig,
    init_seed: u64,
    cfg: &TrainConfig,
) -> Result<(CausalLm<S>, TrainLog)> {
    validate_corpus(corpus)?;
    let mut model = CausalLm::new(arch, init_seed)?;
    let log = model.fit(corpus, cfg)?;
    Ok((model, log))
}

/// `exp` of the mean per-token NLL over all texts, under the plain model.
pub fn perplexity<S: Scalar>(model: &CausalLm<S>, texts: &[Vec<usize>]) -> Result<f64> {
    if texts.is_empty() {
        return Err(invalid("no texts to score"));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for t in texts {
        if t.len() < 2 {
            continue;
        }
        nll -= model.sequence_log_prob(t, None)?;
        count += t.len() - 1;
    }
    if count == 0 {
        return Err(invalid("texts contain no predicted tokens"));
    }
    Ok((nll / count as f64).exp())
}

impl<S: Scalar> Module<S> for CausalLm<S> {
    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.trunk.named_params();
        out.push(("w_head".into(), &self.w_head));
        out.push(("b_head".into(), &self.b_head));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.trunk.params_mut();
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }
}
