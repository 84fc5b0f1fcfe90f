//! Attribute discriminator `p_d(a | x)` over partial token sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeCorpus, AttributeLabel};
use crate::error::{contract, invalid, Result};
use crate::grad::kernels;
use crate::grad::{AdamConfig, AdamState, Graph, Module, Tensor, Var};
use crate::scalar::Scalar;
use crate::seqmodel::{TransformerConfig, Trunk};

pub const NUM_CLASSES: usize = 2;

/// Causal trunk with a linear head on the last position's hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<S> {
    pub trunk: Trunk<S>,
    pub w_cls: Tensor<S>,
    pub b_cls: Tensor<S>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random cut points per sequence, each adding a labeled prefix.
    pub prefix_cuts: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { epochs: 6, lr: 2e-3, batch_size: 16, seed: 0, prefix_cuts: 3 }
    }
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(config, &mut rng)?;
        let w_cls = Tensor::randn(&[config.d_model, NUM_CLASSES], 0.02, &mut rng).trainable();
        let b_cls = Tensor::zeros(&[NUM_CLASSES]).trainable();
        Ok(Self { trunk, w_cls, b_cls })
    }

    /// Zeroes the head: every input then scores 1/2 per class.
    pub fn zero_head(&mut self) {
        self.w_cls.data_mut().fill(S::zero());
        self.b_cls.data_mut().fill(S::zero());
    }

    pub fn config(&self) -> TransformerConfig {
        self.trunk.config
    }

    fn class_probs(&self, hidden: &[S]) -> Vec<S> {
        let mut logits = vec![S::zero(); NUM_CLASSES];
        kernels::matvec_into(hidden, self.w_cls.data(), NUM_CLASSES, &mut logits);
        logits.iter_mut().zip(self.b_cls.data()).for_each(|(l, &b)| *l += b);
        kernels::softmax_in_place(&mut logits);
        logits
    }

    /// Class distribution for a whole sequence.
    pub fn predict(&self, seq: &[usize]) -> Result<Vec<S>> {
        let (last, context) = seq.split_last().ok_or_else(|| invalid("cannot score an empty sequence"))?;
        let mut cache = self.trunk.new_cache();
        for &t in context {
            self.trunk.step(&mut cache, self.trunk.token_row(t)?, true)?;
        }
        let h = self.trunk.step(&mut cache, self.trunk.token_row(*last)?, false)?;
        Ok(self.class_probs(&h))
    }

    /// `p_d(attribute | seq)`.
    pub fn score(&self, seq: &[usize], attribute: AttributeLabel) -> Result<S> {
        check_label(attribute)?;
        Ok(self.predict(seq)?[attribute.0])
    }

    /// `p_d(attribute | context ⧺ c)` for each candidate `c`. The context is
    /// encoded once and every candidate is scored against the cached keys
    /// and values, which is bit-equal to [`Self::score`] on the
    /// concatenation.
    pub fn score_batch(&self, context: &[usize], candidates: &[usize], attribute: AttributeLabel) -> Result<Vec<S>> {
        check_label(attribute)?;
        let mut seen = candidates.to_vec();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract("candidate ids must be distinct"));
        }
        let mut cache = self.trunk.new_cache();
        for &t in context {
            self.trunk.step(&mut cache, self.trunk.token_row(t)?, true)?;
        }
        candidates
            .iter()
            .map(|&c| {
                let h = self.trunk.step(&mut cache, self.trunk.token_row(c)?, false)?;
                Ok(self.class_probs(&h)[attribute.0])
            })
            .collect()
    }

    /// Class logits for the last row of every packed sequence.
    pub fn logits_graph<'a>(&'a self, g: &mut Graph<'a, S>, seqs: &[&[usize]]) -> Result<Var> {
        let items: Vec<(Option<Var>, &[usize])> = seqs.iter().map(|s| (None, *s)).collect();
        let hidden = self.trunk.forward_graph(g, &items)?;
        let mut last = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for s in seqs {
            offset += s.len();
            last.push(offset - 1);
        }
        let h = g.select_rows(hidden, &last);
        let w = g.leaf(&self.w_cls);
        let b = g.leaf(&self.b_cls);
        let logits = g.matmul(h, w);
        Ok(g.add_bias(logits, b))
    }

    /// Cross-entropy training with random-prefix augmentation.
    pub fn fit(&mut self, corpus: &AttributeCorpus, cfg: &DiscConfig) -> Result<Vec<f64>> {
        let examples = augmented_examples(corpus, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15c);
        let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let grads = {
                    let seqs: Vec<&[usize]> = batch.iter().map(|&i| examples[i].0.as_slice()).collect();
                    let labels: Vec<usize> = batch.iter().map(|&i| examples[i].1 .0).collect();
                    let mut g = Graph::new();
                    let logits = self.logits_graph(&mut g, &seqs)?;
                    let loss = g.cross_entropy(logits, &labels);
                    total += g.scalar(loss).as_f64();
                    let mean = g.scale(loss, S::one() / S::of(batch.len() as f64));
                    g.backward(mean)?;
                    g.module_grads(&*self)
                };
                for (p, gr) in self.params_mut().into_iter().zip(grads) {
                    if let Some(gr) = gr {
                        p.accumulate_grad(&gr)?;
                    }
                }
                adam.step(&mut self.params_mut())?;
                self.zero_grad();
            }
            epoch_losses.push(total / examples.len() as f64);
        }
        Ok(epoch_losses)
    }
}

fn check_label(a: AttributeLabel) -> Result<()> {
    if a.0 >= NUM_CLASSES {
        return Err(invalid(format!("attribute {} outside the binary label set", a.0)));
    }
    Ok(())
}

/// Full sequences plus `prefix_cuts` random prefixes of each, all carrying
/// the sequence label. A prefix keeps BOS and at least one token.
fn augmented_examples(corpus: &AttributeCorpus, cfg: &DiscConfig) -> Result<Vec<(Vec<usize>, AttributeLabel)>> {
    let labels = corpus.labels_present();
    if labels.len() < 2 {
        return Err(invalid("discriminator training needs both classes"));
    }
    if corpus.samples.iter().any(|s| s.label.is_none()) {
        return Err(invalid("discriminator training needs every sample labeled"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc075);
    let mut out = Vec::with_capacity(corpus.len() * (1 + cfg.prefix_cuts));
    for s in &corpus.samples {
        let label = s.label.expect("checked above");
        check_label(label)?;
        out.push((s.tokens.clone(), label));
        if s.tokens.len() > 2 {
            for _ in 0..cfg.prefix_cuts {
                let cut = rng.random_range(2..s.tokens.len());
                out.push((s.tokens[..cut].to_vec(), label));
            }
        }
    }
    Ok(out)
}

/// Builds and trains a fresh discriminator.
pub fn disc_train<S: Scalar>(
    corpus: &AttributeCorpus,
    arch: TransformerConfig,
    init_seed: u64,
    cfg: &DiscConfig,
) -> Result<(Discriminator<S>, Vec<f64>)> {
    let mut d = Discriminator::new(arch, init_seed)?;
    let log = d.fit(corpus, cfg)?;
    Ok((d, log))
}

impl<S: Scalar> Module<S> for Discriminator<S> {
    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.trunk.named_params();
        out.push(("w_cls".into(), &self.w_cls));
        out.push(("b_cls".into(), &self.b_cls));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.trunk.params_mut();
        out.push(&mut self.w_cls);
        out.push(&mut self.b_cls);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig { vocab_size: 12, d_model: 8, layers: 1, heads: 2, max_context: 16 }
    }

    #[test]
    fn zero_head_scores_half() {
        let mut d = Discriminator::<f64>::new(tiny(), 3).unwrap();
        d.zero_head();
        for seq in [vec![0, 5], vec![0, 1, 2, 3, 9]] {
            assert_eq!(d.score(&seq, AttributeLabel::POSITIVE).unwrap(), 0.5);
            assert_eq!(d.score(&seq, AttributeLabel::NEGATIVE).unwrap(), 0.5);
        }
    }

    #[test]
    fn classes_normalize() {
        let d = Discriminator::<f64>::new(tiny(), 4).unwrap();
        let seq = [0, 3, 7, 2];
        let sum = d.score(&seq, AttributeLabel::POSITIVE).unwrap() + d.score(&seq, AttributeLabel::NEGATIVE).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_and_duplicates_rejected() {
        let d = Discriminator::<f32>::new(tiny(), 4).unwrap();
        assert!(d.score(&[], AttributeLabel::POSITIVE).is_err());
        assert!(d.score_batch(&[0, 1], &[3, 4, 3], AttributeLabel::POSITIVE).is_err());
    }

    #[test]
    fn batch_matches_single_bitwise() {
        let d = Discriminator::<f32>::new(tiny(), 5).unwrap();
        let ctx = [0, 4, 9, 2];
        let cands: Vec<usize> = (0..12).collect();
        let batch = d.score_batch(&ctx, &cands, AttributeLabel::POSITIVE).unwrap();
        for (&c, &b) in cands.iter().zip(&batch) {
            let mut seq = ctx.to_vec();
            seq.push(c);
            assert_eq!(d.score(&seq, AttributeLabel::POSITIVE).unwrap().to_bits(), b.to_bits());
        }
        let one = d.score_batch(&ctx, &[7], AttributeLabel::NEGATIVE).unwrap();
        assert_eq!(one[0].to_bits(), d.score(&[0, 4, 9, 2, 7], AttributeLabel::NEGATIVE).unwrap().to_bits());
    }

    #[test]
    fn graph_and_cached_paths_agree() {
        let d = Discriminator::<f64>::new(tiny(), 6).unwrap();
        let seqs: [&[usize]; 2] = [&[0, 3, 4, 5], &[0, 9]];
        let mut g = Graph::new();
        let logits = d.logits_graph(&mut g, &seqs).unwrap();
        let vals = g.value(logits).to_vec();
        for (i, s) in seqs.iter().enumerate() {
            let mut row = vals[i * 2..i * 2 + 2].to_vec();
            kernels::softmax_in_place(&mut row);
            assert_eq!(row, d.predict(s).unwrap());
        }
    }

    #[test]
    fn single_class_corpus_rejected() {
        use crate::data::Sample;
        let corpus =
            AttributeCorpus { samples: vec![Sample { label: Some(AttributeLabel::POSITIVE), tokens: vec![0, 3, 4] }] };
        let mut d = Discriminator::<f32>::new(tiny(), 1).unwrap();
        assert!(d.fit(&corpus, &DiscConfig::default()).is_err());
    }
}
