//! Control prompts: raw prompt rows reparameterized by a single-layer LSTM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::AttributeLabel;
use crate::error::{invalid, Result};
use crate::grad::{Graph, Module, Tensor, Var};
use crate::scalar::Scalar;

/// Unidirectional LSTM with hidden size equal to its input width.
/// Gates are packed `[input | forget | cell | output]` along the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm<S> {
    pub w_ih: Tensor<S>,
    pub w_hh: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Lstm<S> {
    fn width(&self) -> usize {
        self.w_hh.dims2().0
    }

    /// Hidden state after each input row, stacked.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let d = self.width();
        let (steps, _) = g.dims(x);
        let w_ih = g.leaf(&self.w_ih);
        let w_hh = g.leaf(&self.w_hh);
        let bias = g.leaf(&self.bias);
        let xw = g.matmul(x, w_ih);
        let xw = g.add_bias(xw, bias);
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut z = g.slice_rows(xw, t, 1);
            if let Some(hp) = h {
                let hw = g.matmul(hp, w_hh);
                z = g.add(z, hw);
            }
            let zi = g.slice_cols(z, 0, d);
            let zf = g.slice_cols(z, d, d);
            let zg = g.slice_cols(z, 2 * d, d);
            let zo = g.slice_cols(z, 3 * d, d);
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zg);
            let o = g.sigmoid(zo);
            let ic = g.mul(i, cand);
            let cn = match c {
                Some(cp) => {
                    let fc = g.mul(f, cp);
                    g.add(fc, ic)
                }
                None => ic,
            };
            let tc = g.tanh(cn);
            let hn = g.mul(o, tc);
            outs.push(hn);
            h = Some(hn);
            c = Some(cn);
        }
        g.concat_rows(&outs)
    }
}

/// Trainable control prompt `P'_k` with its reparameterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBlock<S> {
    pub raw: Tensor<S>,
    pub lstm: Lstm<S>,
    pub attribute: AttributeLabel,
}

/// Inference-time prompt: the reparameterized rows, frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterializedPrompt<S> {
    pub matrix: Tensor<S>,
    pub attribute: AttributeLabel,
}

pub const RAW_INIT_STD: f64 = 0.02;

impl<S: Scalar> PromptBlock<S> {
    /// Raw rows ~ N(0, 0.02²); LSTM weights and bias ~ U(±1/√d).
    pub fn init(length: usize, d_model: usize, attribute: AttributeLabel, seed: u64) -> Result<Self> {
        if length == 0 {
            return Err(invalid("prompt length must be at least 1"));
        }
        if d_model == 0 {
            return Err(invalid("prompt width must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::randn(&[length, d_model], RAW_INIT_STD, &mut rng).trainable();
        let bound = 1.0 / (d_model as f64).sqrt();
        let lstm = Lstm {
            w_ih: Tensor::uniform(&[d_model, 4 * d_model], bound, &mut rng).trainable(),
            w_hh: Tensor::uniform(&[d_model, 4 * d_model], bound, &mut rng).trainable(),
            bias: Tensor::uniform(&[4 * d_model], bound, &mut rng).trainable(),
        };
        Ok(Self { raw, lstm, attribute })
    }

    pub fn len(&self) -> usize {
        self.raw.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.raw.dims2().1
    }

    /// Effective prompt rows on the tape; gradients reach `raw` and the LSTM.
    pub fn reparameterize_graph<'a>(&'a self, g: &mut Graph<'a, S>) -> Var {
        let x = g.leaf(&self.raw);
        self.lstm.forward_graph(g, x)
    }

    /// Effective prompt rows, `len × d_model`.
    pub fn reparameterize(&self) -> Tensor<S> {
        let mut g = Graph::new();
        let v = self.reparameterize_graph(&mut g);
        Tensor::new(&[self.len(), self.d_model()], g.value(v).to_vec()).expect("LSTM output is len × d_model")
    }

    pub fn materialize(&self) -> MaterializedPrompt<S> {
        MaterializedPrompt { matrix: self.reparameterize(), attribute: self.attribute }
    }
}

impl<S: Scalar> MaterializedPrompt<S> {
    pub fn len(&self) -> usize {
        self.matrix.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: Scalar> Module<S> for PromptBlock<S> {
    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        vec![
            ("raw".into(), &self.raw),
            ("lstm.w_ih".into(), &self.lstm.w_ih),
            ("lstm.w_hh".into(), &self.lstm.w_hh),
            ("lstm.bias".into(), &self.lstm.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.raw, &mut self.lstm.w_ih, &mut self.lstm.w_hh, &mut self.lstm.bias]
    }
}

impl<S: Scalar> Module<S> for MaterializedPrompt<S> {
    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        vec![("prompt".into(), &self.matrix)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.matrix]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_difference_gradient, max_relative_error};

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = PromptBlock::<f32>::init(10, 64, AttributeLabel::POSITIVE, 7).unwrap();
        let b = PromptBlock::<f32>::init(10, 64, AttributeLabel::POSITIVE, 7).unwrap();
        assert_eq!(a.raw.shape(), &[10, 64]);
        assert_eq!(a.param_hash(), b.param_hash());
        let c = PromptBlock::<f32>::init(10, 64, AttributeLabel::POSITIVE, 8).unwrap();
        assert_ne!(a.raw.data(), c.raw.data());
        assert!(PromptBlock::<f32>::init(0, 64, AttributeLabel::POSITIVE, 7).is_err());
    }

    #[test]
    fn reparameterized_shape() {
        let b = PromptBlock::<f64>::init(12, 16, AttributeLabel::NEGATIVE, 1).unwrap();
        assert_eq!(b.reparameterize().shape(), &[12, 16]);
    }

    #[test]
    fn zero_lstm_gives_zero_rows() {
        let mut b = PromptBlock::<f64>::init(5, 8, AttributeLabel::POSITIVE, 2).unwrap();
        for t in [&mut b.lstm.w_ih, &mut b.lstm.w_hh, &mut b.lstm.bias] {
            t.data_mut().fill(0.0);
        }
        assert!(b.reparameterize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_reaches_raw_rows_and_lstm() {
        let block = PromptBlock::<f64>::init(3, 4, AttributeLabel::POSITIVE, 11).unwrap();
        let weights: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut g = Graph::new();
        let out = block.reparameterize_graph(&mut g);
        let w = g.constant(weights.clone(), 3, 4);
        let prod = g.mul(out, w);
        let sq = g.mul(prod, prod);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grads = g.module_grads(&block);
        // Σ (o·w)² over the effective rows
        let surrogate = |b: &PromptBlock<f64>| -> f64 {
            let out = b.reparameterize();
            out.data().iter().zip(&weights).map(|(o, w)| (o * w) * (o * w)).sum()
        };
        for (k, name) in ["raw", "lstm.w_ih", "lstm.w_hh", "lstm.bias"].iter().enumerate() {
            let analytic = grads[k].clone().unwrap();
            assert!(analytic.iter().any(|v| v.abs() > 1e-8), "{name} got no gradient");
            let base = block.named_params()[k].1.data().to_vec();
            let numeric = finite_difference_gradient(
                |x| {
                    let mut b = block.clone();
                    b.params_mut()[k].data_mut().copy_from_slice(x);
                    surrogate(&b)
                },
                &base,
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn materialized_snapshot_is_isolated() {
        let mut b = PromptBlock::<f32>::init(4, 8, AttributeLabel::POSITIVE, 3).unwrap();
        let m = b.materialize();
        let before = m.matrix.clone();
        b.raw.data_mut().fill(1.0);
        assert_eq!(m.matrix, before);
        assert_ne!(b.reparameterize(), m.matrix);
    }
}
