//! Pre-LayerNorm decoder-only transformer trunk.
//!
//! The trunk has two evaluation paths over identical parameters:
//! a tape path that packs several sequences into one graph for training, and
//! an incremental path that keeps per-layer key/value rows for decoding and
//! scoring. Both run the same row kernels in the same order, so a row's hidden
//! state is bit-equal across the two paths.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::kernels::{self, attend_row, layer_norm_row};
use crate::grad::{Graph, Module, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
}

impl TransformerConfig {
    /// Generator size: 64 wide, 2 layers, 4 heads, 64 positions, 64 tokens.
    pub fn generator() -> Self {
        Self { vocab_size: 64, d_model: 64, layers: 2, heads: 4, max_context: 64 }
    }

    /// Discriminator trunk: half the width of the generator.
    pub fn discriminator() -> Self {
        Self { vocab_size: 64, d_model: 32, layers: 2, heads: 4, max_context: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 2 || self.max_context == 0 {
            return Err(Error::InvalidInput("vocab_size ≥ 2 and max_context ≥ 1 required".into()));
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub w_qkv: Tensor<S>,
    pub b_qkv: Tensor<S>,
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w_up: Tensor<S>,
    pub b_up: Tensor<S>,
    pub w_down: Tensor<S>,
    pub b_down: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<S> {
    pub config: TransformerConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub lnf_gain: Tensor<S>,
    pub lnf_bias: Tensor<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> Trunk<S> {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn();
        // residual-branch projections shrink with depth, as in GPT-2
        let resid_std = INIT_STD / ((2 * config.layers) as f64).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng).trainable();
        let pos_emb = Tensor::randn(&[config.max_context, d], INIT_STD, rng).trainable();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: Tensor::full(&[d], S::one()).trainable(),
                ln1_bias: Tensor::zeros(&[d]).trainable(),
                w_qkv: Tensor::randn(&[d, 3 * d], INIT_STD, rng).trainable(),
                b_qkv: Tensor::zeros(&[3 * d]).trainable(),
                w_out: Tensor::randn(&[d, d], resid_std, rng).trainable(),
                b_out: Tensor::zeros(&[d]).trainable(),
                ln2_gain: Tensor::full(&[d], S::one()).trainable(),
                ln2_bias: Tensor::zeros(&[d]).trainable(),
                w_up: Tensor::randn(&[d, f], INIT_STD, rng).trainable(),
                b_up: Tensor::zeros(&[f]).trainable(),
                w_down: Tensor::randn(&[f, d], resid_std, rng).trainable(),
                b_down: Tensor::zeros(&[d]).trainable(),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::full(&[d], S::one()).trainable(),
            lnf_bias: Tensor::zeros(&[d]).trainable(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Runs packed sequences through the trunk on `g`.
    ///
    /// Each item is an optional block of dense prefix rows followed by token
    /// ids; positions restart at zero for every item. Returns the final
    /// normalized hidden rows for all items, stacked.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a, S>, items: &[(Option<Var>, &[usize])]) -> Result<Var> {
        let tok = g.leaf(&self.tok_emb);
        let pos = g.leaf(&self.pos_emb);
        let mut parts = Vec::with_capacity(items.len() * 2);
        let mut segments = Vec::with_capacity(items.len());
        for (prefix, tokens) in items {
            let mut len = tokens.len();
            if let Some(p) = prefix {
                let (rows, cols) = g.dims(*p);
                if cols != self.d_model() {
                    return Err(Error::Contract(format!("prefix width {cols} != d_model {}", self.d_model())));
                }
                parts.push(*p);
                len += rows;
            }
            if len > self.config.max_context {
                return Err(Error::ContextOverflow { len, max: self.config.max_context });
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
            }
            if !tokens.is_empty() {
                // Prefix rows carry no position; tokens count from 0 after them.
                let e = g.gather(tok, tokens);
                let positions: Vec<usize> = (0..tokens.len()).collect();
                let p = g.gather(pos, &positions);
                parts.push(g.add(e, p));
            }
            segments.push(len);
        }
        let mut x = g.concat_rows(&parts);
        for b in &self.blocks {
            let (l1g, l1b) = (g.leaf(&b.ln1_gain), g.leaf(&b.ln1_bias));
            let h = g.layer_norm(x, l1g, l1b);
            let w = g.leaf(&b.w_qkv);
            let bb = g.leaf(&b.b_qkv);
            let qkv = g.matmul(h, w);
            let qkv = g.add_bias(qkv, bb);
            let a = g.causal_attention(qkv, self.config.heads, &segments);
            let (wo, bo) = (g.leaf(&b.w_out), g.leaf(&b.b_out));
            let a = g.matmul(a, wo);
            let a = g.add_bias(a, bo);
            x = g.add(x, a);
            let (l2g, l2b) = (g.leaf(&b.ln2_gain), g.leaf(&b.ln2_bias));
            let h = g.layer_norm(x, l2g, l2b);
            let (wu, bu) = (g.leaf(&b.w_up), g.leaf(&b.b_up));
            let f = g.matmul(h, wu);
            let f = g.add_bias(f, bu);
            let f = g.gelu(f);
            let (wd, bd) = (g.leaf(&b.w_down), g.leaf(&b.b_down));
            let f = g.matmul(f, wd);
            let f = g.add_bias(f, bd);
            x = g.add(x, f);
        }
        let (fg, fb) = (g.leaf(&self.lnf_gain), g.leaf(&self.lnf_bias));
        Ok(g.layer_norm(x, fg, fb))
    }

    pub fn new_cache(&self) -> KvCache<S> {
        KvCache { rows: vec![Vec::new(); self.config.layers], len: 0, prefix: 0, width: 3 * self.d_model() }
    }

    /// Embedding row for a token id.
    pub fn token_row(&self, id: usize) -> Result<&[S]> {
        if id >= self.config.vocab_size {
            return Err(Error::InvalidInput(format!("token id {id} outside vocabulary")));
        }
        Ok(self.tok_emb.row(id))
    }

    /// Pushes one token embedding through the trunk, attending over
    /// everything already in `cache`. Returns the final normalized hidden
    /// row. With `commit = false` the cache is left as it was.
    pub fn step(&self, cache: &mut KvCache<S>, input: &[S], commit: bool) -> Result<Vec<S>> {
        let position = cache.len - cache.prefix;
        self.step_row(cache, input, Some(position), commit)
    }

    fn step_row(&self, cache: &mut KvCache<S>, input: &[S], position: Option<usize>, commit: bool) -> Result<Vec<S>> {
        let d = self.d_model();
        let c3 = 3 * d;
        let pos = cache.len;
        if pos >= self.config.max_context {
            return Err(Error::ContextOverflow { len: pos + 1, max: self.config.max_context });
        }
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut x: Vec<S> = match position {
            Some(p) => input.iter().zip(self.pos_emb.row(p)).map(|(&a, &b)| a + b).collect(),
            None => input.to_vec(),
        };
        let mut h = vec![S::zero(); d];
        let mut probs = vec![S::zero(); pos + 1];
        for (li, b) in self.blocks.iter().enumerate() {
            layer_norm_row(&x, b.ln1_gain.data(), b.ln1_bias.data(), &mut h);
            let mut qkv = vec![S::zero(); c3];
            kernels::matvec_into(&h, b.w_qkv.data(), c3, &mut qkv);
            qkv.iter_mut().zip(b.b_qkv.data()).for_each(|(v, &bb)| *v += bb);
            let rows = &mut cache.rows[li];
            rows.extend_from_slice(&qkv);
            let mut att = vec![S::zero(); d];
            for hd in 0..heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                attend_row(
                    q,
                    &rows[d..],
                    &rows[2 * d..],
                    pos + 1,
                    c3,
                    hd * dh,
                    scale,
                    &mut probs,
                    &mut att[hd * dh..(hd + 1) * dh],
                );
            }
            if !commit {
                rows.truncate(pos * c3);
            }
            let mut a = vec![S::zero(); d];
            kernels::matvec_into(&att, b.w_out.data(), d, &mut a);
            a.iter_mut().zip(b.b_out.data()).for_each(|(v, &bb)| *v += bb);
            x.iter_mut().zip(&a).for_each(|(v, &av)| *v += av);
            layer_norm_row(&x, b.ln2_gain.data(), b.ln2_bias.data(), &mut h);
            let f_dim = self.config.ffn();
            let mut f = vec![S::zero(); f_dim];
            kernels::matvec_into(&h, b.w_up.data(), f_dim, &mut f);
            f.iter_mut().zip(b.b_up.data()).for_each(|(v, &bb)| *v = kernels::gelu(*v + bb));
            let mut o = vec![S::zero(); d];
            kernels::matvec_into(&f, b.w_down.data(), d, &mut o);
            o.iter_mut().zip(b.b_down.data()).for_each(|(v, &bb)| *v += bb);
            x.iter_mut().zip(&o).for_each(|(v, &ov)| *v += ov);
        }
        if commit {
            cache.len += 1;
        }
        let mut out = vec![S::zero(); d];
        layer_norm_row(&x, self.lnf_gain.data(), self.lnf_bias.data(), &mut out);
        Ok(out)
    }

    /// Feeds prefix rows then tokens; returns hidden rows for the tokens only.
    pub fn hidden_rows(&self, tokens: &[usize], prefix: Option<&Tensor<S>>) -> Result<Vec<Vec<S>>> {
        let plen = prefix.map_or(0, |p| p.dims2().0);
        let len = plen + tokens.len();
        if len > self.config.max_context {
            return Err(Error::ContextOverflow { len, max: self.config.max_context });
        }
        let mut cache = self.new_cache();
        self.feed_prefix(&mut cache, prefix)?;
        tokens
            .iter()
            .map(|&t| {
                let row = self.token_row(t)?;
                self.step(&mut cache, row, true)
            })
            .collect()
    }

    pub fn feed_prefix(&self, cache: &mut KvCache<S>, prefix: Option<&Tensor<S>>) -> Result<()> {
        if let Some(p) = prefix {
            let (rows, cols) = p.dims2();
            if cols != self.d_model() {
                return Err(Error::Contract(format!("prefix width {cols} != d_model {}", self.d_model())));
            }
            if cache.len > cache.prefix {
                return Err(Error::Contract("prefix rows must precede every token".into()));
            }
            for r in 0..rows {
                self.step_row(cache, p.row(r), None, true)?;
                cache.prefix += 1;
            }
        }
        Ok(())
    }
}

/// Per-layer `q|k|v` rows of everything consumed so far.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    rows: Vec<Vec<S>>,
    len: usize,
    /// Leading prefix rows, which take no position.
    prefix: usize,
    width: usize,
}

impl<S> KvCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl<S: Scalar> Module<S> for Trunk<S> {
    fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &Tensor<S>); 12] = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("w_qkv", &b.w_qkv),
                ("b_qkv", &b.b_qkv),
                ("w_out", &b.w_out),
                ("b_out", &b.b_out),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_up", &b.w_up),
                ("b_up", &b.b_up),
                ("w_down", &b.w_down),
                ("b_down", &b.b_down),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.w_qkv,
                &mut b.b_qkv,
                &mut b.w_out,
                &mut b.b_out,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_up,
                &mut b.b_up,
                &mut b.w_down,
                &mut b.b_down,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }
}
