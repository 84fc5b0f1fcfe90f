//! Line-oriented `key=value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AttributeLabel, CorpusSpec};
use crate::discup::DiscupConfig;
use crate::error::{Error, Result};
use crate::seqmodel::{GenerationConfig, TransformerConfig};

/// Every knob of a pipeline run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // corpus
    pub pos_tokens: usize,
    pub neg_tokens: usize,
    pub neutral_tokens: usize,
    pub domain_tokens: usize,
    pub seq_len: usize,
    pub mix_target: f64,
    pub mix_neutral: f64,
    pub mix_opposite: f64,
    pub stickiness: f64,
    pub marker_prob: f64,
    pub per_class: usize,
    pub domain_marker_prob: f64,
    pub domain_per_class: usize,
    pub domain_share: f64,
    pub domain_mix_target: f64,
    pub domain_mix_neutral: f64,
    pub domain_mix_opposite: f64,
    pub language_seed: u64,
    // models
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub disc_d_model: usize,
    pub max_context: usize,
    pub clm_epochs: usize,
    pub clm_lr: f64,
    pub disc_epochs: usize,
    pub disc_lr: f64,
    pub train_batch: usize,
    // tuning
    pub alpha: f64,
    pub topk: usize,
    pub prompt_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub tune_batch: usize,
    pub attribute: AttributeLabel,
    pub unlikelihood: bool,
    /// Tuning samples used; 0 keeps the whole tuning split.
    pub train_size: usize,
    // generation and evaluation
    pub max_new_tokens: usize,
    pub gen_topk: usize,
    pub temperature: f64,
    pub neutral_prompts: usize,
    pub adversarial_prompts: usize,
    pub neutral_prompt_len: usize,
    pub adversarial_prompt_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self {
            seed: 1,
            pos_tokens: c.pos_tokens,
            neg_tokens: c.neg_tokens,
            neutral_tokens: c.neutral_tokens,
            domain_tokens: c.domain_tokens,
            seq_len: c.seq_len,
            mix_target: c.mix[0],
            mix_neutral: c.mix[1],
            mix_opposite: c.mix[2],
            stickiness: c.stickiness,
            marker_prob: 0.0,
            per_class: 1000,
            domain_marker_prob: 0.5,
            domain_per_class: 1000,
            domain_share: 0.2,
            domain_mix_target: 0.45,
            domain_mix_neutral: 0.45,
            domain_mix_opposite: 0.1,
            language_seed: c.language_seed,
            d_model: 64,
            layers: 2,
            heads: 4,
            disc_d_model: 32,
            max_context: 64,
            clm_epochs: 8,
            clm_lr: 2e-3,
            disc_epochs: 2,
            disc_lr: 2e-3,
            train_batch: 16,
            alpha: 0.01,
            topk: 16,
            prompt_len: 10,
            epochs: 6,
            lr: 1e-3,
            tune_batch: 8,
            attribute: AttributeLabel::POSITIVE,
            unlikelihood: true,
            train_size: 0,
            max_new_tokens: 20,
            gen_topk: 10,
            temperature: 1.0,
            neutral_prompts: 200,
            adversarial_prompts: 100,
            neutral_prompt_len: 4,
            adversarial_prompt_len: 6,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($name)),*];
    };
}

fields!(
    seed,
    pos_tokens,
    neg_tokens,
    neutral_tokens,
    domain_tokens,
    seq_len,
    mix_target,
    mix_neutral,
    mix_opposite,
    stickiness,
    marker_prob,
    per_class,
    domain_marker_prob,
    domain_per_class,
    domain_share,
    domain_mix_target,
    domain_mix_neutral,
    domain_mix_opposite,
    language_seed,
    d_model,
    layers,
    heads,
    disc_d_model,
    max_context,
    clm_epochs,
    clm_lr,
    disc_epochs,
    disc_lr,
    train_batch,
    alpha,
    topk,
    prompt_len,
    epochs,
    lr,
    tune_batch,
    attribute,
    unlikelihood,
    train_size,
    max_new_tokens,
    gen_topk,
    temperature,
    neutral_prompts,
    adversarial_prompts,
    neutral_prompt_len,
    adversarial_prompt_len,
);

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Sets one field by name. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "seed" => self.seed = parse(k, value)?,
            "pos_tokens" => self.pos_tokens = parse(k, value)?,
            "neg_tokens" => self.neg_tokens = parse(k, value)?,
            "neutral_tokens" => self.neutral_tokens = parse(k, value)?,
            "domain_tokens" => self.domain_tokens = parse(k, value)?,
            "seq_len" => self.seq_len = parse(k, value)?,
            "mix_target" => self.mix_target = parse(k, value)?,
            "mix_neutral" => self.mix_neutral = parse(k, value)?,
            "mix_opposite" => self.mix_opposite = parse(k, value)?,
            "stickiness" => self.stickiness = parse(k, value)?,
            "marker_prob" => self.marker_prob = parse(k, value)?,
            "per_class" => self.per_class = parse(k, value)?,
            "domain_marker_prob" => self.domain_marker_prob = parse(k, value)?,
            "domain_per_class" => self.domain_per_class = parse(k, value)?,
            "domain_share" => self.domain_share = parse(k, value)?,
            "domain_mix_target" => self.domain_mix_target = parse(k, value)?,
            "domain_mix_neutral" => self.domain_mix_neutral = parse(k, value)?,
            "domain_mix_opposite" => self.domain_mix_opposite = parse(k, value)?,
            "language_seed" => self.language_seed = parse(k, value)?,
            "d_model" => self.d_model = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "heads" => self.heads = parse(k, value)?,
            "disc_d_model" => self.disc_d_model = parse(k, value)?,
            "max_context" => self.max_context = parse(k, value)?,
            "clm_epochs" => self.clm_epochs = parse(k, value)?,
            "clm_lr" => self.clm_lr = parse(k, value)?,
            "disc_epochs" => self.disc_epochs = parse(k, value)?,
            "disc_lr" => self.disc_lr = parse(k, value)?,
            "train_batch" => self.train_batch = parse(k, value)?,
            "alpha" => self.alpha = parse(k, value)?,
            "topk" => self.topk = parse(k, value)?,
            "prompt_len" => self.prompt_len = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "tune_batch" => self.tune_batch = parse(k, value)?,
            "attribute" => {
                self.attribute = AttributeLabel::parse(value.trim()).map_err(|e| Error::Config(e.to_string()))?
            }
            "unlikelihood" => self.unlikelihood = parse_bool(k, value)?,
            "train_size" => self.train_size = parse(k, value)?,
            "max_new_tokens" => self.max_new_tokens = parse(k, value)?,
            "gen_topk" => self.gen_topk = parse(k, value)?,
            "temperature" => self.temperature = parse(k, value)?,
            "neutral_prompts" => self.neutral_prompts = parse(k, value)?,
            "adversarial_prompts" => self.adversarial_prompts = parse(k, value)?,
            "neutral_prompt_len" => self.neutral_prompt_len = parse(k, value)?,
            "adversarial_prompt_len" => self.adversarial_prompt_len = parse(k, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "pos_tokens" => self.pos_tokens.to_string(),
            "neg_tokens" => self.neg_tokens.to_string(),
            "neutral_tokens" => self.neutral_tokens.to_string(),
            "domain_tokens" => self.domain_tokens.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "mix_target" => self.mix_target.to_string(),
            "mix_neutral" => self.mix_neutral.to_string(),
            "mix_opposite" => self.mix_opposite.to_string(),
            "stickiness" => self.stickiness.to_string(),
            "marker_prob" => self.marker_prob.to_string(),
            "per_class" => self.per_class.to_string(),
            "domain_marker_prob" => self.domain_marker_prob.to_string(),
            "domain_per_class" => self.domain_per_class.to_string(),
            "domain_share" => self.domain_share.to_string(),
            "domain_mix_target" => self.domain_mix_target.to_string(),
            "domain_mix_neutral" => self.domain_mix_neutral.to_string(),
            "domain_mix_opposite" => self.domain_mix_opposite.to_string(),
            "language_seed" => self.language_seed.to_string(),
            "d_model" => self.d_model.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "disc_d_model" => self.disc_d_model.to_string(),
            "max_context" => self.max_context.to_string(),
            "clm_epochs" => self.clm_epochs.to_string(),
            "clm_lr" => self.clm_lr.to_string(),
            "disc_epochs" => self.disc_epochs.to_string(),
            "disc_lr" => self.disc_lr.to_string(),
            "train_batch" => self.train_batch.to_string(),
            "alpha" => self.alpha.to_string(),
            "topk" => self.topk.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "tune_batch" => self.tune_batch.to_string(),
            "attribute" => self.attribute.name().to_string(),
            "unlikelihood" => self.unlikelihood.to_string(),
            "train_size" => self.train_size.to_string(),
            "max_new_tokens" => self.max_new_tokens.to_string(),
            "gen_topk" => self.gen_topk.to_string(),
            "temperature" => self.temperature.to_string(),
            "neutral_prompts" => self.neutral_prompts.to_string(),
            "adversarial_prompts" => self.adversarial_prompts.to_string(),
            "neutral_prompt_len" => self.neutral_prompt_len.to_string(),
            "adversarial_prompt_len" => self.adversarial_prompt_len.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Every key in declaration order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("declared key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let to_cfg = |e: Error| Error::Config(e.to_string());
        self.corpus_spec().validate().map_err(to_cfg)?;
        self.domain_spec().validate().map_err(to_cfg)?;
        self.clm_arch().validate().map_err(to_cfg)?;
        self.disc_arch().validate().map_err(to_cfg)?;
        self.discup_config().validate().map_err(to_cfg)?;
        self.generation().validate().map_err(to_cfg)?;
        if self.clm_arch().vocab_size != self.corpus_spec().layout().map_err(to_cfg)?.vocab_size() {
            return Err(Error::Config("vocabulary partitions do not match the model".into()));
        }
        if !(self.domain_share > 0.0 && 2.0 * self.domain_share < 1.0) {
            return Err(Error::Config("domain_share must lie in (0, 0.5)".into()));
        }
        if self.neutral_prompts + self.adversarial_prompts == 0 {
            return Err(Error::Config("evaluation needs at least one prompt".into()));
        }
        let longest = self.neutral_prompt_len.max(self.adversarial_prompt_len) + 1;
        if self.prompt_len + longest + self.max_new_tokens > self.max_context + 1 {
            return Err(Error::Config("prompt, context and continuation exceed max_context".into()));
        }
        if self.seq_len + 1 + self.prompt_len > self.max_context {
            return Err(Error::Config("training sequences with the prompt exceed max_context".into()));
        }
        if self.adversarial_prompt_len > self.seq_len {
            return Err(Error::Config("adversarial prompts cannot exceed seq_len".into()));
        }
        if self.train_batch == 0 || self.clm_epochs == 0 || self.disc_epochs == 0 {
            return Err(Error::Config("train_batch, clm_epochs and disc_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Clean corpus for the language models, discriminators and prompts.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            pos_tokens: self.pos_tokens,
            neg_tokens: self.neg_tokens,
            neutral_tokens: self.neutral_tokens,
            domain_tokens: self.domain_tokens,
            seq_len: self.seq_len,
            mix: [self.mix_target, self.mix_neutral, self.mix_opposite],
            stickiness: self.stickiness,
            marker_prob: self.marker_prob,
            counts: [self.per_class; 2],
            seed: self.seed,
            language_seed: self.language_seed,
            domain_style: false,
        }
    }

    /// Marker-skewed corpus in the same language, used for prompt tuning.
    pub fn domain_spec(&self) -> CorpusSpec {
        CorpusSpec {
            marker_prob: self.domain_marker_prob,
            counts: [self.domain_per_class; 2],
            seed: self.seed.wrapping_add(0x005e_edd0),
            mix: [self.domain_mix_target, self.domain_mix_neutral, self.domain_mix_opposite],
            domain_style: true,
            ..self.corpus_spec()
        }
    }

    pub fn clm_arch(&self) -> TransformerConfig {
        TransformerConfig {
            vocab_size: self.pos_tokens + self.neg_tokens + self.neutral_tokens + self.domain_tokens,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            max_context: self.max_context,
        }
    }

    pub fn disc_arch(&self) -> TransformerConfig {
        TransformerConfig { d_model: self.disc_d_model, ..self.clm_arch() }
    }

    pub fn discup_config(&self) -> DiscupConfig {
        DiscupConfig {
            alpha: self.alpha,
            top_k: self.topk,
            attribute: self.attribute,
            epochs: self.epochs,
            lr: self.lr,
            unlikelihood: self.unlikelihood,
            seed: self.seed,
            prompt_len: self.prompt_len,
            batch_size: self.tune_batch,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            top_k: self.gen_topk,
            seed: self.seed,
            temperature: self.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let c = RunConfig {
            alpha: 0.005,
            attribute: AttributeLabel::NEGATIVE,
            unlikelihood: false,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::keys().len(), c.to_text().lines().count());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::from_text("alpah=0.1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("alpha=abc\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("alpha\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_text("alpha=0\n").is_err());
        assert!(RunConfig::from_text("# comment\n\nprompt-len = 6 # inline\n").unwrap().prompt_len == 6);
    }

    #[test]
    fn context_budget_is_checked() {
        assert!(RunConfig::from_text("prompt_len=50\n").is_err());
    }
}
