//! Staged end-to-end run: data, four models, three tuned prompts, reports.
//!
//! Every stage reads its inputs from the output directory and writes its
//! outputs atomically, so a resumed run only redoes stages whose outputs
//! are missing or altered, plus everything downstream of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpointable, Metadata};
use crate::config::RunConfig;
use crate::data::{attribute_prompts, gen_corpus, neutral_prompts, split, AttributeCorpus, TokenLayout};
use crate::disc::{disc_train, DiscConfig, Discriminator};
use crate::discup::{discup_train, vanilla_prompt_train, DiscupConfig, TuneLog};
use crate::error::{invalid, Error, Result};
use crate::eval::{run_eval_suite, EvalPrompts, EvalReport, Evaluator, Generations, KeywordList, REPORT_CSV_HEADER};
use crate::grad::Module;
use crate::prompt::PromptBlock;
use crate::seqmodel::{mle_train, CausalLm, TrainConfig, Vocab, BOS};

type S = f32;

/// Main corpus fractions: CLM, steering discriminator, judges, evaluation.
pub const MAIN_SPLIT: [f64; 4] = [0.5, 0.2, 0.2, 0.1];

pub const METHODS: [&str; 4] = ["base", "vanilla", "discup", "discup_nul"];
/// Frozen CLM sampled from BOS alone; the fluency reference.
pub const REFERENCE: &str = "unconditioned";

/// Stable 64-bit seed for a named sub-task of a run.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let d = Sha256::new().chain_update(master.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `path<TAB>sha256` lines, sorted by path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn render(&self) -> String {
        self.entries.iter().map(|(p, h)| format!("{p}\t{h}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (p, h) = line.split_once('\t').ok_or_else(|| invalid(format!("bad manifest line `{line}`")))?;
            entries.insert(p.to_string(), h.to_string());
        }
        Ok(Self { entries })
    }
}

struct StageDef {
    name: &'static str,
    deps: &'static [&'static str],
    outputs: &'static [&'static str],
}

const STAGES: &[StageDef] = &[
    StageDef {
        name: "gen-data",
        deps: &[],
        outputs: &[
            "data/corpus.tsv",
            "data/domain.tsv",
            "data/clm.tsv",
            "data/disc.tsv",
            "data/judge.tsv",
            "data/clm_domain.tsv",
            "data/judge_domain.tsv",
            "data/tune.tsv",
            "data/prompts.tsv",
        ],
    },
    StageDef { name: "train-clm", deps: &["gen-data"], outputs: &["models/clm.ckpt", "logs/clm.log"] },
    StageDef { name: "train-judge-lm", deps: &["gen-data"], outputs: &["models/judge_lm.ckpt", "logs/judge_lm.log"] },
    StageDef { name: "train-disc", deps: &["gen-data"], outputs: &["models/disc.ckpt", "logs/disc.log"] },
    StageDef {
        name: "train-judge-disc",
        deps: &["gen-data"],
        outputs: &["models/judge_disc.ckpt", "logs/judge_disc.log"],
    },
    StageDef {
        name: "tune-vanilla",
        deps: &["gen-data", "train-clm"],
        outputs: &["prompts/vanilla.ckpt", "logs/vanilla.log"],
    },
    StageDef {
        name: "tune-discup",
        deps: &["gen-data", "train-clm", "train-disc"],
        outputs: &["prompts/discup.ckpt", "logs/discup.log"],
    },
    StageDef {
        name: "tune-discup-nul",
        deps: &["gen-data", "train-clm", "train-disc"],
        outputs: &["prompts/discup_nul.ckpt", "logs/discup_nul.log"],
    },
    StageDef {
        name: "eval",
        deps: &[
            "gen-data",
            "train-clm",
            "train-judge-lm",
            "train-judge-disc",
            "tune-vanilla",
            "tune-discup",
            "tune-discup-nul",
        ],
        outputs: &[
            "reports/base.txt",
            "reports/vanilla.txt",
            "reports/discup.txt",
            "reports/discup_nul.txt",
            "reports/unconditioned.txt",
            "reports/summary.csv",
            "reports/generations.tsv",
        ],
    },
];

pub fn stage_names() -> impl Iterator<Item = &'static str> {
    STAGES.iter().map(|s| s.name)
}

/// What a run produced.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    /// Stages executed, in order; the rest were reused.
    pub ran: Vec<String>,
    pub reports: BTreeMap<String, EvalReport>,
    /// Parameter hashes of the frozen models before and after each tuning stage.
    pub frozen_checks: Vec<(String, bool)>,
}

/// Output directory plus the configuration that produced it.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, dir: dir.into() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn layout(&self) -> Result<TokenLayout> {
        self.cfg.corpus_spec().layout()
    }

    fn vocab(&self) -> Result<Vocab> {
        Ok(self.layout()?.vocab())
    }

    pub fn read_corpus(&self, rel: &str) -> Result<AttributeCorpus> {
        AttributeCorpus::from_tsv(&fs::read_to_string(self.path(rel))?, &self.vocab()?)
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(rel), text.as_bytes())
    }

    fn save<M: Checkpointable<S>>(&self, rel: &str, model: &M, seed: u64) -> Result<()> {
        save_checkpoint(model, &checkpoint_metadata(&self.cfg, seed), &self.path(rel))
    }

    pub fn load<M: Checkpointable<S>>(&self, rel: &str) -> Result<M> {
        Ok(load_checkpoint::<S, M>(&self.path(rel))?.0)
    }

    pub fn read_prompts(&self) -> Result<EvalPrompts> {
        EvalPrompts::from_tsv(&fs::read_to_string(self.path("data/prompts.tsv"))?, &self.vocab()?)
    }

    fn gen_data(&self) -> Result<()> {
        let cfg = &self.cfg;
        let vocab = self.vocab()?;
        let layout = self.layout()?;
        let main = gen_corpus(&cfg.corpus_spec())?;
        let domain = gen_corpus(&cfg.domain_spec())?;
        let parts = split(&main, &MAIN_SPLIT, derive_seed(cfg.seed, "split"))?;
        let share = cfg.domain_share;
        let mut dparts = split(&domain, &[share, share, 1.0 - 2.0 * share], derive_seed(cfg.seed, "domain-split"))?;
        let mut tune = dparts.remove(2);
        if cfg.train_size > 0 {
            tune = take_balanced(&tune, cfg.train_size);
        }
        let neutral = neutral_prompts(
            &cfg.corpus_spec(),
            cfg.neutral_prompts,
            cfg.neutral_prompt_len,
            derive_seed(cfg.seed, "neutral-prompts"),
        )?;
        let adversarial = attribute_prompts(
            &parts[3],
            &layout,
            cfg.attribute.opposite(),
            cfg.adversarial_prompts,
            cfg.adversarial_prompt_len,
        );
        let prompts = EvalPrompts { neutral, adversarial }.to_tsv(&vocab);
        self.write_text("data/corpus.tsv", &main.to_tsv(&vocab))?;
        self.write_text("data/domain.tsv", &domain.to_tsv(&vocab))?;
        for (rel, part) in [("data/clm.tsv", &parts[0]), ("data/disc.tsv", &parts[1]), ("data/judge.tsv", &parts[2])] {
            self.write_text(rel, &part.to_tsv(&vocab))?;
        }
        self.write_text("data/clm_domain.tsv", &dparts[0].to_tsv(&vocab))?;
        self.write_text("data/judge_domain.tsv", &dparts[1].to_tsv(&vocab))?;
        self.write_text("data/tune.tsv", &tune.to_tsv(&vocab))?;
        self.write_text("data/prompts.tsv", &prompts)
    }

    fn train_lm(&self, corpus_rels: &[&str], tag: &str, out: &str, log_rel: &str) -> Result<()> {
        let mut seqs = Vec::new();
        for rel in corpus_rels {
            seqs.extend(self.read_corpus(rel)?.sequences());
        }
        let (lm, text, init) = fit_lm(&self.cfg, &seqs, tag)?;
        self.save(out, &lm, init)?;
        self.write_text(log_rel, &text)
    }

    fn train_disc(&self, corpus_rels: &[&str], tag: &str, out: &str, log_rel: &str) -> Result<()> {
        let mut corpus = AttributeCorpus::default();
        for rel in corpus_rels {
            corpus.samples.extend(self.read_corpus(rel)?.samples);
        }
        let (d, text, init) = fit_disc(&self.cfg, &corpus, tag)?;
        self.save(out, &d, init)?;
        self.write_text(log_rel, &text)
    }

    fn tune_config(&self, unlikelihood: bool, tag: &str) -> DiscupConfig {
        DiscupConfig { unlikelihood, seed: derive_seed(self.cfg.seed, tag), ..self.cfg.discup_config() }
    }

    /// Runs one tuning method against the saved models; returns the block,
    /// its log, and whether the frozen models were left untouched.
    pub fn tune(&self, method: &str, cfg: &DiscupConfig) -> Result<(PromptBlock<S>, TuneLog, bool)> {
        let clm: CausalLm<S> = self.load("models/clm.ckpt")?;
        let tune = self.read_corpus("data/tune.tsv")?;
        let clm_hash = clm.param_hash();
        let (block, log, frozen) = match method {
            "vanilla" => {
                let (b, l) = vanilla_prompt_train(&clm, &tune.with_label(cfg.attribute), cfg)?;
                (b, l, clm.param_hash() == clm_hash)
            }
            "discup" | "discup_nul" => {
                let disc: Discriminator<S> = self.load("models/disc.ckpt")?;
                let disc_hash = disc.param_hash();
                let (b, l) = discup_train(&clm, &disc, &tune.unlabeled(), cfg)?;
                (b, l, clm.param_hash() == clm_hash && disc.param_hash() == disc_hash)
            }
            _ => return Err(invalid(format!("unknown method `{method}`"))),
        };
        Ok((block, log, frozen))
    }

    fn tune_stage(&self, method: &str, frozen: &mut Vec<(String, bool)>) -> Result<()> {
        let cfg = self.tune_config(method != "discup_nul", &format!("prompt-{method}"));
        let (block, log, ok) = self.tune(method, &cfg)?;
        frozen.push((method.to_string(), ok));
        if !ok {
            return Err(crate::error::contract("frozen model parameters changed during tuning"));
        }
        self.save(&format!("prompts/{method}.ckpt"), &block, cfg.seed)?;
        self.write_text(&format!("logs/{method}.log"), &log.render())
    }

    /// Judges loaded from disk.
    pub fn evaluator_models(&self) -> Result<(Discriminator<S>, CausalLm<S>)> {
        Ok((self.load("models/judge_disc.ckpt")?, self.load("models/judge_lm.ckpt")?))
    }

    /// Evaluates `prompt` (or the bare model) on the saved evaluation prompts.
    pub fn evaluate(
        &self,
        clm: &CausalLm<S>,
        block: Option<&PromptBlock<S>>,
        judges: &(Discriminator<S>, CausalLm<S>),
        label: &str,
    ) -> Result<(EvalReport, Generations)> {
        self.evaluate_on(clm, block, judges, label, &self.read_prompts()?)
    }

    fn evaluate_on(
        &self,
        clm: &CausalLm<S>,
        block: Option<&PromptBlock<S>>,
        judges: &(Discriminator<S>, CausalLm<S>),
        label: &str,
        prompts: &EvalPrompts,
    ) -> Result<(EvalReport, Generations)> {
        let evaluator = Evaluator {
            judge_disc: &judges.0,
            judge_lm: &judges.1,
            keywords: KeywordList::domain(&self.layout()?),
            attribute: self.cfg.attribute,
        };
        let materialized = block.map(PromptBlock::materialize);
        let mut gen = self.cfg.generation();
        gen.seed = derive_seed(self.cfg.seed, "generation");
        let mut config =
            vec![("method".to_string(), label.to_string()), ("seed".to_string(), self.cfg.seed.to_string())];
        if let Some(b) = block {
            config.push(("prompt_len".into(), b.len().to_string()));
        }
        config.push(("alpha".into(), self.cfg.alpha.to_string()));
        config.push(("candidate_k".into(), self.cfg.topk.to_string()));
        run_eval_suite(clm, materialized.as_ref(), &evaluator, prompts, &gen, config)
    }

    fn eval_stage(&self) -> Result<BTreeMap<String, EvalReport>> {
        let clm: CausalLm<S> = self.load("models/clm.ckpt")?;
        let judges = self.evaluator_models()?;
        let vocab = self.vocab()?;
        let mut reports = BTreeMap::new();
        let mut csv = format!("method,{REPORT_CSV_HEADER}\n");
        let mut gens_tsv = String::new();
        let eval_prompts = self.read_prompts()?;
        let bos_only = EvalPrompts { neutral: vec![vec![BOS]; eval_prompts.neutral.len()], adversarial: Vec::new() };
        for method in METHODS.into_iter().chain([REFERENCE]) {
            let block: Option<PromptBlock<S>> = match method {
                "base" | REFERENCE => None,
                _ => Some(self.load(&format!("prompts/{method}.ckpt"))?),
            };
            let prompts = if method == REFERENCE { &bos_only } else { &eval_prompts };
            let (report, gens) = self.evaluate_on(&clm, block.as_ref(), &judges, method, prompts)?;
            for (p, c) in gens.prompts.iter().zip(&gens.continuations) {
                gens_tsv.push_str(&format!("{method}\t{}\t{}\n", vocab.decode(p), vocab.decode(c)));
            }
            self.write_text(&format!("reports/{method}.txt"), &report.to_kv())?;
            csv.push_str(&format!("{method},{}\n", report.to_csv_row()));
            reports.insert(method.to_string(), report);
        }
        self.write_text("reports/summary.csv", &csv)?;
        self.write_text("reports/generations.tsv", &gens_tsv)?;
        Ok(reports)
    }

    fn run_stage(&self, name: &str, frozen: &mut Vec<(String, bool)>) -> Result<()> {
        match name {
            "gen-data" => self.gen_data(),
            "train-clm" => {
                self.train_lm(&["data/clm.tsv", "data/clm_domain.tsv"], "clm", "models/clm.ckpt", "logs/clm.log")
            }
            "train-judge-lm" => self.train_lm(
                &["data/disc.tsv", "data/judge.tsv", "data/judge_domain.tsv"],
                "judge-lm",
                "models/judge_lm.ckpt",
                "logs/judge_lm.log",
            ),
            "train-disc" => {
                self.train_disc(&["data/disc.tsv", "data/clm_domain.tsv"], "disc", "models/disc.ckpt", "logs/disc.log")
            }
            "train-judge-disc" => self.train_disc(
                &["data/judge.tsv", "data/judge_domain.tsv"],
                "judge-disc",
                "models/judge_disc.ckpt",
                "logs/judge_disc.log",
            ),
            "tune-vanilla" => self.tune_stage("vanilla", frozen),
            "tune-discup" => self.tune_stage("discup", frozen),
            "tune-discup-nul" => self.tune_stage("discup_nul", frozen),
            "eval" => self.eval_stage().map(|_| ()),
            _ => Err(invalid(format!("unknown stage `{name}`"))),
        }
    }

    fn hash_file(&self, rel: &str) -> Option<String> {
        fs::read(self.path(rel)).ok().map(|b| sha256_hex(&b))
    }

    /// Runs every stage. With `resume`, a stage is skipped when its outputs
    /// match the previous manifest and none of its dependencies reran.
    pub fn execute(&self, resume: bool) -> Result<PipelineOutcome> {
        fs::create_dir_all(&self.dir)?;
        let config_text = self.cfg.to_text();
        let previous = if resume && fs::read_to_string(self.path("config.txt")).ok().as_deref() == Some(&config_text) {
            fs::read_to_string(self.path(Manifest::FILE)).ok().map(|t| Manifest::parse(&t)).transpose()?
        } else {
            None
        };
        self.write_text("config.txt", &config_text)?;
        let mut ran: BTreeSet<&str> = BTreeSet::new();
        let mut order = Vec::new();
        let mut frozen = Vec::new();
        for stage in STAGES {
            let intact = previous.as_ref().is_some_and(|m| {
                stage.outputs.iter().all(|o| self.hash_file(o).is_some_and(|h| m.entries.get(*o) == Some(&h)))
            });
            if intact && !stage.deps.iter().any(|d| ran.contains(d)) {
                log::info!("stage {} reused", stage.name);
                continue;
            }
            log::info!("stage {} running", stage.name);
            self.run_stage(stage.name, &mut frozen)
                .map_err(|e| Error::Stage { stage: stage.name.to_string(), source: Box::new(e) })?;
            ran.insert(stage.name);
            order.push(stage.name.to_string());
        }
        let mut manifest = Manifest::default();
        manifest.entries.insert("config.txt".into(), sha256_hex(config_text.as_bytes()));
        for stage in STAGES {
            for o in stage.outputs {
                let h = self.hash_file(o).ok_or_else(|| invalid(format!("missing output {o}")))?;
                manifest.entries.insert(o.to_string(), h);
            }
        }
        self.write_text(Manifest::FILE, &manifest.render())?;
        let mut reports = BTreeMap::new();
        for m in METHODS.into_iter().chain([REFERENCE]) {
            reports.insert(
                m.to_string(),
                EvalReport::from_kv(&fs::read_to_string(self.path(&format!("reports/{m}.txt")))?)?,
            );
        }
        Ok(PipelineOutcome { manifest, ran: order, reports, frozen_checks: frozen })
    }

    /// Retunes DisCup once per value of `axis` against the base models of
    /// this run (which must already exist) and evaluates each prompt.
    pub fn sweep(&self, axis: crate::eval::SweepAxis, values: &[usize]) -> Result<Vec<(usize, EvalReport)>> {
        use crate::eval::SweepAxis;
        let clm: CausalLm<S> = self.load("models/clm.ckpt")?;
        let disc: Discriminator<S> = self.load("models/disc.ckpt")?;
        let judges = self.evaluator_models()?;
        let tune = self.read_corpus("data/tune.tsv")?.unlabeled();
        crate::eval::sweep(values, |v| {
            let mut cfg = self.tune_config(self.cfg.unlikelihood, "prompt-discup");
            let mut corpus = tune.clone();
            match axis {
                SweepAxis::PromptLength => cfg.prompt_len = v,
                SweepAxis::CandidateK => cfg.top_k = v,
                SweepAxis::TrainSize => corpus = tune.take(v),
            }
            let (block, _) = discup_train(&clm, &disc, &corpus, &cfg)?;
            let (mut report, _) = self.evaluate(&clm, Some(&block), &judges, "discup")?;
            report.config.push((axis.name().into(), v.to_string()));
            Ok(report)
        })
    }
}

/// Extra checkpoint metadata: init seed and a digest of the config.
pub fn checkpoint_metadata(cfg: &RunConfig, seed: u64) -> Metadata {
    let mut meta = Metadata::default();
    meta.set("seed", seed);
    meta.set("config_sha256", sha256_hex(cfg.to_text().as_bytes()));
    meta
}

/// Trains a language model with the run's CLM settings. Seeds derive from
/// the master seed and `tag`; returns the model, its log and the init seed.
pub fn fit_lm(cfg: &RunConfig, seqs: &[Vec<usize>], tag: &str) -> Result<(CausalLm<S>, String, u64)> {
    let init = derive_seed(cfg.seed, &format!("{tag}-init"));
    let tc = TrainConfig {
        epochs: cfg.clm_epochs,
        lr: cfg.clm_lr,
        batch_size: cfg.train_batch,
        seed: derive_seed(cfg.seed, &format!("{tag}-order")),
    };
    let (lm, log) = mle_train::<S>(seqs, cfg.clm_arch(), init, &tc)?;
    let mut text = format!("# {tag} epochs={} lr={} sequences={}\n", tc.epochs, tc.lr, seqs.len());
    text.push_str(&format!("initial\t{:.6}\n", log.initial_loss));
    for (e, l) in log.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{e}\t{l:.6}\n"));
    }
    text.push_str(&format!("final\t{:.6}\n", log.final_loss));
    Ok((lm, text, init))
}

/// Discriminator counterpart of [`fit_lm`].
pub fn fit_disc(cfg: &RunConfig, corpus: &AttributeCorpus, tag: &str) -> Result<(Discriminator<S>, String, u64)> {
    let init = derive_seed(cfg.seed, &format!("{tag}-init"));
    let dc = DiscConfig {
        epochs: cfg.disc_epochs,
        lr: cfg.disc_lr,
        batch_size: cfg.train_batch,
        seed: derive_seed(cfg.seed, &format!("{tag}-order")),
        ..DiscConfig::default()
    };
    let (d, losses) = disc_train::<S>(corpus, cfg.disc_arch(), init, &dc)?;
    let mut text = format!("# {tag} epochs={} lr={} samples={}\n", dc.epochs, dc.lr, corpus.len());
    for (e, l) in losses.iter().enumerate() {
        text.push_str(&format!("{e}\t{l:.6}\n"));
    }
    Ok((d, text, init))
}

/// First `n` samples, alternating labels so both classes stay represented.
fn take_balanced(corpus: &AttributeCorpus, n: usize) -> AttributeCorpus {
    let mut by_label: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for s in &corpus.samples {
        by_label.entry(s.label).or_default().push(s.clone());
    }
    let mut iters: Vec<_> = by_label.into_values().map(|v| v.into_iter()).collect();
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let before = samples.len();
        for it in iters.iter_mut() {
            if samples.len() < n {
                samples.extend(it.next());
            }
        }
        if samples.len() == before {
            break;
        }
    }
    AttributeCorpus { samples }
}

/// Convenience wrapper: validate, run, return the outcome.
pub fn pipeline_run(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<PipelineOutcome> {
    Run::new(cfg.clone(), dir)?.execute(resume)
}
