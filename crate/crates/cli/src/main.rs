use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use discup::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpointable};
use discup::config::RunConfig;
use discup::data::{gen_corpus, neutral_prompts, AttributeCorpus};
use discup::discup::{discup_train, objective_gradient_check, sign_suite, vanilla_prompt_train};
use discup::eval::{generate_all, run_eval_suite, sweep_csv, EvalPrompts, Evaluator, KeywordList, SweepAxis};
use discup::pipeline::{checkpoint_metadata, derive_seed, fit_disc, fit_lm, pipeline_run, Run, METHODS, REFERENCE};
use discup::seqmodel::Vocab;
use discup::{CausalLm32, Discriminator32, Error, PromptBlock32};

#[derive(Parser)]
#[command(name = "discup", version, about = "Discriminator-cooperative unlikelihood prompt tuning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Soft-target temperature.
    #[arg(long)]
    alpha: Option<f64>,
    /// Candidate count per position.
    #[arg(long)]
    topk: Option<usize>,
    /// Control-prompt length.
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Epochs for the model this subcommand trains.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate for the model this subcommand trains.
    #[arg(long)]
    lr: Option<f64>,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file, or directory for `run`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as TSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Use the marker-bearing domain dialect instead of the clean corpus.
        #[arg(long)]
        domain: bool,
    },
    /// Train the causal language model.
    TrainClm {
        #[command(flatten)]
        common: Common,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Train the attribute discriminator.
    TrainDisc {
        #[command(flatten)]
        common: Common,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Maximum-likelihood prompt tuning on samples of the target attribute.
    TuneVanilla {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clm: PathBuf,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Discriminator-cooperative unlikelihood prompt tuning.
    TuneDiscup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clm: PathBuf,
        #[arg(long)]
        disc: PathBuf,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Drop the unlikelihood term.
        #[arg(long)]
        no_unlikelihood: bool,
    },
    /// Sample continuations, optionally under a tuned prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clm: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Prompt file (`group<TAB>tokens`); defaults to fresh neutral prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Score generations with the judge models.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clm: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        judge_disc: PathBuf,
        #[arg(long)]
        judge_lm: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Retune and evaluate along one axis using the models of a finished run.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// prompt_length, candidate_k or train_size.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Gradient sign suite and full-objective finite-difference check.
    ProbeGradients {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Whole pipeline from data generation to evaluation reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip stages whose inputs and outputs are unchanged.
        #[arg(long)]
        resume: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Which config keys `--epochs` and `--lr` address.
#[derive(Clone, Copy)]
enum Trains {
    Clm,
    Disc,
    Prompt,
}

fn resolve(common: &Common, base: Option<&Path>, trains: Trains) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = base {
        cfg.apply_text(&read(path)?)?;
    }
    if let Some(path) = &common.config {
        cfg.apply_text(&read(path)?)?;
    }
    for kv in &common.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let (epochs_key, lr_key) = match trains {
        Trains::Clm => ("clm_epochs", "clm_lr"),
        Trains::Disc => ("disc_epochs", "disc_lr"),
        Trains::Prompt => ("epochs", "lr"),
    };
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("alpha", common.alpha.map(|v| v.to_string())),
        ("topk", common.topk.map(|v| v.to_string())),
        ("prompt_len", common.prompt_len.map(|v| v.to_string())),
        (epochs_key, common.epochs.map(|v| v.to_string())),
        (lr_key, common.lr.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::Io(e)))
}

fn out_path(common: &Common) -> CliResult<&Path> {
    common.out.as_deref().ok_or_else(|| Failure::Usage("--out is required for this subcommand".into()))
}

fn vocab(cfg: &RunConfig) -> CliResult<Vocab> {
    Ok(cfg.corpus_spec().layout()?.vocab())
}

fn read_corpora(paths: &[PathBuf], vocab: &Vocab) -> CliResult<AttributeCorpus> {
    let mut corpus = AttributeCorpus::default();
    for p in paths {
        corpus.samples.extend(AttributeCorpus::from_tsv(&read(p)?, vocab)?.samples);
    }
    Ok(corpus)
}

fn load<M: Checkpointable<f32>>(path: &Path) -> CliResult<M> {
    Ok(load_checkpoint::<f32, M>(path)?.0)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn eval_prompts(cfg: &RunConfig, file: Option<&Path>, vocab: &Vocab) -> CliResult<EvalPrompts> {
    match file {
        Some(p) => Ok(EvalPrompts::from_tsv(&read(p)?, vocab)?),
        None => {
            let seed = derive_seed(cfg.seed, "neutral-prompts");
            let neutral = neutral_prompts(&cfg.corpus_spec(), cfg.neutral_prompts, cfg.neutral_prompt_len, seed)?;
            Ok(EvalPrompts { neutral, adversarial: Vec::new() })
        }
    }
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { common, domain } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let spec = if domain { cfg.domain_spec() } else { cfg.corpus_spec() };
            let corpus = gen_corpus(&spec)?;
            let out = out_path(&common)?;
            write(out, &corpus.to_tsv(&vocab(&cfg)?))?;
            println!("wrote {} samples to {}", corpus.len(), out.display());
        }
        Command::TrainClm { common, data } => {
            let cfg = resolve(&common, None, Trains::Clm)?;
            let out = out_path(&common)?;
            let corpus = read_corpora(&data, &vocab(&cfg)?)?;
            let (lm, log, init) = fit_lm(&cfg, &corpus.sequences(), "clm")?;
            save_checkpoint(&lm, &checkpoint_metadata(&cfg, init), out)?;
            write(&sibling(out, ".log"), &log)?;
            print!("{log}");
        }
        Command::TrainDisc { common, data } => {
            let cfg = resolve(&common, None, Trains::Disc)?;
            let out = out_path(&common)?;
            let corpus = read_corpora(&data, &vocab(&cfg)?)?;
            let (d, log, init) = fit_disc(&cfg, &corpus, "disc")?;
            save_checkpoint(&d, &checkpoint_metadata(&cfg, init), out)?;
            write(&sibling(out, ".log"), &log)?;
            print!("{log}");
        }
        Command::TuneVanilla { common, clm, data } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let out = out_path(&common)?;
            let clm: CausalLm32 = load(&clm)?;
            let dc = cfg.discup_config();
            let corpus = read_corpora(&data, &vocab(&cfg)?)?.with_label(dc.attribute);
            let (block, log) = vanilla_prompt_train(&clm, &corpus, &dc)?;
            save_checkpoint(&block, &checkpoint_metadata(&cfg, dc.seed), out)?;
            let text = log.render();
            write(&sibling(out, ".log"), &text)?;
            print!("{text}");
        }
        Command::TuneDiscup { common, clm, disc, data, no_unlikelihood } => {
            let mut cfg = resolve(&common, None, Trains::Prompt)?;
            if no_unlikelihood {
                cfg.unlikelihood = false;
            }
            let out = out_path(&common)?;
            let clm: CausalLm32 = load(&clm)?;
            let disc: Discriminator32 = load(&disc)?;
            let dc = cfg.discup_config();
            let corpus = read_corpora(&data, &vocab(&cfg)?)?.unlabeled();
            let (block, log) = discup_train(&clm, &disc, &corpus, &dc)?;
            save_checkpoint(&block, &checkpoint_metadata(&cfg, dc.seed), out)?;
            let text = log.render();
            write(&sibling(out, ".log"), &text)?;
            print!("{text}");
        }
        Command::Generate { common, clm, prompt, prompts } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let out = out_path(&common)?;
            let vocab = vocab(&cfg)?;
            let clm: CausalLm32 = load(&clm)?;
            let block = prompt.map(|p| load::<PromptBlock32>(&p)).transpose()?;
            let prefix = block.as_ref().map(|b| b.materialize());
            let all: Vec<Vec<usize>> = eval_prompts(&cfg, prompts.as_deref(), &vocab)?.all().cloned().collect();
            let mut gen = cfg.generation();
            gen.seed = derive_seed(cfg.seed, "generation");
            let conts = generate_all(&clm, prefix.as_ref().map(|p| &p.matrix), &all, &gen)?;
            let mut text = String::new();
            for (p, c) in all.iter().zip(&conts) {
                let _ = writeln!(text, "{}\t{}", vocab.decode(p), vocab.decode(c));
            }
            write(out, &text)?;
            println!("wrote {} generations to {}", conts.len(), out.display());
        }
        Command::Eval { common, clm, prompt, judge_disc, judge_lm, prompts } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let out = out_path(&common)?;
            let vocab = vocab(&cfg)?;
            let clm: CausalLm32 = load(&clm)?;
            let block = prompt.map(|p| load::<PromptBlock32>(&p)).transpose()?;
            let judge_disc: Discriminator32 = load(&judge_disc)?;
            let judge_lm: CausalLm32 = load(&judge_lm)?;
            let evaluator = Evaluator {
                judge_disc: &judge_disc,
                judge_lm: &judge_lm,
                keywords: KeywordList::domain(&cfg.corpus_spec().layout()?),
                attribute: cfg.attribute,
            };
            let set = eval_prompts(&cfg, prompts.as_deref(), &vocab)?;
            let mut gen = cfg.generation();
            gen.seed = derive_seed(cfg.seed, "generation");
            let materialized = block.as_ref().map(|b| b.materialize());
            let config = vec![("seed".to_string(), cfg.seed.to_string())];
            let (report, _) = run_eval_suite(&clm, materialized.as_ref(), &evaluator, &set, &gen, config)?;
            let text = report.to_kv();
            write(out, &text)?;
            print!("{text}");
        }
        Command::Sweep { common, run, axis, values } => {
            let axis = SweepAxis::parse(&axis).map_err(|e| Failure::Usage(e.to_string()))?;
            let base = run.join("config.txt");
            let cfg = resolve(&common, base.exists().then_some(base.as_path()), Trains::Prompt)?;
            let out = out_path(&common)?;
            let rows = Run::new(cfg, &run)?.sweep(axis, &values)?;
            let csv = sweep_csv(&rows);
            write(out, &csv)?;
            print!("{csv}");
        }
        Command::ProbeGradients { common, trials } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let text = probe_gradients(&cfg, trials)?;
            if let Some(out) = &common.out {
                write(out, &text)?;
            }
            print!("{text}");
            if text.contains("FAIL") {
                return Err(Failure::Runtime(Error::Contract("gradient checks failed".into())));
            }
        }
        Command::Run { common, resume } => {
            let cfg = resolve(&common, None, Trains::Prompt)?;
            let out = out_path(&common)?;
            let outcome = pipeline_run(&cfg, out, resume)?;
            println!(
                "stages run: {}",
                if outcome.ran.is_empty() { "none".to_string() } else { outcome.ran.join(", ") }
            );
            println!("method,correctness,ppl,dist3,coverage");
            for m in METHODS.into_iter().chain([REFERENCE]) {
                let r = &outcome.reports[m];
                println!("{m},{:.4},{:.4},{:.4},{:.4}", r.correctness, r.ppl, r.dist3, r.coverage);
            }
        }
    }
    Ok(())
}

fn probe_gradients(cfg: &RunConfig, trials: usize) -> CliResult<String> {
    let suite = sign_suite(trials, cfg.seed)?;
    let check = objective_gradient_check(cfg.seed, cfg.alpha, 1e-5)?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let mut text = String::new();
    let _ = writeln!(
        text,
        "sign suite: {}/{} logit vectors {}",
        suite.signs_held,
        trials,
        verdict(suite.signs_held == trials)
    );
    let _ = writeln!(
        text,
        "boundary p_unlike=0.5: max other derivative {:.3e} {}",
        suite.boundary_max_other,
        verdict(suite.boundary_max_other <= 1e-8)
    );
    let _ = writeln!(
        text,
        "|dL/dh_unlike| vs 2 p_unlike: max gap {:.3e} {}",
        suite.unlike_identity_error,
        verdict(suite.unlike_identity_error <= 1e-6)
    );
    let _ = writeln!(text, "closed form vs central differences: max abs {:.3e}", suite.max_fd_discrepancy);
    let _ = writeln!(
        text,
        "full objective: {} prompt parameters, max rel err {:.3e} {}",
        check.parameters,
        check.max_relative_error,
        verdict(check.max_relative_error < 1e-4)
    );
    Ok(text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `discup --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
