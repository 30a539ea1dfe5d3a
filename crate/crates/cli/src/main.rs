//! `knowmine` command-line entry point.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use knowmine::config::{DataConfig, RunConfig};
use knowmine::dataset::load_dataset;
use knowmine::gradcheck::{model_suite, op_suite};
use knowmine::kb::{load_kb, select_candidates};
use knowmine::model::{Model, ModelConfig, Resources};
use knowmine::synth::{generate, SynthSpec, EVAL_FILE, KB_DIR, TRAIN_FILE, VOCAB_FILE};
use knowmine::text::Vocab;
use knowmine::train::{evaluate, load_examples, train, CHECKPOINT_FILE, METRICS_FILE};

#[derive(Parser)]
#[command(name = "knowmine", version, about = "Knowledge-aware scene-text image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, knowledge base and run config.
    Synth(SynthArgs),
    /// Train from a config file.
    Train(RunArgs),
    /// Print per-class AP and mAP of a checkpoint.
    Eval(EvalArgs),
    /// Read mentions from stdin and print their top candidates.
    Link(LinkArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 144)]
    mention_vocab: usize,
    #[arg(long, default_value_t = 2)]
    homonyms: usize,
    #[arg(long, default_value_t = 16)]
    entity_dim: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 25)]
    eval_per_class: usize,
    /// Visual informativeness in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 5)]
    texts_per_sample: usize,
    #[arg(long, default_value_t = 0)]
    noise_texts: usize,
    /// Mentions per sample borrowed from one other class.
    #[arg(long, default_value_t = 0)]
    decoy_texts: usize,
    /// Scale of every entity embedding.
    #[arg(long, default_value_t = 8.0)]
    entity_norm: f64,
    #[arg(long, default_value_t = 0.0)]
    shared_direction: f64,
    #[arg(long)]
    equalize_priors: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Render visual features as SIZE×SIZE images instead of writing them inline.
    #[arg(long, value_name = "SIZE")]
    images: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set optim.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to the run's `model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the config's eval set.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    /// Directory with `entities.tsv` and `priors.tsv`.
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, default_value_t = 8)]
    candidates: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Link(a) => link(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        num_classes: a.classes,
        mention_vocab: a.mention_vocab,
        homonyms: a.homonyms,
        entity_dim: a.entity_dim,
        feature_dim: a.feature_dim,
        train_per_class: a.train_per_class,
        eval_per_class: a.eval_per_class,
        alpha: a.alpha,
        sigma: a.sigma,
        texts_per_sample: a.texts_per_sample,
        noise_texts: a.noise_texts,
        decoy_texts: a.decoy_texts,
        entity_norm: a.entity_norm,
        shared_direction: a.shared_direction,
        equalize_priors: a.equalize_priors,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let mut data = generate(&spec)?;
    let mut model = data.model_config(ModelConfig::default());
    if let Some(size) = a.images {
        if size < 4 || size % 4 != 0 {
            bail!("--images must be a positive multiple of 4, got {size}");
        }
        data.render_images(&a.out, size)?;
        model.vision.use_precomputed = false;
        model.vision.input_size = size;
        model.vision.patch_size = size / 4;
    }
    data.write(&a.out)?;
    let run = RunConfig {
        seed: a.seed,
        data: DataConfig {
            train: TRAIN_FILE.into(),
            eval: Some(EVAL_FILE.into()),
            kb: KB_DIR.into(),
            vocab: VOCAB_FILE.into(),
            out_dir: "run".into(),
        },
        model,
        ..RunConfig::default()
    };
    let cfg_path = a.out.join("run.toml");
    fs::write(&cfg_path, run.to_toml()?)?;
    println!(
        "wrote {} train / {} eval samples, {} mentions, config {}",
        data.train.len(),
        data.eval.len(),
        data.priors.len(),
        cfg_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn resources(data: &DataConfig) -> Result<Resources> {
    let vocab = Vocab::load(&data.vocab).with_context(|| format!("loading vocabulary {}", data.vocab.display()))?;
    let (entities, priors) = load_kb(&data.kb).with_context(|| format!("loading knowledge base {}", data.kb.display()))?;
    Ok(Resources { vocab, entities, priors })
}

fn examples(path: &Path) -> Result<Vec<knowmine::train::Example>> {
    let samples = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(load_examples(&samples, path)?)
}

fn run_train(a: RunArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&a.config, &a.overrides)?;
    let res = resources(&cfg.data)?;
    let train_set = examples(&cfg.data.train)?;
    let eval_set = cfg.data.eval.as_deref().map(examples).transpose()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let out = &cfg.data.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let history = train(
        &mut model,
        &res,
        &train_set,
        eval_set.as_deref(),
        &cfg.optim,
        &cfg.train,
        cfg.seed,
        Some(out),
    )?;
    for h in &history {
        match h.eval_map {
            Some(map) => println!("epoch {}\tloss {:.6}\tmAP {map}", h.epoch, h.train_loss),
            None => println!("epoch {}\tloss {:.6}", h.epoch, h.train_loss),
        }
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    println!("metrics {}", out.join(METRICS_FILE).display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&a.run.config, &a.run.overrides)?;
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.data.out_dir.join(CHECKPOINT_FILE));
    let data = match a.data.or(cfg.data.eval.clone()) {
        Some(d) => d,
        None => bail!("no evaluation data: pass --data or set data.eval"),
    };
    let model = Model::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let res = resources(&cfg.data)?;
    let ev = evaluate(&model, &res, &examples(&data)?)?;
    for (m, ap) in ev.report.per_class.iter().enumerate() {
        match ap {
            Some(ap) => println!("class {m}\tAP {ap}"),
            None => println!("class {m}\tAP n/a (no positives)"),
        }
    }
    println!("accuracy {}", ev.accuracy);
    println!("mAP {}", ev.report.map);
    Ok(ExitCode::SUCCESS)
}

fn link(a: LinkArgs) -> Result<ExitCode> {
    let (entities, priors) = load_kb(&a.kb)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set = select_candidates(&priors, &entities, &line, a.candidates)?;
        let mut row = set.mention.clone();
        for c in &set.candidates {
            row.push_str(&format!("\t{}={}", c.entity_id, c.prior));
        }
        writeln!(out, "{row}")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let mut worst: Vec<(&'static str, f64)> = vec![("core", 0.0)];
    for seed in a.seed..a.seed + a.seeds {
        for (_, err) in op_suite(seed, a.step)? {
            worst[0].1 = worst[0].1.max(err);
        }
        for g in model_suite(seed, a.step)? {
            match worst.iter_mut().find(|(name, _)| *name == g.group) {
                Some(w) => w.1 = w.1.max(g.max_rel_err),
                None => worst.push((g.group, g.max_rel_err)),
            }
        }
    }
    let mut ok = true;
    for (group, err) in &worst {
        let pass = *err < a.tolerance;
        ok &= pass;
        println!("{group}\t{err:.3e}\t{}", if pass { "ok" } else { "FAIL" });
    }
    if !ok {
        eprintln!("gradient check failed at tolerance {:e}", a.tolerance);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
