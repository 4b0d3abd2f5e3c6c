//! Command-line surface tying corpora, configs, training, scoring and
//! reformulation together. One subcommand per pipeline stage:
//! `train-sft`, `train-rl`, `reformulate`, `score-wf`, `train-wf`, `eval`.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use config::ConfigFile;
use reformulator::model::{ModelConfig, Seq2SeqParams};
use reformulator::numerics::Tape;
use reformulator::objectives::CriticParams;
use reformulator::rewards::{IcEnvironment, QaEnvironment, RewardEnvironment};
use reformulator::text::Vocabulary;
use reformulator::training::{
    checkpoint_load, checkpoint_save, evaluate, train_rl, train_supervised, Algorithm, PairCorpus,
    RlDataset, SftStage, TrainConfig,
};
use reformulator::wellformedness::{
    load_rated, wf_score, wf_train, WfConfig, WfEnvironment, WfModel,
};

#[derive(Parser)]
#[command(
    name = "reformulator",
    version,
    about = "Seq2seq query reformulation with RL fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised fine-tuning over the staged pair corpora in the config.
    TrainSft {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for vocab.txt, model.ckpt and curves.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's rng seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// RL fine-tuning of a checkpoint against a reward environment.
    TrainRl {
        #[arg(long)]
        config: PathBuf,
        /// Starting checkpoint (vocab.txt must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment spec: `qa:<corpus>`, `ic:<corpus>` or `wf:<model>`.
        #[arg(long)]
        env: String,
        /// RL algorithm: pg, ac, sc, ul or mixed.
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy or beam reformulation of a query file, one query per line.
    Reformulate {
        /// Model checkpoint (vocab.txt must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input queries, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Decode mode: greedy, or beam:k for a width-k beam.
        #[arg(long, default_value = "greedy")]
        mode: String,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Optional config for prefix and max_len.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Scores a query file with a trained well-formedness model.
    ScoreWf {
        /// Well-formedness model file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input texts, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Output scores file, one rating per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the 6-way well-formedness rating model.
    TrainWf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decode evaluation of a checkpoint against an environment.
    Eval {
        /// Model checkpoint (vocab.txt must sit next to it).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment spec: `qa:<corpus>`, `ic:<corpus>` or `wf:<model>`.
        #[arg(long)]
        env: String,
        /// Optional config (needed for rl_data with wf environments).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional well-formedness model for the mean score column.
        #[arg(long)]
        wf: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::TrainSft { config, out, seed } => cmd_train_sft(&config, &out, seed),
        Command::TrainRl {
            config,
            checkpoint,
            env,
            algo,
            seed,
            out,
        } => cmd_train_rl(&config, &checkpoint, &env, algo.as_deref(), seed, &out),
        Command::Reformulate {
            checkpoint,
            input,
            mode,
            out,
            config,
        } => cmd_reformulate(&checkpoint, &input, &mode, &out, config.as_deref()),
        Command::ScoreWf {
            checkpoint,
            input,
            out,
        } => cmd_score_wf(&checkpoint, &input, &out),
        Command::TrainWf { config, out, seed } => cmd_train_wf(&config, &out, seed),
        Command::Eval {
            checkpoint,
            env,
            config,
            wf,
        } => cmd_eval(&checkpoint, &env, config.as_deref(), wf.as_deref()),
    }
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot finalize {}", path.display()))?;
    Ok(())
}

fn sibling_vocab(checkpoint: &Path) -> Result<Vocabulary> {
    let vocab_path = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join("vocab.txt");
    Vocabulary::load(&vocab_path).map_err(|e| {
        anyhow!(
            "cannot load vocabulary next to the checkpoint ({}): {e}",
            vocab_path.display()
        )
    })
}

fn load_model(checkpoint: &Path) -> Result<(Vocabulary, Seq2SeqParams, Option<CriticParams>)> {
    let vocab = sibling_vocab(checkpoint)?;
    let (model, critic) = checkpoint_load(checkpoint, &vocab)?;
    Ok((vocab, model, critic))
}

/// Environment spec (`qa:`/`ic:` corpus path or `wf:` model path), plus the
/// training items it provides (none for wf).
fn load_env(spec: &str, base: &Path) -> Result<(Box<dyn RewardEnvironment>, Option<RlDataset>)> {
    let resolve = |raw: &str| {
        let p = PathBuf::from(raw);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    match spec.split_once(':') {
        Some(("qa", path)) => {
            let env = QaEnvironment::load(&resolve(path))?;
            let items = RlDataset::new(env.items());
            Ok((Box::new(env), Some(items)))
        }
        Some(("ic", path)) => {
            let env = IcEnvironment::load(&resolve(path))?;
            let items = RlDataset::new(env.items());
            Ok((Box::new(env), Some(items)))
        }
        Some(("wf", path)) => {
            let model = WfModel::load(&resolve(path))?;
            Ok((Box::new(WfEnvironment { model }), None))
        }
        _ => bail!("invalid env spec {spec:?}: expected qa:<corpus>, ic:<corpus> or wf:<model>"),
    }
}

/// Queries from a line-oriented file; ids are the zero-based line numbers.
fn line_dataset(path: &Path) -> Result<RlDataset> {
    let body =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(RlDataset::new(
        body.lines()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l.to_string()))
            .collect(),
    ))
}

fn cmd_train_sft(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = ConfigFile::load(config_path)?;
    cfg.require(&["sft_data"])?;
    let train_config = cfg.train_config(TrainConfig::supervised_defaults(), None, seed)?;

    let paths = cfg.path_list("sft_data")?;
    let mut corpora = Vec::new();
    for p in &paths {
        corpora.push(
            PairCorpus::load(p).with_context(|| format!("cannot load corpus {}", p.display()))?,
        );
    }
    let stage_epochs: Vec<usize> = match cfg.get("sft_epochs") {
        None => vec![train_config.epochs; corpora.len()],
        Some(raw) => {
            let parsed: Result<Vec<usize>> = raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| anyhow!("config key `sft_epochs`: bad count {s:?}"))
                })
                .collect();
            let parsed = parsed?;
            if parsed.len() != corpora.len() {
                bail!(
                    "config key `sft_epochs` lists {} counts for {} corpora",
                    parsed.len(),
                    corpora.len()
                );
            }
            parsed
        }
    };

    let texts: Vec<String> = corpora.iter().flat_map(|c| c.texts()).collect();
    let vocab = Vocabulary::build(&texts, cfg.vocab_size()?)?;
    let model_config = ModelConfig::with_dims(vocab.size(), cfg.embed_dim()?, cfg.hidden_dim()?);
    let mut model = Seq2SeqParams::init(model_config, train_config.seed);

    let stages: Vec<SftStage> = corpora
        .into_iter()
        .zip(stage_epochs)
        .map(|(pairs, epochs)| SftStage { pairs, epochs })
        .collect();
    let log = train_supervised(&train_config, &stages, &mut model, &vocab)?;

    fs::create_dir_all(out)?;
    vocab.save(&out.join("vocab.txt"))?;
    checkpoint_save(&out.join("model.ckpt"), &model, None, &vocab)?;
    log.emit_curves(&out.join("curves.csv"))?;
    if let Some(last) = log.dev_records().last() {
        println!(
            "train-sft done: {} epochs, final dev loss {:.6}, exact match {:.4}",
            log.dev_records().len(),
            last.mean_loss,
            last.mean_reward
        );
    }
    Ok(())
}

fn cmd_train_rl(
    config_path: &Path,
    checkpoint: &Path,
    env_spec: &str,
    algo: Option<&str>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = ConfigFile::load(config_path)?;
    let train_config = cfg.train_config(TrainConfig::rl_defaults(), algo, seed)?;
    let (vocab, mut model, critic) = load_model(checkpoint)?;

    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (env, env_items) = load_env(env_spec, &base)?;
    let data = match env_items {
        Some(items) if cfg.get("rl_data").is_none() => items,
        _ => {
            let path = cfg.path("rl_data").map_err(|_| {
                anyhow!("env {env_spec:?} provides no queries; set rl_data in the config")
            })?;
            line_dataset(&path)?
        }
    };

    let mut critic = match critic {
        Some(c) => c,
        None => CriticParams::init(model.config.hidden_dim, 64, train_config.seed),
    };
    let needs_critic = train_config.algorithm == Algorithm::Ac;
    let log = train_rl(
        &train_config,
        env.as_ref(),
        &mut model,
        needs_critic.then_some(&mut critic),
        &vocab,
        &data,
    )?;

    fs::create_dir_all(out)?;
    vocab.save(&out.join("vocab.txt"))?;
    checkpoint_save(
        &out.join("model.ckpt"),
        &model,
        needs_critic.then_some(&critic),
        &vocab,
    )?;
    log.emit_curves(&out.join("curves.csv"))?;
    let devs = log.dev_records();
    println!(
        "train-rl done ({}): dev reward {:.4} -> {:.4} over {} epochs",
        train_config.algorithm.name(),
        devs.first().map(|r| r.mean_reward).unwrap_or(0.0),
        devs.last().map(|r| r.mean_reward).unwrap_or(0.0),
        devs.len()
    );
    Ok(())
}

fn cmd_reformulate(
    checkpoint: &Path,
    input: &Path,
    mode: &str,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<()> {
    let (vocab, model, _) = load_model(checkpoint)?;
    let train_config = match config_path {
        None => TrainConfig::supervised_defaults(),
        Some(p) => {
            ConfigFile::load(p)?.train_config(TrainConfig::supervised_defaults(), None, None)?
        }
    };
    let beam_width = match mode.split_once(':') {
        None if mode == "greedy" => None,
        Some(("beam", k)) => Some(
            k.parse::<usize>()
                .ok()
                .filter(|k| *k >= 1)
                .ok_or_else(|| anyhow!("invalid beam width in mode {mode:?}"))?,
        ),
        _ => bail!("invalid mode {mode:?}: expected greedy or beam:<k>"),
    };

    let body =
        fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    let mut rendered = String::new();
    for line in body.lines() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let row = vocab.encode(line, &train_config.prefix, train_config.max_len);
        let enc = bound.encode_query(&mut tape, &row.trimmed());
        match beam_width {
            None => {
                let traj = bound.greedy_decode(&mut tape, &enc, train_config.max_len);
                rendered.push_str(&vocab.decode(&traj.tokens));
                rendered.push('\n');
            }
            Some(k) => {
                let beams = bound.beam_search(&mut tape, &enc, k, train_config.max_len);
                for b in &beams {
                    rendered.push_str(&format!(
                        "{:.6}\t{}\n",
                        b.total_log_prob(),
                        vocab.decode(&b.tokens)
                    ));
                }
                // ranked list stays k lines per input even when the beam
                // exhausts early
                for _ in beams.len()..k {
                    rendered.push_str(&format!("{:.6}\t\n", f64::NEG_INFINITY));
                }
            }
        }
    }
    write_atomic(out, &rendered)?;
    println!("reformulate done: {} -> {}", input.display(), out.display());
    Ok(())
}

fn cmd_score_wf(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let model = WfModel::load(checkpoint)?;
    let body =
        fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    let mut rendered = String::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for line in body.lines() {
        let rating = wf_score(&model, line);
        rendered.push_str(&rating.to_string());
        rendered.push('\n');
        total += rating.value();
        count += 1;
    }
    write_atomic(out, &rendered)?;
    if count > 0 {
        println!("mean {:.4}", total / count as f64);
    } else {
        println!("mean 0.0000");
    }
    Ok(())
}

fn cmd_train_wf(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = ConfigFile::load(config_path)?;
    cfg.require(&["wf_data"])?;
    let defaults = WfConfig::default();
    let wf_config = WfConfig {
        vocab_size: cfg.parse_or("vocab_size", defaults.vocab_size)?,
        embed_dim: cfg.parse_or("embed_dim", defaults.embed_dim)?,
        hidden_dim: cfg.parse_or("hidden_dim", defaults.hidden_dim)?,
        max_len: cfg.parse_or("max_len", defaults.max_len)?,
        learning_rate: cfg.parse_or("learning_rate", defaults.learning_rate)?,
        batch_size: cfg.parse_or("batch_size", defaults.batch_size)?,
        max_epochs: cfg.parse_or("epochs", defaults.max_epochs)?,
        patience: cfg.parse_or("patience", defaults.patience)?,
        val_fraction: cfg.parse_or("val_fraction", defaults.val_fraction)?,
        seed: match seed {
            Some(s) => s,
            None => cfg.parse_or("seed", defaults.seed)?,
        },
    };
    let corpus = load_rated(&cfg.path("wf_data")?)?;
    let model = wf_train(&corpus, wf_config)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("wf.model"))?;
    println!(
        "train-wf done: {} epochs, best validation accuracy {:.4}",
        model.epochs_trained, model.best_val_accuracy
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    env_spec: &str,
    config_path: Option<&Path>,
    wf: Option<&Path>,
) -> Result<()> {
    let (vocab, model, _) = load_model(checkpoint)?;
    let (cfg, train_config) = match config_path {
        None => (None, TrainConfig::rl_defaults()),
        Some(p) => {
            let cfg = ConfigFile::load(p)?;
            let tc = cfg.train_config(TrainConfig::rl_defaults(), None, None)?;
            (Some(cfg), tc)
        }
    };
    let base = config_path
        .and_then(|p| p.parent())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let (env, env_items) = load_env(env_spec, &base)?;
    let data = match env_items {
        Some(items) => items,
        None => {
            let cfg = cfg.ok_or_else(|| {
                anyhow!("env {env_spec:?} provides no queries; pass --config with rl_data")
            })?;
            line_dataset(&cfg.path("rl_data")?)?
        }
    };
    let wf_model = wf.map(WfModel::load).transpose()?;
    let stats = evaluate(
        &model,
        &vocab,
        &train_config,
        env.as_ref(),
        &data.items,
        wf_model.as_ref(),
    );
    println!("mean_reward {:.6}", stats.mean_reward);
    println!("mean_fluency {:.6}", stats.mean_fluency);
    match stats.mean_wf {
        Some(w) => println!("mean_wf {w:.6}"),
        None => println!("mean_wf n/a"),
    }
    Ok(())
}
