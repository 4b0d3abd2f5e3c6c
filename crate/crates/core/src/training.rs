//! Supervised and RL fine-tuning loops with pluggable algorithm and reward
//! environment, greedy-decode evaluation, checkpointing, and reward-curve
//! logging.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use thiserror::Error;

use crate::model::{ModelConfig, Seq2SeqParams, Trajectory, PARAM_NAMES};
use crate::numerics::Tape;
use crate::objectives::{
    critic_baseline, critic_update, entropy_regularizer, mean_baseline, mixed_objective, mle_loss,
    reinforce_surrogate_loss, self_critical_baseline, sgd_step, unlikelihood_loss, AdvantageBatch,
    CriticParams, CRITIC_PARAM_NAMES,
};
use crate::rewards::{composite_reward, fluency_reward, RewardEnvironment};
use crate::serialize::{push_param, LineReader};
use crate::text::Vocabulary;
use crate::wellformedness::{wf_score, WfModel};

pub const CHECKPOINT_HEADER: &str = "reformulator-checkpoint v1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corpus {path}: line {line} expected `source<TAB>target`")]
    BadPair { path: String, line: usize },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error(
        "checkpoint {path}: vocabulary hash mismatch (file {file:016x}, expected {expected:016x})"
    )]
    VocabHashMismatch {
        path: String,
        file: u64,
        expected: u64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The RL algorithm driving a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// REINFORCE with the mean-of-batch baseline and entropy regularizer.
    Pg,
    /// Actor-critic: a two-layer critic on the encoder pooled state.
    Ac,
    /// Self-critical: the greedy decode's reward as the baseline.
    Sc,
    /// Unlikelihood-augmented REINFORCE with the mean baseline.
    Ul,
    /// Mixed PG + SC objectives, fluency folded into the reward.
    Mixed,
}

pub const ALGORITHM_NAMES: [&str; 5] = ["pg", "ac", "sc", "ul", "mixed"];

impl Algorithm {
    pub fn parse(s: &str) -> Result<Algorithm, TrainError> {
        match s.to_lowercase().as_str() {
            "pg" => Ok(Algorithm::Pg),
            "ac" => Ok(Algorithm::Ac),
            "sc" => Ok(Algorithm::Sc),
            "ul" => Ok(Algorithm::Ul),
            "mixed" => Ok(Algorithm::Mixed),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown algorithm {other:?}; valid names: {}",
                ALGORITHM_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pg => "pg",
            Algorithm::Ac => "ac",
            Algorithm::Sc => "sc",
            Algorithm::Ul => "ul",
            Algorithm::Mixed => "mixed",
        }
    }
}

/// Hyperparameters shared by the supervised and RL trainers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub max_len: usize,
    pub algorithm: Algorithm,
    pub entropy_weight: f64,
    pub unlikelihood_alpha: f64,
    pub fluency_weight: f64,
    pub mixed_pg_weight: f64,
    pub mixed_sc_weight: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub prefix: String,
    pub temperature: f64,
    pub val_fraction: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    /// Defaults for the supervised stage.
    pub fn supervised_defaults() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            max_len: crate::text::DEFAULT_MAX_LEN,
            algorithm: Algorithm::Pg,
            entropy_weight: crate::objectives::DEFAULT_ENTROPY_WEIGHT,
            unlikelihood_alpha: crate::objectives::DEFAULT_UNLIKELIHOOD_ALPHA,
            fluency_weight: 0.0,
            mixed_pg_weight: 0.5,
            mixed_sc_weight: 0.5,
            epochs: 10,
            patience: 5,
            seed: 0,
            prefix: "paraphrase: ".to_string(),
            temperature: 1.0,
            val_fraction: 0.1,
            grad_clip: crate::objectives::DEFAULT_GRAD_CLIP,
        }
    }

    /// Defaults for the RL stage; the mixed algorithm additionally turns the
    /// fluency reward on (see [`crate::rewards::DEFAULT_FLUENCY_WEIGHT`]).
    pub fn rl_defaults() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            ..Self::supervised_defaults()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.algorithm == Algorithm::Ac && self.critic_learning_rate <= 0.0 {
            return bad("algorithm ac requires a positive critic_learning_rate");
        }
        if self.entropy_weight < 0.0 || self.unlikelihood_alpha < 0.0 || self.fluency_weight < 0.0 {
            return bad("regularizer weights must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
        })
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub epoch: usize,
    pub split: Split,
    pub mean_reward: f64,
    pub mean_loss: f64,
    pub mean_len: f64,
    pub mean_fluency: f64,
    pub seconds: f64,
}

/// Per-epoch training curves; the data behind dev-set reward plots.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: RunRecord) {
        self.records.push(record);
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,split,mean_reward,mean_loss,mean_len,mean_fluency,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.split, r.mean_reward, r.mean_loss, r.mean_len, r.mean_fluency, r.seconds
            ));
        }
        out
    }

    /// Writes the CSV via a temp file so failures leave no partial output.
    pub fn emit_curves(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_csv())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn dev_records(&self) -> Vec<&RunRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Dev)
            .collect()
    }

    /// All fields except wall-clock seconds, for determinism comparisons.
    pub fn comparable(&self) -> Vec<(usize, String, f64, f64, f64, f64)> {
        self.records
            .iter()
            .map(|r| {
                (
                    r.epoch,
                    r.split.to_string(),
                    r.mean_reward,
                    r.mean_loss,
                    r.mean_len,
                    r.mean_fluency,
                )
            })
            .collect()
    }
}

/// A supervised (source, target) corpus.
#[derive(Debug, Clone, Default)]
pub struct PairCorpus {
    pub pairs: Vec<(String, String)>,
}

impl PairCorpus {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        PairCorpus { pairs }
    }

    /// TSV: `source <TAB> target`, one pair per line.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let body = fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line.split_once('\t').ok_or_else(|| TrainError::BadPair {
                path: path.display().to_string(),
                line: i + 1,
            })?;
            pairs.push((src.to_string(), tgt.to_string()));
        }
        Ok(PairCorpus { pairs })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::new();
        for (s, t) in &self.pairs {
            out.push_str(&format!("{s}\t{t}\n"));
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn texts(&self) -> Vec<String> {
        self.pairs
            .iter()
            .flat_map(|(s, t)| [s.clone(), t.clone()])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One supervised stage: a corpus plus its epoch budget.
#[derive(Debug, Clone)]
pub struct SftStage {
    pub pairs: PairCorpus,
    pub epochs: usize,
}

/// Queries with environment ids for the RL stage.
#[derive(Debug, Clone, Default)]
pub struct RlDataset {
    pub items: Vec<(String, String)>, // (query id, query text)
}

impl RlDataset {
    pub fn new(items: Vec<(String, String)>) -> Self {
        RlDataset { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Deterministic train/dev split; dev gets at least one item.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (RlDataset, RlDataset) {
        assert!(self.items.len() >= 2, "need at least two items to split");
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = StdRng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let val_len =
            ((self.items.len() as f64 * val_fraction) as usize).clamp(1, self.items.len() - 1);
        let (val, train) = order.split_at(val_len);
        (
            RlDataset::new(train.iter().map(|&i| self.items[i].clone()).collect()),
            RlDataset::new(val.iter().map(|&i| self.items[i].clone()).collect()),
        )
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Greedy-decode statistics over a dataset split. Side-effect free and
/// deterministic: repeated calls return identical numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean_reward: f64,
    pub mean_fluency: f64,
    pub mean_len: f64,
    pub mean_entropy: f64,
    pub mean_wf: Option<f64>,
}

/// Evaluates greedy decodes of every item against the environment; also
/// scores the decodes with a well-formedness model when one is given.
pub fn evaluate(
    model: &Seq2SeqParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    env: &dyn RewardEnvironment,
    items: &[(String, String)],
    wf: Option<&WfModel>,
) -> EvalStats {
    let mut rewards = Vec::with_capacity(items.len());
    let mut fluencies = Vec::with_capacity(items.len());
    let mut lens = Vec::with_capacity(items.len());
    let mut entropies = Vec::new();
    let mut wf_scores = Vec::new();
    for (id, query) in items {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let row = vocab.encode(query, &config.prefix, config.max_len);
        let enc = bound.encode_query(&mut tape, &row.trimmed());
        let traj = bound.greedy_decode(&mut tape, &enc, config.max_len);
        let text = vocab.decode(&traj.tokens);
        rewards.push(env.reward(&text, id));
        fluencies.push(fluency_reward(&traj));
        lens.push(traj.len() as f64);
        for dist in &traj.step_dists {
            let h: f64 = tape
                .data(*dist)
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            entropies.push(h);
        }
        if let Some(wf_model) = wf {
            wf_scores.push(wf_score(wf_model, &text).value());
        }
    }
    EvalStats {
        mean_reward: mean(&rewards),
        mean_fluency: mean(&fluencies),
        mean_len: mean(&lens),
        mean_entropy: mean(&entropies),
        mean_wf: if wf_scores.is_empty() {
            None
        } else {
            Some(mean(&wf_scores))
        },
    }
}

/// Exact-match rate of greedy decodes against target texts.
pub fn exact_match_rate(
    model: &Seq2SeqParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    pairs: &[(String, String)],
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(src, tgt)| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let row = vocab.encode(src, &config.prefix, config.max_len);
            let enc = bound.encode_query(&mut tape, &row.trimmed());
            let traj = bound.greedy_decode(&mut tape, &enc, config.max_len);
            vocab.decode(&traj.tokens) == crate::text::tokenize(tgt).join(" ")
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Mean fluency and length of greedy decodes over source texts.
fn greedy_stats(
    model: &Seq2SeqParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    sources: &[&String],
) -> (f64, f64) {
    let mut fl = Vec::with_capacity(sources.len());
    let mut lens = Vec::with_capacity(sources.len());
    for src in sources {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let row = vocab.encode(src, &config.prefix, config.max_len);
        let enc = bound.encode_query(&mut tape, &row.trimmed());
        let traj = bound.greedy_decode(&mut tape, &enc, config.max_len);
        fl.push(fluency_reward(&traj));
        lens.push(traj.len() as f64);
    }
    (mean(&fl), mean(&lens))
}

/// Supervised fine-tuning over sequential stages, minimizing the masked
/// cross-entropy by minibatch SGD. The per-epoch dev record logs loss,
/// exact-match rate (the reward column) and decode statistics; early stop is
/// patience-based on dev loss, per stage, restoring the stage's best weights.
pub fn train_supervised(
    config: &TrainConfig,
    stages: &[SftStage],
    model: &mut Seq2SeqParams,
    vocab: &Vocabulary,
) -> Result<RunLog, TrainError> {
    config.validate()?;
    if stages.iter().all(|s| s.pairs.is_empty()) {
        return Err(TrainError::InvalidConfig("no training pairs".into()));
    }
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut log = RunLog::default();
    let mut global_epoch = 0;

    for stage in stages {
        warn_on_unk_rate(&stage.pairs, vocab);
        let n = stage.pairs.len();
        if n < 2 {
            return Err(TrainError::InvalidConfig(
                "a stage needs at least two pairs".into(),
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let val_len = ((n as f64 * config.val_fraction) as usize).clamp(1, n - 1);
        let (val_idx, train_idx) = order.split_at(val_len);
        let dev_pairs: Vec<(String, String)> = val_idx
            .iter()
            .map(|&i| stage.pairs.pairs[i].clone())
            .collect();
        let train_pairs: Vec<(String, String)> = train_idx
            .iter()
            .map(|&i| stage.pairs.pairs[i].clone())
            .collect();

        let encoded: Vec<(crate::text::Row, crate::text::Row)> = train_pairs
            .iter()
            .map(|(s, t)| {
                (
                    vocab.encode(s, &config.prefix, config.max_len).trimmed(),
                    vocab.encode(t, "", config.max_len).trimmed(),
                )
            })
            .collect();

        let mut best = model.clone();
        let mut best_loss = f64::INFINITY;
        let mut best_epoch = 0;
        let mut train: Vec<usize> = (0..train_pairs.len()).collect();

        for epoch in 0..stage.epochs {
            train.shuffle(&mut rng);
            let mut batch_losses = Vec::new();
            for batch in train.chunks(config.batch_size) {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (src, tgt) = &encoded[i];
                    let enc = bound.encode_query(&mut tape, src);
                    let dists = bound.decode_teacher_forced(&mut tape, &enc, tgt);
                    losses.push(mle_loss(&mut tape, &dists, tgt));
                }
                let all = tape.concat(&losses);
                let total = tape.sum(all);
                let loss = tape.affine(total, 1.0 / batch.len() as f64, 0.0);
                batch_losses.push(tape.value(loss));
                tape.backward(loss);
                sgd_step(
                    &tape,
                    bound.tensors(),
                    model.params_mut(),
                    config.learning_rate,
                    config.grad_clip,
                );
            }

            // train record over a capped probe so epochs stay cheap
            let probe: Vec<(String, String)> = train_pairs.iter().take(128).cloned().collect();
            let train_em = exact_match_rate(model, vocab, config, &probe);
            let train_sources: Vec<&String> = probe.iter().map(|(s, _)| s).collect();
            let (train_fl, train_len) = greedy_stats(model, vocab, config, &train_sources);
            log.push(RunRecord {
                epoch: global_epoch,
                split: Split::Train,
                mean_reward: train_em,
                mean_loss: mean(&batch_losses),
                mean_len: train_len,
                mean_fluency: train_fl,
                seconds: started.elapsed().as_secs_f64(),
            });

            let dev_loss = dev_mle_loss(model, vocab, config, &dev_pairs);
            let dev_em = exact_match_rate(model, vocab, config, &dev_pairs);
            let dev_sources: Vec<&String> = dev_pairs.iter().map(|(s, _)| s).collect();
            let (dev_fl, dev_len) = greedy_stats(model, vocab, config, &dev_sources);
            log.push(RunRecord {
                epoch: global_epoch,
                split: Split::Dev,
                mean_reward: dev_em,
                mean_loss: dev_loss,
                mean_len: dev_len,
                mean_fluency: dev_fl,
                seconds: started.elapsed().as_secs_f64(),
            });
            global_epoch += 1;

            if dev_loss < best_loss {
                best_loss = dev_loss;
                best = model.clone();
                best_epoch = epoch;
            } else if epoch - best_epoch >= config.patience {
                break;
            }
        }
        *model = best;
    }
    debug_assert!(model.all_finite());
    Ok(log)
}

fn dev_mle_loss(
    model: &Seq2SeqParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    pairs: &[(String, String)],
) -> f64 {
    let mut losses = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s = vocab.encode(src, &config.prefix, config.max_len).trimmed();
        let t = vocab.encode(tgt, "", config.max_len).trimmed();
        let enc = bound.encode_query(&mut tape, &s);
        let dists = bound.decode_teacher_forced(&mut tape, &enc, &t);
        let loss = mle_loss(&mut tape, &dists, &t);
        losses.push(tape.value(loss));
    }
    mean(&losses)
}

fn warn_on_unk_rate(pairs: &PairCorpus, vocab: &Vocabulary) {
    let mut total = 0usize;
    let mut unk = 0usize;
    for (s, t) in &pairs.pairs {
        for tok in crate::text::tokenize(s)
            .iter()
            .chain(crate::text::tokenize(t).iter())
        {
            total += 1;
            if !vocab.contains(tok) {
                unk += 1;
            }
        }
    }
    if total > 0 && unk as f64 / total as f64 > 0.5 {
        eprintln!(
            "warning: corpus/vocabulary mismatch: {:.0}% of tokens map to <unk>",
            100.0 * unk as f64 / total as f64
        );
    }
}

/// RL fine-tuning. Per batch: sample a trajectory per query, ask the
/// environment for the terminal reward (optionally folding in the fluency
/// signal), build the configured baseline, apply the configured surrogate
/// loss plus the entropy term, and take one clipped SGD step. Greedy dev
/// evaluation runs every epoch with patience-based early stopping on the
/// dev reward; the best-dev weights are restored at the end.
///
/// Under the actor-critic algorithm the critic is updated on the batch
/// first and baselines come from the updated critic.
pub fn train_rl(
    config: &TrainConfig,
    env: &dyn RewardEnvironment,
    model: &mut Seq2SeqParams,
    mut critic: Option<&mut CriticParams>,
    vocab: &Vocabulary,
    data: &RlDataset,
) -> Result<RunLog, TrainError> {
    config.validate()?;
    if data.len() < 2 {
        return Err(TrainError::InvalidConfig(
            "RL dataset needs at least two items".into(),
        ));
    }
    if config.algorithm == Algorithm::Ac && critic.is_none() {
        return Err(TrainError::InvalidConfig(
            "algorithm ac requires a critic".into(),
        ));
    }
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let (train, dev) = data.split(config.val_fraction, config.seed);
    let mut log = RunLog::default();

    let mut best = model.clone();
    let mut best_reward = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_rewards = Vec::new();
        let mut epoch_losses = Vec::new();
        let mut epoch_lens = Vec::new();
        let mut epoch_fluency = Vec::new();
        let needs_greedy = matches!(config.algorithm, Algorithm::Sc | Algorithm::Mixed);

        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut trajs: Vec<Trajectory> = Vec::with_capacity(batch.len());
            let mut rewards = Vec::with_capacity(batch.len());
            let mut greedy_rewards = Vec::with_capacity(batch.len());
            let mut pooled_states: Vec<Vec<f64>> = Vec::with_capacity(batch.len());

            for &i in batch {
                let (id, query) = &train.items[i];
                let row = vocab
                    .encode(query, &config.prefix, config.max_len)
                    .trimmed();
                let enc = bound.encode_query(&mut tape, &row);
                pooled_states.push(tape.data(enc.pooled).to_vec());

                let traj = bound.sample_trajectory(
                    &mut tape,
                    &enc,
                    config.max_len,
                    config.temperature,
                    &mut rng,
                );
                let text = vocab.decode(&traj.tokens);
                let base = env.reward(&text, id);
                let reward = if config.fluency_weight > 0.0 {
                    composite_reward(base, fluency_reward(&traj), config.fluency_weight)
                } else {
                    base
                };
                rewards.push(reward);
                epoch_rewards.push(reward);
                epoch_lens.push(traj.len() as f64);
                epoch_fluency.push(fluency_reward(&traj));

                if needs_greedy {
                    let greedy = bound.greedy_decode(&mut tape, &enc, config.max_len);
                    let gtext = vocab.decode(&greedy.tokens);
                    let gbase = env.reward(&gtext, id);
                    let greward = if config.fluency_weight > 0.0 {
                        composite_reward(gbase, fluency_reward(&greedy), config.fluency_weight)
                    } else {
                        gbase
                    };
                    greedy_rewards.push(greward);
                }
                trajs.push(traj);
            }

            let advantages = match config.algorithm {
                Algorithm::Pg | Algorithm::Ul | Algorithm::Mixed => mean_baseline(&rewards),
                Algorithm::Sc => self_critical_baseline(&rewards, &greedy_rewards),
                Algorithm::Ac => {
                    let c = critic.as_deref_mut().expect("validated above");
                    critic_update(c, &pooled_states, &rewards, config.critic_learning_rate);
                    let baselines = critic_baseline(c, &pooled_states);
                    AdvantageBatch::new(
                        rewards.clone(),
                        baselines,
                        crate::objectives::BaselineKind::Critic,
                    )
                }
            };
            for (traj, (r, a)) in trajs
                .iter_mut()
                .zip(rewards.iter().zip(&advantages.advantages))
            {
                traj.reward = Some(*r);
                traj.advantage = Some(*a);
            }

            let policy_loss = match config.algorithm {
                Algorithm::Pg | Algorithm::Ac | Algorithm::Sc => {
                    reinforce_surrogate_loss(&mut tape, &trajs, &advantages)
                }
                Algorithm::Ul => {
                    let b = trajs.len() as f64;
                    let mut terms = Vec::with_capacity(trajs.len());
                    for (traj, adv) in trajs.iter().zip(&advantages.advantages) {
                        let ul = unlikelihood_loss(
                            &mut tape,
                            &traj.step_dists,
                            &traj.tokens,
                            config.unlikelihood_alpha,
                        );
                        terms.push(tape.affine(ul, adv / b, 0.0));
                    }
                    let all = tape.concat(&terms);
                    tape.sum(all)
                }
                Algorithm::Mixed => {
                    let sc_adv = self_critical_baseline(&rewards, &greedy_rewards);
                    let pg_loss = reinforce_surrogate_loss(&mut tape, &trajs, &advantages);
                    let sc_loss = reinforce_surrogate_loss(&mut tape, &trajs, &sc_adv);
                    mixed_objective(
                        &mut tape,
                        pg_loss,
                        sc_loss,
                        config.mixed_pg_weight,
                        config.mixed_sc_weight,
                    )
                }
            };

            // entropy bonus over every sampled step, scaled per sample
            let step_dists: Vec<crate::numerics::Tensor> = trajs
                .iter()
                .flat_map(|t| t.step_dists.iter().copied())
                .collect();
            let mask = vec![true; step_dists.len()];
            let ent = entropy_regularizer(
                &mut tape,
                &step_dists,
                &mask,
                config.entropy_weight / trajs.len() as f64,
            );
            let total_loss = tape.add(policy_loss, ent);
            epoch_losses.push(tape.value(total_loss));
            tape.backward(total_loss);
            sgd_step(
                &tape,
                bound.tensors(),
                model.params_mut(),
                config.learning_rate,
                config.grad_clip,
            );
        }

        log.push(RunRecord {
            epoch,
            split: Split::Train,
            mean_reward: mean(&epoch_rewards),
            mean_loss: mean(&epoch_losses),
            mean_len: mean(&epoch_lens),
            mean_fluency: mean(&epoch_fluency),
            seconds: started.elapsed().as_secs_f64(),
        });

        let stats = evaluate(model, vocab, config, env, &dev.items, None);
        log.push(RunRecord {
            epoch,
            split: Split::Dev,
            mean_reward: stats.mean_reward,
            mean_loss: mean(&epoch_losses),
            mean_len: stats.mean_len,
            mean_fluency: stats.mean_fluency,
            seconds: started.elapsed().as_secs_f64(),
        });

        if stats.mean_reward > best_reward {
            best_reward = stats.mean_reward;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    *model = best;
    debug_assert!(model.all_finite());
    Ok(log)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Versioned textual dump of shapes, values (bit-exact hex), the vocabulary
/// hash, and a whole-file checksum. Written via temp-file-then-rename.
pub fn checkpoint_save(
    path: &Path,
    model: &Seq2SeqParams,
    critic: Option<&CriticParams>,
    vocab: &Vocabulary,
) -> Result<(), TrainError> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("vocab_hash {:016x}\n", vocab.hash()));
    out.push_str(&format!(
        "model {} {} {}\n",
        model.config.vocab_size, model.config.embed_dim, model.config.hidden_dim
    ));
    for (name, p) in model.named_params() {
        push_param(&mut out, name, p);
    }
    match critic {
        None => out.push_str("critic none\n"),
        Some(c) => {
            out.push_str(&format!("critic {} {}\n", c.input_dim, c.hidden_dim));
            for (name, p) in c.named_params() {
                push_param(&mut out, name, p);
            }
        }
    }
    out.push_str(&format!("checksum {:016x}\n", fnv1a(out.as_bytes())));
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, verifying the version, the whole-file checksum and
/// the vocabulary hash against `vocab`.
pub fn checkpoint_load(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<(Seq2SeqParams, Option<CriticParams>), TrainError> {
    let body = fs::read_to_string(path)?;
    let bad = |reason: String| TrainError::BadCheckpoint {
        path: path.display().to_string(),
        reason,
    };

    // checksum covers everything before its own line
    let trimmed = body.trim_end_matches('\n');
    let (head, checksum_line) = trimmed
        .rsplit_once('\n')
        .ok_or_else(|| bad("truncated file".into()))?;
    let expected = checksum_line
        .strip_prefix("checksum ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| bad("missing checksum".into()))?;
    let mut covered = String::with_capacity(head.len() + 1);
    covered.push_str(head);
    covered.push('\n');
    if fnv1a(covered.as_bytes()) != expected {
        return Err(bad("checksum mismatch: file was modified".into()));
    }

    let mut reader = LineReader::new(head);
    let header = reader.next_line().map_err(&bad)?;
    if header != CHECKPOINT_HEADER {
        return Err(bad(format!("unsupported version header {header:?}")));
    }
    let hash_line = reader.next_line().map_err(&bad)?;
    let file_hash = hash_line
        .strip_prefix("vocab_hash ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| bad("missing vocab_hash".into()))?;
    if file_hash != vocab.hash() {
        return Err(TrainError::VocabHashMismatch {
            path: path.display().to_string(),
            file: file_hash,
            expected: vocab.hash(),
        });
    }

    let model_line = reader.next_line().map_err(&bad)?;
    let dims: Vec<usize> = model_line
        .strip_prefix("model ")
        .ok_or_else(|| bad("missing model line".into()))?
        .split_whitespace()
        .map(|n| {
            n.parse::<usize>()
                .map_err(|_| bad(format!("bad model dim {n:?}")))
        })
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(bad("model line needs 3 dims".into()));
    }
    let config = ModelConfig::with_dims(dims[0], dims[1], dims[2]);
    if config.vocab_size != vocab.size() {
        return Err(bad(format!(
            "model vocab size {} does not match vocabulary size {}",
            config.vocab_size,
            vocab.size()
        )));
    }
    let mut model = Seq2SeqParams::init(config, 0);
    for (name, slot) in PARAM_NAMES.iter().zip(model.params_mut()) {
        let p = reader.read_param(name).map_err(&bad)?;
        if p.shape != slot.shape {
            return Err(bad(format!(
                "param {name:?} has unexpected shape {:?}",
                p.shape
            )));
        }
        *slot = p;
    }

    let critic_line = reader.next_line().map_err(&bad)?;
    let critic = if critic_line == "critic none" {
        None
    } else {
        let dims: Vec<usize> = critic_line
            .strip_prefix("critic ")
            .ok_or_else(|| bad("missing critic line".into()))?
            .split_whitespace()
            .map(|n| {
                n.parse::<usize>()
                    .map_err(|_| bad(format!("bad critic dim {n:?}")))
            })
            .collect::<Result<_, _>>()?;
        if dims.len() != 2 {
            return Err(bad("critic line needs 2 dims".into()));
        }
        let mut c = CriticParams::init(dims[0], dims[1], 0);
        for (name, slot) in CRITIC_PARAM_NAMES.iter().zip(c.params_mut()) {
            let p = reader.read_param(name).map_err(&bad)?;
            if p.shape != slot.shape {
                return Err(bad(format!(
                    "param {name:?} has unexpected shape {:?}",
                    p.shape
                )));
            }
            *slot = p;
        }
        Some(c)
    };
    Ok((model, critic))
}
