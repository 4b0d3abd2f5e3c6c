//! Trainable 6-way well-formedness rating model, used as an automatic
//! sequence-level fluency judge, plus the synthetic rated-query corpus
//! generator that stands in for the human-labeled dataset.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use thiserror::Error;

use crate::model::{argmax, run_encoder, GruWeights, Param};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{sgd_step, DEFAULT_GRAD_CLIP};
use crate::rewards::RewardEnvironment;
use crate::serialize::{push_param, LineReader};
use crate::text::Vocabulary;

/// Task prefix attached to every input scored by the well-formedness model.
pub const WF_PREFIX: &str = "query wellformedness: ";

/// The six admissible ratings and their canonical serialized forms.
pub const RATING_VALUES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const RATING_STRINGS: [&str; 6] = ["0.0", "0.2", "0.4", "0.6", "0.8", "1.0"];

/// Binary well-formedness threshold.
pub const WF_BINARY_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum WfError {
    #[error("rated corpus must cover at least two classes")]
    SingleClass,
    #[error("invalid rating {0:?}: expected one of 0.0, 0.2, 0.4, 0.6, 0.8, 1.0")]
    BadRating(String),
    #[error("{path}:{line}: expected `text<TAB>rating`")]
    BadRecord { path: String, line: usize },
    #[error("well-formedness model file {path}: {reason}")]
    BadModelFile { path: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One of the six average human ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rating(u8);

impl Rating {
    pub fn from_index(index: usize) -> Rating {
        assert!(index < 6, "rating index out of range");
        Rating(index as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> f64 {
        RATING_VALUES[self.index()]
    }

    pub fn parse(s: &str) -> Result<Rating, WfError> {
        RATING_STRINGS
            .iter()
            .position(|r| *r == s)
            .map(Rating::from_index)
            .ok_or_else(|| WfError::BadRating(s.to_string()))
    }

    pub fn all() -> [Rating; 6] {
        [0, 1, 2, 3, 4, 5].map(Rating)
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(RATING_STRINGS[self.index()])
    }
}

/// Binary well-formedness: true iff the rating clears the 0.8 threshold.
pub fn wf_binary(rating: Rating) -> bool {
    rating.value() >= WF_BINARY_THRESHOLD
}

/// A text with its human-proxy well-formedness rating.
#[derive(Debug, Clone)]
pub struct RatedQuery {
    pub text: String,
    pub rating: Rating,
}

/// TSV store: `text <TAB> rating`, ratings serialized exactly as one of the
/// six canonical strings.
pub fn save_rated(queries: &[RatedQuery], path: &Path) -> Result<(), WfError> {
    let mut out = String::new();
    for q in queries {
        out.push_str(&format!("{}\t{}\n", q.text, q.rating));
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_rated(path: &Path) -> Result<Vec<RatedQuery>, WfError> {
    let body = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (text, rating) = line.split_once('\t').ok_or_else(|| WfError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        out.push(RatedQuery {
            text: text.to_string(),
            rating: Rating::parse(rating)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct WfConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for WfConfig {
    fn default() -> Self {
        WfConfig {
            vocab_size: 2000,
            embed_dim: 24,
            hidden_dim: 48,
            max_len: 20,
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Encoder weights plus the 6-way classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct WfParams {
    pub embedding: Param,
    pub encoder: GruWeights,
    pub head_w: Param,
    pub head_b: Param,
}

impl WfParams {
    fn init(vocab_size: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        // fan-in-scaled ranges: the flat small init leaves the pooled state
        // nearly input-independent for many epochs on a tiny model
        let mut rng = StdRng::seed_from_u64(seed);
        WfParams {
            embedding: Param::uniform(&[vocab_size, embed_dim], 0.5, &mut rng),
            encoder: GruWeights::init_scaled(embed_dim, hidden_dim, &mut rng),
            head_w: Param::uniform(&[6, hidden_dim], 1.0 / (hidden_dim as f64).sqrt(), &mut rng),
            head_b: Param::uniform(&[6], 0.05, &mut rng),
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embedding];
        out.extend(self.encoder.params());
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.encoder.params_mut());
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }
}

const WF_PARAM_NAMES: [&str; 12] = [
    "embedding",
    "enc.wz",
    "enc.uz",
    "enc.bz",
    "enc.wr",
    "enc.ur",
    "enc.br",
    "enc.wn",
    "enc.un",
    "enc.bn",
    "head_w",
    "head_b",
];

/// Well-formedness weights bound onto one tape.
struct BoundWf {
    embedding: Tensor,
    gru: crate::model::BoundGru,
    head_w: Tensor,
    head_b: Tensor,
    hidden_dim: usize,
}

impl BoundWf {
    fn bind(params: &WfParams, hidden_dim: usize, tape: &mut Tape) -> Self {
        let embedding = tape.leaf(params.embedding.data.clone(), &params.embedding.shape);
        let gru = params.encoder.bind(tape);
        let head_w = tape.leaf(params.head_w.data.clone(), &params.head_w.shape);
        let head_b = tape.leaf(params.head_b.data.clone(), &params.head_b.shape);
        BoundWf {
            embedding,
            gru,
            head_w,
            head_b,
            hidden_dim,
        }
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![self.embedding];
        out.extend(self.gru.tensors());
        out.extend([self.head_w, self.head_b]);
        out
    }

    /// Class distribution over the six ratings for one encoded row.
    fn class_dist(&self, tape: &mut Tape, ids: &[usize]) -> Tensor {
        let enc = run_encoder(tape, self.embedding, &self.gru, ids, self.hidden_dim);
        let logits = tape.matvec(self.head_w, enc.pooled);
        let logits_b = tape.add(logits, self.head_b);
        tape.softmax(logits_b)
    }
}

/// A trained 6-way rating model.
pub struct WfModel {
    pub vocab: Vocabulary,
    pub params: WfParams,
    pub config: WfConfig,
    pub epochs_trained: usize,
    pub best_val_accuracy: f64,
}

impl WfModel {
    /// Class probabilities for a text; they sum to 1 within 1e-9.
    pub fn class_probs(&self, text: &str) -> [f64; 6] {
        let mut tape = Tape::new();
        let bound = BoundWf::bind(&self.params, self.config.hidden_dim, &mut tape);
        let row = self.vocab.encode(text, WF_PREFIX, self.config.max_len);
        let dist = bound.class_dist(&mut tape, &row.ids[..row.len]);
        let mut out = [0.0; 6];
        out.copy_from_slice(tape.data(dist));
        out
    }

    /// Self-contained store: config, vocabulary and weights in one file.
    pub fn save(&self, path: &Path) -> Result<(), WfError> {
        let mut out = String::new();
        out.push_str("wfmodel v1\n");
        out.push_str(&format!(
            "config {} {} {} {}\n",
            self.vocab.size(),
            self.config.embed_dim,
            self.config.hidden_dim,
            self.config.max_len
        ));
        out.push_str(&format!("vocab {}\n", self.vocab.size()));
        for id in 0..self.vocab.size() {
            out.push_str(self.vocab.token_of(id));
            out.push('\n');
        }
        for (name, p) in WF_PARAM_NAMES.iter().zip(self.params.params()) {
            push_param(&mut out, name, p);
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WfModel, WfError> {
        let body = fs::read_to_string(path)?;
        let bad = |reason: String| WfError::BadModelFile {
            path: path.display().to_string(),
            reason,
        };
        let mut reader = LineReader::new(&body);
        let header = reader.next_line().map_err(&bad)?;
        if header != "wfmodel v1" {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let config_line = reader.next_line().map_err(&bad)?;
        let nums: Vec<usize> = config_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config line".into()))?
            .split_whitespace()
            .map(|n| {
                n.parse::<usize>()
                    .map_err(|_| bad(format!("bad config number {n:?}")))
            })
            .collect::<Result<_, _>>()?;
        if nums.len() != 4 {
            return Err(bad("config line needs 4 numbers".into()));
        }
        let (vocab_size, embed_dim, hidden_dim, max_len) = (nums[0], nums[1], nums[2], nums[3]);
        let vocab_line = reader.next_line().map_err(&bad)?;
        let n: usize = vocab_line
            .strip_prefix("vocab ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing vocab count".into()))?;
        if n != vocab_size {
            return Err(bad("vocab count disagrees with config".into()));
        }
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(reader.next_line().map_err(&bad)?.to_string());
        }
        let vocab = Vocabulary::from_raw_tokens(tokens).map_err(|e| bad(e.to_string()))?;

        let mut params = WfParams::init(vocab_size, embed_dim, hidden_dim, 0);
        for (name, slot) in WF_PARAM_NAMES.iter().zip(params.params_mut()) {
            let p = reader.read_param(name).map_err(&bad)?;
            if p.shape != slot.shape {
                return Err(bad(format!(
                    "param {name:?} has unexpected shape {:?}",
                    p.shape
                )));
            }
            *slot = p;
        }
        let config = WfConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
            max_len,
            ..WfConfig::default()
        };
        Ok(WfModel {
            vocab,
            params,
            config,
            epochs_trained: 0,
            best_val_accuracy: f64::NAN,
        })
    }
}

/// Argmax class of a trained model, rendered as a [`Rating`]. Deterministic.
pub fn wf_score(model: &WfModel, text: &str) -> Rating {
    Rating::from_index(argmax(&model.class_probs(text)))
}

/// Trains the 6-way classifier with cross-entropy; early-stops when
/// validation accuracy has not improved for `patience` epochs, capped at
/// `max_epochs`. Returns the best-validation snapshot.
pub fn wf_train(corpus: &[RatedQuery], config: WfConfig) -> Result<WfModel, WfError> {
    let mut classes_seen = [false; 6];
    for q in corpus {
        classes_seen[q.rating.index()] = true;
    }
    if classes_seen.iter().filter(|c| **c).count() < 2 {
        return Err(WfError::SingleClass);
    }

    let texts: Vec<&str> = corpus.iter().map(|q| q.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, config.vocab_size).expect("nonempty corpus");
    let encoded: Vec<Vec<usize>> = corpus
        .iter()
        .map(|q| {
            let row = vocab.encode(&q.text, WF_PREFIX, config.max_len);
            row.ids[..row.len].to_vec()
        })
        .collect();

    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let val_len =
        ((corpus.len() as f64 * config.val_fraction) as usize).clamp(1, corpus.len() - 1);
    let (val_idx, train_idx) = order.split_at(val_len);

    let mut params = WfParams::init(
        vocab.size(),
        config.embed_dim,
        config.hidden_dim,
        config.seed,
    );
    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    let mut train: Vec<usize> = train_idx.to_vec();

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = BoundWf::bind(&params, config.hidden_dim, &mut tape);
            let mut nlls = Vec::with_capacity(batch.len());
            for &i in batch {
                let dist = bound.class_dist(&mut tape, &encoded[i]);
                let lp = tape.log_prob_gather(dist, corpus[i].rating.index());
                nlls.push(tape.affine(lp, -1.0, 0.0));
            }
            let all = tape.concat(&nlls);
            let total = tape.sum(all);
            let loss = tape.affine(total, 1.0 / batch.len() as f64, 0.0);
            tape.backward(loss);
            sgd_step(
                &tape,
                &bound.tensors(),
                params.params_mut(),
                config.learning_rate,
                DEFAULT_GRAD_CLIP,
            );
        }

        let acc = split_accuracy(&params, config, &encoded, corpus, val_idx);
        if acc > best_acc {
            best_acc = acc;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    Ok(WfModel {
        vocab,
        params: best,
        config,
        epochs_trained: epochs_run,
        best_val_accuracy: best_acc,
    })
}

fn split_accuracy(
    params: &WfParams,
    config: WfConfig,
    encoded: &[Vec<usize>],
    corpus: &[RatedQuery],
    idx: &[usize],
) -> f64 {
    let mut hits = 0;
    for &i in idx {
        let mut tape = Tape::new();
        let bound = BoundWf::bind(params, config.hidden_dim, &mut tape);
        let dist = bound.class_dist(&mut tape, &encoded[i]);
        if argmax(tape.data(dist)) == corpus[i].rating.index() {
            hits += 1;
        }
    }
    hits as f64 / idx.len() as f64
}

/// Per-class evaluation in the shape of the rating-model accuracy table:
/// class, count, accuracy, mean absolute difference; plus binary accuracy
/// at the 0.8 threshold and the dataset's mean predicted score.
#[derive(Debug, Clone)]
pub struct WfReport {
    pub classes: [ClassStats; 6],
    pub binary_accuracy: f64,
    pub mean_score: f64,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClassStats {
    pub count: usize,
    pub accuracy: f64,
    pub mean_abs_diff: f64,
}

impl WfReport {
    /// Plain-text table, one row per score category.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("score_category\tcount\taccuracy\tavg_abs_diff\n");
        for (i, c) in self.classes.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\n",
                RATING_STRINGS[i], c.count, c.accuracy, c.mean_abs_diff
            ));
        }
        out.push_str(&format!("binary_accuracy\t{:.4}\n", self.binary_accuracy));
        out.push_str(&format!("mean_score\t{:.4}\n", self.mean_score));
        out
    }
}

pub fn wf_report(model: &WfModel, dataset: &[RatedQuery]) -> WfReport {
    assert!(!dataset.is_empty(), "wf_report: empty dataset");
    let mut counts = [0usize; 6];
    let mut hits = [0usize; 6];
    let mut abs_diff = [0.0f64; 6];
    let mut binary_hits = 0usize;
    let mut score_sum = 0.0;
    for q in dataset {
        let predicted = wf_score(model, &q.text);
        let gold = q.rating;
        counts[gold.index()] += 1;
        if predicted == gold {
            hits[gold.index()] += 1;
        }
        abs_diff[gold.index()] += (predicted.value() - gold.value()).abs();
        if wf_binary(predicted) == wf_binary(gold) {
            binary_hits += 1;
        }
        score_sum += predicted.value();
    }
    let mut classes = [ClassStats::default(); 6];
    for i in 0..6 {
        classes[i] = ClassStats {
            count: counts[i],
            accuracy: if counts[i] > 0 {
                hits[i] as f64 / counts[i] as f64
            } else {
                0.0
            },
            mean_abs_diff: if counts[i] > 0 {
                abs_diff[i] / counts[i] as f64
            } else {
                0.0
            },
        };
    }
    WfReport {
        classes,
        binary_accuracy: binary_hits as f64 / dataset.len() as f64,
        mean_score: score_sum / dataset.len() as f64,
        total: dataset.len(),
    }
}

/// Mean predicted score over raw texts (the reformulation-quality statistic).
pub fn mean_wf_score<S: AsRef<str>>(model: &WfModel, texts: &[S]) -> f64 {
    assert!(!texts.is_empty(), "mean_wf_score: empty input");
    texts
        .iter()
        .map(|t| wf_score(model, t.as_ref()).value())
        .sum::<f64>()
        / texts.len() as f64
}

/// A trained rating model acting as a reward environment: the reward for a
/// reformulation is its predicted well-formedness score.
pub struct WfEnvironment {
    pub model: WfModel,
}

impl RewardEnvironment for WfEnvironment {
    fn reward(&self, reformulation: &str, _query_id: &str) -> f64 {
        wf_score(&self.model, reformulation).value()
    }
}

// ---------------------------------------------------------------------------
// Synthetic rated corpus
// ---------------------------------------------------------------------------

const SUBJECTS: [&str; 10] = [
    "capital", "price", "height", "name", "color", "size", "owner", "age", "weight", "history",
];
const OBJECTS: [&str; 10] = [
    "france", "tokyo", "everest", "jupiter", "gold", "oxygen", "china", "brazil", "egypt", "texas",
];
const VERBS: [&str; 8] = [
    "find", "fix", "open", "close", "build", "clean", "cook", "repair",
];
const NOUNS: [&str; 8] = [
    "account", "bicycle", "garden", "engine", "ticket", "recipe", "laptop", "printer",
];
const FUNCTION_WORDS: [&str; 6] = ["the", "a", "of", "is", "do", "i"];
// Tier markers: mildly noisy fillers for 0.2, word-salad fillers for 0.0.
const JUNK_MILD: [&str; 3] = ["uh", "um", "hmm"];
const JUNK_HEAVY: [&str; 3] = ["zzz", "grr", "bingo"];

/// A clean, well-formed template question ending in "?".
pub fn clean_question(rng: &mut StdRng) -> Vec<String> {
    let kind = rng.random_range(0..3);
    let text = match kind {
        0 => {
            let wh = if rng.random_range(0..2) == 0 {
                "what is"
            } else {
                "where is"
            };
            format!(
                "{wh} the {} of {} ?",
                SUBJECTS[rng.random_range(0..SUBJECTS.len())],
                OBJECTS[rng.random_range(0..OBJECTS.len())]
            )
        }
        1 => format!(
            "how do i {} a {} ?",
            VERBS[rng.random_range(0..VERBS.len())],
            NOUNS[rng.random_range(0..NOUNS.len())]
        ),
        _ => format!(
            "why does the {} of {} matter ?",
            SUBJECTS[rng.random_range(0..SUBJECTS.len())],
            OBJECTS[rng.random_range(0..OBJECTS.len())]
        ),
    };
    text.split(' ').map(String::from).collect()
}

fn drop_one_function_word(toks: &mut Vec<String>, rng: &mut StdRng) {
    let positions: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| FUNCTION_WORDS.contains(&t.as_str()))
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return;
    }
    toks.remove(positions[rng.random_range(0..positions.len())]);
}

/// Applies the noise transformation of one rating tier to a clean question.
///
/// Mid tiers deliberately overlap their better-looking neighbor some of the
/// time (raters disagree most about middling queries), so a classifier can
/// pin down the extremes much more reliably than the middle.
pub fn noise_to_tier(clean: &[String], rating: Rating, rng: &mut StdRng) -> Vec<String> {
    let mut toks: Vec<String> = clean.to_vec();
    match rating.index() {
        5 => {}
        4 => {
            // usually drops the question mark; sometimes indistinguishable
            // from a clean question
            if rng.random_range(0..100) < 75 {
                toks.pop();
            }
        }
        3 => {
            toks.pop();
            // sometimes nothing else is wrong, overlapping tier 0.8
            if rng.random_range(0..100) < 75 {
                drop_one_function_word(&mut toks, rng);
            }
        }
        2 => {
            toks.pop();
            drop_one_function_word(&mut toks, rng);
            // usually an inverted opening ("is what the ..."); a quarter of
            // the tier looks exactly like 0.6
            if rng.random_range(0..100) < 75 {
                toks.swap(0, 1);
            }
        }
        1 => {
            // a quarter of the tier is word salad indistinguishable from 0.0
            if rng.random_range(0..100) < 25 {
                word_salad(&mut toks, rng);
            } else {
                toks.pop();
                toks.remove(0); // lose the wh word
                let len = toks.len();
                toks[..len / 2].shuffle(rng);
                let junk = JUNK_MILD[rng.random_range(0..JUNK_MILD.len())];
                let at = rng.random_range(0..=toks.len());
                toks.insert(at, junk.to_string());
            }
        }
        _ => word_salad(&mut toks, rng),
    }
    toks
}

/// The tier-0.0 recipe: full shuffle, heavy junk marker, duplicated word.
fn word_salad(toks: &mut Vec<String>, rng: &mut StdRng) {
    toks.pop();
    toks.remove(0);
    toks.shuffle(rng);
    let junk = JUNK_HEAVY[rng.random_range(0..JUNK_HEAVY.len())];
    let at = rng.random_range(0..=toks.len());
    toks.insert(at, junk.to_string());
    // duplicated word: the repetition artifact of bad queries
    let dup = toks[rng.random_range(0..toks.len())].clone();
    toks.push(dup);
}

/// Seeded synthetic rated corpus: `n` items cycling through the six tiers.
pub fn generate_rated_corpus(n: usize, seed: u64) -> Vec<RatedQuery> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rating = Rating::from_index(i % 6);
        let clean = clean_question(&mut rng);
        let toks = noise_to_tier(&clean, rating, &mut rng);
        out.push(RatedQuery {
            text: toks.join(" "),
            rating,
        });
    }
    out
}

/// Seeded denoising pairs: (noised tier <= 0.4 question, its clean form).
pub fn generate_denoise_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clean = clean_question(&mut rng);
        let tier = Rating::from_index(i % 3); // 0.0, 0.2 or 0.4
        let noised = noise_to_tier(&clean, tier, &mut rng);
        out.push((noised.join(" "), clean.join(" ")));
    }
    out
}
