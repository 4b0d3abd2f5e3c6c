//! Reward functions and simulated black-box environments: token-level F1
//! question answering, the fluency metric, composite rewards, and
//! hierarchical intent classification.
//!
//! Environments are immutable after construction; reward calls are pure.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::Trajectory;
use crate::text::tokenize;

/// Default weight of the fluency signal in [`composite_reward`].
pub const DEFAULT_FLUENCY_WEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("record {id}: gold answer {answer:?} does not occur verbatim in its context")]
    AnswerNotInContext { id: String, answer: String },
    #[error("record {id}: empty gold answer")]
    EmptyAnswer { id: String },
    #[error("{path}:{line}: expected {expected}, got {got} tab-separated fields")]
    BadRecord {
        path: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid hierarchical label {0:?}: expected \"parent/child\" with nonempty parent")]
    BadLabel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Maps a decoded reformulation and its query id to a scalar reward in `[0,1]`,
/// produced exactly once per trajectory at termination. Environments are
/// immutable after construction, so reward calls for different trajectories
/// are safe to issue concurrently.
pub trait RewardEnvironment: Send + Sync {
    fn reward(&self, reformulation: &str, query_id: &str) -> f64;
}

/// Token-level F1 between two answer strings. Tokens are lowercased
/// whitespace words with set semantics; returns 0 when both precision and
/// recall are 0. Symmetric in its arguments.
pub fn token_f1(gold: &str, predicted: &str) -> f64 {
    let gold_set: HashSet<String> = tokenize(gold).into_iter().collect();
    let pred_set: HashSet<String> = tokenize(predicted).into_iter().collect();
    if gold_set.is_empty() || pred_set.is_empty() {
        return 0.0;
    }
    let common = gold_set.intersection(&pred_set).count() as f64;
    let precision = common / pred_set.len() as f64;
    let recall = common / gold_set.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (precision * recall) / (precision + recall)
    }
}

/// Fluency metric `R_f = 1 / (1 + H)` where `H` is the negative mean
/// per-step log-probability of the trajectory. Lies in (0, 1]; equals 1
/// exactly when every step had probability 1.
pub fn fluency_reward(trajectory: &Trajectory) -> f64 {
    assert!(
        !trajectory.log_probs.is_empty(),
        "fluency_reward: empty trajectory"
    );
    let mean_lp = trajectory.log_probs.iter().sum::<f64>() / trajectory.log_probs.len() as f64;
    let h = -mean_lp;
    1.0 / (1.0 + h)
}

/// Folds the fluency signal into a base reward:
/// `(base + w_f * fluency) / (1 + w_f)`, staying within `[0,1]`.
pub fn composite_reward(base: f64, fluency: f64, fluency_weight: f64) -> f64 {
    assert!(
        fluency_weight >= 0.0,
        "composite_reward: weight must be nonnegative"
    );
    (base + fluency_weight * fluency) / (1.0 + fluency_weight)
}

/// One QA record: the environment can answer questions about `context`,
/// and `answer` occurs verbatim within it.
#[derive(Debug, Clone)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub context: String,
}

/// Simulated extractive QA environment rewarding token-level F1 against the
/// gold answer. The answerer is keyword-driven: gold-answer tokens act as
/// triggers, so a reformulation that mentions them pulls out the gold span.
pub struct QaEnvironment {
    records: Vec<QaRecord>,
    by_id: HashMap<String, usize>,
}

const TRIGGER_BONUS: f64 = 10.0;
const LENGTH_PENALTY: f64 = 0.01;

impl QaEnvironment {
    pub fn new(records: Vec<QaRecord>) -> Result<Self, RewardError> {
        let mut by_id = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            let answer_toks = tokenize(&rec.answer);
            if answer_toks.is_empty() {
                return Err(RewardError::EmptyAnswer { id: rec.id.clone() });
            }
            let context_toks = tokenize(&rec.context);
            if !contains_subsequence(&context_toks, &answer_toks) {
                return Err(RewardError::AnswerNotInContext {
                    id: rec.id.clone(),
                    answer: rec.answer.clone(),
                });
            }
            by_id.insert(rec.id.clone(), i);
        }
        Ok(QaEnvironment { records, by_id })
    }

    /// TSV: `id \t question \t answer \t context`, one record per line.
    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let body = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(RewardError::BadRecord {
                    path: path.display().to_string(),
                    line: i + 1,
                    expected: 4,
                    got: fields.len(),
                });
            }
            records.push(QaRecord {
                id: fields[0].to_string(),
                question: fields[1].to_string(),
                answer: fields[2].to_string(),
                context: fields[3].to_string(),
            });
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id, r.question, r.answer, r.context
            ));
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, out)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn records(&self) -> &[QaRecord] {
        &self.records
    }

    pub fn record(&self, id: &str) -> Option<&QaRecord> {
        self.by_id.get(id).map(|i| &self.records[*i])
    }

    /// The training items this environment can score: (query id, question).
    pub fn items(&self) -> Vec<(String, String)> {
        self.records
            .iter()
            .map(|r| (r.id.clone(), r.question.clone()))
            .collect()
    }
}

/// Returns true when `needle` occurs as a contiguous subsequence of `haystack`.
fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// The simulated extractive answerer: slides windows over the context and
/// scores each candidate span by token overlap with the question, a length
/// penalty, and a keyword-trigger bonus (question mentions a gold-answer
/// token and the span is exactly the gold span). Deterministic; earliest
/// shortest span wins ties.
pub fn env_answer(question: &str, record: &QaRecord) -> String {
    let q_set: HashSet<String> = tokenize(question).into_iter().collect();
    let context = tokenize(&record.context);
    let answer = tokenize(&record.answer);
    if context.is_empty() {
        return String::new();
    }
    let triggered = answer.iter().any(|t| q_set.contains(t));
    let max_span = answer.len().max(4).min(context.len());

    let mut best_score = f64::NEG_INFINITY;
    let mut best_span: &[String] = &context[..1];
    for width in 1..=max_span {
        for start in 0..=(context.len() - width) {
            let span = &context[start..start + width];
            let overlap = span
                .iter()
                .collect::<HashSet<_>>()
                .iter()
                .filter(|t| q_set.contains(**t))
                .count() as f64;
            let mut score = overlap - LENGTH_PENALTY * width as f64;
            if triggered && span == answer.as_slice() {
                score += TRIGGER_BONUS;
            }
            if score > best_score {
                best_score = score;
                best_span = span;
            }
        }
    }
    best_span.join(" ")
}

impl RewardEnvironment for QaEnvironment {
    fn reward(&self, reformulation: &str, query_id: &str) -> f64 {
        match self.record(query_id) {
            None => {
                eprintln!("qa environment: unknown query id {query_id:?}; reward 0");
                0.0
            }
            Some(rec) => {
                let predicted = env_answer(reformulation, rec);
                token_f1(&rec.answer, &predicted)
            }
        }
    }
}

/// A two-level intent label rendered as `parent/child`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierLabel {
    pub parent: String,
    pub child: String,
}

impl HierLabel {
    pub fn new(parent: &str, child: &str) -> Self {
        assert!(
            !parent.is_empty(),
            "hierarchical label needs a nonempty parent"
        );
        HierLabel {
            parent: parent.to_string(),
            child: child.to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, RewardError> {
        match s.split_once('/') {
            Some((parent, child)) if !parent.is_empty() => Ok(HierLabel {
                parent: parent.to_string(),
                child: child.to_string(),
            }),
            _ => Err(RewardError::BadLabel(s.to_string())),
        }
    }
}

impl fmt::Display for HierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.parent, self.child)
    }
}

/// Hierarchical intent-classification reward: 1 for an exact match, 0.5 for
/// a parent-only match, 0 otherwise.
pub fn ic_reward(predicted: &HierLabel, gold: &HierLabel) -> f64 {
    if predicted == gold {
        1.0
    } else if predicted.parent == gold.parent {
        0.5
    } else {
        0.0
    }
}

/// Bag-of-words multinomial naive-Bayes intent classifier, the desk-scale
/// stand-in for a pre-trained IC model. Fitting is deterministic.
pub struct IcModel {
    classes: Vec<HierLabel>,
    log_prior: Vec<f64>,
    token_log_prob: Vec<HashMap<String, f64>>,
    unseen_log_prob: Vec<f64>,
    fallback: usize,
}

impl IcModel {
    pub fn fit(corpus: &[(String, HierLabel)]) -> IcModel {
        assert!(!corpus.is_empty(), "ic model: empty corpus");
        let mut classes: Vec<HierLabel> = corpus.iter().map(|(_, l)| l.clone()).collect();
        classes.sort();
        classes.dedup();
        let class_index: HashMap<&HierLabel, usize> =
            classes.iter().enumerate().map(|(i, l)| (l, i)).collect();

        let mut doc_counts = vec![0usize; classes.len()];
        let mut token_counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); classes.len()];
        let mut vocab: HashSet<String> = HashSet::new();
        for (text, label) in corpus {
            let c = class_index[label];
            doc_counts[c] += 1;
            for tok in tokenize(text) {
                vocab.insert(tok.clone());
                *token_counts[c].entry(tok).or_insert(0) += 1;
            }
        }
        let v = vocab.len() as f64;
        let n = corpus.len() as f64;
        let log_prior = doc_counts.iter().map(|c| (*c as f64 / n).ln()).collect();
        let mut token_log_prob = Vec::with_capacity(classes.len());
        let mut unseen_log_prob = Vec::with_capacity(classes.len());
        for counts in &token_counts {
            let total: usize = counts.values().sum();
            let denom = total as f64 + v;
            token_log_prob.push(
                counts
                    .iter()
                    .map(|(t, c)| (t.clone(), ((*c as f64 + 1.0) / denom).ln()))
                    .collect(),
            );
            unseen_log_prob.push((1.0 / denom).ln());
        }
        // most frequent class; ties already resolve to the lexicographically
        // smallest because classes are sorted
        let fallback = (0..classes.len())
            .max_by(|a, b| doc_counts[*a].cmp(&doc_counts[*b]).then(b.cmp(a)))
            .unwrap();
        IcModel {
            classes,
            log_prior,
            token_log_prob,
            unseen_log_prob,
            fallback,
        }
    }

    /// Deterministic label for a text; empty text falls back to the most
    /// frequent training label.
    pub fn classify(&self, text: &str) -> HierLabel {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return self.classes[self.fallback].clone();
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.classes.len() {
            let mut score = self.log_prior[c];
            for tok in &tokens {
                score += self.token_log_prob[c]
                    .get(tok)
                    .copied()
                    .unwrap_or(self.unseen_log_prob[c]);
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        self.classes[best].clone()
    }

    pub fn classes(&self) -> &[HierLabel] {
        &self.classes
    }
}

/// Intent-classification reward environment: classifies the reformulation
/// and pays the hierarchical reward against the query's gold label.
pub struct IcEnvironment {
    model: IcModel,
    items: Vec<(String, HierLabel)>, // (query text, gold label) by line order
}

impl IcEnvironment {
    pub fn new(corpus: Vec<(String, HierLabel)>) -> Self {
        let model = IcModel::fit(&corpus);
        IcEnvironment {
            model,
            items: corpus,
        }
    }

    /// TSV: `text \t parent/child`, one record per line. Query ids are the
    /// zero-based line positions rendered in decimal.
    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let body = fs::read_to_string(path)?;
        let mut corpus = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(RewardError::BadRecord {
                    path: path.display().to_string(),
                    line: i + 1,
                    expected: 2,
                    got: fields.len(),
                });
            }
            corpus.push((fields[0].to_string(), HierLabel::parse(fields[1])?));
        }
        Ok(Self::new(corpus))
    }

    pub fn model(&self) -> &IcModel {
        &self.model
    }

    pub fn items(&self) -> Vec<(String, String)> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, (text, _))| (i.to_string(), text.clone()))
            .collect()
    }
}

impl RewardEnvironment for IcEnvironment {
    fn reward(&self, reformulation: &str, query_id: &str) -> f64 {
        let idx: usize = match query_id.parse() {
            Ok(i) => i,
            Err(_) => {
                eprintln!("ic environment: unknown query id {query_id:?}; reward 0");
                return 0.0;
            }
        };
        match self.items.get(idx) {
            None => {
                eprintln!("ic environment: unknown query id {query_id:?}; reward 0");
                0.0
            }
            Some((_, gold)) => ic_reward(&self.model.classify(reformulation), gold),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DecodeMode;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn traj_with_log_probs(log_probs: Vec<f64>) -> Trajectory {
        Trajectory {
            tokens: vec![0; log_probs.len()],
            log_probs,
            log_prob_nodes: vec![],
            step_dists: vec![],
            reward: None,
            advantage: None,
            mode: DecodeMode::Sampled,
        }
    }

    #[test]
    fn f1_exact_match() {
        assert_eq!(token_f1("nobel prize", "nobel prize"), 1.0);
    }

    #[test]
    fn f1_disjoint_sets() {
        assert_eq!(token_f1("alpha beta", "gamma delta"), 0.0);
    }

    #[test]
    fn f1_partial() {
        // p = 1, r = 1/2 -> F1 = 2/3 exactly
        assert_eq!(token_f1("nobel prize", "nobel"), 2.0 / 3.0);
    }

    #[test]
    fn f1_symmetric_and_bounded() {
        let pairs = [
            ("a b c", "a b"),
            ("x", "x y z"),
            ("one two", "two one"),
            ("", "a"),
        ];
        for (g, p) in pairs {
            let f = token_f1(g, p);
            assert_close(f, token_f1(p, g), 1e-15);
            assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn fluency_certain_steps() {
        let t = traj_with_log_probs(vec![0.0, 0.0, 0.0]);
        assert_eq!(fluency_reward(&t), 1.0);
    }

    #[test]
    fn fluency_unit_entropy() {
        // per-step prob e^-1 -> H = 1 -> R_f = 0.5
        let t = traj_with_log_probs(vec![-1.0, -1.0]);
        assert_close(fluency_reward(&t), 0.5, 1e-12);
    }

    #[test]
    fn fluency_half_half() {
        let t = traj_with_log_probs(vec![0.5f64.ln(), 0.5f64.ln()]);
        assert_close(fluency_reward(&t), 1.0 / (1.0 + 2.0f64.ln()), 1e-12);
    }

    #[test]
    fn fluency_decreases_with_lower_log_prob() {
        let hi = traj_with_log_probs(vec![-0.1, -0.1]);
        let lo = traj_with_log_probs(vec![-0.5, -0.5]);
        assert!(fluency_reward(&hi) > fluency_reward(&lo));
    }

    #[test]
    fn composite_values() {
        assert_eq!(composite_reward(0.3, 0.9, 0.0), 0.3);
        assert_eq!(composite_reward(1.0, 1.0, 2.7), 1.0);
        assert_close(composite_reward(0.5, 1.0, 1.0), 0.75, 1e-12);
    }

    #[test]
    fn ic_reward_truth_table() {
        let full = HierLabel::parse("acct/open").unwrap();
        assert_eq!(
            ic_reward(&full, &HierLabel::parse("acct/open").unwrap()),
            1.0
        );
        assert_eq!(
            ic_reward(
                &HierLabel::parse("acct/open").unwrap(),
                &HierLabel::parse("acct/close").unwrap()
            ),
            0.5
        );
        assert_eq!(
            ic_reward(
                &HierLabel::parse("card/open").unwrap(),
                &HierLabel::parse("acct/open").unwrap()
            ),
            0.0
        );
        // reflexive full reward
        for s in ["a/b", "x/", "p/q"] {
            let l = HierLabel::parse(s).unwrap();
            assert_eq!(ic_reward(&l, &l), 1.0);
        }
    }

    #[test]
    fn hier_label_round_trip() {
        let l = HierLabel::parse("acct/open").unwrap();
        assert_eq!(l.to_string(), "acct/open");
        assert!(HierLabel::parse("/child").is_err());
        assert!(HierLabel::parse("flat").is_err());
    }

    fn fixture_env() -> QaEnvironment {
        QaEnvironment::new(vec![
            QaRecord {
                id: "q1".into(),
                question: "nobel prize winner".into(),
                answer: "nobel".into(),
                context: "x y nobel z".into(),
            },
            QaRecord {
                id: "q2".into(),
                question: "where is the red house".into(),
                answer: "green hill".into(),
                context: "the tall green hill stands far away".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn env_answer_trigger_pulls_gold_span() {
        let env = fixture_env();
        let rec = env.record("q1").unwrap();
        assert_eq!(env_answer("nobel prize winner", rec), "nobel");
        assert!(env.reward("nobel prize winner", "q1") >= 2.0 / 3.0);
        assert_eq!(env.reward("nobel prize winner", "q1"), 1.0);
    }

    #[test]
    fn env_answer_no_overlap_scores_zero() {
        let env = fixture_env();
        let rec = env.record("q1").unwrap();
        let span = env_answer("aardvark question", rec);
        assert_eq!(token_f1(&rec.answer, &span), 0.0);
    }

    #[test]
    fn env_unknown_id_rewards_zero() {
        let env = fixture_env();
        assert_eq!(env.reward("anything", "missing"), 0.0);
    }

    #[test]
    fn env_rejects_answer_not_in_context() {
        let err = QaEnvironment::new(vec![QaRecord {
            id: "bad".into(),
            question: "q".into(),
            answer: "unicorn".into(),
            context: "plain text only".into(),
        }]);
        assert!(matches!(err, Err(RewardError::AnswerNotInContext { .. })));
    }

    #[test]
    fn qa_corpus_file_round_trip() {
        let env = fixture_env();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.tsv");
        env.save(&path).unwrap();
        let loaded = QaEnvironment::load(&path).unwrap();
        assert_eq!(loaded.records().len(), 2);
        assert_eq!(loaded.reward("nobel prize winner", "q1"), 1.0);
    }

    fn ic_fixture() -> Vec<(String, HierLabel)> {
        let mut corpus = Vec::new();
        let mut push = |text: &str, label: &str| {
            corpus.push((text.to_string(), HierLabel::parse(label).unwrap()));
        };
        push("open a new account today", "acct/open");
        push("please open my account", "acct/open");
        push("account opening question", "acct/open");
        push("close my account now", "acct/close");
        push("account closing please", "acct/close");
        push("close the old account", "acct/close");
        push("report my card stolen", "card/stolen");
        push("stolen card help", "card/stolen");
        push("card was stolen yesterday", "card/stolen");
        push("activate my new card", "card/activate");
        push("card activation please", "card/activate");
        corpus
    }

    #[test]
    fn ic_model_memorizes_training_items() {
        let corpus = ic_fixture();
        let model = IcModel::fit(&corpus);
        let hits = corpus
            .iter()
            .filter(|(text, label)| model.classify(text) == *label)
            .count();
        assert!(
            hits as f64 / corpus.len() as f64 >= 0.95,
            "only {hits}/{} training items classified correctly",
            corpus.len()
        );
    }

    #[test]
    fn ic_model_empty_text_falls_back_to_most_frequent() {
        let model = IcModel::fit(&ic_fixture());
        // acct/open and acct/close and card/stolen all have 3 docs; the
        // lexicographically smallest of the most frequent wins.
        assert_eq!(model.classify(""), HierLabel::parse("acct/close").unwrap());
    }

    #[test]
    fn ic_model_synonym_probe_keeps_parent() {
        let model = IcModel::fit(&ic_fixture());
        // paraphrases reusing parent-level vocabulary with swapped phrasing
        let probes = [
            ("account open request", "acct"),
            ("open account", "acct"),
            ("my account close", "acct"),
            ("card stolen report", "card"),
            ("new card activate", "card"),
        ];
        let hits = probes
            .iter()
            .filter(|(text, parent)| model.classify(text).parent == *parent)
            .count();
        assert!(hits as f64 / probes.len() as f64 >= 0.8);
    }

    #[test]
    fn ic_environment_rewards_from_reformulation() {
        let env = IcEnvironment::new(ic_fixture());
        // item 0 is acct/open
        let r = env.reward("open a new account", "0");
        assert_eq!(r, 1.0);
        assert_eq!(env.reward("anything", "999"), 0.0);
        for (id, _text) in env.items() {
            let r = env.reward("close account", &id);
            assert!(r == 0.0 || r == 0.5 || r == 1.0);
        }
    }
}
