//! Seeded synthetic corpora for desk-scale experiments: an identity
//! reformulation task, a keyword-triggered QA environment with known
//! optimal behavior, and an intent-classification corpus.
//!
//! The keyword QA fixture is built so that copying the query earns nothing
//! while mentioning the trigger keyword extracts the gold span exactly:
//! contexts share no vocabulary with the queries, so the only way to reward
//! 1.0 is to say the keyword.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::rewards::{HierLabel, QaEnvironment, QaRecord};
use crate::training::{PairCorpus, RlDataset};

/// The trigger keyword used by the QA fixture; kept in fixture vocabularies
/// so a policy can learn to emit it.
pub const QA_KEYWORD: &str = "bingo";

/// Word list for identity / copy tasks: `w00` .. `w(n-1)`.
pub fn word_list(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i:02}")).collect()
}

/// Identity pairs (target = source) over a small word list. A sprinkle of
/// sentences mention [`QA_KEYWORD`] so it lands in the vocabulary.
pub fn identity_corpus(n_pairs: usize, n_words: usize, seed: u64) -> PairCorpus {
    let words = word_list(n_words);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let len = rng.random_range(2..=5);
        let mut toks: Vec<String> = (0..len)
            .map(|_| words[rng.random_range(0..words.len())].clone())
            .collect();
        // ~2% of sentences carry the keyword as an ordinary word
        if i % 50 == 0 {
            let at = rng.random_range(0..=toks.len());
            toks.insert(at, QA_KEYWORD.to_string());
        }
        let text = toks.join(" ");
        pairs.push((text.clone(), text));
    }
    PairCorpus::new(pairs)
}

/// Context filler disjoint from both the identity words and the templates.
const CONTEXT_FILLER: [&str; 12] = [
    "rock", "paper", "lizard", "cloud", "stone", "river", "maple", "ember", "dune", "frost",
    "pearl", "crag",
];

/// A QA environment over the given queries where the gold answer of every
/// record is the trigger keyword. Query ids are `q0`, `q1`, ...
/// Reward is exactly 1.0 when the reformulation mentions the keyword and
/// 0.0 otherwise (contexts share no tokens with the queries).
pub fn keyword_qa_environment<S: AsRef<str>>(queries: &[S], seed: u64) -> QaEnvironment {
    let mut rng = StdRng::seed_from_u64(seed);
    let records: Vec<QaRecord> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let n_fill = rng.random_range(3..6);
            let mut ctx: Vec<&str> = (0..n_fill)
                .map(|_| CONTEXT_FILLER[rng.random_range(0..CONTEXT_FILLER.len())])
                .collect();
            // never first: an overlap-free question answers with the first
            // span, which must not be the gold keyword
            let at = rng.random_range(1..=ctx.len());
            ctx.insert(at, QA_KEYWORD);
            QaRecord {
                id: format!("q{i}"),
                question: q.as_ref().to_string(),
                answer: QA_KEYWORD.to_string(),
                context: ctx.join(" "),
            }
        })
        .collect();
    QaEnvironment::new(records).expect("keyword fixture records are well formed")
}

/// The RL dataset matching [`keyword_qa_environment`].
pub fn qa_dataset(env: &QaEnvironment) -> RlDataset {
    RlDataset::new(env.items())
}

/// Small intent-classification corpus: parent domains with per-child
/// keyword vocabulary plus shared filler words.
pub fn ic_corpus(n_per_class: usize, seed: u64) -> Vec<(String, HierLabel)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let intents: [(&str, &str, [&str; 3]); 6] = [
        ("acct", "open", ["open", "start", "create"]),
        ("acct", "close", ["close", "cancel", "terminate"]),
        ("card", "stolen", ["stolen", "lost", "missing"]),
        ("card", "activate", ["activate", "enable", "unlock"]),
        ("loan", "apply", ["apply", "borrow", "request"]),
        ("loan", "payoff", ["payoff", "settle", "repay"]),
    ];
    let filler = ["please", "help", "me", "with", "my", "today", "asap", "now"];
    let mut out = Vec::with_capacity(n_per_class * intents.len());
    for (parent, child, keywords) in intents {
        for _ in 0..n_per_class {
            let mut toks: Vec<&str> = Vec::new();
            toks.push(keywords[rng.random_range(0..keywords.len())]);
            toks.push(parent); // the domain word anchors the parent label
            for _ in 0..rng.random_range(1..4) {
                toks.push(filler[rng.random_range(0..filler.len())]);
            }
            // light noise: occasionally borrow a filler-heavy phrasing
            if rng.random_range(0..10) == 0 {
                toks.push(keywords[rng.random_range(0..keywords.len())]);
            }
            let k = toks.len();
            for i in (1..k).rev() {
                let j = rng.random_range(0..=i);
                toks.swap(i, j);
            }
            out.push((toks.join(" "), HierLabel::new(parent, child)));
        }
    }
    out
}
