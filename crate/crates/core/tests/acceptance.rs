//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Run with `cargo test --test acceptance` (add
//! `-- --nocapture` to see the lines as they pass).

mod common;

use std::sync::LazyLock;
use std::time::Instant;

use common::{flat_grads, flat_params, rel_err, set_flat_params, tiny_fixture};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use reformulator::model::{DecodeMode, ModelConfig, Seq2SeqParams, Trajectory};
use reformulator::numerics::{finite_diff_grad, Tape};
use reformulator::objectives::{
    critic_mse_loss, entropy_regularizer, mle_loss, reinforce_surrogate_loss, unlikelihood_loss,
    AdvantageBatch, BaselineKind, CriticParams,
};
use reformulator::rewards::{fluency_reward, ic_reward, token_f1, HierLabel};
use reformulator::synth::{identity_corpus, keyword_qa_environment, qa_dataset};
use reformulator::text::{Row, Vocabulary, EOS};
use reformulator::training::{
    evaluate, exact_match_rate, train_rl, train_supervised, Algorithm, PairCorpus, SftStage, Split,
    TrainConfig,
};
use reformulator::wellformedness::{
    generate_denoise_pairs, generate_rated_corpus, mean_wf_score, wf_report, wf_score, wf_train,
    RatedQuery, WfConfig, WfModel,
};

fn pass(criterion: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} {name}: PASS ({detail})");
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

struct IdentityFixture {
    vocab: Vocabulary,
    model: Seq2SeqParams,
    best_dev_em: f64,
    epochs_to_target: Option<usize>,
    sft_seconds: f64,
}

/// The supervised identity model shared by criteria 4 and 5.
static IDENTITY: LazyLock<IdentityFixture> = LazyLock::new(|| {
    let started = Instant::now();
    let pairs = identity_corpus(2000, 80, 42);
    let vocab = Vocabulary::build(&pairs.texts(), 256).unwrap();
    assert!(
        vocab.size() <= 200,
        "identity fixture must stay under 200 tokens"
    );
    let config = TrainConfig {
        batch_size: 16,
        learning_rate: 0.3,
        max_len: 10,
        patience: 30,
        seed: 7,
        val_fraction: 0.1,
        ..TrainConfig::supervised_defaults()
    };
    let mut model = Seq2SeqParams::init(ModelConfig::with_dims(vocab.size(), 24, 40), 7);
    let log = train_supervised(
        &config,
        &[SftStage { pairs, epochs: 30 }],
        &mut model,
        &vocab,
    )
    .unwrap();
    let mut best_dev_em = 0.0f64;
    let mut epochs_to_target = None;
    for r in log.dev_records() {
        best_dev_em = best_dev_em.max(r.mean_reward);
        if r.mean_reward >= 0.9 && epochs_to_target.is_none() {
            epochs_to_target = Some(r.epoch + 1);
        }
    }
    IdentityFixture {
        vocab,
        model,
        best_dev_em,
        epochs_to_target,
        sft_seconds: started.elapsed().as_secs_f64(),
    }
});

struct WfFixture {
    judge: WfModel,
    held_out: Vec<RatedQuery>,
    train_seconds: f64,
}

/// The rated corpus and trained judge shared by criteria 6 and 7.
static WF: LazyLock<WfFixture> = LazyLock::new(|| {
    let started = Instant::now();
    let corpus = generate_rated_corpus(3000, 40);
    let (train, held_out) = corpus.split_at(2400);
    let config = WfConfig {
        embed_dim: 24,
        hidden_dim: 48,
        max_len: 16,
        batch_size: 16,
        max_epochs: 50,
        patience: 12,
        learning_rate: 0.2,
        seed: 5,
        ..WfConfig::default()
    };
    let judge = wf_train(train, config).unwrap();
    WfFixture {
        judge,
        held_out: held_out.to_vec(),
        train_seconds: started.elapsed().as_secs_f64(),
    }
});

fn rl_base_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 0.15,
        entropy_weight: 0.02,
        epochs: 50,
        patience: 50,
        max_len: 10,
        seed: 11,
        algorithm: Algorithm::Pg,
        val_fraction: 0.2,
        ..TrainConfig::rl_defaults()
    }
}

fn greedy_texts(
    model: &Seq2SeqParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    queries: &[String],
) -> Vec<String> {
    queries
        .iter()
        .map(|q| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let row = vocab.encode(q, &config.prefix, config.max_len);
            let enc = bound.encode_query(&mut tape, &row.trimmed());
            let traj = bound.greedy_decode(&mut tape, &enc, config.max_len);
            vocab.decode(&traj.tokens)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

/// Which loss a gradcheck case exercises.
#[derive(Clone, Copy, Debug)]
enum LossKind {
    Mle,
    Reinforce,
    Unlikelihood,
    Entropy,
    CriticMse,
}

/// Builds the loss for a fixed fixture on a fresh tape and returns
/// (bound leaves, loss node).
fn build_loss(
    kind: LossKind,
    model: &Seq2SeqParams,
    critic: &CriticParams,
    query: &Row,
    tokens: &[usize],
    advantage: f64,
    tape: &mut Tape,
) -> (
    Vec<reformulator::numerics::Tensor>,
    reformulator::numerics::Tensor,
) {
    match kind {
        LossKind::CriticMse => {
            let bound = critic.bind(tape);
            let pooled = vec![vec![0.21, -0.4, 0.13], vec![-0.05, 0.3, 0.02]];
            let rewards = vec![0.8, 0.25];
            let loss = critic_mse_loss(tape, &bound, &pooled, &rewards);
            (bound.tensors().to_vec(), loss)
        }
        _ => {
            let bound = model.bind(tape);
            let enc = bound.encode_query(tape, query);
            let target = Row {
                ids: tokens.to_vec(),
                len: tokens.len(),
            };
            let dists = bound.decode_teacher_forced(tape, &enc, &target);
            let loss = match kind {
                LossKind::Mle => mle_loss(tape, &dists, &target),
                LossKind::Entropy => {
                    let mask = vec![true; dists.len()];
                    entropy_regularizer(tape, &dists, &mask, 0.7)
                }
                LossKind::Unlikelihood => unlikelihood_loss(tape, &dists, tokens, 1.3),
                LossKind::Reinforce => {
                    let lps: Vec<_> = tokens
                        .iter()
                        .enumerate()
                        .map(|(t, &tok)| tape.log_prob_gather(dists[t], tok))
                        .collect();
                    let traj = Trajectory {
                        tokens: tokens.to_vec(),
                        log_probs: lps.iter().map(|l| tape.value(*l)).collect(),
                        log_prob_nodes: lps,
                        step_dists: dists,
                        reward: Some(advantage),
                        advantage: Some(advantage),
                        mode: DecodeMode::Sampled,
                    };
                    let adv = AdvantageBatch::new(vec![advantage], vec![0.0], BaselineKind::Mean);
                    reinforce_surrogate_loss(tape, &[traj], &adv)
                }
                LossKind::CriticMse => unreachable!(),
            };
            (bound.tensors().to_vec(), loss)
        }
    }
}

#[test]
fn acceptance_1_gradient_correctness() {
    let started = Instant::now();
    let kinds = [
        LossKind::Mle,
        LossKind::Reinforce,
        LossKind::Unlikelihood,
        LossKind::Entropy,
        LossKind::CriticMse,
    ];
    let mut seeds_run = 0usize;
    let mut worst = 0.0f64;
    for round in 0..20u64 {
        for (k, kind) in kinds.iter().enumerate() {
            let seed = round * kinds.len() as u64 + k as u64;
            seeds_run += 1;
            let fx = tiny_fixture(seed);
            let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
            let critic = CriticParams::init(3, 4, seed);
            let advantage = rng.random_range(-1.0..1.0);

            // analytic gradients
            let mut tape = Tape::new();
            let (bound, loss) = build_loss(
                *kind, &fx.model, &critic, &fx.query, &fx.tokens, advantage, &mut tape,
            );
            tape.backward(loss);
            let analytic = flat_grads(&tape, &bound);

            let flat: Vec<f64> = match kind {
                LossKind::CriticMse => critic
                    .params()
                    .iter()
                    .flat_map(|p| p.data.iter().copied())
                    .collect(),
                _ => flat_params(&fx.model),
            };

            // numeric oracle at two steps: truncation dominates one regime,
            // roundoff the other; a correct gradient matches either
            let eval = |xs: &[f64]| -> f64 {
                let mut t = Tape::new();
                let (leaves, l) = match kind {
                    LossKind::CriticMse => {
                        let mut c = critic.clone();
                        let mut off = 0;
                        for p in c.params_mut() {
                            let n = p.data.len();
                            p.data.copy_from_slice(&xs[off..off + n]);
                            off += n;
                        }
                        build_loss(
                            *kind, &fx.model, &c, &fx.query, &fx.tokens, advantage, &mut t,
                        )
                    }
                    _ => {
                        let mut m = fx.model.clone();
                        set_flat_params(&mut m, xs);
                        build_loss(*kind, &m, &critic, &fx.query, &fx.tokens, advantage, &mut t)
                    }
                };
                let _ = leaves;
                t.value(l)
            };
            let fd_a = finite_diff_grad(eval, &flat, 1e-4);
            let fd_b = finite_diff_grad(eval, &flat, 1e-3);
            let err = analytic
                .iter()
                .zip(fd_a.iter().zip(&fd_b))
                .map(|(g, (a, b))| rel_err(*g, *a).min(rel_err(*g, *b)))
                .fold(0.0, f64::max);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "{kind:?} seed {seed}: max relative error {err:.3e} >= 1e-4"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(seeds_run >= 100, "ran only {seeds_run} seeds");
    assert!(
        secs < 120.0,
        "gradient checks took {secs:.1}s, budget is 120s"
    );
    pass(
        1,
        "gradient-correctness",
        format!("{seeds_run} seeds over 5 losses, worst rel err {worst:.2e}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Policy-gradient oracle
// ---------------------------------------------------------------------------

fn softmax_plain(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

#[test]
fn acceptance_2_policy_gradient_oracle() {
    let started = Instant::now();
    let logits = [0.2, -0.5, 0.9, 0.1];
    let rewards = [0.85, 0.1, 0.45, 0.7];

    // exact expectation of the surrogate gradient for a constant baseline
    let expected_grad = |baseline: f64| -> Vec<f64> {
        let probs = softmax_plain(&logits);
        let mut grad = vec![0.0; logits.len()];
        for action in 0..logits.len() {
            let mut tape = Tape::new();
            let theta = tape.vector(logits.to_vec());
            let dist = tape.softmax(theta);
            let lp = tape.log_prob_gather(dist, action);
            let traj = Trajectory {
                tokens: vec![action],
                log_probs: vec![tape.value(lp)],
                log_prob_nodes: vec![lp],
                step_dists: vec![dist],
                reward: Some(rewards[action]),
                advantage: Some(rewards[action] - baseline),
                mode: DecodeMode::Sampled,
            };
            let adv =
                AdvantageBatch::new(vec![rewards[action]], vec![baseline], BaselineKind::Mean);
            let loss = reinforce_surrogate_loss(&mut tape, &[traj], &adv);
            tape.backward(loss);
            for (g, lg) in grad.iter_mut().zip(tape.grad(theta)) {
                *g += probs[action] * lg;
            }
        }
        grad
    };

    // independent oracle: finite differences of the enumerated expectation
    let grad_j = finite_diff_grad(
        |th| {
            softmax_plain(th)
                .iter()
                .zip(&rewards)
                .map(|(p, r)| p * r)
                .sum()
        },
        &logits,
        1e-6,
    );

    let g0 = expected_grad(0.0);
    let g5 = expected_grad(0.5);
    let mut worst = 0.0f64;
    for i in 0..4 {
        worst = worst.max((-g0[i] - grad_j[i]).abs());
        worst = worst.max((-g5[i] - grad_j[i]).abs());
        assert!((-g0[i] - grad_j[i]).abs() < 1e-5, "baseline 0, coord {i}");
        assert!((-g5[i] - grad_j[i]).abs() < 1e-5, "baseline 0.5, coord {i}");
        assert!(
            (g0[i] - g5[i]).abs() < 1e-5,
            "baselines disagree at coord {i}"
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "oracle took {secs:.2}s, budget is 10s");
    pass(
        2,
        "policy-gradient-oracle",
        format!("worst coordinate error {worst:.2e} vs enumerated grad J, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 3. Reward-function unit values
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_reward_unit_values() {
    assert_eq!(token_f1("nobel prize", "nobel"), 2.0 / 3.0);
    assert_eq!(token_f1("alpha beta", "gamma delta"), 0.0);

    let traj = Trajectory {
        tokens: vec![0, 0],
        log_probs: vec![0.5f64.ln(), 0.5f64.ln()],
        log_prob_nodes: vec![],
        step_dists: vec![],
        reward: None,
        advantage: None,
        mode: DecodeMode::Sampled,
    };
    let rf = fluency_reward(&traj);
    assert!((rf - 1.0 / (1.0 + 2.0f64.ln())).abs() < 1e-9);

    let acct_open = HierLabel::parse("acct/open").unwrap();
    let acct_close = HierLabel::parse("acct/close").unwrap();
    let card_open = HierLabel::parse("card/open").unwrap();
    assert_eq!(ic_reward(&acct_open, &acct_open), 1.0);
    assert_eq!(ic_reward(&acct_open, &acct_close), 0.5);
    assert_eq!(ic_reward(&card_open, &acct_open), 0.0);

    pass(
        3,
        "reward-unit-values",
        format!("F1 2/3 exact, R_f(0.5,0.5) = {rf:.6} = 1/(1+ln 2), IC truth table exact"),
    );
}

// ---------------------------------------------------------------------------
// 4. Supervised stage
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_supervised_identity() {
    let fx = &*IDENTITY;
    assert!(
        fx.best_dev_em >= 0.9,
        "held-out exact match peaked at {:.3}, need 0.90",
        fx.best_dev_em
    );
    let epochs = fx
        .epochs_to_target
        .expect("never reached 90% within 30 epochs");
    assert!(epochs <= 30);
    assert!(
        fx.sft_seconds < 600.0,
        "supervised stage took {:.0}s, budget is 600s",
        fx.sft_seconds
    );
    // fresh in-vocabulary items, never seen in training
    let fresh: Vec<(String, String)> = identity_corpus(200, 80, 4242).pairs;
    let config = TrainConfig {
        max_len: 10,
        ..TrainConfig::supervised_defaults()
    };
    let fresh_em = exact_match_rate(&fx.model, &fx.vocab, &config, &fresh);
    assert!(fresh_em >= 0.9, "fresh-item exact match {fresh_em:.3}");
    pass(
        4,
        "supervised-identity",
        format!(
            "held-out EM {:.3} by epoch {epochs}, fresh EM {fresh_em:.3}, vocab {} <= 200, {:.0}s",
            fx.best_dev_em,
            fx.vocab.size(),
            fx.sft_seconds
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. RL stage
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_rl_stage() {
    let fx = &*IDENTITY;
    let queries: Vec<String> = identity_corpus(160, 80, 77)
        .pairs
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let env = keyword_qa_environment(&queries, 1);
    let data = qa_dataset(&env);

    // PG
    let started = Instant::now();
    let pg_config = rl_base_config();
    let mut pg_model = fx.model.clone();
    let pg_log = train_rl(&pg_config, &env, &mut pg_model, None, &fx.vocab, &data).unwrap();
    let pg_secs = started.elapsed().as_secs_f64();
    let pg_devs: Vec<f64> = pg_log.dev_records().iter().map(|r| r.mean_reward).collect();
    let pg_start = pg_devs[0];
    let pg_best = pg_devs.iter().cloned().fold(0.0, f64::max);
    assert!(
        pg_best - pg_start >= 0.3,
        "PG improved dev reward only {pg_start:.3} -> {pg_best:.3}"
    );
    assert!(pg_secs < 1200.0, "PG took {pg_secs:.0}s, budget is 1200s");
    // the log carries both curves
    assert!(pg_log.records.iter().any(|r| r.split == Split::Train));
    assert!(pg_log.records.iter().any(|r| r.split == Split::Dev));
    let dir = tempfile::tempdir().unwrap();
    let curves = dir.path().join("pg_curves.csv");
    pg_log.emit_curves(&curves).unwrap();
    let csv = std::fs::read_to_string(&curves).unwrap();
    assert!(csv.starts_with("epoch,split,mean_reward,"));
    assert!(csv.lines().count() > 2);

    // SC
    let started = Instant::now();
    let mut sc_config = rl_base_config();
    sc_config.algorithm = Algorithm::Sc;
    let mut sc_model = fx.model.clone();
    let sc_log = train_rl(&sc_config, &env, &mut sc_model, None, &fx.vocab, &data).unwrap();
    let sc_secs = started.elapsed().as_secs_f64();
    let sc_devs: Vec<f64> = sc_log.dev_records().iter().map(|r| r.mean_reward).collect();
    let sc_start = sc_devs[0];
    let sc_best = sc_devs.iter().cloned().fold(0.0, f64::max);
    assert!(
        sc_best - sc_start >= 0.2,
        "SC improved dev reward only {sc_start:.3} -> {sc_best:.3}"
    );
    assert!(sc_secs < 1200.0, "SC took {sc_secs:.0}s, budget is 1200s");

    // seedable and deterministic: a rerun of the first epochs is identical
    let mut short = rl_base_config();
    short.epochs = 2;
    let run = || {
        let mut m = fx.model.clone();
        train_rl(&short, &env, &mut m, None, &fx.vocab, &data)
            .unwrap()
            .comparable()
    };
    assert_eq!(run(), run(), "RL run is not deterministic for a fixed seed");

    pass(
        5,
        "rl-stage",
        format!(
            "PG dev reward {pg_start:.3} -> {pg_best:.3} ({pg_secs:.0}s), \
             SC {sc_start:.3} -> {sc_best:.3} ({sc_secs:.0}s), both curves logged"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Well-formedness
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_wellformedness() {
    let fx = &*WF;
    let report = wf_report(&fx.judge, &fx.held_out);
    let held_out_acc = fx
        .held_out
        .iter()
        .filter(|q| wf_score(&fx.judge, &q.text) == q.rating)
        .count() as f64
        / fx.held_out.len() as f64;
    assert!(
        held_out_acc >= 0.70,
        "held-out 6-way accuracy {held_out_acc:.3}, need 0.70"
    );
    assert!(
        fx.train_seconds < 600.0,
        "training took {:.0}s, budget is 600s",
        fx.train_seconds
    );

    // table shape: class, count, accuracy, mean absolute difference
    let rendered = report.render();
    assert!(rendered.starts_with("score_category\tcount\taccuracy\tavg_abs_diff\n"));
    for s in reformulator::wellformedness::RATING_STRINGS {
        assert!(rendered.contains(s));
    }
    for c in &report.classes {
        assert!(c.count > 0, "every class appears in the held-out slice");
    }

    // extreme classes beat every mid class
    let extreme_min = report.classes[0].accuracy.min(report.classes[5].accuracy);
    let mid_max = report.classes[1..5]
        .iter()
        .map(|c| c.accuracy)
        .fold(0.0, f64::max);
    assert!(
        extreme_min > mid_max,
        "extremes ({extreme_min:.3}) must beat mids ({mid_max:.3})"
    );

    pass(
        6,
        "wellformedness",
        format!(
            "held-out 6-way acc {held_out_acc:.3}, binary {:.3}, extremes {:.2}/{:.2} > mid max {mid_max:.2}, {:.0}s",
            report.binary_accuracy,
            report.classes[0].accuracy,
            report.classes[5].accuracy,
            fx.train_seconds
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Table-2 analogue
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_table2_analogue() {
    let judge = &WF.judge;
    let started = Instant::now();

    // supervised denoiser
    let pairs = PairCorpus::new(generate_denoise_pairs(2000, 41));
    let vocab = Vocabulary::build(&pairs.texts(), 512).unwrap();
    let sft = TrainConfig {
        batch_size: 16,
        learning_rate: 0.3,
        max_len: 14,
        patience: 30,
        seed: 7,
        ..TrainConfig::supervised_defaults()
    };
    let mut model = Seq2SeqParams::init(ModelConfig::with_dims(vocab.size(), 24, 40), 7);
    train_supervised(&sft, &[SftStage { pairs, epochs: 12 }], &mut model, &vocab).unwrap();

    // synthetic dev set of raw noised queries
    let dev_noised: Vec<String> = generate_denoise_pairs(80, 99)
        .into_iter()
        .map(|(noised, _)| noised)
        .collect();
    let raw_wf = mean_wf_score(judge, &dev_noised);
    let sft_wf = mean_wf_score(judge, &greedy_texts(&model, &vocab, &sft, &dev_noised));
    assert!(
        sft_wf > raw_wf,
        "supervised reformulations ({sft_wf:.3}) must out-score raw noised queries ({raw_wf:.3})"
    );

    // RL against the keyword environment hurts fluency while rewards rise
    let env = keyword_qa_environment(&dev_noised, 3);
    let data = qa_dataset(&env);
    let mut rl = rl_base_config();
    rl.entropy_weight = 0.15;
    rl.temperature = 1.5;
    rl.max_len = 14;
    let mut rl_model = model.clone();
    let rl_log = train_rl(&rl, &env, &mut rl_model, None, &vocab, &data).unwrap();
    let initial_reward = rl_log.dev_records()[0].mean_reward;
    let final_stats = evaluate(&rl_model, &vocab, &rl, &env, &data.items, Some(judge));
    assert!(
        final_stats.mean_reward > initial_reward + 0.2,
        "dev reward must rise: {initial_reward:.3} -> {:.3}",
        final_stats.mean_reward
    );
    let rl_wf = mean_wf_score(judge, &greedy_texts(&rl_model, &vocab, &rl, &dev_noised));
    assert!(
        rl_wf < sft_wf,
        "well-formedness must drop after RL: {sft_wf:.3} -> {rl_wf:.3}"
    );

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 900.0, "pipeline took {secs:.0}s, budget is 900s");
    pass(
        7,
        "table2-analogue",
        format!(
            "wf raw {raw_wf:.3} < supervised {sft_wf:.3}; after RL wf {rl_wf:.3} while \
             dev reward {initial_reward:.3} -> {:.3}; {secs:.0}s",
            final_stats.mean_reward
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Decoding
// ---------------------------------------------------------------------------

/// Enumerates every complete sequence (EOS-ended or max_len) with its exact
/// log-probability, stepping the decoder directly.
fn enumerate_sequences(
    model: &Seq2SeqParams,
    query: &Row,
    max_len: usize,
) -> Vec<(Vec<usize>, f64)> {
    let v = model.config.vocab_size;
    let mut done = Vec::new();
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (prefix, lp) in frontier {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let enc = bound.encode_query(&mut tape, query);
            let mut state = tape.zeros(&[model.config.hidden_dim]);
            let mut prev = reformulator::text::BOS;
            for &tok in &prefix {
                let (_, s) = bound.decoder_step(&mut tape, &enc, prev, state);
                state = s;
                prev = tok;
            }
            let (d, _) = bound.decoder_step(&mut tape, &enc, prev, state);
            let probs = tape.data(d).to_vec();
            for tok in 0..v {
                let mut seq = prefix.clone();
                seq.push(tok);
                let nlp = lp + probs[tok].max(1e-300).ln();
                if tok == EOS {
                    done.push((seq, nlp));
                } else {
                    next.push((seq, nlp));
                }
            }
        }
        frontier = next;
    }
    done.extend(frontier);
    done
}

#[test]
fn acceptance_8_decoding() {
    let started = Instant::now();

    // beam k=1 vs greedy over 1000 random queries
    let vocab_words: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
    let corpus = vocab_words.join(" ");
    let vocab = Vocabulary::build(&[corpus.as_str()], 64).unwrap();
    let model = Seq2SeqParams::init(ModelConfig::with_dims(vocab.size(), 8, 12), 3);
    let mut rng = StdRng::seed_from_u64(17);
    for _ in 0..1000 {
        let len = rng.random_range(1..6);
        let text: Vec<&str> = (0..len)
            .map(|_| vocab_words[rng.random_range(0..vocab_words.len())].as_str())
            .collect();
        let row = vocab.encode(&text.join(" "), "", 8);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let enc = bound.encode_query(&mut tape, &row.trimmed());
        let greedy = bound.greedy_decode(&mut tape, &enc, 8);
        let beams = bound.beam_search(&mut tape, &enc, 1, 8);
        assert_eq!(
            beams[0].tokens, greedy.tokens,
            "beam k=1 diverged from greedy"
        );
    }

    // beams on a 2-step / 3-token model match exhaustive enumeration
    let tiny = ModelConfig::with_dims(3, 3, 4);
    for seed in 0..5 {
        let m = Seq2SeqParams::init(tiny, seed);
        let query = Row {
            ids: vec![EOS],
            len: 1,
        };
        let mut all = enumerate_sequences(&m, &query, 2);
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let enc = bound.encode_query(&mut tape, &query);
        let beams = bound.beam_search(&mut tape, &enc, all.len(), 2);
        assert_eq!(beams.len(), all.len());
        for (beam, (tokens, lp)) in beams.iter().zip(&all) {
            assert_eq!(&beam.tokens, tokens, "beam order differs from enumeration");
            assert!((beam.total_log_prob() - lp).abs() < 1e-9);
            assert!(beam.ends_with_eos() || beam.len() == 2);
        }
    }

    let secs = started.elapsed().as_secs_f64();
    pass(
        8,
        "decoding",
        format!("beam(1) == greedy on 1000 queries; beams == enumeration on 5 seeds; {secs:.1}s"),
    );
}
