//! Differentiable encoder-decoder policy with single-head dot-product
//! attention, teacher-forced scoring and greedy / sampled / beam decoding.
//!
//! Parameters live outside any tape as plain buffers ([`Param`]); each
//! training or decoding pass binds them onto a fresh [`Tape`] with
//! [`Seq2SeqParams::bind`], runs the forward ops there, and reads gradients
//! back after `backward`.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::numerics::{Tape, Tensor, PROB_FLOOR};
use crate::text::{Row, BOS, EOS};

/// Uniform initialization half-width — initialization is seedable and
/// symmetric around zero.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 128,
        }
    }

    pub fn with_dims(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
        }
    }
}

/// An owned weight buffer; the persistent counterpart of a tape tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn uniform(shape: &[usize], range: f64, rng: &mut StdRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-range..=range)).collect();
        Param {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weights of one GRU cell with input width `in_dim` and state width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub wz: Param,
    pub uz: Param,
    pub bz: Param,
    pub wr: Param,
    pub ur: Param,
    pub br: Param,
    pub wn: Param,
    pub un: Param,
    pub bn: Param,
}

impl GruWeights {
    pub(crate) fn init(in_dim: usize, h: usize, rng: &mut StdRng) -> Self {
        Self::init_with_ranges(in_dim, h, INIT_RANGE, INIT_RANGE, INIT_RANGE, rng)
    }

    /// Fan-in-scaled initialization: faster symmetry breaking for models
    /// trained from scratch on flat sequence-level signals.
    pub(crate) fn init_scaled(in_dim: usize, h: usize, rng: &mut StdRng) -> Self {
        let wr = 1.0 / (in_dim as f64).sqrt();
        let ur = 1.0 / (h as f64).sqrt();
        Self::init_with_ranges(in_dim, h, wr, ur, 0.05, rng)
    }

    fn init_with_ranges(
        in_dim: usize,
        h: usize,
        w_range: f64,
        u_range: f64,
        b_range: f64,
        rng: &mut StdRng,
    ) -> Self {
        let w = |rng: &mut StdRng| Param::uniform(&[h, in_dim], w_range, rng);
        let u = |rng: &mut StdRng| Param::uniform(&[h, h], u_range, rng);
        let b = |rng: &mut StdRng| Param::uniform(&[h], b_range, rng);
        GruWeights {
            wz: w(rng),
            uz: u(rng),
            bz: b(rng),
            wr: w(rng),
            ur: u(rng),
            br: b(rng),
            wn: w(rng),
            un: u(rng),
            bn: b(rng),
        }
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        vec![
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wn, &self.un,
            &self.bn,
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wn,
            &mut self.un,
            &mut self.bn,
        ]
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundGru {
        let mut leaf = |p: &Param| tape.leaf(p.data.clone(), &p.shape);
        BoundGru {
            wz: leaf(&self.wz),
            uz: leaf(&self.uz),
            bz: leaf(&self.bz),
            wr: leaf(&self.wr),
            ur: leaf(&self.ur),
            br: leaf(&self.br),
            wn: leaf(&self.wn),
            un: leaf(&self.un),
            bn: leaf(&self.bn),
        }
    }
}

/// All learnable weights of the encoder-decoder policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub config: ModelConfig,
    pub embedding: Param,
    pub encoder: GruWeights,
    pub decoder: GruWeights,
    pub combine_w: Param,
    pub combine_b: Param,
    pub out_w: Param,
    pub out_b: Param,
}

impl Seq2SeqParams {
    /// Fresh parameters, uniform in [-INIT_RANGE, INIT_RANGE], seedable.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        Seq2SeqParams {
            config,
            embedding: Param::uniform(&[v, d], INIT_RANGE, &mut rng),
            encoder: GruWeights::init(d, h, &mut rng),
            decoder: GruWeights::init(d, h, &mut rng),
            combine_w: Param::uniform(&[h, 2 * h], INIT_RANGE, &mut rng),
            combine_b: Param::uniform(&[h], INIT_RANGE, &mut rng),
            out_w: Param::uniform(&[h, v], INIT_RANGE, &mut rng),
            out_b: Param::uniform(&[v], INIT_RANGE, &mut rng),
        }
    }

    /// Parameter buffers in a fixed order shared with [`BoundSeq2Seq::tensors`].
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embedding];
        out.extend(self.encoder.params());
        out.extend(self.decoder.params());
        out.extend([&self.combine_w, &self.combine_b, &self.out_w, &self.out_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.encoder.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend([
            &mut self.combine_w,
            &mut self.combine_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    /// Named views for checkpointing, in the same fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Param)> {
        PARAM_NAMES.iter().copied().zip(self.params()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    /// Copies every weight onto `tape` as leaves, in the fixed param order.
    pub fn bind(&self, tape: &mut Tape) -> BoundSeq2Seq {
        let mut ids = Vec::with_capacity(PARAM_NAMES.len());
        for p in self.params() {
            ids.push(tape.leaf(p.data.clone(), &p.shape));
        }
        BoundSeq2Seq {
            config: self.config,
            tensors: ids,
        }
    }
}

pub const PARAM_NAMES: [&str; 23] = [
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
    "dec.wz",
    "dec.uz",
    "dec.bz",
    "dec.wr",
    "dec.ur",
    "dec.br",
    "dec.wn",
    "dec.un",
    "dec.bn",
    "combine_w",
    "combine_b",
    "out_w",
    "out_b",
];

/// Encoder pass over one query: per-position states stacked `[k, h]` and
/// their mask-weighted mean.
pub struct EncoderOutput {
    pub states: Tensor,
    pub pooled: Tensor,
    pub len: usize,
}

/// How a trajectory was decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sampled,
    Beam,
}

/// One decoded reformulation: token ids, their per-step log-probabilities
/// (values and live tape nodes), per-step distributions, and the terminal
/// reward / advantage filled in later by the trainer.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub log_prob_nodes: Vec<Tensor>,
    pub step_dists: Vec<Tensor>,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
    pub mode: DecodeMode,
}

impl Trajectory {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Model weights bound onto one tape.
pub struct BoundSeq2Seq {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

pub(crate) struct BoundGru {
    wz: Tensor,
    uz: Tensor,
    bz: Tensor,
    wr: Tensor,
    ur: Tensor,
    br: Tensor,
    wn: Tensor,
    un: Tensor,
    bn: Tensor,
}

impl BoundGru {
    /// Bound tensors in [`GruWeights::params`] order.
    pub(crate) fn tensors(&self) -> [Tensor; 9] {
        [
            self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wn, self.un, self.bn,
        ]
    }

    pub(crate) fn step(&self, tape: &mut Tape, x: Tensor, h: Tensor) -> Tensor {
        let zx = tape.matvec(self.wz, x);
        let zh = tape.matvec(self.uz, h);
        let zs = tape.add(zx, zh);
        let zb = tape.add(zs, self.bz);
        let z = tape.sigmoid(zb);

        let rx = tape.matvec(self.wr, x);
        let rh = tape.matvec(self.ur, h);
        let rs = tape.add(rx, rh);
        let rb = tape.add(rs, self.br);
        let r = tape.sigmoid(rb);

        let nx = tape.matvec(self.wn, x);
        let nh = tape.matvec(self.un, h);
        let nrh = tape.mul(r, nh);
        let ns = tape.add(nx, nrh);
        let nb = tape.add(ns, self.bn);
        let n = tape.tanh(nb);

        // h' = (1 - z) * h + z * n
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let keep = tape.mul(one_minus_z, h);
        let write = tape.mul(z, n);
        tape.add(keep, write)
    }
}

impl BoundSeq2Seq {
    /// Bound tensors in the same order as [`Seq2SeqParams::params`].
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn embedding(&self) -> Tensor {
        self.tensors[0]
    }

    fn gru(&self, offset: usize) -> BoundGru {
        let t = &self.tensors;
        BoundGru {
            wz: t[offset],
            uz: t[offset + 1],
            bz: t[offset + 2],
            wr: t[offset + 3],
            ur: t[offset + 4],
            br: t[offset + 5],
            wn: t[offset + 6],
            un: t[offset + 7],
            bn: t[offset + 8],
        }
    }

    fn encoder_gru(&self) -> BoundGru {
        self.gru(1)
    }

    fn decoder_gru(&self) -> BoundGru {
        self.gru(10)
    }

    fn combine_w(&self) -> Tensor {
        self.tensors[19]
    }

    fn combine_b(&self) -> Tensor {
        self.tensors[20]
    }

    fn out_w(&self) -> Tensor {
        self.tensors[21]
    }

    fn out_b(&self) -> Tensor {
        self.tensors[22]
    }

    /// Runs the encoder over the unmasked positions of `q`. Padding beyond
    /// EOS never enters the recurrence, so it cannot change the pooled state.
    pub fn encode_query(&self, tape: &mut Tape, q: &Row) -> EncoderOutput {
        assert!(q.len >= 1, "encode_query: empty row");
        let gru = self.encoder_gru();
        run_encoder(
            tape,
            self.embedding(),
            &gru,
            &q.ids[..q.len],
            self.config.hidden_dim,
        )
    }

    /// One decoder step: GRU update on the previous token's embedding, then
    /// dot-product attention over the encoder states, then the output head.
    /// Returns the next-token distribution and the new decoder state.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        prev_token: usize,
        state: Tensor,
    ) -> (Tensor, Tensor) {
        let gru = self.decoder_gru();
        let emb = self.embedding();
        let x = tape.embed_row(emb, prev_token);
        let s = gru.step(tape, x, state);

        let scores = tape.matvec(enc.states, s);
        let att = tape.softmax(scores);
        let ctx = tape.vecmat(att, enc.states);

        let joined = tape.concat(&[s, ctx]);
        let mixed = tape.matvec(self.combine_w(), joined);
        let mixed_b = tape.add(mixed, self.combine_b());
        let o = tape.tanh(mixed_b);

        let logits = tape.vecmat(o, self.out_w());
        let logits_b = tape.add(logits, self.out_b());
        let dist = tape.softmax(logits_b);
        (dist, s)
    }

    fn initial_state(&self, tape: &mut Tape) -> Tensor {
        tape.zeros(&[self.config.hidden_dim])
    }

    /// Per-step next-token distributions conditioned on the gold history
    /// (`BOS, target[0], target[1], ...`). Distributions are produced for
    /// every position of `target`, including padding; losses mask them.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        target: &Row,
    ) -> Vec<Tensor> {
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut dists = Vec::with_capacity(target.ids.len());
        for t in 0..target.ids.len() {
            let (dist, s) = self.decoder_step(tape, enc, prev, state);
            dists.push(dist);
            state = s;
            prev = target.ids[t];
        }
        dists
    }

    /// Samples a trajectory. Tokens are drawn from `softmax(ln p / temperature)`
    /// of each step's distribution; the recorded log-probabilities are always
    /// the model's own (temperature 1), keeping REINFORCE on-policy at the
    /// default temperature of 1. Reproducible for a fixed rng state.
    pub fn sample_trajectory(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        max_len: usize,
        temperature: f64,
        rng: &mut StdRng,
    ) -> Trajectory {
        assert!(
            temperature > 0.0,
            "sample_trajectory: temperature must be positive"
        );
        let mut traj = Trajectory {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            log_prob_nodes: Vec::new(),
            step_dists: Vec::new(),
            reward: None,
            advantage: None,
            mode: DecodeMode::Sampled,
        };
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        for _ in 0..max_len {
            let (dist, s) = self.decoder_step(tape, enc, prev, state);
            state = s;
            let token = sample_index(tape.data(dist), temperature, rng);
            let lp = tape.log_prob_gather(dist, token);
            traj.tokens.push(token);
            traj.log_probs.push(tape.value(lp));
            traj.log_prob_nodes.push(lp);
            traj.step_dists.push(dist);
            prev = token;
            if token == EOS {
                break;
            }
        }
        traj
    }

    /// Argmax decoding, ties broken by lowest token id. Deterministic.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        max_len: usize,
    ) -> Trajectory {
        let mut traj = Trajectory {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            log_prob_nodes: Vec::new(),
            step_dists: Vec::new(),
            reward: None,
            advantage: None,
            mode: DecodeMode::Greedy,
        };
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        for _ in 0..max_len {
            let (dist, s) = self.decoder_step(tape, enc, prev, state);
            state = s;
            let token = argmax(tape.data(dist));
            let lp = tape.log_prob_gather(dist, token);
            traj.tokens.push(token);
            traj.log_probs.push(tape.value(lp));
            traj.log_prob_nodes.push(lp);
            traj.step_dists.push(dist);
            prev = token;
            if token == EOS {
                break;
            }
        }
        traj
    }

    /// Beam search with width `k`. Hypothesis score is the sum of per-step
    /// log-probabilities; completed hypotheses compete with live ones by
    /// total log-prob, with no length normalization. `k = 1` reproduces
    /// greedy decoding exactly. Returns up to `k` trajectories sorted by
    /// descending score; every one ends in EOS or has length `max_len`.
    pub fn beam_search(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        k: usize,
        max_len: usize,
    ) -> Vec<Trajectory> {
        assert!(k >= 1, "beam_search: beam width must be at least 1");

        struct Hyp {
            tokens: Vec<usize>,
            log_probs: Vec<f64>,
            log_prob_nodes: Vec<Tensor>,
            step_dists: Vec<Tensor>,
            score: f64,
            state: Option<Tensor>, // None once complete
            prev: usize,
        }

        // (parent index, token, token log-prob, total score, dist/state nodes)
        type Candidate = (usize, Option<usize>, f64, f64, Option<(Tensor, Tensor)>);

        let root = Hyp {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            log_prob_nodes: Vec::new(),
            step_dists: Vec::new(),
            score: 0.0,
            state: Some(self.initial_state(tape)),
            prev: BOS,
        };
        let mut beams = vec![root];

        for _ in 0..max_len {
            if beams.iter().all(|h| h.state.is_none()) {
                break;
            }
            let mut candidates: Vec<Candidate> = Vec::new();
            for (pi, hyp) in beams.iter().enumerate() {
                match hyp.state {
                    None => candidates.push((pi, None, 0.0, hyp.score, None)),
                    Some(state) => {
                        let (dist, s) = self.decoder_step(tape, enc, hyp.prev, state);
                        let probs = tape.data(dist).to_vec();
                        for (tok, p) in probs.iter().enumerate() {
                            let lp = p.max(PROB_FLOOR).ln();
                            candidates.push((pi, Some(tok), lp, hyp.score + lp, Some((dist, s))));
                        }
                    }
                }
            }
            // Stable sort: candidates were generated in (parent, token id)
            // order, so equal scores resolve to the lowest token id.
            candidates.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
            candidates.truncate(k);

            let mut next = Vec::with_capacity(candidates.len());
            for (pi, tok, lp, score, nodes) in candidates {
                let parent = &beams[pi];
                match tok {
                    None => next.push(Hyp {
                        tokens: parent.tokens.clone(),
                        log_probs: parent.log_probs.clone(),
                        log_prob_nodes: parent.log_prob_nodes.clone(),
                        step_dists: parent.step_dists.clone(),
                        score,
                        state: None,
                        prev: parent.prev,
                    }),
                    Some(tok) => {
                        let (dist, s) = nodes.unwrap();
                        let lp_node = tape.log_prob_gather(dist, tok);
                        let mut tokens = parent.tokens.clone();
                        tokens.push(tok);
                        let mut log_probs = parent.log_probs.clone();
                        log_probs.push(lp);
                        let mut log_prob_nodes = parent.log_prob_nodes.clone();
                        log_prob_nodes.push(lp_node);
                        let mut step_dists = parent.step_dists.clone();
                        step_dists.push(dist);
                        next.push(Hyp {
                            tokens,
                            log_probs,
                            log_prob_nodes,
                            step_dists,
                            score,
                            state: if tok == EOS { None } else { Some(s) },
                            prev: tok,
                        });
                    }
                }
            }
            beams = next;
        }

        beams
            .into_iter()
            .map(|h| Trajectory {
                tokens: h.tokens,
                log_probs: h.log_probs,
                log_prob_nodes: h.log_prob_nodes,
                step_dists: h.step_dists,
                reward: None,
                advantage: None,
                mode: DecodeMode::Beam,
            })
            .collect()
    }

    /// `sum_t ln p(r_t | r_<t, q)` as a differentiable scalar. Conventionally
    /// `r` ends with EOS; truncated sequences are scored as-is.
    pub fn sequence_log_prob(&self, tape: &mut Tape, q: &Row, r: &[usize]) -> Tensor {
        assert!(!r.is_empty(), "sequence_log_prob: empty sequence");
        let enc = self.encode_query(tape, &q.trimmed());
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut lps = Vec::with_capacity(r.len());
        for &tok in r {
            let (dist, s) = self.decoder_step(tape, &enc, prev, state);
            state = s;
            lps.push(tape.log_prob_gather(dist, tok));
            prev = tok;
        }
        let all = tape.concat(&lps);
        tape.sum(all)
    }
}

/// Shared recurrent text encoder: embeds `ids`, runs the GRU, and returns
/// the stacked per-position states plus their mean.
pub(crate) fn run_encoder(
    tape: &mut Tape,
    embedding: Tensor,
    gru: &BoundGru,
    ids: &[usize],
    hidden_dim: usize,
) -> EncoderOutput {
    assert!(!ids.is_empty(), "run_encoder: empty input");
    let mut state = tape.zeros(&[hidden_dim]);
    let mut states = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = tape.embed_row(embedding, id);
        state = gru.step(tape, x, state);
        states.push(state);
    }
    let stacked = tape.stack_rows(&states);
    let k = states.len();
    let weights = tape.vector(vec![1.0 / k as f64; k]);
    let pooled = tape.vecmat(weights, stacked);
    EncoderOutput {
        states: stacked,
        pooled,
        len: k,
    }
}

/// Index of the maximum value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(ln p / temperature)` by inverse CDF.
/// At temperature 1 this is exactly the given distribution.
fn sample_index(probs: &[f64], temperature: f64, rng: &mut StdRng) -> usize {
    let max_lp = probs
        .iter()
        .map(|p| p.max(PROB_FLOOR).ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = probs
        .iter()
        .map(|p| ((p.max(PROB_FLOOR).ln() - max_lp) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
