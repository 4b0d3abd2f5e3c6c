//! Training losses and baselines: MLE, the REINFORCE surrogate with three
//! baseline variants, entropy regularization, unlikelihood, and the mixed
//! objective. Also the plain-SGD-with-clipping update rule used throughout.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::model::{Param, Trajectory, INIT_RANGE};
use crate::numerics::{Tape, Tensor};
use crate::text::Row;

/// Default entropy regularizer weight.
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 0.01;
/// Default unlikelihood weight.
pub const DEFAULT_UNLIKELIHOOD_ALPHA: f64 = 1.0;
/// Default gradient-norm clip.
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

/// Which baseline produced an advantage batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Mean,
    Critic,
    SelfCritical,
}

/// Per-sample rewards, baselines and advantages `A^i = R^i - B^i`.
#[derive(Debug, Clone)]
pub struct AdvantageBatch {
    pub rewards: Vec<f64>,
    pub baselines: Vec<f64>,
    pub advantages: Vec<f64>,
    pub kind: BaselineKind,
}

impl AdvantageBatch {
    pub fn new(rewards: Vec<f64>, baselines: Vec<f64>, kind: BaselineKind) -> Self {
        assert_eq!(
            rewards.len(),
            baselines.len(),
            "advantage batch: length mismatch"
        );
        let advantages = rewards.iter().zip(&baselines).map(|(r, b)| r - b).collect();
        AdvantageBatch {
            rewards,
            baselines,
            advantages,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Mean-of-batch baseline: `B^i = mean(R)` for every sample.
pub fn mean_baseline(rewards: &[f64]) -> AdvantageBatch {
    assert!(!rewards.is_empty(), "mean_baseline: empty batch");
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    AdvantageBatch::new(
        rewards.to_vec(),
        vec![mean; rewards.len()],
        BaselineKind::Mean,
    )
}

/// Self-critical baseline: the greedy decode's reward for the same query.
pub fn self_critical_baseline(sampled_rewards: &[f64], greedy_rewards: &[f64]) -> AdvantageBatch {
    assert_eq!(
        sampled_rewards.len(),
        greedy_rewards.len(),
        "self_critical_baseline: sampled and greedy batches must pair up"
    );
    AdvantageBatch::new(
        sampled_rewards.to_vec(),
        greedy_rewards.to_vec(),
        BaselineKind::SelfCritical,
    )
}

/// Two affine layers with a tanh between: `[h -> h_c -> 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

pub const CRITIC_PARAM_NAMES: [&str; 4] = ["critic.w1", "critic.b1", "critic.w2", "critic.b2"];

impl CriticParams {
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        CriticParams {
            input_dim,
            hidden_dim,
            w1: Param::uniform(&[hidden_dim, input_dim], INIT_RANGE, &mut rng),
            b1: Param::uniform(&[hidden_dim], INIT_RANGE, &mut rng),
            w2: Param::uniform(&[hidden_dim], INIT_RANGE, &mut rng),
            b2: Param::uniform(&[1], INIT_RANGE, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Param)> {
        CRITIC_PARAM_NAMES
            .iter()
            .copied()
            .zip(self.params())
            .collect()
    }

    /// Copies the critic weights onto `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundCritic {
        BoundCritic {
            w1: tape.leaf(self.w1.data.clone(), &self.w1.shape),
            b1: tape.leaf(self.b1.data.clone(), &self.b1.shape),
            w2: tape.leaf(self.w2.data.clone(), &self.w2.shape),
            b2: tape.leaf(self.b2.data.clone(), &self.b2.shape),
        }
    }
}

/// Critic weights bound onto one tape.
pub struct BoundCritic {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl BoundCritic {
    /// Bound tensors in [`CriticParams::params`] order.
    pub fn tensors(&self) -> [Tensor; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Raw (unclamped) value head.
    pub fn value_raw(&self, tape: &mut Tape, input: Tensor) -> Tensor {
        let pre = tape.matvec(self.w1, input);
        let pre_b = tape.add(pre, self.b1);
        let hidden = tape.tanh(pre_b);
        let out = tape.dot(self.w2, hidden);
        tape.add(out, self.b2)
    }
}

/// `B^i = clamp(f_c(pooled^i), 0, 1)`. Pooled states arrive as plain values,
/// already detached from the policy tape, so no policy gradient can leak
/// through the critic input.
pub fn critic_baseline(critic: &CriticParams, pooled: &[Vec<f64>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = critic.bind(&mut tape);
    pooled
        .iter()
        .map(|p| {
            let x = tape.vector(p.clone());
            let raw = bound.value_raw(&mut tape, x);
            let clamped = tape.clamp01(raw);
            tape.value(clamped)
        })
        .collect()
}

/// One SGD step on the mean-squared error between the critic's raw outputs
/// and the observed rewards. Returns the pre-step MSE. The baseline clamp is
/// applied only at prediction time so regression targets outside the current
/// output range still produce gradient.
pub fn critic_update(
    critic: &mut CriticParams,
    pooled: &[Vec<f64>],
    rewards: &[f64],
    learning_rate: f64,
) -> f64 {
    assert_eq!(
        pooled.len(),
        rewards.len(),
        "critic_update: batch length mismatch"
    );
    assert!(!pooled.is_empty(), "critic_update: empty batch");
    let mut tape = Tape::new();
    let bound = critic.bind(&mut tape);
    let loss = critic_mse_loss(&mut tape, &bound, pooled, rewards);
    let loss_value = tape.value(loss);
    tape.backward(loss);
    sgd_step(
        &tape,
        &bound.tensors(),
        critic.params_mut(),
        learning_rate,
        DEFAULT_GRAD_CLIP,
    );
    loss_value
}

/// Mean-squared error between the bound critic's raw outputs and rewards,
/// as a differentiable scalar.
pub fn critic_mse_loss(
    tape: &mut Tape,
    bound: &BoundCritic,
    pooled: &[Vec<f64>],
    rewards: &[f64],
) -> Tensor {
    assert_eq!(
        pooled.len(),
        rewards.len(),
        "critic_mse_loss: batch length mismatch"
    );
    assert!(!pooled.is_empty(), "critic_mse_loss: empty batch");
    let mut sq_errors = Vec::with_capacity(pooled.len());
    for (p, r) in pooled.iter().zip(rewards) {
        let x = tape.vector(p.clone());
        let pred = bound.value_raw(tape, x);
        let err = tape.affine(pred, 1.0, -r);
        sq_errors.push(tape.mul(err, err));
    }
    let all = tape.concat(&sq_errors);
    let total = tape.sum(all);
    tape.affine(total, 1.0 / pooled.len() as f64, 0.0)
}

/// Masked sum of `-ln p(target_t)` over the unmasked steps; equals the
/// negative sequence log-probability of the target. All-masked input yields
/// a zero loss with a warning.
pub fn mle_loss(tape: &mut Tape, distributions: &[Tensor], target: &Row) -> Tensor {
    let steps = distributions.len().min(target.ids.len());
    let mut terms = Vec::new();
    for t in 0..steps.min(target.len) {
        let lp = tape.log_prob_gather(distributions[t], target.ids[t]);
        terms.push(lp);
    }
    if terms.is_empty() {
        eprintln!("warning: mle_loss over an all-masked target; returning zero loss");
        return tape.scalar(0.0);
    }
    let all = tape.concat(&terms);
    let total = tape.sum(all);
    tape.affine(total, -1.0, 0.0)
}

/// REINFORCE surrogate: `-(1/b) sum_i A^i sum_t ln p(r^i_t | .)`.
/// Advantages are plain numbers (detached); its gradient is the REINFORCE
/// estimate of `-grad J`.
pub fn reinforce_surrogate_loss(
    tape: &mut Tape,
    trajectories: &[Trajectory],
    advantages: &AdvantageBatch,
) -> Tensor {
    assert!(
        !trajectories.is_empty(),
        "reinforce_surrogate_loss: empty batch"
    );
    assert_eq!(
        trajectories.len(),
        advantages.len(),
        "reinforce_surrogate_loss: trajectory/advantage length mismatch"
    );
    let b = trajectories.len() as f64;
    let mut terms = Vec::with_capacity(trajectories.len());
    for (traj, adv) in trajectories.iter().zip(&advantages.advantages) {
        let seq = tape.concat(&traj.log_prob_nodes);
        let total = tape.sum(seq);
        terms.push(tape.affine(total, -adv / b, 0.0));
    }
    let all = tape.concat(&terms);
    tape.sum(all)
}

/// `lambda * sum_t sum_j p ln p` over the unmasked steps. Added to a
/// minimized loss this maximizes entropy, since `sum p ln p` is `-H`.
pub fn entropy_regularizer(
    tape: &mut Tape,
    distributions: &[Tensor],
    mask: &[bool],
    lambda: f64,
) -> Tensor {
    assert_eq!(
        distributions.len(),
        mask.len(),
        "entropy_regularizer: mask length mismatch"
    );
    let mut terms = Vec::new();
    for (dist, keep) in distributions.iter().zip(mask) {
        if !keep {
            continue;
        }
        let logs = tape.ln_clamped(*dist);
        terms.push(tape.dot(*dist, logs));
    }
    if terms.is_empty() {
        return tape.scalar(0.0);
    }
    let all = tape.concat(&terms);
    let total = tape.sum(all);
    tape.affine(total, lambda, 0.0)
}

/// Negative candidates at step `t` (0-based): tokens generated before `t`,
/// minus the step's own token. Sorted ascending for determinism.
pub fn negative_candidates(tokens: &[usize], t: usize) -> Vec<usize> {
    let mut set: Vec<usize> = tokens[..t].to_vec();
    set.sort_unstable();
    set.dedup();
    set.retain(|c| *c != tokens[t]);
    set
}

/// Unlikelihood-augmented NLL over a generated sequence:
/// `sum_t [ -ln p(r_t) - alpha * sum_{c in C^t} ln(1 - p(c)) ]`.
pub fn unlikelihood_loss(
    tape: &mut Tape,
    distributions: &[Tensor],
    tokens: &[usize],
    alpha: f64,
) -> Tensor {
    assert!(alpha >= 0.0, "unlikelihood_loss: alpha must be nonnegative");
    assert!(
        distributions.len() >= tokens.len(),
        "unlikelihood_loss: need one distribution per token"
    );
    let mut terms = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        let lp = tape.log_prob_gather(distributions[t], tok);
        terms.push(tape.affine(lp, -1.0, 0.0));
        if alpha == 0.0 {
            continue;
        }
        for c in negative_candidates(tokens, t) {
            let p = tape.gather(distributions[t], c);
            let one_minus = tape.affine(p, -1.0, 1.0);
            let ln = tape.ln_clamped(one_minus);
            terms.push(tape.affine(ln, -alpha, 0.0));
        }
    }
    let all = tape.concat(&terms);
    tape.sum(all)
}

/// `w_pg * pg_loss + w_sc * sc_loss`; the fluency signal enters through the
/// reward channel, not here.
pub fn mixed_objective(
    tape: &mut Tape,
    pg_loss: Tensor,
    sc_loss: Tensor,
    w_pg: f64,
    w_sc: f64,
) -> Tensor {
    let a = tape.affine(pg_loss, w_pg, 0.0);
    let b = tape.affine(sc_loss, w_sc, 0.0);
    tape.add(a, b)
}

/// Global L2 norm of the gradients of `bound` on `tape`.
pub fn grad_norm(tape: &Tape, bound: &[Tensor]) -> f64 {
    bound
        .iter()
        .flat_map(|t| tape.grad(*t).iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Plain SGD with global gradient-norm clipping. `bound` and `params` must
/// be aligned (same order, same shapes). Panics if an update produces a
/// non-finite weight.
pub fn sgd_step(
    tape: &Tape,
    bound: &[Tensor],
    params: Vec<&mut Param>,
    learning_rate: f64,
    clip: f64,
) {
    assert_eq!(bound.len(), params.len(), "sgd_step: bound/param mismatch");
    let norm = grad_norm(tape, bound);
    let scale = if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    };
    for (t, p) in bound.iter().zip(params) {
        let g = tape.grad(*t);
        assert_eq!(g.len(), p.data.len(), "sgd_step: shape mismatch");
        for (w, gv) in p.data.iter_mut().zip(g) {
            *w -= learning_rate * scale * gv;
            assert!(w.is_finite(), "sgd_step: non-finite weight after update");
        }
    }
}
