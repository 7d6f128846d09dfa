//! GFlowNet policies over the bit-painting DAG: masked action distributions,
//! trajectory sampling in both directions, the trajectory balance objective,
//! and the importance-sampled likelihood estimator.
//!
//! Anything that only needs action probabilities is generic over [`Policy`],
//! so the exact tabular policies built from dense flows plug into the same
//! sampling and estimation code as the neural sampler.

use crate::nn::{
    clip_global_norm, mlp_apply_batch, mlp_forward_batch, mlp_grad_batch, Activation, AdamState,
    MlpSpec, NnError, ParamStore,
};
use crate::state::{Action, Direction, State, Trajectory};
use crate::util::{derive_seed, log_sum_exp, rng_from_seed};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::fmt;

/// Trajectories per chunk in the batched loss pass; fixed so that results are
/// independent of thread count.
const TRAJ_CHUNK: usize = 32;
/// Rows per chunk in the batched likelihood estimator.
const EVAL_CHUNK: usize = 4096;

/// Floor applied to log-rewards before they enter the balance loss.
pub const LOG_REWARD_FLOOR: f64 = -500.0;

#[derive(Clone, Debug)]
pub enum PolicyError {
    NonFiniteLogReward(f64),
    /// Backward steps outside `1..=num_set`.
    InvalidBackwardSteps { requested: usize, available: usize },
    IncompleteTrajectory { len: usize, dim: usize },
    Nn(NnError),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::NonFiniteLogReward(v) => write!(f, "non-finite log reward {v}"),
            PolicyError::InvalidBackwardSteps { requested, available } => {
                write!(f, "backward steps {requested} outside 1..={available}")
            }
            PolicyError::IncompleteTrajectory { len, dim } => {
                write!(f, "trajectory has {len} actions, expected {dim}")
            }
            PolicyError::Nn(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PolicyError {}

impl From<NnError> for PolicyError {
    fn from(e: NnError) -> Self {
        PolicyError::Nn(e)
    }
}

/// Action distributions of a GFlowNet-like sampler.
///
/// `distributions` returns masked probabilities over the flat action layouts:
/// forward probabilities of length `2D` (index `2*position + bit`) and
/// backward erase probabilities of length `D`. Invalid actions carry exactly
/// zero probability; a terminal state has an all-zero forward side and the
/// initial state an all-zero backward side.
pub trait Policy {
    fn dim(&self) -> usize;
    fn distributions(&self, s: &State) -> (Vec<f64>, Vec<f64>);
    fn log_z(&self) -> f64;
}

/// Sampling-time perturbation of the forward policy. Only the sampling
/// distribution changes; cached and recomputed log-probabilities always come
/// from the unperturbed policy.
#[derive(Clone, Copy, Debug)]
pub struct ExplorationCfg {
    /// Probability mass mixed in from the uniform distribution over valid actions.
    pub epsilon: f64,
    /// Softmax temperature on the forward logits; 0 means greedy.
    pub temperature: f64,
}

impl Default for ExplorationCfg {
    fn default() -> Self {
        ExplorationCfg { epsilon: 0.05, temperature: 1.0 }
    }
}

impl ExplorationCfg {
    pub fn none() -> Self {
        ExplorationCfg { epsilon: 0.0, temperature: 1.0 }
    }

    fn is_off(&self) -> bool {
        self.epsilon == 0.0 && self.temperature == 1.0
    }
}

/// The trajectory balance residual `log Z + sum log P_F - sum log P_B - log R`;
/// the loss is its square.
pub fn tb_residual(log_z: f64, log_pf: f64, log_pb: f64, log_reward: f64) -> f64 {
    log_z + log_pf - log_pb - log_reward
}

/// Log-probabilities of a trajectory's edges under `policy`, recomputed from
/// scratch: `(sum log P_F, sum log P_B)`.
pub fn trajectory_log_probs<P: Policy>(policy: &P, traj: &Trajectory) -> (f64, f64) {
    let mut log_pf = 0.0;
    let mut log_pb = 0.0;
    for (t, &(pos, val)) in traj.actions.iter().enumerate() {
        let (pf, _) = policy.distributions(&traj.states[t]);
        let (_, pb) = policy.distributions(&traj.states[t + 1]);
        log_pf += pf[Action::forward_index(pos, val)].ln();
        log_pb += pb[pos].ln();
    }
    (log_pf, log_pb)
}

/// Squared trajectory balance residual of a complete trajectory, recomputed
/// under `policy`. Exploration during sampling never enters here.
pub fn tb_loss<P: Policy>(
    policy: &P,
    traj: &Trajectory,
    log_reward: f64,
) -> Result<f64, PolicyError> {
    if !log_reward.is_finite() {
        return Err(PolicyError::NonFiniteLogReward(log_reward));
    }
    if !traj.is_complete() {
        return Err(PolicyError::IncompleteTrajectory {
            len: traj.len(),
            dim: traj.start.dim(),
        });
    }
    let (log_pf, log_pb) = trajectory_log_probs(policy, traj);
    Ok(tb_residual(policy.log_z(), log_pf, log_pb, log_reward).powi(2))
}

fn sample_from_probs<R: Rng>(probs: &[f64], valid: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let mut last_valid = None;
    for (i, (&p, &v)) in probs.iter().zip(valid).enumerate() {
        if !v {
            continue;
        }
        last_valid = Some(i);
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    last_valid.expect("state has at least one valid action")
}

/// Perturb masked probabilities for sampling: temper, then mix with uniform.
fn explored_probs(probs: &[f64], valid: &[bool], explore: &ExplorationCfg) -> Vec<f64> {
    let n_valid = valid.iter().filter(|&&v| v).count() as f64;
    let mut out = vec![0.0; probs.len()];
    if explore.temperature == 0.0 {
        // Greedy: all mass on the argmax among valid actions.
        let mut best = None;
        for (i, (&p, &v)) in probs.iter().zip(valid).enumerate() {
            if v && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((i, p));
            }
        }
        if let Some((i, _)) = best {
            out[i] = 1.0;
        }
    } else if explore.temperature == 1.0 {
        out.copy_from_slice(probs);
    } else {
        let inv_t = 1.0 / explore.temperature;
        let mut sum = 0.0;
        for (i, (&p, &v)) in probs.iter().zip(valid).enumerate() {
            if v {
                let q = p.powf(inv_t);
                out[i] = q;
                sum += q;
            }
        }
        if sum > 0.0 {
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
    }
    if explore.epsilon > 0.0 {
        for (o, &v) in out.iter_mut().zip(valid) {
            if v {
                *o = (1.0 - explore.epsilon) * *o + explore.epsilon / n_valid;
            }
        }
    }
    out
}

/// Sample forward from `start` until a terminal state is reached, caching
/// unperturbed log-probabilities of both policies along the way.
pub fn sample_forward_from<P: Policy, R: Rng>(
    policy: &P,
    start: &State,
    rng: &mut R,
    explore: &ExplorationCfg,
) -> Trajectory {
    let mut states = vec![start.clone()];
    let mut actions = Vec::new();
    let mut log_pf = 0.0;
    let mut log_pb = 0.0;
    let mut cur = start.clone();
    while !cur.is_terminal() {
        let (pf, _) = policy.distributions(&cur);
        let (fwd_mask, _) = cur.action_masks();
        let idx = if explore.is_off() {
            sample_from_probs(&pf, &fwd_mask, rng)
        } else {
            let q = explored_probs(&pf, &fwd_mask, explore);
            sample_from_probs(&q, &fwd_mask, rng)
        };
        let Action::Forward { position, value } = Action::forward_from_index(idx) else {
            unreachable!()
        };
        log_pf += pf[idx].ln();
        cur = cur.apply_forward(position, value).expect("masked action is valid");
        let (_, pb) = policy.distributions(&cur);
        log_pb += pb[position].ln();
        actions.push((position, value));
        states.push(cur.clone());
    }
    Trajectory {
        start: start.clone(),
        actions,
        states,
        log_pf,
        log_pb,
        direction: Direction::SampledForward,
    }
}

/// Sample a complete trajectory from the initial state.
pub fn sample_forward_trajectory<P: Policy, R: Rng>(
    policy: &P,
    rng: &mut R,
    explore: &ExplorationCfg,
) -> Trajectory {
    sample_forward_from(policy, &State::initial(policy.dim()), rng, explore)
}

/// Sample `k` backward (erasing) steps from `anchor` under the backward
/// policy. The result is forward-oriented: its start is the shallowest state
/// and its cached sums cover exactly the `k` traversed edges.
pub fn sample_backward_trajectory<P: Policy, R: Rng>(
    policy: &P,
    anchor: &State,
    k: usize,
    rng: &mut R,
) -> Result<Trajectory, PolicyError> {
    let available = anchor.num_set();
    if k == 0 || k > available {
        return Err(PolicyError::InvalidBackwardSteps { requested: k, available });
    }
    let mut rev_states = vec![anchor.clone()];
    let mut rev_actions: Vec<(usize, bool)> = Vec::with_capacity(k);
    let mut log_pf = 0.0;
    let mut log_pb = 0.0;
    let mut cur = anchor.clone();
    for _ in 0..k {
        let (_, pb) = policy.distributions(&cur);
        let (_, bwd_mask) = cur.action_masks();
        let pos = sample_from_probs(&pb, &bwd_mask, rng);
        let bit = cur.cell(pos).bit().expect("masked position holds a bit");
        log_pb += pb[pos].ln();
        cur = cur.apply_backward(pos).expect("masked action is valid");
        let (pf, _) = policy.distributions(&cur);
        log_pf += pf[Action::forward_index(pos, bit)].ln();
        rev_actions.push((pos, bit));
        rev_states.push(cur.clone());
    }
    rev_states.reverse();
    rev_actions.reverse();
    Ok(Trajectory {
        start: rev_states[0].clone(),
        actions: rev_actions,
        states: rev_states,
        log_pf,
        log_pb,
        direction: Direction::SampledBackward,
    })
}

/// Importance-sampled log-likelihood of a terminal state (single-policy,
/// single-threaded form): log of the mean of `P_F(tau)/P_B(tau|x)` over `m`
/// backward-sampled complete trajectories.
pub fn estimate_log_pt<P: Policy, R: Rng>(
    policy: &P,
    x: &State,
    m: usize,
    rng: &mut R,
) -> Result<f64, PolicyError> {
    if m == 0 {
        return Err(PolicyError::InvalidBackwardSteps { requested: 0, available: m });
    }
    let k = x.num_set();
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        let traj = sample_backward_trajectory(policy, x, k, rng)?;
        weights.push(traj.log_pf - traj.log_pb);
    }
    Ok(log_sum_exp(&weights) - (m as f64).ln())
}

/// Masked log-softmax: returns `-inf` at invalid entries.
pub fn masked_log_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for (&l, &v) in logits.iter().zip(valid) {
        if v && l > mx {
            mx = l;
        }
    }
    let mut sum = 0.0;
    for (&l, &v) in logits.iter().zip(valid) {
        if v {
            sum += (l - mx).exp();
        }
    }
    let lse = mx + sum.ln();
    logits
        .iter()
        .zip(valid)
        .map(|(&l, &v)| if v { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn masked_softmax(logits: &[f64], valid: &[bool]) -> Vec<f64> {
    masked_log_softmax(logits, valid)
        .into_iter()
        .map(|lp| if lp.is_finite() { lp.exp() } else { 0.0 })
        .collect()
}

/// The neural GFlowNet: a shared MLP trunk whose final layer emits `2D`
/// forward logits and `D` backward logits, plus a free `log_z` scalar stored
/// alongside the network parameters.
#[derive(Clone, Debug)]
pub struct GFlowNet {
    pub d: usize,
    pub spec: MlpSpec,
    pub params: ParamStore,
    /// Replace the learned backward head with the canonical uniform policy.
    pub uniform_backward: bool,
}

impl GFlowNet {
    pub fn new<R: Rng>(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        layer_norm: bool,
        uniform_backward: bool,
        rng: &mut R,
    ) -> Self {
        let spec = MlpSpec::new(d, hidden, 3 * d, activation).with_layer_norm(layer_norm);
        spec.validate().expect("valid policy spec");
        let mut params = spec.init_params(rng);
        params.set_scalar("log_z", 0.0);
        GFlowNet { d, spec, params, uniform_backward }
    }

    pub fn from_parts(spec: MlpSpec, params: ParamStore, uniform_backward: bool) -> Self {
        let d = spec.input;
        GFlowNet { d, spec, params, uniform_backward }
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.params.set_scalar("log_z", v);
    }

    fn encode_rows(&self, states: &[&State]) -> Array2<f64> {
        let mut x = Array2::zeros((states.len(), self.d));
        for (mut row, s) in x.rows_mut().into_iter().zip(states) {
            s.encode_into(row.as_slice_mut().expect("contiguous row"));
        }
        x
    }

    fn logits_rows(&self, states: &[&State]) -> Result<Array2<f64>, NnError> {
        let x = self.encode_rows(states);
        mlp_forward_batch(&self.spec, &self.params, &x)
    }

    /// Backward probabilities at `s`, honoring `uniform_backward`.
    fn backward_probs(&self, s: &State, logits: &[f64]) -> Vec<f64> {
        let (_, bwd_mask) = s.action_masks();
        if self.uniform_backward {
            let n = s.num_set();
            bwd_mask
                .iter()
                .map(|&v| if v { 1.0 / n as f64 } else { 0.0 })
                .collect()
        } else {
            masked_softmax(&logits[2 * self.d..], &bwd_mask)
        }
    }

    /// Masked forward and backward distributions at a state.
    pub fn policy_distributions(&self, s: &State) -> (Vec<f64>, Vec<f64>) {
        let logits = self
            .logits_rows(&[s])
            .expect("state encoding matches spec input");
        let row = logits.row(0);
        let row = row.as_slice().expect("contiguous row");
        let (fwd_mask, _) = s.action_masks();
        let pf = if s.is_terminal() {
            vec![0.0; 2 * self.d]
        } else {
            masked_softmax(&row[..2 * self.d], &fwd_mask)
        };
        let pb = if s.is_initial() {
            vec![0.0; self.d]
        } else {
            self.backward_probs(s, row)
        };
        (pf, pb)
    }

    /// Batched forward rollouts from arbitrary start states. One network
    /// evaluation per visited state serves both heads.
    pub fn sample_forward_from_batch<R: Rng>(
        &self,
        starts: &[State],
        rng: &mut R,
        explore: &ExplorationCfg,
    ) -> Vec<Trajectory> {
        let d = self.d;
        let n = starts.len();
        let mut cur: Vec<State> = starts.to_vec();
        let mut actions: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n];
        let mut states: Vec<Vec<State>> = starts.iter().map(|s| vec![s.clone()]).collect();
        let mut log_pf = vec![0.0; n];
        let mut log_pb = vec![0.0; n];
        // Index of a freshly painted position whose backward probability is
        // still owed (learned backward policy only).
        let mut pending: Vec<Option<usize>> = vec![None; n];

        loop {
            let mut rows: Vec<usize> = Vec::new();
            for (i, s) in cur.iter().enumerate() {
                let needs_pf = !s.is_terminal();
                let needs_pb = pending[i].is_some() && !self.uniform_backward;
                if needs_pf || needs_pb {
                    rows.push(i);
                }
            }
            if rows.is_empty() {
                break;
            }
            let row_states: Vec<&State> = rows.iter().map(|&i| &cur[i]).collect();
            let logits = self
                .logits_rows(&row_states)
                .expect("state encoding matches spec input");
            for (r, &i) in rows.iter().enumerate() {
                let row = logits.row(r);
                let row = row.as_slice().expect("contiguous row");
                if let Some(pos) = pending[i].take() {
                    if self.uniform_backward {
                        log_pb[i] -= (cur[i].num_set() as f64).ln();
                    } else {
                        let (_, bwd_mask) = cur[i].action_masks();
                        let lp = masked_log_softmax(&row[2 * d..], &bwd_mask);
                        log_pb[i] += lp[pos];
                    }
                }
                if cur[i].is_terminal() {
                    continue;
                }
                let (fwd_mask, _) = cur[i].action_masks();
                let lp = masked_log_softmax(&row[..2 * d], &fwd_mask);
                let probs: Vec<f64> =
                    lp.iter().map(|&v| if v.is_finite() { v.exp() } else { 0.0 }).collect();
                let idx = if explore.is_off() {
                    sample_from_probs(&probs, &fwd_mask, rng)
                } else {
                    let q = explored_probs(&probs, &fwd_mask, explore);
                    sample_from_probs(&q, &fwd_mask, rng)
                };
                let (pos, val) = (idx / 2, idx % 2 == 1);
                log_pf[i] += lp[idx];
                cur[i] = cur[i].apply_forward(pos, val).expect("masked action is valid");
                actions[i].push((pos, val));
                states[i].push(cur[i].clone());
                if self.uniform_backward {
                    log_pb[i] -= (cur[i].num_set() as f64).ln();
                } else {
                    pending[i] = Some(pos);
                }
            }
        }

        (0..n)
            .map(|i| Trajectory {
                start: starts[i].clone(),
                actions: std::mem::take(&mut actions[i]),
                states: std::mem::take(&mut states[i]),
                log_pf: log_pf[i],
                log_pb: log_pb[i],
                direction: Direction::SampledForward,
            })
            .collect()
    }

    /// Batched complete rollouts from the initial state.
    pub fn sample_forward_batch<R: Rng>(
        &self,
        n: usize,
        rng: &mut R,
        explore: &ExplorationCfg,
    ) -> Vec<Trajectory> {
        let starts = vec![State::initial(self.d); n];
        self.sample_forward_from_batch(&starts, rng, explore)
    }

    /// Batched `k`-step backward rollouts from `anchors`.
    pub fn sample_backward_batch<R: Rng>(
        &self,
        anchors: &[State],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Trajectory>, PolicyError> {
        let d = self.d;
        for a in anchors {
            if k == 0 || k > a.num_set() {
                return Err(PolicyError::InvalidBackwardSteps {
                    requested: k,
                    available: a.num_set(),
                });
            }
        }
        let n = anchors.len();
        let mut cur: Vec<State> = anchors.to_vec();
        let mut rev_actions: Vec<Vec<(usize, bool)>> = vec![Vec::with_capacity(k); n];
        let mut rev_states: Vec<Vec<State>> = anchors.iter().map(|s| vec![s.clone()]).collect();
        let mut log_pf = vec![0.0; n];
        let mut log_pb = vec![0.0; n];
        // Forward probability of the edge created in the previous round is
        // evaluated at the current (shallower) state.
        let mut owed_pf: Vec<Option<(usize, bool)>> = vec![None; n];

        for round in 0..=k {
            let needs_eval = round > 0 || !self.uniform_backward;
            if needs_eval {
                let row_states: Vec<&State> = cur.iter().collect();
                let logits = self
                    .logits_rows(&row_states)
                    .expect("state encoding matches spec input");
                for i in 0..n {
                    let row = logits.row(i);
                    let row = row.as_slice().expect("contiguous row");
                    if let Some((pos, bit)) = owed_pf[i].take() {
                        let (fwd_mask, _) = cur[i].action_masks();
                        let lp = masked_log_softmax(&row[..2 * d], &fwd_mask);
                        log_pf[i] += lp[Action::forward_index(pos, bit)];
                    }
                    if round < k {
                        self.backward_step(
                            i,
                            row,
                            &mut cur,
                            &mut rev_actions,
                            &mut rev_states,
                            &mut log_pb,
                            &mut owed_pf,
                            rng,
                        );
                    }
                }
            } else {
                // Uniform backward policy needs no logits on the first round.
                for i in 0..n {
                    self.backward_step(
                        i,
                        &[],
                        &mut cur,
                        &mut rev_actions,
                        &mut rev_states,
                        &mut log_pb,
                        &mut owed_pf,
                        rng,
                    );
                }
            }
        }

        Ok((0..n)
            .map(|i| {
                let mut states = std::mem::take(&mut rev_states[i]);
                let mut acts = std::mem::take(&mut rev_actions[i]);
                states.reverse();
                acts.reverse();
                Trajectory {
                    start: states[0].clone(),
                    actions: acts,
                    states,
                    log_pf: log_pf[i],
                    log_pb: log_pb[i],
                    direction: Direction::SampledBackward,
                }
            })
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_step<R: Rng>(
        &self,
        i: usize,
        logits_row: &[f64],
        cur: &mut [State],
        rev_actions: &mut [Vec<(usize, bool)>],
        rev_states: &mut [Vec<State>],
        log_pb: &mut [f64],
        owed_pf: &mut [Option<(usize, bool)>],
        rng: &mut R,
    ) {
        let (_, bwd_mask) = cur[i].action_masks();
        let (pos, lp) = if self.uniform_backward {
            let set = cur[i].set_positions();
            let pos = set[rng.random_range(0..set.len())];
            (pos, -(set.len() as f64).ln())
        } else {
            let lp = masked_log_softmax(&logits_row[2 * self.d..], &bwd_mask);
            let probs: Vec<f64> =
                lp.iter().map(|&v| if v.is_finite() { v.exp() } else { 0.0 }).collect();
            let pos = sample_from_probs(&probs, &bwd_mask, rng);
            (pos, lp[pos])
        };
        let bit = cur[i].cell(pos).bit().expect("set position holds a bit");
        log_pb[i] += lp;
        cur[i] = cur[i].apply_backward(pos).expect("masked action is valid");
        rev_actions[i].push((pos, bit));
        rev_states[i].push(cur[i].clone());
        owed_pf[i] = Some((pos, bit));
    }

    /// Mean trajectory balance loss over complete trajectories, with
    /// gradients for every parameter including `log_z`.
    ///
    /// Work is split into fixed-size trajectory chunks and reduced in order,
    /// so the result is bit-identical at any thread count.
    pub fn tb_loss_batch(
        &self,
        trajs: &[Trajectory],
        log_rewards: &[f64],
    ) -> Result<(f64, ParamStore), PolicyError> {
        assert_eq!(trajs.len(), log_rewards.len());
        for (t, &lr) in trajs.iter().zip(log_rewards) {
            if !lr.is_finite() {
                return Err(PolicyError::NonFiniteLogReward(lr));
            }
            if !t.is_complete() {
                return Err(PolicyError::IncompleteTrajectory {
                    len: t.len(),
                    dim: t.start.dim(),
                });
            }
        }
        let b = trajs.len();
        let chunks: Vec<(usize, usize)> = (0..b)
            .step_by(TRAJ_CHUNK)
            .map(|lo| (lo, (lo + TRAJ_CHUNK).min(b)))
            .collect();
        let results: Vec<Result<(f64, ParamStore), PolicyError>> = crate::util::train_pool()
            .install(|| {
                chunks
                    .par_iter()
                    .map(|&(lo, hi)| self.tb_chunk(&trajs[lo..hi], &log_rewards[lo..hi], b))
                    .collect()
            });
        let mut loss = 0.0;
        let mut grads = self.params.zeros_like();
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_scaled(&g, 1.0);
        }
        Ok((loss, grads))
    }

    /// Loss and gradient contribution of one chunk; `total` is the full batch
    /// size used for the mean.
    fn tb_chunk(
        &self,
        trajs: &[Trajectory],
        log_rewards: &[f64],
        total: usize,
    ) -> Result<(f64, ParamStore), PolicyError> {
        let d = self.d;
        let rows_per_traj = d + 1;
        let n_rows = trajs.len() * rows_per_traj;
        let row_states: Vec<&State> = trajs.iter().flat_map(|t| t.states.iter()).collect();
        assert_eq!(row_states.len(), n_rows);
        let x = self.encode_rows(&row_states);
        let (logits, tape) = mlp_apply_batch(&self.spec, &self.params, &x)?;

        // Per-row masked log-softmaxes we will also need in the backward pass.
        let mut pf_logprobs: Vec<Option<Vec<f64>>> = vec![None; n_rows];
        let mut pb_logprobs: Vec<Option<Vec<f64>>> = vec![None; n_rows];
        let log_z = self.params.scalar("log_z")?;
        let mut residuals = Vec::with_capacity(trajs.len());
        let mut loss = 0.0;
        for (ti, traj) in trajs.iter().enumerate() {
            let mut log_pf = 0.0;
            let mut log_pb = 0.0;
            for (t, &(pos, val)) in traj.actions.iter().enumerate() {
                let row_f = ti * rows_per_traj + t;
                let row_b = row_f + 1;
                let lpf = pf_logprobs[row_f].get_or_insert_with(|| {
                    let (fwd_mask, _) = traj.states[t].action_masks();
                    let row = logits.row(row_f);
                    masked_log_softmax(&row.as_slice().unwrap()[..2 * d], &fwd_mask)
                });
                log_pf += lpf[Action::forward_index(pos, val)];
                if self.uniform_backward {
                    log_pb -= (traj.states[t + 1].num_set() as f64).ln();
                } else {
                    let lpb = pb_logprobs[row_b].get_or_insert_with(|| {
                        let (_, bwd_mask) = traj.states[t + 1].action_masks();
                        let row = logits.row(row_b);
                        masked_log_softmax(&row.as_slice().unwrap()[2 * d..], &bwd_mask)
                    });
                    log_pb += lpb[pos];
                }
            }
            let res = tb_residual(log_z, log_pf, log_pb, log_rewards[ti]);
            loss += res * res / total as f64;
            residuals.push(res);
        }

        // Cotangents: d(mean loss)/d(logits).
        let mut cot = Array2::<f64>::zeros((n_rows, 3 * d));
        let mut log_z_grad = 0.0;
        for (ti, traj) in trajs.iter().enumerate() {
            let c = 2.0 * residuals[ti] / total as f64;
            log_z_grad += c;
            for (t, &(pos, val)) in traj.actions.iter().enumerate() {
                let row_f = ti * rows_per_traj + t;
                let row_b = row_f + 1;
                let lpf = pf_logprobs[row_f].as_ref().unwrap();
                let a = Action::forward_index(pos, val);
                for (j, &lp) in lpf.iter().enumerate() {
                    if lp.is_finite() {
                        let indicator = (j == a) as usize as f64;
                        cot[[row_f, j]] += c * (indicator - lp.exp());
                    }
                }
                if !self.uniform_backward {
                    // log P_B enters the residual with a minus sign.
                    let lpb = pb_logprobs[row_b].as_ref().unwrap();
                    for (p, &lp) in lpb.iter().enumerate() {
                        if lp.is_finite() {
                            let indicator = (p == pos) as usize as f64;
                            cot[[row_b, 2 * d + p]] -= c * (indicator - lp.exp());
                        }
                    }
                }
            }
        }

        let mut grads = self.params.zeros_like();
        mlp_grad_batch(&self.spec, &self.params, &tape, &cot, &mut grads)?;
        let gz = grads.get_mut("log_z")?;
        gz.fill(log_z_grad);
        Ok((loss, grads))
    }

    /// Batched importance-sampled log-likelihoods: for each terminal state,
    /// the log of the mean weight over `m` backward trajectories. Chunked and
    /// seeded deterministically; safe to run on any thread pool.
    pub fn estimate_log_pt_batch(&self, xs: &[State], m: usize, seed: u64) -> Vec<f64> {
        assert!(m >= 1, "m must be at least 1");
        let jobs: Vec<(usize, usize)> = {
            // Chunk boundaries in units of (point, sample) rows, aligned to
            // whole points so each chunk owns complete weight groups.
            let points_per_chunk = (EVAL_CHUNK / m.max(1)).max(1);
            (0..xs.len())
                .step_by(points_per_chunk)
                .map(|lo| (lo, (lo + points_per_chunk).min(xs.len())))
                .collect()
        };
        let weights: Vec<Vec<f64>> = crate::util::eval_pool().install(|| {
            jobs.par_iter()
                .enumerate()
                .map(|(ci, &(lo, hi))| {
                    let mut rng = rng_from_seed(derive_seed(seed, ci as u64));
                    self.log_pt_chunk(&xs[lo..hi], m, &mut rng)
                })
                .collect()
        });
        weights.into_iter().flatten().collect()
    }

    /// Backward-rollout weight accumulation without materializing
    /// trajectories.
    fn log_pt_chunk<R: Rng>(&self, xs: &[State], m: usize, rng: &mut R) -> Vec<f64> {
        let d = self.d;
        let n = xs.len() * m;
        let mut cur: Vec<State> = xs.iter().flat_map(|x| std::iter::repeat_n(x.clone(), m)).collect();
        let mut weight = vec![0.0; n]; // log_pf - log_pb, accumulated
        let mut owed: Vec<Option<(usize, bool)>> = vec![None; n];
        let steps = xs.first().map_or(0, |x| x.num_set());
        for round in 0..=steps {
            let needs_eval = round > 0 || !self.uniform_backward;
            if needs_eval {
                let row_states: Vec<&State> = cur.iter().collect();
                let logits = self
                    .logits_rows(&row_states)
                    .expect("state encoding matches spec input");
                for i in 0..n {
                    let row = logits.row(i);
                    let row = row.as_slice().expect("contiguous row");
                    if let Some((pos, bit)) = owed[i].take() {
                        let (fwd_mask, _) = cur[i].action_masks();
                        let lp = masked_log_softmax(&row[..2 * d], &fwd_mask);
                        weight[i] += lp[Action::forward_index(pos, bit)];
                    }
                    if round < steps {
                        self.erase_for_weight(i, row, &mut cur, &mut weight, &mut owed, rng);
                    }
                }
            } else {
                for i in 0..n {
                    self.erase_for_weight(i, &[], &mut cur, &mut weight, &mut owed, rng);
                }
            }
        }
        weight
            .chunks(m)
            .map(|w| log_sum_exp(w) - (m as f64).ln())
            .collect()
    }

    fn erase_for_weight<R: Rng>(
        &self,
        i: usize,
        logits_row: &[f64],
        cur: &mut [State],
        weight: &mut [f64],
        owed: &mut [Option<(usize, bool)>],
        rng: &mut R,
    ) {
        let (pos, lp) = if self.uniform_backward {
            let set = cur[i].set_positions();
            let pos = set[rng.random_range(0..set.len())];
            (pos, -(set.len() as f64).ln())
        } else {
            let (_, bwd_mask) = cur[i].action_masks();
            let lp = masked_log_softmax(&logits_row[2 * self.d..], &bwd_mask);
            let probs: Vec<f64> =
                lp.iter().map(|&v| if v.is_finite() { v.exp() } else { 0.0 }).collect();
            let pos = sample_from_probs(&probs, &bwd_mask, rng);
            (pos, lp[pos])
        };
        let bit = cur[i].cell(pos).bit().expect("set position holds a bit");
        weight[i] -= lp;
        cur[i] = cur[i].apply_backward(pos).expect("masked action is valid");
        owed[i] = Some((pos, bit));
    }
}

impl Policy for GFlowNet {
    fn dim(&self) -> usize {
        self.d
    }

    fn distributions(&self, s: &State) -> (Vec<f64>, Vec<f64>) {
        self.policy_distributions(s)
    }

    fn log_z(&self) -> f64 {
        self.params.scalar("log_z").expect("log_z parameter")
    }
}

/// One Adam update of the policy from a batch of complete trajectories.
/// Returns the mean loss. Gradients are clipped to `grad_clip` global norm
/// when it is finite.
pub fn tb_update(
    gfn: &mut GFlowNet,
    trajs: &[Trajectory],
    log_rewards: &[f64],
    opt: &mut AdamState,
    grad_clip: f64,
) -> Result<f64, PolicyError> {
    let (loss, mut grads) = gfn.tb_loss_batch(trajs, log_rewards)?;
    if grad_clip.is_finite() {
        clip_global_norm(&mut grads, grad_clip);
    }
    opt.step(&mut gfn.params, &grads);
    Ok(loss)
}
