//! Exact ground-truth machinery for small dimensions.
//!
//! For `D <= 10` the full DAG over `3^D` states fits in dense tables, so the
//! structural facts behind the sampler can be established by direct sweeps:
//! the terminating distribution of any policy, the unique Markovian flow
//! determined by a reward and a backward policy, its entropy, and the
//! acceptance ratio of the back-and-forth proposal.

use crate::policy::Policy;
use crate::state::{Action, Cell, State, Trajectory};
use rand::Rng;
use std::fmt;

/// Largest dimension the dense `3^D` sweeps accept.
pub const MAX_EXACT_DIM: usize = 10;

/// Flows below this threshold are treated as unreachable; their induced
/// policies fall back to uniform so downstream code never divides by zero.
const FLOW_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug)]
pub enum OracleError {
    DimensionTooLarge { d: usize, max: usize },
    BadReward(String),
    BadBackwardPolicy(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::DimensionTooLarge { d, max } => {
                write!(f, "dimension {d} too large for exact sweeps (max {max})")
            }
            OracleError::BadReward(msg) => write!(f, "bad reward: {msg}"),
            OracleError::BadBackwardPolicy(msg) => write!(f, "bad backward policy: {msg}"),
        }
    }
}

impl std::error::Error for OracleError {}

/// Base-3 index of a state: void = 0, zero-bit = 1, one-bit = 2, position `i`
/// contributing `digit * 3^i`. The all-void state is index 0.
pub fn state_index(s: &State) -> usize {
    let mut ix = 0usize;
    let mut mult = 1usize;
    for c in s.cells() {
        let digit = match c {
            Cell::Void => 0,
            Cell::Zero => 1,
            Cell::One => 2,
        };
        ix += digit * mult;
        mult *= 3;
    }
    ix
}

/// Inverse of [`state_index`].
pub fn state_from_index(mut ix: usize, d: usize) -> State {
    let mut cells = Vec::with_capacity(d);
    for _ in 0..d {
        cells.push(match ix % 3 {
            0 => Cell::Void,
            1 => Cell::Zero,
            _ => Cell::One,
        });
        ix /= 3;
    }
    State::from_cells(cells)
}

pub fn num_states(d: usize) -> usize {
    3usize.pow(d as u32)
}

fn check_dim(d: usize) -> Result<(), OracleError> {
    if d > MAX_EXACT_DIM {
        Err(OracleError::DimensionTooLarge { d, max: MAX_EXACT_DIM })
    } else {
        Ok(())
    }
}

/// State indices grouped by number of set entries, ascending.
fn levels(d: usize) -> Vec<Vec<usize>> {
    let mut levels = vec![Vec::new(); d + 1];
    for ix in 0..num_states(d) {
        let mut set = 0;
        let mut v = ix;
        for _ in 0..d {
            if v % 3 != 0 {
                set += 1;
            }
            v /= 3;
        }
        levels[set].push(ix);
    }
    levels
}

/// Exact terminating distribution of a policy's forward side: a dynamic
/// program over state-visit masses. Returns masses over the `2^D` terminal
/// states indexed by [`State::terminal_index`]; they sum to 1.
pub fn exact_pt<P: Policy>(policy: &P, d: usize) -> Result<Vec<f64>, OracleError> {
    check_dim(d)?;
    let mut mass = vec![0.0f64; num_states(d)];
    mass[0] = 1.0;
    let levels = levels(d);
    for level in levels.iter().take(d) {
        for &ix in level {
            if mass[ix] == 0.0 {
                continue;
            }
            let s = state_from_index(ix, d);
            let (pf, _) = policy.distributions(&s);
            for (a, &p) in pf.iter().enumerate() {
                if p > 0.0 {
                    let Action::Forward { position, value } = Action::forward_from_index(a) else {
                        unreachable!()
                    };
                    let child = s.apply_forward(position, value).expect("valid masked action");
                    mass[state_index(&child)] += mass[ix] * p;
                }
            }
        }
    }
    let mut pt = vec![0.0f64; 1 << d];
    for &ix in &levels[d] {
        let s = state_from_index(ix, d);
        pt[s.terminal_index() as usize] = mass[ix];
    }
    Ok(pt)
}

/// Dense state and edge flows over the full DAG. Edge flows are indexed by
/// the tail state and the flat forward-action index.
#[derive(Clone, Debug)]
pub struct ExactFlow {
    pub d: usize,
    pub state_flow: Vec<f64>,
    pub edge_flow: Vec<f64>,
    /// Total flow `F(s0)`.
    pub z: f64,
}

impl ExactFlow {
    fn edge(&self, state_ix: usize, action_ix: usize) -> f64 {
        self.edge_flow[state_ix * 2 * self.d + action_ix]
    }

    /// Reward recovered at a terminal state: its state flow.
    pub fn reward(&self, x: &State) -> f64 {
        self.state_flow[state_index(x)]
    }

    /// Forward policy induced by the flow at a non-terminal state; uniform
    /// over valid actions wherever the state carries no flow.
    pub fn induced_pf(&self, s: &State) -> Vec<f64> {
        let ix = state_index(s);
        let (fwd_mask, _) = s.action_masks();
        let total = self.state_flow[ix];
        if total < FLOW_FLOOR {
            let n = fwd_mask.iter().filter(|&&v| v).count() as f64;
            return fwd_mask.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
        }
        fwd_mask
            .iter()
            .enumerate()
            .map(|(a, &v)| if v { self.edge(ix, a) / total } else { 0.0 })
            .collect()
    }

    /// Backward policy induced by the flow at a non-initial state.
    pub fn induced_pb(&self, s: &State) -> Vec<f64> {
        let ix = state_index(s);
        let total = self.state_flow[ix];
        let (_, bwd_mask) = s.action_masks();
        if total < FLOW_FLOOR {
            let n = s.num_set() as f64;
            return bwd_mask.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
        }
        bwd_mask
            .iter()
            .enumerate()
            .map(|(pos, &v)| {
                if v {
                    let bit = s.cell(pos).bit().expect("set position");
                    let parent = s.apply_backward(pos).expect("set position");
                    self.edge(state_index(&parent), Action::forward_index(pos, bit)) / total
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Materialize the induced policies as a tabular [`Policy`].
    pub fn tabular_policy(&self) -> TabularPolicy {
        let d = self.d;
        let n = num_states(d);
        let mut pf = vec![0.0; n * 2 * d];
        let mut pb = vec![0.0; n * d];
        for ix in 0..n {
            let s = state_from_index(ix, d);
            if !s.is_terminal() {
                pf[ix * 2 * d..(ix + 1) * 2 * d].copy_from_slice(&self.induced_pf(&s));
            }
            if !s.is_initial() {
                pb[ix * d..(ix + 1) * d].copy_from_slice(&self.induced_pb(&s));
            }
        }
        TabularPolicy { d, pf, pb, log_z: self.z.ln() }
    }

    /// Largest relative violation of flow conservation over interior states:
    /// inflow and outflow must both equal the state flow.
    pub fn conservation_residual(&self) -> f64 {
        let d = self.d;
        let mut worst: f64 = 0.0;
        for ix in 0..num_states(d) {
            let s = state_from_index(ix, d);
            let set = s.num_set();
            let f = self.state_flow[ix];
            let scale = f.max(FLOW_FLOOR);
            if set < d {
                let out: f64 = (0..2 * d).map(|a| self.edge(ix, a)).sum();
                worst = worst.max((out - f).abs() / scale);
            }
            if set > 0 {
                let mut inflow = 0.0;
                for pos in s.set_positions() {
                    let bit = s.cell(pos).bit().expect("set position");
                    let parent = s.apply_backward(pos).expect("set position");
                    inflow += self.edge(state_index(&parent), Action::forward_index(pos, bit));
                }
                worst = worst.max((inflow - f).abs() / scale);
            }
        }
        worst
    }
}

/// The unique Markovian flow matching terminal rewards under a fixed backward
/// policy: a sweep from terminals down to the initial state.
///
/// `reward` is indexed by [`State::terminal_index`]; `pb` returns erase
/// probabilities (length `D`, zero off-support) at any non-initial state.
pub fn flow_from_pb_and_reward<F>(
    reward: &[f64],
    pb: F,
    d: usize,
) -> Result<ExactFlow, OracleError>
where
    F: Fn(&State) -> Vec<f64>,
{
    check_dim(d)?;
    if reward.len() != 1 << d {
        return Err(OracleError::BadReward(format!(
            "expected {} terminal rewards, got {}",
            1 << d,
            reward.len()
        )));
    }
    if reward.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
        return Err(OracleError::BadReward("rewards must be finite and >= 0".into()));
    }
    if reward.iter().all(|&r| r == 0.0) {
        return Err(OracleError::BadReward("rewards are identically zero".into()));
    }

    let n = num_states(d);
    let mut state_flow = vec![0.0f64; n];
    let mut edge_flow = vec![0.0f64; n * 2 * d];
    let levels = levels(d);
    for &ix in &levels[d] {
        let s = state_from_index(ix, d);
        state_flow[ix] = reward[s.terminal_index() as usize];
    }
    // Distribute each state's flow to its parents, deepest level first.
    for set in (1..=d).rev() {
        for &ix in &levels[set] {
            let f = state_flow[ix];
            if f == 0.0 {
                continue;
            }
            let s = state_from_index(ix, d);
            let probs = pb(&s);
            let mut total = 0.0;
            for pos in s.set_positions() {
                let p = probs[pos];
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(OracleError::BadBackwardPolicy(format!(
                        "probability {p} at state {s}"
                    )));
                }
                total += p;
                if p > 0.0 {
                    let bit = s.cell(pos).bit().expect("set position");
                    let parent = s.apply_backward(pos).expect("set position");
                    let pix = state_index(&parent);
                    let contribution = f * p;
                    edge_flow[pix * 2 * d + Action::forward_index(pos, bit)] += contribution;
                    state_flow[pix] += contribution;
                }
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(OracleError::BadBackwardPolicy(format!(
                    "erase probabilities at {s} sum to {total}"
                )));
            }
        }
    }
    let z = state_flow[0];
    Ok(ExactFlow { d, state_flow, edge_flow, z })
}

/// The uniform (canonical) backward policy.
pub fn uniform_pb(s: &State) -> Vec<f64> {
    let n = s.num_set() as f64;
    let (_, bwd_mask) = s.action_masks();
    bwd_mask.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect()
}

/// A dense stochastic backward policy over every non-initial state.
#[derive(Clone, Debug)]
pub struct TabularPb {
    d: usize,
    table: Vec<f64>,
}

impl TabularPb {
    /// Random erase distributions at every non-initial state.
    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        let n = num_states(d);
        let mut table = vec![0.0; n * d];
        for ix in 0..n {
            let s = state_from_index(ix, d);
            let set = s.set_positions();
            if set.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for &pos in &set {
                let w: f64 = rng.random_range(0.05..1.0);
                table[ix * d + pos] = w;
                total += w;
            }
            for &pos in &set {
                table[ix * d + pos] /= total;
            }
        }
        TabularPb { d, table }
    }

    pub fn probs(&self, s: &State) -> Vec<f64> {
        let ix = state_index(s);
        self.table[ix * self.d..(ix + 1) * self.d].to_vec()
    }
}

/// Dense per-state policy tables, used to drive sampling and estimation code
/// with exact flow-induced policies.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    d: usize,
    pf: Vec<f64>,
    pb: Vec<f64>,
    log_z: f64,
}

impl Policy for TabularPolicy {
    fn dim(&self) -> usize {
        self.d
    }

    fn distributions(&self, s: &State) -> (Vec<f64>, Vec<f64>) {
        let ix = state_index(s);
        (
            self.pf[ix * 2 * self.d..(ix + 1) * 2 * self.d].to_vec(),
            self.pb[ix * self.d..(ix + 1) * self.d].to_vec(),
        )
    }

    fn log_z(&self) -> f64 {
        self.log_z
    }
}

impl TabularPolicy {
    /// Multiply one forward probability by `factor` and renormalize that
    /// state's distribution; used to give acceptance tests a detectable
    /// perturbation.
    pub fn perturb_pf(&mut self, s: &State, action_index: usize, factor: f64) {
        let ix = state_index(s);
        let row = &mut self.pf[ix * 2 * self.d..(ix + 1) * 2 * self.d];
        row[action_index] *= factor;
        let total: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= total;
        }
    }
}

/// Entropy of a Markovian flow: the flow-weighted sum of forward-policy
/// entropies over non-terminal states, `sum_s F(s)/Z * H[P_F(.|s)]`.
pub fn flow_entropy(flow: &ExactFlow) -> f64 {
    let d = flow.d;
    let mut total = 0.0;
    for ix in 0..num_states(d) {
        let s = state_from_index(ix, d);
        if s.is_terminal() || flow.state_flow[ix] < FLOW_FLOOR {
            continue;
        }
        let pf = flow.induced_pf(&s);
        let h: f64 = pf
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        total += flow.state_flow[ix] / flow.z * h;
    }
    total
}

/// The Metropolis-Hastings ratio of a back-and-forth proposal, evaluated with
/// the flow's induced policies and its terminal rewards:
/// `R(x') P_B(tau'|x') P_F(tau) / (R(x) P_B(tau|x) P_F(tau'))`.
///
/// `tau` is the erased path anchored at `x`, `tau'` the repainted path ending
/// at `x'`; both are forward-oriented with a common start. Returns the
/// unclamped ratio, which is exactly 1 when the flow matches the reward.
pub fn mh_accept_exact_check(
    flow: &ExactFlow,
    x: &State,
    x_new: &State,
    tau: &Trajectory,
    tau_new: &Trajectory,
) -> f64 {
    assert_eq!(tau.last(), x, "tau must end at x");
    assert_eq!(tau_new.last(), x_new, "tau' must end at x'");
    assert_eq!(tau.start, tau_new.start, "paths must share their anchor");
    let policy = flow.tabular_policy();
    let (lpf_tau, lpb_tau) = crate::policy::trajectory_log_probs(&policy, tau);
    let (lpf_new, lpb_new) = crate::policy::trajectory_log_probs(&policy, tau_new);
    let log_ratio = flow.reward(x_new).ln() - flow.reward(x).ln() + lpb_new + lpf_tau
        - lpb_tau
        - lpf_new;
    log_ratio.exp()
}

/// Uniform random rewards in `[0.1, 1)` over the `2^D` terminals.
pub fn random_reward<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..1usize << d).map(|_| rng.random_range(0.1..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_backward_trajectory, sample_forward_from, ExplorationCfg};
    use crate::util::rng_from_seed;

    /// Brute-force oracle: enumerate all `2^D * D!` complete trajectories.
    fn pt_by_trajectory_enumeration<P: Policy>(policy: &P, d: usize) -> Vec<f64> {
        fn visit<P: Policy>(
            policy: &P,
            s: &State,
            log_p: f64,
            out: &mut Vec<f64>,
        ) {
            if s.is_terminal() {
                out[s.terminal_index() as usize] += log_p.exp();
                return;
            }
            let (pf, _) = policy.distributions(s);
            for (a, &p) in pf.iter().enumerate() {
                if p > 0.0 {
                    let Action::Forward { position, value } = Action::forward_from_index(a)
                    else {
                        unreachable!()
                    };
                    let child = s.apply_forward(position, value).unwrap();
                    visit(policy, &child, log_p + p.ln(), out);
                }
            }
        }
        let mut out = vec![0.0; 1 << d];
        visit(policy, &State::initial(d), 0.0, &mut out);
        out
    }

    fn tv(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
    }

    fn normalized(r: &[f64]) -> Vec<f64> {
        let z: f64 = r.iter().sum();
        r.iter().map(|&x| x / z).collect()
    }

    #[test]
    fn state_index_roundtrips() {
        for d in 1..=4 {
            for ix in 0..num_states(d) {
                let s = state_from_index(ix, d);
                assert_eq!(state_index(&s), ix);
            }
        }
        assert_eq!(state_index(&State::initial(5)), 0);
    }

    #[test]
    fn exact_pt_of_uniform_policy_is_uniform() {
        let flow = flow_from_pb_and_reward(&vec![1.0; 4], uniform_pb, 2).unwrap();
        let pt = exact_pt(&flow.tabular_policy(), 2).unwrap();
        for &p in &pt {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_flow_matches_hand_computation() {
        // R = (1, 3): Z = 4 and the induced forward policy picks 1 w.p. 3/4.
        let flow = flow_from_pb_and_reward(&[1.0, 3.0], uniform_pb, 1).unwrap();
        assert!((flow.z - 4.0).abs() < 1e-12);
        let pf = flow.induced_pf(&State::initial(1));
        assert!((pf[Action::forward_index(0, true)] - 0.75).abs() < 1e-12);
        let pt = exact_pt(&flow.tabular_policy(), 1).unwrap();
        assert!((pt[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn unit_reward_uniform_pb_gives_unit_interior_flows_at_d2() {
        let flow = flow_from_pb_and_reward(&vec![1.0; 4], uniform_pb, 2).unwrap();
        for ix in 0..num_states(2) {
            let s = state_from_index(ix, 2);
            if s.num_set() == 1 {
                assert!((flow.state_flow[ix] - 1.0).abs() < 1e-12, "state {s}");
            }
        }
        let pf = flow.induced_pf(&State::initial(2));
        for (a, &p) in pf.iter().enumerate() {
            assert!((p - 0.25).abs() < 1e-12, "action {a}");
        }
    }

    #[test]
    fn exact_pt_matches_full_trajectory_enumeration_at_d3() {
        let mut rng = rng_from_seed(21);
        let reward = random_reward(3, &mut rng);
        let pb = TabularPb::random(3, &mut rng);
        let flow = flow_from_pb_and_reward(&reward, |s| pb.probs(s), 3).unwrap();
        let policy = flow.tabular_policy();
        let dp = exact_pt(&policy, 3).unwrap();
        let brute = pt_by_trajectory_enumeration(&policy, 3);
        assert!(tv(&dp, &brute) < 1e-12);
        assert!((dp.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn induced_policy_terminates_proportionally_to_reward() {
        let mut rng = rng_from_seed(22);
        for d in 1..=4 {
            let reward = random_reward(d, &mut rng);
            let pb = TabularPb::random(d, &mut rng);
            let flow = flow_from_pb_and_reward(&reward, |s| pb.probs(s), d).unwrap();
            let pt = exact_pt(&flow.tabular_policy(), d).unwrap();
            assert!(tv(&pt, &normalized(&reward)) < 1e-9, "d={d}");
        }
    }

    #[test]
    fn conservation_holds_exhaustively_up_to_d6() {
        let mut rng = rng_from_seed(23);
        for d in 1..=6 {
            let reward = random_reward(d, &mut rng);
            let pb = TabularPb::random(d, &mut rng);
            let flow = flow_from_pb_and_reward(&reward, |s| pb.probs(s), d).unwrap();
            assert!(flow.conservation_residual() < 1e-12, "d={d}");
            // Terminal flows carry the reward.
            for x in 0..1usize << d {
                let s = State::from_terminal_index(x as u64, d);
                assert_eq!(flow.reward(&s), reward[x]);
            }
        }
    }

    #[test]
    fn terminal_masses_equal_pt_times_z() {
        let mut rng = rng_from_seed(24);
        let reward = random_reward(4, &mut rng);
        let flow = flow_from_pb_and_reward(&reward, uniform_pb, 4).unwrap();
        let pt = exact_pt(&flow.tabular_policy(), 4).unwrap();
        for x in 0..16 {
            let s = State::from_terminal_index(x as u64, 4);
            assert!((pt[x] * flow.z - flow.reward(&s)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            flow_from_pb_and_reward(&[0.0, 0.0], uniform_pb, 1),
            Err(OracleError::BadReward(_))
        ));
        assert!(matches!(
            flow_from_pb_and_reward(&[1.0], uniform_pb, 1),
            Err(OracleError::BadReward(_))
        ));
        assert!(matches!(
            exact_pt(
                &flow_from_pb_and_reward(&[1.0, 1.0], uniform_pb, 1)
                    .unwrap()
                    .tabular_policy(),
                11
            ),
            Err(OracleError::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn entropy_of_single_decision_is_bernoulli_entropy() {
        let flow = flow_from_pb_and_reward(&[1.0, 3.0], uniform_pb, 1).unwrap();
        let p: f64 = 0.75;
        let expect = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert!((flow_entropy(&flow) - expect).abs() < 1e-12);
    }

    #[test]
    fn deterministic_flow_has_zero_entropy() {
        // All reward on one terminal and a deterministic erase order: the
        // flow runs along a single path, so every forward decision is forced.
        let mut reward = vec![0.0; 8];
        reward[5] = 2.0;
        let erase_highest = |s: &State| {
            let mut probs = vec![0.0; s.dim()];
            if let Some(&pos) = s.set_positions().last() {
                probs[pos] = 1.0;
            }
            probs
        };
        let flow = flow_from_pb_and_reward(&reward, erase_highest, 3).unwrap();
        assert!(flow_entropy(&flow).abs() < 1e-12);
    }

    #[test]
    fn entropy_closed_form_matches_monte_carlo_and_log8_at_d2() {
        let flow = flow_from_pb_and_reward(&vec![1.0; 4], uniform_pb, 2).unwrap();
        let sweep = flow_entropy(&flow);
        assert!((sweep - 8.0f64.ln()).abs() < 1e-12);

        // Definition-side Monte Carlo: expected sum of per-state forward
        // entropies along sampled trajectories.
        let policy = flow.tabular_policy();
        let mut rng = rng_from_seed(25);
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let traj = sample_forward_from(
                &policy,
                &State::initial(2),
                &mut rng,
                &ExplorationCfg::none(),
            );
            let mut h = 0.0;
            for t in 0..traj.len() {
                let (pf, _) = policy.distributions(&traj.states[t]);
                h -= pf.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            }
            samples.push(h);
        }
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sigma = (var / n as f64).sqrt();
        assert!(
            (mean - sweep).abs() < 3.0 * sigma.max(1e-9),
            "mc {mean} sweep {sweep} sigma {sigma}"
        );
    }

    #[test]
    fn uniform_backward_policy_maximizes_entropy() {
        let mut rng = rng_from_seed(26);
        for d in 2..=3 {
            for _ in 0..20 {
                let reward = random_reward(d, &mut rng);
                let uniform_flow = flow_from_pb_and_reward(&reward, uniform_pb, d).unwrap();
                let h_uniform = flow_entropy(&uniform_flow);
                for _ in 0..20 {
                    let pb = TabularPb::random(d, &mut rng);
                    let flow = flow_from_pb_and_reward(&reward, |s| pb.probs(s), d).unwrap();
                    assert!(flow_entropy(&flow) <= h_uniform + 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_flow_accepts_every_back_and_forth_proposal() {
        let mut rng = rng_from_seed(27);
        for d in 2..=4 {
            let reward = random_reward(d, &mut rng);
            let flow = flow_from_pb_and_reward(&reward, uniform_pb, d).unwrap();
            let policy = flow.tabular_policy();
            for k in 1..=d {
                for _ in 0..50 {
                    let x = State::from_terminal_index(rng.random_range(0..1u64 << d), d);
                    let tau = sample_backward_trajectory(&policy, &x, k, &mut rng).unwrap();
                    let tau_new = sample_forward_from(
                        &policy,
                        &tau.start,
                        &mut rng,
                        &ExplorationCfg::none(),
                    );
                    let x_new = tau_new.last().clone();
                    let ratio = mh_accept_exact_check(&flow, &x, &x_new, &tau, &tau_new);
                    assert!((ratio - 1.0).abs() < 1e-9, "d={d} k={k} ratio={ratio}");
                }
            }
        }
    }

    #[test]
    fn perturbed_policy_breaks_unit_acceptance() {
        let mut rng = rng_from_seed(28);
        let reward = random_reward(3, &mut rng);
        let flow = flow_from_pb_and_reward(&reward, uniform_pb, 3).unwrap();
        let mut policy = flow.tabular_policy();
        policy.perturb_pf(&State::initial(3), 0, 2.0);
        let mut seen_non_unit = false;
        for _ in 0..200 {
            let x = State::from_terminal_index(rng.random_range(0..8), 3);
            let tau = sample_backward_trajectory(&policy, &x, 3, &mut rng).unwrap();
            let tau_new =
                sample_forward_from(&policy, &tau.start, &mut rng, &ExplorationCfg::none());
            let x_new = tau_new.last().clone();
            // Evaluate the ratio with the perturbed policy but the flow's rewards.
            let (lpf_tau, lpb_tau) = crate::policy::trajectory_log_probs(&policy, &tau);
            let (lpf_new, lpb_new) = crate::policy::trajectory_log_probs(&policy, &tau_new);
            let log_ratio = flow.reward(&x_new).ln() - flow.reward(&x).ln() + lpb_new + lpf_tau
                - lpb_tau
                - lpf_new;
            if (log_ratio.exp() - 1.0).abs() > 1e-6 {
                seen_non_unit = true;
                break;
            }
        }
        assert!(seen_non_unit, "perturbation went undetected");
    }

    #[test]
    fn full_depth_proposals_depend_only_on_endpoints() {
        // With K = D the ratio is the same for every erase path and every
        // flow-consistent backward policy; only the endpoints matter.
        let mut rng = rng_from_seed(29);
        let reward = random_reward(3, &mut rng);
        // Policies fitted to a different reward than the one scoring proposals.
        let other_reward = random_reward(3, &mut rng);
        let energy_flow = flow_from_pb_and_reward(&reward, uniform_pb, 3).unwrap();
        let mut ratios = Vec::new();
        for pb_variant in 0..2 {
            let fitted = if pb_variant == 0 {
                flow_from_pb_and_reward(&other_reward, uniform_pb, 3).unwrap()
            } else {
                let pb = TabularPb::random(3, &mut rng);
                flow_from_pb_and_reward(&other_reward, |s| pb.probs(s), 3).unwrap()
            };
            let policy = fitted.tabular_policy();
            let x = State::from_terminal_index(2, 3);
            let x_new = State::from_terminal_index(5, 3);
            for _ in 0..20 {
                let tau = sample_backward_trajectory(&policy, &x, 3, &mut rng).unwrap();
                // Force the repainted path to land on x_new by building it
                // from x_new's bits in a random order.
                let mut order: Vec<usize> = (0..3).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                let actions: Vec<(usize, bool)> = order
                    .iter()
                    .map(|&p| (p, x_new.cell(p).bit().unwrap()))
                    .collect();
                let tau_new = Trajectory::from_actions(
                    State::initial(3),
                    actions,
                    crate::state::Direction::SampledForward,
                )
                .unwrap();
                let (lpf_tau, lpb_tau) = crate::policy::trajectory_log_probs(&policy, &tau);
                let (lpf_new, lpb_new) = crate::policy::trajectory_log_probs(&policy, &tau_new);
                let log_ratio = energy_flow.reward(&x_new).ln() - energy_flow.reward(&x).ln()
                    + lpb_new
                    + lpf_tau
                    - lpb_tau
                    - lpf_new;
                ratios.push(log_ratio);
            }
        }
        for w in ratios.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "{} vs {}", w[0], w[1]);
        }
    }
}
