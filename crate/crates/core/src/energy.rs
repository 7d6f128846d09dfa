//! Energy models over terminal states and their training updates.
//!
//! Two parametrizations: a symmetric-matrix Ising quadratic form and an MLP
//! energy. Updates follow the contrastive form `mean grad E(positives) -
//! mean grad E(negatives)`; negatives come either from the GFlowNet's
//! back-and-forth proposal with a Metropolis-Hastings filter, or from
//! persistent Gibbs chains for the baseline.

use crate::nn::{mlp_apply_batch, mlp_forward_batch, mlp_grad_batch, AdamState, MlpSpec, ParamStore};
use crate::policy::{ExplorationCfg, GFlowNet, Policy, PolicyError};
use crate::state::State;
use crate::util::sigmoid;
use ndarray::{Array2, Ix2};
use rand::Rng;

/// An energy function over terminal states with parameter gradients.
pub trait EnergyModel {
    fn dim(&self) -> usize;

    fn energy(&self, x: &State) -> f64;

    fn energy_batch(&self, xs: &[State]) -> Vec<f64> {
        xs.iter().map(|x| self.energy(x)).collect()
    }

    /// Accumulate `coeff * sum_i grad_params E(x_i)` into `grads`.
    fn accumulate_grad(&self, xs: &[State], coeff: f64, grads: &mut ParamStore);

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Subgradient of any built-in regularizer, added to `grads`.
    fn regularization_grad(&self, _grads: &mut ParamStore) {}

    /// Restore representation invariants after a parameter update.
    fn post_update(&mut self) {}

    /// `p(bit at pos = 1 | rest)` under the Boltzmann distribution
    /// `p ~ exp(-E)`: `sigmoid(E(x[pos=0]) - E(x[pos=1]))`.
    fn gibbs_conditional(&self, x: &State, pos: usize) -> f64 {
        let x0 = with_bit(x, pos, false);
        let x1 = with_bit(x, pos, true);
        sigmoid(self.energy(&x0) - self.energy(&x1))
    }

    /// Run `budget` worth of single-site Gibbs updates in fixed ascending
    /// coordinate order. The default resamples through `gibbs_conditional`;
    /// models with cheap local fields may override.
    fn gibbs_run<R: Rng>(&self, x: &State, budget: GibbsBudget, rng: &mut R) -> State
    where
        Self: Sized,
    {
        let d = self.dim();
        let mut bits = x.to_bits();
        let mut cur = x.clone();
        for step in 0..budget.site_updates(d) {
            let pos = step % d;
            let p1 = self.gibbs_conditional(&cur, pos);
            let new_bit = rng.random::<f64>() < p1;
            if new_bit != bits[pos] {
                bits[pos] = new_bit;
                cur = State::from_bits(&bits);
            }
        }
        cur
    }
}

/// How much single-site work one Gibbs run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GibbsBudget {
    /// Full passes over all coordinates.
    Sweeps(usize),
    /// Individual coordinate updates, cycling in ascending order.
    SiteUpdates(usize),
}

impl GibbsBudget {
    pub fn site_updates(self, d: usize) -> usize {
        match self {
            GibbsBudget::Sweeps(n) => n * d,
            GibbsBudget::SiteUpdates(n) => n,
        }
    }
}

fn with_bit(x: &State, pos: usize, value: bool) -> State {
    let mut bits = x.to_bits();
    bits[pos] = value;
    State::from_bits(&bits)
}

/// Adjacency matrix of an `n x n` grid with toroidal wrap-around, entries in
/// `{0, 1}` and zero diagonal.
pub fn torus_adjacency(n: usize) -> Array2<f64> {
    let d = n * n;
    let mut a = Array2::<f64>::zeros((d, d));
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let neighbors = [
                ((r + 1) % n) * n + c,
                ((r + n - 1) % n) * n + c,
                r * n + (c + 1) % n,
                r * n + (c + n - 1) % n,
            ];
            for j in neighbors {
                if i != j {
                    a[[i, j]] = 1.0;
                }
            }
        }
    }
    a
}

/// Quadratic-form energy over spins: `E(x) = -s^T J s` with `s = 2b - 1`.
/// `J` stays symmetric with zero diagonal across updates.
#[derive(Clone, Debug)]
pub struct IsingEnergy {
    params: ParamStore,
    d: usize,
    pub l1_coeff: f64,
}

impl IsingEnergy {
    pub fn new(d: usize, l1_coeff: f64) -> Self {
        let mut params = ParamStore::new();
        params.insert("j", Array2::<f64>::zeros((d, d)).into_dyn());
        IsingEnergy { params, d, l1_coeff }
    }

    pub fn from_matrix(j: Array2<f64>, l1_coeff: f64) -> Self {
        let d = j.nrows();
        assert_eq!(d, j.ncols(), "J must be square");
        let mut params = ParamStore::new();
        params.insert("j", j.into_dyn());
        let mut model = IsingEnergy { params, d, l1_coeff };
        model.post_update();
        model
    }

    pub fn coupling(&self) -> ndarray::ArrayView2<'_, f64> {
        self.params.matrix("j").expect("j tensor")
    }

    fn spins(x: &State) -> Vec<f64> {
        x.to_bits().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }
}

impl EnergyModel for IsingEnergy {
    fn dim(&self) -> usize {
        self.d
    }

    fn energy(&self, x: &State) -> f64 {
        let j = self.params.matrix("j").expect("j tensor");
        let s = Self::spins(x);
        let mut total = 0.0;
        for (i, &si) in s.iter().enumerate() {
            let mut row_dot = 0.0;
            for (jj, &sj) in s.iter().enumerate() {
                row_dot += j[[i, jj]] * sj;
            }
            total += si * row_dot;
        }
        -total
    }

    fn accumulate_grad(&self, xs: &[State], coeff: f64, grads: &mut ParamStore) {
        let g = grads.get_mut("j").expect("j gradient tensor");
        let mut g = g.view_mut().into_dimensionality::<Ix2>().expect("matrix");
        for x in xs {
            let s = Self::spins(x);
            for (i, &si) in s.iter().enumerate() {
                for (jj, &sj) in s.iter().enumerate() {
                    // dE/dJ_ij = -s_i s_j
                    g[[i, jj]] -= coeff * si * sj;
                }
            }
        }
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn regularization_grad(&self, grads: &mut ParamStore) {
        if self.l1_coeff == 0.0 {
            return;
        }
        let j = self.params.get("j").expect("j tensor").clone();
        let g = grads.get_mut("j").expect("j gradient tensor");
        g.zip_mut_with(&j, |gv, &jv| *gv += self.l1_coeff * jv.signum() * (jv != 0.0) as u8 as f64);
    }

    fn post_update(&mut self) {
        let j = self.params.get_mut("j").expect("j tensor");
        let mut j = j.view_mut().into_dimensionality::<Ix2>().expect("matrix");
        for i in 0..self.d {
            j[[i, i]] = 0.0;
            for k in (i + 1)..self.d {
                let avg = 0.5 * (j[[i, k]] + j[[k, i]]);
                j[[i, k]] = avg;
                j[[k, i]] = avg;
            }
        }
    }

    /// Local-field conditional: `p(spin=+1 | rest) = sigmoid(4 sum_j J_ij s_j)`.
    fn gibbs_conditional(&self, x: &State, pos: usize) -> f64 {
        let j = self.params.matrix("j").expect("j tensor");
        let bits = x.to_bits();
        let mut field = 0.0;
        for (jj, &b) in bits.iter().enumerate() {
            if jj != pos {
                field += j[[pos, jj]] * if b { 1.0 } else { -1.0 };
            }
        }
        sigmoid(4.0 * field)
    }

    /// Incrementally maintained local fields; one row update per accepted
    /// flip instead of a fresh dot product per site.
    fn gibbs_run<R: Rng>(&self, x: &State, budget: GibbsBudget, rng: &mut R) -> State {
        let d = self.d;
        let j = self.params.matrix("j").expect("j tensor");
        let mut spins: Vec<f64> =
            x.to_bits().into_iter().map(|b| if b { 1.0 } else { -1.0 }).collect();
        let mut fields: Vec<f64> = (0..d)
            .map(|i| (0..d).filter(|&k| k != i).map(|k| j[[i, k]] * spins[k]).sum())
            .collect();
        for step in 0..budget.site_updates(d) {
            let pos = step % d;
            let p1 = sigmoid(4.0 * fields[pos]);
            let new_spin = if rng.random::<f64>() < p1 { 1.0 } else { -1.0 };
            let delta = new_spin - spins[pos];
            if delta != 0.0 {
                spins[pos] = new_spin;
                for k in 0..d {
                    if k != pos {
                        fields[k] += j[[k, pos]] * delta;
                    }
                }
            }
        }
        let bits: Vec<bool> = spins.iter().map(|&s| s > 0.0).collect();
        State::from_bits(&bits)
    }
}

/// MLP energy over the 0/1 encoding of terminal states.
#[derive(Clone, Debug)]
pub struct MlpEnergy {
    pub spec: MlpSpec,
    params: ParamStore,
}

impl MlpEnergy {
    pub fn new<R: Rng>(
        d: usize,
        hidden: &[usize],
        activation: crate::nn::Activation,
        rng: &mut R,
    ) -> Self {
        let spec = MlpSpec::new(d, hidden, 1, activation);
        spec.validate().expect("valid energy spec");
        let params = spec.init_params(rng);
        MlpEnergy { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: ParamStore) -> Self {
        MlpEnergy { spec, params }
    }

    fn encode(&self, xs: &[State]) -> Array2<f64> {
        let mut m = Array2::zeros((xs.len(), self.spec.input));
        for (mut row, x) in m.rows_mut().into_iter().zip(xs) {
            x.encode_into(row.as_slice_mut().expect("contiguous row"));
        }
        m
    }
}

impl EnergyModel for MlpEnergy {
    fn dim(&self) -> usize {
        self.spec.input
    }

    fn energy(&self, x: &State) -> f64 {
        self.energy_batch(std::slice::from_ref(x))[0]
    }

    fn energy_batch(&self, xs: &[State]) -> Vec<f64> {
        let m = self.encode(xs);
        let out = mlp_forward_batch(&self.spec, &self.params, &m).expect("shapes match spec");
        out.column(0).to_vec()
    }

    fn accumulate_grad(&self, xs: &[State], coeff: f64, grads: &mut ParamStore) {
        let m = self.encode(xs);
        let (_, tape) = mlp_apply_batch(&self.spec, &self.params, &m).expect("shapes match spec");
        let cot = Array2::from_elem((xs.len(), 1), coeff);
        mlp_grad_batch(&self.spec, &self.params, &tape, &cot, grads).expect("shapes match spec");
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// One contrastive update: Adam on
/// `mean grad E(positives) - mean grad E(negatives)` plus any regularizer
/// subgradient. Positive and negative sides are accumulated separately so
/// identical batches cancel exactly.
pub fn ebm_update<M: EnergyModel + ?Sized>(
    model: &mut M,
    positives: &[State],
    negatives: &[State],
    opt: &mut AdamState,
) {
    assert!(!positives.is_empty() && !negatives.is_empty(), "batches must be non-empty");
    let mut pos = model.params().zeros_like();
    model.accumulate_grad(positives, 1.0 / positives.len() as f64, &mut pos);
    let mut neg = model.params().zeros_like();
    model.accumulate_grad(negatives, 1.0 / negatives.len() as f64, &mut neg);
    let mut grads = pos.sub(&neg);
    model.regularization_grad(&mut grads);
    opt.step(model.params_mut(), &grads);
    model.post_update();
}

/// Log of the Metropolis-Hastings ratio for the back-and-forth proposal
/// `x -> x'`:
///
/// `log [ e^{-E(x')} P_B(tau'|x') P_F(tau) ] - log [ e^{-E(x)} P_B(tau|x) P_F(tau') ]`
///
/// where `tau` is the erased path anchored at `x` and `tau'` the repainted
/// path ending at `x'`, both forward-oriented from the shared anchor. The
/// acceptance probability is `min(1, exp(log_ratio))`. Log-probabilities are
/// recomputed under `policy`.
pub fn mh_accept_logratio<P: Policy, M: EnergyModel + ?Sized>(
    policy: &P,
    energy: &M,
    x: &State,
    x_new: &State,
    tau: &crate::state::Trajectory,
    tau_new: &crate::state::Trajectory,
) -> f64 {
    debug_assert_eq!(tau.last(), x);
    debug_assert_eq!(tau_new.last(), x_new);
    debug_assert_eq!(tau.start, tau_new.start);
    let (lpf_tau, lpb_tau) = crate::policy::trajectory_log_probs(policy, tau);
    let (lpf_new, lpb_new) = crate::policy::trajectory_log_probs(policy, tau_new);
    // Grouped so the identity proposal (x' = x, tau' = tau) cancels exactly.
    (energy.energy(x) - energy.energy(x_new)) + (lpb_new - lpb_tau) + (lpf_tau - lpf_new)
}

/// Outcome counts of one GFlowNet-guided energy update.
#[derive(Clone, Copy, Debug, Default)]
pub struct Alg2Stats {
    pub proposals: usize,
    pub accepted: usize,
}

impl Alg2Stats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// GFlowNet-guided energy update: erase `k` bits of each datum with the
/// backward policy, repaint them with the forward policy, accept or reject
/// each proposal by the Metropolis-Hastings rule (rejected proposals fall
/// back to the datum itself), then apply the contrastive update with the
/// results as negatives.
pub fn algorithm2_step<M: EnergyModel + ?Sized, R: Rng>(
    gfn: &GFlowNet,
    energy: &mut M,
    data_batch: &[State],
    k: usize,
    rng: &mut R,
    opt: &mut AdamState,
) -> Result<Alg2Stats, PolicyError> {
    assert!(!data_batch.is_empty(), "data batch must be non-empty");
    let taus = gfn.sample_backward_batch(data_batch, k, rng)?;
    let anchors: Vec<State> = taus.iter().map(|t| t.start.clone()).collect();
    let tau_news = gfn.sample_forward_from_batch(&anchors, rng, &ExplorationCfg::none());
    let proposals: Vec<State> = tau_news.iter().map(|t| t.last().clone()).collect();
    let e_cur = energy.energy_batch(data_batch);
    let e_new = energy.energy_batch(&proposals);

    let mut stats = Alg2Stats { proposals: data_batch.len(), accepted: 0 };
    let mut negatives = Vec::with_capacity(data_batch.len());
    for i in 0..data_batch.len() {
        let log_ratio = (e_cur[i] - e_new[i]) + (tau_news[i].log_pb - taus[i].log_pb)
            + (taus[i].log_pf - tau_news[i].log_pf);
        let accept = log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp();
        if accept {
            stats.accepted += 1;
            negatives.push(proposals[i].clone());
        } else {
            negatives.push(data_batch[i].clone());
        }
    }
    ebm_update(energy, data_batch, &negatives, opt);
    Ok(stats)
}

/// One full-coordinate Gibbs sweep in fixed ascending position order.
pub fn gibbs_sweep<M: EnergyModel + ?Sized, R: Rng>(energy: &M, x: &State, rng: &mut R) -> State {
    let mut bits = x.to_bits();
    let mut cur = x.clone();
    for pos in 0..bits.len() {
        let p1 = energy.gibbs_conditional(&cur, pos);
        let new_bit = rng.random::<f64>() < p1;
        if new_bit != bits[pos] {
            bits[pos] = new_bit;
            cur = State::from_bits(&bits);
        }
    }
    cur
}

/// `n` consecutive sweeps through the generic per-site kernel.
pub fn gibbs_chain<M: EnergyModel + ?Sized, R: Rng>(
    energy: &M,
    x: &State,
    sweeps: usize,
    rng: &mut R,
) -> State {
    let mut cur = x.clone();
    for _ in 0..sweeps {
        cur = gibbs_sweep(energy, &cur, rng);
    }
    cur
}

/// Exact Boltzmann distribution `p ~ exp(-E)` by full enumeration; only for
/// small dimensions.
pub fn exact_boltzmann<M: EnergyModel + ?Sized>(energy: &M, d: usize) -> Vec<f64> {
    assert!(d <= 20, "exact enumeration limited to d <= 20");
    let xs: Vec<State> = (0..1u64 << d).map(|ix| State::from_terminal_index(ix, d)).collect();
    let es = energy.energy_batch(&xs);
    let min = es.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = es.iter().map(|e| (min - e).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    probs
}

/// Ring buffer of persistent chain states for PCD baselines.
#[derive(Clone, Debug)]
pub struct PcdBuffer {
    states: Vec<State>,
    pub reinit_rate: f64,
    d: usize,
}

impl PcdBuffer {
    /// Fill with uniformly random terminal states.
    pub fn new<R: Rng>(capacity: usize, d: usize, reinit_rate: f64, rng: &mut R) -> Self {
        assert!(capacity > 0);
        assert!((0.0..=1.0).contains(&reinit_rate));
        let states = (0..capacity).map(|_| random_terminal(d, rng)).collect();
        PcdBuffer { states, reinit_rate, d }
    }

    pub fn capacity(&self) -> usize {
        self.states.len()
    }

    /// Draw `n` slots (with replacement); each drawn slot restarts from a
    /// fresh random state with probability `reinit_rate`.
    pub fn draw<R: Rng>(&mut self, n: usize, rng: &mut R) -> (Vec<usize>, Vec<State>) {
        let mut indices = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for _ in 0..n {
            let ix = rng.random_range(0..self.states.len());
            if rng.random::<f64>() < self.reinit_rate {
                self.states[ix] = random_terminal(self.d, rng);
            }
            indices.push(ix);
            states.push(self.states[ix].clone());
        }
        (indices, states)
    }

    pub fn store(&mut self, indices: &[usize], states: &[State]) {
        for (&ix, s) in indices.iter().zip(states) {
            self.states[ix] = s.clone();
        }
    }
}

pub fn random_terminal<R: Rng>(d: usize, rng: &mut R) -> State {
    let bits: Vec<bool> = (0..d).map(|_| rng.random::<bool>()).collect();
    State::from_bits(&bits)
}

/// One persistent-contrastive-divergence update: negatives are buffer chains
/// advanced by `budget` worth of Gibbs updates under the current energy.
pub fn pcd_step<M: EnergyModel, R: Rng>(
    energy: &mut M,
    buffer: &mut PcdBuffer,
    data_batch: &[State],
    budget: GibbsBudget,
    rng: &mut R,
    opt: &mut AdamState,
) {
    let (indices, starts) = buffer.draw(data_batch.len(), rng);
    let negatives: Vec<State> =
        starts.iter().map(|s| energy.gibbs_run(s, budget, rng)).collect();
    buffer.store(&indices, &negatives);
    ebm_update(energy, data_batch, &negatives, opt);
}
