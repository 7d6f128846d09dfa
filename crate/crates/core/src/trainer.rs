//! Joint training: strictly alternating sampler and energy updates.
//!
//! Each step draws a batch of trajectories from an alpha-mix of forward
//! rollouts and backward rollouts rooted at data, takes one Adam step on the
//! trajectory balance loss with `log R = -E`, then updates the energy with
//! the back-and-forth proposal at the scheduled horizon `K`.

use crate::checkpoint::{read_checkpoint, section, write_checkpoint, CheckpointError};
use crate::energy::{algorithm2_step, EnergyModel, IsingEnergy, MlpEnergy};
use crate::nn::{Activation, AdamState, MlpSpec, ParamStore};
use crate::policy::{tb_update, ExplorationCfg, GFlowNet, PolicyError, LOG_REWARD_FLOOR};
use crate::state::State;
use crate::util::{derive_seed, rng_from_seed};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;

#[derive(Clone, Debug)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String, reason: String },
    MissingKey(&'static str),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key {k:?}"),
            ConfigError::BadValue { key, value, reason } => {
                write!(f, "bad value {value:?} for {key}: {reason}")
            }
            ConfigError::MissingKey(k) => write!(f, "missing required config key {k}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Horizon schedule for the back-and-forth proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KSchedule {
    /// Grow linearly from 1 at the first step to `D` at the last.
    Linear,
    Constant(usize),
}

/// Proposal horizon at a given step.
pub fn k_schedule(step_index: usize, total: usize, d: usize, mode: KSchedule) -> usize {
    match mode {
        KSchedule::Constant(k) => k.clamp(1, d),
        KSchedule::Linear => {
            if total <= 1 {
                return d;
            }
            let frac = step_index as f64 / (total - 1) as f64;
            let k = 1.0 + ((d - 1) as f64 * frac).round();
            (k as usize).clamp(1, d)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyKind {
    Ising,
    Mlp,
}

/// Everything that defines a training run; parsed from flat `key = value`
/// config files.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerCfg {
    pub policy_hidden: Vec<usize>,
    pub policy_activation: Activation,
    pub policy_layernorm: bool,
    pub uniform_backward: bool,
    pub energy_kind: EnergyKind,
    pub energy_hidden: Vec<usize>,
    pub energy_activation: Activation,
    pub alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub logz_lr: f64,
    pub energy_lr: f64,
    pub k_schedule: KSchedule,
    pub epsilon: f64,
    pub temperature: f64,
    pub l1: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub ckpt_every: usize,
    pub val_fraction: f64,
    pub val_points: usize,
    pub nll_m: usize,
}

impl Default for TrainerCfg {
    fn default() -> Self {
        let policy_lr = 1e-3;
        TrainerCfg {
            policy_hidden: vec![256, 256],
            policy_activation: Activation::Elu,
            policy_layernorm: false,
            uniform_backward: false,
            energy_kind: EnergyKind::Mlp,
            energy_hidden: vec![256, 256, 256],
            energy_activation: Activation::Elu,
            alpha: 0.5,
            steps: 0,
            batch_size: 128,
            policy_lr,
            logz_lr: 10.0 * policy_lr,
            energy_lr: 1e-3,
            k_schedule: KSchedule::Linear,
            epsilon: 0.05,
            temperature: 1.0,
            l1: 0.0,
            seed: 0,
            grad_clip: 10.0,
            eval_every: 1000,
            ckpt_every: 5000,
            val_fraction: 0.1,
            val_points: 500,
            nll_m: 100,
        }
    }
}

impl TrainerCfg {
    pub fn exploration(&self) -> ExplorationCfg {
        ExplorationCfg { epsilon: self.epsilon, temperature: self.temperature }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::BadValue { key: key.into(), value, reason: reason.into() })
        };
        if self.steps == 0 {
            return Err(ConfigError::MissingKey("steps"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha.to_string(), "must be in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "must be positive");
        }
        for (key, lr) in [
            ("policy_lr", self.policy_lr),
            ("logz_lr", self.logz_lr),
            ("energy_lr", self.energy_lr),
        ] {
            if !(lr > 0.0) {
                return bad(key, lr.to_string(), "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", self.val_fraction.to_string(), "must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon", self.epsilon.to_string(), "must be in [0, 1]");
        }
        if self.temperature < 0.0 {
            return bad("temperature", self.temperature.to_string(), "must be >= 0");
        }
        Ok(())
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got {other:?}")),
    }
}

/// Parse a flat `key = value` config. Lines starting with `#` and blank
/// lines are ignored; unknown keys are errors. `logz_lr` defaults to ten
/// times the policy learning rate when not given.
pub fn parse_config(text: &str) -> Result<TrainerCfg, ConfigError> {
    let mut cfg = TrainerCfg::default();
    let mut logz_given = false;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadValue {
                key: line.to_string(),
                value: String::new(),
                reason: "expected key = value".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        match key {
            "policy_hidden" => cfg.policy_hidden = parse_usize_list(value).map_err(bad)?,
            "policy_activation" => {
                cfg.policy_activation = Activation::parse(value).map_err(|e| bad(e.to_string()))?
            }
            "policy_layernorm" => cfg.policy_layernorm = parse_bool(value).map_err(bad)?,
            "uniform_backward" => cfg.uniform_backward = parse_bool(value).map_err(bad)?,
            "energy_kind" => {
                cfg.energy_kind = match value {
                    "ising" => EnergyKind::Ising,
                    "mlp" => EnergyKind::Mlp,
                    other => return Err(bad(format!("unknown energy kind {other:?}"))),
                }
            }
            "energy_hidden" => cfg.energy_hidden = parse_usize_list(value).map_err(bad)?,
            "energy_activation" => {
                cfg.energy_activation = Activation::parse(value).map_err(|e| bad(e.to_string()))?
            }
            "alpha" => cfg.alpha = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "steps" => cfg.steps = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "policy_lr" => {
                cfg.policy_lr = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                if !logz_given {
                    cfg.logz_lr = 10.0 * cfg.policy_lr;
                }
            }
            "logz_lr" => {
                cfg.logz_lr = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                logz_given = true;
            }
            "energy_lr" => cfg.energy_lr = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "k_schedule" => {
                cfg.k_schedule = if value == "linear" {
                    KSchedule::Linear
                } else if let Some(k) = value.strip_prefix("constant:") {
                    KSchedule::Constant(
                        k.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    )
                } else {
                    return Err(bad("expected linear or constant:<K>".into()));
                }
            }
            "epsilon" => cfg.epsilon = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "temperature" => cfg.temperature = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "l1" => cfg.l1 = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "grad_clip" => cfg.grad_clip = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "eval_every" => cfg.eval_every = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "ckpt_every" => cfg.ckpt_every = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "val_fraction" => cfg.val_fraction = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "val_points" => cfg.val_points = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "nll_m" => cfg.nll_m = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Either energy parametrization behind one concrete type.
#[derive(Clone, Debug)]
pub enum AnyEnergy {
    Ising(IsingEnergy),
    Mlp(MlpEnergy),
}

impl EnergyModel for AnyEnergy {
    fn dim(&self) -> usize {
        match self {
            AnyEnergy::Ising(m) => m.dim(),
            AnyEnergy::Mlp(m) => m.dim(),
        }
    }

    fn energy(&self, x: &State) -> f64 {
        match self {
            AnyEnergy::Ising(m) => m.energy(x),
            AnyEnergy::Mlp(m) => m.energy(x),
        }
    }

    fn energy_batch(&self, xs: &[State]) -> Vec<f64> {
        match self {
            AnyEnergy::Ising(m) => m.energy_batch(xs),
            AnyEnergy::Mlp(m) => m.energy_batch(xs),
        }
    }

    fn accumulate_grad(&self, xs: &[State], coeff: f64, grads: &mut ParamStore) {
        match self {
            AnyEnergy::Ising(m) => m.accumulate_grad(xs, coeff, grads),
            AnyEnergy::Mlp(m) => m.accumulate_grad(xs, coeff, grads),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            AnyEnergy::Ising(m) => m.params(),
            AnyEnergy::Mlp(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyEnergy::Ising(m) => m.params_mut(),
            AnyEnergy::Mlp(m) => m.params_mut(),
        }
    }

    fn regularization_grad(&self, grads: &mut ParamStore) {
        match self {
            AnyEnergy::Ising(m) => m.regularization_grad(grads),
            AnyEnergy::Mlp(m) => m.regularization_grad(grads),
        }
    }

    fn post_update(&mut self) {
        match self {
            AnyEnergy::Ising(m) => m.post_update(),
            AnyEnergy::Mlp(m) => m.post_update(),
        }
    }

    fn gibbs_conditional(&self, x: &State, pos: usize) -> f64 {
        match self {
            AnyEnergy::Ising(m) => m.gibbs_conditional(x, pos),
            AnyEnergy::Mlp(m) => m.gibbs_conditional(x, pos),
        }
    }

    fn gibbs_run<R: rand::Rng>(
        &self,
        x: &State,
        budget: crate::energy::GibbsBudget,
        rng: &mut R,
    ) -> State {
        match self {
            AnyEnergy::Ising(m) => m.gibbs_run(x, budget, rng),
            AnyEnergy::Mlp(m) => m.gibbs_run(x, budget, rng),
        }
    }
}

/// Per-step statistics.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub step: usize,
    pub k: usize,
    pub tb_loss: f64,
    pub acceptance_rate: f64,
    pub n_forward: usize,
    pub n_backward: usize,
}

/// Owns both models, their optimizers, and the training RNG stream.
pub struct Trainer {
    pub cfg: TrainerCfg,
    pub d: usize,
    pub gfn: GFlowNet,
    pub energy: AnyEnergy,
    policy_opt: AdamState,
    energy_opt: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainerCfg, d: usize) -> Trainer {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xEB));
        let gfn = GFlowNet::new(
            d,
            &cfg.policy_hidden,
            cfg.policy_activation,
            cfg.policy_layernorm,
            cfg.uniform_backward,
            &mut rng,
        );
        let energy = match cfg.energy_kind {
            EnergyKind::Ising => AnyEnergy::Ising(IsingEnergy::new(d, cfg.l1)),
            EnergyKind::Mlp => AnyEnergy::Mlp(MlpEnergy::new(
                d,
                &cfg.energy_hidden,
                cfg.energy_activation,
                &mut rng,
            )),
        };
        let policy_opt =
            AdamState::new(&gfn.params, cfg.policy_lr).with_lr_override("log_z", cfg.logz_lr);
        let energy_opt = AdamState::new(energy.params(), cfg.energy_lr);
        Trainer {
            cfg: cfg.clone(),
            d,
            gfn,
            energy,
            policy_opt,
            energy_opt,
            rng: rng_from_seed(derive_seed(cfg.seed, 0x5EED)),
        }
    }

    /// One alternating update: sampler first, then energy.
    pub fn train_step(
        &mut self,
        dataset: &[State],
        step_index: usize,
    ) -> Result<StepStats, PolicyError> {
        assert!(!dataset.is_empty(), "dataset must be non-empty");
        let k = k_schedule(step_index, self.cfg.steps, self.d, self.cfg.k_schedule);

        // Per-element source choice: forward rollout or backward from data.
        let n_backward = (0..self.cfg.batch_size)
            .filter(|_| self.rng.random::<f64>() >= self.cfg.alpha)
            .count();
        let n_forward = self.cfg.batch_size - n_backward;
        let mut trajs = Vec::with_capacity(self.cfg.batch_size);
        if n_forward > 0 {
            trajs.extend(self.gfn.sample_forward_batch(
                n_forward,
                &mut self.rng,
                &self.cfg.exploration(),
            ));
        }
        if n_backward > 0 {
            let anchors: Vec<State> = (0..n_backward)
                .map(|_| dataset[self.rng.random_range(0..dataset.len())].clone())
                .collect();
            trajs.extend(self.gfn.sample_backward_batch(&anchors, self.d, &mut self.rng)?);
        }
        let terminals: Vec<State> = trajs.iter().map(|t| t.last().clone()).collect();
        let log_rewards: Vec<f64> = self
            .energy
            .energy_batch(&terminals)
            .into_iter()
            .map(|e| (-e).max(LOG_REWARD_FLOOR))
            .collect();
        let tb_loss = tb_update(
            &mut self.gfn,
            &trajs,
            &log_rewards,
            &mut self.policy_opt,
            self.cfg.grad_clip,
        )?;

        let data_batch: Vec<State> = (0..self.cfg.batch_size)
            .map(|_| dataset[self.rng.random_range(0..dataset.len())].clone())
            .collect();
        let stats = algorithm2_step(
            &self.gfn,
            &mut self.energy,
            &data_batch,
            k,
            &mut self.rng,
            &mut self.energy_opt,
        )?;

        Ok(StepStats {
            step: step_index,
            k,
            tb_loss,
            acceptance_rate: stats.acceptance_rate(),
            n_forward,
            n_backward,
        })
    }
}

/// Deterministic train/validation split by a seeded shuffle.
pub fn split_train_val(data: &[State], val_fraction: f64, seed: u64) -> (Vec<State>, Vec<State>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 0x51));
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_val = (data.len() as f64 * val_fraction).floor() as usize;
    let val: Vec<State> = order[..n_val].iter().map(|&i| data[i].clone()).collect();
    let train: Vec<State> = order[n_val..].iter().map(|&i| data[i].clone()).collect();
    (train, val)
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Identity => 0.0,
        Activation::Elu => 1.0,
        Activation::Swish => 2.0,
    }
}

fn activation_from_code(c: f64) -> Activation {
    match c as i64 {
        0 => Activation::Identity,
        2 => Activation::Swish,
        _ => Activation::Elu,
    }
}

/// Save policy, energy, and architecture metadata as one checkpoint.
pub fn save_model(path: &Path, gfn: &GFlowNet, energy: &AnyEnergy) -> Result<(), CheckpointError> {
    let mut meta = ParamStore::new();
    meta.set_scalar("d", gfn.d as f64);
    meta.insert(
        "policy_hidden",
        ndarray::Array1::from_iter(gfn.spec.hidden.iter().map(|&h| h as f64)).into_dyn(),
    );
    meta.set_scalar(
        "policy_activation",
        activation_code(gfn.spec.activations.first().copied().unwrap_or(Activation::Elu)),
    );
    meta.set_scalar("policy_layernorm", gfn.spec.layer_norm as u8 as f64);
    meta.set_scalar("uniform_backward", gfn.uniform_backward as u8 as f64);
    match energy {
        AnyEnergy::Ising(m) => {
            meta.set_scalar("energy_kind", 0.0);
            meta.set_scalar("energy_l1", m.l1_coeff);
        }
        AnyEnergy::Mlp(m) => {
            meta.set_scalar("energy_kind", 1.0);
            meta.insert(
                "energy_hidden",
                ndarray::Array1::from_iter(m.spec.hidden.iter().map(|&h| h as f64)).into_dyn(),
            );
            meta.set_scalar(
                "energy_activation",
                activation_code(m.spec.activations.first().copied().unwrap_or(Activation::Elu)),
            );
        }
    }
    write_checkpoint(path, &[("meta", &meta), ("policy", &gfn.params), ("energy", energy.params())])
}

/// Rebuild both models from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(GFlowNet, AnyEnergy), CheckpointError> {
    let map = read_checkpoint(path)?;
    let meta = section(&map, "meta");
    let bad = |what: &str| CheckpointError::BadRecord {
        line: 0,
        reason: format!("missing or malformed meta.{what}"),
    };
    let d = meta.scalar("d").map_err(|_| bad("d"))? as usize;
    let policy_hidden: Vec<usize> = meta
        .vector("policy_hidden")
        .map_err(|_| bad("policy_hidden"))?
        .iter()
        .map(|&h| h as usize)
        .collect();
    let policy_act = activation_from_code(meta.scalar("policy_activation").map_err(|_| bad("policy_activation"))?);
    let layer_norm = meta.scalar("policy_layernorm").map_err(|_| bad("policy_layernorm"))? != 0.0;
    let uniform_backward =
        meta.scalar("uniform_backward").map_err(|_| bad("uniform_backward"))? != 0.0;
    let spec = MlpSpec::new(d, &policy_hidden, 3 * d, policy_act).with_layer_norm(layer_norm);
    let gfn = GFlowNet::from_parts(spec, section(&map, "policy"), uniform_backward);

    let energy_kind = meta.scalar("energy_kind").map_err(|_| bad("energy_kind"))?;
    let energy = if energy_kind == 0.0 {
        let l1 = meta.scalar("energy_l1").unwrap_or(0.0);
        let j = section(&map, "energy")
            .matrix("j")
            .map_err(|_| bad("energy j"))?
            .to_owned();
        AnyEnergy::Ising(IsingEnergy::from_matrix(j, l1))
    } else {
        let hidden: Vec<usize> = meta
            .vector("energy_hidden")
            .map_err(|_| bad("energy_hidden"))?
            .iter()
            .map(|&h| h as usize)
            .collect();
        let act = activation_from_code(
            meta.scalar("energy_activation").map_err(|_| bad("energy_activation"))?,
        );
        let spec = MlpSpec::new(d, &hidden, 1, act);
        AnyEnergy::Mlp(MlpEnergy::from_parts(spec, section(&map, "energy")))
    };
    Ok((gfn, energy))
}
