//! Central finite-difference verification of analytic gradients, shared by
//! the command-line check suite and the acceptance tests.

use crate::energy::{EnergyModel, MlpEnergy};
use crate::nn::{mlp_apply, mlp_grad, Activation, MlpSpec, ParamStore};
use crate::policy::{tb_loss, ExplorationCfg, GFlowNet};
use crate::state::Trajectory;
use rand::Rng;

/// Perturbation used by every check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    /// Number of scalar parameters compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Compare `analytic` against central differences of `f` at `params`.
/// Relative error uses a unit floor so near-zero gradients are compared
/// absolutely.
pub fn check_scalar_fn<F>(params: &ParamStore, f: F, analytic: &ParamStore) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let flat = params.flatten();
    let analytic_flat = analytic.flatten();
    assert_eq!(flat.len(), analytic_flat.len());
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for k in 0..flat.len() {
        let mut fp = flat.clone();
        fp[k] += FD_STEP;
        work.load_flat(&fp);
        let up = f(&work);
        fp[k] -= 2.0 * FD_STEP;
        work.load_flat(&fp);
        let dn = f(&work);
        let fd = (up - dn) / (2.0 * FD_STEP);
        let ad = analytic_flat[k];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    report
}

/// One random MLP configuration: the scalar is `<output, cotangent>`.
pub fn check_mlp_config<R: Rng>(
    activation: Activation,
    layer_norm: bool,
    hidden: &[usize],
    rng: &mut R,
) -> GradCheckReport {
    let input_dim = rng.random_range(2..5);
    let output_dim = rng.random_range(1..4);
    let spec = MlpSpec::new(input_dim, hidden, output_dim, activation).with_layer_norm(layer_norm);
    let params = spec.init_params(rng);
    let input: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cot: Vec<f64> = (0..output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, tape) = mlp_apply(&spec, &params, &input).expect("valid spec");
    let (analytic, _) = mlp_grad(&spec, &params, &tape, &cot).expect("valid tape");
    check_scalar_fn(
        &params,
        |p| {
            let (out, _) = mlp_apply(&spec, p, &input).expect("valid spec");
            out.iter().zip(&cot).map(|(o, c)| o * c).sum()
        },
        &analytic,
    )
}

/// One random trajectory balance configuration over a small dimension.
pub fn check_tb_config<R: Rng>(uniform_backward: bool, rng: &mut R) -> GradCheckReport {
    let d = rng.random_range(2..4);
    let hidden = vec![rng.random_range(3..7)];
    let gfn = GFlowNet::new(d, &hidden, Activation::Elu, false, uniform_backward, rng);
    let trajs: Vec<Trajectory> = gfn.sample_forward_batch(3, rng, &ExplorationCfg::none());
    let log_rewards: Vec<f64> = (0..trajs.len()).map(|_| rng.random_range(-1.0..0.0)).collect();
    let (_, analytic) = gfn.tb_loss_batch(&trajs, &log_rewards).expect("finite rewards");
    check_scalar_fn(
        &gfn.params,
        |p| {
            let g = GFlowNet::from_parts(gfn.spec.clone(), p.clone(), uniform_backward);
            trajs
                .iter()
                .zip(&log_rewards)
                .map(|(t, &lr)| tb_loss(&g, t, lr).expect("finite"))
                .sum::<f64>()
                / trajs.len() as f64
        },
        &analytic,
    )
}

/// One random MLP-energy configuration: the scalar is the energy itself.
pub fn check_energy_config<R: Rng>(rng: &mut R) -> GradCheckReport {
    let d = rng.random_range(2..6);
    let hidden = vec![rng.random_range(3..8)];
    let model = MlpEnergy::new(d, &hidden, Activation::Elu, rng);
    let x = crate::energy::random_terminal(d, rng);
    let mut analytic = model.params().zeros_like();
    model.accumulate_grad(std::slice::from_ref(&x), 1.0, &mut analytic);
    let spec = model.spec.clone();
    check_scalar_fn(
        model.params(),
        |p| MlpEnergy::from_parts(spec.clone(), p.clone()).energy(&x),
        &analytic,
    )
}

/// The full randomized suite: every layer type, composed networks with and
/// without normalization, the trajectory balance loss under both backward
/// policies, and the MLP energy.
pub fn run_gradient_suite(configurations: usize, seed: u64) -> GradCheckReport {
    let mut rng = crate::util::rng_from_seed(seed);
    let mut report = GradCheckReport::default();
    for i in 0..configurations {
        let sub = match i % 10 {
            0 => check_mlp_config(Activation::Identity, false, &[], &mut rng),
            1 => check_mlp_config(Activation::Elu, false, &[4], &mut rng),
            2 => check_mlp_config(Activation::Swish, false, &[5], &mut rng),
            3 => check_mlp_config(Activation::Elu, true, &[6], &mut rng),
            4 => check_mlp_config(Activation::Swish, true, &[4, 5], &mut rng),
            5 => check_mlp_config(Activation::Elu, false, &[5, 4], &mut rng),
            6 => check_tb_config(false, &mut rng),
            7 => check_tb_config(true, &mut rng),
            _ => check_energy_config(&mut rng),
        };
        report.merge(sub);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_spec_tolerance() {
        let report = run_gradient_suite(20, 123);
        assert!(report.checked > 100);
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        let mut rng = crate::util::rng_from_seed(7);
        let spec = MlpSpec::new(3, &[4], 2, Activation::Elu);
        let params = spec.init_params(&mut rng);
        let input = [0.3, -0.4, 0.9];
        let cot = [1.0, -0.5];
        let (_, tape) = mlp_apply(&spec, &params, &input).unwrap();
        let (mut analytic, _) = mlp_grad(&spec, &params, &tape, &cot).unwrap();
        analytic.get_mut("w0").unwrap()[[0, 0]] += 0.5;
        let report = check_scalar_fn(
            &params,
            |p| {
                let (out, _) = mlp_apply(&spec, p, &input).unwrap();
                out.iter().zip(&cot).map(|(o, c)| o * c).sum()
            },
            &analytic,
        );
        assert!(!report.passes(1e-4));
    }
}
