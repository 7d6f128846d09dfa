use ebgfn_core::eval::{j_recovery_score, pearson_upper_tri};
use ebgfn_core::tasks::{ising_generate, IsingSpec};
use ebgfn_core::trainer::{Trainer, TrainerCfg, EnergyKind, KSchedule};
use std::time::Instant;

fn run(label: &str, hidden: Vec<usize>, plr: f64, eps: f64, uniform_pb: bool, steps: usize) {
    let spec = IsingSpec::new(4, 0.25, 2000, 100);
    let (j_true, data) = ising_generate(&spec);
    let cfg = TrainerCfg {
        policy_hidden: hidden,
        energy_kind: EnergyKind::Ising,
        l1: 0.01,
        alpha: 1.0,
        steps,
        batch_size: 256,
        policy_lr: plr,
        logz_lr: 10.0 * plr,
        energy_lr: 1e-3,
        epsilon: eps,
        uniform_backward: uniform_pb,
        k_schedule: KSchedule::Constant(16),
        seed: 200,
        ..TrainerCfg::default()
    };
    let t0 = Instant::now();
    let mut tr = Trainer::new(&cfg, 16);
    let mut acc = 0.0;
    for step in 0..steps {
        let st = tr.train_step(&data, step).unwrap();
        acc = 0.95 * acc + 0.05 * st.acceptance_rate;
        if (step + 1) % 1000 == 0 {
            let j = match &tr.energy { ebgfn_core::trainer::AnyEnergy::Ising(m) => m.coupling().to_owned(), _ => unreachable!() };
            let s = j_recovery_score(&j_true, &j).unwrap();
            let p = pearson_upper_tri(&j_true, &j).unwrap();
            println!("{label} step {} score {s:.3} pearson {p:.3} acc~{acc:.3} [{:.0}s]", step + 1, t0.elapsed().as_secs_f64());
        }
    }
}

fn main() {
    let which: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    match which {
        0 => run("lr3e-3        ", vec![128, 128], 3e-3, 0.05, false, steps),
        1 => run("lr3e-3+unifpb ", vec![128, 128], 3e-3, 0.05, true, steps),
        2 => run("lr3e-3+eps0.1 ", vec![128, 128], 3e-3, 0.10, false, steps),
        3 => run("lr1e-2        ", vec![128, 128], 1e-2, 0.05, false, steps),
        4 => run("lr3e-3 256    ", vec![256, 256], 3e-3, 0.05, false, steps),
        _ => run("lr1e-2+unifpb ", vec![128, 128], 1e-2, 0.05, true, steps),
    }
}
