use ebgfn_core::energy::{pcd_step, EnergyModel, GibbsBudget, IsingEnergy, PcdBuffer};
use ebgfn_core::eval::{j_recovery_score, pearson_upper_tri};
use ebgfn_core::state::State;
use ebgfn_core::tasks::{ising_generate, IsingSpec};
use ebgfn_core::trainer::{Trainer, TrainerCfg, EnergyKind, KSchedule};
use ebgfn_core::nn::AdamState;
use ebgfn_core::util::rng_from_seed;
use rand::Rng;
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let l1: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let elr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seeds: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    for seed in 0..seeds {
        let t0 = Instant::now();
        let spec = IsingSpec::new(4, 0.25, 2000, 100 + seed);
        let (j_true, data) = ising_generate(&spec);
        let d = 16;

        let cfg = TrainerCfg {
            policy_hidden: vec![128, 128],
            energy_kind: EnergyKind::Ising,
            l1,
            alpha: 1.0,
            steps,
            batch_size: 256,
            policy_lr: 1e-3,
            logz_lr: 1e-2,
            energy_lr: elr,
            k_schedule: KSchedule::Constant(16),
            seed: 200 + seed,
            ..TrainerCfg::default()
        };
        let mut tr = Trainer::new(&cfg, d);
        let mut acc_last = 0.0;
        for step in 0..steps {
            let st = tr.train_step(&data, step).unwrap();
            acc_last = st.acceptance_rate;
            if (step + 1) % 1000 == 0 {
                let j_gfn = match &tr.energy {
                    ebgfn_core::trainer::AnyEnergy::Ising(m) => m.coupling().to_owned(),
                    _ => unreachable!(),
                };
                let s = j_recovery_score(&j_true, &j_gfn).unwrap();
                let p = pearson_upper_tri(&j_true, &j_gfn).unwrap();
                println!("  gfn step {} score {s:.4} pearson {p:.4} acc {acc_last:.3} [{:.0}s]", step + 1, t0.elapsed().as_secs_f64());
            }
        }

        for (label, budget) in [("sweeps100", GibbsBudget::Sweeps(100)), ("sites100", GibbsBudget::SiteUpdates(100))] {
            let t1 = Instant::now();
            let mut rng = rng_from_seed(300 + seed);
            let mut pcd = IsingEnergy::new(d, l1);
            let mut buf = PcdBuffer::new(10_000, d, 0.05, &mut rng);
            let mut opt = AdamState::new(pcd.params(), elr);
            for step in 0..steps {
                let batch: Vec<State> = (0..256).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
                pcd_step(&mut pcd, &mut buf, &batch, budget, &mut rng, &mut opt);
                if (step + 1) % 2000 == 0 {
                    let s = j_recovery_score(&j_true, &pcd.coupling().to_owned()).unwrap();
                    println!("  {label} step {} score {s:.4} [{:.0}s]", step + 1, t1.elapsed().as_secs_f64());
                }
            }
            let s = j_recovery_score(&j_true, &pcd.coupling().to_owned()).unwrap();
            let p = pearson_upper_tri(&j_true, &pcd.coupling().to_owned()).unwrap();
            println!("seed {seed} {label}: score {s:.4} pearson {p:.4}");
        }
    }
}
