use ebgfn_core::nn::{Activation, AdamState};
use ebgfn_core::oracle::exact_pt;
use ebgfn_core::policy::{tb_update, ExplorationCfg, GFlowNet, Policy};
use ebgfn_core::util::rng_from_seed;
use rand::Rng;
use std::time::Instant;

fn main() {
    let d = 4;
    let mut rng = rng_from_seed(1234);
    let reward: Vec<f64> = (0..16).map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = reward.iter().sum();
    let target: Vec<f64> = reward.iter().map(|r| r / z).collect();
    let log_r: Vec<f64> = reward.iter().map(|r| r.ln()).collect();

    let mut gfn = GFlowNet::new(d, &[48, 48], Activation::Elu, false, false, &mut rng);
    let mut opt = AdamState::new(&gfn.params, 3e-3).with_lr_override("log_z", 3e-2);
    let explore = ExplorationCfg { epsilon: 0.05, temperature: 1.0 };
    let t0 = Instant::now();
    for step in 0..10_000 {
        let trajs = gfn.sample_forward_batch(64, &mut rng, &explore);
        let lrs: Vec<f64> = trajs.iter().map(|t| log_r[t.last().terminal_index() as usize]).collect();
        tb_update(&mut gfn, &trajs, &lrs, &mut opt, 10.0).unwrap();
        if (step + 1) % 500 == 0 {
            let pt = exact_pt(&gfn, d).unwrap();
            let tv: f64 = pt.iter().zip(&target).map(|(p, q)| (p - q).abs()).sum::<f64>() / 2.0;
            println!("step {} tv {:.5} logz {:.4} (true ln Z {:.4}) [{:.1}s]", step + 1, tv, gfn.log_z(), z.ln(), t0.elapsed().as_secs_f64());
            if tv <= 0.01 { println!("reached at step {}", step + 1); break; }
        }
    }
}
