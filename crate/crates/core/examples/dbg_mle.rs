// Exact-negative MLE ceiling for J recovery at D=16, vectorized.
use ebgfn_core::eval::{j_recovery_score, pearson_upper_tri};
use ebgfn_core::tasks::{ising_generate, IsingSpec};
use ndarray::{Array1, Array2, Axis};

fn main() {
    let l1: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let lr = 1e-3;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let d = 16usize;
    let n_states = 1usize << d;
    // Spin matrix over all states.
    let mut spins = Array2::<f64>::zeros((n_states, d));
    for ix in 0..n_states {
        for k in 0..d {
            spins[[ix, k]] = if ix >> k & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
    for seed in 0..3u64 {
        let spec = IsingSpec::new(4, 0.25, 2000, 100 + seed);
        let (j_true, data) = ising_generate(&spec);
        // Data moment matrix: mean of s s^T over the dataset.
        let mut data_spins = Array2::<f64>::zeros((data.len(), d));
        for (mut row, s) in data_spins.rows_mut().into_iter().zip(&data) {
            for (k, b) in s.to_bits().into_iter().enumerate() {
                row[k] = if b { 1.0 } else { -1.0 };
            }
        }
        let data_moment = data_spins.t().dot(&data_spins) / data.len() as f64;

        let mut j = Array2::<f64>::zeros((d, d));
        let mut m = Array2::<f64>::zeros((d, d));
        let mut v = Array2::<f64>::zeros((d, d));
        for step in 1..=steps {
            // Boltzmann weights under current J.
            let sj = spins.dot(&j);
            let e: Array1<f64> = -(&sj * &spins).sum_axis(Axis(1));
            let emin = e.iter().cloned().fold(f64::INFINITY, f64::min);
            let w = e.mapv(|x| (emin - x).exp());
            let z = w.sum();
            let weighted = &spins * &w.view().insert_axis(Axis(1));
            let model_moment = spins.t().dot(&weighted) / z;
            // dNLL/dJ = -(data_moment - model_moment), plus l1 subgradient.
            let mut g = &model_moment - &data_moment;
            g.zip_mut_with(&j, |gv, &jv| *gv += l1 * jv.signum() * (jv != 0.0) as u8 as f64);
            let bc1 = 1.0 - b1.powi(step as i32);
            let bc2 = 1.0 - b2.powi(step as i32);
            ndarray::Zip::from(&mut j).and(&mut m).and(&mut v).and(&g).for_each(|jv, mv, vv, &gv| {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *jv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            });
            for i in 0..d { j[[i, i]] = 0.0; }
            for i in 0..d { for k in (i+1)..d { let a = 0.5*(j[[i,k]]+j[[k,i]]); j[[i,k]]=a; j[[k,i]]=a; } }
            if step % 1000 == 0 {
                let s = j_recovery_score(&j_true, &j).unwrap();
                let p = pearson_upper_tri(&j_true, &j).unwrap();
                println!("seed {seed} step {step} score {s:.4} pearson {p:.4}");
            }
        }
    }
}
