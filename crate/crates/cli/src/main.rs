//! `ebgfn`: data generation, joint training, evaluation, sampling, exact
//! oracle checks, and plot-data export for energy-based GFlowNets.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::Rng;
use std::fs;
use std::path::{Path, PathBuf};

use ebgfn_core::energy::EnergyModel;
use ebgfn_core::eval::{self, MetricReport, MmdKernel};
use ebgfn_core::nn::ParamStore;
use ebgfn_core::oracle;
use ebgfn_core::policy::{sample_backward_trajectory, sample_forward_from, ExplorationCfg};
use ebgfn_core::state::State;
use ebgfn_core::tasks::{
    self, gray_dequantize, gray_quantize, read_dataset, write_dataset, DatasetMeta, IsingSpec,
    PlaneDataset, BOX_HI, BOX_LO, PLANE_DIM,
};
use ebgfn_core::trainer::{
    load_model, parse_config, save_model, split_train_val, AnyEnergy, Trainer,
};
use ebgfn_core::util::{derive_seed, rng_from_seed};

#[derive(Parser)]
#[command(name = "ebgfn", about = "Energy-based GFlowNets over binary data", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset file from a named task.
    GenData {
        /// ising or one of: 2spirals 8gaussians circles moons pinwheel
        /// swissroll checkerboard
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ising coupling strength (J = sigma * adjacency).
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        /// Ising grid side length (D = grid_n^2).
        #[arg(long, default_value_t = 4)]
        grid_n: usize,
        /// Also write the generating coupling matrix (checkpoint format).
        #[arg(long)]
        truth_j_out: Option<PathBuf>,
    },
    /// Run joint training from a config file and a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// nll, mmd-exp, mmd-linear, or j-rmse.
        #[arg(long)]
        metric: String,
        /// Backward samples per test point (nll).
        #[arg(long, default_value_t = 100)]
        m: usize,
        /// Repeats of the 4000-vs-4000 protocol (mmd).
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// True coupling matrix file (j-rmse).
        #[arg(long)]
        truth_j: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw terminal samples from a checkpoint's forward policy.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run exact-oracle property suites and report pass/fail.
    OracleCheck {
        /// props, gradients, or flows.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 4)]
        d: usize,
    },
    /// Export decoded 2D samples and an energy heatmap as CSV.
    ExportPlot {
        #[arg(long)]
        ckpt: PathBuf,
        /// Planar task name, used for decoding.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of decoded samples.
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { task, out, n, seed, sigma, grid_n, truth_j_out } => {
            gen_data(&task, &out, n, seed, sigma, grid_n, truth_j_out.as_deref())
        }
        Cmd::Train { config, data, out_dir } => train(&config, &data, &out_dir),
        Cmd::Eval { ckpt, data, metric, m, reps, truth_j, seed } => {
            run_eval(&ckpt, &data, &metric, m, reps, truth_j.as_deref(), seed)
        }
        Cmd::Sample { ckpt, n, out, seed } => sample(&ckpt, n, &out, seed),
        Cmd::OracleCheck { suite, d } => oracle_check(&suite, d),
        Cmd::ExportPlot { ckpt, task, out, n, seed } => export_plot(&ckpt, &task, &out, n, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Write through a temporary sibling so incomplete output never lands at the
/// final path.
fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, content).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn gen_data(
    task: &str,
    out: &Path,
    n: usize,
    seed: u64,
    sigma: f64,
    grid_n: usize,
    truth_j_out: Option<&Path>,
) -> Result<()> {
    let (meta, samples, truth_j) = if task == "ising" {
        let spec = IsingSpec::new(grid_n, sigma, n, seed);
        let (j, samples) = tasks::ising_generate(&spec);
        let meta = DatasetMeta { d: spec.dim(), name: "ising".into(), seed };
        (meta, samples, Some(j))
    } else {
        let dataset = PlaneDataset::parse(task)?;
        let samples = tasks::plane_generate(dataset, n, seed);
        let meta = DatasetMeta { d: PLANE_DIM, name: dataset.name().into(), seed };
        (meta, samples, None)
    };
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_dataset(&tmp, &meta, &samples)?;
    fs::rename(&tmp, out).with_context(|| format!("renaming into {}", out.display()))?;
    if let Some(path) = truth_j_out {
        let j = truth_j.ok_or_else(|| anyhow!("--truth-j-out only applies to --task ising"))?;
        let mut store = ParamStore::new();
        store.insert("j", j.into_dyn());
        ebgfn_core::checkpoint::write_checkpoint(path, &[("truth", &store)])?;
    }
    println!("wrote {} samples (D={}) to {}", n, meta.d, out.display());
    Ok(())
}

fn train(config_path: &Path, data_path: &Path, out_dir: &Path) -> Result<()> {
    let config_text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = parse_config(&config_text)?;
    let (meta, data) = read_dataset(data_path)?;
    if data.is_empty() {
        bail!("dataset {} is empty", data_path.display());
    }
    fs::create_dir_all(out_dir)?;
    let (train_data, val_data) = split_train_val(&data, cfg.val_fraction, cfg.seed);
    let val_slice: Vec<State> = val_data.iter().take(cfg.val_points.max(1)).cloned().collect();

    let mut trainer = Trainer::new(&cfg, meta.d);
    let mut log_rows = vec!["step,tb_loss,acceptance,k,nll_val".to_string()];
    let mut best_val = f64::INFINITY;
    for step in 0..cfg.steps {
        let stats = trainer.train_step(&train_data, step)?;
        let mut val_cell = String::new();
        let do_eval = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if do_eval && !val_slice.is_empty() {
            let report = eval::nll(
                &trainer.gfn,
                &val_slice,
                cfg.nll_m,
                derive_seed(cfg.seed, step as u64),
            );
            val_cell = format!("{}", report.value);
            println!(
                "step {} tb_loss {:.6} acceptance {:.3} k {} val_nll {:.4}",
                step + 1,
                stats.tb_loss,
                stats.acceptance_rate,
                stats.k,
                report.value
            );
            if report.value < best_val {
                best_val = report.value;
                save_model(&out_dir.join("ckpt_best.txt"), &trainer.gfn, &trainer.energy)?;
            }
        }
        log_rows.push(format!(
            "{},{},{},{},{}",
            step + 1,
            stats.tb_loss,
            stats.acceptance_rate,
            stats.k,
            val_cell
        ));
        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 {
            save_model(
                &out_dir.join(format!("ckpt_{}.txt", step + 1)),
                &trainer.gfn,
                &trainer.energy,
            )?;
        }
    }
    save_model(&out_dir.join("ckpt_final.txt"), &trainer.gfn, &trainer.energy)?;
    write_atomic(&out_dir.join("train_log.csv"), &(log_rows.join("\n") + "\n"))?;
    println!("finished {} steps; artifacts in {}", cfg.steps, out_dir.display());
    Ok(())
}

fn run_eval(
    ckpt: &Path,
    data_path: &Path,
    metric: &str,
    m: usize,
    reps: usize,
    truth_j: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (gfn, energy) = load_model(ckpt)?;
    let (_, data) = read_dataset(data_path)?;
    let report: MetricReport = match metric {
        "nll" => {
            if m == 0 {
                bail!("--m must be at least 1");
            }
            if data.is_empty() {
                bail!("dataset {} is empty", data_path.display());
            }
            eval::nll(&gfn, &data, m, seed)
        }
        "mmd-exp" => eval::mmd_protocol(
            &gfn,
            &data,
            MmdKernel::ExpHamming { bandwidth: 0.1 },
            reps,
            4000,
            seed,
        )?,
        "mmd-linear" => eval::mmd_protocol(&gfn, &data, MmdKernel::Linear, reps, 4000, seed)?,
        "j-rmse" => {
            let truth_path = truth_j.ok_or_else(|| anyhow!("--truth-j is required for j-rmse"))?;
            let map = ebgfn_core::checkpoint::read_checkpoint(truth_path)?;
            let truth = ebgfn_core::checkpoint::section(&map, "truth");
            let j_true = truth
                .matrix("j")
                .map_err(|_| anyhow!("{} has no truth.j matrix", truth_path.display()))?
                .to_owned();
            let AnyEnergy::Ising(ising) = &energy else {
                bail!("j-rmse needs an Ising-energy checkpoint");
            };
            let score = eval::j_recovery_score(&j_true, &ising.coupling().to_owned())?;
            MetricReport {
                metric: "j-rmse".into(),
                value: score,
                stderr: 0.0,
                n: j_true.nrows(),
                m: 0,
                reps: 1,
                seed,
            }
        }
        other => bail!("unknown metric {other:?}"),
    };
    println!("{}", MetricReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

fn sample(ckpt: &Path, n: usize, out: &Path, seed: u64) -> Result<()> {
    let (gfn, _) = load_model(ckpt)?;
    let samples = eval::sample_terminals(&gfn, n, seed);
    let meta = DatasetMeta { d: gfn.d, name: "sample".into(), seed };
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_dataset(&tmp, &meta, &samples)?;
    fs::rename(&tmp, out)?;
    println!("wrote {} samples to {}", n, out.display());
    Ok(())
}

fn oracle_check(suite: &str, d: usize) -> Result<()> {
    let mut failures = 0usize;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failures += 1;
        }
    };
    match suite {
        "props" => {
            let mut rng = rng_from_seed(2024);
            // Maximal entropy of the uniform backward policy.
            let mut prop1_ok = true;
            let mut worst_gap = f64::INFINITY;
            for dim in 2..=d.min(3) {
                for _ in 0..20 {
                    let reward = oracle::random_reward(dim, &mut rng);
                    let uniform =
                        oracle::flow_from_pb_and_reward(&reward, oracle::uniform_pb, dim)?;
                    let h_uniform = oracle::flow_entropy(&uniform);
                    for _ in 0..100 {
                        let pb = oracle::TabularPb::random(dim, &mut rng);
                        let flow =
                            oracle::flow_from_pb_and_reward(&reward, |s| pb.probs(s), dim)?;
                        let gap = h_uniform - oracle::flow_entropy(&flow);
                        worst_gap = worst_gap.min(gap);
                        prop1_ok &= gap >= -1e-12;
                    }
                }
            }
            check("prop1-max-entropy", prop1_ok, format!("min entropy gap {worst_gap:.3e}"));

            // Unit acceptance of back-and-forth proposals under exact flows.
            let mut prop2_ok = true;
            let mut worst_dev: f64 = 0.0;
            let reward = oracle::random_reward(d, &mut rng);
            let flow = oracle::flow_from_pb_and_reward(&reward, oracle::uniform_pb, d)?;
            let policy = flow.tabular_policy();
            for k in 1..=d {
                for _ in 0..200 {
                    let x = State::from_terminal_index(rng.random_range(0..1u64 << d), d);
                    let tau = sample_backward_trajectory(&policy, &x, k, &mut rng)
                        .map_err(|e| anyhow!("{e}"))?;
                    let tau_new = sample_forward_from(
                        &policy,
                        &tau.start,
                        &mut rng,
                        &ExplorationCfg::none(),
                    );
                    let x_new = tau_new.last().clone();
                    let ratio = oracle::mh_accept_exact_check(&flow, &x, &x_new, &tau, &tau_new);
                    worst_dev = worst_dev.max((ratio - 1.0).abs());
                    prop2_ok &= (ratio - 1.0).abs() < 1e-9;
                }
            }
            check("prop2-always-accept", prop2_ok, format!("max |ratio - 1| {worst_dev:.3e}"));
        }
        "gradients" => {
            let report = ebgfn_core::gradcheck::run_gradient_suite(30, 99);
            check(
                "finite-difference-gradients",
                report.passes(1e-4),
                format!("{} parameters, max rel err {:.3e}", report.checked, report.max_rel_err),
            );
        }
        "flows" => {
            let mut rng = rng_from_seed(7);
            let reward = oracle::random_reward(d, &mut rng);
            let pb = oracle::TabularPb::random(d, &mut rng);
            let flow = oracle::flow_from_pb_and_reward(&reward, |s| pb.probs(s), d)?;
            let residual = flow.conservation_residual();
            check("flow-conservation", residual < 1e-9, format!("max residual {residual:.3e}"));
            let pt = oracle::exact_pt(&flow.tabular_policy(), d)?;
            let z: f64 = reward.iter().sum();
            let tv: f64 =
                pt.iter().zip(&reward).map(|(p, r)| (p - r / z).abs()).sum::<f64>() / 2.0;
            check("reward-matching", tv < 1e-9, format!("TV from R/Z {tv:.3e}"));
            let mass: f64 = pt.iter().sum();
            check("pt-normalization", (mass - 1.0).abs() < 1e-10, format!("sum {mass}"));
        }
        other => bail!("unknown suite {other:?} (expected props, gradients, or flows)"),
    }
    if failures > 0 {
        bail!("{failures} check(s) failed");
    }
    Ok(())
}

fn export_plot(ckpt: &Path, task: &str, out: &Path, n: usize, seed: u64) -> Result<()> {
    PlaneDataset::parse(task)?;
    let (gfn, energy) = load_model(ckpt)?;
    if gfn.d != PLANE_DIM {
        bail!("checkpoint dimension {} is not a planar model ({})", gfn.d, PLANE_DIM);
    }
    let mut rows = vec!["kind,x,y,value".to_string()];
    for s in eval::sample_terminals(&gfn, n, seed) {
        let (x, y) = gray_dequantize(&s);
        rows.push(format!("sample,{x},{y},0"));
    }
    // 200 x 200 heatmap of the learned energy over the bounding box.
    let grid = 200usize;
    let cell = (BOX_HI - BOX_LO) / grid as f64;
    let mut cells = Vec::with_capacity(grid * grid);
    for iy in 0..grid {
        for ix in 0..grid {
            let x = BOX_LO + (ix as f64 + 0.5) * cell;
            let y = BOX_LO + (iy as f64 + 0.5) * cell;
            cells.push((x, y, gray_quantize(x, y)?));
        }
    }
    let states: Vec<State> = cells.iter().map(|(_, _, s)| s.clone()).collect();
    let energies = energy.energy_batch(&states);
    for ((x, y, _), e) in cells.iter().zip(energies) {
        rows.push(format!("energy,{x},{y},{e}"));
    }
    write_atomic(out, &(rows.join("\n") + "\n"))?;
    println!("wrote {} samples and {}x{} energy grid to {}", n, grid, grid, out.display());
    Ok(())
}
