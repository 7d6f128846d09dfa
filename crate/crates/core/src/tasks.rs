//! Data generation: Ising ground-truth sampling by long-run Gibbs, the seven
//! planar toy distributions, Gray-code quantization of the plane into
//! `{0,1}^32`, and the dataset file format.

use crate::energy::{random_terminal, torus_adjacency, EnergyModel, GibbsBudget, IsingEnergy};
use crate::state::State;
use crate::util::rng_from_seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::Write;
use std::path::Path;

/// Bits per planar coordinate.
pub const PLANE_BITS: usize = 16;
/// Dimension of quantized planar data.
pub const PLANE_DIM: usize = 2 * PLANE_BITS;
/// Quantization bounding box, shared by every planar dataset.
pub const BOX_LO: f64 = -4.0;
pub const BOX_HI: f64 = 4.0;

#[derive(Debug)]
pub enum TaskError {
    UnknownDataset(String),
    OutOfBox { x: f64, y: f64 },
    BadFile { path: String, reason: String },
    Io(std::io::Error),
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::UnknownDataset(name) => write!(f, "unknown dataset {name:?}"),
            TaskError::OutOfBox { x, y } => {
                write!(f, "point ({x}, {y}) outside [{BOX_LO}, {BOX_HI}]^2")
            }
            TaskError::BadFile { path, reason } => write!(f, "bad dataset file {path}: {reason}"),
            TaskError::Io(e) => write!(f, "dataset io error: {e}"),
        }
    }
}

impl std::error::Error for TaskError {}

impl From<std::io::Error> for TaskError {
    fn from(e: std::io::Error) -> Self {
        TaskError::Io(e)
    }
}

/// Square-lattice Ising ground truth: `J = sigma * A_N` on an `N x N` torus,
/// sampled by a burned-in, thinned Gibbs chain.
#[derive(Clone, Debug)]
pub struct IsingSpec {
    pub grid_n: usize,
    pub sigma: f64,
    pub count: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
}

impl IsingSpec {
    pub fn new(grid_n: usize, sigma: f64, count: usize, seed: u64) -> Self {
        IsingSpec { grid_n, sigma, count, burn_in: 10_000, thinning: 10, seed }
    }

    pub fn dim(&self) -> usize {
        self.grid_n * self.grid_n
    }
}

/// Draws `spec.count` samples and returns them with the generating matrix.
pub fn ising_generate(spec: &IsingSpec) -> (Array2<f64>, Vec<State>) {
    let j = torus_adjacency(spec.grid_n) * spec.sigma;
    let model = IsingEnergy::from_matrix(j.clone(), 0.0);
    let mut rng = rng_from_seed(spec.seed);
    let mut cur = random_terminal(spec.dim(), &mut rng);
    cur = model.gibbs_run(&cur, GibbsBudget::Sweeps(spec.burn_in), &mut rng);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        cur = model.gibbs_run(&cur, GibbsBudget::Sweeps(spec.thinning.max(1)), &mut rng);
        out.push(cur.clone());
    }
    (j, out)
}

/// The seven planar toy distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneDataset {
    TwoSpirals,
    EightGaussians,
    Circles,
    Moons,
    Pinwheel,
    Swissroll,
    Checkerboard,
}

pub const PLANE_DATASETS: [PlaneDataset; 7] = [
    PlaneDataset::TwoSpirals,
    PlaneDataset::EightGaussians,
    PlaneDataset::Circles,
    PlaneDataset::Moons,
    PlaneDataset::Pinwheel,
    PlaneDataset::Swissroll,
    PlaneDataset::Checkerboard,
];

impl PlaneDataset {
    pub fn parse(name: &str) -> Result<Self, TaskError> {
        match name {
            "2spirals" => Ok(PlaneDataset::TwoSpirals),
            "8gaussians" => Ok(PlaneDataset::EightGaussians),
            "circles" => Ok(PlaneDataset::Circles),
            "moons" => Ok(PlaneDataset::Moons),
            "pinwheel" => Ok(PlaneDataset::Pinwheel),
            "swissroll" => Ok(PlaneDataset::Swissroll),
            "checkerboard" => Ok(PlaneDataset::Checkerboard),
            other => Err(TaskError::UnknownDataset(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PlaneDataset::TwoSpirals => "2spirals",
            PlaneDataset::EightGaussians => "8gaussians",
            PlaneDataset::Circles => "circles",
            PlaneDataset::Moons => "moons",
            PlaneDataset::Pinwheel => "pinwheel",
            PlaneDataset::Swissroll => "swissroll",
            PlaneDataset::Checkerboard => "checkerboard",
        }
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(BOX_LO, BOX_HI)
}

/// One draw from a planar oracle, clipped into the bounding box.
pub fn plane_sample<R: Rng>(dataset: PlaneDataset, rng: &mut R) -> (f64, f64) {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let (x, y) = match dataset {
        PlaneDataset::TwoSpirals => {
            // Two interleaved Archimedean spirals, 1.5 turns, noise 0.1.
            let n = rng.random::<f64>().sqrt() * 540.0 * std::f64::consts::PI / 180.0;
            let dx = -n.cos() * n + rng.random::<f64>() * 0.5;
            let dy = n.sin() * n + rng.random::<f64>() * 0.5;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (
                sign * dx / 3.0 + 0.1 * std_normal.sample(rng),
                sign * dy / 3.0 + 0.1 * std_normal.sample(rng),
            )
        }
        PlaneDataset::EightGaussians => {
            // Isotropic sigma = 0.2 components on a circle of radius 2 sqrt 2.
            let r = 2.0 * std::f64::consts::SQRT_2;
            let k = rng.random_range(0..8) as f64;
            let angle = k * std::f64::consts::FRAC_PI_4;
            (
                r * angle.cos() + 0.2 * std_normal.sample(rng),
                r * angle.sin() + 0.2 * std_normal.sample(rng),
            )
        }
        PlaneDataset::Circles => {
            // Concentric circles of radii 2 and 4, coordinate noise 0.1.
            let radius = if rng.random::<bool>() { 4.0 } else { 2.0 };
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            (
                radius * angle.cos() + 0.1 * std_normal.sample(rng),
                radius * angle.sin() + 0.1 * std_normal.sample(rng),
            )
        }
        PlaneDataset::Moons => {
            // Two half-moons, noise 0.1, stretched and shifted into the box.
            let t = rng.random::<f64>() * std::f64::consts::PI;
            let (mx, my) = if rng.random::<bool>() {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            (
                (mx + 0.1 * std_normal.sample(rng)) * 2.0 - 1.0,
                (my + 0.1 * std_normal.sample(rng)) * 2.0 - 0.2,
            )
        }
        PlaneDataset::Pinwheel => {
            // Five arms with radial/angular warp.
            let arm = rng.random_range(0..5) as f64;
            let radial = 1.0 + 0.3 * std_normal.sample(rng);
            let tangential = 0.1 * std_normal.sample(rng);
            let angle = arm * std::f64::consts::TAU / 5.0 + 0.25 * radial.exp();
            let (sin, cos) = angle.sin_cos();
            (
                2.0 * (radial * cos - tangential * sin),
                2.0 * (radial * sin + tangential * cos),
            )
        }
        PlaneDataset::Swissroll => {
            // 2D projection of the classic roll, shrunk by 5.
            let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.random::<f64>());
            (
                (t * t.cos() + std_normal.sample(rng)) / 5.0,
                (t * t.sin() + std_normal.sample(rng)) / 5.0,
            )
        }
        PlaneDataset::Checkerboard => {
            // Uniform over the 8 black unit squares of the 4x4 board on
            // [-2, 2]^2.
            let x1 = rng.random::<f64>() * 4.0 - 2.0;
            let shift = if rng.random::<bool>() { -2.0 } else { 0.0 };
            let x2 = rng.random::<f64>() + shift + (x1.floor().rem_euclid(2.0));
            (x1, x2)
        }
    };
    (clip(x), clip(y))
}

fn num_buckets() -> u32 {
    1u32 << PLANE_BITS
}

/// Binary-reflected Gray code of a bucket index.
pub fn gray_encode(b: u32) -> u32 {
    b ^ (b >> 1)
}

/// Inverse Gray code (prefix xor).
pub fn gray_decode(mut g: u32) -> u32 {
    let mut mask = g >> 1;
    while mask != 0 {
        g ^= mask;
        mask >>= 1;
    }
    g
}

fn coord_to_bucket(v: f64) -> u32 {
    let scaled = (v - BOX_LO) / (BOX_HI - BOX_LO) * num_buckets() as f64;
    (scaled.floor() as i64).clamp(0, num_buckets() as i64 - 1) as u32
}

fn bucket_center(b: u32) -> f64 {
    BOX_LO + (b as f64 + 0.5) * (BOX_HI - BOX_LO) / num_buckets() as f64
}

/// Quantize a planar point into a terminal state of 32 bits: each coordinate
/// maps to one of `2^16` equal-width buckets, the bucket index is
/// Gray-coded, and bits are laid out most-significant first, x before y.
pub fn gray_quantize(x: f64, y: f64) -> Result<State, TaskError> {
    if !(BOX_LO..=BOX_HI).contains(&x) || !(BOX_LO..=BOX_HI).contains(&y) {
        return Err(TaskError::OutOfBox { x, y });
    }
    let gx = gray_encode(coord_to_bucket(x));
    let gy = gray_encode(coord_to_bucket(y));
    let mut bits = Vec::with_capacity(PLANE_DIM);
    for k in 0..PLANE_BITS {
        bits.push(gx >> (PLANE_BITS - 1 - k) & 1 == 1);
    }
    for k in 0..PLANE_BITS {
        bits.push(gy >> (PLANE_BITS - 1 - k) & 1 == 1);
    }
    Ok(State::from_bits(&bits))
}

/// Map a 32-bit terminal state back to the centers of its buckets.
pub fn gray_dequantize(s: &State) -> (f64, f64) {
    assert_eq!(s.dim(), PLANE_DIM, "expected a {PLANE_DIM}-bit state");
    let bits = s.to_bits();
    let mut gx = 0u32;
    let mut gy = 0u32;
    for k in 0..PLANE_BITS {
        gx = gx << 1 | bits[k] as u32;
        gy = gy << 1 | bits[PLANE_BITS + k] as u32;
    }
    (bucket_center(gray_decode(gx)), bucket_center(gray_decode(gy)))
}

/// Sample and quantize a planar dataset.
pub fn plane_generate(dataset: PlaneDataset, count: usize, seed: u64) -> Vec<State> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| {
            let (x, y) = plane_sample(dataset, &mut rng);
            gray_quantize(x, y).expect("samples are clipped into the box")
        })
        .collect()
}

/// Dataset file header metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub d: usize,
    pub name: String,
    pub seed: u64,
}

/// Write `# ebgfn-dataset D=<D> name=<name> seed=<seed>` followed by one
/// comma-separated bit row per sample.
pub fn write_dataset(
    path: &Path,
    meta: &DatasetMeta,
    samples: &[State],
) -> Result<(), TaskError> {
    let mut buf = String::new();
    buf.push_str(&format!(
        "# ebgfn-dataset D={} name={} seed={}\n",
        meta.d, meta.name, meta.seed
    ));
    for s in samples {
        debug_assert_eq!(s.dim(), meta.d);
        let row: Vec<&str> = s.to_bits().iter().map(|&b| if b { "1" } else { "0" }).collect();
        buf.push_str(&row.join(","));
        buf.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetMeta, Vec<State>), TaskError> {
    let bad = |reason: String| TaskError::BadFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let rest = header
        .strip_prefix("# ebgfn-dataset ")
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut d = None;
    let mut name = None;
    let mut seed = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("D=") {
            d = v.parse::<usize>().ok();
        } else if let Some(v) = field.strip_prefix("name=") {
            name = Some(v.to_string());
        } else if let Some(v) = field.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        }
    }
    let meta = DatasetMeta {
        d: d.ok_or_else(|| bad("missing D=".into()))?,
        name: name.ok_or_else(|| bad("missing name=".into()))?,
        seed: seed.ok_or_else(|| bad("missing seed=".into()))?,
    };
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut bits = Vec::with_capacity(meta.d);
        for tok in line.split(',') {
            match tok.trim() {
                "0" => bits.push(false),
                "1" => bits.push(true),
                other => return Err(bad(format!("bad bit {other:?} on line {}", i + 2))),
            }
        }
        if bits.len() != meta.d {
            return Err(bad(format!(
                "line {} has {} bits, expected {}",
                i + 2,
                bits.len(),
                meta.d
            )));
        }
        samples.push(State::from_bits(&bits));
    }
    Ok((meta, samples))
}
