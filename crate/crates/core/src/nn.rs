//! Minimal differentiable feed-forward machinery: named parameter store,
//! batched MLP forward pass with a reverse-mode tape, optional per-layer
//! feature normalization, and Adam.
//!
//! Everything is 64-bit and deterministic: identical parameters and inputs
//! produce bit-identical outputs.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;

const LN_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum NnError {
    ShapeMismatch { what: String, expected: Vec<usize>, got: Vec<usize> },
    MissingParam(String),
    BadSpec(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch { what, expected, got } => {
                write!(f, "shape mismatch in {what}: expected {expected:?}, got {got:?}")
            }
            NnError::MissingParam(name) => write!(f, "missing parameter {name}"),
            NnError::BadSpec(msg) => write!(f, "bad network spec: {msg}"),
        }
    }
}

impl std::error::Error for NnError {}

/// Activation applied to hidden layers. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Elu,
    Swish,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Swish => x * crate::util::sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Swish => {
                let s = crate::util::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self, NnError> {
        match s {
            "identity" => Ok(Activation::Identity),
            "elu" => Ok(Activation::Elu),
            "swish" => Ok(Activation::Swish),
            other => Err(NnError::BadSpec(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Identity => "identity",
            Activation::Elu => "elu",
            Activation::Swish => "swish",
        };
        write!(f, "{s}")
    }
}

/// Feed-forward architecture: `input -> hidden[0] -> ... -> output`.
///
/// Hidden layers get an activation and, when `layer_norm` is set, a feature
/// normalization with learned gain/offset between the affine map and the
/// activation. The last layer has neither.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activations: Vec<Activation>,
    pub layer_norm: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, act: Activation) -> Self {
        MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output,
            activations: vec![act; hidden.len()],
            layer_norm: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(NnError::BadSpec("zero layer width".into()));
        }
        if self.activations.len() != self.hidden.len() {
            return Err(NnError::BadSpec(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.hidden.len()
            )));
        }
        Ok(())
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// (fan_in, fan_out) of affine layer `i`.
    pub fn layer_dims(&self, i: usize) -> (usize, usize) {
        let widths: Vec<usize> = std::iter::once(self.input)
            .chain(self.hidden.iter().cloned())
            .chain(std::iter::once(self.output))
            .collect();
        (widths[i], widths[i + 1])
    }

    fn is_hidden(&self, i: usize) -> bool {
        i + 1 < self.num_layers()
    }

    /// Initialize parameters: Glorot-uniform weights, zero biases, and when
    /// normalization is on, unit gains and zero offsets.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for i in 0..self.num_layers() {
            let (fan_in, fan_out) = self.layer_dims(i);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
            store.insert(&format!("w{i}"), w.into_dyn());
            store.insert(&format!("b{i}"), Array1::<f64>::zeros(fan_out).into_dyn());
            if self.layer_norm && self.is_hidden(i) {
                store.insert(&format!("g{i}"), Array1::<f64>::ones(fan_out).into_dyn());
                store.insert(&format!("o{i}"), Array1::<f64>::zeros(fan_out).into_dyn());
            }
        }
        store
    }
}

/// Named dense tensors, all `f64`. Iteration order is the sorted name order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, NnError> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>, NnError> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>, NnError> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix2>().map_err(|_| NnError::ShapeMismatch {
            what: name.to_string(),
            expected: vec![2],
            got: t.shape().to_vec(),
        })
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, f64>, NnError> {
        let t = self.get(name)?;
        t.view().into_dimensionality::<Ix1>().map_err(|_| NnError::ShapeMismatch {
            what: name.to_string(),
            expected: vec![1],
            got: t.shape().to_vec(),
        })
    }

    pub fn scalar(&self, name: &str) -> Result<f64, NnError> {
        let t = self.get(name)?;
        t.iter().next().copied().ok_or_else(|| NnError::ShapeMismatch {
            what: name.to_string(),
            expected: vec![],
            got: t.shape().to_vec(),
        })
    }

    pub fn set_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, ndarray::arr0(value).into_dyn());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// A store of zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        ParamStore { tensors }
    }

    /// `self += coeff * other`, matched by name.
    pub fn add_scaled(&mut self, other: &ParamStore, coeff: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                t.zip_mut_with(o, |a, &b| *a += coeff * b);
            }
        }
    }

    /// Elementwise difference `self - other`, matched by name.
    pub fn sub(&self, other: &ParamStore) -> ParamStore {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn scale(&mut self, coeff: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|x| x * coeff);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flatten all values in sorted-name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors.values() {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Overwrite values from a flat vector in sorted-name order.
    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut k = 0;
        for t in self.tensors.values_mut() {
            for v in t.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len(), "flat vector length mismatch");
    }
}

/// Per-layer records from a batched forward pass, enough for an exact
/// reverse-mode sweep.
struct LayerTape {
    /// Input to the affine map, `n x fan_in`.
    input: Array2<f64>,
    /// Per-row 1/sqrt(var + eps) (normalization only).
    inv_std: Option<Array1<f64>>,
    /// Normalized values before gain/offset (normalization only).
    normalized: Option<Array2<f64>>,
    /// Input to the activation.
    pre_act: Array2<f64>,
}

/// Reverse-mode tape for one batched MLP application.
pub struct Tape {
    layers: Vec<LayerTape>,
}

/// Batched forward pass: `x` is `n x input`, the result is `n x output`.
pub fn mlp_apply_batch(
    spec: &MlpSpec,
    params: &ParamStore,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Tape), NnError> {
    if x.ncols() != spec.input {
        return Err(NnError::ShapeMismatch {
            what: "mlp input".into(),
            expected: vec![spec.input],
            got: vec![x.ncols()],
        });
    }
    let mut cur = x.clone();
    let mut layers = Vec::with_capacity(spec.num_layers());
    for i in 0..spec.num_layers() {
        let w = params.matrix(&format!("w{i}"))?;
        let b = params.vector(&format!("b{i}"))?;
        let z = cur.dot(&w) + &b;
        let hidden = spec.is_hidden(i);
        let (inv_std, normalized, pre_act) = if hidden && spec.layer_norm {
            let g = params.vector(&format!("g{i}"))?;
            let o = params.vector(&format!("o{i}"))?;
            let (norm, inv_std) = layer_norm_forward(&z);
            let y = &norm * &g + &o;
            (Some(inv_std), Some(norm), y)
        } else {
            (None, None, z)
        };
        let out = if hidden {
            pre_act.mapv(|v| spec.activations[i].apply(v))
        } else {
            pre_act.clone()
        };
        layers.push(LayerTape {
            input: cur,
            inv_std,
            normalized,
            pre_act,
        });
        cur = out;
    }
    Ok((cur, Tape { layers }))
}

/// Forward pass without a tape, for sampling-only paths.
pub fn mlp_forward_batch(
    spec: &MlpSpec,
    params: &ParamStore,
    x: &Array2<f64>,
) -> Result<Array2<f64>, NnError> {
    if x.ncols() != spec.input {
        return Err(NnError::ShapeMismatch {
            what: "mlp input".into(),
            expected: vec![spec.input],
            got: vec![x.ncols()],
        });
    }
    let mut cur = x.dot(&params.matrix("w0")?) + &params.vector("b0")?;
    for i in 0..spec.num_layers() {
        if i > 0 {
            cur = cur.dot(&params.matrix(&format!("w{i}"))?) + &params.vector(&format!("b{i}"))?;
        }
        if spec.is_hidden(i) {
            if spec.layer_norm {
                let (mut norm, _) = layer_norm_forward(&cur);
                norm *= &params.vector(&format!("g{i}"))?;
                norm += &params.vector(&format!("o{i}"))?;
                cur = norm;
            }
            cur.mapv_inplace(|v| spec.activations[i].apply(v));
        }
    }
    Ok(cur)
}

fn layer_norm_forward(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n_features = z.ncols() as f64;
    let mean = z.mean_axis(Axis(1)).expect("nonempty rows");
    let mut centered = z.clone();
    for (mut row, &mu) in centered.rows_mut().into_iter().zip(mean.iter()) {
        row.mapv_inplace(|v| v - mu);
    }
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n_features;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, &is) in centered.rows_mut().into_iter().zip(inv_std.iter()) {
        row.mapv_inplace(|v| v * is);
    }
    (centered, inv_std)
}

/// Reverse-mode sweep. `cotangent` is `dL/d output`; parameter gradients are
/// accumulated into `grads` (same names as `params`) and the input gradient is
/// returned.
pub fn mlp_grad_batch(
    spec: &MlpSpec,
    params: &ParamStore,
    tape: &Tape,
    cotangent: &Array2<f64>,
    grads: &mut ParamStore,
) -> Result<Array2<f64>, NnError> {
    let mut d_out = cotangent.clone();
    for i in (0..spec.num_layers()).rev() {
        let lt = &tape.layers[i];
        let hidden = spec.is_hidden(i);
        // Through the activation.
        let mut d_y = if hidden {
            let act = spec.activations[i];
            let mut d = d_out;
            d.zip_mut_with(&lt.pre_act, |g, &x| *g *= act.derivative(x));
            d
        } else {
            d_out
        };
        // Through the normalization.
        let d_z = if hidden && spec.layer_norm {
            let norm = lt.normalized.as_ref().unwrap();
            let inv_std = lt.inv_std.as_ref().unwrap();
            let g = params.vector(&format!("g{i}"))?;
            {
                let gg = grads.get_mut(&format!("g{i}"))?;
                let mut gg = gg.view_mut().into_dimensionality::<Ix1>().unwrap();
                gg += &(&d_y * norm).sum_axis(Axis(0));
                let go = grads.get_mut(&format!("o{i}"))?;
                let mut go = go.view_mut().into_dimensionality::<Ix1>().unwrap();
                go += &d_y.sum_axis(Axis(0));
            }
            d_y *= &g; // now d xhat
            let mean_d = d_y.mean_axis(Axis(1)).expect("nonempty rows");
            let mean_d_norm = (&d_y * norm).mean_axis(Axis(1)).expect("nonempty rows");
            let mut d_z = d_y;
            for (((mut row, norm_row), (&md, &mdn)), &is) in d_z
                .rows_mut()
                .into_iter()
                .zip(norm.rows())
                .zip(mean_d.iter().zip(mean_d_norm.iter()))
                .zip(inv_std.iter())
            {
                for (v, &nv) in row.iter_mut().zip(norm_row.iter()) {
                    *v = is * (*v - md - nv * mdn);
                }
            }
            d_z
        } else {
            d_y
        };
        // Through the affine map.
        {
            let gw = grads.get_mut(&format!("w{i}"))?;
            let mut gw = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw += &lt.input.t().dot(&d_z);
            let gb = grads.get_mut(&format!("b{i}"))?;
            let mut gb = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &d_z.sum_axis(Axis(0));
        }
        let w = params.matrix(&format!("w{i}"))?;
        d_out = d_z.dot(&w.t());
    }
    Ok(d_out)
}

/// Single-vector convenience wrappers around the batched pass.
pub fn mlp_apply(
    spec: &MlpSpec,
    params: &ParamStore,
    input: &[f64],
) -> Result<(Vec<f64>, Tape), NnError> {
    let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
    let (out, tape) = mlp_apply_batch(spec, params, &x)?;
    Ok((out.row(0).to_vec(), tape))
}

pub fn mlp_grad(
    spec: &MlpSpec,
    params: &ParamStore,
    tape: &Tape,
    output_cotangent: &[f64],
) -> Result<(ParamStore, Vec<f64>), NnError> {
    let cot = Array2::from_shape_vec((1, output_cotangent.len()), output_cotangent.to_vec())
        .expect("row vector");
    let mut grads = params.zeros_like();
    let d_in = mlp_grad_batch(spec, params, tape, &cot, &mut grads)?;
    Ok((grads, d_in.row(0).to_vec()))
}

/// Adam with bias correction. Per-name learning-rate overrides support the
/// separately tuned `log_z` step size.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
    lr_overrides: BTreeMap<String, f64>,
}

impl AdamState {
    pub fn new(template: &ParamStore, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: template.zeros_like(),
            v: template.zeros_like(),
            lr_overrides: BTreeMap::new(),
        }
    }

    pub fn with_lr_override(mut self, name: &str, lr: f64) -> Self {
        self.lr_overrides.insert(name.to_string(), lr);
        self
    }

    /// One bias-corrected update; increments the step counter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = match grads.get(name) {
                Ok(g) => g,
                Err(_) => continue,
            };
            let lr = self.lr_overrides.get(name).copied().unwrap_or(self.lr);
            let m = self.m.get_mut(name).expect("moment tensor");
            let v = self.v.get_mut(name).expect("moment tensor");
            for (((pv, gv), mv), vv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
