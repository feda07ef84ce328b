//! Dense numeric kernel: row-major matrices, affine layers with exact
//! gradients, activations, softmax and parameter initialization.
//!
//! All arithmetic is `f64`. Reductions always run in ascending index order,
//! so results are reproducible bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so an empty-column matrix yields empty rows
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Appends rows below the existing ones.
    pub fn append_rows(&mut self, other: &DenseMatrix) -> Result<()> {
        if other.cols != self.cols {
            return Err(Error::shape(format!(
                "cannot append {}-column rows to a {}-column matrix",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copies a contiguous range of columns into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[i] = W·x[i] + b` for every row `x[i]` of `x`.
///
/// `w` is `fan_out × fan_in`. Each output entry is the dot product summed in
/// ascending input index, then the bias is added.
pub fn affine_forward(w: &DenseMatrix, b: &[f64], x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols != w.cols {
        return Err(Error::shape(format!(
            "input has {} columns but layer fan-in is {}",
            x.cols, w.cols
        )));
    }
    if b.len() != w.rows {
        return Err(Error::shape(format!(
            "bias length {} does not match fan-out {}",
            b.len(),
            w.rows
        )));
    }
    let mut out = DenseMatrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (j, o) in oi.iter_mut().enumerate() {
            *o = dot(w.row(j), xi) + b[j];
        }
    }
    Ok(out)
}

/// Gradients of an affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub d_weights: DenseMatrix,
    pub d_bias: Vec<f64>,
    pub d_input: DenseMatrix,
}

/// Backpropagates `upstream = dL/d(out)` through `out = W·x + b`.
pub fn affine_backward(w: &DenseMatrix, b: &[f64], x: &DenseMatrix, upstream: &DenseMatrix) -> Result<AffineGrads> {
    if x.cols != w.cols || b.len() != w.rows {
        return Err(Error::shape("layer parameters do not match input"));
    }
    if upstream.rows != x.rows || upstream.cols != w.rows {
        return Err(Error::shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows, upstream.cols, x.rows, w.rows
        )));
    }
    let (d_weights, d_bias) = affine_param_grads(w.rows, x, upstream);
    let d_input = affine_input_grad(w, upstream);
    Ok(AffineGrads {
        d_weights,
        d_bias,
        d_input,
    })
}

/// Weight and bias gradients only; shapes are assumed checked.
pub(crate) fn affine_param_grads(fan_out: usize, x: &DenseMatrix, upstream: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut d_weights = DenseMatrix::zeros(fan_out, x.cols);
    let mut d_bias = vec![0.0; fan_out];
    for i in 0..x.rows {
        let xi = x.row(i);
        for (j, &g) in upstream.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            d_bias[j] += g;
            axpy(g, xi, d_weights.row_mut(j));
        }
    }
    (d_weights, d_bias)
}

pub(crate) fn affine_input_grad(w: &DenseMatrix, upstream: &DenseMatrix) -> DenseMatrix {
    let mut d_input = DenseMatrix::zeros(upstream.rows, w.cols);
    for i in 0..upstream.rows {
        let di = d_input.row_mut(i);
        for (j, &g) in upstream.row(i).iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(j), di);
            }
        }
    }
    d_input
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Siren,
}

/// Hidden-layer nonlinearity. SIREN uses `sin(ω·z)` with a separate `ω` for
/// the first layer of a head and for deeper layers; ReLU ignores both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub omega_first: f64,
    pub omega_hidden: f64,
}

impl ActivationSpec {
    pub const DEFAULT_OMEGA: f64 = 30.0;

    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            omega_first: Self::DEFAULT_OMEGA,
            omega_hidden: Self::DEFAULT_OMEGA,
        }
    }

    pub fn siren(omega_first: f64, omega_hidden: f64) -> Self {
        Self {
            kind: ActivationKind::Siren,
            omega_first,
            omega_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_first > 0.0 && self.omega_hidden > 0.0)
            || !self.omega_first.is_finite()
            || !self.omega_hidden.is_finite()
        {
            return Err(Error::validation("SIREN omega values must be positive"));
        }
        Ok(())
    }

    pub fn omega(&self, position: LayerPosition) -> f64 {
        match position {
            LayerPosition::First => self.omega_first,
            LayerPosition::Hidden => self.omega_hidden,
        }
    }
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::relu()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPosition {
    First,
    Hidden,
}

pub fn activation_forward(spec: &ActivationSpec, position: LayerPosition, z: &DenseMatrix) -> DenseMatrix {
    match spec.kind {
        ActivationKind::Relu => z.map(|v| v.max(0.0)),
        ActivationKind::Siren => {
            let omega = spec.omega(position);
            z.map(|v| (omega * v).sin())
        }
    }
}

/// Multiplies `upstream` by the activation derivative at `z`.
///
/// The ReLU derivative at exactly zero is taken as 0.
pub fn activation_backward(
    spec: &ActivationSpec,
    position: LayerPosition,
    z: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<DenseMatrix> {
    if z.rows != upstream.rows || z.cols != upstream.cols {
        return Err(Error::shape("activation gradient shape mismatch"));
    }
    let mut out = upstream.clone();
    match spec.kind {
        ActivationKind::Relu => {
            for (g, &v) in out.data.iter_mut().zip(&z.data) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        ActivationKind::Siren => {
            let omega = spec.omega(position);
            for (g, &v) in out.data.iter_mut().zip(&z.data) {
                *g *= omega * (omega * v).cos();
            }
        }
    }
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&o| (o - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Log of the softmax, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&o| (o - max).exp()).sum();
    let log_z = max + sum.ln();
    Ok(logits.iter().map(|&o| o - log_z).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    /// `U[-√(6/(n_in+n_out)), √(6/(n_in+n_out))]`
    GlorotUniform,
    /// `U[-1/n_in, 1/n_in]`
    SirenFirst,
    /// `U[-√(6/n_in)/ω, √(6/n_in)/ω]`
    SirenHidden { omega: f64 },
}

impl InitScheme {
    pub fn bound(&self, fan_in: usize, fan_out: usize) -> f64 {
        let n = fan_in as f64;
        match *self {
            InitScheme::GlorotUniform => (6.0 / (n + fan_out as f64)).sqrt(),
            InitScheme::SirenFirst => 1.0 / n,
            InitScheme::SirenHidden { omega } => (6.0 / n).sqrt() / omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub rng_seed: u64,
}

/// Draws a `fan_out × fan_in` weight matrix uniformly within the scheme's
/// bound and a zero bias.
pub fn init_parameters(spec: &InitSpec, fan_in: usize, fan_out: usize) -> (DenseMatrix, Vec<f64>) {
    assert!(fan_in >= 1 && fan_out >= 1, "layer dimensions must be positive");
    let bound = spec.scheme.bound(fan_in, fan_out);
    let mut rng = rng::stream(spec.rng_seed);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    let w = DenseMatrix {
        rows: fan_out,
        cols: fan_in,
        data,
    };
    (w, vec![0.0; fan_out])
}
