//! The growing multi-head classifier.
//!
//! Every head reads the same feature vector. In [`ArchMode::PerSequenceHead`]
//! each sequence appends a fresh head for its categories; in
//! [`ArchMode::ExpandLastLayer`] a single head is created once and only its
//! output layer gains rows. Logits are concatenated in head order, then in
//! the order categories were given to [`MultiHeadModel::expand`].
//!
//! Expansion never touches existing parameters, so logits of previously known
//! categories are bit-identical before and after it.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, PutLe};
use crate::error::{Error, Result};
use crate::math::{
    activation_backward, activation_forward, affine_forward, affine_input_grad, affine_param_grads, init_parameters,
    ActivationKind, ActivationSpec, DenseMatrix, InitScheme, InitSpec, LayerPosition,
};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchMode {
    PerSequenceHead,
    ExpandLastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_out × fan_in`
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// Hidden layers followed by the linear output layer.
    pub layers: Vec<Layer>,
    pub category_ids: Vec<u32>,
}

impl Head {
    fn output_layer(&self) -> &Layer {
        self.layers.last().expect("head without layers")
    }
}

/// Depth and width of each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub hidden_width: usize,
    /// Number of hidden layers before the output layer, 0..=3.
    pub hidden_layers: usize,
}

impl Default for HeadShape {
    fn default() -> Self {
        Self {
            hidden_width: 1024,
            hidden_layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadModel {
    feature_dim: usize,
    heads: Vec<Head>,
    activation: ActivationSpec,
    arch_mode: ArchMode,
    shape: HeadShape,
}

/// Logits together with the mode-specific derived outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitOutput {
    pub logits: Vec<f64>,
    /// Present only for regression losses.
    pub clamped: Option<Vec<f64>>,
    /// Present only for classification losses.
    pub probabilities: Option<Vec<f64>>,
}

impl LogitOutput {
    pub fn classification(logits: Vec<f64>) -> Result<Self> {
        let probabilities = Some(crate::math::softmax(&logits)?);
        Ok(Self {
            logits,
            clamped: None,
            probabilities,
        })
    }

    pub fn regression(logits: Vec<f64>) -> Self {
        Self {
            clamped: Some(clamp_output(&logits)),
            logits,
            probabilities: None,
        }
    }
}

/// `max(0, min(o, 1))` elementwise.
pub fn clamp_output(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&o| o.clamp(0.0, 1.0)).collect()
}

/// Backward pass of [`clamp_output`]: passes the gradient where `0 < o < 1`
/// and zeroes it elsewhere, including at the boundaries.
pub fn clamp_backward(logits: &[f64], upstream: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .zip(upstream)
        .map(|(&o, &g)| if o > 0.0 && o < 1.0 { g } else { 0.0 })
        .collect()
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: DenseMatrix,
    /// Per head: pre-activations of every hidden layer.
    pre_activations: Vec<Vec<DenseMatrix>>,
    /// Per head: outputs of every hidden layer.
    hidden_outputs: Vec<Vec<DenseMatrix>>,
    /// `batch × total categories`
    pub logits: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_weights: DenseMatrix,
    pub d_bias: Vec<f64>,
}

/// Parameter gradients laid out like the model: per head, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub heads: Vec<Vec<LayerGrads>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &MultiHeadModel) -> Self {
        Self {
            heads: model
                .heads
                .iter()
                .map(|h| {
                    h.layers
                        .iter()
                        .map(|l| LayerGrads {
                            d_weights: DenseMatrix::zeros(l.fan_out(), l.fan_in()),
                            d_bias: vec![0.0; l.fan_out()],
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    /// Flat views in the same order as [`MultiHeadModel::parameter_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for head in &self.heads {
            for l in head {
                out.push(l.d_weights.data());
                out.push(l.d_bias.as_slice());
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for head in &mut self.heads {
            for l in head {
                out.push(l.d_weights.data_mut());
                out.push(l.d_bias.as_mut_slice());
            }
        }
        out
    }
}

fn position(layer: usize) -> LayerPosition {
    if layer == 0 {
        LayerPosition::First
    } else {
        LayerPosition::Hidden
    }
}

impl MultiHeadModel {
    /// A model with no heads yet; the first [`expand`](Self::expand) creates one.
    pub fn new(feature_dim: usize, shape: HeadShape, activation: ActivationSpec, arch_mode: ArchMode) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::validation("feature_dim must be positive"));
        }
        if shape.hidden_layers > 3 {
            return Err(Error::validation("hidden layer count must be in 0..=3"));
        }
        if shape.hidden_layers > 0 && shape.hidden_width == 0 {
            return Err(Error::validation("hidden width must be positive"));
        }
        activation.validate()?;
        Ok(Self {
            feature_dim,
            heads: Vec::new(),
            activation,
            arch_mode,
            shape,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn activation(&self) -> &ActivationSpec {
        &self.activation
    }

    pub fn arch_mode(&self) -> ArchMode {
        self.arch_mode
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn num_categories(&self) -> usize {
        self.heads.iter().map(|h| h.category_ids.len()).sum()
    }

    /// Global logit order.
    pub fn category_order(&self) -> Vec<u32> {
        self.heads.iter().flat_map(|h| h.category_ids.iter().copied()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|h| &h.layers)
            .map(|l| l.fan_in() * l.fan_out() + l.fan_out())
            .sum()
    }

    fn init_scheme(&self, layer: usize, is_output: bool) -> InitScheme {
        let has_hidden = self.shape.hidden_layers > 0;
        match self.activation.kind {
            ActivationKind::Relu => InitScheme::GlorotUniform,
            ActivationKind::Siren if !has_hidden => InitScheme::GlorotUniform,
            ActivationKind::Siren if layer == 0 && !is_output => InitScheme::SirenFirst,
            ActivationKind::Siren => InitScheme::SirenHidden {
                omega: self.activation.omega_hidden,
            },
        }
    }

    fn fresh_head(&self, category_ids: Vec<u32>, init_seed: u64) -> Head {
        let depth = self.shape.hidden_layers + 1;
        let mut layers = Vec::with_capacity(depth);
        let mut fan_in = self.feature_dim;
        for l in 0..depth {
            let is_output = l + 1 == depth;
            let fan_out = if is_output {
                category_ids.len()
            } else {
                self.shape.hidden_width
            };
            let spec = InitSpec {
                scheme: self.init_scheme(l, is_output),
                rng_seed: derive_seed(init_seed, &[l as u64]),
            };
            let (weights, bias) = init_parameters(&spec, fan_in, fan_out);
            layers.push(Layer { weights, bias });
            fan_in = fan_out;
        }
        Head { layers, category_ids }
    }

    /// Adds outputs for `new_category_ids`.
    ///
    /// New parameters are drawn from streams keyed by `init_seed`; existing
    /// parameters are left untouched.
    pub fn expand(&mut self, new_category_ids: &[u32], init_seed: u64) -> Result<()> {
        if new_category_ids.is_empty() {
            return Err(Error::validation("expansion needs at least one category"));
        }
        let mut seen: HashSet<u32> = self.category_order().into_iter().collect();
        for &c in new_category_ids {
            if !seen.insert(c) {
                return Err(Error::validation(format!("category {c} is already known to the model")));
            }
        }
        if self.arch_mode == ArchMode::ExpandLastLayer && !self.heads.is_empty() {
            let depth = self.shape.hidden_layers + 1;
            let scheme = self.init_scheme(depth - 1, true);
            let head = self.heads.last_mut().unwrap();
            let out = head.layers.last_mut().unwrap();
            let fan_in = out.fan_in();
            let spec = InitSpec {
                scheme,
                rng_seed: derive_seed(init_seed, &[(depth - 1) as u64]),
            };
            // Bounds follow the widened layer; only the new rows are kept.
            let (fresh, _) = init_parameters(&spec, fan_in, out.fan_out() + new_category_ids.len());
            let new_rows = DenseMatrix::new(
                new_category_ids.len(),
                fan_in,
                fresh.data()[..new_category_ids.len() * fan_in].to_vec(),
            )?;
            out.weights.append_rows(&new_rows)?;
            out.bias.extend(std::iter::repeat_n(0.0, new_category_ids.len()));
            head.category_ids.extend_from_slice(new_category_ids);
        } else {
            let head = self.fresh_head(new_category_ids.to_vec(), init_seed);
            self.heads.push(head);
        }
        Ok(())
    }

    /// Raw logits for one feature vector, in global category order.
    pub fn predict_without_softmax(&self, features: &[f64]) -> Result<Vec<f64>> {
        let x = DenseMatrix::new(1, features.len(), features.to_vec())?;
        Ok(self.forward(&x)?.logits.into_data())
    }

    /// Batched forward pass keeping everything backpropagation needs.
    pub fn forward(&self, batch: &DenseMatrix) -> Result<ForwardPass> {
        if batch.cols() != self.feature_dim {
            return Err(Error::shape(format!(
                "features have {} columns, model expects {}",
                batch.cols(),
                self.feature_dim
            )));
        }
        let n = batch.rows();
        let mut logits = DenseMatrix::zeros(n, self.num_categories());
        let mut pre_activations = Vec::with_capacity(self.heads.len());
        let mut hidden_outputs = Vec::with_capacity(self.heads.len());
        let mut col = 0;
        for head in &self.heads {
            let mut pre = Vec::new();
            let mut outs: Vec<DenseMatrix> = Vec::new();
            let hidden = head.layers.len() - 1;
            for (l, layer) in head.layers[..hidden].iter().enumerate() {
                let input = if l == 0 { batch } else { &outs[l - 1] };
                let z = affine_forward(&layer.weights, &layer.bias, input)?;
                let a = activation_forward(&self.activation, position(l), &z);
                pre.push(z);
                outs.push(a);
            }
            let input = if hidden == 0 { batch } else { &outs[hidden - 1] };
            let out = head.output_layer();
            let o = affine_forward(&out.weights, &out.bias, input)?;
            let width = o.cols();
            for r in 0..n {
                logits.row_mut(r)[col..col + width].copy_from_slice(o.row(r));
            }
            col += width;
            pre_activations.push(pre);
            hidden_outputs.push(outs);
        }
        Ok(ForwardPass {
            input: batch.clone(),
            pre_activations,
            hidden_outputs,
            logits,
        })
    }

    /// Parameter gradients given `d_logits = dL/d(logits)` for the batch of `pass`.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &DenseMatrix) -> Result<ModelGrads> {
        if d_logits.rows() != pass.logits.rows() || d_logits.cols() != pass.logits.cols() {
            return Err(Error::shape("logit gradient does not match forward pass"));
        }
        if pass.pre_activations.len() != self.heads.len() {
            return Err(Error::contract("forward pass was computed on a different model"));
        }
        let mut grads = Vec::with_capacity(self.heads.len());
        let mut col = 0;
        for (h, head) in self.heads.iter().enumerate() {
            let depth = head.layers.len();
            let width = head.output_layer().fan_out();
            let mut upstream = d_logits.column_block(col, width);
            col += width;
            let mut head_grads = Vec::with_capacity(depth);
            for l in (0..depth).rev() {
                let layer = &head.layers[l];
                let input = if l == 0 {
                    &pass.input
                } else {
                    &pass.hidden_outputs[h][l - 1]
                };
                let (d_weights, d_bias) = affine_param_grads(layer.fan_out(), input, &upstream);
                head_grads.push(LayerGrads { d_weights, d_bias });
                if l > 0 {
                    let d_act = affine_input_grad(&layer.weights, &upstream);
                    upstream = activation_backward(
                        &self.activation,
                        position(l - 1),
                        &pass.pre_activations[h][l - 1],
                        &d_act,
                    )?;
                }
            }
            head_grads.reverse();
            grads.push(head_grads);
        }
        Ok(ModelGrads { heads: grads })
    }

    /// Flat mutable views of every parameter: per head, per layer, weights
    /// then bias.
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for head in &mut self.heads {
            for l in &mut head.layers {
                out.push(l.weights.data_mut());
                out.push(l.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for head in &self.heads {
            for l in &head.layers {
                out.push(l.weights.data());
                out.push(l.bias.as_slice());
            }
        }
        out
    }

    /// Bitwise parameter equality, treating `0.0` and `-0.0` as different.
    pub fn bitwise_eq(&self, other: &MultiHeadModel) -> bool {
        self.category_order() == other.category_order()
            && self.parameter_slices().len() == other.parameter_slices().len()
            && self
                .parameter_slices()
                .iter()
                .zip(other.parameter_slices())
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RCK1";
const CHECKPOINT_VERSION: u32 = 1;

impl MultiHeadModel {
    /// Encodes the model in the checkpoint layout (all little-endian):
    ///
    /// ```text
    /// magic "RCK1" | u32 version=1 | u32 feature_dim
    /// u8 arch (0 per-sequence-head, 1 expand-last) | u8 activation (0 relu, 1 siren)
    /// f64 omega_first | f64 omega_hidden | u32 hidden_width | u32 hidden_layers
    /// u32 n_heads, then per head:
    ///   u32 n_categories | n_categories × u32 category_id
    ///   u32 n_layers, then per layer:
    ///     u32 fan_out | u32 fan_in | fan_out·fan_in × f64 weights (row-major) | fan_out × f64 bias
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 8 * self.num_parameters());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.put_u32(CHECKPOINT_VERSION);
        buf.put_u32(self.feature_dim as u32);
        buf.put_u8(match self.arch_mode {
            ArchMode::PerSequenceHead => 0,
            ArchMode::ExpandLastLayer => 1,
        });
        buf.put_u8(match self.activation.kind {
            ActivationKind::Relu => 0,
            ActivationKind::Siren => 1,
        });
        buf.put_f64(self.activation.omega_first);
        buf.put_f64(self.activation.omega_hidden);
        buf.put_u32(self.shape.hidden_width as u32);
        buf.put_u32(self.shape.hidden_layers as u32);
        buf.put_u32(self.heads.len() as u32);
        for head in &self.heads {
            buf.put_u32(head.category_ids.len() as u32);
            for &c in &head.category_ids {
                buf.put_u32(c);
            }
            buf.put_u32(head.layers.len() as u32);
            for l in &head.layers {
                buf.put_u32(l.fan_out() as u32);
                buf.put_u32(l.fan_in() as u32);
                for &w in l.weights.data() {
                    buf.put_f64(w);
                }
                for &b in &l.bias {
                    buf.put_f64(b);
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a model checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let feature_dim = r.u32("feature_dim")? as usize;
        let arch_mode = match r.u8("arch mode")? {
            0 => ArchMode::PerSequenceHead,
            1 => ArchMode::ExpandLastLayer,
            v => return Err(Error::format(r.offset() - 1, format!("unknown arch mode {v}"))),
        };
        let kind = match r.u8("activation")? {
            0 => ActivationKind::Relu,
            1 => ActivationKind::Siren,
            v => return Err(Error::format(r.offset() - 1, format!("unknown activation {v}"))),
        };
        let activation = ActivationSpec {
            kind,
            omega_first: r.f64("omega_first")?,
            omega_hidden: r.f64("omega_hidden")?,
        };
        let shape = HeadShape {
            hidden_width: r.u32("hidden_width")? as usize,
            hidden_layers: r.u32("hidden_layers")? as usize,
        };
        let mut model = MultiHeadModel::new(feature_dim, shape, activation, arch_mode)?;
        let n_heads = r.u32("head count")?;
        for _ in 0..n_heads {
            let n_cat = r.u32("category count")? as usize;
            let mut category_ids = Vec::with_capacity(n_cat.min(r.remaining() / 4));
            for _ in 0..n_cat {
                category_ids.push(r.u32("category id")?);
            }
            let n_layers = r.u32("layer count")? as usize;
            if n_layers != shape.hidden_layers + 1 {
                return Err(Error::format(r.offset(), "layer count does not match head shape"));
            }
            let mut layers = Vec::with_capacity(n_layers);
            let mut expect_in = feature_dim;
            for l in 0..n_layers {
                let at = r.offset();
                let fan_out = r.u32("fan_out")? as usize;
                let fan_in = r.u32("fan_in")? as usize;
                let expect_out = if l + 1 == n_layers { n_cat } else { shape.hidden_width };
                if fan_in != expect_in || fan_out != expect_out {
                    return Err(Error::format(at, "layer dimensions do not chain"));
                }
                let count = fan_out * fan_in;
                if r.remaining() < 8 * (count + fan_out) {
                    return Err(Error::format(r.offset(), "truncated layer parameters"));
                }
                let w: Vec<f64> = (0..count).map(|_| r.f64("weight")).collect::<Result<_>>()?;
                let bias: Vec<f64> = (0..fan_out).map(|_| r.f64("bias")).collect::<Result<_>>()?;
                let weights = DenseMatrix::new(fan_out, fan_in, w).map_err(|e| Error::format(at, e.to_string()))?;
                if bias.iter().any(|b| !b.is_finite()) {
                    return Err(Error::format(at, "non-finite bias"));
                }
                layers.push(Layer { weights, bias });
                expect_in = fan_out;
            }
            model.heads.push(Head { layers, category_ids });
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        let order = model.category_order();
        let unique: HashSet<_> = order.iter().collect();
        if unique.len() != order.len() {
            return Err(Error::format(0, "checkpoint repeats a category id"));
        }
        if model.arch_mode == ArchMode::ExpandLastLayer && model.heads.len() > 1 {
            return Err(Error::format(0, "expand-last checkpoint with several heads"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
