//! The learned feature mapping from sparse categorical inputs to a small
//! dense hidden vector.
//!
//! An input is a set of fields, each holding the active indices of a
//! multi-hot categorical feature (user traits, ad id, context). The mapping
//! is:
//!
//! 1. per-field embedding lookup with **sum pooling** over active indices,
//! 2. concatenation of the pooled field vectors,
//! 3. a small fully-connected stack producing the hidden representation
//!    that the kernel and ranking strategies operate on.
//!
//! [`forward`] returns the hidden vector plus a [`Tape`] of intermediates;
//! [`backward`] replays the tape to produce exact reverse-mode gradients.
//! Gradients for embedding tables are sparse: only rows that were actually
//! active in the batch appear, everything else is implicitly zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Declaration of one categorical field: a stable id and its vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub id: u32,
    pub vocab: usize,
}

/// A sparse multi-hot feature vector: per field, the list of active indices.
///
/// Fields absent from `groups` pool to a zero vector. Duplicate indices are
/// legal and are summed twice — sum pooling is literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SparseFeature {
    pub groups: Vec<(u32, Vec<u32>)>,
}

impl SparseFeature {
    pub fn new(groups: Vec<(u32, Vec<u32>)>) -> Self {
        assert!(!groups.is_empty(), "a sparse feature needs at least one field");
        SparseFeature { groups }
    }

    /// Single field with a single active index (one-hot).
    pub fn one_hot(field: u32, index: u32) -> Self {
        SparseFeature {
            groups: vec![(field, vec![index])],
        }
    }

    /// Concatenation of two fragments (e.g. user context + ad features).
    /// Group order is preserved, so pooling stays deterministic.
    pub fn merged(&self, other: &SparseFeature) -> SparseFeature {
        let mut groups = self.groups.clone();
        groups.extend(other.groups.iter().cloned());
        SparseFeature { groups }
    }
}

/// Activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the *output* value.
    #[inline]
    fn derivative_from_output(&self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer `act(W x + b)` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// All parameters of the feature mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub fields: Vec<FieldDef>,
    pub embed_dim: usize,
    /// One `vocab x embed_dim` table per field, in `fields` order.
    pub embeddings: Vec<Matrix>,
    /// Dense stack applied to the concatenated pooled embeddings. May be
    /// empty, in which case the pooled vector itself is the output.
    pub layers: Vec<DenseLayer>,
}

impl MappingParams {
    /// Random initialization: embeddings uniform in [-0.05, 0.05], dense
    /// weights Gaussian with standard deviation `1/sqrt(fan_in)`, zero
    /// biases. Hidden layers use tanh; the output layer is linear so the
    /// hidden space is not artificially bounded.
    pub fn init<R: Rng>(
        fields: &[FieldDef],
        embed_dim: usize,
        hidden_widths: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(!fields.is_empty() && embed_dim > 0 && output_dim > 0);
        let embed_range = Uniform::new_inclusive(-0.05, 0.05).expect("static bounds");
        let embeddings = fields
            .iter()
            .map(|f| {
                assert!(f.vocab > 0, "field {} has empty vocabulary", f.id);
                Matrix::new(
                    f.vocab,
                    embed_dim,
                    (0..f.vocab * embed_dim)
                        .map(|_| embed_range.sample(rng))
                        .collect(),
                )
            })
            .collect();
        let mut layers = Vec::new();
        let mut fan_in = fields.len() * embed_dim;
        for (pos, &width) in hidden_widths
            .iter()
            .chain(std::iter::once(&output_dim))
            .enumerate()
        {
            let activation = if pos < hidden_widths.len() {
                Activation::Tanh
            } else {
                Activation::Identity
            };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite sd");
            layers.push(DenseLayer {
                weights: Matrix::new(
                    width,
                    fan_in,
                    (0..width * fan_in).map(|_| normal.sample(rng)).collect(),
                ),
                bias: vec![0.0; width],
                activation,
            });
            fan_in = width;
        }
        MappingParams {
            fields: fields.to_vec(),
            embed_dim,
            embeddings,
            layers,
        }
    }

    /// Dimension of the hidden representation this mapping produces.
    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.weights.rows())
            .unwrap_or(self.fields.len() * self.embed_dim)
    }

    /// Position of a field id within `fields`.
    fn field_slot(&self, id: u32) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f.id == id)
            .ok_or(Error::IndexOutOfVocabulary {
                field: id,
                index: 0,
                vocab: 0,
            })
    }

    /// Structural validation (used after deserializing checkpoints).
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() || self.embeddings.len() != self.fields.len() {
            return Err(Error::InvalidConfig(
                "mapping fields and embedding tables must align".into(),
            ));
        }
        for (f, table) in self.fields.iter().zip(&self.embeddings) {
            table.validate()?;
            if table.rows() != f.vocab || table.cols() != self.embed_dim {
                return Err(Error::ShapeMismatch {
                    context: "embedding table",
                    expected: format!("{}x{}", f.vocab, self.embed_dim),
                    got: format!("{}x{}", table.rows(), table.cols()),
                });
            }
        }
        let mut fan_in = self.fields.len() * self.embed_dim;
        for layer in &self.layers {
            layer.weights.validate()?;
            if layer.weights.cols() != fan_in || layer.bias.len() != layer.weights.rows() {
                return Err(Error::ShapeMismatch {
                    context: "dense layer",
                    expected: format!("in {fan_in}"),
                    got: format!("in {}", layer.weights.cols()),
                });
            }
            fan_in = layer.weights.rows();
        }
        Ok(())
    }
}

/// Intermediates recorded by [`forward`], replayed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Active indices per field slot (in `MappingParams::fields` order).
    active: Vec<Vec<u32>>,
    /// `values[0]` is the pooled input; `values[i + 1]` is layer `i` output.
    values: Vec<Vec<f64>>,
}

impl Tape {
    /// The hidden vector this tape's forward pass produced.
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape always has the pooled layer")
    }
}

/// Sparse gradients for a [`MappingParams`]: only embedding rows touched by
/// the batch are present; dense layers carry full gradient buffers.
#[derive(Debug, Clone)]
pub struct MappingGrads {
    /// Per field slot: active row index -> gradient row.
    pub embeddings: Vec<BTreeMap<u32, Vec<f64>>>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MappingGrads {
    pub fn zeros_like(params: &MappingParams) -> Self {
        MappingGrads {
            embeddings: vec![BTreeMap::new(); params.fields.len()],
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Densify one field's embedding gradient into a flat `vocab x dim`
    /// buffer (rows never touched stay exactly zero).
    pub fn embedding_dense(&self, slot: usize, vocab: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab * dim];
        for (&row, grad) in &self.embeddings[slot] {
            let base = row as usize * dim;
            out[base..base + dim].copy_from_slice(grad);
        }
        out
    }

    /// Scale every stored gradient in place.
    pub fn scale(&mut self, s: f64) {
        for field in &mut self.embeddings {
            for grad in field.values_mut() {
                for v in grad {
                    *v *= s;
                }
            }
        }
        for w in &mut self.weights {
            for v in w.as_mut_slice() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }
}

/// Sum-pool the embeddings of every declared field into one concatenated
/// vector (the dense stack's input). Absent fields contribute zeros.
pub fn embed_pool(x: &SparseFeature, params: &MappingParams) -> Result<Vec<f64>> {
    let dim = params.embed_dim;
    let mut pooled = vec![0.0; params.fields.len() * dim];
    for (fid, indices) in &x.groups {
        let slot = params.field_slot(*fid)?;
        let table = &params.embeddings[slot];
        let base = slot * dim;
        for &ix in indices {
            if ix as usize >= table.rows() {
                return Err(Error::IndexOutOfVocabulary {
                    field: *fid,
                    index: ix,
                    vocab: table.rows(),
                });
            }
            let row = table.row(ix as usize);
            for d in 0..dim {
                pooled[base + d] += row[d];
            }
        }
    }
    Ok(pooled)
}

/// Run the mapping on one input, returning the hidden vector and the tape
/// needed for the backward pass.
pub fn forward(x: &SparseFeature, params: &MappingParams) -> Result<(Vec<f64>, Tape)> {
    let pooled = embed_pool(x, params)?;
    let mut active = vec![Vec::new(); params.fields.len()];
    for (fid, indices) in &x.groups {
        let slot = params.field_slot(*fid)?;
        active[slot].extend_from_slice(indices);
    }
    let mut values = Vec::with_capacity(params.layers.len() + 1);
    values.push(pooled);
    for layer in &params.layers {
        let input = values.last().expect("at least the pooled layer");
        let mut out = Vec::with_capacity(layer.weights.rows());
        for o in 0..layer.weights.rows() {
            let z = crate::numkit::dot(layer.weights.row(o), input) + layer.bias[o];
            out.push(layer.activation.apply(z));
        }
        values.push(out);
    }
    let hidden = values.last().expect("non-empty").clone();
    Ok((hidden, Tape { active, values }))
}

/// Exact reverse-mode gradients of `upstream . hidden` with respect to every
/// mapping parameter, accumulated into `grads`.
///
/// `upstream` is the gradient of the loss with respect to the hidden vector
/// this tape produced. Returns [`Error::TapeMismatch`] when the tape does not
/// belong to `params` or the upstream dimension is wrong.
pub fn backward(
    params: &MappingParams,
    tape: &Tape,
    upstream: &[f64],
    grads: &mut MappingGrads,
) -> Result<()> {
    if tape.values.len() != params.layers.len() + 1 {
        return Err(Error::TapeMismatch(format!(
            "tape has {} recorded layers, mapping has {}",
            tape.values.len() - 1,
            params.layers.len()
        )));
    }
    if tape.active.len() != params.fields.len() {
        return Err(Error::TapeMismatch(format!(
            "tape has {} fields, mapping has {}",
            tape.active.len(),
            params.fields.len()
        )));
    }
    if upstream.len() != params.output_dim() {
        return Err(Error::TapeMismatch(format!(
            "upstream gradient has dim {}, mapping output has dim {}",
            upstream.len(),
            params.output_dim()
        )));
    }
    if grads.weights.len() != params.layers.len() || grads.embeddings.len() != params.fields.len()
    {
        return Err(Error::TapeMismatch(
            "gradient accumulator does not match mapping".into(),
        ));
    }

    let mut g = upstream.to_vec();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let output = &tape.values[li + 1];
        let input = &tape.values[li];
        if output.len() != layer.weights.rows() || input.len() != layer.weights.cols() {
            return Err(Error::TapeMismatch(format!(
                "layer {li} tape dims do not match parameters"
            )));
        }
        // Through the activation.
        let gz: Vec<f64> = g
            .iter()
            .zip(output)
            .map(|(gi, &out)| gi * layer.activation.derivative_from_output(out))
            .collect();
        // Parameter gradients.
        let wg = &mut grads.weights[li];
        for o in 0..layer.weights.rows() {
            let go = gz[o];
            grads.biases[li][o] += go;
            if go != 0.0 {
                let row = wg.row_mut(o);
                for (wv, inp) in row.iter_mut().zip(input) {
                    *wv += go * inp;
                }
            }
        }
        // Propagate to the layer input.
        let mut g_prev = vec![0.0; input.len()];
        for o in 0..layer.weights.rows() {
            let go = gz[o];
            if go != 0.0 {
                for (gp, wv) in g_prev.iter_mut().zip(layer.weights.row(o)) {
                    *gp += go * wv;
                }
            }
        }
        g = g_prev;
    }

    // g is now the gradient with respect to the pooled concatenation; route
    // each field's slice to its active embedding rows (sum pooling means the
    // same slice lands on every active row, duplicates twice).
    let dim = params.embed_dim;
    for (slot, indices) in tape.active.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        let slice = &g[slot * dim..(slot + 1) * dim];
        let field_grads = &mut grads.embeddings[slot];
        for &ix in indices {
            let row = field_grads.entry(ix).or_insert_with(|| vec![0.0; dim]);
            for d in 0..dim {
                row[d] += slice[d];
            }
        }
    }
    Ok(())
}
