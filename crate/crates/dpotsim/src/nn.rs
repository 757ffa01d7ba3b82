//! Minimal dense network engine with exact backpropagation to both
//! parameters and inputs.
//!
//! Input gradients are first-class citizens here: the trigger optimizer
//! differentiates the loss with respect to image pixels, not just weights.
//! All arithmetic is `f64`; forward/backward are pure functions of their
//! arguments.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul_transpose_bias, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

/// One dense layer: `out×in` weight, `out` bias, activation tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }
    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Ordered dense layers plus the architecture tag they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    arch_id: String,
}

/// Loss selector for [`backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over the batch of the squared Euclidean distance between the
    /// output row and the one-hot target row.
    MseOnOutput,
    /// Mean negative log-likelihood of the target class; requires a softmax
    /// output layer.
    CrossEntropy,
}

/// Per-layer weight/bias gradients.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of a loss with respect to every parameter and every input
/// element of the batch.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub param_grads: Vec<LayerGrad>,
    pub input_grads: Tensor,
}

/// Layer shapes and activations for a registered architecture id.
///
/// Registered families:
/// - `mlp-<in>-<h1>-...-<out>`: dense layers, relu on hidden, softmax output;
/// - `linreg-<n>-<m>`: a single identity-activation layer.
fn arch_layout(arch_id: &str) -> Result<Vec<(usize, usize, Activation)>> {
    let parse_dims = |parts: &[&str]| -> Result<Vec<usize>> {
        parts
            .iter()
            .map(|p| {
                p.parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::config(format!("bad dimension '{p}' in arch '{arch_id}'")))
            })
            .collect()
    };
    let parts: Vec<&str> = arch_id.split('-').collect();
    match parts.as_slice() {
        ["mlp", rest @ ..] if rest.len() >= 2 => {
            let dims = parse_dims(rest)?;
            let n_layers = dims.len() - 1;
            Ok((0..n_layers)
                .map(|l| {
                    let act = if l + 1 == n_layers {
                        Activation::Softmax
                    } else {
                        Activation::Relu
                    };
                    (dims[l + 1], dims[l], act)
                })
                .collect())
        }
        ["linreg", n, m] => {
            let dims = parse_dims(&[n, m])?;
            Ok(vec![(dims[1], dims[0], Activation::Identity)])
        }
        _ => Err(Error::config(format!("unknown arch_id '{arch_id}'"))),
    }
}

/// Deterministic model construction: weights uniform in
/// `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`, biases zero.
pub fn init_model(arch_id: &str, seed: u64) -> Result<Model> {
    let layout = arch_layout(arch_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layout
        .into_iter()
        .map(|(n_out, n_in, activation)| {
            let bound = (1.0 / n_in as f64).sqrt();
            let data: Vec<f64> = (0..n_out * n_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                weight: Tensor::new(vec![n_out, n_in], data).expect("init shape"),
                bias: Tensor::zeros(vec![n_out]),
                activation,
            }
        })
        .collect();
    Ok(Model {
        layers,
        arch_id: arch_id.to_string(),
    })
}

impl Model {
    /// Builds a model from explicit layers; adjacent dimensions must chain.
    pub fn from_layers(layers: Vec<Layer>, arch_id: impl Into<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].n_out() != w[1].n_in() {
                return Err(Error::shape(format!(
                    "layer out {} != next layer in {}",
                    w[0].n_out(),
                    w[1].n_in()
                )));
            }
        }
        Ok(Model {
            layers,
            arch_id: arch_id.into(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    /// Total parameter count (the `d` of the flattened layout).
    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

fn apply_activation(z: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => {
            let data = z.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::new(z.shape().to_vec(), data).expect("relu shape")
        }
        Activation::Softmax => {
            let mut out = z.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
    }
}

struct Trace {
    /// Post-activation outputs per layer; `acts[0]` is the input batch.
    acts: Vec<Tensor>,
    /// Pre-activation values per layer.
    zs: Vec<Tensor>,
}

fn forward_trace(model: &Model, batch: &Tensor) -> Result<Trace> {
    if batch.shape().len() != 2 || batch.cols() != model.n_in() {
        return Err(Error::shape(format!(
            "batch shape {:?} incompatible with input width {}",
            batch.shape(),
            model.n_in()
        )));
    }
    let mut acts = vec![batch.clone()];
    let mut zs = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let z = matmul_transpose_bias(acts.last().unwrap(), &layer.weight, &layer.bias);
        acts.push(apply_activation(&z, layer.activation));
        zs.push(z);
    }
    Ok(Trace { acts, zs })
}

/// Runs the batch through the model; rows of a softmax output are
/// probability distributions.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_trace(model, batch)?.acts.pop().unwrap())
}

fn check_targets(model: &Model, batch: &Tensor, targets: &Tensor) -> Result<()> {
    if targets.shape() != [batch.rows(), model.n_out()] {
        return Err(Error::shape(format!(
            "targets shape {:?}, expected [{}, {}]",
            targets.shape(),
            batch.rows(),
            model.n_out()
        )));
    }
    Ok(())
}

/// Computes the mean batch loss and exact gradients with respect to all
/// parameters and all input elements.
pub fn backward(
    model: &Model,
    batch: &Tensor,
    targets: &Tensor,
    loss_kind: LossKind,
) -> Result<(f64, GradientBundle)> {
    check_targets(model, batch, targets)?;
    let final_act = model.layers.last().unwrap().activation;
    if loss_kind == LossKind::CrossEntropy && final_act != Activation::Softmax {
        return Err(Error::config(
            "cross_entropy loss requires a softmax output layer",
        ));
    }
    let trace = forward_trace(model, batch)?;
    let output = trace.acts.last().unwrap();
    let b = batch.rows() as f64;

    let loss = match loss_kind {
        LossKind::MseOnOutput => {
            let mut acc = 0.0;
            for (y, t) in output.data().iter().zip(targets.data()) {
                let d = y - t;
                acc += d * d;
            }
            acc / b
        }
        LossKind::CrossEntropy => {
            let mut acc = 0.0;
            for r in 0..output.rows() {
                let (yr, tr) = (output.row(r), targets.row(r));
                for (y, t) in yr.iter().zip(tr) {
                    if *t > 0.0 {
                        acc -= t * y.max(1e-300).ln();
                    }
                }
            }
            acc / b
        }
    };

    // delta = dL/dz for the output layer.
    let n_layers = model.layers.len();
    let mut delta = match (loss_kind, final_act) {
        (LossKind::CrossEntropy, Activation::Softmax) => {
            // Softmax + NLL shortcut: (y - t)/B.
            let data = output
                .data()
                .iter()
                .zip(targets.data())
                .map(|(y, t)| (y - t) / b)
                .collect();
            Tensor::new(output.shape().to_vec(), data)?
        }
        (LossKind::MseOnOutput, act) => {
            // dL/dy = 2(y - t)/B, then through the output activation.
            let g: Vec<f64> = output
                .data()
                .iter()
                .zip(targets.data())
                .map(|(y, t)| 2.0 * (y - t) / b)
                .collect();
            let g = Tensor::new(output.shape().to_vec(), g)?;
            activation_backward(&g, output, &trace.zs[n_layers - 1], act)
        }
        (LossKind::CrossEntropy, _) => unreachable!("guarded above"),
    };

    let mut param_grads = vec![
        LayerGrad {
            weight: Tensor::zeros(vec![0]),
            bias: Tensor::zeros(vec![0]),
        };
        n_layers
    ];
    for l in (0..n_layers).rev() {
        let layer = &model.layers[l];
        let a_prev = &trace.acts[l];
        // dW = delta^T · a_prev ; db = column sums of delta.
        let (batch_n, n_out, n_in) = (a_prev.rows(), layer.n_out(), layer.n_in());
        let mut dw = Tensor::zeros(vec![n_out, n_in]);
        let mut db = Tensor::zeros(vec![n_out]);
        for r in 0..batch_n {
            let dr = delta.row(r);
            let ar = a_prev.row(r);
            for (j, &dj) in dr.iter().enumerate() {
                db.data_mut()[j] += dj;
                let wrow = dw.row_mut(j);
                for (w, &a) in wrow.iter_mut().zip(ar) {
                    *w += dj * a;
                }
            }
        }
        param_grads[l] = LayerGrad {
            weight: dw,
            bias: db,
        };
        // dL/da_prev = delta · W, then through the previous activation.
        let mut da = Tensor::zeros(vec![batch_n, n_in]);
        for r in 0..batch_n {
            let dr = delta.row(r);
            let out_row = da.row_mut(r);
            for (j, &dj) in dr.iter().enumerate() {
                for (o, &w) in out_row.iter_mut().zip(layer.weight.row(j)) {
                    *o += dj * w;
                }
            }
        }
        if l > 0 {
            let prev = &model.layers[l - 1];
            delta = activation_backward(&da, &trace.acts[l], &trace.zs[l - 1], prev.activation);
        } else {
            delta = da;
        }
    }

    Ok((
        loss,
        GradientBundle {
            param_grads,
            input_grads: delta,
        },
    ))
}

/// Pulls `dL/da` back through an activation to `dL/dz`.
/// `a` is the post-activation output, `z` the pre-activation input.
fn activation_backward(da: &Tensor, a: &Tensor, z: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => da.clone(),
        Activation::Relu => {
            let data = da
                .data()
                .iter()
                .zip(z.data())
                .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
                .collect();
            Tensor::new(da.shape().to_vec(), data).expect("relu backward shape")
        }
        Activation::Softmax => {
            // dL/dz_j = y_j (g_j - sum_k g_k y_k) per row.
            let mut out = Tensor::zeros(vec![da.rows(), da.cols()]);
            for r in 0..da.rows() {
                let (gr, yr) = (da.row(r), a.row(r));
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                let o = out.row_mut(r);
                for ((o, &g), &y) in o.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            out
        }
    }
}

/// One plain SGD step: every parameter becomes `p - lr*g`.
pub fn sgd_step(model: &Model, grads: &GradientBundle, lr: f64) -> Result<Model> {
    if grads.param_grads.len() != model.layers.len() {
        return Err(Error::shape("gradient bundle layer count mismatch"));
    }
    let layers = model
        .layers
        .iter()
        .zip(&grads.param_grads)
        .map(|(layer, g)| {
            if g.weight.shape() != layer.weight.shape() || g.bias.shape() != layer.bias.shape() {
                return Err(Error::shape("gradient shape mismatch"));
            }
            let weight = Tensor::new(
                layer.weight.shape().to_vec(),
                layer
                    .weight
                    .data()
                    .iter()
                    .zip(g.weight.data())
                    .map(|(p, gv)| p - lr * gv)
                    .collect(),
            )?;
            let bias = Tensor::new(
                layer.bias.shape().to_vec(),
                layer
                    .bias
                    .data()
                    .iter()
                    .zip(g.bias.data())
                    .map(|(p, gv)| p - lr * gv)
                    .collect(),
            )?;
            Ok(Layer {
                weight,
                bias,
                activation: layer.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        layers,
        arch_id: model.arch_id.clone(),
    })
}

/// Canonical parameter vector: layer-major, weight before bias, row-major.
pub fn flatten_params(model: &Model) -> Tensor {
    let mut data = Vec::with_capacity(model.n_params());
    for layer in &model.layers {
        data.extend_from_slice(layer.weight.data());
        data.extend_from_slice(layer.bias.data());
    }
    Tensor::new(vec![data.len()], data).expect("flatten shape")
}

/// Inverse of [`flatten_params`]: rebuilds a model with the same
/// architecture from a flat parameter vector.
pub fn unflatten_params(model: &Model, flat: &Tensor) -> Result<Model> {
    if flat.len() != model.n_params() {
        return Err(Error::shape(format!(
            "flat length {} != parameter count {}",
            flat.len(),
            model.n_params()
        )));
    }
    let mut off = 0;
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let wn = layer.weight.len();
            let bn = layer.bias.len();
            let weight = Tensor::new(
                layer.weight.shape().to_vec(),
                flat.data()[off..off + wn].to_vec(),
            )?;
            off += wn;
            let bias = Tensor::new(
                layer.bias.shape().to_vec(),
                flat.data()[off..off + bn].to_vec(),
            )?;
            off += bn;
            Ok(Layer {
                weight,
                bias,
                activation: layer.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        layers,
        arch_id: model.arch_id.clone(),
    })
}

/// Writes `arch_id\n` followed by the flattened parameters as little-endian
/// 64-bit reals.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(model.arch_id.as_bytes())?;
    f.write_all(b"\n")?;
    for v in flatten_params(model).data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a model written by [`save_model`]; the header's arch id must be
/// registered.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let arch_id = header.trim_end_matches('\n');
    let skeleton = init_model(arch_id, 0)?;
    let d = skeleton.n_params();
    let mut buf = vec![0u8; d * 8];
    reader.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    unflatten_params(&skeleton, &Tensor::new(vec![d], data)?)
}

/// One-hot rows for a label slice.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), n_classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.row_mut(r)[l] = 1.0;
    }
    t
}
