//! The optimized-trigger data-poisoning pipeline: trigger training set
//! construction, gradient-ranked placement selection, iterative value
//! optimization, trigger embedding, and the fixed/distributed baseline
//! triggers.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example};
use crate::nn::{backward, one_hot, LossKind, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A sparse pixel trigger: distinct flat pixel indices, the values written
/// there, and the target label the trigger should elicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub placements: Vec<usize>,
    pub values: Vec<f64>,
    pub target_label: usize,
}

impl Trigger {
    pub fn new(placements: Vec<usize>, values: Vec<f64>, target_label: usize) -> Result<Self> {
        if placements.len() != values.len() {
            return Err(Error::config(format!(
                "{} placements but {} values",
                placements.len(),
                values.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &placements {
            if !seen.insert(p) {
                return Err(Error::config(format!("duplicate placement {p}")));
            }
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("trigger value {v} outside [0,1]")));
        }
        Ok(Trigger {
            placements,
            values,
            target_label,
        })
    }

    pub fn tri_size(&self) -> usize {
        self.placements.len()
    }
}

/// All malicious clients' benign data relabeled to the target label; the
/// corpus the per-round trigger is optimized against.
#[derive(Debug, Clone)]
pub struct TriggerTrainingSet {
    pub dataset: Dataset,
    pub target_label: usize,
}

/// Concatenates the malicious clients' data (client order, then example
/// order), relabeling every example to `target_label`. Sources are copied,
/// never mutated.
pub fn build_trigger_training_set(
    malicious_client_data: &[&Dataset],
    target_label: usize,
) -> Result<TriggerTrainingSet> {
    let total: usize = malicious_client_data.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(Error::config(
            "trigger training set needs at least one example",
        ));
    }
    let first = malicious_client_data
        .iter()
        .find(|d| !d.is_empty())
        .unwrap();
    let shape = first.image_shape;
    let n_classes = first.n_classes;
    let mut examples = Vec::with_capacity(total);
    for ds in malicious_client_data {
        for ex in &ds.examples {
            examples.push(Example {
                image: ex.image.clone(),
                label: target_label,
            });
        }
    }
    Ok(TriggerTrainingSet {
        dataset: Dataset::new(examples, n_classes, shape)?,
        target_label,
    })
}

/// Embeds the trigger: pixels at the placements are replaced by the trigger
/// values, everything else is untouched. The input is not mutated.
pub fn apply_trigger(image: &Tensor, trigger: &Trigger) -> Result<Tensor> {
    let n = image.len();
    let mut out = image.clone();
    for (&p, &v) in trigger.placements.iter().zip(&trigger.values) {
        if p >= n {
            return Err(Error::shape(format!(
                "placement {p} out of bounds for {n}-pixel image"
            )));
        }
        out.data_mut()[p] = v;
    }
    Ok(out)
}

/// Sums the loss gradient with respect to every pixel over all images of the
/// trigger training set, for the mean squared error against the target
/// label's one-hot row.
fn summed_input_gradient(model: &Model, batch: &Tensor, target_label: usize) -> Result<Vec<f64>> {
    let targets = one_hot(&vec![target_label; batch.rows()], model.n_out());
    let (_, grads) = backward(model, batch, &targets, LossKind::MseOnOutput)?;
    let px = batch.cols();
    let mut summed = vec![0.0; px];
    for r in 0..batch.rows() {
        for (s, g) in summed.iter_mut().zip(grads.input_grads.row(r)) {
            *s += g;
        }
    }
    Ok(summed)
}

/// Selects the `tri_size` pixels with the largest absolute summed input
/// gradient, in descending-gradient order. Exact ties break toward the
/// lowest flat index.
pub fn compute_placements(
    model: &Model,
    d: &TriggerTrainingSet,
    tri_size: usize,
) -> Result<Vec<usize>> {
    if d.dataset.is_empty() {
        return Err(Error::config("trigger training set is empty"));
    }
    let px = d.dataset.pixels();
    if tri_size > px {
        return Err(Error::config(format!(
            "tri_size {tri_size} exceeds pixel count {px}"
        )));
    }
    let batch = d.dataset.as_batch();
    let summed = summed_input_gradient(model, &batch, d.target_label)?;
    let scores: Vec<f64> = summed.iter().map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..px).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(tri_size);
    Ok(order)
}

/// Outcome of the value-optimization loop: final values plus per-iteration
/// loss and learning-rate traces.
#[derive(Debug, Clone)]
pub struct ValueOptimization {
    pub values: Vec<f64>,
    /// Loss measured at the start of each iteration (before that
    /// iteration's update).
    pub loss_trace: Vec<f64>,
    /// Learning rate used by each iteration's update.
    pub gamma_trace: Vec<f64>,
}

/// Iterative trigger-value optimization.
///
/// Values start at the per-pixel mean of the training set restricted to the
/// placements. The first iteration measures loss and gradients on the clean
/// images; later iterations embed the current values first. The step size
/// starts at `gamma0` and halves whenever an iteration's loss exceeds the
/// previous one's. Values are clamped to `[0,1]` after every update so the
/// trigger always remains a valid pixel pattern.
pub fn optimize_values(
    placements: &[usize],
    model: &Model,
    d: &TriggerTrainingSet,
    n_iter: usize,
    gamma0: f64,
) -> Result<ValueOptimization> {
    if placements.is_empty() {
        return Err(Error::config("placements must be nonempty"));
    }
    if n_iter == 0 {
        return Err(Error::config("n_iter must be at least 1"));
    }
    let clean = d.dataset.as_batch();
    let px = clean.cols();
    if let Some(&p) = placements.iter().find(|&&p| p >= px) {
        return Err(Error::shape(format!(
            "placement {p} out of bounds for {px}-pixel images"
        )));
    }
    let n_rows = clean.rows() as f64;

    // Per-pixel mean of the training data at the placements.
    let mut values: Vec<f64> = placements
        .iter()
        .map(|&p| (0..clean.rows()).map(|r| clean.row(r)[p]).sum::<f64>() / n_rows)
        .collect();

    let mut gamma = gamma0;
    let mut loss_trace = Vec::with_capacity(n_iter);
    let mut gamma_trace = Vec::with_capacity(n_iter);
    for iteration in 1..=n_iter {
        let batch = if iteration == 1 {
            clean.clone()
        } else {
            let mut embedded = clean.clone();
            for r in 0..embedded.rows() {
                let row = embedded.row_mut(r);
                for (&p, &v) in placements.iter().zip(&values) {
                    row[p] = v;
                }
            }
            embedded
        };
        let targets = one_hot(&vec![d.target_label; batch.rows()], model.n_out());
        let (loss, grads) = backward(model, &batch, &targets, LossKind::MseOnOutput)?;
        if let Some(prev) = loss_trace.last() {
            if loss > *prev {
                gamma /= 2.0;
            }
        }
        loss_trace.push(loss);
        gamma_trace.push(gamma);
        // Summed (not absolute) gradient, restricted to the placements.
        for (v, &p) in values.iter_mut().zip(placements) {
            let delta: f64 = (0..batch.rows())
                .map(|r| grads.input_grads.row(r)[p])
                .sum();
            *v = (*v - gamma * delta).clamp(0.0, 1.0);
        }
    }
    Ok(ValueOptimization {
        values,
        loss_trace,
        gamma_trace,
    })
}

/// Runs placement selection and value optimization against the given model.
pub fn optimize_trigger(
    model: &Model,
    d: &TriggerTrainingSet,
    tri_size: usize,
    n_iter: usize,
    gamma0: f64,
) -> Result<(Trigger, ValueOptimization)> {
    let placements = compute_placements(model, d, tri_size)?;
    let opt = optimize_values(&placements, model, d, n_iter, gamma0)?;
    let trigger = Trigger::new(placements, opt.values.clone(), d.target_label)?;
    Ok((trigger, opt))
}

/// Poisons `ceil(rate*N)` examples after a seeded shuffle: those examples
/// get the trigger embedded and their label set to the trigger's target.
/// The returned dataset is in shuffled order, so poisoned examples are
/// interleaved for training.
pub fn poison_dataset(
    client_data: &Dataset,
    trigger: &Trigger,
    rate: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("poison rate {rate} outside [0,1]")));
    }
    let mut order: Vec<usize> = (0..client_data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_poison = (rate * client_data.len() as f64).ceil() as usize;
    let examples = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let ex = &client_data.examples[i];
            if pos < n_poison {
                Ok(Example {
                    image: apply_trigger(&ex.image, trigger)?,
                    label: trigger.target_label,
                })
            } else {
                Ok(ex.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, client_data.n_classes, client_data.image_shape)
}

/// The fixed-pattern baseline: a white square of side `ceil(sqrt(tri_size))`
/// anchored at the top-left corner, truncated row-major to exactly
/// `tri_size` pixels. Identical on every call.
pub fn make_fixed_trigger(
    image_shape: (usize, usize),
    tri_size: usize,
    target_label: usize,
) -> Result<Trigger> {
    let (h, w) = image_shape;
    if h < 6 || w < 6 {
        return Err(Error::config(format!(
            "image {h}x{w} too small for a patch trigger (need at least 6x6)"
        )));
    }
    if tri_size == 0 {
        return Err(Error::config("tri_size must be positive"));
    }
    let side = (tri_size as f64).sqrt().ceil() as usize;
    if side > h || side > w {
        return Err(Error::config(format!(
            "patch side {side} exceeds image bounds {h}x{w}"
        )));
    }
    let mut placements = Vec::with_capacity(tri_size);
    'outer: for r in 0..side {
        for c in 0..side {
            placements.push(r * w + c);
            if placements.len() == tri_size {
                break 'outer;
            }
        }
    }
    Trigger::new(placements, vec![1.0; tri_size], target_label)
}

/// Slices a global trigger into `n_parts` contiguous pieces with sizes
/// differing by at most one. Malicious client `k` trains with slice
/// `k % n_parts`; attack success is always evaluated with the global
/// trigger.
pub fn split_distributed_trigger(global: &Trigger, n_parts: usize) -> Result<Vec<Trigger>> {
    if n_parts == 0 {
        return Err(Error::config("n_parts must be positive"));
    }
    if n_parts > global.tri_size() {
        return Err(Error::config(format!(
            "n_parts {n_parts} exceeds trigger size {}",
            global.tri_size()
        )));
    }
    let len = global.tri_size();
    let base = len / n_parts;
    let rem = len % n_parts;
    let mut out = Vec::with_capacity(n_parts);
    let mut off = 0;
    for part in 0..n_parts {
        let size = base + usize::from(part < rem);
        out.push(Trigger::new(
            global.placements[off..off + size].to_vec(),
            global.values[off..off + size].to_vec(),
            global.target_label,
        )?);
        off += size;
    }
    Ok(out)
}

/// Text form: `y_t`, `tri_size`, then one `index value` pair per line.
pub fn trigger_to_text(trigger: &Trigger) -> String {
    let mut s = String::new();
    writeln!(s, "{}", trigger.target_label).unwrap();
    writeln!(s, "{}", trigger.tri_size()).unwrap();
    for (p, v) in trigger.placements.iter().zip(&trigger.values) {
        writeln!(s, "{p} {v}").unwrap();
    }
    s
}

pub fn trigger_from_text(text: &str) -> Result<Trigger> {
    let mut lines = text.lines();
    let target_label: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::Format("missing target label line".into()))?;
    let tri_size: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::Format("missing tri_size line".into()))?;
    let mut placements = Vec::with_capacity(tri_size);
    let mut values = Vec::with_capacity(tri_size);
    for line in lines.take(tri_size) {
        let mut it = line.split_whitespace();
        let p: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad placement line '{line}'")))?;
        let v: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad value line '{line}'")))?;
        placements.push(p);
        values.push(v);
    }
    if placements.len() != tri_size {
        return Err(Error::Format(format!(
            "expected {tri_size} placement lines, found {}",
            placements.len()
        )));
    }
    Trigger::new(placements, values, target_label)
}

pub fn save_trigger(trigger: &Trigger, path: &Path) -> Result<()> {
    std::fs::write(path, trigger_to_text(trigger))?;
    Ok(())
}

pub fn load_trigger(path: &Path) -> Result<Trigger> {
    trigger_from_text(&std::fs::read_to_string(path)?)
}
