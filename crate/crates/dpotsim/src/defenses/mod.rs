//! Server-side aggregation rules over client model updates.
//!
//! Every rule consumes an [`UpdateMatrix`] (one flattened update row per
//! client) and emits an [`AggregationResult`]: the global update plus
//! per-client weights and exclusions for auditing. Rules that need
//! cross-round memory read and write a [`DefenseState`].

pub mod bench;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{forward, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Client update rows, all of dimension `d`, aligned with their client ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMatrix {
    pub rows: Vec<Vec<f64>>,
    pub client_ids: Vec<usize>,
}

impl UpdateMatrix {
    pub fn new(rows: Vec<Vec<f64>>, client_ids: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("update matrix needs at least one client"));
        }
        if rows.len() != client_ids.len() {
            return Err(Error::config("rows and client ids must align"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("update rows differ in dimension"));
        }
        Ok(UpdateMatrix { rows, client_ids })
    }

    pub fn n_clients(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

/// Cross-round defense memory.
#[derive(Debug, Clone, Default)]
pub struct DefenseState {
    /// Per-client cumulative update vectors (FoolsGold).
    pub foolsgold_history: Vec<Vec<f64>>,
    /// Sign vector of the previous round's global update (FLAIR); empty on
    /// round one.
    pub flair_prev_direction: Vec<f64>,
    pub round_index: usize,
}

/// What a rule produced: the global update, the per-client weights it used,
/// and which clients it filtered out entirely.
#[derive(Debug, Clone)]
pub struct AggregationResult {
    pub global_update: Vec<f64>,
    pub weights: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity with zero-vector guard: similarity to a zero vector is
/// defined as 0.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-300 || nb < 1e-300 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn weighted_mean(u: &UpdateMatrix, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; u.dim()];
    if total <= 0.0 {
        return out;
    }
    for (row, &w) in u.rows.iter().zip(weights) {
        if w > 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Plain averaging of all clients' updates.
pub fn agg_fedavg(u: &UpdateMatrix) -> Result<AggregationResult> {
    let n = u.n_clients() as f64;
    let weights = vec![1.0 / n; u.n_clients()];
    Ok(AggregationResult {
        global_update: weighted_mean(u, &weights),
        weights,
        excluded: Vec::new(),
    })
}

/// Element-wise median; an even client count takes the mean of the two
/// middle order statistics.
pub fn agg_median(u: &UpdateMatrix) -> Result<AggregationResult> {
    let d = u.dim();
    let mut global = vec![0.0; d];
    let mut column = vec![0.0; u.n_clients()];
    for (j, g) in global.iter_mut().enumerate() {
        for (c, row) in column.iter_mut().zip(&u.rows) {
            *c = row[j];
        }
        *g = median_of(&mut column);
    }
    Ok(AggregationResult {
        global_update: global,
        weights: vec![1.0 / u.n_clients() as f64; u.n_clients()],
        excluded: Vec::new(),
    })
}

/// Per coordinate, drops the `floor(trim_ratio*n)` largest and smallest
/// values and averages the remainder.
pub fn agg_trimmed_mean(u: &UpdateMatrix, trim_ratio: f64) -> Result<AggregationResult> {
    if !(0.0..=1.0).contains(&trim_ratio) {
        return Err(Error::config(format!(
            "trim_ratio {trim_ratio} outside [0, 1]"
        )));
    }
    let n = u.n_clients();
    let k = (trim_ratio * n as f64).floor() as usize;
    if n <= 2 * k {
        return Err(Error::config(format!(
            "trimming {k} per side leaves no values out of {n}"
        )));
    }
    let d = u.dim();
    let mut global = vec![0.0; d];
    let mut column = vec![0.0; n];
    for (j, g) in global.iter_mut().enumerate() {
        for (c, row) in column.iter_mut().zip(&u.rows) {
            *c = row[j];
        }
        column.sort_by(f64::total_cmp);
        let kept = &column[k..n - k];
        *g = kept.iter().sum::<f64>() / kept.len() as f64;
    }
    Ok(AggregationResult {
        global_update: global,
        weights: vec![1.0 / n as f64; n],
        excluded: Vec::new(),
    })
}

/// Krum scores: each client's sum of squared distances to its `n-f-2`
/// nearest other clients.
pub fn multi_krum_scores(u: &UpdateMatrix, f: usize) -> Result<Vec<f64>> {
    let n = u.n_clients();
    if n < f + 3 {
        return Err(Error::config(format!(
            "multi-krum needs n >= f+3 (n={n}, f={f})"
        )));
    }
    let keep = n - f - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d = dist(&u.rows[i], &u.rows[j]);
                d * d
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        scores.push(dists[..keep].iter().sum());
    }
    Ok(scores)
}

/// Averages the `m` clients with the lowest Krum scores; ties break toward
/// the earlier client.
pub fn agg_multi_krum(u: &UpdateMatrix, f: usize, m: usize) -> Result<AggregationResult> {
    let n = u.n_clients();
    if m == 0 || m > n - f {
        return Err(Error::config(format!(
            "selection count m={m} outside [1, n-f={}]",
            n - f
        )));
    }
    let scores = multi_krum_scores(u, f)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let selected = &order[..m];
    let mut weights = vec![0.0; n];
    for &i in selected {
        weights[i] = 1.0 / m as f64;
    }
    let excluded = order[m..]
        .iter()
        .map(|&i| u.client_ids[i])
        .collect::<Vec<_>>();
    Ok(AggregationResult {
        global_update: weighted_mean(u, &weights),
        weights,
        excluded,
    })
}

/// Sign-voting server learning rate: coordinates whose summed update sign
/// reaches the vote threshold keep `+server_lr`, all others get
/// `-server_lr`; the rate multiplies the coordinate mean.
pub fn agg_robustlr(
    u: &UpdateMatrix,
    vote_threshold: usize,
    server_lr: f64,
) -> Result<AggregationResult> {
    if vote_threshold == 0 {
        return Err(Error::config("vote_threshold must be at least 1"));
    }
    let n = u.n_clients() as f64;
    let d = u.dim();
    let mut global = vec![0.0; d];
    for (j, g) in global.iter_mut().enumerate() {
        let s: f64 = u.rows.iter().map(|r| r[j].signum() * f64::from(r[j] != 0.0)).sum();
        let lr = if s.abs() >= vote_threshold as f64 {
            server_lr
        } else {
            -server_lr
        };
        let mean: f64 = u.rows.iter().map(|r| r[j]).sum::<f64>() / n;
        *g = lr * mean;
    }
    Ok(AggregationResult {
        global_update: global,
        weights: vec![1.0 / n; u.n_clients()],
        excluded: Vec::new(),
    })
}

/// Smoothed Weiszfeld iteration for the geometric median, plus the true
/// objective value at each iterate (starting point included).
pub fn rfa_with_trace(
    u: &UpdateMatrix,
    max_iter: usize,
    eps: f64,
    nu: f64,
) -> Result<(AggregationResult, Vec<f64>)> {
    let n = u.n_clients();
    let objective =
        |z: &[f64]| -> f64 { u.rows.iter().map(|r| dist(r, z)).sum() };
    // Start from the coordinate-wise mean.
    let mut z = agg_fedavg(u)?.global_update;
    let mut trace = vec![objective(&z)];
    let mut weights = vec![1.0 / n as f64; n];
    for _ in 0..max_iter {
        let raw: Vec<f64> = u.rows.iter().map(|r| 1.0 / dist(r, &z).max(nu)).collect();
        let total: f64 = raw.iter().sum();
        let mut z_new = vec![0.0; u.dim()];
        for (row, w) in u.rows.iter().zip(&raw) {
            for (o, v) in z_new.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        for o in &mut z_new {
            *o /= total;
        }
        let step = dist(&z_new, &z);
        z = z_new;
        trace.push(objective(&z));
        weights = raw.iter().map(|w| w / total).collect();
        if step <= eps {
            break;
        }
    }
    Ok((
        AggregationResult {
            global_update: z,
            weights,
            excluded: Vec::new(),
        },
        trace,
    ))
}

/// Geometric-median aggregation. The returned global update is the median
/// itself; the smoothed Weiszfeld weights are reported per client.
pub fn agg_rfa(u: &UpdateMatrix, max_iter: usize, eps: f64, nu: f64) -> Result<AggregationResult> {
    Ok(rfa_with_trace(u, max_iter, eps, nu)?.0)
}

/// Excludes the `n_malicious` clients whose update signs disagree most with
/// the previous round's global direction, then averages the rest. Updates
/// the stored direction to the new global update's sign vector.
pub fn agg_flair(
    u: &UpdateMatrix,
    n_malicious: usize,
    state: &mut DefenseState,
) -> Result<AggregationResult> {
    let n = u.n_clients();
    if n_malicious >= n {
        return Err(Error::config(format!(
            "cannot exclude {n_malicious} of {n} clients"
        )));
    }
    let d = u.dim();
    let prev = if state.flair_prev_direction.len() == d {
        state.flair_prev_direction.clone()
    } else {
        vec![0.0; d]
    };
    // Flip score: fraction of coordinates in strict sign opposition to the
    // previous direction.
    let flip_scores: Vec<f64> = u
        .rows
        .iter()
        .map(|row| {
            let flips = row
                .iter()
                .zip(&prev)
                .filter(|(v, p)| v.signum() * **p < 0.0 && **v != 0.0)
                .count();
            flips as f64 / d as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Highest flip score first; ties resolve toward the earlier client.
    order.sort_by(|&a, &b| flip_scores[b].total_cmp(&flip_scores[a]).then(a.cmp(&b)));
    let mut weights = vec![1.0; n];
    let mut excluded = Vec::with_capacity(n_malicious);
    for &i in &order[..n_malicious] {
        weights[i] = 0.0;
        excluded.push(u.client_ids[i]);
    }
    excluded.sort_unstable();
    let global = weighted_mean(u, &weights);
    state.flair_prev_direction = global.iter().map(|v| v.signum()).collect();
    Ok(AggregationResult {
        global_update: global,
        weights,
        excluded,
    })
}

/// Seeded client grouping for the vote-based defense: client ids are sorted,
/// shuffled, and cut into `n_groups` nearly equal slices. Each group is
/// aggregated with the element-wise median.
pub fn agg_flcert(
    u: &UpdateMatrix,
    n_groups: usize,
    group_seed: u64,
) -> Result<Vec<AggregationResult>> {
    let n = u.n_clients();
    if n_groups == 0 || n < n_groups {
        return Err(Error::config(format!(
            "need at least {n_groups} clients for {n_groups} groups, have {n}"
        )));
    }
    // Group membership follows sorted client ids, so row order is irrelevant.
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by_key(|&i| u.client_ids[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
    by_id.shuffle(&mut rng);

    let base = n / n_groups;
    let rem = n % n_groups;
    let mut results = Vec::with_capacity(n_groups);
    let mut off = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < rem);
        let members = &by_id[off..off + size];
        off += size;
        let sub = UpdateMatrix::new(
            members.iter().map(|&i| u.rows[i].clone()).collect(),
            members.iter().map(|&i| u.client_ids[i]).collect(),
        )?;
        let med = agg_median(&sub)?;
        let mut weights = vec![0.0; n];
        for &i in members {
            weights[i] = 1.0 / size as f64;
        }
        results.push(AggregationResult {
            global_update: med.global_update,
            weights,
            excluded: Vec::new(),
        });
    }
    Ok(results)
}

/// Majority vote over the group models' predicted labels; ties go to the
/// lowest label.
pub fn flcert_predict(group_models: &[Model], x: &Tensor) -> Result<usize> {
    if group_models.is_empty() {
        return Err(Error::config("need at least one group model"));
    }
    let n_out = group_models[0].n_out();
    let mut votes = vec![0usize; n_out];
    for model in group_models {
        let out = forward(model, x)?;
        let row = out.row(0);
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        votes[best] += 1;
    }
    let mut winner = 0;
    for (label, &count) in votes.iter().enumerate() {
        if count > votes[winner] {
            winner = label;
        }
    }
    Ok(winner)
}

/// Cosine clustering plus norm clipping.
///
/// A client is admitted when its median cosine distance to the others does
/// not exceed the median of those per-client medians; the admitted set is
/// padded to a strict majority if needed. Admitted updates are clipped to
/// their median L2 norm and averaged, with optional Gaussian noise.
pub fn agg_flame(u: &UpdateMatrix, sigma: f64, noise_seed: u64) -> Result<AggregationResult> {
    let n = u.n_clients();
    if n < 3 {
        return Err(Error::config("flame needs at least 3 clients"));
    }
    let mut med_dist = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| 1.0 - cosine(&u.rows[i], &u.rows[j]))
            .collect();
        med_dist.push(median_of(&mut dists));
    }
    let threshold = {
        let mut all = med_dist.clone();
        median_of(&mut all)
    };
    let mut admitted: Vec<usize> = (0..n).filter(|&i| med_dist[i] <= threshold).collect();
    let need = n / 2 + 1;
    if admitted.len() < need {
        let mut rest: Vec<usize> = (0..n).filter(|i| !admitted.contains(i)).collect();
        rest.sort_by(|&a, &b| med_dist[a].total_cmp(&med_dist[b]).then(a.cmp(&b)));
        admitted.extend(rest.into_iter().take(need - admitted.len()));
        admitted.sort_unstable();
    }

    let mut norms: Vec<f64> = admitted.iter().map(|&i| norm(&u.rows[i])).collect();
    let clip = median_of(&mut norms);
    let mut global = vec![0.0; u.dim()];
    for &i in &admitted {
        let un = norm(&u.rows[i]);
        let scale = if un > clip && un > 0.0 { clip / un } else { 1.0 };
        for (o, v) in global.iter_mut().zip(&u.rows[i]) {
            *o += scale * v;
        }
    }
    for o in &mut global {
        *o /= admitted.len() as f64;
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for o in &mut global {
            *o += normal.sample(&mut rng);
        }
    }
    let mut weights = vec![0.0; n];
    for &i in &admitted {
        weights[i] = 1.0 / admitted.len() as f64;
    }
    let excluded = (0..n)
        .filter(|i| !admitted.contains(i))
        .map(|i| u.client_ids[i])
        .collect();
    Ok(AggregationResult {
        global_update: global,
        weights,
        excluded,
    })
}

const FOOLSGOLD_EPS: f64 = 1e-5;

/// Down-weights clients whose cumulative update histories stay mutually
/// similar. Histories accumulate in the defense state across rounds.
///
/// `feature_range` restricts the similarity computation to a coordinate
/// span (the engine passes the output-layer span, the rule's indicative
/// features); `None` compares full histories.
pub fn agg_foolsgold(
    u: &UpdateMatrix,
    state: &mut DefenseState,
    feature_range: Option<(usize, usize)>,
) -> Result<AggregationResult> {
    let n = u.n_clients();
    let d = u.dim();
    if state.foolsgold_history.len() != n || state.foolsgold_history[0].len() != d {
        state.foolsgold_history = vec![vec![0.0; d]; n];
    }
    for (hist, row) in state.foolsgold_history.iter_mut().zip(&u.rows) {
        for (h, v) in hist.iter_mut().zip(row) {
            *h += v;
        }
    }
    let (lo, hi) = match feature_range {
        Some((lo, hi)) if lo < hi && hi <= d => (lo, hi),
        Some((lo, hi)) => {
            return Err(Error::config(format!(
                "feature range {lo}..{hi} invalid for dimension {d}"
            )))
        }
        None => (0, d),
    };
    let hist = &state.foolsgold_history;
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = cosine(&hist[i][lo..hi], &hist[j][lo..hi]);
            }
        }
    }
    let max_over_others = |cs: &Vec<Vec<f64>>, i: usize| -> f64 {
        (0..n)
            .filter(|&j| j != i)
            .map(|j| cs[i][j])
            .fold(0.0, f64::max)
    };
    let v: Vec<f64> = (0..n).map(|i| max_over_others(&cs, i)).collect();
    // Pardoning: shrink similarity toward clients that look more suspicious.
    for i in 0..n {
        for j in 0..n {
            if i != j && v[j] > v[i] && v[j] > 0.0 {
                cs[i][j] *= v[i] / v[j];
            }
        }
    }
    let mut alphas: Vec<f64> = (0..n)
        .map(|i| (1.0 - max_over_others(&cs, i)).clamp(0.0, 1.0))
        .collect();
    // Rescale so the least suspicious client keeps full weight, as in the
    // original rule; without this, benign clients sharing a common task
    // direction all collapse to zero weight.
    let max_alpha = alphas.iter().cloned().fold(0.0, f64::max);
    if max_alpha > 0.0 {
        for a in &mut alphas {
            *a /= max_alpha;
        }
    }
    let weights: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            let a = a.clamp(FOOLSGOLD_EPS, 1.0 - FOOLSGOLD_EPS);
            ((a / (1.0 - a)).ln() + 0.5).clamp(0.0, 1.0)
        })
        .collect();
    let excluded = (0..n)
        .filter(|&i| weights[i] == 0.0)
        .map(|i| u.client_ids[i])
        .collect();
    Ok(AggregationResult {
        global_update: weighted_mean(u, &weights),
        weights,
        excluded,
    })
}

/// Element-wise scaling of one update vector (the model-poisoning knob).
pub fn scale_update(update: &[f64], factor: f64) -> Vec<f64> {
    update.iter().map(|v| v * factor).collect()
}

/// The selectable defense rules, in CLI spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    FedAvg,
    Median,
    TrimmedMean,
    MultiKrum,
    RobustLr,
    Rfa,
    Flair,
    FlCert,
    Flame,
    FoolsGold,
}

pub const DEFENSE_NAMES: [&str; 10] = [
    "fedavg",
    "median",
    "trimmed-mean",
    "multi-krum",
    "robustlr",
    "rfa",
    "flair",
    "flcert",
    "flame",
    "foolsgold",
];

impl DefenseKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "fedavg" => DefenseKind::FedAvg,
            "median" => DefenseKind::Median,
            "trimmed-mean" => DefenseKind::TrimmedMean,
            "multi-krum" => DefenseKind::MultiKrum,
            "robustlr" => DefenseKind::RobustLr,
            "rfa" => DefenseKind::Rfa,
            "flair" => DefenseKind::Flair,
            "flcert" => DefenseKind::FlCert,
            "flame" => DefenseKind::Flame,
            "foolsgold" => DefenseKind::FoolsGold,
            other => {
                return Err(Error::config(format!(
                    "unknown defense '{other}'; valid rules: {}",
                    DEFENSE_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::FedAvg => "fedavg",
            DefenseKind::Median => "median",
            DefenseKind::TrimmedMean => "trimmed-mean",
            DefenseKind::MultiKrum => "multi-krum",
            DefenseKind::RobustLr => "robustlr",
            DefenseKind::Rfa => "rfa",
            DefenseKind::Flair => "flair",
            DefenseKind::FlCert => "flcert",
            DefenseKind::Flame => "flame",
            DefenseKind::FoolsGold => "foolsgold",
        }
    }
}

/// Rule-specific parameters, resolved from config defaults by the engine.
#[derive(Debug, Clone)]
pub struct DefenseParams {
    pub trim_ratio: f64,
    pub krum_f: Option<usize>,
    pub krum_m: Option<usize>,
    pub vote_threshold: Option<usize>,
    pub server_lr: f64,
    pub rfa_max_iter: usize,
    pub rfa_eps: f64,
    pub rfa_nu: f64,
    pub flair_n_malicious: Option<usize>,
    pub flcert_groups: usize,
    pub flcert_seed: Option<u64>,
    pub flame_sigma: f64,
}

impl Default for DefenseParams {
    fn default() -> Self {
        DefenseParams {
            trim_ratio: 0.4,
            krum_f: None,
            krum_m: None,
            vote_threshold: None,
            server_lr: 1.0,
            rfa_max_iter: 100,
            rfa_eps: 1e-6,
            rfa_nu: 1e-6,
            flair_n_malicious: None,
            flcert_groups: 5,
            flcert_seed: None,
            flame_sigma: 0.0,
        }
    }
}
