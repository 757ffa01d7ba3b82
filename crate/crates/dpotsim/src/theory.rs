//! Numerical verification of the concealment argument on a linear-regression
//! model: gradient formulas, the cosine-similarity objective, convex optimal
//! trigger values, and brute-force placement optimality.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One regression instance: sample row `x`, model `beta` (`n×m`), benign
/// target `y_hat`, backdoor target `y_t`, and the poison mixing weight
/// `alpha`.
#[derive(Debug, Clone)]
pub struct LinRegInstance {
    pub x: Vec<f64>,
    pub beta: Tensor,
    pub y_hat: Vec<f64>,
    pub y_t: Vec<f64>,
    pub alpha: f64,
}

impl LinRegInstance {
    pub fn new(x: Vec<f64>, beta: Tensor, y_hat: Vec<f64>, y_t: Vec<f64>, alpha: f64) -> Result<Self> {
        let (n, m) = (beta.rows(), beta.cols());
        if x.len() != n || y_hat.len() != m || y_t.len() != m {
            return Err(Error::shape("instance dimensions disagree"));
        }
        if y_t == y_hat {
            return Err(Error::config("backdoor target must differ from y_hat"));
        }
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::config(format!("alpha {alpha} outside (0,1)")));
        }
        Ok(LinRegInstance {
            x,
            beta,
            y_hat,
            y_t,
            alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.beta.rows()
    }

    pub fn m(&self) -> usize {
        self.beta.cols()
    }
}

/// Diagonal 0/1 trigger mask with its value vector. Only masked entries of
/// `values` are meaningful.
#[derive(Debug, Clone)]
pub struct DiagTrigger {
    pub mask: Vec<bool>,
    pub values: Vec<f64>,
}

impl DiagTrigger {
    pub fn from_indices(n: usize, indices: &[usize], values: &[f64]) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::config("indices and values must align"));
        }
        let mut mask = vec![false; n];
        let mut full = vec![0.0; n];
        for (&i, &v) in indices.iter().zip(values) {
            if i >= n {
                return Err(Error::shape(format!("index {i} out of bounds {n}")));
            }
            mask[i] = true;
            full[i] = v;
        }
        Ok(DiagTrigger { mask, values: full })
    }

    pub fn k(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// `x_t = x(I - E_t) + V_t E_t`: masked coordinates take the trigger value.
pub fn embed(x: &[f64], trig: &DiagTrigger) -> Vec<f64> {
    x.iter()
        .zip(&trig.mask)
        .zip(&trig.values)
        .map(|((&xv, &m), &v)| if m { v } else { xv })
        .collect()
}

fn row_times_mat(x: &[f64], beta: &Tensor) -> Vec<f64> {
    let (n, m) = (beta.rows(), beta.cols());
    let mut out = vec![0.0; m];
    for i in 0..n {
        let b = beta.row(i);
        for j in 0..m {
            out[j] += x[i] * b[j];
        }
    }
    out
}

fn scaled_outer(scale: f64, x: &[f64], r: &[f64]) -> Tensor {
    let (n, m) = (x.len(), r.len());
    let mut t = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let row = t.row_mut(i);
        for j in 0..m {
            row[j] = scale * x[i] * r[j];
        }
    }
    t
}

/// Squared backdoor residual `‖x_t β − y_t‖²` for the given trigger.
pub fn backdoor_loss(inst: &LinRegInstance, trig: &DiagTrigger) -> f64 {
    let xt = embed(&inst.x, trig);
    let pred = row_times_mat(&xt, &inst.beta);
    pred.iter()
        .zip(&inst.y_t)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// Benign objective gradient `2xᵀ(xβ − ŷ)`.
pub fn grad_benign(inst: &LinRegInstance) -> Tensor {
    let pred = row_times_mat(&inst.x, &inst.beta);
    let r: Vec<f64> = pred.iter().zip(&inst.y_hat).map(|(p, y)| p - y).collect();
    scaled_outer(2.0, &inst.x, &r)
}

/// Backdoor objective gradient `2x_tᵀ(x_tβ − y_t)`.
pub fn grad_backdoor(inst: &LinRegInstance, trig: &DiagTrigger) -> Tensor {
    let xt = embed(&inst.x, trig);
    let pred = row_times_mat(&xt, &inst.beta);
    let r: Vec<f64> = pred.iter().zip(&inst.y_t).map(|(p, t)| p - t).collect();
    scaled_outer(2.0, &xt, &r)
}

/// Gradient of the poisoned mixture: `(1-α)·g_bn + α·g_bd`.
pub fn mixed_gradient(inst: &LinRegInstance, trig: &DiagTrigger) -> Tensor {
    let gbn = grad_benign(inst);
    let gbd = grad_backdoor(inst, trig);
    let data = gbn
        .data()
        .iter()
        .zip(gbd.data())
        .map(|(a, b)| (1.0 - inst.alpha) * a + inst.alpha * b)
        .collect();
    Tensor::new(gbn.shape().to_vec(), data).expect("mixed shape")
}

/// Flattened cosine similarity of two matrices.
pub fn cos_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let na: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "cosine of a zero matrix".into(),
        ));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Gaussian elimination with partial pivoting plus a tiny ridge; the system
/// sizes here never exceed max(k, m).
fn solve_spd(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-12;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

const PG_MAX_ITER: usize = 5000;
const PG_TOL: f64 = 1e-13;

/// Optimal trigger values for a fixed mask: the masked least-squares
/// solution clamped to `[0,1]`, polished by projected gradient descent until
/// the box-constrained optimum is reached, never worse than leaving the
/// pixels untouched. Returns the values at the masked indices (ascending
/// index order) and the achieved loss.
pub fn optimal_values(inst: &LinRegInstance, mask: &[bool]) -> Result<(Vec<f64>, f64)> {
    if mask.len() != inst.n() {
        return Err(Error::shape("mask length must equal n"));
    }
    let indices: Vec<usize> = (0..inst.n()).filter(|&i| mask[i]).collect();
    let k = indices.len();
    let m = inst.m();
    if k == 0 {
        let trig = DiagTrigger {
            mask: mask.to_vec(),
            values: vec![0.0; inst.n()],
        };
        return Ok((Vec::new(), backdoor_loss(inst, &trig)));
    }

    // Residual = v·B + c with B the masked beta rows and c the contribution
    // of the untouched coordinates minus the target.
    let b_rows: Vec<&[f64]> = indices.iter().map(|&i| inst.beta.row(i)).collect();
    let mut c = vec![0.0; m];
    for i in 0..inst.n() {
        if !mask[i] {
            for (cj, bv) in c.iter_mut().zip(inst.beta.row(i)) {
                *cj += inst.x[i] * bv;
            }
        }
    }
    for (cj, t) in c.iter_mut().zip(&inst.y_t) {
        *cj -= t;
    }

    let loss_of = |v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..m {
            let mut r = c[j];
            for (vi, brow) in v.iter().zip(&b_rows) {
                r += vi * brow[j];
            }
            acc += r * r;
        }
        acc
    };
    let grad_of = |v: &[f64]| -> Vec<f64> {
        let mut r = c.clone();
        for (vi, brow) in v.iter().zip(&b_rows) {
            for j in 0..m {
                r[j] += vi * brow[j];
            }
        }
        b_rows
            .iter()
            .map(|brow| 2.0 * brow.iter().zip(&r).map(|(b, rv)| b * rv).sum::<f64>())
            .collect()
    };

    // Minimum-norm least squares via the smaller Gram system.
    let unclamped: Vec<f64> = if k <= m {
        // (B Bᵀ) vᵀ = -B cᵀ
        let gram: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| dot_slices(b_rows[i], b_rows[j])).collect())
            .collect();
        let rhs: Vec<f64> = (0..k).map(|i| -dot_slices(b_rows[i], &c)).collect();
        solve_spd(gram, rhs).unwrap_or_else(|| vec![0.0; k])
    } else {
        // w solves (Bᵀ B) w = -cᵀ, then v = B w.
        let gram: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| b_rows.iter().map(|row| row[i] * row[j]).sum())
                    .collect()
            })
            .collect();
        let rhs: Vec<f64> = c.iter().map(|cv| -cv).collect();
        match solve_spd(gram, rhs) {
            Some(w) => b_rows.iter().map(|row| dot_slices(row, &w)).collect(),
            None => vec![0.0; k],
        }
    };
    let mut v: Vec<f64> = unclamped.iter().map(|x| x.clamp(0.0, 1.0)).collect();

    // Projected gradient descent on the box; the objective is convex, so
    // this converges to the constrained optimum.
    let lam_max = power_iteration_lam_max(&b_rows, k);
    let eta = 1.0 / (2.0 * lam_max + 1e-12);
    for _ in 0..PG_MAX_ITER {
        let g = grad_of(&v);
        let mut step = 0.0;
        let v_new: Vec<f64> = v
            .iter()
            .zip(&g)
            .map(|(vi, gi)| (vi - eta * gi).clamp(0.0, 1.0))
            .collect();
        for (a, b) in v.iter().zip(&v_new) {
            step += (a - b) * (a - b);
        }
        v = v_new;
        if step.sqrt() <= PG_TOL {
            break;
        }
    }

    // Never worse than the untouched pixels (v = masked entries of x).
    let init: Vec<f64> = indices.iter().map(|&i| inst.x[i]).collect();
    let (f_v, f_init) = (loss_of(&v), loss_of(&init));
    if f_init < f_v {
        Ok((init, f_init))
    } else {
        Ok((v, f_v))
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue of `B Bᵀ` by power iteration (small `k`).
fn power_iteration_lam_max(b_rows: &[&[f64]], k: usize) -> f64 {
    let m = b_rows.first().map_or(0, |r| r.len());
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lam = 0.0;
    for _ in 0..50 {
        // w = B Bᵀ v
        let mut bv = vec![0.0; m];
        for (vi, row) in v.iter().zip(b_rows) {
            for j in 0..m {
                bv[j] += vi * row[j];
            }
        }
        let w: Vec<f64> = b_rows.iter().map(|row| dot_slices(row, &bv)).collect();
        let n = dot_slices(&w, &w).sqrt();
        if n < 1e-300 {
            break;
        }
        lam = dot_slices(&v, &w);
        v = w.iter().map(|x| x / n).collect();
    }
    // Frobenius fallback keeps the step valid even if iteration stalled.
    let frob: f64 = b_rows
        .iter()
        .map(|row| dot_slices(row, row))
        .sum();
    lam.max(1e-12).min(frob.max(1e-12))
}

fn combinations_count(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive search over every `k`-subset of coordinates, optimizing the
/// values on each; the independent oracle for placement optimality.
pub fn brute_force_best_subset(
    inst: &LinRegInstance,
    k: usize,
) -> Result<(Vec<bool>, Vec<f64>, f64)> {
    let n = inst.n();
    if k > n {
        return Err(Error::config(format!("k={k} exceeds n={n}")));
    }
    if combinations_count(n, k) > 1_000_000 {
        return Err(Error::config(format!(
            "C({n},{k}) exceeds the enumeration guard"
        )));
    }
    let mut best: Option<(Vec<bool>, Vec<f64>, f64)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let mut mask = vec![false; n];
        for &i in &subset {
            mask[i] = true;
        }
        let (values, loss) = optimal_values(inst, &mask)?;
        if best.as_ref().is_none_or(|(_, _, b)| loss < *b) {
            best = Some((mask, values, loss));
        }
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    Ok(best.unwrap())
}

/// Advances `subset` to the next k-combination of `0..n` in lexicographic
/// order; returns false after the last one.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] != i + n - k {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Aggregate outcome of the proposition checks.
#[derive(Debug, Clone)]
pub struct PropositionReport {
    pub trials: usize,
    pub p1_mechanism_passes: usize,
    pub p1_effect_passes: usize,
    pub p2_passes: usize,
    pub p3_passes: usize,
    pub alpha: f64,
    /// Set when `alpha` is so close to 1 that the mixture degenerates to the
    /// pure backdoor gradient; reported, not failed.
    pub degenerate_alpha: bool,
}

const TRIAL_N: usize = 8;
const TRIAL_M: usize = 3;
const P3_SUBSET_SIZE: usize = 2;
/// Numerical-equality slack for loss comparisons.
const LOSS_TOL: f64 = 1e-9;

/// Draws one random verification instance.
///
/// `beta` entries are `N(0, 4)`, `y_hat = xβ` plus `N(0, 0.25)` noise, and
/// `y_t` adds a unit-norm offset; trigger masks for the value checks take at
/// least `m+1` coordinates so the convex value problem is generically
/// solvable inside the pixel box.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize, alpha: f64) -> LinRegInstance {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let normal = StandardNormal;
    let beta_data: Vec<f64> = (0..n * m)
        .map(|_| 2.0 * Distribution::<f64>::sample(&normal, rng))
        .collect();
    let beta = Tensor::new(vec![n, m], beta_data).expect("beta shape");
    let pred = row_times_mat(&x, &beta);
    let y_hat: Vec<f64> = pred
        .iter()
        .map(|p| p + 0.5 * Distribution::<f64>::sample(&normal, rng))
        .collect();
    let offset: Vec<f64> = (0..m)
        .map(|_| Distribution::<f64>::sample(&normal, rng))
        .collect();
    let off_norm = dot_slices(&offset, &offset).sqrt().max(1e-12);
    let y_t: Vec<f64> = y_hat
        .iter()
        .zip(&offset)
        .map(|(y, o)| y + o / off_norm)
        .collect();
    LinRegInstance::new(x, beta, y_hat, y_t, alpha).expect("instance construction")
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<bool> {
    let mut idxs: Vec<usize> = (0..n).collect();
    idxs.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in &idxs[..k] {
        mask[i] = true;
    }
    mask
}

/// Runs the four proposition checks over seeded random instances.
pub fn check_propositions(n_trials: usize, seed: u64, alpha: f64) -> Result<PropositionReport> {
    if n_trials == 0 {
        return Err(Error::config("need at least one trial"));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} outside (0,1)")));
    }
    let (n, m) = (TRIAL_N, TRIAL_M);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PropositionReport {
        trials: n_trials,
        p1_mechanism_passes: 0,
        p1_effect_passes: 0,
        p2_passes: 0,
        p3_passes: 0,
        alpha,
        degenerate_alpha: alpha > 0.99,
    };
    for _ in 0..n_trials {
        let inst = random_instance(&mut rng, n, m, alpha);
        let kmin = (m + 1).min(n);
        let k = rng.random_range(kmin..=n);
        let mask = random_mask(&mut rng, n, k);
        let (values, loss_opt) = optimal_values(&inst, &mask)?;
        let indices: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let opt_trig = DiagTrigger::from_indices(n, &indices, &values)?;

        // P1 mechanism: optimizing the values strictly shrinks the residual,
        // and with it the bound 2‖e‖·‖x_tβ − y_t‖ on ‖g_bd‖.
        let untouched: Vec<f64> = indices.iter().map(|&i| inst.x[i]).collect();
        let init_trig = DiagTrigger::from_indices(n, &indices, &untouched)?;
        let loss_init = backdoor_loss(&inst, &init_trig);
        if loss_opt < loss_init {
            report.p1_mechanism_passes += 1;
        }

        // P1 effect: the optimized trigger's mixed gradient is at least as
        // aligned with the benign gradient as a random-valued trigger's.
        let rand_vals: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let rand_trig = DiagTrigger::from_indices(n, &indices, &rand_vals)?;
        let gbn = grad_benign(&inst);
        let cos_opt = cos_sim(&gbn, &mixed_gradient(&inst, &opt_trig))?;
        let cos_rand = cos_sim(&gbn, &mixed_gradient(&inst, &rand_trig))?;
        if cos_opt >= cos_rand {
            report.p1_effect_passes += 1;
        }

        // P2: the closed-form values beat 100 random draws.
        let mut best_rand = f64::INFINITY;
        for _ in 0..100 {
            let draw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let t = DiagTrigger::from_indices(n, &indices, &draw)?;
            best_rand = best_rand.min(backdoor_loss(&inst, &t));
        }
        if loss_opt <= best_rand + LOSS_TOL {
            report.p2_passes += 1;
        }

        // P3: the best k-subset with optimized values is at least as good as
        // the fixed corner trigger (first k coordinates, values 1).
        let (_, _, brute_loss) = brute_force_best_subset(&inst, P3_SUBSET_SIZE)?;
        let corner_idx: Vec<usize> = (0..P3_SUBSET_SIZE).collect();
        let corner = DiagTrigger::from_indices(n, &corner_idx, &vec![1.0; P3_SUBSET_SIZE])?;
        let fixed_loss = backdoor_loss(&inst, &corner);
        if brute_loss <= fixed_loss + LOSS_TOL {
            report.p3_passes += 1;
        }
    }
    Ok(report)
}

impl PropositionReport {
    /// `prop,trials,passes` rows for the machine-readable output.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("prop,trials,passes\n");
        for (name, passes) in [
            ("p1_mechanism", self.p1_mechanism_passes),
            ("p1_effect", self.p1_effect_passes),
            ("p2", self.p2_passes),
            ("p3", self.p3_passes),
        ] {
            s.push_str(&format!("{name},{},{passes}\n", self.trials));
        }
        s
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "proposition checks over {} trials (alpha = {})\n",
            self.trials, self.alpha
        ));
        for (name, passes) in [
            ("P1 mechanism (residual bound shrinks)", self.p1_mechanism_passes),
            ("P1 effect    (cosine vs random trigger)", self.p1_effect_passes),
            ("P2           (beats 100 random draws)", self.p2_passes),
            ("P3           (best subset <= fixed trigger)", self.p3_passes),
        ] {
            s.push_str(&format!("  {name:<44} {passes:>5}/{}\n", self.trials));
        }
        if self.degenerate_alpha {
            s.push_str(
                "  note: alpha near 1 degenerates the mixture toward the pure backdoor gradient\n",
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_instance() -> LinRegInstance {
        // n=2, m=1: x=[0.5,0.5], beta=[[1],[2]], y_hat=[1.4], y_t=[2.5].
        LinRegInstance::new(
            vec![0.5, 0.5],
            Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
            vec![1.4],
            vec![2.5],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn embed_hand_cases() {
        let x = vec![0.1, 0.2, 0.3];
        let none = DiagTrigger::from_indices(3, &[], &[]).unwrap();
        assert_eq!(embed(&x, &none), x);
        let all = DiagTrigger::from_indices(3, &[0, 1, 2], &[0.9, 0.9, 0.9]).unwrap();
        assert_eq!(embed(&x, &all), vec![0.9, 0.9, 0.9]);
        let mid = DiagTrigger::from_indices(3, &[1], &[0.9]).unwrap();
        assert_eq!(embed(&x, &mid), vec![0.1, 0.9, 0.3]);
    }

    #[test]
    fn embed_is_idempotent() {
        let x = vec![0.3, 0.6, 0.9, 0.2];
        let t = DiagTrigger::from_indices(4, &[1, 3], &[0.5, 0.7]).unwrap();
        let once = embed(&x, &t);
        assert_eq!(embed(&once, &t), once);
    }

    #[test]
    fn gradient_formulas_zero_at_zero_residual() {
        // x beta == y_hat exactly -> zero benign gradient.
        let inst = LinRegInstance::new(
            vec![0.5, 0.5],
            Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
            vec![1.5],
            vec![2.5],
            0.5,
        )
        .unwrap();
        assert!(grad_benign(&inst).data().iter().all(|v| *v == 0.0));
        // Trigger values solving x_t beta == y_t -> zero backdoor gradient.
        let t = DiagTrigger::from_indices(2, &[0, 1], &[0.5, 1.0]).unwrap();
        assert!(grad_backdoor(&inst, &t)
            .data()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 5, 3, 0.5);
            let t = DiagTrigger::from_indices(5, &[1, 3], &[0.2, 0.8]).unwrap();
            let h = 1e-6;
            let gbn = grad_benign(&inst);
            let gbd = grad_backdoor(&inst, &t);
            let gmix = mixed_gradient(&inst, &t);
            for i in 0..5 {
                for j in 0..3 {
                    let mut plus = inst.clone();
                    let mut minus = inst.clone();
                    plus.beta.row_mut(i)[j] += h;
                    minus.beta.row_mut(i)[j] -= h;
                    let bn_loss = |ins: &LinRegInstance| {
                        let p = row_times_mat(&ins.x, &ins.beta);
                        p.iter()
                            .zip(&ins.y_hat)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    };
                    let bd_loss = |ins: &LinRegInstance| backdoor_loss(ins, &t);
                    let num_bn = (bn_loss(&plus) - bn_loss(&minus)) / (2.0 * h);
                    let num_bd = (bd_loss(&plus) - bd_loss(&minus)) / (2.0 * h);
                    let num_mix = (1.0 - inst.alpha) * num_bn + inst.alpha * num_bd;
                    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
                    assert!(rel(gbn.row(i)[j], num_bn) < 1e-6);
                    assert!(rel(gbd.row(i)[j], num_bd) < 1e-6);
                    assert!(rel(gmix.row(i)[j], num_mix) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn benign_gradient_linearity_and_mask_free_reduction() {
        let inst = hand_instance();
        // Doubling the residual doubles the gradient.
        let mut wide = inst.clone();
        let pred = row_times_mat(&inst.x, &inst.beta);
        wide.y_hat = pred
            .iter()
            .zip(&inst.y_hat)
            .map(|(p, y)| p - 2.0 * (p - y))
            .collect();
        let g1 = grad_benign(&inst);
        let g2 = grad_benign(&wide);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        // Zero mask reduces grad_backdoor to grad_benign with y_t in place
        // of y_hat.
        let none = DiagTrigger::from_indices(2, &[], &[]).unwrap();
        let gbd = grad_backdoor(&inst, &none);
        let mut swapped = inst.clone();
        swapped.y_hat = inst.y_t.clone();
        swapped.y_t[0] += 1.0;
        let gbn_swapped = grad_benign(&swapped);
        for (a, b) in gbd.data().iter().zip(gbn_swapped.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_gradient_alpha_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_instance(&mut rng, 6, 2, 0.5);
        let t = DiagTrigger::from_indices(6, &[0, 2], &[0.4, 0.6]).unwrap();
        let mut near_zero = base.clone();
        near_zero.alpha = 1e-12;
        let g = mixed_gradient(&near_zero, &t);
        let gbn = grad_benign(&near_zero);
        for (a, b) in g.data().iter().zip(gbn.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut half = base.clone();
        half.alpha = 0.5;
        let g = mixed_gradient(&half, &t);
        let gbd = grad_backdoor(&half, &t);
        let gbn = grad_benign(&half);
        for ((m, a), b) in g.data().iter().zip(gbn.data()).zip(gbd.data()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn cos_sim_basic_identities() {
        let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let neg = Tensor::new(vec![2, 2], a.data().iter().map(|v| -v).collect()).unwrap();
        let twice = Tensor::new(vec![2, 2], a.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((cos_sim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cos_sim(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((cos_sim(&a, &twice).unwrap() - 1.0).abs() < 1e-15);
        let zero = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            cos_sim(&a, &zero),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn delta_d_identity_is_exact() {
        // ‖G_bn − (G_bn + s·g_bd)‖ == s·‖g_bd‖ with s = α/(1−α).
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 6, 3, 0.5);
            let t = DiagTrigger::from_indices(6, &[1, 4], &[0.3, 0.9]).unwrap();
            let s = inst.alpha / (1.0 - inst.alpha);
            let gbn = grad_benign(&inst);
            let gbd = grad_backdoor(&inst, &t);
            let shifted: Vec<f64> = gbn
                .data()
                .iter()
                .zip(gbd.data())
                .map(|(a, b)| a + s * b)
                .collect();
            let lhs: f64 = gbn
                .data()
                .iter()
                .zip(&shifted)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let rhs = s * gbd.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() < 1e-12 * rhs.max(1.0));
        }
    }

    #[test]
    fn optimal_values_hand_instance_reaches_zero() {
        let inst = hand_instance();
        let (values, loss) = optimal_values(&inst, &[true, true]).unwrap();
        // v1 + 2 v2 = 2.5 with minimum norm: v = (0.5, 1.0).
        assert!(loss < 1e-18, "loss {loss}");
        assert!((values[0] - 0.5).abs() < 1e-6);
        assert!((values[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn optimal_values_zero_mask_reports_untouched_loss() {
        let inst = hand_instance();
        let (values, loss) = optimal_values(&inst, &[false, false]).unwrap();
        assert!(values.is_empty());
        assert!((loss - (1.5f64 - 2.5).powi(2)).abs() < 1e-12);

        // y_t achievable with no trigger -> loss 0 regardless of values.
        let solved = LinRegInstance::new(
            vec![0.5, 0.5],
            Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
            vec![1.4],
            vec![1.5],
            0.5,
        )
        .unwrap();
        let (_, loss) = optimal_values(&solved, &[false, false]).unwrap();
        assert!(loss < 1e-18);
    }

    #[test]
    fn interior_solution_satisfies_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        for _ in 0..200 {
            let inst = random_instance(&mut rng, 8, 3, 0.5);
            let mask = random_mask(&mut rng, 8, 5);
            let (values, _) = optimal_values(&inst, &mask).unwrap();
            if values.iter().any(|v| *v <= 1e-9 || *v >= 1.0 - 1e-9) {
                continue;
            }
            // Interior optimum: gradient of the residual must vanish.
            let indices: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
            let trig = DiagTrigger::from_indices(8, &indices, &values).unwrap();
            let xt = embed(&inst.x, &trig);
            let pred = row_times_mat(&xt, &inst.beta);
            let r: Vec<f64> = pred.iter().zip(&inst.y_t).map(|(p, t)| p - t).collect();
            for &i in &indices {
                let g = 2.0 * dot_slices(inst.beta.row(i), &r);
                assert!(g.abs() < 1e-8, "normal equation residual {g}");
            }
            checked += 1;
        }
        assert!(checked > 10, "too few interior solutions to check");
    }

    #[test]
    fn optimal_values_never_worse_than_untouched_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let inst = random_instance(&mut rng, 8, 3, 0.5);
            let k = rng.random_range(1..=8);
            let mask = random_mask(&mut rng, 8, k);
            let (_, loss) = optimal_values(&inst, &mask).unwrap();
            let indices: Vec<usize> = (0..8).filter(|&i| mask[i]).collect();
            let untouched: Vec<f64> = indices.iter().map(|&i| inst.x[i]).collect();
            let t = DiagTrigger::from_indices(8, &indices, &untouched).unwrap();
            assert!(loss <= backdoor_loss(&inst, &t) + 1e-12);
        }
    }

    #[test]
    fn brute_force_degenerate_subsets() {
        let inst = hand_instance();
        // k = n: single subset, equals optimal_values on the full mask.
        let (mask, _, loss) = brute_force_best_subset(&inst, 2).unwrap();
        assert_eq!(mask, vec![true, true]);
        let (_, full_loss) = optimal_values(&inst, &[true, true]).unwrap();
        assert!((loss - full_loss).abs() < 1e-15);
        // k = 0: untouched backdoor loss.
        let (_, _, loss0) = brute_force_best_subset(&inst, 0).unwrap();
        assert!((loss0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard_rejects_huge_enumerations() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inst = random_instance(&mut rng, 8, 3, 0.5);
        assert!(brute_force_best_subset(&inst, 4).is_ok());
        // The guard itself, exercised via the combination counter.
        assert!(combinations_count(50, 25) > 1_000_000);
    }

    #[test]
    fn brute_force_beats_fixed_corner_on_seeded_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 8, 3, 0.5);
            let (_, _, brute) = brute_force_best_subset(&inst, 2).unwrap();
            let corner = DiagTrigger::from_indices(8, &[0, 1], &[1.0, 1.0]).unwrap();
            assert!(brute <= backdoor_loss(&inst, &corner) + 1e-9);
        }
    }

    #[test]
    fn hand_instance_proposition_checks() {
        let inst = hand_instance();
        // P1 mechanism: optimized residual 0 < untouched residual 1.
        let (_, loss) = optimal_values(&inst, &[true, true]).unwrap();
        assert!(loss < 1.0);
        // P1 effect: optimized trigger zeroes g_bd, so the mixture is
        // colinear with g_bn and the cosine is exactly 1.
        let (values, _) = optimal_values(&inst, &[true, true]).unwrap();
        let opt = DiagTrigger::from_indices(2, &[0, 1], &values).unwrap();
        let gbn = grad_benign(&inst);
        let c = cos_sim(&gbn, &mixed_gradient(&inst, &opt)).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
        // P2/P3 at the hand scale.
        let rand_t = DiagTrigger::from_indices(2, &[0, 1], &[0.9, 0.1]).unwrap();
        assert!(loss <= backdoor_loss(&inst, &rand_t));
        let (_, _, brute) = brute_force_best_subset(&inst, 2).unwrap();
        let corner = DiagTrigger::from_indices(2, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!(brute <= backdoor_loss(&inst, &corner));
    }

    #[test]
    fn check_propositions_is_deterministic_and_flags_alpha() {
        let a = check_propositions(10, 33, 0.5).unwrap();
        let b = check_propositions(10, 33, 0.5).unwrap();
        assert_eq!(a.p1_effect_passes, b.p1_effect_passes);
        assert_eq!(a.p2_passes, b.p2_passes);
        assert!(!a.degenerate_alpha);
        let c = check_propositions(5, 33, 0.999).unwrap();
        assert!(c.degenerate_alpha);
    }

    #[test]
    fn check_propositions_small_run_passes_cleanly() {
        let r = check_propositions(25, 7, 0.5).unwrap();
        assert_eq!(r.p1_mechanism_passes, 25);
        assert_eq!(r.p2_passes, 25);
        assert_eq!(r.p3_passes, 25);
        assert!(r.p1_effect_passes >= 23);
    }
}
