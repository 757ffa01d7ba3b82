//! Runtime oracle battery: replays each rule's contract checks against
//! independent brute-force implementations, for the `defense-bench`
//! subcommand and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// One named check and whether it passed.
#[derive(Debug, Clone)]
pub struct BenchCheck {
    pub name: String,
    pub passed: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> UpdateMatrix {
    UpdateMatrix::new(
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        (0..n).collect(),
    )
    .unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Sort-based element-wise median, independent of `agg_median`.
fn median_oracle(u: &UpdateMatrix) -> Vec<f64> {
    (0..u.dim())
        .map(|j| {
            let mut col: Vec<f64> = u.rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

fn trimmed_oracle(u: &UpdateMatrix, ratio: f64) -> Vec<f64> {
    let n = u.n_clients();
    let k = (ratio * n as f64).floor() as usize;
    (0..u.dim())
        .map(|j| {
            let mut col: Vec<f64> = u.rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let kept = &col[k..n - k];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn krum_score_oracle(u: &UpdateMatrix, f: usize) -> Vec<f64> {
    let n = u.n_clients();
    (0..n)
        .map(|i| {
            let mut d2: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    u.rows[i]
                        .iter()
                        .zip(&u.rows[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            d2.sort_by(f64::total_cmp);
            d2[..n - f - 2].iter().sum()
        })
        .collect()
}

/// Runs the oracle battery for one rule. `instances` controls how many
/// random matrices the oracle comparisons cover.
pub fn run_battery(kind: DefenseKind, instances: usize, seed: u64) -> Result<Vec<BenchCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool| {
        checks.push(BenchCheck {
            name: name.to_string(),
            passed,
        });
    };

    match kind {
        DefenseKind::FedAvg => {
            let u = UpdateMatrix::new(vec![vec![1.0, 3.0], vec![3.0, 5.0]], vec![0, 1])?;
            push(
                "hand case {[1,3],[3,5]} -> [2,4]",
                agg_fedavg(&u)?.global_update == vec![2.0, 4.0],
            );
            let mut ok = true;
            for _ in 0..instances {
                let n = rng.random_range(2usize..10);
                let d = rng.random_range(1usize..20);
                let u = random_matrix(&mut rng, n, d);
                let got = agg_fedavg(&u)?.global_update;
                for j in 0..u.dim() {
                    let s: f64 = u.rows.iter().map(|r| r[j]).sum();
                    ok &= close(got[j], s / n as f64, 1e-12);
                }
            }
            push("matches summation oracle", ok);
        }
        DefenseKind::Median => {
            let odd = UpdateMatrix::new(vec![vec![1.0], vec![2.0], vec![100.0]], vec![0, 1, 2])?;
            push("odd median", agg_median(&odd)?.global_update == vec![2.0]);
            let even = UpdateMatrix::new(vec![vec![1.0], vec![3.0]], vec![0, 1])?;
            push("even median convention", agg_median(&even)?.global_update == vec![2.0]);
            let mut ok = true;
            for _ in 0..instances {
                let n = rng.random_range(2usize..=10);
                let d = rng.random_range(1usize..=20);
                let u = random_matrix(&mut rng, n, d);
                ok &= agg_median(&u)?.global_update == median_oracle(&u);
            }
            push("matches full-sort oracle", ok);
        }
        DefenseKind::TrimmedMean => {
            let u = UpdateMatrix::new((1..=5).map(|v| vec![v as f64]).collect(), (0..5).collect())?;
            push(
                "n=5 ratio 0.4 keeps the middle value",
                agg_trimmed_mean(&u, 0.4)?.global_update == vec![3.0],
            );
            let mut ok = true;
            for _ in 0..instances {
                let n = rng.random_range(3usize..=10);
                let d = rng.random_range(1usize..=20);
                let u = random_matrix(&mut rng, n, d);
                let got = agg_trimmed_mean(&u, 0.4)?.global_update;
                let expect = trimmed_oracle(&u, 0.4);
                for j in 0..u.dim() {
                    ok &= close(got[j], expect[j], 1e-12);
                }
            }
            push("matches sort-then-slice oracle", ok);
        }
        DefenseKind::MultiKrum => {
            let mut ok = true;
            for _ in 0..instances {
                let n = rng.random_range(5usize..=10);
                let f = rng.random_range(0usize..=(n - 3).min(2));
                let d = rng.random_range(1usize..=20);
                let u = random_matrix(&mut rng, n, d);
                let got = multi_krum_scores(&u, f)?;
                let expect = krum_score_oracle(&u, f);
                for (g, e) in got.iter().zip(&expect) {
                    ok &= close(*g, *e, 1e-10);
                }
            }
            push("scores match pairwise oracle", ok);
            let u = random_matrix(&mut rng, 6, 5);
            let krum = agg_multi_krum(&u, 0, 6)?.global_update;
            let avg = agg_fedavg(&u)?.global_update;
            push(
                "f=0, m=n equals fedavg",
                krum.iter().zip(&avg).all(|(a, b)| close(*a, *b, 1e-12)),
            );
        }
        DefenseKind::RobustLr => {
            let u = UpdateMatrix::new(
                vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, -1.0]],
                vec![0, 1, 2],
            )?;
            let r = agg_robustlr(&u, 2, 1.0)?;
            push("unanimous coordinate keeps +lr", close(r.global_update[0], 2.0, 1e-15));
            push(
                "minority coordinate flips",
                close(r.global_update[1], -1.0 / 3.0, 1e-15),
            );
            let mut ok = true;
            for _ in 0..instances {
                let u = random_matrix(&mut rng, 5, 6);
                let flipped = UpdateMatrix::new(
                    u.rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
                    u.client_ids.clone(),
                )?;
                let a = agg_robustlr(&u, 3, 1.0)?.global_update;
                let b = agg_robustlr(&flipped, 3, 1.0)?.global_update;
                ok &= a.iter().zip(&b).all(|(x, y)| close(*x, -y, 1e-12));
            }
            push("sign flip symmetry", ok);
        }
        DefenseKind::Rfa => {
            let u = UpdateMatrix::new(vec![vec![1.0], vec![2.0], vec![100.0]], vec![0, 1, 2])?;
            let r = agg_rfa(&u, 200, 1e-9, 1e-9)?;
            push(
                "1-D geometric median equals scalar median",
                close(r.global_update[0], 2.0, 1e-3),
            );
            let mut ok = true;
            for _ in 0..instances {
                let n = rng.random_range(2usize..=8);
                let d = rng.random_range(1usize..=10);
                let u = random_matrix(&mut rng, n, d);
                let (_, trace) = rfa_with_trace(&u, 100, 1e-9, 1e-6)?;
                ok &= trace.windows(2).all(|w| w[1] <= w[0] + 1e-12);
            }
            push("Weiszfeld objective non-increasing", ok);
        }
        DefenseKind::Flair => {
            let aligned = vec![1.0, 1.0, -1.0, 1.0];
            let mut rows = vec![aligned.clone(); 4];
            rows.push(aligned.iter().map(|v| -v).collect());
            let u = UpdateMatrix::new(rows, (0..5).collect())?;
            let mut state = DefenseState {
                flair_prev_direction: aligned.iter().map(|v: &f64| v.signum()).collect(),
                ..Default::default()
            };
            let r = agg_flair(&u, 1, &mut state)?;
            push("sign-inverted client excluded", r.excluded == vec![4]);
            let u = random_matrix(&mut rng, 6, 5);
            let mut state = DefenseState::default();
            let a = agg_flair(&u, 0, &mut state)?.global_update;
            let b = agg_fedavg(&u)?.global_update;
            push(
                "zero exclusions equals fedavg",
                a.iter().zip(&b).all(|(x, y)| close(*x, *y, 1e-12)),
            );
        }
        DefenseKind::FlCert => {
            let u = random_matrix(&mut rng, 9, 4);
            let a = agg_flcert(&u, 4, 7)?;
            let b = agg_flcert(&u, 4, 7)?;
            push(
                "grouping is seed-deterministic",
                a.iter()
                    .zip(&b)
                    .all(|(x, y)| x.global_update == y.global_update),
            );
            let mut seen = vec![0usize; 9];
            for g in &a {
                for (i, w) in g.weights.iter().enumerate() {
                    if *w > 0.0 {
                        seen[i] += 1;
                    }
                }
            }
            push("groups partition the clients", seen.iter().all(|&c| c == 1));
        }
        DefenseKind::Flame => {
            let u = UpdateMatrix::new(vec![vec![0.25, -0.75]; 5], (0..5).collect())?;
            let r = agg_flame(&u, 0.0, 0)?;
            push(
                "identical updates pass through",
                r.global_update
                    .iter()
                    .zip(&[0.25, -0.75])
                    .all(|(a, b)| close(*a, *b, 1e-12)),
            );
            let base: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for _ in 0..9 {
                rows.push(
                    base.iter()
                        .map(|v| v + rng.random_range(-0.01..0.01))
                        .collect(),
                );
            }
            rows.push(base.iter().map(|v| v * 100.0).collect());
            let honest = norm(&rows[0]);
            let u = UpdateMatrix::new(rows, (0..10).collect())?;
            let r = agg_flame(&u, 0.0, 0)?;
            push(
                "scaled outlier contained",
                norm(&r.global_update) <= 1.5 * honest,
            );
        }
        DefenseKind::FoolsGold => {
            let mut state = DefenseState::default();
            let mut last = None;
            for _ in 0..5 {
                let twin: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut rows = vec![twin.clone(), twin];
                for _ in 0..3 {
                    rows.push((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
                }
                let u = UpdateMatrix::new(rows, (0..5).collect())?;
                last = Some(agg_foolsgold(&u, &mut state, None)?);
            }
            let r = last.unwrap();
            push(
                "persistent twins zeroed",
                r.weights[0] < 0.01 && r.weights[1] < 0.01,
            );
            let mut state = DefenseState::default();
            let u = UpdateMatrix::new(
                vec![
                    vec![1.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 1.0],
                ],
                vec![0, 1, 2],
            )?;
            let r = agg_foolsgold(&u, &mut state, None)?;
            let avg = agg_fedavg(&u)?.global_update;
            push(
                "orthogonal histories reduce to fedavg",
                r.global_update
                    .iter()
                    .zip(&avg)
                    .all(|(a, b)| close(*a, *b, 1e-6)),
            );
        }
    }
    Ok(checks)
}
