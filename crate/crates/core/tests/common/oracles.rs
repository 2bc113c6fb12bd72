use proptest::collection::vec;
use proptest::prelude::*;

use fmital::localizer::{dbscan, score_matrix, top_k_pairs, ClusterParams};
use fmital::numerics::Rng;
use fmital::supervision::{generate_label, LabelConfig};

use super::{all, ensure, lift, property, runner, Check};

fn brute_top_k(s: &[f64], e: &[f64], t: usize, k: usize) -> Vec<(usize, usize, f64)> {
    let mut cells = Vec::new();
    for i in 0..t {
        for j in i + 1..t {
            cells.push((i, j, s[i] * e[j]));
        }
    }
    cells.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    cells.truncate(k);
    cells
}

/// Scores drawn from a small set so ties are common.
fn scores(t: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(prop_oneof![(0u8..6).prop_map(|v| v as f64 / 8.0), 0.0..1.0f64], t)
}

pub fn top_k() -> Check {
    let strat = (1usize..=32).prop_flat_map(|t| (Just(t), scores(t), scores(t), 1usize..600));
    let mut r = runner(100);
    r.run(&strat, |(t, s, e, k)| {
        let m = lift(score_matrix(&s, &e, t))?;
        let got = top_k_pairs(&m, k);
        let want = brute_top_k(&s, &e, t, k);
        ensure(got == want, || format!("t={t} k={k}: {got:?} vs {want:?}"))
    })
    .map(|()| "top_k_pairs matches enumeration: 100 cases".to_string())
    .map_err(|e| format!("top_k_pairs: {e}"))
}

/// Reference clustering: union-find over core points within `eps`; a border
/// point joins the component of its lowest-indexed core neighbour.
pub fn reference_dbscan(points: &[(f64, f64)], eps: f64, min_samples: usize) -> Vec<i64> {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
        dx * dx + dy * dy <= eps * eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..i {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let root: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if core[i] {
                Some(find(&mut parent, i))
            } else {
                (0..n).find(|&j| core[j] && near(i, j)).map(|j| find(&mut parent, j))
            }
        })
        .collect();
    canonical(&root)
}

/// Relabels groups 0, 1, ... by first appearance; `None` becomes -1.
fn canonical<T: PartialEq + Copy>(groups: &[Option<T>]) -> Vec<i64> {
    let mut seen: Vec<T> = Vec::new();
    groups
        .iter()
        .map(|g| match g {
            None => -1,
            Some(g) => match seen.iter().position(|s| s == g) {
                Some(k) => k as i64,
                None => {
                    seen.push(*g);
                    seen.len() as i64 - 1
                }
            },
        })
        .collect()
}

fn point_sets() -> impl Strategy<Value = Vec<(f64, f64)>> {
    let coord = prop_oneof![0.0..20.0f64, (0u8..20).prop_map(|v| v as f64)];
    vec((coord.clone(), coord), 0..=50)
}

pub fn dbscan_partition() -> Check {
    let strat = (point_sets(), 0.3..5.0f64, 1usize..6);
    let mut r = runner(100);
    let fixture = dbscan(&[(1.0, 5.0), (1.5, 5.2), (10.0, 20.0)], &ClusterParams { eps: 3.0, min_samples: 2 });
    if fixture != [0, 0, -1] {
        return Err(format!("dbscan fixture: {fixture:?}"));
    }
    r.run(&strat, |(points, eps, min_samples)| {
        let got = dbscan(&points, &ClusterParams { eps, min_samples });
        let as_groups: Vec<Option<i64>> = got.iter().map(|&l| (l >= 0).then_some(l)).collect();
        let want = reference_dbscan(&points, eps, min_samples);
        ensure(canonical(&as_groups) == want, || format!("{got:?} vs {want:?}"))
    })
    .map(|()| "dbscan matches union-find reference: 100 point sets".to_string())
    .map_err(|e| format!("dbscan: {e}"))
}

fn closed_form(len: usize, boundaries: &[(usize, usize)], sigma_pct: f64, fixed: Option<f64>) -> Vec<f64> {
    let g: Vec<f64> = (0..len)
        .map(|x| {
            boundaries
                .iter()
                .map(|&(s, e)| {
                    let mu = (s + e) as f64 / 2.0;
                    let sigma = fixed.unwrap_or((e - s + 1) as f64 * sigma_pct);
                    (-((x as f64 - mu) / sigma).powi(2) / 2.0).exp()
                })
                .sum()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

pub fn label_closed_form() -> Check {
    let strat = (1usize..200)
        .prop_flat_map(|len| {
            (
                Just(len),
                vec((0..len, 0..len), 1..5),
                0.05..0.5f64,
                prop::option::of(0.5..6.0f64),
                any::<u64>(),
            )
        })
        .prop_map(|(len, b, pct, fixed, seed)| {
            let b: Vec<(usize, usize)> = b.into_iter().map(|(x, y)| (x.min(y), x.max(y))).collect();
            (len, b, pct, fixed, seed)
        });
    let worked = {
        let cfg = LabelConfig {
            noise_level: 0.0,
            smooth_window: 1,
            ..LabelConfig::default()
        };
        let p = generate_label(10, &[(2, 6)], &cfg, &mut Rng::new(0)).map_err(|e| e.to_string())?;
        let want = closed_form(10, &[(2, 6)], 0.1, None);
        let ratio = p[3] / p[4];
        p.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9)
            && (0..10).all(|i| p[i] <= p[4])
            && (ratio - (-2.0f64).exp()).abs() < 1e-12
            && p[3] == p[5]
    };
    if !worked {
        return Err("label worked example (L=10, segment 2..6) disagrees".into());
    }
    property("label equals the closed-form mixture", strat, |(len, b, pct, fixed, seed)| {
        let cfg = LabelConfig {
            sigma_pct: pct,
            noise_level: 0.0,
            smooth_window: 1,
            fixed_sigma: fixed,
            ..LabelConfig::default()
        };
        let p = lift(generate_label(len, &b, &cfg, &mut Rng::new(seed)))?;
        let want = closed_form(len, &b, pct, fixed);
        let err = p.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err < 1e-9, || format!("max error {err:e}"))
    })
}

pub fn suite() -> Check {
    all(vec![top_k(), dbscan_partition(), label_closed_form()])
}
