//! Graph pooling: cosine-similarity k-means++ over segment tokens followed by
//! mean pooling of the members of each cluster.
//!
//! Besides the random restarts, one candidate starts from a greedy
//! agglomerative grouping that repeatedly merges the pair of clusters with
//! the largest objective gain. Every candidate is refined by the same Lloyd
//! iterations and the best objective wins.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HcastError, Result};

pub const POOL_ITERATIONS: usize = 10;
/// Independent k-means++ restarts; the best objective wins.
pub const POOL_RESTARTS: usize = 4;

fn normalized(tokens: ArrayView2<f32>) -> Vec<Vec<f64>> {
    tokens
        .rows()
        .into_iter()
        .map(|row| {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|&v| v as f64 / norm).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Spherical k-means objective: for each cluster, the norm of the sum of its
/// unit-normalized members (equivalently the summed cosine similarity of the
/// members to the cluster's mean direction).
pub fn cosine_objective(tokens: ArrayView2<f32>, assignment: &[usize], clusters: usize) -> f64 {
    cluster_objective(&normalized(tokens), assignment, clusters)
}

fn cluster_objective(units: &[Vec<f64>], assignment: &[usize], clusters: usize) -> f64 {
    let dim = units.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; clusters];
    for (u, &c) in units.iter().zip(assignment) {
        sums[c].iter_mut().zip(u).for_each(|(s, x)| *s += x);
    }
    sums.iter().map(|s| dot(s, s).sqrt()).sum()
}

fn seed_centers(units: &[Vec<f64>], target: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = units.len();
    let mut centers = vec![units[rng.random_range(0..n)].clone()];
    let mut chosen = vec![false; n];
    while centers.len() < target {
        let d2: Vec<f64> = units
            .iter()
            .map(|u| {
                let best = centers.iter().map(|c| dot(u, c)).fold(f64::NEG_INFINITY, f64::max);
                (1.0 - best).max(0.0).powi(2)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // All points coincide with a center; take any unused one.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centers.push(units[pick].clone());
    }
    centers
}

fn assign(units: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    units
        .iter()
        .map(|u| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let s = dot(u, center);
                if s > best_s {
                    best_s = s;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Moves the least-typical member of the largest cluster into every empty
/// cluster.
fn repair_empty(units: &[Vec<f64>], assignment: &mut [usize], centers: &[Vec<f64>]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else { return };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let outlier = (0..units.len())
            .filter(|&i| assignment[i] == largest)
            .min_by(|&a, &b| {
                dot(&units[a], &centers[largest])
                    .partial_cmp(&dot(&units[b], &centers[largest]))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        assignment[outlier] = empty;
    }
}

fn update_centers(units: &[Vec<f64>], assignment: &[usize], centers: &mut [Vec<f64>]) {
    let dim = units[0].len();
    for (c, center) in centers.iter_mut().enumerate() {
        let mut sum = vec![0.0; dim];
        for (u, _) in units.iter().zip(assignment).filter(|(_, &a)| a == c) {
            sum.iter_mut().zip(u).for_each(|(s, x)| *s += x);
        }
        if normalize(&mut sum) {
            *center = sum;
        }
    }
}

/// Relabels clusters in order of their first member.
fn canonical(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    assignment
        .iter()
        .map(|&c| {
            if map[c] == usize::MAX {
                map[c] = next;
                next += 1;
            }
            map[c]
        })
        .collect()
}

/// Greedy bottom-up grouping: start from singletons and merge the pair whose
/// union raises the objective most until `target` clusters remain.
fn agglomerate(units: &[Vec<f64>], target: usize) -> Vec<usize> {
    let n = units.len();
    let mut gram: Vec<Vec<f64>> = units.iter().map(|a| units.iter().map(|b| dot(a, b)).collect()).collect();
    let mut alive = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - target {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in (0..n).filter(|&a| alive[a]) {
            let na = gram[a][a].max(0.0).sqrt();
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let joint = (gram[a][a] + gram[b][b] + 2.0 * gram[a][b]).max(0.0).sqrt();
                let gain = joint - na - gram[b][b].max(0.0).sqrt();
                if gain > best.0 {
                    best = (gain, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let self_term = gram[a][a] + gram[b][b] + 2.0 * gram[a][b];
        for c in 0..n {
            let v = gram[b][c];
            gram[a][c] += v;
            gram[c][a] = gram[a][c];
        }
        gram[a][a] = self_term;
        alive[b] = false;
        owner.iter_mut().filter(|o| **o == b).for_each(|o| *o = a);
    }
    let ids: Vec<usize> = (0..n).filter(|&c| alive[c]).collect();
    owner.iter().map(|o| ids.binary_search(o).unwrap()).collect()
}

fn centers_of(units: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut centers = vec![vec![0.0; units[0].len()]; k];
    update_centers(units, assignment, &mut centers);
    centers
}

fn refine(units: &[Vec<f64>], mut assignment: Vec<usize>, mut centers: Vec<Vec<f64>>) -> Vec<usize> {
    for _ in 0..POOL_ITERATIONS {
        update_centers(units, &assignment, &mut centers);
        let mut next = assign(units, &centers);
        repair_empty(units, &mut next, &centers);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    assignment
}

/// Clusters `tokens` (rows) into exactly `target` groups by cosine
/// similarity. The result is total, surjective, and labeled in order of
/// first member.
pub fn cluster_tokens(tokens: ArrayView2<f32>, target: usize, seed: u64) -> Result<Vec<usize>> {
    let k = tokens.nrows();
    if target < 1 {
        return Err(HcastError::Parameter("pooling target must be >= 1".into()));
    }
    if target >= k {
        return Err(HcastError::Parameter(format!("pooling target {target} must be below the token count {k}")));
    }
    let units = normalized(tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let greedy = agglomerate(&units, target);
    let greedy_centers = centers_of(&units, &greedy, target);
    let mut candidates = vec![greedy.clone(), refine(&units, greedy, greedy_centers)];
    for _ in 0..POOL_RESTARTS {
        let centers = seed_centers(&units, target, &mut rng);
        let mut assignment = assign(&units, &centers);
        repair_empty(&units, &mut assignment, &centers);
        candidates.push(refine(&units, assignment, centers));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for assignment in candidates {
        let score = cluster_objective(&units, &assignment, target);
        if best.as_ref().is_none_or(|(s, _)| score > *s + 1e-12) {
            best = Some((score, assignment));
        }
    }
    Ok(canonical(&best.unwrap().1, target))
}

/// Row-averaging matrix: row `c` holds `1/|c|` at each member of cluster `c`.
pub fn pooling_matrix(assignment: &[usize], target: usize) -> Array2<f32> {
    let mut counts = vec![0usize; target];
    assignment.iter().for_each(|&c| counts[c] += 1);
    let mut p = Array2::<f32>::zeros((target, assignment.len()));
    for (i, &c) in assignment.iter().enumerate() {
        p[[c, i]] = 1.0 / counts[c] as f32;
    }
    p
}

/// Pools `tokens` down to `target` rows; returns the pooled tokens and the
/// source-to-target assignment.
pub fn graph_pool(tokens: ArrayView2<f32>, target: usize, seed: u64) -> Result<(Array2<f32>, Vec<usize>)> {
    let assignment = cluster_tokens(tokens, target, seed)?;
    let pooled = pooling_matrix(&assignment, target).dot(&tokens);
    Ok((pooled, assignment))
}
