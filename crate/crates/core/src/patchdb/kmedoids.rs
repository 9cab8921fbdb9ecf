//! Deterministic k-medoids: PAM greedy BUILD followed by SWAP rounds.
//! Bins small enough to enumerate (at most `EXACT_BUDGET` medoid sets) are
//! solved exactly instead.
//!
//! BUILD starts from the point of smallest total distance and repeatedly adds
//! the point that lowers the total cost most. Each SWAP round evaluates every
//! (medoid, non-medoid) exchange from nearest/second-nearest caches and applies
//! the best one while it lowers the cost. Ties always go to the lowest index.

use rayon::prelude::*;

use super::features::{distance_unchecked, Descriptor};

pub const MAX_ITERATIONS: usize = 50;
pub const EXACT_BUDGET: u64 = 4096;

/// Runs k-medoids over `n` points under `dist` and returns the sorted medoid
/// indices. `dist(i, i)` is never queried; self-distance is taken as 0.
pub fn kmedoids<F>(n: usize, k: usize, dist: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if k >= n {
        return (0..n).collect();
    }
    let d = |i: usize, j: usize| if i == j { 0.0 } else { dist(i, j) };
    if binomial(n, k) <= EXACT_BUDGET {
        exhaustive(n, k, d)
    } else {
        pam(n, k, d)
    }
}

fn pam(n: usize, k: usize, d: impl Fn(usize, usize) -> f64 + Sync) -> Vec<usize> {

    let totals: Vec<f64> = (0..n).into_par_iter().map(|j| (0..n).map(|i| d(i, j)).sum()).collect();
    let first = argmin(totals.iter().copied()).expect("n > 0");
    let mut medoids = vec![first];
    let mut near: Vec<f64> = (0..n).map(|o| d(o, first)).collect();
    while medoids.len() < k {
        let gains: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|c| {
                if medoids.contains(&c) {
                    f64::NEG_INFINITY
                } else {
                    (0..n).map(|o| (near[o] - d(o, c)).max(0.0)).sum()
                }
            })
            .collect();
        let c = argmin(gains.iter().map(|g| -g)).expect("n > k");
        medoids.push(c);
        for (o, v) in near.iter_mut().enumerate() {
            *v = v.min(d(o, c));
        }
    }

    for _ in 0..MAX_ITERATIONS {
        let cache = Nearest::new(n, &medoids, &d);
        let scale = cache.d1.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        // (delta, candidate, slot) of the best exchange for each candidate
        let best = (0..n)
            .into_par_iter()
            .filter(|c| !medoids.contains(c))
            .map(|c| {
                let mut shared = 0.0;
                let mut per_slot = vec![0.0; medoids.len()];
                for o in 0..n {
                    let doc = d(o, c);
                    let a = (doc - cache.d1[o]).min(0.0);
                    let b = doc.min(cache.d2[o]) - cache.d1[o];
                    shared += a;
                    per_slot[cache.slot[o]] += b - a;
                }
                let slot = argmin(per_slot.iter().copied()).expect("k > 0");
                (shared + per_slot[slot], c, slot)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(None, |acc: Option<(f64, usize, usize)>, cand| match acc {
                Some(b) if b.0 <= cand.0 => Some(b),
                _ => Some(cand),
            });
        match best {
            Some((delta, c, slot)) if delta < -1e-12 * scale => medoids[slot] = c,
            _ => break,
        }
    }
    medoids.sort_unstable();
    medoids
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k) as u64;
    let mut c = 1u64;
    for i in 0..k {
        c = c.saturating_mul(n as u64 - i) / (i + 1);
    }
    c
}

/// Cheapest medoid set by enumeration; the lexicographically first wins ties.
fn exhaustive(n: usize, k: usize, d: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let matrix: Vec<f64> = (0..n * n).map(|ij| d(ij / n, ij % n)).collect();
    let cost = |set: &[usize]| -> f64 {
        (0..n).map(|o| set.iter().map(|&m| matrix[o * n + m]).fold(f64::INFINITY, f64::min)).sum()
    };
    let mut set: Vec<usize> = (0..k).collect();
    let mut best = (cost(&set), set.clone());
    while let Some(i) = (0..k).rev().find(|&i| set[i] < n - k + i) {
        set[i] += 1;
        for j in i + 1..k {
            set[j] = set[j - 1] + 1;
        }
        let c = cost(&set);
        if c < best.0 {
            best = (c, set.clone());
        }
    }
    best.1
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Nearest and second-nearest medoid distance of every point.
struct Nearest {
    slot: Vec<usize>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Nearest {
    fn new(n: usize, medoids: &[usize], d: &(impl Fn(usize, usize) -> f64 + Sync)) -> Self {
        let rows: Vec<(usize, f64, f64)> = (0..n)
            .into_par_iter()
            .map(|o| {
                let (mut slot, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
                for (s, &m) in medoids.iter().enumerate() {
                    let v = d(o, m);
                    if v < d1 {
                        (slot, d2, d1) = (s, d1, v);
                    } else if v < d2 {
                        d2 = v;
                    }
                }
                (slot, d1, d2)
            })
            .collect();
        Nearest {
            slot: rows.iter().map(|r| r.0).collect(),
            d1: rows.iter().map(|r| r.1).collect(),
            d2: rows.iter().map(|r| r.2).collect(),
        }
    }
}

/// Sum over points of the distance to the nearest of `medoids`.
pub fn total_cost(n: usize, medoids: &[usize], dist: impl Fn(usize, usize) -> f64) -> f64 {
    (0..n)
        .map(|i| {
            medoids
                .iter()
                .map(|&m| if m == i { 0.0 } else { dist(i, m) })
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// k-medoids over descriptors using the cosine descriptor distance.
pub fn cluster_kmedoids(descriptors: &[Descriptor], k: usize) -> Vec<usize> {
    kmedoids(descriptors.len(), k, |i, j| distance_unchecked(&descriptors[i], &descriptors[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn best_pair_cost(points: &[Vec<f64>]) -> f64 {
        let d = |i: usize, j: usize| euclid(&points[i], &points[j]);
        let mut best = f64::INFINITY;
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                best = best.min(total_cost(points.len(), &[a, b], d));
            }
        }
        best
    }

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn scalar_median() {
        let pts = [0.0f64, 1.0, 2.0];
        assert_eq!(kmedoids(3, 1, |i, j| (pts[i] - pts[j]).abs()), vec![1]);
    }

    #[test]
    fn k_at_least_n_returns_everything() {
        assert_eq!(kmedoids(4, 4, |_, _| 1.0), vec![0, 1, 2, 3]);
        assert_eq!(kmedoids(3, 7, |_, _| 1.0), vec![0, 1, 2]);
        assert!(kmedoids(0, 2, |_, _| 1.0).is_empty());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(kmedoids(5, 1, |_, _| 1.0), vec![0]);
    }

    #[test]
    fn twelve_random_points_near_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let meds = kmedoids(12, 2, |i, j| euclid(&pts[i], &pts[j]));
        let cost = total_cost(12, &meds, |i, j| euclid(&pts[i], &pts[j]));
        assert!(cost <= 1.1 * best_pair_cost(&pts), "{cost} vs {}", best_pair_cost(&pts));
    }

    #[test]
    fn single_medoid_minimizes_distance_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(2..64);
            let descs: Vec<Descriptor> = (0..n)
                .map(|_| Descriptor::from_raw(&(0..6).map(|_| rng.random::<f64>() - 0.3).collect::<Vec<_>>()))
                .collect();
            let m = cluster_kmedoids(&descs, 1);
            let cost = |c: usize| (0..n).map(|o| if o == c { 0.0 } else { distance_unchecked(&descs[c], &descs[o]) }).sum::<f64>();
            let best = (0..n).map(cost).fold(f64::INFINITY, f64::min);
            assert_eq!(cost(m[0]), best);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let run = || kmedoids(200, 5, |i, j| (pts[i] - pts[j]).abs());
        assert_eq!(run(), run());
    }

    fn exhaustive_best(n: usize, k: usize, d: impl Fn(usize, usize) -> f64 + Copy) -> f64 {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| total_cost(n, &(0..n).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>(), d))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn binomial_small_values() {
        assert_eq!(binomial(12, 4), 495);
        assert_eq!(binomial(10, 0), 1);
        assert_eq!(binomial(52, 5), 2_598_960);
    }

    proptest::proptest! {
        #[test]
        fn pam_result_admits_no_improving_swap(pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..30), k in 1usize..5) {
            let n = pts.len();
            let k = k.min(n - 1);
            let d = |i: usize, j: usize| if i == j { 0.0 } else { ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt() };
            let meds = pam(n, k, d);
            let cost = total_cost(n, &meds, d);
            for slot in 0..k {
                for c in (0..n).filter(|c| !meds.contains(c)) {
                    let mut swapped = meds.clone();
                    swapped[slot] = c;
                    proptest::prop_assert!(total_cost(n, &swapped, d) >= cost - 1e-9);
                }
            }
        }

        #[test]
        fn small_instances_near_optimal(pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..11), k in 1usize..4) {
            let n = pts.len();
            let d = |i: usize, j: usize| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            let got = total_cost(n, &kmedoids(n, k, d), d);
            proptest::prop_assert!(got <= 1.1 * exhaustive_best(n, k.min(n), d) + 1e-12);
        }
    }
}
