//! Lloyd's algorithm with farthest-first seeding.

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{embeddings_f64, ClusterError, SoftAssignment};
use crate::ssl::EmbeddingMatrix;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub assignment: SoftAssignment,
    pub centers: Array2<f64>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &Array2<f64>, centers: &Array2<f64>) -> Vec<(usize, f64)> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.rows().into_iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Seeds: one uniformly drawn point, then repeatedly the point farthest from
/// its nearest seed (lowest index on ties).
fn greedy_spread(x: &Array2<f64>, c: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < c {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &d) in dist.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(best.0)));
        }
    }
    x.select(Axis(0), &chosen)
}

pub fn kmeans(emb: &EmbeddingMatrix, c: usize, seed: u64) -> Result<KMeansResult, ClusterError> {
    let n = emb.len();
    if c > n {
        return Err(ClusterError::CGreaterThanN { c, n });
    }
    if c == 0 {
        return Err(ClusterError::InvalidConfig("C must be positive".into()));
    }
    let (labels, centers, inertia) = lloyd(&embeddings_f64(emb), c, seed);
    let assignment = SoftAssignment::one_hot(emb.ids.clone(), &labels, c)?;
    Ok(KMeansResult { assignment, centers, inertia })
}

/// Hard labels, centres and per-step inertia; requires `1 <= c <= x.nrows()`.
pub(crate) fn lloyd(x: &Array2<f64>, c: usize, seed: u64) -> (Vec<usize>, Array2<f64>, Vec<f64>) {
    refine(x, greedy_spread(x, c, seed))
}

/// D²-weighted seeding.
fn plus_plus(x: &Array2<f64>, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            dist.iter().position(|&d| {
                t -= d;
                t < 0.0
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select(Axis(0), &chosen)
}

/// Best of `restarts` k-means++ runs by final inertia.
pub(crate) fn lloyd_restarts(x: &Array2<f64>, c: usize, seed: u64, restarts: usize) -> (Vec<usize>, Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Array2<f64>, Vec<f64>)> = None;
    for _ in 0..restarts.max(1) {
        let run = refine(x, plus_plus(x, c, &mut rng));
        let better = match &best {
            Some(b) => run.2.last() < b.2.last(),
            None => true,
        };
        if better {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn refine(x: &Array2<f64>, mut centers: Array2<f64>) -> (Vec<usize>, Array2<f64>, Vec<f64>) {
    let c = centers.nrows();
    let mut labels: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let near = nearest(x, &centers);
        let new_labels: Vec<usize> = near.iter().map(|p| p.0).collect();
        inertia.push(near.iter().map(|p| p.1).sum());
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                centers.row_mut(k).assign(&(&sums.row(k) / count as f64));
            }
        }
    }
    (labels, centers, inertia)
}

impl KMeansResult {
    /// Nearest-centre one-hot assignment for new points.
    pub fn predict(&self, emb: &EmbeddingMatrix) -> Result<SoftAssignment, ClusterError> {
        if emb.dim() != self.centers.ncols() {
            return Err(ClusterError::DimensionMismatch("embedding width differs from centres".into()));
        }
        let labels: Vec<usize> = nearest(&embeddings_f64(emb), &self.centers).into_iter().map(|p| p.0).collect();
        SoftAssignment::one_hot(emb.ids.clone(), &labels, self.centers.nrows())
    }
}

pub fn kmeans_baseline(emb: &EmbeddingMatrix, c: usize, seed: u64) -> Result<SoftAssignment, ClusterError> {
    kmeans(emb, c, seed).map(|r| r.assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(v: Array2<f32>) -> EmbeddingMatrix {
        let ids = (0..v.nrows()).map(|i| format!("k{i}")).collect();
        EmbeddingMatrix::new(ids, v, false).unwrap()
    }

    #[test]
    fn one_dimensional_example() {
        let e = emb(array![[0.0], [0.1], [10.0], [10.1]]);
        for seed in 0..4 {
            let l = kmeans_baseline(&e, 2, seed).unwrap().hard_labels;
            assert_eq!(l[0], l[1]);
            assert_eq!(l[2], l[3]);
            assert_ne!(l[0], l[2]);
        }
    }

    #[test]
    fn c_one_and_c_n() {
        let e = emb(array![[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]]);
        assert_eq!(kmeans_baseline(&e, 1, 0).unwrap().hard_labels, vec![0, 0, 0]);
        let r = kmeans(&e, 3, 0).unwrap();
        let mut l = r.assignment.hard_labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(*r.inertia.last().unwrap(), 0.0);
        assert!(matches!(kmeans(&e, 4, 0), Err(ClusterError::CGreaterThanN { c: 4, n: 3 })));
    }

    #[test]
    fn predict_uses_nearest_centre() {
        let e = emb(array![[0.0], [0.2], [9.0], [9.2]]);
        let r = kmeans(&e, 2, 1).unwrap();
        let p = r.predict(&emb(array![[0.1], [8.0]])).unwrap();
        assert_eq!(p.hard_labels[0], r.assignment.hard_labels[0]);
        assert_eq!(p.hard_labels[1], r.assignment.hard_labels[2]);
    }

    #[test]
    fn restarts_find_the_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((90, 2), |(i, j)| (i / 30 * 10 + j) as f64 + rng.random_range(-0.5..0.5));
        let (labels, _, inertia) = lloyd_restarts(&x, 3, 0, 5);
        for g in 0..3 {
            assert!(labels[g * 30..(g + 1) * 30].iter().all(|&l| l == labels[g * 30]));
        }
        assert!(*inertia.last().unwrap() < 90.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]
        #[test]
        fn inertia_never_increases(seed in 0u64..5000, n in 3usize..60, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((n, 3), |_| rng.random_range(-5.0f32..5.0));
            let r = kmeans(&emb(v), c.min(n), seed).unwrap();
            for w in r.inertia.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
        }
    }
}
