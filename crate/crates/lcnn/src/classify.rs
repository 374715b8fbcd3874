//! The two classification schemes: argmax over the network's output scores,
//! and k-NN over transformed attachment-layer representations, plus the
//! Gaussian-kernel conversion of neighbor distances into class
//! probabilities.
//!
//! All tie-breaking is deterministic: equal distances prefer the lower
//! training index, equal votes and equal scores prefer the lower class.

use crate::head::LabelConsistencyHead;
use crate::nn::Network;
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

/// Training embeddings (`A x^(l)`, one column per sample) with their labels.
#[derive(Debug, Clone)]
pub struct ReferenceBank {
    embeddings: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl ReferenceBank {
    pub fn new(embeddings: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if embeddings.cols() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} embedding columns for {} labels",
                embeddings.cols(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty reference bank".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            embeddings,
            labels,
            num_classes,
        })
    }

    /// Embeds `x` through the network and head and stores it with `labels`.
    pub fn build(
        net: &Network,
        head: &LabelConsistencyHead,
        x: &DenseMatrix,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        Self::new(embed(net, head, x)?, labels.to_vec(), num_classes)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Per column, the class with the highest output score; ties go to the
/// lowest class index.
pub fn predict_argmax(net: &Network, x: &DenseMatrix) -> Result<Vec<usize>> {
    let trace = net.forward(x)?;
    let scores = trace.output();
    let mut out = Vec::with_capacity(scores.cols());
    for j in 0..scores.cols() {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (c, v) in scores.column(j).enumerate() {
            if v > best_score {
                best = c;
                best_score = v;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Transformed representation `A x^(l)` of every column of `x`.
pub fn embed(net: &Network, head: &LabelConsistencyHead, x: &DenseMatrix) -> Result<DenseMatrix> {
    let attach = head.attach_layer();
    if attach > net.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "head attaches at layer {attach} but the network has {} layers",
            net.num_layers()
        )));
    }
    let trace = net.forward(x)?;
    head.transform().matmul(trace.activation(attach))
}

/// Sorted `(distance, bank index)` pairs of the k nearest bank columns.
fn nearest(bank: &ReferenceBank, query: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut dist: Vec<(f64, usize)> = (0..bank.len())
        .map(|i| {
            let d2: f64 = bank
                .embeddings
                .column(i)
                .zip(query.iter())
                .map(|(a, &b)| (a - b) * (a - b))
                .sum();
            (d2.sqrt(), i)
        })
        .collect();
    dist.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distance")
            .then(a.1.cmp(&b.1))
    });
    dist.truncate(k);
    dist
}

/// Majority class among the k nearest neighbors of each query column.
/// Distance ties prefer the lower training index; vote ties the smaller
/// class index.
pub fn knn_predict(bank: &ReferenceBank, queries: &DenseMatrix, k: usize) -> Result<Vec<usize>> {
    check_knn_args(bank, queries, k)?;
    let mut out = Vec::with_capacity(queries.cols());
    for j in 0..queries.cols() {
        let query = queries.column_vec(j);
        let neighbors = nearest(bank, &query, k);
        let mut votes = vec![0usize; bank.num_classes];
        for &(_, idx) in &neighbors {
            votes[bank.labels[idx]] += 1;
        }
        let best = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .expect("at least one class");
        out.push(best);
    }
    Ok(out)
}

/// Class probabilities for one query column via a Gaussian kernel over the
/// k nearest neighbors.
///
/// A class present among the neighbors weighs
/// `exp(-d^2 / (2 bandwidth^2))` with `d` its minimum distance within the
/// neighbor set; absent classes weigh `floor`. The result is
/// L1-normalized. If every weight underflows to zero the present classes
/// share the mass uniformly.
pub fn knn_probabilities(
    bank: &ReferenceBank,
    query: &[f64],
    k: usize,
    bandwidth: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "floor must be nonnegative, got {floor}"
        )));
    }
    if query.len() != bank.embeddings.rows() {
        return Err(Error::Shape {
            op: "knn query",
            left: (query.len(), 1),
            right: (bank.embeddings.rows(), 1),
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            bank.len()
        )));
    }

    let neighbors = nearest(bank, query, k);
    let mut class_min: Vec<Option<f64>> = vec![None; bank.num_classes];
    for &(d, idx) in &neighbors {
        let c = bank.labels[idx];
        class_min[c] = Some(class_min[c].map_or(d, |m: f64| m.min(d)));
    }

    let mut weights: Vec<f64> = class_min
        .iter()
        .map(|m| match m {
            Some(d) => (-d * d / (2.0 * bandwidth * bandwidth)).exp(),
            None => floor,
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    if sum > 0.0 {
        for w in &mut weights {
            *w /= sum;
        }
    } else {
        let present = class_min.iter().filter(|m| m.is_some()).count();
        for (w, m) in weights.iter_mut().zip(&class_min) {
            *w = if m.is_some() {
                1.0 / present as f64
            } else {
                0.0
            };
        }
    }
    Ok(weights)
}

/// Default bandwidth for [`knn_probabilities`]: the query's mean distance
/// to its k nearest neighbors, floored to stay positive when the query
/// coincides with all of them.
pub fn adaptive_bandwidth(bank: &ReferenceBank, query: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            bank.len()
        )));
    }
    let neighbors = nearest(bank, query, k);
    let mean = neighbors.iter().map(|(d, _)| d).sum::<f64>() / k as f64;
    Ok(mean.max(1e-12))
}

fn check_knn_args(bank: &ReferenceBank, queries: &DenseMatrix, k: usize) -> Result<()> {
    if queries.rows() != bank.embeddings.rows() {
        return Err(Error::Shape {
            op: "knn query",
            left: queries.shape(),
            right: bank.embeddings.shape(),
        });
    }
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            bank.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::allocate_neurons;
    use crate::nn::{Activation, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank_from(points: &[(Vec<f64>, usize)], m: usize) -> ReferenceBank {
        let dim = points[0].0.len();
        let mut e = DenseMatrix::zeros(dim, points.len());
        let mut labels = Vec::new();
        for (j, (p, y)) in points.iter().enumerate() {
            e.set_column(j, p);
            labels.push(*y);
        }
        ReferenceBank::new(e, labels, m).unwrap()
    }

    #[test]
    fn argmax_basic_and_tiebreak() {
        let layer =
            Layer::new(DenseMatrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let net = Network::new(3, vec![layer]).unwrap();

        let x = DenseMatrix::from_vec(3, 1, vec![0.1, 0.9, 0.0]).unwrap();
        assert_eq!(predict_argmax(&net, &x).unwrap(), vec![1]);

        let tie = DenseMatrix::from_vec(3, 1, vec![0.5, 0.2, 0.5]).unwrap();
        assert_eq!(predict_argmax(&net, &tie).unwrap(), vec![0]);
    }

    #[test]
    fn argmax_batch_equals_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = Network::init(
            4,
            &[(6, Activation::Relu), (3, Activation::Identity)],
            &mut rng,
        )
        .unwrap();
        let x = DenseMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let batch = predict_argmax(&net, &x).unwrap();
        for (j, &expected) in batch.iter().enumerate() {
            let col = DenseMatrix::from_vec(4, 1, x.column_vec(j)).unwrap();
            assert_eq!(predict_argmax(&net, &col).unwrap()[0], expected);
        }
    }

    #[test]
    fn embed_identity_and_zero_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(3, &[(4, Activation::Relu)], &mut rng).unwrap();
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        let x = DenseMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));

        let identity_head = LabelConsistencyHead::new(1, 0.1, alloc.clone()).unwrap();
        let raw = net.forward(&x).unwrap().activation(1).clone();
        assert_eq!(embed(&net, &identity_head, &x).unwrap(), raw);

        let zero_head =
            LabelConsistencyHead::with_transform(1, 0.1, alloc, DenseMatrix::zeros(4, 4)).unwrap();
        let z = embed(&net, &zero_head, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn knn_exact_match_and_global_majority() {
        let bank = bank_from(
            &[
                (vec![0.0, 0.0], 0),
                (vec![1.0, 0.0], 1),
                (vec![0.0, 1.0], 1),
                (vec![5.0, 5.0], 2),
            ],
            3,
        );
        let q = DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(knn_predict(&bank, &q, 1).unwrap(), vec![1]);
        // k = whole bank: class 1 holds the global majority.
        assert_eq!(knn_predict(&bank, &q, 4).unwrap(), vec![1]);
    }

    #[test]
    fn knn_vote_tie_prefers_lower_class() {
        let bank = bank_from(
            &[
                (vec![0.0], 1),
                (vec![2.0], 0),
                (vec![10.0], 1),
                (vec![12.0], 0),
            ],
            2,
        );
        let q = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        // Neighbors at distance 1 (class 1) and 1 (class 0): tie -> class 0.
        assert_eq!(knn_predict(&bank, &q, 2).unwrap(), vec![0]);
    }

    #[test]
    fn knn_distance_tie_prefers_lower_index() {
        let bank = bank_from(&[(vec![1.0], 1), (vec![-1.0], 0)], 2);
        let q = DenseMatrix::from_vec(1, 1, vec![0.0]).unwrap();
        // Both neighbors at distance 1; k = 1 must take index 0.
        assert_eq!(knn_predict(&bank, &q, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let bank = bank_from(&[(vec![0.0, 0.0], 0)], 1);
        let q = DenseMatrix::zeros(2, 1);
        assert!(knn_predict(&bank, &q, 0).is_err());
        assert!(knn_predict(&bank, &q, 2).is_err());
        let wrong_dim = DenseMatrix::zeros(3, 1);
        assert!(knn_predict(&bank, &wrong_dim, 1).is_err());
        assert!(ReferenceBank::new(DenseMatrix::zeros(2, 0), vec![], 1).is_err());
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..25 {
            let n = rng.random_range(5..40);
            let m = rng.random_range(2..5);
            let dim = rng.random_range(1..6);
            let points: Vec<(Vec<f64>, usize)> = (0..n)
                .map(|_| {
                    (
                        (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
                        rng.random_range(0..m),
                    )
                })
                .collect();
            let bank = bank_from(&points, m);
            let k = [1usize, 3, 5][rng.random_range(0..3)];

            for _ in 0..4 {
                let query: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();

                // Brute force: full distance table, straightforward loops.
                let mut table: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(i, (p, _))| {
                        let d2: f64 = p.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
                        (d2, i)
                    })
                    .collect();
                table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut votes = vec![0usize; m];
                for &(_, i) in table.iter().take(k) {
                    votes[points[i].1] += 1;
                }
                let mut expected = 0;
                for c in 1..m {
                    if votes[c] > votes[expected] {
                        expected = c;
                    }
                }

                let q = DenseMatrix::from_vec(dim, 1, query).unwrap();
                let got = knn_predict(&bank, &q, k).unwrap()[0];
                assert_eq!(got, expected, "case {case}");
            }
        }
    }

    #[test]
    fn probabilities_one_hot_when_single_class() {
        let bank = bank_from(&[(vec![0.0], 1), (vec![0.5], 1), (vec![9.0], 0)], 2);
        let p = knn_probabilities(&bank, &[0.2], 2, 1.0, 0.0).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn probabilities_floor_keeps_all_classes_positive() {
        let bank = bank_from(&[(vec![0.0], 0), (vec![1.0], 1), (vec![9.0], 2)], 3);
        let p = knn_probabilities(&bank, &[0.1], 2, 0.5, 1e-6).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn probabilities_symmetric_for_equidistant_classes() {
        let bank = bank_from(&[(vec![-1.0], 0), (vec![1.0], 1)], 2);
        let p = knn_probabilities(&bank, &[0.0], 2, 0.7, 0.0).unwrap();
        assert_eq!(p[0], p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn probabilities_survive_kernel_underflow() {
        // Distances so large the Gaussian underflows to zero everywhere.
        let bank = bank_from(&[(vec![1e8], 0), (vec![-1e8], 1)], 2);
        let p = knn_probabilities(&bank, &[0.0], 2, 1e-3, 0.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn adaptive_bandwidth_is_mean_neighbor_distance() {
        let bank = bank_from(&[(vec![1.0], 0), (vec![3.0], 1), (vec![50.0], 0)], 2);
        let bw = adaptive_bandwidth(&bank, &[0.0], 2).unwrap();
        assert!((bw - 2.0).abs() < 1e-12);
        // Query exactly on its single neighbor still gives a usable width.
        let solo = bank_from(&[(vec![2.0], 0)], 1);
        assert!(adaptive_bandwidth(&solo, &[2.0], 1).unwrap() > 0.0);
    }
}
