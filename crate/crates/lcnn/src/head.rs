//! The label-consistency head.
//!
//! Every neuron of the attachment layer is owned by exactly one class.
//! A sample's ideal code is the binary vector that is 1 on the neurons its
//! class owns and 0 elsewhere. The head holds a square transform `A` and a
//! weight `alpha`; the representation error is the batch-mean squared
//! distance between `A x` and the ideal codes, and training adds its two
//! closed-form gradient terms (with respect to `x` and to `A`) to ordinary
//! backpropagation.

use crate::tensor::DenseMatrix;
use crate::{Error, Result};

/// Ownership map from neuron index to class index.
///
/// With `N` neurons and `m` classes every class owns a contiguous block of
/// `floor(N/m)` neurons, laid out in ascending class order; the `N mod m`
/// leftover neurons extend the blocks of the first `N mod m` classes in
/// priority order, keeping each class's block contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronAllocation {
    owner: Vec<usize>,
    num_classes: usize,
}

impl NeuronAllocation {
    #[inline]
    pub fn num_neurons(&self) -> usize {
        self.owner.len()
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn owner(&self, neuron: usize) -> usize {
        self.owner[neuron]
    }

    #[inline]
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    pub fn class_neuron_count(&self, class: usize) -> usize {
        self.owner.iter().filter(|&&c| c == class).count()
    }

    /// Rebuilds an allocation from a raw owner array (model deserialization).
    pub fn from_owners(owner: Vec<usize>, num_classes: usize) -> Result<Self> {
        if owner.is_empty() || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "allocation needs at least one neuron and one class".to_string(),
            ));
        }
        if let Some(&bad) = owner.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "owner class {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { owner, num_classes })
    }
}

/// Assigns `num_neurons` neurons to `num_classes` classes.
///
/// `class_priority` must be a permutation of `0..num_classes`; its first
/// `num_neurons mod num_classes` entries name the classes that receive one
/// extra neuron. Priority is meant to rank classes by intra-class variation,
/// highest first (see [`crate::data::class_priority`]).
pub fn allocate_neurons(
    num_neurons: usize,
    num_classes: usize,
    class_priority: &[usize],
) -> Result<NeuronAllocation> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("no classes to allocate".to_string()));
    }
    if num_neurons < num_classes {
        return Err(Error::InvalidArgument(format!(
            "{num_neurons} neurons cannot cover {num_classes} classes"
        )));
    }
    if class_priority.len() != num_classes {
        return Err(Error::InvalidArgument(format!(
            "priority lists {} classes, expected {num_classes}",
            class_priority.len()
        )));
    }
    let mut seen = vec![false; num_classes];
    for &c in class_priority {
        if c >= num_classes || seen[c] {
            return Err(Error::InvalidArgument(
                "class priority is not a permutation of all classes".to_string(),
            ));
        }
        seen[c] = true;
    }

    let base = num_neurons / num_classes;
    let surplus = num_neurons % num_classes;
    let mut counts = vec![base; num_classes];
    for &c in &class_priority[..surplus] {
        counts[c] += 1;
    }

    let mut owner = Vec::with_capacity(num_neurons);
    for (class, &count) in counts.iter().enumerate() {
        owner.extend(std::iter::repeat_n(class, count));
    }
    Ok(NeuronAllocation { owner, num_classes })
}

/// Binary target vector for one sample: 1 exactly on the neurons owned by
/// the sample's class.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealCode {
    code: Vec<f64>,
}

impl IdealCode {
    pub fn for_label(label: usize, allocation: &NeuronAllocation) -> Result<Self> {
        if label >= allocation.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: allocation.num_classes(),
            });
        }
        let code = allocation
            .owners()
            .iter()
            .map(|&c| if c == label { 1.0 } else { 0.0 })
            .collect();
        Ok(Self { code })
    }

    #[inline]
    pub fn code(&self) -> &[f64] {
        &self.code
    }
}

/// Stacks the ideal codes of a batch as columns: `num_neurons x batch`.
pub fn build_ideal_codes(labels: &[usize], allocation: &NeuronAllocation) -> Result<DenseMatrix> {
    let mut q = DenseMatrix::zeros(allocation.num_neurons(), labels.len());
    for (b, &y) in labels.iter().enumerate() {
        let code = IdealCode::for_label(y, allocation)?;
        q.set_column(b, code.code());
    }
    Ok(q)
}

/// Attachment point, transform `A`, loss weight `alpha`, and the neuron
/// ownership. `attach_layer` is the 1-based activation index of the hidden
/// layer being supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelConsistencyHead {
    attach_layer: usize,
    transform: DenseMatrix,
    alpha: f64,
    allocation: NeuronAllocation,
}

impl LabelConsistencyHead {
    /// Starts with `A` as the identity, so transformed representations are
    /// initially the raw ones.
    pub fn new(attach_layer: usize, alpha: f64, allocation: NeuronAllocation) -> Result<Self> {
        let transform = DenseMatrix::identity(allocation.num_neurons());
        Self::with_transform(attach_layer, alpha, allocation, transform)
    }

    pub fn with_transform(
        attach_layer: usize,
        alpha: f64,
        allocation: NeuronAllocation,
        transform: DenseMatrix,
    ) -> Result<Self> {
        let n = allocation.num_neurons();
        if transform.shape() != (n, n) {
            return Err(Error::Shape {
                op: "head transform",
                left: transform.shape(),
                right: (n, n),
            });
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and nonnegative, got {alpha}"
            )));
        }
        if attach_layer == 0 {
            return Err(Error::InvalidArgument(
                "attach layer index is 1-based".to_string(),
            ));
        }
        Ok(Self {
            attach_layer,
            transform,
            alpha,
            allocation,
        })
    }

    #[inline]
    pub fn attach_layer(&self) -> usize {
        self.attach_layer
    }

    #[inline]
    pub fn transform(&self) -> &DenseMatrix {
        &self.transform
    }

    #[inline]
    pub fn transform_mut(&mut self) -> &mut DenseMatrix {
        &mut self.transform
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Forces a new weight; the trainer uses this to zero alpha in baseline
    /// mode.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    #[inline]
    pub fn allocation(&self) -> &NeuronAllocation {
        &self.allocation
    }

    #[inline]
    pub fn num_neurons(&self) -> usize {
        self.allocation.num_neurons()
    }

    fn check_batch(&self, x_l: &DenseMatrix, q: &DenseMatrix) -> Result<()> {
        let n = self.num_neurons();
        if x_l.rows() != n || q.rows() != n || x_l.cols() != q.cols() {
            return Err(Error::Shape {
                op: "representation error",
                left: x_l.shape(),
                right: q.shape(),
            });
        }
        Ok(())
    }

    /// Residual `A x - q` for a batch.
    fn residual(&self, x_l: &DenseMatrix, q: &DenseMatrix) -> Result<DenseMatrix> {
        self.transform.matmul(x_l)?.sub(q)
    }
}

/// Batch-mean squared distance between the transformed representations and
/// the ideal codes. Unweighted: `alpha` enters only through the combined
/// objective and the gradients.
pub fn representation_error(
    x_l: &DenseMatrix,
    q: &DenseMatrix,
    head: &LabelConsistencyHead,
) -> Result<f64> {
    head.check_batch(x_l, q)?;
    let resid = head.residual(x_l, q)?;
    Ok(resid.sq_l2() / q.cols() as f64)
}

/// Gradient of `alpha * representation_error` with respect to `x_l`:
/// `(2 alpha / batch) * A' (A x - q)`. This is the term injected into the
/// activation gradient at the attachment layer.
pub fn grad_x(
    x_l: &DenseMatrix,
    q: &DenseMatrix,
    head: &LabelConsistencyHead,
) -> Result<DenseMatrix> {
    head.check_batch(x_l, q)?;
    let resid = head.residual(x_l, q)?;
    let scale = 2.0 * head.alpha() / q.cols() as f64;
    Ok(head.transform().transpose().matmul(&resid)?.scale(scale))
}

/// Gradient of `alpha * representation_error` with respect to the transform:
/// `(2 alpha / batch) * (A x - q) x'`.
pub fn grad_a(
    x_l: &DenseMatrix,
    q: &DenseMatrix,
    head: &LabelConsistencyHead,
) -> Result<DenseMatrix> {
    head.check_batch(x_l, q)?;
    let resid = head.residual(x_l, q)?;
    let scale = 2.0 * head.alpha() / q.cols() as f64;
    Ok(resid.matmul(&x_l.transpose())?.scale(scale))
}

/// Total objective `lc + alpha * lr`.
pub fn combined_loss(lc: f64, lr: f64, alpha: f64) -> f64 {
    lc + alpha * lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_allocation_invariants(alloc: &NeuronAllocation) {
        let n = alloc.num_neurons();
        let m = alloc.num_classes();
        let base = n / m;
        let surplus = n % m;
        let mut counts = vec![0usize; m];
        for j in 0..n {
            counts[alloc.owner(j)] += 1;
        }
        let larger = counts.iter().filter(|&&c| c == base + 1).count();
        assert!(counts.iter().all(|&c| c == base || c == base + 1));
        assert_eq!(larger, surplus);
        assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn seven_neurons_three_classes_worked_example() {
        // Class 1 highest priority (0-based), so it takes the single
        // surplus neuron: blocks {0,1}, {2,3,4}, {5,6}.
        let alloc = allocate_neurons(7, 3, &[1, 0, 2]).unwrap();
        assert_eq!(alloc.owners(), &[0, 0, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn exact_division_ignores_priority() {
        let a = allocate_neurons(6, 3, &[2, 0, 1]).unwrap();
        let b = allocate_neurons(6, 3, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.owners(), &[0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn ten_neurons_four_classes_counts() {
        let alloc = allocate_neurons(10, 4, &[0, 1, 2, 3]).unwrap();
        for (class, expected) in [(0, 3), (1, 3), (2, 2), (3, 2)] {
            assert_eq!(alloc.class_neuron_count(class), expected);
        }
        check_allocation_invariants(&alloc);
    }

    #[test]
    fn allocation_invariants_sweep() {
        for n in 1..=24usize {
            for m in 1..=n {
                let fwd: Vec<usize> = (0..m).collect();
                let rev: Vec<usize> = (0..m).rev().collect();
                for priority in [&fwd, &rev] {
                    let alloc = allocate_neurons(n, m, priority).unwrap();
                    check_allocation_invariants(&alloc);
                }
            }
        }
    }

    #[test]
    fn allocation_rejects_bad_inputs() {
        assert!(allocate_neurons(2, 3, &[0, 1, 2]).is_err());
        assert!(allocate_neurons(5, 3, &[0, 1]).is_err());
        assert!(allocate_neurons(5, 3, &[0, 1, 1]).is_err());
        assert!(allocate_neurons(5, 3, &[0, 1, 3]).is_err());
    }

    #[test]
    fn ideal_codes_reproduce_worked_batch() {
        let alloc = allocate_neurons(7, 3, &[1, 0, 2]).unwrap();
        let q = build_ideal_codes(&[0, 0, 1, 1, 2, 2], &alloc).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(q.shape(), (7, 6));
        assert_eq!(q.data(), &expected);
    }

    #[test]
    fn ideal_code_one_hot_when_one_neuron_per_class() {
        let alloc = allocate_neurons(4, 4, &[0, 1, 2, 3]).unwrap();
        let q = build_ideal_codes(&[2], &alloc).unwrap();
        assert_eq!(q.column_vec(0), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ideal_code_rejects_out_of_range_label() {
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        assert!(build_ideal_codes(&[2], &alloc).is_err());
    }

    proptest! {
        // Column sums equal the owner class's neuron count, columns of equal
        // labels are identical, and columns of different labels orthogonal.
        #[test]
        fn ideal_code_columns_structure(
            n in 3usize..20,
            m_raw in 1usize..8,
            label_seed in proptest::collection::vec(0usize..8, 2..10),
        ) {
            let m = m_raw.min(n);
            let priority: Vec<usize> = (0..m).collect();
            let alloc = allocate_neurons(n, m, &priority).unwrap();
            let labels: Vec<usize> = label_seed.iter().map(|&l| l % m).collect();
            let q = build_ideal_codes(&labels, &alloc).unwrap();

            for (b, &y) in labels.iter().enumerate() {
                let sum: f64 = q.column(b).sum();
                prop_assert_eq!(sum as usize, alloc.class_neuron_count(y));
            }
            for a in 0..labels.len() {
                for b in 0..labels.len() {
                    let dot: f64 = q
                        .column_vec(a)
                        .iter()
                        .zip(q.column_vec(b))
                        .map(|(x, y)| x * y)
                        .sum();
                    if labels[a] == labels[b] {
                        prop_assert_eq!(q.column_vec(a), q.column_vec(b));
                    } else {
                        prop_assert_eq!(dot, 0.0);
                    }
                }
            }
        }
    }

    fn random_instance(
        seed: u64,
        n: usize,
        batch: usize,
    ) -> (DenseMatrix, DenseMatrix, LabelConsistencyHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1 + (n / 2).max(1).min(n);
        let priority: Vec<usize> = (0..m).collect();
        let alloc = allocate_neurons(n, m, &priority).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..m)).collect();
        let q = build_ideal_codes(&labels, &alloc).unwrap();
        let x = DenseMatrix::from_fn(n, batch, |_, _| rng.random_range(-1.5..1.5));
        let transform = DenseMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8));
        let alpha = rng.random_range(0.01..0.9);
        let head = LabelConsistencyHead::with_transform(1, alpha, alloc, transform).unwrap();
        (x, q, head)
    }

    #[test]
    fn representation_error_perfect_code_is_zero() {
        let alloc = allocate_neurons(5, 2, &[0, 1]).unwrap();
        let head = LabelConsistencyHead::new(1, 0.1, alloc.clone()).unwrap();
        let q = build_ideal_codes(&[0, 1, 1], &alloc).unwrap();
        assert_eq!(representation_error(&q, &q, &head).unwrap(), 0.0);
    }

    #[test]
    fn representation_error_zero_transform_counts_ones() {
        // With A = 0 the residual is -q, so each sample contributes the
        // number of ones in its code.
        let alloc = allocate_neurons(6, 3, &[0, 1, 2]).unwrap();
        let head =
            LabelConsistencyHead::with_transform(1, 0.5, alloc.clone(), DenseMatrix::zeros(6, 6))
                .unwrap();
        let q = build_ideal_codes(&[0, 2], &alloc).unwrap();
        let x = DenseMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        assert_eq!(representation_error(&x, &q, &head).unwrap(), 2.0);
    }

    #[test]
    fn representation_error_matches_scalar_loop_oracle() {
        let (x, q, head) = random_instance(77, 5, 3);
        let got = representation_error(&x, &q, &head).unwrap();

        let mut total = 0.0;
        for b in 0..3 {
            for i in 0..5 {
                let mut ax = 0.0;
                for k in 0..5 {
                    ax += head.transform().get(i, k) * x.get(k, b);
                }
                let d = q.get(i, b) - ax;
                total += d * d;
            }
        }
        let expected = total / 3.0;
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn grad_x_zero_alpha_is_zero() {
        let (x, q, head) = random_instance(5, 4, 2);
        let mut head = head;
        head.set_alpha(0.0);
        let g = grad_x(&x, &q, &head).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_x_identity_transform_single_sample() {
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        let head = LabelConsistencyHead::new(1, 0.3, alloc.clone()).unwrap();
        let q = build_ideal_codes(&[1], &alloc).unwrap();
        let x = DenseMatrix::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let g = grad_x(&x, &q, &head).unwrap();
        let expected = x.sub(&q).unwrap().scale(2.0 * 0.3);
        assert_eq!(g, expected);
    }

    #[test]
    fn grad_a_zero_cases() {
        let (_, q, head) = random_instance(6, 4, 2);
        let zero_x = DenseMatrix::zeros(4, 2);
        let g = grad_a(&zero_x, &q, &head).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        // A x == q exactly: identity transform fed the codes themselves.
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        let ihead = LabelConsistencyHead::new(1, 0.7, alloc.clone()).unwrap();
        let codes = build_ideal_codes(&[0, 1], &alloc).unwrap();
        let g = grad_a(&codes, &codes, &ihead).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..20u64 {
            let (x, q, head) = random_instance(seed, 4, 3);
            let alpha = head.alpha();

            let gx = grad_x(&x, &q, &head).unwrap();
            for idx in 0..x.data().len() {
                let mut plus = x.clone();
                plus.data_mut()[idx] += h;
                let mut minus = x.clone();
                minus.data_mut()[idx] -= h;
                let fd = alpha
                    * (representation_error(&plus, &q, &head).unwrap()
                        - representation_error(&minus, &q, &head).unwrap())
                    / (2.0 * h);
                let g = gx.data()[idx];
                assert!(
                    (g - fd).abs() / fd.abs().max(1.0) <= 1e-6,
                    "seed {seed} x[{idx}]: analytic {g} vs fd {fd}"
                );
            }

            let ga = grad_a(&x, &q, &head).unwrap();
            for idx in 0..head.transform().data().len() {
                let mut plus = head.clone();
                plus.transform_mut().data_mut()[idx] += h;
                let mut minus = head.clone();
                minus.transform_mut().data_mut()[idx] -= h;
                let fd = alpha
                    * (representation_error(&x, &q, &plus).unwrap()
                        - representation_error(&x, &q, &minus).unwrap())
                    / (2.0 * h);
                let g = ga.data()[idx];
                assert!(
                    (g - fd).abs() / fd.abs().max(1.0) <= 1e-6,
                    "seed {seed} A[{idx}]: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn combined_loss_cases() {
        assert!((combined_loss(1.0, 2.0, 0.05) - 1.1).abs() < 1e-15);
        assert_eq!(combined_loss(3.25, 99.0, 0.0), 3.25);
        assert_eq!(combined_loss(0.0, 7.5, 1.0), 7.5);
    }

    #[test]
    fn head_rejects_bad_construction() {
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        assert!(LabelConsistencyHead::with_transform(
            1,
            0.1,
            alloc.clone(),
            DenseMatrix::zeros(3, 3)
        )
        .is_err());
        assert!(LabelConsistencyHead::new(1, -0.1, alloc.clone()).is_err());
        assert!(LabelConsistencyHead::new(0, 0.1, alloc).is_err());
    }

    #[test]
    fn representation_error_rejects_shape_mismatch() {
        let alloc = allocate_neurons(4, 2, &[0, 1]).unwrap();
        let head = LabelConsistencyHead::new(1, 0.1, alloc).unwrap();
        let x = DenseMatrix::zeros(4, 2);
        let q = DenseMatrix::zeros(4, 3);
        assert!(representation_error(&x, &q, &head).is_err());
        let q5 = DenseMatrix::zeros(5, 2);
        assert!(representation_error(&x, &q5, &head).is_err());
    }
}
