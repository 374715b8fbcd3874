//! Central finite-difference verification of every gradient block: each
//! layer's weights and biases, and the head transform.
//!
//! At each random evaluation point a fresh network, head, and batch are
//! drawn; inputs are resampled until no ReLU pre-activation sits within
//! 1e-4 of its kink, which keeps the two-sided difference on one side of
//! the nonlinearity. Relative error is `|analytic - fd| / max(1, |fd|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::head::{self, allocate_neurons, LabelConsistencyHead};
use crate::nn::{softmax_xent, Activation, Network};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub input_dim: usize,
    /// Hidden widths; the head attaches to the last of them.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub batch: usize,
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub alpha: f64,
    /// Sabotage hook for validating the checker itself: negates one
    /// analytic weight-gradient entry, which must make the check fail.
    pub flip_sign: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_dim: 5,
            hidden: vec![6, 4],
            num_classes: 3,
            batch: 3,
            points: 20,
            step: 1e-6,
            tolerance: 1e-5,
            alpha: 0.05,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub points: usize,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= self.tolerance)
    }
}

fn total_loss(
    net: &Network,
    head: &LabelConsistencyHead,
    x: &DenseMatrix,
    labels: &[usize],
) -> Result<f64> {
    let trace = net.forward(x)?;
    let (lc, _) = softmax_xent(trace.output(), labels)?;
    let lr = head::representation_error(
        trace.activation(head.attach_layer()),
        &build_codes(head, labels)?,
        head,
    )?;
    Ok(head::combined_loss(lc, lr, head.alpha()))
}

fn build_codes(head: &LabelConsistencyHead, labels: &[usize]) -> Result<DenseMatrix> {
    head::build_ideal_codes(labels, head.allocation())
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.hidden.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs at least one hidden layer".to_string(),
        ));
    }
    if cfg.num_classes < 2 || cfg.batch == 0 || cfg.points == 0 {
        return Err(Error::InvalidArgument(
            "gradient check needs 2+ classes, a nonempty batch and 1+ points".to_string(),
        ));
    }
    let attach = cfg.hidden.len();
    let attach_width = *cfg.hidden.last().expect("nonempty");
    if attach_width < cfg.num_classes {
        return Err(Error::InvalidArgument(format!(
            "attachment width {attach_width} cannot host {} classes",
            cfg.num_classes
        )));
    }

    let num_layers = cfg.hidden.len() + 1;
    let mut blocks: Vec<BlockReport> = Vec::new();
    for i in 1..=num_layers {
        blocks.push(BlockReport {
            name: format!("W{i}"),
            max_rel_err: 0.0,
            entries: 0,
        });
        blocks.push(BlockReport {
            name: format!("b{i}"),
            max_rel_err: 0.0,
            entries: 0,
        });
    }
    blocks.push(BlockReport {
        name: "A".to_string(),
        max_rel_err: 0.0,
        entries: 0,
    });

    for point in 0..cfg.points {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(point as u64));
        let mut spec: Vec<(usize, Activation)> =
            cfg.hidden.iter().map(|&w| (w, Activation::Relu)).collect();
        spec.push((cfg.num_classes, Activation::Identity));
        let net = Network::init(cfg.input_dim, &spec, &mut rng)?;
        let priority: Vec<usize> = (0..cfg.num_classes).collect();
        let allocation = allocate_neurons(attach_width, cfg.num_classes, &priority)?;
        let head = LabelConsistencyHead::with_transform(
            attach,
            cfg.alpha,
            allocation,
            DenseMatrix::from_fn(attach_width, attach_width, |_, _| {
                rng.random_range(-0.7..0.7)
            }),
        )?;
        let labels: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..cfg.num_classes))
            .collect();

        // Keep every ReLU pre-activation clear of its kink.
        let mut x = DenseMatrix::zeros(cfg.input_dim, cfg.batch);
        let mut clear = false;
        for _ in 0..500 {
            x = DenseMatrix::from_fn(cfg.input_dim, cfg.batch, |_, _| rng.random_range(-1.5..1.5));
            let trace = net.forward(&x)?;
            clear = (0..cfg.hidden.len()).all(|l| {
                trace
                    .pre_activation(l)
                    .data()
                    .iter()
                    .all(|z| z.abs() > 1e-4)
            });
            if clear {
                break;
            }
        }
        if !clear {
            return Err(Error::InvalidArgument(
                "could not sample inputs away from ReLU kinks".to_string(),
            ));
        }

        // Analytic gradients via one backward pass.
        let trace = net.forward(&x)?;
        let x_l = trace.activation(attach);
        let q = build_codes(&head, &labels)?;
        let (_, out_grad) = softmax_xent(trace.output(), &labels)?;
        let gx = head::grad_x(x_l, &q, &head)?;
        let bp = net.backward_injected(&trace, &out_grad, Some((attach, &gx)))?;
        let mut ga = head::grad_a(x_l, &q, &head)?;
        let mut weight_grads = bp.weight_grads;
        if cfg.flip_sign {
            weight_grads[0].data_mut()[0] = -weight_grads[0].data_mut()[0];
        }
        let _ = &mut ga;

        // Finite differences per parameter entry.
        #[allow(clippy::needless_range_loop)]
        for li in 0..num_layers {
            let wblock = 2 * li;
            let bblock = 2 * li + 1;
            for idx in 0..net.layers()[li].weight().data().len() {
                let mut plus = net.clone();
                plus.layers_mut()[li].weight_mut().data_mut()[idx] += cfg.step;
                let mut minus = net.clone();
                minus.layers_mut()[li].weight_mut().data_mut()[idx] -= cfg.step;
                let fd = (total_loss(&plus, &head, &x, &labels)?
                    - total_loss(&minus, &head, &x, &labels)?)
                    / (2.0 * cfg.step);
                let rel = rel_err(weight_grads[li].data()[idx], fd);
                blocks[wblock].max_rel_err = blocks[wblock].max_rel_err.max(rel);
                blocks[wblock].entries += 1;
            }
            for idx in 0..net.layers()[li].bias().len() {
                let mut plus = net.clone();
                plus.layers_mut()[li].bias_mut()[idx] += cfg.step;
                let mut minus = net.clone();
                minus.layers_mut()[li].bias_mut()[idx] -= cfg.step;
                let fd = (total_loss(&plus, &head, &x, &labels)?
                    - total_loss(&minus, &head, &x, &labels)?)
                    / (2.0 * cfg.step);
                let rel = rel_err(bp.bias_grads[li][idx], fd);
                blocks[bblock].max_rel_err = blocks[bblock].max_rel_err.max(rel);
                blocks[bblock].entries += 1;
            }
        }
        let ablock = blocks.len() - 1;
        for idx in 0..head.transform().data().len() {
            let mut plus = head.clone();
            plus.transform_mut().data_mut()[idx] += cfg.step;
            let mut minus = head.clone();
            minus.transform_mut().data_mut()[idx] -= cfg.step;
            let fd = (total_loss(&net, &plus, &x, &labels)?
                - total_loss(&net, &minus, &x, &labels)?)
                / (2.0 * cfg.step);
            let rel = rel_err(ga.data()[idx], fd);
            blocks[ablock].max_rel_err = blocks[ablock].max_rel_err.max(rel);
            blocks[ablock].entries += 1;
        }
    }

    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        points: cfg.points,
        blocks,
    })
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}
