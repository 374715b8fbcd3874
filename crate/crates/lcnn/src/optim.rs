//! SGD with classical momentum in three training modes.
//!
//! `baseline` trains on the classification loss alone (`alpha` forced to 0),
//! `lcnn1` on the weighted representation error alone, and `lcnn2` on their
//! sum. All three modes run the identical code path; the modes differ only
//! in which loss terms carry weight. That makes an `lcnn2` run with
//! `alpha = 0` bit-identical to a `baseline` run from the same seed and
//! initial model.
//!
//! Per-epoch error rates use each mode's natural classifier: argmax over the
//! output scores for `baseline`/`lcnn2`, k-NN over the transformed
//! representations for `lcnn1` (whose output layer receives no gradient).

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classify::{self, ReferenceBank};
use crate::data::{Dataset, Split};
use crate::head::{self, LabelConsistencyHead};
use crate::nn::{softmax_xent, Network};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Lcnn1,
    Lcnn2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Lcnn1 => "lcnn1",
            Mode::Lcnn2 => "lcnn2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "lcnn1" => Ok(Mode::Lcnn1),
            "lcnn2" => Ok(Mode::Lcnn2),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected baseline, lcnn1 or lcnn2)"
            ))),
        }
    }
}

/// Optional stepwise learning-rate decay: multiply by `factor` every
/// `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub factor: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub knn_k: usize,
    /// L2 penalty applied to weight matrices and the head transform,
    /// not to biases. Off by default.
    pub weight_decay: f64,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lcnn2,
            alpha: 0.05,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            knn_k: 5,
            weight_decay: 0.0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".to_string()));
        }
        if let Some(decay) = self.lr_decay {
            if !(decay.factor > 0.0 && decay.factor <= 1.0) || decay.every == 0 {
                return Err(Error::Config(format!(
                    "lr decay needs factor in (0, 1] and a positive interval, got {} every {}",
                    decay.factor, decay.every
                )));
            }
        }
        Ok(())
    }

    /// The loss weight actually used: baseline forces alpha to zero.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Baseline => 0.0,
            _ => self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_c: f64,
    pub loss_r: f64,
    pub train_err: f64,
    /// NaN when the dataset has no test split.
    pub test_err: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    pub wall_time_secs: f64,
}

impl TrainRecord {
    pub fn final_train_err(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_err)
    }

    pub fn final_test_err(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_err)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,loss_c,loss_r,train_err,test_err\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.loss_c, e.loss_r, e.train_err, e.test_err
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// First epoch index whose training error is at or below `threshold`.
pub fn epochs_to_threshold(record: &TrainRecord, threshold: f64) -> Option<usize> {
    record.epochs.iter().position(|e| e.train_err <= threshold)
}

/// Runs SGD and returns the trained network, head, and per-epoch record.
/// Deterministic: identical `(net, head, data, cfg)` give identical results.
pub fn train(
    net: Network,
    head: LabelConsistencyHead,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, LabelConsistencyHead, TrainRecord)> {
    cfg.validate()?;
    let mut net = net;
    let mut head = head;
    head.set_alpha(cfg.effective_alpha());

    let attach = head.attach_layer();
    if attach > net.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "head attaches at layer {attach} but the network has {} layers",
            net.num_layers()
        )));
    }
    let attach_width = net.layers()[attach - 1].out_dim();
    if head.num_neurons() != attach_width {
        return Err(Error::InvalidArgument(format!(
            "head has {} neurons but layer {attach} is {attach_width} wide",
            head.num_neurons()
        )));
    }
    if head.allocation().num_classes() != data.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "head allocates {} classes but the dataset has {}",
            head.allocation().num_classes(),
            data.num_classes()
        )));
    }
    if cfg.mode != Mode::Lcnn1 && net.output_dim() != data.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "network outputs {} scores but the dataset has {} classes",
            net.output_dim(),
            data.num_classes()
        )));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset dimension {} does not match network input {}",
            data.dim(),
            net.input_dim()
        )));
    }

    let train_x = data.split_features(Split::Train);
    let train_y = data.split_labels(Split::Train);
    let test_x = data.split_features(Split::Test);
    let test_y = data.split_labels(Split::Test);
    if train_y.is_empty() {
        return Err(Error::InvalidArgument("no training samples".to_string()));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::zeros(&net, &head);
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut record = TrainRecord {
        epochs: Vec::with_capacity(cfg.epochs),
        wall_time_secs: 0.0,
    };

    for epoch in 0..cfg.epochs {
        let lr = effective_lr(cfg, epoch);
        order.shuffle(&mut rng);

        let mut lc_sum = 0.0;
        let mut lr_sum = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = gather(&train_x, &train_y, chunk);
            let (lc, lrep) =
                step(&mut net, &mut head, &mut velocity, &x, &y, cfg, lr).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                        epoch,
                        batch: batch_index,
                    },
                    other => other,
                })?;
            lc_sum += lc * chunk.len() as f64;
            lr_sum += lrep * chunk.len() as f64;
        }

        let n = train_y.len() as f64;
        let loss_c = lc_sum / n;
        let loss_r = lr_sum / n;
        let loss = head::combined_loss(loss_c, loss_r, head.alpha());

        let (train_err, test_err) = match cfg.mode {
            Mode::Lcnn1 => {
                let bank =
                    ReferenceBank::build(&net, &head, &train_x, &train_y, data.num_classes())?;
                (
                    knn_error(&bank, &net, &head, &train_x, &train_y, cfg.knn_k)?,
                    knn_error(&bank, &net, &head, &test_x, &test_y, cfg.knn_k)?,
                )
            }
            _ => (
                argmax_error(&net, &train_x, &train_y)?,
                argmax_error(&net, &test_x, &test_y)?,
            ),
        };

        record.epochs.push(EpochStats {
            epoch,
            loss,
            loss_c,
            loss_r,
            train_err,
            test_err,
        });
    }

    record.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((net, head, record))
}

/// One mini-batch: forward, both losses, backward with the representation
/// gradient injected at the attachment layer, momentum updates.
fn step(
    net: &mut Network,
    head: &mut LabelConsistencyHead,
    velocity: &mut Velocity,
    x: &DenseMatrix,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, f64)> {
    let attach = head.attach_layer();
    let trace = net.forward(x)?;
    let x_l = trace.activation(attach);
    let q = head::build_ideal_codes(y, head.allocation())?;

    let (loss_c, out_grad) = if cfg.mode == Mode::Lcnn1 {
        (
            0.0,
            DenseMatrix::zeros(trace.output().rows(), trace.output().cols()),
        )
    } else {
        softmax_xent(trace.output(), y)?
    };
    let loss_r = head::representation_error(x_l, &q, head)?;
    let total = head::combined_loss(loss_c, loss_r, head.alpha());
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
    }

    let gx = head::grad_x(x_l, &q, head)?;
    let bp = net.backward_injected(&trace, &out_grad, Some((attach, &gx)))?;
    let ga = head::grad_a(x_l, &q, head)?;

    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let vw = &mut velocity.weights[i];
        vw.scale_in_place(cfg.momentum);
        vw.add_scaled(1.0, &bp.weight_grads[i])?;
        if cfg.weight_decay > 0.0 {
            vw.add_scaled(cfg.weight_decay, layer.weight())?;
        }
        layer.weight_mut().add_scaled(-lr, vw)?;

        let vb = &mut velocity.biases[i];
        for ((v, &g), b) in vb.iter_mut().zip(&bp.bias_grads[i]).zip(layer.bias_mut()) {
            *v = cfg.momentum * *v + g;
            *b -= lr * *v;
        }
    }

    let va = &mut velocity.transform;
    va.scale_in_place(cfg.momentum);
    va.add_scaled(1.0, &ga)?;
    if cfg.weight_decay > 0.0 {
        va.add_scaled(cfg.weight_decay, head.transform())?;
    }
    head.transform_mut().add_scaled(-lr, va)?;

    Ok((loss_c, loss_r))
}

struct Velocity {
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    transform: DenseMatrix,
}

impl Velocity {
    fn zeros(net: &Network, head: &LabelConsistencyHead) -> Self {
        Self {
            weights: net
                .layers()
                .iter()
                .map(|l| DenseMatrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net
                .layers()
                .iter()
                .map(|l| vec![0.0; l.out_dim()])
                .collect(),
            transform: DenseMatrix::zeros(head.num_neurons(), head.num_neurons()),
        }
    }
}

fn effective_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.lr_decay {
        None => cfg.learning_rate,
        Some(decay) => cfg.learning_rate * decay.factor.powi((epoch / decay.every) as i32),
    }
}

fn gather(x: &DenseMatrix, y: &[usize], idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
    let mut bx = DenseMatrix::zeros(x.rows(), idx.len());
    let mut by = Vec::with_capacity(idx.len());
    for (j, &src) in idx.iter().enumerate() {
        bx.set_column(j, &x.column_vec(src));
        by.push(y[src]);
    }
    (bx, by)
}

fn argmax_error(net: &Network, x: &DenseMatrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = classify::predict_argmax(net, x)?;
    let wrong = pred.iter().zip(y).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / y.len() as f64)
}

fn knn_error(
    bank: &ReferenceBank,
    net: &Network,
    head: &LabelConsistencyHead,
    x: &DenseMatrix,
    y: &[usize],
    k: usize,
) -> Result<f64> {
    if y.is_empty() {
        return Ok(f64::NAN);
    }
    let queries = classify::embed(net, head, x)?;
    let pred = classify::knn_predict(bank, &queries, k)?;
    let wrong = pred.iter().zip(y).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / y.len() as f64)
}
