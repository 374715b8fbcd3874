//! Flat key=value run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Unknown or duplicate keys are errors so that a typo cannot
//! silently fall back to a default.
//!
//! Keys: `mode`, `alpha`, `lr`, `momentum`, `batch`, `epochs`, `seed`,
//! `attach_layer` (`auto` or a 1-based layer index), `knn_k`, `layers`
//! (comma-separated hidden widths), `weight_decay`, `lr_decay_factor`,
//! `lr_decay_every`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{class_priority, Dataset};
use crate::head::{allocate_neurons, LabelConsistencyHead};
use crate::nn::{Activation, Network};
use crate::optim::{LrDecay, Mode, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `None` attaches to the last hidden layer.
    pub attach_layer: Option<usize>,
    pub knn_k: usize,
    /// Hidden layer widths; the output layer is sized by the dataset.
    pub layers: Vec<usize>,
    pub weight_decay: f64,
    pub lr_decay_factor: Option<f64>,
    pub lr_decay_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lcnn2,
            alpha: 0.05,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            epochs: 30,
            seed: 0,
            attach_layer: None,
            knn_k: 5,
            layers: vec![64, 32],
            weight_decay: 0.0,
            lr_decay_factor: None,
            lr_decay_every: None,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let lr_decay = match (self.lr_decay_factor, self.lr_decay_every) {
            (None, None) => None,
            (Some(factor), Some(every)) => Some(LrDecay { factor, every }),
            _ => {
                return Err(Error::Config(
                    "lr_decay_factor and lr_decay_every must be set together".to_string(),
                ))
            }
        };
        let cfg = TrainConfig {
            mode: self.mode,
            alpha: self.alpha,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            knn_k: self.knn_k,
            weight_decay: self.weight_decay,
            lr_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 1-based attachment index for a network with `num_layers` layers.
    pub fn resolved_attach_layer(&self, num_layers: usize) -> usize {
        self.attach_layer
            .unwrap_or_else(|| num_layers.saturating_sub(1).max(1))
    }

    /// Snapshot in the same key=value syntax [`parse_config`] accepts.
    pub fn to_text(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = format!(
            "mode = {}\nalpha = {}\nlr = {}\nmomentum = {}\nbatch = {}\nepochs = {}\nseed = {}\nattach_layer = {}\nknn_k = {}\nlayers = {layers}\nweight_decay = {}\n",
            self.mode.as_str(),
            self.alpha,
            self.lr,
            self.momentum,
            self.batch,
            self.epochs,
            self.seed,
            self.attach_layer
                .map_or("auto".to_string(), |l| l.to_string()),
            self.knn_k,
            self.weight_decay,
        );
        if let Some(f) = self.lr_decay_factor {
            out.push_str(&format!("lr_decay_factor = {f}\n"));
        }
        if let Some(e) = self.lr_decay_every {
            out.push_str(&format!("lr_decay_every = {e}\n"));
        }
        out
    }

    /// Applies a single key=value override on top of the current values;
    /// the CLI routes its flags through here.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value, 0)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("{}invalid value '{value}' for {key}", at(line)))
            })
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "alpha" => self.alpha = num(key, value, line)?,
            "lr" => self.lr = num(key, value, line)?,
            "momentum" => self.momentum = num(key, value, line)?,
            "batch" => self.batch = num(key, value, line)?,
            "epochs" => self.epochs = num(key, value, line)?,
            "seed" => self.seed = num(key, value, line)?,
            "attach_layer" => {
                self.attach_layer = if value == "auto" {
                    None
                } else {
                    Some(num(key, value, line)?)
                }
            }
            "knn_k" => self.knn_k = num(key, value, line)?,
            "layers" => {
                let widths: Result<Vec<usize>> = value
                    .split(',')
                    .map(|w| num("layers", w.trim(), line))
                    .collect();
                let widths = widths?;
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config(format!(
                        "{}layers must list positive widths",
                        at(line)
                    )));
                }
                self.layers = widths;
            }
            "weight_decay" => self.weight_decay = num(key, value, line)?,
            "lr_decay_factor" => self.lr_decay_factor = Some(num(key, value, line)?),
            "lr_decay_every" => self.lr_decay_every = Some(num(key, value, line)?),
            other => return Err(Error::Config(format!("{}unknown key '{other}'", at(line)))),
        }
        Ok(())
    }
}

/// Message prefix for file-sourced settings; overrides have no line.
fn at(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

/// Parses key=value text on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line}: expected key = value, got '{content}'"
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if seen.iter().any(|k| k == key) {
            return Err(Error::Config(format!("line {line}: duplicate key '{key}'")));
        }
        seen.push(key.to_string());
        cfg.set(key, value, line)?;
    }
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Fresh seeded model for a dataset: a ReLU hidden stack from
/// `cfg.layers`, an identity output layer sized to the classes, and a head
/// on the attachment layer whose surplus neurons follow the dataset's
/// class-priority ranking.
///
/// The weight-init stream is derived from `cfg.seed` but offset from the
/// training stream, so initialization and shuffling never share randomness.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<(Network, LabelConsistencyHead)> {
    let m = data.num_classes();
    let mut spec: Vec<(usize, Activation)> =
        cfg.layers.iter().map(|&w| (w, Activation::Relu)).collect();
    spec.push((m, Activation::Identity));
    let attach = cfg.resolved_attach_layer(spec.len());
    if attach > cfg.layers.len() {
        return Err(Error::Config(format!(
            "attach_layer {attach} must name a hidden layer (1..={})",
            cfg.layers.len()
        )));
    }
    let width = cfg.layers[attach - 1];
    if width < m {
        return Err(Error::Config(format!(
            "attach layer width {width} cannot host {m} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
    let net = Network::init(data.dim(), &spec, &mut rng)?;
    let priority = class_priority(data)?;
    let allocation = allocate_neurons(width, m, &priority)?;
    let head = LabelConsistencyHead::new(attach, cfg.alpha, allocation)?;
    Ok((net, head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn parses_overrides_comments_and_blanks() {
        let text = "\n# benchmark setup\nmode = baseline\nalpha = 0.2 # ignored in baseline\nlayers = 16, 8\nepochs=5\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.mode, Mode::Baseline);
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.layers, vec![16, 8]);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.lr, RunConfig::default().lr);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(
            parse_config("verbose = true"),
            Err(Error::Config(msg)) if msg.contains("unknown key")
        ));
        assert!(matches!(
            parse_config("lr = 0.1\nlr = 0.2"),
            Err(Error::Config(msg)) if msg.contains("duplicate")
        ));
        assert!(parse_config("just some words").is_err());
        assert!(parse_config("epochs = three").is_err());
        assert!(parse_config("layers = 4,0").is_err());
        assert!(parse_config("= 3").is_err());
    }

    #[test]
    fn attach_layer_auto_and_explicit() {
        let auto = parse_config("attach_layer = auto").unwrap();
        assert_eq!(auto.attach_layer, None);
        assert_eq!(auto.resolved_attach_layer(3), 2);
        assert_eq!(auto.resolved_attach_layer(1), 1);
        let fixed = parse_config("attach_layer = 2").unwrap();
        assert_eq!(fixed.attach_layer, Some(2));
    }

    #[test]
    fn train_config_conversion_checks_decay_pairing() {
        let cfg = parse_config("lr_decay_factor = 0.5").unwrap();
        assert!(cfg.train_config().is_err());
        let cfg = parse_config("lr_decay_factor = 0.5\nlr_decay_every = 10").unwrap();
        let tc = cfg.train_config().unwrap();
        assert_eq!(
            tc.lr_decay,
            Some(LrDecay {
                factor: 0.5,
                every: 10
            })
        );
    }
}
