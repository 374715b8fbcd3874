//! Command-line front end.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `gradcheck`, `analyze`.
//! Every failure prints a single `error[category]: message` line to stderr
//! and exits nonzero; exit code 0 means the command fully succeeded.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lcnn::analysis::{class_profiles, export_report, neuron_profiles, write_class_means};
use lcnn::classify::{
    adaptive_bandwidth, embed, knn_predict, knn_probabilities, predict_argmax, ReferenceBank,
};
use lcnn::config::{build_model, load_config, RunConfig};
use lcnn::data::{gen_synthetic_clusters, load_csv, save_csv, LabelColumn, Split};
use lcnn::gradcheck::{self, GradCheckConfig};
use lcnn::model::{load_model, save_model};
use lcnn::optim::{train, Mode};
use lcnn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lcnn",
    version,
    about = "Train and analyze networks with a label-consistency loss on a late hidden layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset CSV
    GenData(GenDataArgs),
    /// Train a model; writes model.bin, init_model.bin, record.csv and manifest.txt
    Train(TrainArgs),
    /// Evaluate a trained model with the argmax or k-NN scheme
    Eval(EvalArgs),
    /// Verify every analytic gradient block against finite differences
    Gradcheck(GradcheckArgs),
    /// Export per-class entropy and per-neuron class-distribution reports
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of classes
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Samples per class (split 3:1 into train/test)
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Base cluster standard deviation; class c uses spread*(1 + c/classes)
    #[arg(long, default_value_t = 0.4)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags below override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Label column: header name or 0-based index
    #[arg(long, default_value = "label")]
    label_col: String,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
    /// Start from a serialized model instead of a fresh seeded one; lets
    /// several modes share one initial model
    #[arg(long)]
    init_model: Option<PathBuf>,

    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// 1-based hidden-layer index, or "auto" for the last hidden layer
    #[arg(long)]
    attach_layer: Option<String>,
    #[arg(long)]
    knn_k: Option<usize>,
    /// Comma-separated hidden widths, e.g. 64,32
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    /// Classification scheme: argmax or knn
    #[arg(long)]
    scheme: String,
    /// Neighborhood size for the knn scheme
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Which split to evaluate: test or train
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write Gaussian-kernel class probabilities (knn scheme only)
    #[arg(long, default_value_t = false)]
    probs: bool,
    /// Gaussian kernel bandwidth; defaults to each query's mean neighbor
    /// distance
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Weight assigned to classes absent from the neighbor set
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    input_dim: usize,
    /// Comma-separated hidden widths; the head attaches to the last one
    #[arg(long, default_value = "6,4")]
    layers: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    points: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_col: String,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also dump per-class mean representations for plotting
    #[arg(long, default_value_t = false)]
    dump_means: bool,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|()| 0),
        Command::Train(args) => cmd_train(args).map(|()| 0),
        Command::Eval(args) => cmd_eval(args).map(|()| 0),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Analyze(args) => cmd_analyze(args).map(|()| 0),
    }
}

fn label_column(arg: &str) -> LabelColumn {
    match arg.parse::<usize>() {
        Ok(idx) => LabelColumn::Index(idx),
        Err(_) => LabelColumn::Name(arg.to_string()),
    }
}

fn parse_split(arg: &str) -> Result<Split> {
    match arg {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "split must be train or test, got '{other}'"
        ))),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let data = gen_synthetic_clusters(
        args.classes,
        args.dim,
        args.per_class,
        args.spread,
        args.seed,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_csv(&data, &args.out)?;
    let train = data.split_indices(Split::Train).len();
    let test = data.split_indices(Split::Test).len();
    println!(
        "wrote {} ({} classes, dim {}, {train} train / {test} test)",
        args.out.display(),
        data.num_classes(),
        data.dim()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let overrides: Vec<(&str, Option<String>)> = vec![
        ("mode", args.mode.clone()),
        ("alpha", args.alpha.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("momentum", args.momentum.map(|v| v.to_string())),
        ("batch", args.batch.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("attach_layer", args.attach_layer.clone()),
        ("knn_k", args.knn_k.map(|v| v.to_string())),
        ("layers", args.layers.clone()),
        ("weight_decay", args.weight_decay.map(|v| v.to_string())),
        (
            "lr_decay_factor",
            args.lr_decay_factor.map(|v| v.to_string()),
        ),
        ("lr_decay_every", args.lr_decay_every.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(value) = value {
            cfg.apply(key, &value)?;
        }
    }
    if cfg.mode == Mode::Baseline && cfg.alpha != 0.0 {
        eprintln!(
            "warning: alpha = {} is ignored in baseline mode; training with alpha = 0",
            cfg.alpha
        );
    }

    let data = load_csv(&args.data, &label_column(&args.label_col))?;
    let (net, head) = match &args.init_model {
        Some(path) => {
            let (net, head) = load_model(path)?;
            let head = head.ok_or_else(|| {
                Error::Config(format!("init model {} carries no head", path.display()))
            })?;
            (net, head)
        }
        None => build_model(&cfg, &data)?,
    };

    std::fs::create_dir_all(&args.out_dir)?;
    let init_path = args.out_dir.join("init_model.bin");
    save_model(&net, Some(&head), &init_path)?;

    let train_cfg = cfg.train_config()?;
    let (net, head, record) = train(net, head, &data, &train_cfg)?;

    let model_path = args.out_dir.join("model.bin");
    save_model(&net, Some(&head), &model_path)?;
    let record_path = args.out_dir.join("record.csv");
    record.write_csv(&record_path)?;

    let manifest_path = args.out_dir.join("manifest.txt");
    let fingerprint = sha256_hex(&args.data)?;
    let manifest = format!(
        "mode = {}\nseed = {}\ndataset = {}\ndataset_sha256 = {fingerprint}\ninit_model = {}\nmodel = {}\nrecord = {}\nclasses = {}\ntrain_samples = {}\ntest_samples = {}\nfinal_loss = {}\nfinal_train_err = {}\nfinal_test_err = {}\nwall_time_secs = {}\n# config\n{}",
        train_cfg.mode.as_str(),
        train_cfg.seed,
        args.data.display(),
        init_path.display(),
        model_path.display(),
        record_path.display(),
        data.num_classes(),
        data.split_indices(Split::Train).len(),
        data.split_indices(Split::Test).len(),
        record.epochs.last().map_or(f64::NAN, |e| e.loss),
        record.final_train_err(),
        record.final_test_err(),
        record.wall_time_secs,
        cfg.to_text(),
    );
    std::fs::write(&manifest_path, manifest)?;

    println!(
        "trained {} epochs: final train err {:.4}, test err {:.4}; artifacts in {}",
        train_cfg.epochs,
        record.final_train_err(),
        record.final_test_err(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (net, head) = load_model(&args.model)?;
    let data = load_csv(&args.data, &label_column(&args.label_col))?;
    let split = parse_split(&args.split)?;
    let m = data.num_classes();
    if data.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset dimension {} does not match model input {}",
            data.dim(),
            net.input_dim()
        )));
    }

    let x = data.split_features(split);
    let truth = data.split_labels(split);
    if truth.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset has no {} samples",
            args.split
        )));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let predictions = match args.scheme.as_str() {
        "argmax" => {
            if net.output_dim() != m {
                return Err(Error::InvalidArgument(format!(
                    "model outputs {} scores but the dataset has {m} classes",
                    net.output_dim()
                )));
            }
            predict_argmax(&net, &x)?
        }
        "knn" => {
            let head = head
                .as_ref()
                .ok_or_else(|| Error::Config("model carries no head; knn needs one".to_string()))?;
            let bank = ReferenceBank::build(
                &net,
                head,
                &data.split_features(Split::Train),
                &data.split_labels(Split::Train),
                m,
            )?;
            let queries = embed(&net, head, &x)?;
            let predictions = knn_predict(&bank, &queries, args.k)?;
            if args.probs {
                let mut out = String::from("sample_id");
                for c in 0..m {
                    out.push_str(&format!(",p{c}"));
                }
                out.push('\n');
                for j in 0..queries.cols() {
                    let q = queries.column_vec(j);
                    let bw = match args.bandwidth {
                        Some(b) => b,
                        None => adaptive_bandwidth(&bank, &q, args.k)?,
                    };
                    let p = knn_probabilities(&bank, &q, args.k, bw, args.floor)?;
                    out.push_str(&j.to_string());
                    for v in p {
                        out.push_str(&format!(",{v}"));
                    }
                    out.push('\n');
                }
                std::fs::write(args.out_dir.join("probabilities.csv"), out)?;
            }
            predictions
        }
        other => {
            return Err(Error::Config(format!(
                "scheme must be argmax or knn, got '{other}'"
            )))
        }
    };

    let mut pred_csv = String::from("sample_id,predicted,true,correct\n");
    for (j, (&p, &t)) in predictions.iter().zip(&truth).enumerate() {
        pred_csv.push_str(&format!("{j},{p},{t},{}\n", u8::from(p == t)));
    }
    std::fs::write(args.out_dir.join("predictions.csv"), pred_csv)?;

    let mut confusion = vec![vec![0usize; m]; m];
    for (&p, &t) in predictions.iter().zip(&truth) {
        confusion[t][p] += 1;
    }
    let mut conf_csv = String::from("true\\pred");
    for c in 0..m {
        conf_csv.push_str(&format!(",{c}"));
    }
    conf_csv.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        conf_csv.push_str(&t.to_string());
        for &v in row {
            conf_csv.push_str(&format!(",{v}"));
        }
        conf_csv.push('\n');
    }
    std::fs::write(args.out_dir.join("confusion.csv"), conf_csv)?;

    let correct: usize = predictions
        .iter()
        .zip(&truth)
        .filter(|(p, t)| p == t)
        .count();
    let accuracy = correct as f64 / truth.len() as f64;
    let mut metrics = format!(
        "metric,value\nscheme,{}\nsplit,{}\nsamples,{}\naccuracy,{accuracy}\n",
        args.scheme,
        args.split,
        truth.len()
    );
    for c in 0..m {
        let support = truth.iter().filter(|&&t| t == c).count();
        let hit = predictions
            .iter()
            .zip(&truth)
            .filter(|(p, t)| **t == c && p == t)
            .count();
        let acc = if support == 0 {
            f64::NAN
        } else {
            hit as f64 / support as f64
        };
        metrics.push_str(&format!("class_{c}_accuracy,{acc}\n"));
    }
    std::fs::write(args.out_dir.join("metrics.csv"), metrics)?;

    println!(
        "{} accuracy on {} split: {:.4} ({} / {})",
        args.scheme,
        args.split,
        accuracy,
        correct,
        truth.len()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let hidden: std::result::Result<Vec<usize>, _> =
        args.layers.split(',').map(|w| w.trim().parse()).collect();
    let hidden = hidden.map_err(|_| Error::Config(format!("bad layer list '{}'", args.layers)))?;
    let cfg = GradCheckConfig {
        seed: args.seed,
        input_dim: args.input_dim,
        hidden,
        num_classes: args.classes,
        batch: args.batch,
        points: args.points,
        step: args.step,
        tolerance: args.tolerance,
        alpha: args.alpha,
        // Hidden sabotage hook so the checker itself can be shown to catch
        // a wrong gradient.
        flip_sign: std::env::var("LCNN_GRADCHECK_FLIP").is_ok_and(|v| v == "1"),
    };
    let report = gradcheck::run(&cfg)?;
    for block in &report.blocks {
        println!(
            "{}: max relative error {:.3e} over {} entries x {} points ... {}",
            block.name,
            block.max_rel_err,
            block.entries / report.points,
            report.points,
            if block.max_rel_err <= report.tolerance {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    if report.passed() {
        println!("gradcheck passed at tolerance {:.1e}", report.tolerance);
        Ok(0)
    } else {
        let failed = report
            .blocks
            .iter()
            .filter(|b| b.max_rel_err > report.tolerance)
            .count();
        eprintln!(
            "error[gradcheck]: {failed} block(s) exceeded tolerance {:.1e}",
            report.tolerance
        );
        Ok(1)
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let (net, head) = load_model(&args.model)?;
    let head = head.ok_or_else(|| {
        Error::Config("model carries no head; analysis needs its allocation".to_string())
    })?;
    let data = load_csv(&args.data, &label_column(&args.label_col))?;
    let split = parse_split(&args.split)?;
    if data.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset dimension {} does not match model input {}",
            data.dim(),
            net.input_dim()
        )));
    }
    if data.num_classes() != head.allocation().num_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the head allocates {}",
            data.num_classes(),
            head.allocation().num_classes()
        )));
    }

    let x = data.split_features(split);
    let labels = data.split_labels(split);
    if labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset has no {} samples",
            args.split
        )));
    }
    let trace = net.forward(&x)?;
    let reps = trace.activation(head.attach_layer());

    let classes = class_profiles(reps, &labels, data.num_classes(), true)?;
    let neurons = neuron_profiles(reps, &labels, head.allocation())?;
    export_report(&classes, &neurons, &args.out_dir)?;
    if args.dump_means {
        write_class_means(&classes, &args.out_dir.join("class_means.csv"))?;
    }

    let mean_entropy: f64 = {
        let hs: Vec<f64> = classes.iter().filter_map(|p| p.entropy_bits).collect();
        hs.iter().sum::<f64>() / hs.len().max(1) as f64
    };
    println!(
        "analyzed {} samples at layer {}: mean class entropy {:.3} bits; reports in {}",
        labels.len(),
        head.attach_layer(),
        mean_entropy,
        args.out_dir.display()
    );
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
