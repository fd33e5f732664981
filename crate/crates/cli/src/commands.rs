//! One function per subcommand. Each reads its inputs from the resolved
//! configuration, writes artifacts under `cfg.out` and returns what it
//! reported.

use std::path::{Path, PathBuf};
use std::time::Instant;

use compresskit::data::{load_cifar10_binary, load_fashion_mnist, make_synthetic, split, Dataset, SyntheticKind};
use compresskit::nn::{format as cknn, Network};
use compresskit::prune::{
    compression_rate, format_rate, prune_retrain, prune_until_decline, sensitivity_scan, SensitivityReport,
};
use compresskit::quant::{format as ckq8, quantize_network, ModelSize, QuantNetwork};
use compresskit::train::{evaluate, fit, StopRule, TrainReport};
use compresskit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::report::{self, BenchResult, Table1Row, Table2Row, Table3Row};
use crate::CliError;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "dataset directory {} does not exist",
            path.display()
        )))
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Splits, CliError> {
    let v = cfg.val_fraction;
    let (train_full, test) = match cfg.dataset {
        DatasetSource::FashionMnist => {
            let dir = cfg.data_root().join("fashion-mnist");
            require_dir(&dir)?;
            load_fashion_mnist(&dir)?
        }
        DatasetSource::Cifar10 => {
            let dir = cfg.data_root().join("cifar-10-batches-bin");
            require_dir(&dir)?;
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar10_binary(&train)?,
                load_cifar10_binary(&[dir.join("test_batch.bin")])?,
            )
        }
        DatasetSource::SyntheticStripes | DatasetSource::SyntheticBlobs => {
            let kind = if cfg.dataset == DatasetSource::SyntheticStripes {
                SyntheticKind::StripedImages
            } else {
                SyntheticKind::Blobs
            };
            let all = make_synthetic(kind, cfg.synthetic_count, cfg.synthetic_classes, cfg.split_seed)?;
            let (train, val, test) = split(&all, [1.0 - 2.0 * v, v, v], cfg.split_seed)?;
            let train = match cfg.subset {
                Some(n) => train.subset_per_class(n),
                None => train,
            };
            return Ok(Splits { train, val, test });
        }
    };
    let train_full = match cfg.subset {
        Some(n) => train_full.subset_per_class(n),
        None => train_full,
    };
    let (train, val, _) = split(&train_full, [1.0 - v, v, 0.0], cfg.split_seed)?;
    Ok(Splits { train, val, test })
}

/// A float or quantised model file, told apart by its magic.
pub enum Model {
    Float(Network),
    Quant(QuantNetwork),
}

impl Model {
    pub fn load(path: &Path) -> Result<Model, CliError> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingArtifact(format!("model file {} not found", path.display()))
            } else {
                CliError::Io(format!("{}: {e}", path.display()))
            }
        })?;
        if bytes.starts_with(ckq8::MAGIC) {
            Ok(Model::Quant(ckq8::decode(&bytes, path)?))
        } else {
            Ok(Model::Float(cknn::decode(&bytes, path)?))
        }
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, CliError> {
        Ok(match self {
            Model::Float(n) => n.predict(batch)?,
            Model::Quant(q) => q.forward(batch)?,
        })
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64, CliError> {
        Ok(match self {
            Model::Float(n) => evaluate(n, data)?.accuracy,
            Model::Quant(q) => q.accuracy(data)?,
        })
    }

    /// Unmasked weights plus biases and other parameters; for quantised
    /// models, weights off their zero point plus biases.
    pub fn params(&self) -> usize {
        match self {
            Model::Float(n) => n.param_count(),
            Model::Quant(q) => q
                .linear_layers()
                .iter()
                .map(|l| {
                    let per = l.weights.per_channel();
                    let live = l
                        .weights
                        .values
                        .data()
                        .iter()
                        .enumerate()
                        .filter(|(i, &v)| v != l.weights.params[i / per].zero_point)
                        .count();
                    live + l.bias.len()
                })
                .sum(),
        }
    }

    pub fn size_bytes(&self) -> u64 {
        match self {
            Model::Float(n) => n.model_size_bytes(),
            Model::Quant(q) => q.model_size_bytes(),
        }
    }
}

fn load_float(path: &Path) -> Result<Network, CliError> {
    match Model::load(path)? {
        Model::Float(n) => Ok(n),
        Model::Quant(_) => Err(CliError::Config(format!(
            "{} is a quantised model; this command needs a float model",
            path.display()
        ))),
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn input_model(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.model.clone().unwrap_or_else(|| cfg.out.join(default))
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

pub struct TrainOutcome {
    pub model_path: PathBuf,
    pub network: Network,
    pub report: TrainReport,
    pub test_accuracy: f64,
}

fn train_reference(cfg: &ExperimentConfig, data: &Splits) -> Result<(Network, TrainReport), CliError> {
    let mut net = Network::build(
        cfg.arch_tag()?,
        data.train.sample_shape(),
        data.train.classes,
        cfg.width,
        cfg.seed,
    )?;
    let report = fit(
        &mut net,
        &data.train,
        &data.val,
        &cfg.train_config(),
        StopRule::EarlyStop,
    )?;
    Ok((net, report))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let (network, report) = train_reference(cfg, &data)?;
    let model_path = out.join("model.cknn");
    cknn::save(&network, &model_path)?;
    report::write_text(&out.join("train_report.csv"), &report.to_csv())?;
    let test_accuracy = evaluate(&network, &data.test)?.accuracy;
    println!(
        "trained {} ({} params) for {} epochs: best val {:.2}%, test {:.2}%",
        network.arch,
        network.param_count(),
        report.epochs.len(),
        pct(report.best_val_acc),
        pct(test_accuracy)
    );
    Ok(TrainOutcome {
        model_path,
        network,
        report,
        test_accuracy,
    })
}

pub fn cmd_scan(cfg: &ExperimentConfig) -> Result<SensitivityReport, CliError> {
    let net = load_float(&input_model(cfg, "model.cknn"))?;
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let report = sensitivity_scan(
        &net,
        &data.train,
        &data.val,
        &cfg.grid,
        &cfg.scan_config(),
        cfg.scan_scope()?,
        &cfg.layer_filter(),
    )?;
    report::write_text(&out.join("sensitivity.csv"), &report.to_csv())?;
    println!("scanned {} grid points, {} rows", report.grid.len(), report.rows.len());
    Ok(report)
}

pub struct PruneOutcome {
    pub rows: Vec<Table1Row>,
    pub network: Network,
    pub model_path: PathBuf,
}

pub fn cmd_prune(cfg: &ExperimentConfig) -> Result<PruneOutcome, CliError> {
    let reference = load_float(&input_model(cfg, "model.cknn"))?;
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let mut pruned = reference.clone();
    prune_retrain(&mut pruned, &data.train, &data.val, &cfg.prune_config()?)?;
    let (ref_params, params) = (reference.param_count(), pruned.param_count());
    let name = reference.arch.to_string();
    let rows = vec![
        Table1Row {
            network: format!("{name} -- Reference"),
            accuracy: pct(evaluate(&reference, &data.test)?.accuracy),
            params: ref_params,
            compression_rate: format_rate(1.0),
        },
        Table1Row {
            network: format!("{name} -- Pruned"),
            accuracy: pct(evaluate(&pruned, &data.test)?.accuracy),
            params,
            compression_rate: format_rate(compression_rate(ref_params, params)?),
        },
    ];
    let model_path = out.join("pruned.cknn");
    cknn::save(&pruned, &model_path)?;
    report::write_csv(&out.join("table1.csv"), &rows)?;
    report::write_text(&out.join("table1.md"), &report::table1_markdown(&rows))?;
    print!("{}", report::table1_markdown(&rows));
    Ok(PruneOutcome {
        rows,
        network: pruned,
        model_path,
    })
}

/// Per-run latencies in milliseconds of `reps` timed batch-1 forwards after
/// `warmup` untimed ones.
pub fn measure_latency(model: &Model, sample: &Tensor, warmup: usize, reps: usize) -> Result<Vec<f64>, CliError> {
    for _ in 0..warmup {
        std::hint::black_box(model.logits(sample)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(model.logits(std::hint::black_box(sample))?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(times)
}

/// `(mean, sample standard deviation, median)`.
pub fn latency_stats(times: &[f64]) -> (f64, f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = if times.len() > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[m - 1] + sorted[m]) / 2.0
    } else {
        sorted[m]
    };
    (mean, var.sqrt(), median)
}

fn first_sample(data: &Dataset) -> Tensor {
    data.batch(&[0]).0
}

fn bench_model(cfg: &ExperimentConfig, path: &Path, data: &Splits) -> Result<(Model, BenchResult), CliError> {
    let model = Model::load(path)?;
    let scored = if cfg.eval_split == "val" { &data.val } else { &data.test };
    let times = measure_latency(&model, &first_sample(scored), cfg.warmup, cfg.repetitions)?;
    let (mean_ms, std_ms, median_ms) = latency_stats(&times);
    let result = BenchResult {
        model: path.display().to_string(),
        accuracy: pct(model.accuracy(scored)?),
        params: model.params(),
        size_bytes: model.size_bytes(),
        mean_ms,
        std_ms,
        median_ms,
        samples: times.len(),
        speedup: None,
    };
    Ok((model, result))
}

pub struct QuantizeOutcome {
    pub rows: Vec<Table2Row>,
    pub network: QuantNetwork,
    pub model_path: PathBuf,
    pub calibration: Tensor,
}

pub fn cmd_quantize(cfg: &ExperimentConfig) -> Result<QuantizeOutcome, CliError> {
    let source = input_model(cfg, "pruned.cknn");
    let float = load_float(&source)?;
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let n = cfg.calib_size.min(data.val.len());
    let (calibration, _) = data.val.batch(&(0..n).collect::<Vec<_>>());
    let qnet = quantize_network(&float, &calibration, cfg.bit_width)?;
    let model_path = out.join("quantized.ckq8");
    ckq8::save(&qnet, &model_path)?;

    let sample = first_sample(&data.test);
    let mut rows = Vec::new();
    let mut base_acc = None;
    for (label, model) in [
        ("Input", Model::Float(float)),
        ("Quantised", Model::Quant(qnet.clone())),
    ] {
        let acc = pct(model.accuracy(&data.test)?);
        let times = measure_latency(&model, &sample, cfg.warmup, cfg.repetitions)?;
        let (mean, _, _) = latency_stats(&times);
        let bytes = model.size_bytes();
        rows.push(Table2Row {
            network: format!("{} -- {label}", qnet.arch),
            accuracy: acc,
            accuracy_delta: acc - *base_acc.get_or_insert(acc),
            size_mb: bytes as f64 / (1u64 << 20) as f64,
            size_bytes: bytes,
            latency_ms: mean,
        });
    }
    report::write_csv(&out.join("table2.csv"), &rows)?;
    report::write_text(&out.join("table2.md"), &report::table2_markdown(&rows))?;
    print!("{}", report::table2_markdown(&rows));
    Ok(QuantizeOutcome {
        rows,
        network: qnet,
        model_path,
        calibration,
    })
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<BenchResult, CliError> {
    let path = input_model(cfg, "model.cknn");
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let (_, mut result) = bench_model(cfg, &path, &data)?;
    let mut rows = Vec::new();
    if let Some(reference) = &cfg.reference {
        let (_, base) = bench_model(cfg, reference, &data)?;
        result.speedup = Some(base.median_ms / result.median_ms);
        rows.push(base);
    }
    rows.insert(0, result.clone());
    report::write_csv(&out.join("bench.csv"), &rows)?;
    println!(
        "{}: accuracy {:.2}%, {} params, {} bytes, latency mean {:.4} ms (std {:.4}, median {:.4}) over {} runs{}",
        result.model,
        result.accuracy,
        result.params,
        result.size_bytes,
        result.mean_ms,
        result.std_ms,
        result.median_ms,
        result.samples,
        result.speedup.map(|s| format!(", speedup {s:.2}×")).unwrap_or_default()
    );
    Ok(result)
}

pub struct OverfitOutcome {
    pub rows: Vec<Table3Row>,
    pub overfit_report: TrainReport,
    pub steps: Vec<compresskit::prune::PruneStep>,
}

/// Reference (given or freshly trained), then the same architecture without
/// dropout and batch norm trained from a fresh initialisation until the
/// train-accuracy target, then stepwise pruning until validation accuracy
/// drops.
pub fn cmd_overfit_study(cfg: &ExperimentConfig) -> Result<OverfitOutcome, CliError> {
    let data = load_datasets(cfg)?;
    let out = out_dir(cfg)?;
    let reference = match &cfg.model {
        Some(path) => load_float(path)?,
        None => {
            let (net, _) = train_reference(cfg, &data)?;
            cknn::save(&net, &out.join("model.cknn"))?;
            net
        }
    };
    let mut overfitted = reference.strip_regularisation()?;
    overfitted.initialize(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)));
    let overfit_cfg = compresskit::train::TrainConfig {
        max_epochs: cfg.overfit_epochs,
        ..cfg.train_config()
    };
    let overfit_report = fit(
        &mut overfitted,
        &data.train,
        &data.val,
        &overfit_cfg,
        StopRule::TrainAccTarget(cfg.overfit_target),
    )?;
    if !overfit_report.target_reached {
        return Err(CliError::Protocol(format!(
            "train accuracy target {:.2}% not reached in {} epochs (achieved {:.2}%)",
            pct(cfg.overfit_target),
            cfg.overfit_epochs,
            pct(overfit_report.final_train_acc().unwrap_or(f64::NAN))
        )));
    }
    cknn::save(&overfitted, &out.join("overfitted.cknn"))?;
    let stepwise = prune_until_decline(
        &overfitted,
        &data.train,
        &data.val,
        cfg.prune_step,
        &cfg.prune_config()?,
    )?;
    cknn::save(&stepwise.network, &out.join("overfitted_pruned.cknn"))?;

    let name = reference.arch.to_string();
    let mut rows = Vec::new();
    for (label, net) in [
        ("Reference", &reference),
        ("Overfitted", &overfitted),
        ("Pruned", &stepwise.network),
    ] {
        rows.push(Table3Row {
            network: format!("{name} -- {label}"),
            test_accuracy: pct(evaluate(net, &data.test)?.accuracy),
            train_accuracy: pct(evaluate(net, &data.train)?.accuracy),
            params: net.param_count(),
        });
    }
    report::write_csv(&out.join("table3.csv"), &rows)?;
    report::write_text(&out.join("table3.md"), &report::table3_markdown(&rows))?;
    print!("{}", report::table3_markdown(&rows));
    Ok(OverfitOutcome {
        rows,
        overfit_report,
        steps: stepwise.steps,
    })
}
