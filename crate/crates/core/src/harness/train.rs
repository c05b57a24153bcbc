//! The training loop and its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{layer_diagnostics, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::{load_dataset, Dataset, Splits};
use crate::harness::snapshot::write_snapshot;
use crate::network::{count_correct, softmax_cross_entropy, Mode, Network};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "epoch,layer,split,loss,top1,alignment_deg,excess_kurtosis,mean_abs_weight,signal_cos";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    /// Per-layer weight diagnostics.
    Diag,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Diag => "diag",
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub layer: Option<usize>,
    pub split: Split,
    pub loss: Option<f64>,
    /// Fraction correct in `[0, 1]`.
    pub top1: Option<f64>,
    pub alignment_deg: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub mean_abs_weight: Option<f64>,
    pub signal_cos: Option<f64>,
}

impl MetricRow {
    fn eval(epoch: usize, split: Split, loss: f64, top1: f64) -> Self {
        MetricRow {
            epoch,
            layer: None,
            split,
            loss: Some(loss),
            top1: Some(top1),
            alignment_deg: None,
            excess_kurtosis: None,
            mean_abs_weight: None,
            signal_cos: None,
        }
    }

    fn diag(r: &DiagnosticsRecord) -> Self {
        MetricRow {
            epoch: r.epoch,
            layer: Some(r.layer),
            split: Split::Diag,
            loss: None,
            top1: None,
            alignment_deg: r.alignment_deg,
            excess_kurtosis: r.excess_kurtosis,
            mean_abs_weight: Some(r.mean_abs_weight),
            signal_cos: r.signal_cos,
        }
    }

    pub fn csv_line(&self) -> String {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map_or(String::new(), |v| v.to_string())
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            opt(self.layer),
            self.split.name(),
            opt(self.loss),
            opt(self.top1),
            opt(self.alignment_deg),
            opt(self.excess_kurtosis),
            opt(self.mean_abs_weight),
            opt(self.signal_cos),
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Final numbers of a run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub setting: String,
    pub seed: u64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub network: String,
    pub train_examples: usize,
    pub test_examples: usize,
    pub initial_test_loss: f64,
    pub initial_test_top1: f64,
    pub final_train_loss: f64,
    pub final_train_top1: f64,
    pub final_test_loss: f64,
    pub final_test_top1: f64,
    /// Per-layer diagnostics after the last epoch.
    pub layers: Vec<DiagnosticsRecord>,
}

/// Owns one network and its optimizer for the length of a run.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Splits,
    net: Network,
    opt: Optimizer,
    probe: (Tensor, Vec<usize>),
    epoch: usize,
    pub metrics: Vec<MetricRow>,
    pub log: Vec<String>,
    /// Mini-batch losses of the most recent training epoch, in order.
    pub batch_losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a Splits) -> Result<Self> {
        cfg.validate()?;
        if data.train.len() < 2 || data.test.is_empty() {
            return Err(Error::Data(format!(
                "need at least 2 training and 1 test example, got {} and {}",
                data.train.len(),
                data.test.len()
            )));
        }
        let spec = cfg.network_spec(data.train.example_shape(), data.classes);
        let net = Network::build(&spec, &cfg.assignment(), cfg.seed)?;
        let opt = Optimizer::new(cfg.optimizer.clone())?;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Probe, 0));
        order.truncate(cfg.probe_size.max(2));
        let probe = data.train.batch(&order)?;
        Ok(Trainer {
            cfg,
            data,
            net,
            opt,
            probe,
            epoch: 0,
            metrics: Vec::new(),
            log: Vec::new(),
            batch_losses: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Mean loss and accuracy over a dataset in evaluation mode.
    pub fn evaluate(&mut self, ds: &Dataset) -> Result<(f64, f64)> {
        self.net.set_mode(Mode::Eval);
        let result = (|| {
            let (mut loss, mut correct) = (0.0, 0);
            let idx: Vec<usize> = (0..ds.len()).collect();
            for chunk in idx.chunks(self.cfg.eval_batch_size) {
                let (x, labels) = ds.batch(chunk)?;
                let logits = self.net.forward(&x)?;
                loss += softmax_cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
                correct += count_correct(&logits, &labels);
            }
            Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
        })();
        self.net.set_mode(Mode::Train);
        result
    }

    /// Backward pass on the fixed probe batch in evaluation mode, then
    /// per-layer statistics. Parameters are not updated.
    fn diagnose(&mut self) -> Result<Vec<DiagnosticsRecord>> {
        self.net.set_mode(Mode::Eval);
        let result = (|| {
            let logits = self.net.forward(&self.probe.0)?;
            let (_, grad) = softmax_cross_entropy(&logits, &self.probe.1)?;
            self.net.backward(&grad)
        })();
        self.net.set_mode(Mode::Train);
        result?;
        Ok(layer_diagnostics(&self.net, self.epoch))
    }

    fn record_eval(&mut self, train: Option<(f64, f64)>) -> Result<()> {
        let data = self.data;
        let (train_loss, train_top1) = match train {
            Some(t) => t,
            None => self.evaluate(&data.train)?,
        };
        let (test_loss, test_top1) = self.evaluate(&data.test)?;
        let e = self.epoch;
        self.metrics.push(MetricRow::eval(e, Split::Train, train_loss, train_top1));
        self.metrics.push(MetricRow::eval(e, Split::Test, test_loss, test_top1));
        for r in self.diagnose()? {
            self.metrics.push(MetricRow::diag(&r));
        }
        self.log.push(format!(
            "epoch {e}: train loss {train_loss:.6} top1 {train_top1:.4}, test loss {test_loss:.6} top1 {test_top1:.4}"
        ));
        Ok(())
    }

    /// Rows for the untrained network: evaluation passes on both splits.
    pub fn record_initial(&mut self) -> Result<()> {
        self.record_eval(None)
    }

    /// One pass over the shuffled training split, then evaluation rows.
    /// The train row holds the running mean loss and accuracy of the pass.
    pub fn train_epoch(&mut self) -> Result<()> {
        let e = self.epoch;
        self.opt.set_epoch(e);
        let lr = self.opt.lr();
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, Stream::DataOrder, e as u64));
        let needs_pairs = self.cfg.has_batchnorm();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        self.batch_losses.clear();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if needs_pairs && chunk.len() < 2 {
                continue;
            }
            let at = |err: Error| {
                if is_non_finite(&err) {
                    Error::NonFinite(format!("epoch {}, batch {b}: {err}", e + 1))
                } else {
                    err
                }
            };
            let (x, labels) = self.data.train.batch(chunk)?;
            let logits = self.net.forward(&x).map_err(at)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels).map_err(at)?;
            self.net.backward(&grad).map_err(at)?;
            self.opt.step(self.net.params_mut()).map_err(at)?;
            self.batch_losses.push(loss);
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&logits, &labels);
            seen += chunk.len();
        }
        self.epoch += 1;
        self.log.push(format!("epoch {}: lr {lr}", self.epoch));
        let n = seen.max(1) as f64;
        self.record_eval(Some((loss_sum / n, correct as f64 / n)))
    }

    /// Initial rows followed by every configured epoch.
    pub fn run(&mut self) -> Result<()> {
        self.record_initial()?;
        while self.epoch < self.cfg.epochs {
            self.train_epoch()?;
        }
        Ok(())
    }

    fn summary(&self) -> Summary {
        let last = |split: Split, epoch: usize| {
            self.metrics
                .iter()
                .find(|r| r.split == split && r.epoch == epoch)
                .map_or((f64::NAN, f64::NAN), |r| (r.loss.unwrap_or(f64::NAN), r.top1.unwrap_or(f64::NAN)))
        };
        let (initial_test_loss, initial_test_top1) = last(Split::Test, 0);
        let (final_train_loss, final_train_top1) = last(Split::Train, self.epoch);
        let (final_test_loss, final_test_top1) = last(Split::Test, self.epoch);
        Summary {
            setting: self.cfg.assignment().label(),
            seed: self.cfg.seed,
            epochs: self.epoch,
            optimizer: self.cfg.optimizer.kind,
            lr: self.cfg.optimizer.lr,
            network: self.net.describe(),
            train_examples: self.data.train.len(),
            test_examples: self.data.test.len(),
            initial_test_loss,
            initial_test_top1,
            final_train_loss,
            final_train_top1,
            final_test_loss,
            final_test_top1,
            layers: layer_diagnostics(&self.net, self.epoch),
        }
    }
}

fn is_non_finite(err: &Error) -> bool {
    match err {
        Error::NonFinite(_) => true,
        Error::Layer { source, .. } => is_non_finite(source),
        _ => false,
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricRow>,
    pub summary: Summary,
    pub network: Network,
}

impl RunResult {
    pub fn csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn rows(&self, split: Split) -> impl Iterator<Item = &MetricRow> {
        self.metrics.iter().filter(move |r| r.split == split)
    }
}

/// Trains on already-loaded data without touching the filesystem.
pub fn train(cfg: &TrainConfig, data: &Splits) -> Result<RunResult> {
    let mut t = Trainer::new(cfg, data)?;
    t.run()?;
    let summary = t.summary();
    Ok(RunResult {
        metrics: t.metrics,
        summary,
        network: t.net,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads the data, trains, and writes `metrics.csv`, `summary.json`,
/// `run.log` and `snapshot/` under `out` (or the config's `out`, if any).
/// A failed run still leaves its log and the metrics gathered so far.
pub fn run(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    let out: Option<PathBuf> = out.map(Path::to_path_buf).or_else(|| cfg.out.clone());
    let started = Instant::now();
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    let mut t = Trainer::new(cfg, &data)?;
    let outcome = t.run();
    let Some(dir) = out else {
        outcome?;
        let summary = t.summary();
        return Ok(RunResult {
            metrics: t.metrics,
            summary,
            network: t.net,
        });
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&t.metrics))?;
    let mut log = String::new();
    let _ = writeln!(log, "setting {} seed {}", cfg.assignment().label(), cfg.seed);
    let _ = writeln!(log, "network {}", t.net.describe());
    for line in &t.log {
        let _ = writeln!(log, "{line}");
    }
    match &outcome {
        Ok(()) => {
            let _ = writeln!(log, "finished in {:.1}s", started.elapsed().as_secs_f64());
        }
        Err(e) => {
            let _ = writeln!(log, "aborted after {} completed epochs: {e}", t.epoch);
        }
    }
    write(&dir.join("run.log"), &log)?;
    outcome?;
    let summary = t.summary();
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("summary.json"), &json)?;
    write_snapshot(&t.net, &dir.join("snapshot"), t.epoch, cfg.seed, &summary.setting)?;
    Ok(RunResult {
        metrics: t.metrics,
        summary,
        network: t.net,
    })
}

/// Independent replicas of `cfg`, one per seed, run on separate threads.
/// Each replica writes to `out/seed-<seed>` when an output directory is
/// set.
pub fn run_replicas(cfg: &TrainConfig, seeds: &[u64], out: Option<&Path>) -> Result<Vec<RunResult>> {
    let out = out.map(Path::to_path_buf).or_else(|| cfg.out.clone());
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let c = TrainConfig { seed, ..cfg.clone() };
                let dir = out.as_ref().map(|d| d.join(format!("seed-{seed}")));
                s.spawn(move || run(&c, dir.as_deref()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replica thread panicked"))
            .collect()
    })
}
