use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{partition, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, AdaGrad, AdaGradState, Mlp, ModelParams};
use crate::net::{run_free, run_schedule, Event, LinkStats, Network, ScheduleMode, TraceRecord};
use crate::server::{ClientState, PayloadKind, ShardState, Topology};

use super::node::{BatchCursor, Node, TAG_INIT, TAG_SCHED};
use super::{DataSource, RunConfig};

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Worker steps taken so far, summed over workers.
    pub step: u64,
    /// Fraction of the configured epochs completed, scaled to epochs.
    pub epoch: f64,
    /// Mean minibatch loss since the previous record.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    /// Cumulative payload bytes over all links.
    pub payload_bytes: u64,
    /// Cumulative bytes the same transmissions would take uncompressed.
    pub dense_equivalent_bytes: u64,
    pub compression_ratio: Option<f64>,
    /// Share of gradient entries pushed since the previous record.
    pub kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_accuracy: f64,
    pub steps: u64,
    pub total_payload_bytes: u64,
    pub total_header_bytes: u64,
    pub dense_equivalent_bytes: u64,
    pub compression_ratio: Option<f64>,
    /// Payload bytes of pushes and of pull responses; together they make up
    /// `total_payload_bytes`.
    pub push_payload_bytes: u64,
    pub pull_payload_bytes: u64,
    /// Dense-equivalent bytes of pushes divided by their payload bytes.
    pub push_compression_ratio: Option<f64>,
    /// Mean training loss of each epoch, over all workers.
    pub epoch_train_loss: Vec<f64>,
    /// Traffic sent by each node.
    pub node_sent: Vec<LinkStats>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: Summary,
    pub metrics: Vec<MetricsRecord>,
    /// Server-side parameters, assembled from every shard.
    pub params: ModelParams,
    /// Each worker's final replica.
    pub replicas: Vec<ModelParams>,
    /// (step, milliseconds since start) for every metrics record.
    pub timing: Vec<(u64, f64)>,
    pub trace: Option<Vec<TraceRecord>>,
}

impl RunReport {
    /// Writes metrics.csv, summary.json, checkpoint.bin, timing.csv and,
    /// when traced, trace.csv into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for m in &self.metrics {
            w.serialize(m)?;
        }
        w.flush()?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        save_checkpoint(&self.params, dir.join("checkpoint.bin"))?;
        let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
        w.write_record(["step", "wall_clock_ms"])?;
        for (step, ms) in &self.timing {
            w.write_record([step.to_string(), format!("{ms:.3}")])?;
        }
        w.flush()?;
        if let Some(trace) = &self.trace {
            let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
            for r in trace {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn classes(source: &DataSource) -> usize {
    match source {
        DataSource::Mnist { .. } => 10,
        DataSource::Synth { classes, .. } => *classes,
    }
}

/// Loads the configured data, runs, and writes outputs if `config.out` is set.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let (train, test) = config.data.load(config.seed)?;
    run_with_data(config, &train, &test)
}

struct Prepared {
    train: Dataset,
    test: Dataset,
    mlp: Mlp,
    init: ModelParams,
}

fn prepare(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Prepared> {
    config.validate()?;
    let train = match config.train_limit {
        Some(n) => train.truncated(n),
        None => train.clone(),
    };
    let test = match config.eval_limit {
        Some(n) => test.truncated(n),
        None => test.clone(),
    };
    if train.len() < config.workers {
        return Err(Error::Config(format!(
            "{} training examples cannot feed {} workers",
            train.len(),
            config.workers
        )));
    }
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if train.dim != test.dim {
        return Err(Error::Config("training and evaluation data differ in dimension".into()));
    }
    let mlp = Mlp::new(config.model_spec(train.dim, classes(&config.data)))?;
    let init = mlp.init(derive_seed(&[config.seed, TAG_INIT]));
    Ok(Prepared { train, test, mlp, init })
}

/// Collects metrics records as training progresses.
struct Recorder<'a> {
    mlp: &'a Mlp,
    test: &'a Dataset,
    interval: u64,
    steps_per_epoch: u64,
    epochs: usize,
    started: Instant,
    global_steps: u64,
    last: (f64, u64, u64, u64),
    metrics: Vec<MetricsRecord>,
    timing: Vec<(u64, f64)>,
}

/// Totals a recorder reads at each record.
struct Snapshot {
    loss_sum: f64,
    loss_count: u64,
    push_entries: u64,
    push_coverage: u64,
    payload_bytes: u64,
    dense_equivalent: u64,
}

impl<'a> Recorder<'a> {
    fn new(mlp: &'a Mlp, test: &'a Dataset, config: &RunConfig, steps_per_epoch: u64) -> Self {
        Self {
            mlp,
            test,
            interval: config.eval_interval,
            steps_per_epoch,
            epochs: config.epochs,
            started: Instant::now(),
            global_steps: 0,
            last: (0.0, 0, 0, 0),
            metrics: Vec::new(),
            timing: Vec::new(),
        }
    }

    fn due(&self) -> bool {
        self.global_steps.is_multiple_of(self.interval)
    }

    fn record(&mut self, params: &ModelParams, s: Snapshot) -> Result<()> {
        let accuracy = self.mlp.accuracy(params, &self.test.images, &self.test.labels)?;
        let (loss0, count0, entries0, coverage0) = self.last;
        let loss_n = s.loss_count - count0;
        let coverage = s.push_coverage - coverage0;
        let record = MetricsRecord {
            step: self.global_steps,
            epoch: (self.global_steps as f64 / self.steps_per_epoch as f64).min(self.epochs as f64),
            train_loss: (loss_n > 0).then(|| (s.loss_sum - loss0) / loss_n as f64),
            eval_accuracy: accuracy,
            payload_bytes: s.payload_bytes,
            dense_equivalent_bytes: s.dense_equivalent,
            compression_ratio: (s.payload_bytes > 0).then(|| s.dense_equivalent as f64 / s.payload_bytes as f64),
            kept_fraction: (coverage > 0).then(|| (s.push_entries - entries0) as f64 / coverage as f64),
        };
        info!(
            "step {} epoch {:.2} loss {:?} accuracy {:.4}",
            record.step, record.epoch, record.train_loss, record.eval_accuracy
        );
        self.last = (s.loss_sum, s.loss_count, s.push_entries, s.push_coverage);
        self.metrics.push(record);
        self.timing
            .push((self.global_steps, self.started.elapsed().as_secs_f64() * 1000.0));
        Ok(())
    }

    fn finish(&mut self, params: &ModelParams, s: Snapshot) -> Result<()> {
        if self.metrics.last().map(|m| m.step) != Some(self.global_steps) {
            self.record(params, s)?;
        }
        Ok(())
    }
}

fn server_params(nodes: &[Node<'_>], init: &ModelParams) -> Result<ModelParams> {
    let flat: Vec<f32> = nodes.iter().flat_map(|n| n.shard.params().iter().copied()).collect();
    ModelParams::from_flat(init.layout().clone(), flat)
}

fn snapshot(nodes: &[Node<'_>], net: &Network) -> Snapshot {
    let sent = net.total_sent();
    Snapshot {
        loss_sum: nodes.iter().map(|n| n.counters.loss_sum).sum(),
        loss_count: nodes.iter().map(|n| n.counters.loss_count).sum(),
        push_entries: nodes.iter().map(|n| n.counters.push_entries).sum(),
        push_coverage: nodes.iter().map(|n| n.counters.push_coverage).sum(),
        payload_bytes: sent.payload_bytes,
        dense_equivalent: nodes.iter().map(|n| n.counters.dense_equivalent).sum(),
    }
}

fn epoch_means(per_worker: impl Iterator<Item = Vec<(f64, u64)>>) -> Vec<f64> {
    let mut totals: Vec<(f64, u64)> = Vec::new();
    for epochs in per_worker {
        if totals.len() < epochs.len() {
            totals.resize(epochs.len(), (0.0, 0));
        }
        for (t, (s, n)) in totals.iter_mut().zip(epochs) {
            t.0 += s;
            t.1 += n;
        }
    }
    totals.iter().map(|(s, n)| s / *n as f64).collect()
}

/// Runs distributed training on already-loaded data.
pub fn run_with_data(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunReport> {
    let Prepared { train, test, mlp, init } = prepare(config, train, test)?;
    let n = config.workers;
    let topology = Arc::new(Topology::new(init.layout().clone(), n)?);
    let optimizer = AdaGrad {
        learning_rate: config.learning_rate,
        ..AdaGrad::default()
    };
    let pull_config = config.pull_config();
    let mut nodes = Vec::with_capacity(n);
    let mut steps_per_epoch = 0;
    for k in 0..n {
        let client = ClientState::new(k, Arc::clone(&topology), init.clone(), config.drop.clone())?;
        let mut shard = ShardState::new(k, Arc::clone(&topology), init.flat(), optimizer, pull_config.clone())?;
        for c in 0..n {
            shard.register_client(c, &init.flat()[topology.shards.range(k)])?;
        }
        let data = partition(&train, n, k, config.seed)?;
        let batches = BatchCursor::batches_per_epoch(data.len(), config.batch_size);
        steps_per_epoch += batches;
        let mut total = batches * config.epochs as u64;
        if let Some(cap) = config.max_worker_steps {
            total = total.min(cap);
        }
        let cursor = BatchCursor::new(data.len(), config.batch_size, config.seed, k);
        nodes.push(Node::new(
            k,
            client,
            shard,
            &mlp,
            data,
            cursor,
            total,
            config.seed,
            Arc::clone(&topology),
            PayloadKind::for_config(&config.drop),
            PayloadKind::for_config(&pull_config),
        ));
    }
    let mut net = Network::new(n);
    if config.trace {
        net = net.with_trace();
    }
    let mut recorder = Recorder::new(&mlp, &test, config, steps_per_epoch);
    recorder.record(&init, snapshot(&nodes, &net))?;
    if config.mode == ScheduleMode::Free {
        run_free(&mut nodes, &mut net)?;
        recorder.global_steps = nodes.iter().map(|n| n.steps).sum();
    } else {
        let seed = derive_seed(&[config.seed, TAG_SCHED]);
        run_schedule(&mut nodes, &mut net, config.mode, seed, |event, nodes, net| {
            if let Event::Step { .. } = event {
                recorder.global_steps += 1;
                if recorder.due() {
                    recorder.record(&server_params(nodes, &init)?, snapshot(nodes, net))?;
                }
            }
            Ok(())
        })?;
    }
    let params = server_params(&nodes, &init)?;
    recorder.finish(&params, snapshot(&nodes, &net))?;

    let sent = net.total_sent();
    let dense: u64 = nodes.iter().map(|n| n.counters.dense_equivalent).sum();
    let push_payload: u64 = nodes.iter().map(|n| n.counters.push_payload).sum();
    let push_dense = 4 * recorder.global_steps * topology.shards.total() as u64;
    let summary = Summary {
        final_accuracy: recorder.metrics.last().map_or(0.0, |m| m.eval_accuracy),
        steps: recorder.global_steps,
        total_payload_bytes: sent.payload_bytes,
        total_header_bytes: sent.header_bytes,
        dense_equivalent_bytes: dense,
        compression_ratio: (sent.payload_bytes > 0).then(|| dense as f64 / sent.payload_bytes as f64),
        push_payload_bytes: push_payload,
        pull_payload_bytes: nodes.iter().map(|n| n.counters.pull_payload).sum(),
        push_compression_ratio: (push_payload > 0).then(|| push_dense as f64 / push_payload as f64),
        epoch_train_loss: epoch_means(nodes.iter().map(|n| n.counters.epoch_loss.clone())),
        node_sent: (0..n).map(|k| net.node_sent(k)).collect(),
        config: config.clone(),
    };
    let report = RunReport {
        summary,
        metrics: recorder.metrics,
        timing: recorder.timing,
        params,
        replicas: nodes.iter().map(|n| n.client.replica().clone()).collect(),
        trace: net.trace().map(<[TraceRecord]>::to_vec),
    };
    if let Some(dir) = &config.out {
        report.write_to(dir)?;
    }
    Ok(report)
}

/// Single-process AdaGrad training over the same data order a one-worker
/// run uses, with metrics recorded at the same points.
pub fn train_local(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunReport> {
    let Prepared { train, test, mlp, init } = prepare(config, train, test)?;
    let data = partition(&train, 1, 0, config.seed)?;
    let batches = BatchCursor::batches_per_epoch(data.len(), config.batch_size);
    let mut total = batches * config.epochs as u64;
    if let Some(cap) = config.max_worker_steps {
        total = total.min(cap);
    }
    let mut cursor = BatchCursor::new(data.len(), config.batch_size, config.seed, 0);
    let mut params = init.clone();
    let mut state = AdaGradState::new(
        params.len(),
        AdaGrad {
            learning_rate: config.learning_rate,
            ..AdaGrad::default()
        },
    );
    let mut recorder = Recorder::new(&mlp, &test, config, batches);
    let (mut loss_sum, mut loss_count) = (0.0f64, 0u64);
    let mut epoch_loss: Vec<(f64, u64)> = Vec::new();
    let snap = |loss_sum, loss_count| Snapshot {
        loss_sum,
        loss_count,
        push_entries: 0,
        push_coverage: 0,
        payload_bytes: 0,
        dense_equivalent: 0,
    };
    recorder.record(&params, snap(0.0, 0))?;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for _ in 0..total {
        let (epoch, batch) = cursor.next_batch();
        data.gather(&batch, &mut images, &mut labels);
        let (loss, grads) = mlp.loss_and_grad(&params, &images, &labels)?;
        loss_sum += loss as f64;
        loss_count += 1;
        if epoch_loss.len() <= epoch {
            epoch_loss.resize(epoch + 1, (0.0, 0));
        }
        epoch_loss[epoch].0 += loss as f64;
        epoch_loss[epoch].1 += 1;
        recorder.global_steps += 1;
        if recorder.due() {
            recorder.record(&params, snap(loss_sum, loss_count))?;
        }
        state.apply_dense(params.flat_mut(), grads.flat())?;
    }
    recorder.finish(&params, snap(loss_sum, loss_count))?;
    let summary = Summary {
        final_accuracy: recorder.metrics.last().map_or(0.0, |m| m.eval_accuracy),
        steps: recorder.global_steps,
        total_payload_bytes: 0,
        total_header_bytes: 0,
        dense_equivalent_bytes: 0,
        compression_ratio: None,
        push_payload_bytes: 0,
        pull_payload_bytes: 0,
        push_compression_ratio: None,
        epoch_train_loss: epoch_means(std::iter::once(epoch_loss)),
        node_sent: Vec::new(),
        config: config.clone(),
    };
    let report = RunReport {
        summary,
        metrics: recorder.metrics,
        timing: recorder.timing,
        replicas: vec![params.clone()],
        params,
        trace: None,
    };
    if let Some(dir) = &config.out {
        report.write_to(dir)?;
    }
    Ok(report)
}
