//! End-to-end acceptance checks.
//!
//! Runs without the libtest harness so every criterion prints exactly one
//! `PASS`/`FAIL` line. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 4 6`. The MNIST criteria read the
//! IDX files from `$MNIST_DIR`, or from `data/mnist` at the workspace root.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use graddrop::compress::{
    dequantize, grad_drop_slice, quantize, select_threshold, skewness, ColumnMap, DropConfig, QuantContext, QuantMode,
    QuantizedUpdate, SparseUpdate, ThresholdScope,
};
use graddrop::data::{load_mnist_dir, Dataset};
use graddrop::harness::{report_skewness, run_with_data, train_local, DataSource, RunConfig, RunReport};
use graddrop::model::{AdaGrad, Mlp, MlpSpec, ModelParams, ParamLayout};
use graddrop::net::ScheduleMode;
use graddrop::server::{ClientState, Payload, ShardState, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, &'a str, Box<dyn FnMut(&mut MnistRuns) -> Outcome>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect()
}

fn mnist() -> Result<&'static (Dataset, Dataset), String> {
    static DATA: std::sync::OnceLock<Result<(Dataset, Dataset), String>> = std::sync::OnceLock::new();
    DATA.get_or_init(|| {
        let dir = std::env::var_os("MNIST_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        load_mnist_dir(&dir).map_err(|e| format!("MNIST not available in {}: {e}", dir.display()))
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn mnist_config(drop_ratio: f64) -> RunConfig {
    RunConfig {
        workers: 4,
        batch_size: 40,
        epochs: 20,
        learning_rate: 0.005,
        mode: ScheduleMode::Async,
        layer_norm: true,
        data: DataSource::Mnist { dir: PathBuf::new() },
        ..RunConfig::default()
    }
    .with_drop_ratio(drop_ratio)
}

/// Full-scale MNIST runs shared by criteria 1-3.
struct MnistRuns {
    dense: Option<Result<RunReport, String>>,
    r99: Option<Result<RunReport, String>>,
    r999: Option<Result<RunReport, String>>,
}

impl MnistRuns {
    fn get(slot: &mut Option<Result<RunReport, String>>, drop_ratio: f64) -> Result<&RunReport, String> {
        slot.get_or_insert_with(|| {
            let (train, test) = mnist()?;
            let start = Instant::now();
            let report = run_with_data(&mnist_config(drop_ratio), train, test).map_err(|e| e.to_string())?;
            eprintln!(
                "  (MNIST R={drop_ratio} run took {:.0} s)",
                start.elapsed().as_secs_f64()
            );
            Ok(report)
        })
        .as_ref()
        .map_err(Clone::clone)
    }
}

// ---------------------------------------------------------------------------

fn c1_compression_ratio(runs: &mut MnistRuns) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lines = Vec::new();
    for n in [100_000usize, 335_114, 1_000_000] {
        let grad = normal_vec(&mut rng, n, 1.0);
        let mut residual = vec![0.0; n];
        let out = grad_drop_slice("g", &grad, &mut residual, &DropConfig::with_ratio(99.0).exact(), 0)
            .map_err(|e| e.to_string())?;
        let ratio = (4 * n) as f64 / out.update.payload_len() as f64;
        ensure((49.0..=51.0).contains(&ratio), || {
            format!("exact n={n}: ratio {ratio:.3}")
        })?;
        lines.push(format!("exact n={n} {ratio:.2}"));
    }
    let n = 1_000_000;
    let (mut dense, mut payload) = (0usize, 0usize);
    for seed in 0..20u64 {
        let grad = normal_vec(&mut rng, n, 1.0);
        let mut residual = vec![0.0; n];
        let out = grad_drop_slice("g", &grad, &mut residual, &DropConfig::with_ratio(99.0), seed)
            .map_err(|e| e.to_string())?;
        dense += 4 * n;
        payload += out.update.payload_len();
    }
    let sampled = dense as f64 / payload as f64;
    lines.push(format!("sampled thresholds, n=10^6 x20: {sampled:.2} (info)"));
    if let Ok(r) = MnistRuns::get(&mut runs.r99, 99.0) {
        let s = &r.summary;
        lines.push(format!(
            "MNIST run: push {:.2}, overall {:.2} (info)",
            s.push_compression_ratio.unwrap_or(f64::NAN),
            s.compression_ratio.unwrap_or(f64::NAN)
        ));
    }
    Ok(lines.join("; "))
}

fn c2_accuracy_parity(runs: &mut MnistRuns) -> Outcome {
    let dense = MnistRuns::get(&mut runs.dense, 0.0)?.summary.final_accuracy * 100.0;
    let sparse = MnistRuns::get(&mut runs.r99, 99.0)?.summary.final_accuracy * 100.0;
    let detail = format!(
        "acc(R=0) {dense:.2}%, acc(R=99) {sparse:.2}%, gap {:.2} points",
        (dense - sparse).abs()
    );
    ensure((dense - sparse).abs() <= 1.0 && dense >= 97.0 && sparse >= 97.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn c3_extreme_dropping(runs: &mut MnistRuns) -> Outcome {
    let base = MnistRuns::get(&mut runs.r99, 99.0)?.summary.final_accuracy * 100.0;
    let r = MnistRuns::get(&mut runs.r999, 99.9)?;
    let losses = &r.summary.epoch_train_loss;
    let acc = r.summary.final_accuracy * 100.0;
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    let detail = format!(
        "acc(R=99.9) {acc:.2}% vs acc(R=99) {base:.2}%; epoch losses [{}]; push ratio {:.1}",
        shown.join(" "),
        r.summary.push_compression_ratio.unwrap_or(f64::NAN)
    );
    ensure(losses.len() == 20, || {
        format!("{} epochs recorded; {detail}", losses.len())
    })?;
    ensure(losses.windows(2).all(|w| w[1] < w[0]), || {
        format!("loss not monotone; {detail}")
    })?;
    ensure(acc >= base - 3.0, || detail.clone())?;
    Ok(detail)
}

fn c4_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut kept = 0usize;
    for case in 0..10_000u64 {
        let n = rng.random_range(1..3000);
        let scale = 10f32.powi(rng.random_range(-4..3));
        let grad = normal_vec(&mut rng, n, scale);
        let old: Vec<f32> = if rng.random_bool(0.2) {
            vec![0.0; n]
        } else {
            normal_vec(&mut rng, n, scale * 0.3)
        };
        let config = DropConfig {
            drop_ratio: [0.0, 50.0, 90.0, 99.0, 99.9, rng.random_range(0.0..100.0)][rng.random_range(0..6)],
            exact_selection: rng.random_bool(0.5),
            ..DropConfig::default()
        };
        let mut residual = old.clone();
        let out = grad_drop_slice("t", &grad, &mut residual, &config, case).map_err(|e| e.to_string())?;
        let sent = out.update.densify();
        for i in 0..n {
            let before = grad[i] + old[i];
            let after = sent[i] + residual[i];
            ensure(after == before, || {
                format!("case {case} entry {i}: {after} != {before}")
            })?;
        }
        kept += out.update.len();
    }
    Ok(format!(
        "10^4 triples, {kept} entries sent, sent + residual == gradient + old residual everywhere"
    ))
}

fn c5_sampled_threshold() -> Outcome {
    let n = 1_000_000;
    let mut inside = 0;
    let mut fractions = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let values = normal_vec(&mut rng, n, 1.0);
        let t = select_threshold(&[&values], &DropConfig::with_ratio(99.0), seed).map_err(|e| e.to_string())?;
        let frac = values.iter().filter(|v| v.abs() > t).count() as f64 / n as f64;
        if (0.005..=0.02).contains(&frac) {
            inside += 1;
        }
        fractions.push(frac * 100.0);
    }
    let (lo, hi) = fractions
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &f| (l.min(f), h.max(f)));
    let detail = format!("{inside}/20 seeds in [0.5%, 2%], kept {lo:.3}%..{hi:.3}%");
    ensure(inside >= 19, || detail.clone())?;
    Ok(detail)
}

fn ulp_close(a: f32, oracle: f64) -> bool {
    let o = oracle as f32;
    let ulp = f32::from_bits(o.to_bits() + 1) - o;
    (a - o).abs() <= ulp
}

fn mean_f64(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Expected center list for an avg mode, computed directly from the update.
fn oracle_centers(u: &SparseUpdate, mode: QuantMode, columns: &ColumnMap) -> Vec<f64> {
    let mags: Vec<f64> = u.values().iter().map(|v| v.abs() as f64).collect();
    match mode {
        QuantMode::GlobalAvg => vec![mean_f64(&mags)],
        QuantMode::ColumnAvg => {
            let mut by_slot = std::collections::BTreeMap::<usize, Vec<f64>>::new();
            for (&i, &m) in u.indices().iter().zip(&mags) {
                by_slot.entry(columns.slot(i as usize)).or_default().push(m);
            }
            by_slot.values().map(|v| mean_f64(v)).collect()
        }
        QuantMode::TwoBit => {
            let mut sorted = mags.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[(sorted.len() - 1) / 2];
            let low: Vec<f64> = mags.iter().copied().filter(|&m| m <= median).collect();
            let high: Vec<f64> = mags.iter().copied().filter(|&m| m > median).collect();
            let low_mean = mean_f64(&low);
            vec![low_mean, if high.is_empty() { low_mean } else { mean_f64(&high) }]
        }
        QuantMode::Threshold => unreachable!(),
    }
}

fn c6_codec_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut per_mode = [0usize; 4];
    for case in 0..10_000u64 {
        let cols = rng.random_range(1..40);
        let rows = rng.random_range(1..80);
        let total = rows * cols;
        let density = rng.random_range(0.0..1.0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..total {
            if rng.random_bool(density) {
                indices.push(i as u32);
                let v: f32 = rng.sample::<f32, _>(StandardNormal) * 10f32.powi(rng.random_range(-3..3));
                values.push(if v == 0.0 { 1.0 } else { v });
            }
        }
        let u =
            SparseUpdate::new(format!("t{}", case % 7), total as u32, indices, values).map_err(|e| e.to_string())?;
        let back = SparseUpdate::decode(&u.encode()).map_err(|e| e.to_string())?;
        ensure(back == u, || format!("case {case}: sparse round trip differs"))?;
        ensure(u.payload_len() == 8 * u.len(), || {
            format!("case {case}: payload {} bytes", u.payload_len())
        })?;

        let columns = ColumnMap::uniform(total, cols).map_err(|e| e.to_string())?;
        let min_mag = u.values().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()));
        let ctx = QuantContext {
            threshold: if u.is_empty() { 1.0 } else { min_mag * 0.5 },
            columns: Some(&columns),
        };
        for (k, mode) in QuantMode::ALL.into_iter().enumerate() {
            let q = quantize(&u, mode, &ctx).map_err(|e| format!("case {case} {mode}: {e}"))?;
            let decoded = QuantizedUpdate::decode(&q.encode()).map_err(|e| format!("case {case} {mode}: {e}"))?;
            ensure(decoded == q, || format!("case {case} {mode}: frame round trip differs"))?;
            let d = dequantize(&decoded, Some(&columns)).map_err(|e| format!("case {case} {mode}: {e}"))?;
            ensure(d.indices() == u.indices(), || {
                format!("case {case} {mode}: indices changed")
            })?;
            ensure(
                d.values()
                    .iter()
                    .zip(u.values())
                    .all(|(a, b)| a.is_sign_positive() == b.is_sign_positive() && *a != 0.0),
                || format!("case {case} {mode}: a sign changed"),
            )?;
            if u.is_empty() {
                continue;
            }
            if mode == QuantMode::Threshold {
                ensure(d.values().iter().all(|v| v.abs() == ctx.threshold), || {
                    format!("case {case}: threshold mode magnitude")
                })?;
            } else {
                let want = oracle_centers(&u, mode, &columns);
                ensure(q.centers.len() == want.len(), || {
                    format!("case {case} {mode}: {} centers, oracle {}", q.centers.len(), want.len())
                })?;
                for (c, w) in q.centers.iter().zip(&want) {
                    ensure(ulp_close(*c, *w), || {
                        format!("case {case} {mode}: center {c} vs oracle {w}")
                    })?;
                }
            }
            per_mode[k] += 1;
        }
    }
    Ok(format!(
        "10^4 cases; quantized non-empty cases per mode {:?}; indices, signs and avg centers (<= 1 ulp) match",
        per_mode
    ))
}

fn read_outputs(report: &RunReport) -> Result<(Vec<u8>, Vec<u8>), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    report.write_to(dir.path()).map_err(|e| e.to_string())?;
    let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| e.to_string());
    Ok((read("checkpoint.bin")?, read("metrics.csv")?))
}

fn c7_determinism() -> Outcome {
    let (train, test) = mnist()?;
    let mut lines = Vec::new();
    for mode in [ScheduleMode::Sync, ScheduleMode::Async] {
        let config = RunConfig {
            mode,
            epochs: 1,
            train_limit: Some(6000),
            eval_limit: Some(2000),
            eval_interval: 25,
            data: DataSource::Mnist { dir: PathBuf::new() },
            seed: 7,
            ..RunConfig::default()
        };
        let a = run_with_data(&config, train, test).map_err(|e| e.to_string())?;
        let b = run_with_data(&config, train, test).map_err(|e| e.to_string())?;
        let (ca, ma) = read_outputs(&a)?;
        let (cb, mb) = read_outputs(&b)?;
        ensure(ca == cb, || format!("{mode:?}: checkpoints differ"))?;
        ensure(ma == mb, || format!("{mode:?}: metrics CSVs differ"))?;
        lines.push(format!("{mode:?} rerun identical ({} metric rows)", a.metrics.len()));
    }
    let config = RunConfig {
        workers: 1,
        mode: ScheduleMode::Sync,
        epochs: 1,
        train_limit: Some(4000),
        eval_limit: Some(2000),
        eval_interval: 10,
        data: DataSource::Mnist { dir: PathBuf::new() },
        seed: 8,
        ..RunConfig::default()
    }
    .with_drop_ratio(0.0);
    let dist = run_with_data(&config, train, test).map_err(|e| e.to_string())?;
    let local = train_local(&config, train, test).map_err(|e| e.to_string())?;
    let (cd, _) = read_outputs(&dist)?;
    let (cl, _) = read_outputs(&local)?;
    ensure(cd == cl, || {
        "N=1 R=0 sync checkpoint differs from local training".into()
    })?;
    ensure(dist.metrics.len() == local.metrics.len(), || {
        "metric row counts differ".into()
    })?;
    for (d, l) in dist.metrics.iter().zip(&local.metrics) {
        let same = d.step == l.step
            && d.epoch.to_bits() == l.epoch.to_bits()
            && d.train_loss.map(f64::to_bits) == l.train_loss.map(f64::to_bits)
            && d.eval_accuracy.to_bits() == l.eval_accuracy.to_bits();
        ensure(same, || format!("metrics differ at step {}: {d:?} vs {l:?}", d.step))?;
    }
    lines.push(format!(
        "N=1 R=0 sync == local bitwise over {} steps",
        dist.summary.steps
    ));
    Ok(lines.join("; "))
}

struct Cluster {
    topo: Arc<Topology>,
    clients: Vec<ClientState>,
    shards: Vec<ShardState>,
}

fn cluster(layout: ParamLayout, n: usize, push: DropConfig, pull: DropConfig, seed: u64) -> Result<Cluster, String> {
    let e = |e: graddrop::Error| e.to_string();
    let topo = Arc::new(Topology::new(layout.clone(), n).map_err(e)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = normal_vec(&mut rng, layout.total(), 0.1);
    let params = ModelParams::from_flat(layout, init.clone()).map_err(e)?;
    let mut clients = Vec::new();
    let mut shards = Vec::new();
    for k in 0..n {
        clients.push(ClientState::new(k, topo.clone(), params.clone(), push.clone()).map_err(e)?);
        let mut s = ShardState::new(k, topo.clone(), &init, AdaGrad::default(), pull.clone()).map_err(e)?;
        for c in 0..n {
            s.register_client(c, &init[topo.shards.range(k)]).map_err(e)?;
        }
        shards.push(s);
    }
    Ok(Cluster { topo, clients, shards })
}

fn small_layout() -> ParamLayout {
    ParamLayout::new(vec![
        ("fc0.weight".into(), vec![40, 30]),
        ("fc0.bias".into(), vec![40]),
        ("fc1.weight".into(), vec![10, 40]),
        ("fc1.bias".into(), vec![10]),
    ])
}

fn c8_delta_pulls() -> Outcome {
    let e = |e: graddrop::Error| e.to_string();
    let n = 4;
    let mut checked = 0usize;
    let configs = [
        DropConfig::with_ratio(99.0),
        DropConfig {
            scope: ThresholdScope::Local,
            ..DropConfig::with_ratio(90.0)
        },
        DropConfig {
            quantization: Some(QuantMode::TwoBit),
            ..DropConfig::with_ratio(95.0)
        },
    ];
    for (ci, cfg) in configs.iter().enumerate() {
        let mut c = cluster(small_layout(), n, cfg.clone(), cfg.clone(), 80 + ci as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(800 + ci as u64);
        let total = c.topo.shards.total();
        for step in 0..1000u64 {
            let client = rng.random_range(0..n);
            if rng.random_bool(0.5) {
                let grad = normal_vec(&mut rng, total, 0.1);
                let out = c.clients[client].push(&grad, step).map_err(e)?;
                for (k, p) in out.payloads.iter().enumerate() {
                    c.shards[k]
                        .apply_push(&Payload::decode(&p.encode(), p.kind()).map_err(e)?)
                        .map_err(e)?;
                }
            } else {
                let k = rng.random_range(0..n);
                let p = c.shards[k].handle_pull(client, step).map_err(e)?;
                c.clients[client]
                    .apply_pull(k, &Payload::decode(&p.encode(), p.kind()).map_err(e)?)
                    .map_err(e)?;
            }
            for client in 0..n {
                for k in 0..n {
                    let slice = &c.clients[client].replica().flat()[c.topo.shards.range(k)];
                    let known = c.shards[k].last_pulled(client).ok_or("client not registered")?;
                    ensure(slice.iter().zip(known).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                        format!("config {ci} step {step}: client {client} / shard {k} diverged")
                    })?;
                    checked += 1;
                }
            }
        }
    }

    // frozen server: a few updates, then only pulls
    let layout = ParamLayout::new(vec![("w".into(), vec![300, 100])]);
    let mut c = cluster(layout, 1, DropConfig::with_ratio(0.0), DropConfig::with_ratio(99.0), 88)?;
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    for step in 0..5 {
        let grad = normal_vec(&mut rng, c.topo.shards.total(), 1.0);
        let out = c.clients[0].push(&grad, step).map_err(e)?;
        c.shards[0].apply_push(&out.payloads[0]).map_err(e)?;
    }
    let error = |c: &Cluster| {
        c.clients[0]
            .replica()
            .flat()
            .iter()
            .zip(c.shards[0].params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    };
    let mut errors = vec![error(&c)];
    for pull in 0..1000 {
        let p = c.shards[0].handle_pull(0, pull).map_err(e)?;
        c.clients[0].apply_pull(0, &p).map_err(e)?;
        errors.push(error(&c));
        if *errors.last().unwrap() == 0.0 {
            break;
        }
    }
    ensure(errors.windows(2).all(|w| w[1] <= w[0]), || {
        format!("error rose: {errors:?}")
    })?;
    ensure(*errors.last().unwrap() == 0.0, || {
        format!("error stuck at {}", errors.last().unwrap())
    })?;
    Ok(format!(
        "{checked} replica/last_pulled comparisons over 3x10^3 steps bitwise equal; frozen-server error {:.2e} -> 0 in {} pulls, never increasing",
        errors[0],
        errors.len() - 1
    ))
}

/// Moment coefficient with compensated sums, written independently of the
/// library implementation.
fn skewness_oracle(values: &[f64]) -> f64 {
    fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for x in xs {
            let t = sum + x;
            comp += if sum.abs() >= x.abs() {
                (sum - t) + x
            } else {
                (x - t) + sum
            };
            sum = t;
        }
        sum + comp
    }
    let n = values.len() as f64;
    let mean = neumaier(values.iter().copied()) / n;
    let m2 = neumaier(values.iter().map(|v| (v - mean).powi(2))) / n;
    let m3 = neumaier(values.iter().map(|v| (v - mean).powi(3))) / n;
    m3 / (m2 * m2.sqrt())
}

fn c9_skewness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(3..20_000);
        let values: Vec<f64> = match case % 4 {
            0 => (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
            1 => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect(),
            2 => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect(),
            _ => (0..n).map(|_| -rng.sample::<f64, _>(Exp1) * 1e-3 + 5.0).collect(),
        };
        let got = skewness(&values).map_err(|e| e.to_string())?;
        let want = skewness_oracle(&values);
        let rel = ((got - want) / want).abs();
        worst = worst.max(rel);
        ensure(rel <= 1e-9, || {
            format!("fixture {case} (n={n}): {got} vs oracle {want}")
        })?;
    }

    let (train, test) = mnist()?;
    let mut pooled = Vec::new();
    for seed in 1..=5u64 {
        let config = RunConfig {
            workers: 1,
            epochs: 1,
            max_worker_steps: Some(500),
            eval_limit: Some(500),
            eval_interval: 1_000_000,
            seed,
            data: DataSource::Mnist { dir: PathBuf::new() },
            ..RunConfig::default()
        };
        let trained = train_local(&config, train, test).map_err(|e| e.to_string())?;
        let mlp = Mlp::new(MlpSpec::from_layout(trained.params.layout()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let report = report_skewness(&mlp, &trained.params, train, 40, seed).map_err(|e| e.to_string())?;
        let g1 = report
            .pooled
            .ok_or_else(|| format!("seed {seed}: pooled skewness undefined"))?;
        pooled.push(g1);
    }
    let shown: Vec<String> = pooled.iter().map(|g| format!("{g:.2}")).collect();
    let detail = format!(
        "pooled g1 over 5 seeds [{}]; oracle worst rel. error {worst:.1e}",
        shown.join(", ")
    );
    ensure(pooled.iter().all(|&g| g > 0.0), || detail.clone())?;
    Ok(detail)
}

fn c10_bandwidth_balance() -> Outcome {
    let mut lines = Vec::new();
    for workers in [2usize, 4, 8] {
        let mut config = RunConfig {
            workers,
            mode: ScheduleMode::Sync,
            epochs: 1000,
            max_worker_steps: Some(300),
            eval_interval: 1_000_000,
            data: DataSource::Synth {
                classes: 10,
                train_per_class: 80,
                test_per_class: 10,
                dim: 784,
            },
            seed: 10,
            ..RunConfig::default()
        };
        config.drop.exact_selection = true;
        let (train, test) = config.data.load(config.seed).map_err(|e| e.to_string())?;
        let report = run_with_data(&config, &train, &test).map_err(|e| e.to_string())?;
        let steps = report.summary.steps as f64 / workers as f64;
        let per_step: Vec<f64> = report
            .summary
            .node_sent
            .iter()
            .map(|s| (s.payload_bytes + s.header_bytes) as f64 / steps)
            .collect();
        let lo = per_step.iter().copied().fold(f64::MAX, f64::min);
        let hi = per_step.iter().copied().fold(f64::MIN, f64::max);
        let spread = (hi - lo) / lo * 100.0;
        ensure(spread < 1.0, || {
            format!("N={workers}: per-node bytes/step {per_step:.0?}, spread {spread:.3}%")
        })?;
        lines.push(format!(
            "N={workers} {:.0} B/step, spread {spread:.3}%",
            per_step.iter().sum::<f64>() / workers as f64
        ));
    }
    Ok(lines.join("; "))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runs = MnistRuns {
        dense: None,
        r99: None,
        r999: None,
    };
    let mut criteria: Vec<Criterion> = vec![
        (1, "compression ratio at R=99", Box::new(c1_compression_ratio)),
        (2, "accuracy parity R=99 vs R=0 on MNIST", Box::new(c2_accuracy_parity)),
        (3, "training at R=99.9", Box::new(c3_extreme_dropping)),
        (
            4,
            "residual conservation",
            Box::new(|_: &mut MnistRuns| c4_conservation()),
        ),
        (
            5,
            "sampled threshold kept fraction",
            Box::new(|_: &mut MnistRuns| c5_sampled_threshold()),
        ),
        (
            6,
            "codec and quantizer round trips",
            Box::new(|_: &mut MnistRuns| c6_codec_round_trips()),
        ),
        (7, "determinism", Box::new(|_: &mut MnistRuns| c7_determinism())),
        (8, "delta pulls", Box::new(|_: &mut MnistRuns| c8_delta_pulls())),
        (
            9,
            "gradient magnitude skewness",
            Box::new(|_: &mut MnistRuns| c9_skewness()),
        ),
        (
            10,
            "per-node bandwidth balance",
            Box::new(|_: &mut MnistRuns| c10_bandwidth_balance()),
        ),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria.iter_mut() {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut runs))).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {:?}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or(p.downcast_ref::<&str>().copied())
            ))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
