//! End-to-end experiments: data preparation, the round loop with periodic
//! evaluation, and the on-disk run directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::checkpoint::{self, CheckpointMeta};
use crate::client::RoundReport;
use crate::config::{DataSource, FederationConfig};
use crate::data::{build_federated, load_csv, load_idx, synth_generate, Dataset, FederatedData, Heterogeneity};
use crate::error::{Error, Result};
use crate::eval::{self, mean_std, Metric, MetricRow};
use crate::server::{stream_rng, Federation, RoundOutcome};

pub const DATA_STREAM: u64 = 1;
pub const PARTITION_STREAM: u64 = 2;

/// One `u64` drawn from stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

pub fn load_dataset(cfg: &FederationConfig) -> Result<Dataset> {
    match &cfg.data.source {
        DataSource::Synthetic(spec) => synth_generate(spec, derive_seed(cfg.seed, DATA_STREAM)),
        DataSource::Idx {
            images,
            labels,
            num_classes,
        } => load_idx(images, labels, *num_classes),
        DataSource::Csv { path, num_classes } => load_csv(path, *num_classes),
    }
}

/// Loads or generates the dataset and splits it across clients.
pub fn prepare_data(cfg: &FederationConfig) -> Result<FederatedData> {
    let ds = load_dataset(cfg)?;
    if ds.shape.len() != cfg.model.input().len() {
        return Err(Error::Config(format!(
            "dataset samples have {} values, model expects {}",
            ds.shape.len(),
            cfg.model.input().len()
        )));
    }
    build_federated(
        &ds,
        cfg.data.heterogeneity,
        &cfg.data.split(),
        cfg.clients,
        derive_seed(cfg.seed, PARTITION_STREAM),
    )
}

/// Everything produced by an in-memory run.
pub struct Simulation {
    pub label: String,
    pub metrics: Vec<MetricRow>,
    pub reports: Vec<RoundReport>,
    pub federation: Federation,
    pub data: FederatedData,
}

/// Metric rows for the clients' current personalized models.
pub fn evaluate(fed: &Federation, data: &FederatedData, round: usize, label: &str, seed: u64) -> Result<Vec<MetricRow>> {
    let models = fed.personalized_models();
    let tests: Vec<&Dataset> = data.clients.iter().map(|c| &c.local_test).collect();
    let local = eval::local_accuracy(&fed.arch, &models, &tests)?;
    let row = |metric, value, client_id| MetricRow {
        round,
        strategy: label.to_string(),
        metric,
        value,
        client_id,
        seed,
    };
    let mut rows = vec![row(Metric::Local, local.overall, None)];
    for (k, acc) in local.per_client.iter().enumerate() {
        if let Some(v) = acc {
            rows.push(row(Metric::Local, *v, Some(k)));
        }
    }
    if !data.new_test.is_empty() {
        rows.push(row(Metric::New, eval::new_accuracy(&fed.arch, &models, &data.new_test)?, None));
    }
    if let Some(ext) = data.external.as_ref().filter(|e| !e.is_empty()) {
        rows.push(row(Metric::External, eval::external_accuracy(&fed.arch, &models, ext)?, None));
    }
    Ok(rows)
}

/// Runs every round in memory, calling `observe` after each one.
pub fn simulate_with<F>(cfg: &FederationConfig, threads: usize, mut observe: F) -> Result<Simulation>
where
    F: FnMut(&Federation, &RoundOutcome) -> Result<()>,
{
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let compiled = cfg.strategy.compile(&cfg.model, &cfg.method(), cfg.rounds)?;
    let label = compiled.label.clone();
    let mut fed = Federation::new(cfg.model.clone(), compiled, cfg.settings(), &data, threads)?;
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    while !fed.is_finished() {
        let outcome = fed.run_round()?;
        observe(&fed, &outcome)?;
        let t = outcome.round;
        if t % cfg.eval_every == 0 || t == cfg.rounds {
            metrics.extend(evaluate(&fed, &data, t, &label, cfg.seed)?);
        }
        reports.extend(outcome.reports);
    }
    Ok(Simulation {
        label,
        metrics,
        reports,
        federation: fed,
        data,
    })
}

pub fn simulate(cfg: &FederationConfig, threads: usize) -> Result<Simulation> {
    simulate_with(cfg, threads, |_, _| Ok(()))
}

/// `<out>/<stem>-seed<seed>`.
pub fn run_dir(out: &Path, stem: &str, seed: u64) -> PathBuf {
    out.join(format!("{stem}-seed{seed}"))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_train_log(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["round", "client_id", "mean_ce", "mean_cd", "samples", "wall_time_ms"])?;
    for r in reports {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.mean_ce.to_string(),
            r.mean_cd.to_string(),
            r.samples.to_string(),
            format!("{:.3}", r.wall_time_ms),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Creates a fresh run directory; an existing one is never overwritten.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::Config(format!("run directory {} already exists", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the experiment and writes `config.resolved.json`, `partition.json`,
/// `metrics.csv`, `train_log.csv` and per-client checkpoints.
pub fn run_experiment(cfg: &FederationConfig, stem: &str, out: &Path, threads: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = run_dir(out, stem, cfg.seed);
    fresh_dir(&dir)?;
    write_text(&dir.join("config.resolved.json"), &cfg.resolved_json()?)?;
    let sim = simulate(cfg, threads)?;
    write_text(&dir.join("partition.json"), &serde_json::to_string_pretty(&sim.data.manifest)?)?;
    let mut metrics = create(&dir.join("metrics.csv"))?;
    eval::write_metrics(&mut metrics, &sim.metrics)?;
    metrics.flush().map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    write_train_log(&dir.join("train_log.csv"), &sim.reports)?;

    let ck_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let hash = cfg.hash()?;
    let fed = &sim.federation;
    for c in &fed.clients {
        checkpoint::save(
            &ck_dir,
            &format!("client-{}", c.client_id),
            &fed.arch,
            &c.params,
            &c.plan,
            &CheckpointMeta {
                round: fed.server.round,
                client_id: Some(c.client_id),
                config_hash: &hash,
            },
        )?;
    }
    Ok(dir)
}

/// Writes only the partition manifest for `cfg` (dry run).
pub fn partition_only(cfg: &FederationConfig, stem: &str, out: &Path) -> Result<PathBuf> {
    let data = prepare_data(cfg)?;
    let dir = run_dir(out, stem, cfg.seed);
    fresh_dir(&dir)?;
    let path = dir.join("partition.json");
    write_text(&path, &serde_json::to_string_pretty(&data.manifest)?)?;
    Ok(path)
}

/// Aggregates finished run directories into `summary.csv`, `curves.csv`
/// and `heterogeneity.csv` under `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    // (strategy, s, metric) -> final values across seeds
    let mut by_skew: BTreeMap<(String, usize, Metric), Vec<f64>> = BTreeMap::new();
    for dir in run_dirs {
        let run_rows = eval::read_metrics(&dir.join("metrics.csv"))?;
        let cfg = FederationConfig::load(&dir.join("config.resolved.json"))?;
        if let Heterogeneity::LabelSkew { s } = cfg.data.heterogeneity {
            let last = run_rows.iter().filter(|r| r.client_id.is_none()).map(|r| r.round).max();
            for r in run_rows.iter().filter(|r| r.client_id.is_none() && Some(r.round) == last) {
                by_skew.entry((r.strategy.clone(), s, r.metric)).or_default().push(r.value);
            }
        }
        rows.extend(run_rows);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let summary_path = out.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&summary_path)?);
    w.write_record(["strategy", "metric", "n", "mean", "std", "min", "max"])?;
    for s in eval::summarize(&rows) {
        w.write_record([
            s.strategy,
            s.metric.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.min.to_string(),
            s.max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))?;

    let mut curves: BTreeMap<(String, Metric, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.client_id.is_none()) {
        curves.entry((r.strategy.clone(), r.metric, r.round)).or_default().push(r.value);
    }
    let curves_path = out.join("curves.csv");
    let mut w = csv::Writer::from_writer(create(&curves_path)?);
    w.write_record(["strategy", "metric", "round", "n", "mean", "std"])?;
    for ((strategy, metric, round), values) in curves {
        let (mean, std) = mean_std(&values);
        w.write_record([
            strategy,
            metric.to_string(),
            round.to_string(),
            values.len().to_string(),
            mean.to_string(),
            std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&curves_path, e))?;

    let skew_path = out.join("heterogeneity.csv");
    let mut w = csv::Writer::from_writer(create(&skew_path)?);
    w.write_record(["strategy", "s", "metric", "n", "mean", "std"])?;
    for ((strategy, s, metric), values) in by_skew {
        let (mean, std) = mean_std(&values);
        w.write_record([
            strategy,
            s.to_string(),
            metric.to_string(),
            values.len().to_string(),
            mean.to_string(),
            std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&skew_path, e))?;
    Ok(vec![summary_path, curves_path, skew_path])
}
