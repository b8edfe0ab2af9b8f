//! Local, new-test and external-test accuracy, metric rows, and
//! cross-seed summaries.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, forward, softmax_rows, Architecture, ModelParams};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Local,
    New,
    External,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Local => "local",
            Metric::New => "new",
            Metric::External => "external",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(Metric::Local),
            "new" => Some(Metric::New),
            "external" => Some(Metric::External),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Softmax outputs of `model` on every sample of `ds`, row-major.
pub fn predict_proba(arch: &Architecture, model: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    let classes = arch.num_classes();
    let mask = arch.full_mask();
    let sample = ds.shape.len();
    let mut out = Vec::with_capacity(ds.len() * classes);
    for (i, chunk) in ds.inputs.chunks(EVAL_CHUNK * sample).enumerate() {
        let batch = chunk.len() / sample;
        let pass = forward(arch, model, chunk, batch, &mask)
            .map_err(|e| Error::Internal(format!("evaluation chunk {i}: {e}")))?;
        out.extend(softmax_rows(&pass.logits, classes));
    }
    Ok(out)
}

fn correct(probs: &[f64], labels: &[usize], classes: usize) -> usize {
    probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn percent(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalAccuracy {
    /// Sample-weighted accuracy over all local-test sets, in percent.
    pub overall: f64,
    /// Per-client accuracy; `None` for an empty local-test set.
    pub per_client: Vec<Option<f64>>,
}

/// Each client's own model on its own local-test set.
pub fn local_accuracy(arch: &Architecture, models: &[&ModelParams], tests: &[&Dataset]) -> Result<LocalAccuracy> {
    if models.len() != tests.len() {
        return Err(Error::Internal(format!("{} models for {} test sets", models.len(), tests.len())));
    }
    let classes = arch.num_classes();
    let mut hits = 0;
    let mut n = 0;
    let mut per_client = Vec::with_capacity(models.len());
    for (model, ds) in models.iter().zip(tests) {
        if ds.is_empty() {
            per_client.push(None);
            continue;
        }
        let h = correct(&predict_proba(arch, model, ds)?, &ds.labels, classes);
        per_client.push(Some(percent(h, ds.len())));
        hits += h;
        n += ds.len();
    }
    if n == 0 {
        return Err(Error::Config("every local-test set is empty".into()));
    }
    Ok(LocalAccuracy {
        overall: percent(hits, n),
        per_client,
    })
}

/// Accuracy of the ensemble that averages the models' softmax outputs.
pub fn ensemble_accuracy(arch: &Architecture, models: &[&ModelParams], pool: &Dataset) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::Config("evaluation pool is empty".into()));
    }
    if models.is_empty() {
        return Err(Error::Internal("ensemble of zero models".into()));
    }
    let mut sum = predict_proba(arch, models[0], pool)?;
    for model in &models[1..] {
        for (acc, p) in sum.iter_mut().zip(predict_proba(arch, model, pool)?) {
            *acc += p;
        }
    }
    let k = models.len() as f64;
    sum.iter_mut().for_each(|v| *v /= k);
    Ok(percent(correct(&sum, &pool.labels, arch.num_classes()), pool.len()))
}

/// New-test accuracy: ensemble over all clients on the held-out pool.
pub fn new_accuracy(arch: &Architecture, models: &[&ModelParams], pool: &Dataset) -> Result<f64> {
    ensemble_accuracy(arch, models, pool)
}

/// External-test accuracy: ensemble over all clients on the shifted pool.
pub fn external_accuracy(arch: &Architecture, models: &[&ModelParams], pool: &Dataset) -> Result<f64> {
    ensemble_accuracy(arch, models, pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub strategy: String,
    pub metric: Metric,
    /// Top-1 accuracy in percent.
    pub value: f64,
    pub client_id: Option<usize>,
    pub seed: u64,
}

pub const METRICS_HEADER: [&str; 6] = ["round", "strategy", "metric", "value", "client_id", "seed"];

/// Writes rows with shortest round-trip float formatting.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.strategy.clone(),
            r.metric.to_string(),
            r.value.to_string(),
            r.client_id.map(|c| c.to_string()).unwrap_or_default(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Internal(format!("flushing metrics: {e}")))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let bad = |line: usize, what: &str| Error::Load {
        path: path.to_path_buf(),
        message: format!("line {line}: bad {what}"),
    };
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad(line, "column count"));
        }
        rows.push(MetricRow {
            round: rec[0].parse().map_err(|_| bad(line, "round"))?,
            strategy: rec[1].to_string(),
            metric: Metric::parse(&rec[2]).ok_or_else(|| bad(line, "metric"))?,
            value: rec[3].parse().map_err(|_| bad(line, "value"))?,
            client_id: if rec[4].is_empty() {
                None
            } else {
                Some(rec[4].parse().map_err(|_| bad(line, "client_id"))?)
            },
            seed: rec[5].parse().map_err(|_| bad(line, "seed"))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean and sample standard deviation of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups aggregate rows (no client id) by strategy and metric, keeping the
/// last round of each seed, and summarizes them across seeds.
pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    use std::collections::BTreeMap;
    let mut last: BTreeMap<(String, Metric, u64), (usize, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.client_id.is_none()) {
        let e = last.entry((r.strategy.clone(), r.metric, r.seed)).or_insert((r.round, r.value));
        if r.round >= e.0 {
            *e = (r.round, r.value);
        }
    }
    let mut groups: BTreeMap<(String, Metric), Vec<f64>> = BTreeMap::new();
    for ((strategy, metric, _), (_, v)) in last {
        groups.entry((strategy, metric)).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|((strategy, metric), values)| {
            let (mean, std) = mean_std(&values);
            Summary {
                strategy,
                metric,
                n: values.len(),
                mean,
                std,
                min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InputShape, LayerSpec};

    fn linear() -> Architecture {
        Architecture::new(
            InputShape::Flat { features: 2 },
            vec![
                LayerSpec::Dense { in_units: 2, out_units: 2 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_units: 2, out_units: 2 },
            ],
        )
        .unwrap()
    }

    /// Hidden layer copies the input; the head scales it by `gain`.
    fn copy_model(arch: &Architecture, gain: [f64; 2]) -> ModelParams {
        let mut m = arch.zeros();
        m.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        m.layers[1].weight = vec![gain[0], 0.0, 0.0, gain[1]];
        m
    }

    fn pool(xs: &[[f64; 2]], labels: &[usize]) -> Dataset {
        Dataset::new(
            InputShape::Flat { features: 2 },
            xs.iter().flatten().copied().collect(),
            labels.to_vec(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn perfect_model_scores_100() {
        let arch = linear();
        let m = copy_model(&arch, [1.0, 1.0]);
        let ds = pool(&[[1.0, 0.0], [0.0, 1.0], [0.9, 0.2]], &[0, 1, 0]);
        let acc = local_accuracy(&arch, &[&m], &[&ds]).unwrap();
        assert_eq!(acc.overall, 100.0);
        assert_eq!(ensemble_accuracy(&arch, &[&m], &ds).unwrap(), 100.0);
    }

    #[test]
    fn identical_ensemble_equals_single_model() {
        let arch = linear();
        let m = copy_model(&arch, [1.0, 0.3]);
        let ds = pool(&[[1.0, 0.0], [0.2, 0.5], [0.4, 0.9], [0.5, 0.5]], &[0, 1, 1, 1]);
        let single = ensemble_accuracy(&arch, &[&m], &ds).unwrap();
        assert_eq!(ensemble_accuracy(&arch, &[&m, &m, &m], &ds).unwrap(), single);
    }

    #[test]
    fn complementary_models_beat_both() {
        // Model A is very confident on class 0, model B on class 1; each is
        // wrong on one of the two samples with low confidence.
        let arch = linear();
        let a = copy_model(&arch, [10.0, 1.0]);
        let b = copy_model(&arch, [1.0, 10.0]);
        let ds = pool(&[[1.0, 0.6], [0.6, 1.0]], &[0, 1]);
        let xa = local_accuracy(&arch, &[&a], &[&ds]).unwrap().overall;
        let xb = local_accuracy(&arch, &[&b], &[&ds]).unwrap().overall;
        assert_eq!((xa, xb), (50.0, 50.0));
        assert_eq!(ensemble_accuracy(&arch, &[&a, &b], &ds).unwrap(), 100.0);
    }

    #[test]
    fn local_accuracy_weights_by_samples() {
        let arch = linear();
        let good = copy_model(&arch, [1.0, 1.0]);
        let bad = copy_model(&arch, [-1.0, -1.0]);
        let d1 = pool(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.2]], &[0, 1, 0]);
        let d2 = pool(&[[1.0, 0.0]], &[0]);
        let acc = local_accuracy(&arch, &[&good, &bad], &[&d1, &d2]).unwrap();
        assert_eq!(acc.overall, 75.0);
        assert_eq!(acc.per_client, vec![Some(100.0), Some(0.0)]);
    }

    #[test]
    fn metrics_csv_roundtrip_and_summary() {
        let mut rows = Vec::new();
        for (seed, v) in [(0u64, 60.0), (1, 70.0), (2, 80.0)] {
            rows.push(MetricRow {
                round: 1,
                strategy: "fedavg".into(),
                metric: Metric::Local,
                value: 10.0,
                client_id: None,
                seed,
            });
            rows.push(MetricRow {
                round: 2,
                strategy: "fedavg".into(),
                metric: Metric::Local,
                value: v,
                client_id: None,
                seed,
            });
            rows.push(MetricRow {
                round: 2,
                strategy: "fedavg".into(),
                metric: Metric::Local,
                value: 1.0,
                client_id: Some(0),
                seed,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(std::fs::File::create(&path).unwrap(), &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,strategy,metric,value,client_id,seed\n1,fedavg,local,10,,0\n"));
        assert_eq!(read_metrics(&path).unwrap(), rows);

        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n, 3);
        assert_eq!(s[0].mean, 70.0);
        assert_eq!(s[0].std, 10.0);
        assert!(s[0].min <= s[0].mean && s[0].mean <= s[0].max);
    }
}
