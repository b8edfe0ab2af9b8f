//! Strategies, weighted aggregation of shared parameters, and the federated
//! round loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ramp_length, ClientState, EmaSchedule, LocalTraining, RoundReport};
use crate::data::FederatedData;
use crate::decouple::{schedule_p, PartitionPlan, SharedPayload};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ModelParams, OptimizerState};

/// Training method. Method hyperparameters of the channel-decoupled method
/// (`p_max`, `lambda`, `beta_max`, toggles) live in [`MethodParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    LocalOnly,
    /// The first `private_layers` hidden layers stay local.
    LgFed {
        #[serde(default = "one")]
        private_layers: usize,
    },
    /// The classifier head and the `private_layers - 1` hidden layers
    /// below it stay local.
    FedPer {
        #[serde(default = "one")]
        private_layers: usize,
    },
    #[serde(rename = "cd2pfed")]
    Cd2pFed,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Progressive growth of the private ratio.
    #[serde(default = "yes")]
    pub li: bool,
    /// EMA smoothing of private weights.
    #[serde(default = "yes")]
    pub ta: bool,
    /// Cyclic distillation between the subnets.
    #[serde(default = "yes")]
    pub cd: bool,
}

fn yes() -> bool {
    true
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            li: true,
            ta: true,
            cd: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodParams {
    pub p_max: f64,
    pub lambda: f64,
    pub beta_max: f64,
    pub t0_fraction: f64,
    pub toggles: Toggles,
}

#[derive(Debug, Clone, PartialEq)]
enum PlanRule {
    Fixed(PartitionPlan),
    Progressive { p_max: f64 },
}

/// A strategy resolved against a network: which plan each round uses and
/// how clients train locally.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledStrategy {
    rule: PlanRule,
    rounds: usize,
    pub lambda: f64,
    pub ema: Option<EmaSchedule>,
    pub label: String,
}

impl Strategy {
    pub fn compile(&self, arch: &Architecture, method: &MethodParams, rounds: usize) -> Result<CompiledStrategy> {
        let hidden = arch.hidden_slots().len();
        let fixed = |plan| CompiledStrategy {
            rule: PlanRule::Fixed(plan),
            rounds,
            lambda: 0.0,
            ema: None,
            label: String::new(),
        };
        let mut compiled = match *self {
            Strategy::FedAvg => fixed(PartitionPlan::all_shared(arch)),
            Strategy::LocalOnly => fixed(PartitionPlan::all_private(arch)),
            Strategy::LgFed { private_layers } => {
                if private_layers == 0 || private_layers > hidden {
                    return Err(Error::Config(format!(
                        "lg_fed private_layers must lie in [1, {hidden}], got {private_layers}"
                    )));
                }
                let layers: Vec<bool> = (0..hidden).map(|l| l < private_layers).collect();
                fixed(PartitionPlan::layerwise(arch, &layers, false)?)
            }
            Strategy::FedPer { private_layers } => {
                if private_layers == 0 || private_layers > hidden + 1 {
                    return Err(Error::Config(format!(
                        "fed_per private_layers must lie in [1, {}], got {private_layers}",
                        hidden + 1
                    )));
                }
                let layers: Vec<bool> = (0..hidden).map(|l| l + private_layers > hidden).collect();
                fixed(PartitionPlan::layerwise(arch, &layers, true)?)
            }
            Strategy::Cd2pFed => {
                let t = method.toggles;
                CompiledStrategy {
                    rule: if t.li {
                        PlanRule::Progressive { p_max: method.p_max }
                    } else {
                        PlanRule::Fixed(PartitionPlan::from_rate(arch, method.p_max))
                    },
                    rounds,
                    lambda: if t.cd { method.lambda } else { 0.0 },
                    ema: t.ta.then(|| EmaSchedule {
                        beta_max: method.beta_max,
                        t0: ramp_length(rounds, method.t0_fraction),
                    }),
                    label: String::new(),
                }
            }
        };
        compiled.label = self.label(method);
        Ok(compiled)
    }

    /// Short run label, e.g. `fedavg` or `cd2pfed-p0.5-li-ta-cd`.
    pub fn label(&self, method: &MethodParams) -> String {
        match *self {
            Strategy::FedAvg => "fedavg".into(),
            Strategy::LocalOnly => "local_only".into(),
            Strategy::LgFed { private_layers } => format!("lg_fed-b{private_layers}"),
            Strategy::FedPer { private_layers } => format!("fed_per-b{private_layers}"),
            Strategy::Cd2pFed => {
                let t = method.toggles;
                let mut label = format!("cd2pfed-p{}", method.p_max);
                for (on, name) in [(t.li, "li"), (t.ta, "ta"), (t.cd, "cd")] {
                    if on {
                        label.push('-');
                        label.push_str(name);
                    }
                }
                label
            }
        }
    }
}

impl CompiledStrategy {
    /// Plan in force during round `t` (`t = 0` is the initial broadcast).
    pub fn plan_for_round(&self, arch: &Architecture, t: usize) -> PartitionPlan {
        match &self.rule {
            PlanRule::Fixed(plan) => plan.clone(),
            PlanRule::Progressive { p_max } => PartitionPlan::from_rate(arch, schedule_p(t, self.rounds, *p_max, true)),
        }
    }
}

/// Weighted mean `sum_i alpha_i * v_i` of the uploads, taken in client-id
/// order as `v_0 + sum_{i>0} alpha_i (v_i - v_0)` so that identical uploads
/// aggregate to themselves exactly.
pub fn aggregate(uploads: &[(usize, SharedPayload)], alphas: &[f64]) -> Result<SharedPayload> {
    if uploads.len() != alphas.len() || uploads.is_empty() {
        return Err(Error::Protocol(format!(
            "{} uploads for {} registered clients",
            uploads.len(),
            alphas.len()
        )));
    }
    let mut ordered: Vec<&(usize, SharedPayload)> = uploads.iter().collect();
    ordered.sort_by_key(|(id, _)| *id);
    for (expected, (id, _)) in ordered.iter().enumerate() {
        if *id != expected {
            return Err(Error::Protocol(format!("missing upload from client {expected}")));
        }
    }
    let reference = &ordered[0].1;
    for (id, up) in &ordered[1..] {
        if up.plan != reference.plan || up.values.len() != reference.values.len() {
            return Err(Error::Protocol(format!(
                "upload from client {id} does not match the round's plan"
            )));
        }
    }
    let mut values = reference.values.clone();
    for ((_, up), &alpha) in ordered[1..].iter().zip(&alphas[1..]) {
        for ((acc, &v), &v0) in values.iter_mut().zip(&up.values).zip(&reference.values) {
            *acc += alpha * (v - v0);
        }
    }
    Ok(SharedPayload {
        plan: reference.plan.clone(),
        values,
    })
}

/// Optimizer and local-training settings common to all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Seeded RNG on a dedicated stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STREAM: u64 = 3;
pub const CLIENT_STREAM_BASE: u64 = 100;

#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    /// Canonical model; only its shared entries under `plan` are meaningful.
    pub global: ModelParams,
    pub plan: PartitionPlan,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub plan: PartitionPlan,
    /// Every client's upload, in client-id order.
    pub uploads: Vec<SharedPayload>,
    pub aggregate: SharedPayload,
    pub reports: Vec<RoundReport>,
}

pub struct Federation {
    pub arch: Architecture,
    pub strategy: CompiledStrategy,
    pub settings: FederationSettings,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    /// Every client starts from the same seeded initialization.
    pub fn new(
        arch: Architecture,
        strategy: CompiledStrategy,
        settings: FederationSettings,
        data: &FederatedData,
        threads: usize,
    ) -> Result<Self> {
        if data.clients.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        if data.clients.iter().all(|c| c.train.is_empty()) {
            return Err(Error::Config("no client has training data".into()));
        }
        let init = arch.init(&mut stream_rng(settings.seed, INIT_STREAM));
        let plan = strategy.plan_for_round(&arch, 0);
        let alphas = data.alphas();
        let clients = data
            .clients
            .iter()
            .zip(&alphas)
            .enumerate()
            .map(|(k, (c, &alpha))| {
                let opt = OptimizerState::new(&init, settings.lr, settings.momentum, settings.weight_decay);
                ClientState::new(
                    k,
                    init.clone(),
                    plan.clone(),
                    c.train.clone(),
                    alpha,
                    opt,
                    stream_rng(settings.seed, CLIENT_STREAM_BASE + k as u64),
                )
            })
            .collect();
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Federation {
            arch,
            strategy,
            settings,
            server: ServerState {
                round: 0,
                global: init,
                plan,
                alphas,
            },
            clients,
            pool,
        })
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.settings.local_epochs,
            batch_size: self.settings.batch_size,
            lambda: self.strategy.lambda,
            ema: self.strategy.ema,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.settings.rounds
    }

    /// Broadcasts the shared weights, trains every client, aggregates, and
    /// merges the aggregate back so each client holds its personalized model.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        if self.is_finished() {
            return Err(Error::Internal("all rounds already completed".into()));
        }
        let t = self.server.round + 1;
        let arch = &self.arch;
        let download = crate::decouple::split_for_upload(arch, &self.server.global, &self.server.plan)?;
        let plan = self.strategy.plan_for_round(arch, t);
        let cfg = self.local_training();
        let work = |c: &mut ClientState| c.local_round(arch, &download, t, &plan, &cfg);
        let results: Vec<Result<(SharedPayload, RoundReport)>> = match &self.pool {
            Some(pool) => pool.install(|| self.clients.par_iter_mut().map(work).collect()),
            None => self.clients.iter_mut().map(work).collect(),
        };
        let mut uploads = Vec::with_capacity(results.len());
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            let (up, report) = r?;
            uploads.push((report.client_id, up));
            reports.push(report);
        }
        let aggregate = aggregate(&uploads, &self.server.alphas)?;
        crate::decouple::merge_from_download(arch, &mut self.server.global, &plan, &aggregate)?;
        for c in &mut self.clients {
            c.download(arch, &aggregate)?;
        }
        self.server.plan = plan.clone();
        self.server.round = t;
        Ok(RoundOutcome {
            round: t,
            plan,
            uploads: uploads.into_iter().map(|(_, u)| u).collect(),
            aggregate,
            reports,
        })
    }

    /// Each client's personalized model, in client-id order.
    pub fn personalized_models(&self) -> Vec<&ModelParams> {
        self.clients.iter().map(|c| &c.params).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    use super::*;
    use crate::data::{build_federated, synth_generate, Heterogeneity, SplitConfig, SynthSpec};
    use crate::nn::{InputShape, LayerSpec};

    fn payload(values: Vec<f64>) -> SharedPayload {
        SharedPayload {
            plan: PartitionPlan {
                total: vec![2],
                private: vec![0],
                head_private: false,
            },
            values,
        }
    }

    #[test]
    fn aggregation_examples() {
        let a = aggregate(&[(0, payload(vec![1.0])), (1, payload(vec![3.0]))], &[0.5, 0.5]).unwrap();
        assert_eq!(a.values, vec![2.0]);
        let a = aggregate(&[(1, payload(vec![4.0])), (0, payload(vec![0.0]))], &[0.25, 0.75]).unwrap();
        assert_eq!(a.values, vec![3.0]);
        let a = aggregate(&[(0, payload(vec![0.1, -7.0]))], &[1.0]).unwrap();
        assert_eq!(a.values, vec![0.1, -7.0]);
    }

    #[test]
    fn aggregation_rejects_bad_uploads() {
        let err = aggregate(&[(0, payload(vec![1.0])), (2, payload(vec![1.0]))], &[0.5, 0.5]);
        assert!(matches!(err, Err(Error::Protocol(_))));
        let err = aggregate(&[(0, payload(vec![1.0])), (1, payload(vec![1.0, 2.0]))], &[0.5, 0.5]);
        assert!(matches!(err, Err(Error::Protocol(_))));
        let err = aggregate(&[(0, payload(vec![1.0]))], &[0.5, 0.5]);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn identical_uploads_aggregate_to_themselves(
            values in prop::collection::vec(-1e3f64..1e3, 1..20),
            weights in prop::collection::vec(0.01f64..1.0, 1..8),
        ) {
            let total: f64 = weights.iter().sum();
            let alphas: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let uploads: Vec<_> = (0..alphas.len()).map(|k| (k, payload(values.clone()))).collect();
            prop_assert_eq!(aggregate(&uploads, &alphas).unwrap().values, values);
        }
    }

    fn mlp() -> Architecture {
        Architecture::new(
            InputShape::Flat { features: 4 },
            vec![
                LayerSpec::Dense { in_units: 4, out_units: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_units: 6, out_units: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_units: 5, out_units: 3 },
            ],
        )
        .unwrap()
    }

    fn method(p_max: f64, toggles: Toggles) -> MethodParams {
        MethodParams {
            p_max,
            lambda: 1.0,
            beta_max: 0.5,
            t0_fraction: 0.1,
            toggles,
        }
    }

    #[test]
    fn baseline_plans() {
        let arch = mlp();
        let m = method(0.5, Toggles::default());
        let lg = Strategy::LgFed { private_layers: 1 }.compile(&arch, &m, 5).unwrap();
        let plan = lg.plan_for_round(&arch, 3);
        assert_eq!(plan.private, vec![6, 0]);
        assert!(!plan.head_private);
        let fp = Strategy::FedPer { private_layers: 2 }.compile(&arch, &m, 5).unwrap();
        let plan = fp.plan_for_round(&arch, 3);
        assert_eq!(plan.private, vec![0, 5]);
        assert!(plan.head_private);
        assert!(Strategy::LgFed { private_layers: 3 }.compile(&arch, &m, 5).is_err());
        let cd = Strategy::Cd2pFed.compile(&arch, &m, 10).unwrap();
        assert_eq!(cd.plan_for_round(&arch, 0).private, vec![0, 0]);
        assert_eq!(cd.plan_for_round(&arch, 10).private, vec![3, 3]);
        assert_eq!(cd.label, "cd2pfed-p0.5-li-ta-cd");
        assert_eq!(cd.ema.unwrap().t0, 1);
    }

    fn federation(strategy: Strategy, m: &MethodParams, threads: usize) -> Federation {
        let arch = mlp();
        let ds = synth_generate(
            &SynthSpec {
                num_classes: 3,
                dims: 4,
                per_class: 30,
                spread: 0.15,
            },
            5,
        )
        .unwrap();
        let data = build_federated(&ds, Heterogeneity::LabelSkew { s: 2 }, &SplitConfig::default(), 3, 6).unwrap();
        let settings = FederationSettings {
            rounds: 4,
            local_epochs: 1,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 7,
        };
        let compiled = strategy.compile(&arch, m, settings.rounds).unwrap();
        Federation::new(arch, compiled, settings, &data, threads).unwrap()
    }

    #[test]
    fn fedavg_clients_share_one_model() {
        let mut fed = federation(Strategy::FedAvg, &method(0.0, Toggles::default()), 1);
        while !fed.is_finished() {
            fed.run_round().unwrap();
        }
        for c in &fed.clients[1..] {
            assert_eq!(c.params, fed.clients[0].params);
        }
        assert_eq!(fed.clients[0].params, fed.server.global);
    }

    #[test]
    fn parallel_matches_serial() {
        let m = method(0.5, Toggles::default());
        let mut serial = federation(Strategy::Cd2pFed, &m, 1);
        let mut parallel = federation(Strategy::Cd2pFed, &m, 3);
        while !serial.is_finished() {
            let a = serial.run_round().unwrap();
            let b = parallel.run_round().unwrap();
            assert_eq!(a.aggregate, b.aggregate);
        }
        for (a, b) in serial.clients.iter().zip(&parallel.clients) {
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn layerwise_baselines_aggregate_the_complement() {
        let m = method(0.5, Toggles::default());
        for strategy in [Strategy::LgFed { private_layers: 1 }, Strategy::FedPer { private_layers: 1 }] {
            let mut fed = federation(strategy, &m, 1);
            let outcome = fed.run_round().unwrap();
            let owner = outcome.plan.ownership(&fed.arch);
            let k0 = &fed.clients[0].params;
            for c in &fed.clients[1..] {
                for ((a, b), mask) in c.params.tensors().zip(k0.tensors()).zip(&owner.private) {
                    for ((x, y), &private) in a.iter().zip(b).zip(mask) {
                        if !private {
                            assert_eq!(x, y);
                        }
                    }
                }
            }
            assert_eq!(outcome.aggregate.values.len(), owner.shared_count());
        }
    }
}
