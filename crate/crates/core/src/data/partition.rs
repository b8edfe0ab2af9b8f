use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::InputShape;

/// How client distributions differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Heterogeneity {
    /// Each client holds samples from at most `s` classes.
    LabelSkew { s: usize },
    /// Uniform split, then a per-client affine shift of the inputs.
    FeatureSkew { strength: f64 },
    /// Uniform split, then a per-client label permutation.
    ConceptShift {
        #[serde(default)]
        permutation_seed: Option<u64>,
    },
}

/// Held-out pools and the per-client train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of each client's shard used for training; the rest is its
    /// local test set.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Fraction of the dataset held out as the global new-test pool before
    /// partitioning.
    #[serde(default = "default_new_test_fraction")]
    pub new_test_fraction: f64,
    /// Optional distribution-shifted external pool.
    #[serde(default)]
    pub external: Option<ExternalSpec>,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_new_test_fraction() -> f64 {
    0.2
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: default_train_fraction(),
            new_test_fraction: default_new_test_fraction(),
            external: None,
        }
    }
}

/// External pool carved from the dataset and passed through a global
/// `x * scale + offset` shift (clamped to `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub fraction: f64,
    #[serde(default = "default_external_scale")]
    pub scale: f64,
    #[serde(default = "default_external_offset")]
    pub offset: f64,
}

fn default_external_scale() -> f64 {
    0.8
}

fn default_external_offset() -> f64 {
    0.1
}

/// Per-channel affine input shift (`x * scale + offset`, clamped to `[0, 1]`).
/// Flat inputs treat every feature as a channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl FeatureTransform {
    fn channels(shape: InputShape) -> (usize, usize) {
        match shape {
            InputShape::Image {
                channels,
                height,
                width,
            } => (channels, height * width),
            InputShape::Flat { features } => (features, 1),
        }
    }

    fn draw<R: Rng>(shape: InputShape, strength: f64, rng: &mut R) -> Self {
        let (channels, _) = Self::channels(shape);
        let scale = (0..channels)
            .map(|_| 1.0 + strength * rng.random_range(-0.5..0.5))
            .collect();
        let offset = (0..channels)
            .map(|_| strength * rng.random_range(-0.25..0.25))
            .collect();
        FeatureTransform { scale, offset }
    }

    fn uniform(shape: InputShape, scale: f64, offset: f64) -> Self {
        let (channels, _) = Self::channels(shape);
        FeatureTransform {
            scale: vec![scale; channels],
            offset: vec![offset; channels],
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let (_, plane) = Self::channels(ds.shape);
        let sample = ds.shape.len();
        if sample == 0 {
            return;
        }
        for x in ds.inputs.chunks_exact_mut(sample) {
            for (c, block) in x.chunks_exact_mut(plane).enumerate() {
                for v in block {
                    *v = (*v * self.scale[c] + self.offset[c]).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Deals shuffled indices into `k` contiguous, nearly equal chunks.
fn deal<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Per-client sample indices, plus one class list (label skew) or label
/// permutation (concept shift) per client.
pub type ShardSplit = (Vec<Vec<usize>>, Vec<Vec<usize>>);

/// Label-skew split. Classes are visited in a seeded random order and
/// client `k` takes the `s` consecutive entries starting at `k * s`
/// (wrapping), so every class is used and no client repeats one. Each class's
/// samples are then divided evenly among the clients that hold it.
///
/// Returns the index lists and the classes assigned to each client.
pub fn partition_label_skew(
    ds: &Dataset,
    clients: usize,
    s: usize,
    seed: u64,
) -> Result<ShardSplit> {
    let classes = ds.num_classes;
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    if s < 2 || s > classes {
        return Err(Error::Config(format!(
            "label skew s = {s} must lie in [2, {classes}]"
        )));
    }
    if s * clients < classes {
        return Err(Error::Config(format!(
            "label skew infeasible: {clients} clients x {s} classes cannot cover {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let assignment: Vec<Vec<usize>> = (0..clients)
        .map(|k| (0..s).map(|j| order[(k * s + j) % classes]).collect())
        .collect();

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (k, owned) in assignment.iter().enumerate() {
        for &c in owned {
            holders[c].push(k);
        }
    }
    let mut shards = vec![Vec::new(); clients];
    for (class, owners) in holders.iter().enumerate() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < owners.len() {
            return Err(Error::Config(format!(
                "class {class} has {} samples for {} client shards",
                members.len(),
                owners.len()
            )));
        }
        members.shuffle(&mut rng);
        for (&k, chunk) in owners.iter().zip(deal(&members, owners.len())) {
            shards[k].extend(chunk);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok((shards, assignment))
}

fn uniform_split(n: usize, clients: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Config("at least one client is required".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut shards = deal(&idx, clients);
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Uniform split plus one affine input transform per client. With
/// `strength == 0` every transform is the identity.
pub fn partition_feature_skew(
    ds: &Dataset,
    clients: usize,
    strength: f64,
    seed: u64,
) -> Result<(Vec<Vec<usize>>, Vec<FeatureTransform>)> {
    if strength.is_nan() || strength < 0.0 {
        return Err(Error::Config(format!("feature skew strength {strength} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shards = uniform_split(ds.len(), clients, &mut rng)?;
    let transforms = (0..clients)
        .map(|_| FeatureTransform::draw(ds.shape, strength, &mut rng))
        .collect();
    Ok((shards, transforms))
}

/// Label permutation of client `k`; client 0 keeps the identity.
pub fn client_permutation(classes: usize, seed: u64, k: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    if k > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        perm.shuffle(&mut rng);
    }
    perm
}

/// Uniform split plus one label permutation per client.
pub fn partition_concept_shift(
    ds: &Dataset,
    clients: usize,
    seed: u64,
) -> Result<ShardSplit> {
    if ds.num_classes < 2 {
        return Err(Error::Config("concept shift needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shards = uniform_split(ds.len(), clients, &mut rng)?;
    let perms = (0..clients)
        .map(|k| client_permutation(ds.num_classes, seed, k))
        .collect();
    Ok((shards, perms))
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Dataset,
    pub local_test: Dataset,
}

/// Partition audit record. All indices refer to the source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub heterogeneity: Heterogeneity,
    pub num_classes: usize,
    pub clients: Vec<ClientManifest>,
    pub new_test: Vec<usize>,
    /// Client whose distribution each new-test sample is drawn under.
    pub new_test_origin: Vec<usize>,
    pub external: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub local_test: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform: Option<FeatureTransform>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FederatedData {
    pub clients: Vec<ClientData>,
    pub new_test: Dataset,
    pub external: Option<Dataset>,
    pub manifest: PartitionManifest,
}

impl FederatedData {
    /// `|D_i| / sum_j |D_j|` over client training sets.
    pub fn alphas(&self) -> Vec<f64> {
        let total: usize = self.clients.iter().map(|c| c.train.len()).sum();
        self.clients
            .iter()
            .map(|c| c.train.len() as f64 / total as f64)
            .collect()
    }
}

/// Carves the new-test and external pools, partitions the rest across
/// `clients`, then splits every shard into train and local-test sets.
pub fn build_federated(
    ds: &Dataset,
    heterogeneity: Heterogeneity,
    split: &SplitConfig,
    clients: usize,
    seed: u64,
) -> Result<FederatedData> {
    if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} must lie in (0, 1)",
            split.train_fraction
        )));
    }
    let external_fraction = split.external.map(|e| e.fraction).unwrap_or(0.0);
    if !(0.0..1.0).contains(&split.new_test_fraction)
        || !(0.0..1.0).contains(&external_fraction)
        || split.new_test_fraction + external_fraction >= 1.0
    {
        return Err(Error::Config(
            "held-out fractions must be in [0, 1) and leave a training pool".into(),
        ));
    }
    if clients == 0 || ds.len() < clients {
        return Err(Error::Config(format!(
            "{} samples cannot be shared by {clients} clients",
            ds.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let n_new = (split.new_test_fraction * ds.len() as f64).round() as usize;
    let n_ext = (external_fraction * ds.len() as f64).round() as usize;
    let mut new_test_idx = order[..n_new].to_vec();
    let mut external_idx = order[n_new..n_new + n_ext].to_vec();
    let mut pool_idx = order[n_new + n_ext..].to_vec();
    new_test_idx.sort_unstable();
    external_idx.sort_unstable();
    pool_idx.sort_unstable();
    let pool = ds.subset(&pool_idx);

    let partition_seed = rng.random::<u64>();
    let mut manifests: Vec<ClientManifest> = Vec::with_capacity(clients);
    let shards = match heterogeneity {
        Heterogeneity::LabelSkew { s } => {
            let (shards, classes) = partition_label_skew(&pool, clients, s, partition_seed)?;
            for (k, owned) in classes.into_iter().enumerate() {
                manifests.push(blank_manifest(k));
                manifests[k].classes = Some(owned);
            }
            shards
        }
        Heterogeneity::FeatureSkew { strength } => {
            let (shards, transforms) = partition_feature_skew(&pool, clients, strength, partition_seed)?;
            for (k, t) in transforms.into_iter().enumerate() {
                manifests.push(blank_manifest(k));
                manifests[k].transform = Some(t);
            }
            shards
        }
        Heterogeneity::ConceptShift { permutation_seed } => {
            let (shards, perms) = partition_concept_shift(&pool, clients, partition_seed)?;
            let perms: Vec<Vec<usize>> = match permutation_seed {
                Some(ps) => (0..clients).map(|k| client_permutation(ds.num_classes, ps, k)).collect(),
                None => perms,
            };
            for (k, p) in perms.into_iter().enumerate() {
                manifests.push(blank_manifest(k));
                manifests[k].permutation = Some(p);
            }
            shards
        }
    };

    let mut client_data = Vec::with_capacity(clients);
    for (k, shard) in shards.into_iter().enumerate() {
        let mut members: Vec<usize> = shard.iter().map(|&i| pool_idx[i]).collect();
        members.shuffle(&mut rng);
        let n_train = ((split.train_fraction * members.len() as f64).round() as usize).clamp(1, members.len().max(1));
        if members.is_empty() {
            return Err(Error::Config(format!("client {k} received no samples")));
        }
        let mut train = members[..n_train].to_vec();
        let mut local_test = members[n_train..].to_vec();
        train.sort_unstable();
        local_test.sort_unstable();
        let mut train_ds = ds.subset(&train);
        let mut test_ds = ds.subset(&local_test);
        apply_client_view(&manifests[k], &mut train_ds);
        apply_client_view(&manifests[k], &mut test_ds);
        manifests[k].train = train;
        manifests[k].local_test = local_test;
        client_data.push(ClientData {
            train: train_ds,
            local_test: test_ds,
        });
    }

    // New-test samples are viewed through a randomly chosen client's
    // transform/permutation; under label skew that view is the identity.
    let new_test_origin: Vec<usize> = new_test_idx.iter().map(|_| rng.random_range(0..clients)).collect();
    let mut new_test = Dataset::empty(ds.shape, ds.num_classes);
    for (&i, &origin) in new_test_idx.iter().zip(&new_test_origin) {
        let mut one = ds.subset(&[i]);
        apply_client_view(&manifests[origin], &mut one);
        new_test.inputs.extend(one.inputs);
        new_test.labels.extend(one.labels);
    }

    let external = split.external.map(|spec| {
        let mut ext = ds.subset(&external_idx);
        FeatureTransform::uniform(ds.shape, spec.scale, spec.offset).apply(&mut ext);
        ext
    });

    Ok(FederatedData {
        clients: client_data,
        new_test,
        external,
        manifest: PartitionManifest {
            seed,
            heterogeneity,
            num_classes: ds.num_classes,
            clients: manifests,
            new_test: new_test_idx,
            new_test_origin,
            external: external_idx,
        },
    })
}

fn blank_manifest(client_id: usize) -> ClientManifest {
    ClientManifest {
        client_id,
        train: Vec::new(),
        local_test: Vec::new(),
        classes: None,
        transform: None,
        permutation: None,
    }
}

fn apply_client_view(manifest: &ClientManifest, ds: &mut Dataset) {
    if let Some(t) = &manifest.transform {
        t.apply(ds);
    }
    if let Some(p) = &manifest.permutation {
        for y in &mut ds.labels {
            *y = p[*y];
        }
    }
}
