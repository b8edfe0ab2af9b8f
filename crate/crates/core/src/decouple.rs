//! Channel decoupling: which output channels of each hidden layer are
//! private to a client, and which parameters that makes private.
//!
//! The last `private[l]` output channels of hidden layer `l` are private, the
//! rest are shared. A channel owns its whole incoming weight row and its bias.
//! The classifier head is never split by output; its weights follow the
//! ownership of the input feature they read, and its bias stays shared unless
//! the plan marks the whole head private.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, ForwardMask, ModelParams};

/// Linear personalization schedule `p_max * t / T`, or the constant
/// `p_max` when the progressive increase is disabled.
pub fn schedule_p(t: usize, total_rounds: usize, p_max: f64, progressive: bool) -> f64 {
    if !progressive {
        return p_max;
    }
    let total = total_rounds.max(1);
    p_max * (t.min(total) as f64) / (total as f64)
}

/// Per hidden layer private channel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub total: Vec<usize>,
    pub private: Vec<usize>,
    /// The whole classifier head (weights and bias) is private.
    pub head_private: bool,
}

impl PartitionPlan {
    /// Uniform rate `p` applied to every hidden layer, rounded half up.
    pub fn from_rate(arch: &Architecture, p: f64) -> Self {
        let p = p.clamp(0.0, 1.0);
        let total: Vec<usize> = arch.hidden_slots().iter().map(|s| s.out_channels).collect();
        let private = total
            .iter()
            .map(|&n| ((p * n as f64 + 0.5).floor() as usize).min(n))
            .collect();
        PartitionPlan {
            total,
            private,
            head_private: p >= 1.0,
        }
    }

    /// Whole-layer plan: hidden layer `l` is entirely private iff
    /// `private_layers[l]`.
    pub fn layerwise(arch: &Architecture, private_layers: &[bool], head_private: bool) -> Result<Self> {
        let total: Vec<usize> = arch.hidden_slots().iter().map(|s| s.out_channels).collect();
        if private_layers.len() != total.len() {
            return Err(Error::Config(format!(
                "layer-wise plan lists {} layers, network has {} hidden layers",
                private_layers.len(),
                total.len()
            )));
        }
        let private = total
            .iter()
            .zip(private_layers)
            .map(|(&n, &p)| if p { n } else { 0 })
            .collect();
        Ok(PartitionPlan {
            total,
            private,
            head_private,
        })
    }

    pub fn all_shared(arch: &Architecture) -> Self {
        Self::from_rate(arch, 0.0)
    }

    pub fn all_private(arch: &Architecture) -> Self {
        Self::from_rate(arch, 1.0)
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let hidden = arch.hidden_slots();
        if self.total.len() != hidden.len()
            || self.private.len() != hidden.len()
            || self.total.iter().zip(hidden).any(|(&t, s)| t != s.out_channels)
            || self.private.iter().zip(&self.total).any(|(p, t)| p > t)
        {
            return Err(Error::Protocol("partition plan does not fit the network".into()));
        }
        Ok(())
    }

    fn is_private_channel(&self, layer: usize, channel: usize) -> bool {
        channel >= self.total[layer] - self.private[layer]
    }

    /// True when every hidden layer has at least one private and one
    /// shared channel, so both subnets carry information from the input.
    pub fn both_subnets_connected(&self) -> bool {
        !self.total.is_empty()
            && self
                .private
                .iter()
                .zip(&self.total)
                .all(|(&p, &t)| p > 0 && p < t)
    }

    /// Forward masks for the full network and the two subnets.
    pub fn masks(&self, arch: &Architecture) -> SubnetMasks {
        let full = arch.full_mask();
        let mut shared = full.clone();
        let mut private = full.clone();
        for l in 0..self.total.len() {
            for c in 0..self.total[l] {
                let is_private = self.is_private_channel(l, c);
                shared.active[l][c] = !is_private;
                private.active[l][c] = is_private;
            }
        }
        SubnetMasks {
            full,
            shared,
            private,
        }
    }

    pub fn ownership(&self, arch: &Architecture) -> Ownership {
        let slots = arch.slots();
        let hidden = slots.len() - 1;
        let mut tensors = Vec::with_capacity(2 * slots.len());
        for (l, slot) in slots.iter().enumerate() {
            if l < hidden {
                let mut weight = vec![false; slot.weight_len()];
                let mut bias = vec![false; slot.out_channels];
                for c in 0..slot.out_channels {
                    if self.is_private_channel(l, c) {
                        weight[c * slot.row_len..(c + 1) * slot.row_len].fill(true);
                        bias[c] = true;
                    }
                }
                tensors.push(weight);
                tensors.push(bias);
            } else if self.head_private {
                tensors.push(vec![true; slot.weight_len()]);
                tensors.push(vec![true; slot.out_channels]);
            } else {
                let group = arch.head_feature_group();
                let row: Vec<bool> = (0..slot.row_len)
                    .map(|f| hidden > 0 && self.is_private_channel(hidden - 1, f / group))
                    .collect();
                tensors.push(row.repeat(slot.out_channels));
                tensors.push(vec![false; slot.out_channels]);
            }
        }
        Ownership { private: tensors }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetMasks {
    pub full: ForwardMask,
    pub shared: ForwardMask,
    pub private: ForwardMask,
}

/// Private flag for every parameter entry, one vector per tensor in
/// canonical order (weight, bias, weight, bias, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ownership {
    pub private: Vec<Vec<bool>>,
}

impl Ownership {
    pub fn private_count(&self) -> usize {
        self.private.iter().flatten().filter(|&&p| p).count()
    }

    pub fn shared_count(&self) -> usize {
        self.private.iter().flatten().filter(|&&p| !p).count()
    }

    /// Entries private under `self` but shared under `before`.
    pub fn newly_private(&self, before: &Ownership) -> Ownership {
        Ownership {
            private: self
                .private
                .iter()
                .zip(&before.private)
                .map(|(now, was)| now.iter().zip(was).map(|(&n, &w)| n && !w).collect())
                .collect(),
        }
    }
}

/// Shared-parameter payload exchanged with the server, tagged with the plan
/// that selected its entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPayload {
    pub plan: PartitionPlan,
    pub values: Vec<f64>,
}

/// Moves a model to a plan with at least as many private channels. Values
/// are carried over unchanged; only ownership changes.
pub fn promote(
    arch: &Architecture,
    params: ModelParams,
    old: &PartitionPlan,
    new: &PartitionPlan,
) -> Result<ModelParams> {
    old.check(arch)?;
    new.check(arch)?;
    let shrinks = old.private.iter().zip(&new.private).any(|(o, n)| n < o)
        || (old.head_private && !new.head_private);
    if shrinks {
        return Err(Error::Protocol(
            "private channels cannot be returned to the shared partition".into(),
        ));
    }
    Ok(params)
}

pub fn split_for_upload(arch: &Architecture, params: &ModelParams, plan: &PartitionPlan) -> Result<SharedPayload> {
    plan.check(arch)?;
    arch.check_params(params)?;
    let owner = plan.ownership(arch);
    let mut values = Vec::with_capacity(owner.shared_count());
    for (tensor, mask) in params.tensors().zip(&owner.private) {
        values.extend(tensor.iter().zip(mask).filter(|(_, &p)| !p).map(|(&v, _)| v));
    }
    Ok(SharedPayload {
        plan: plan.clone(),
        values,
    })
}

/// Overwrites the shared entries of `params` with the payload; private
/// entries are left untouched.
pub fn merge_from_download(
    arch: &Architecture,
    params: &mut ModelParams,
    plan: &PartitionPlan,
    payload: &SharedPayload,
) -> Result<()> {
    if &payload.plan != plan {
        return Err(Error::Protocol(
            "payload was built for a different partition plan".into(),
        ));
    }
    plan.check(arch)?;
    arch.check_params(params)?;
    let owner = plan.ownership(arch);
    if payload.values.len() != owner.shared_count() {
        return Err(Error::Protocol(format!(
            "payload carries {} values, plan shares {}",
            payload.values.len(),
            owner.shared_count()
        )));
    }
    let mut src = payload.values.iter();
    for (tensor, mask) in params.tensors_mut().zip(&owner.private) {
        for (v, &p) in tensor.iter_mut().zip(mask) {
            if !p {
                *v = *src.next().expect("length checked");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{forward, InputShape, LayerSpec};

    fn mlp(widths: &[usize]) -> Architecture {
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            layers.push(LayerSpec::Dense {
                in_units: pair[0],
                out_units: pair[1],
            });
            layers.push(LayerSpec::Relu);
        }
        layers.pop();
        Architecture::new(InputShape::Flat { features: widths[0] }, layers).unwrap()
    }

    fn cnn() -> Architecture {
        Architecture::new(
            InputShape::Image {
                channels: 1,
                height: 5,
                width: 5,
            },
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel_size: 2,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_units: 16,
                    out_units: 6,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_units: 6,
                    out_units: 3,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(schedule_p(25, 50, 0.5, true), 0.25);
        assert_eq!(schedule_p(0, 50, 0.5, true), 0.0);
        assert_eq!(schedule_p(50, 50, 0.8, true), 0.8);
        assert_eq!(schedule_p(1, 50, 0.8, false), 0.8);
        let mut last = 0.0;
        for t in 0..=37 {
            let p = schedule_p(t, 37, 0.7, true);
            assert!(p >= last);
            last = p;
        }
        assert_eq!(last, 0.7);
    }

    #[test]
    fn plan_rounding_and_degenerate_rates() {
        let arch = mlp(&[3, 16, 5, 4]);
        assert_eq!(PartitionPlan::from_rate(&arch, 0.25).private, vec![4, 1]);
        // 0.5 * 5 = 2.5 rounds up
        assert_eq!(PartitionPlan::from_rate(&arch, 0.5).private, vec![8, 3]);
        let shared = PartitionPlan::from_rate(&arch, 0.0);
        assert_eq!(shared.private, vec![0, 0]);
        assert_eq!(shared.ownership(&arch).private_count(), 0);
        let private = PartitionPlan::from_rate(&arch, 1.0);
        assert_eq!(private.private, vec![16, 5]);
        assert_eq!(private.ownership(&arch).shared_count(), 0);
    }

    #[test]
    fn boundary_masks() {
        let arch = mlp(&[3, 6, 4, 2]);
        let m = PartitionPlan::all_shared(&arch).masks(&arch);
        assert_eq!(m.shared, m.full);
        let m = PartitionPlan::all_private(&arch).masks(&arch);
        assert_eq!(m.private, m.full);
    }

    #[test]
    fn masks_are_complementary_for_every_small_width() {
        for w1 in 2..=8 {
            for w2 in 2..=8 {
                let arch = mlp(&[2, w1, w2, 3]);
                for p1 in 0..=w1 {
                    for p2 in 0..=w2 {
                        let plan = PartitionPlan {
                            total: vec![w1, w2],
                            private: vec![p1, p2],
                            head_private: false,
                        };
                        let m = plan.masks(&arch);
                        for l in 0..2 {
                            for c in 0..plan.total[l] {
                                assert!(m.shared.active[l][c] ^ m.private.active[l][c]);
                                assert!(m.full.active[l][c]);
                            }
                            assert_eq!(m.private.active[l].iter().filter(|&&a| a).count(), plan.private[l]);
                        }
                        assert!(m.shared.active[2].iter().all(|&a| a));
                        assert!(m.private.active[2].iter().all(|&a| a));
                    }
                }
            }
        }
    }

    #[test]
    fn head_ownership_follows_input_channels() {
        let arch = cnn();
        // conv has 4 channels, dense 6, head reads 6 features
        let plan = PartitionPlan {
            total: vec![4, 6],
            private: vec![1, 2],
            head_private: false,
        };
        let own = plan.ownership(&arch);
        // conv: last channel row of 4 weights private
        assert_eq!(own.private[0], [vec![false; 12], vec![true; 4]].concat());
        assert_eq!(own.private[1], vec![false, false, false, true]);
        // hidden dense: rows 4 and 5 private
        assert_eq!(own.private[2].iter().filter(|&&p| p).count(), 2 * 16);
        // head: columns 4,5 of each row private, bias shared
        for r in 0..3 {
            assert_eq!(&own.private[4][r * 6..(r + 1) * 6], &[false, false, false, false, true, true]);
        }
        assert!(own.private[5].iter().all(|&p| !p));
    }

    #[test]
    fn layerwise_plans() {
        let arch = mlp(&[3, 6, 4, 2]);
        let lg = PartitionPlan::layerwise(&arch, &[true, false], false).unwrap();
        let own = lg.ownership(&arch);
        assert!(own.private[0].iter().all(|&p| p));
        assert!(own.private[1].iter().all(|&p| p));
        assert!(own.private[2..].iter().flatten().all(|&p| !p));

        let per = PartitionPlan::layerwise(&arch, &[false, false], true).unwrap();
        let own = per.ownership(&arch);
        assert!(own.private[..4].iter().flatten().all(|&p| !p));
        assert!(own.private[4..].iter().flatten().all(|&p| p));
        assert!(PartitionPlan::layerwise(&arch, &[true], false).is_err());
    }

    #[test]
    fn promotion_rejects_shrinking() {
        let arch = mlp(&[3, 6, 4, 2]);
        let small = PartitionPlan::from_rate(&arch, 0.2);
        let big = PartitionPlan::from_rate(&arch, 0.6);
        let params = arch.zeros();
        assert!(promote(&arch, params.clone(), &small, &big).is_ok());
        assert!(matches!(
            promote(&arch, params.clone(), &big, &small),
            Err(Error::Protocol(_))
        ));
        assert_eq!(promote(&arch, params.clone(), &small, &small).unwrap(), params);
    }

    #[test]
    fn promotion_keeps_full_forward_bitwise() {
        let arch = cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = arch.init(&mut rng);
        let old = PartitionPlan::from_rate(&arch, 0.25);
        let new = PartitionPlan::from_rate(&arch, 0.5);
        let x: Vec<f64> = (0..10 * 25).map(|_| rng.random_range(0.0..1.0)).collect();
        let before = forward(&arch, &params, &x, 10, &old.masks(&arch).full).unwrap().logits;
        let promoted = promote(&arch, params, &old, &new).unwrap();
        let after = forward(&arch, &promoted, &x, 10, &new.masks(&arch).full).unwrap().logits;
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn two_layer_head_composition_identity() {
        // With one hidden layer both subnets see the raw input, so
        // full = private + shared - head bias.
        let arch = mlp(&[5, 8, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = arch.init(&mut rng);
        params.layers[0].bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        params.layers[1].bias = vec![0.3, -0.1, 0.7];
        let plan = PartitionPlan::from_rate(&arch, 0.375);
        let masks = plan.masks(&arch);
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = forward(&arch, &params, &x, 4, &masks.full).unwrap().logits;
        let private = forward(&arch, &params, &x, 4, &masks.private).unwrap().logits;
        let shared = forward(&arch, &params, &x, 4, &masks.shared).unwrap().logits;
        for i in 0..full.len() {
            let composed = private[i] + shared[i] - params.layers[1].bias[i % 3];
            assert!((full[i] - composed).abs() < 1e-12);
        }
    }

    #[test]
    fn upload_boundaries() {
        let arch = mlp(&[3, 6, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = arch.init(&mut rng);

        let shared = PartitionPlan::all_shared(&arch);
        let payload = split_for_upload(&arch, &params, &shared).unwrap();
        assert_eq!(payload.values, params.tensors().flatten().copied().collect::<Vec<_>>());

        let private = PartitionPlan::all_private(&arch);
        let payload = split_for_upload(&arch, &params, &private).unwrap();
        assert!(payload.values.is_empty());
        let mut merged = params.clone();
        merge_from_download(&arch, &mut merged, &private, &payload).unwrap();
        assert_eq!(merged, params);
    }

    #[test]
    fn merge_rejects_mismatched_payload() {
        let arch = mlp(&[3, 6, 4, 2]);
        let params = arch.zeros();
        let a = PartitionPlan::from_rate(&arch, 0.25);
        let b = PartitionPlan::from_rate(&arch, 0.5);
        let payload = split_for_upload(&arch, &params, &a).unwrap();
        let mut target = params.clone();
        assert!(matches!(
            merge_from_download(&arch, &mut target, &b, &payload),
            Err(Error::Protocol(_))
        ));
        let mut short = payload.clone();
        short.values.pop();
        assert!(matches!(
            merge_from_download(&arch, &mut target, &a, &short),
            Err(Error::Protocol(_))
        ));
    }

    proptest! {
        #[test]
        fn ownership_partitions_every_entry(p in 0.0f64..=1.0, head_private: bool) {
            let arch = cnn();
            let mut plan = PartitionPlan::from_rate(&arch, p);
            plan.head_private |= head_private;
            let own = plan.ownership(&arch);
            let params = arch.zeros();
            prop_assert_eq!(own.private.len(), 2 * arch.slots().len());
            for (mask, tensor) in own.private.iter().zip(params.tensors()) {
                prop_assert_eq!(mask.len(), tensor.len());
            }
            prop_assert_eq!(own.private_count() + own.shared_count(), params.num_entries());
        }

        #[test]
        fn split_merge_roundtrip(p in 0.0f64..=1.0, seed: u64) {
            let arch = cnn();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = arch.init(&mut rng);
            let other = arch.init(&mut rng);
            let plan = PartitionPlan::from_rate(&arch, p);
            let payload = split_for_upload(&arch, &params, &plan).unwrap();

            let mut same = params.clone();
            merge_from_download(&arch, &mut same, &plan, &payload).unwrap();
            prop_assert_eq!(&same, &params);

            // merging into another model replaces exactly the shared entries
            let mut target = other.clone();
            merge_from_download(&arch, &mut target, &plan, &payload).unwrap();
            let own = plan.ownership(&arch);
            for ((mask, (t, (src, orig))), _) in own.private.iter()
                .zip(target.tensors().zip(params.tensors().zip(other.tensors())))
                .zip(0..)
            {
                for i in 0..mask.len() {
                    let expected = if mask[i] { orig[i] } else { src[i] };
                    prop_assert_eq!(t[i].to_bits(), expected.to_bits());
                }
            }
        }
    }
}
