//! Finite-difference check of the training gradient on random small
//! networks.
//!
//! The objective is `CE(full) + lambda * L_CD` with the distillation targets
//! frozen at the evaluation point, which is exactly the function whose
//! gradient training uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::client::batch_gradient;
use crate::decouple::{PartitionPlan, SubnetMasks};
use crate::distill::kl;
use crate::error::Result;
use crate::nn::{cross_entropy, forward, softmax_rows, Architecture, InputShape, LayerSpec, ModelParams};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub index: usize,
    pub description: String,
    pub parameters: usize,
    pub lambda: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense {
        in_units: i,
        out_units: o,
    }
}

/// Random MLP or CNN with two to four parametric layers.
pub fn random_architecture<R: Rng>(rng: &mut R) -> Result<Architecture> {
    let classes = rng.random_range(2..=4);
    let parametric = rng.random_range(2..=4);
    if rng.random_bool(0.6) {
        let mut width = rng.random_range(3..=6);
        let input = InputShape::Flat { features: width };
        let mut layers = Vec::new();
        for _ in 0..parametric - 1 {
            let out = rng.random_range(2..=6);
            layers.push(dense(width, out));
            layers.push(LayerSpec::Relu);
            width = out;
        }
        layers.push(dense(width, classes));
        return Architecture::new(input, layers);
    }
    let channels = rng.random_range(1..=2);
    let side = rng.random_range(6..=8);
    let input = InputShape::Image {
        channels,
        height: side,
        width: side,
    };
    let mut layers = Vec::new();
    let (mut c, mut s) = (channels, side);
    let convs = (parametric - 1).min(2);
    for i in 0..convs {
        let out = rng.random_range(2..=4);
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel_size: 3,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
        c = out;
        s -= 2;
        // Pool only if a following conv still fits.
        if i == 0 && s >= 4 && (convs == 1 || s >= 6) && rng.random_bool(0.5) {
            layers.push(LayerSpec::MaxPool2d { window: 2, stride: 2 });
            s = (s - 2) / 2 + 1;
        }
    }
    layers.push(LayerSpec::Flatten);
    let mut width = c * s * s;
    if parametric - 1 > convs {
        let out = rng.random_range(2..=5);
        layers.push(dense(width, out));
        layers.push(LayerSpec::Relu);
        width = out;
    }
    layers.push(dense(width, classes));
    Architecture::new(input, layers)
}

fn frozen_objective(
    arch: &Architecture,
    params: &ModelParams,
    masks: &SubnetMasks,
    x: &[f64],
    y: &[usize],
    lambda: f64,
    targets: &(Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let classes = arch.num_classes();
    let b = y.len();
    let full = forward(arch, params, x, b, &masks.full)?;
    let ce = cross_entropy(&softmax_rows(&full.logits, classes), y);
    let yl = softmax_rows(&forward(arch, params, x, b, &masks.private)?.logits, classes);
    let yg = softmax_rows(&forward(arch, params, x, b, &masks.shared)?.logits, classes);
    let (yl0, yg0) = targets;
    let mut cd = 0.0;
    for i in 0..b {
        let r = i * classes..(i + 1) * classes;
        cd += 0.5 * (kl(&yl0[r.clone()], &yg[r.clone()]) + kl(&yg0[r.clone()], &yl[r]));
    }
    Ok(ce + lambda * cd / b as f64)
}

/// Checks one network; returns the largest relative error over all entries.
pub fn check_network<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<(f64, f64, usize)> {
    let mut params = arch.init(rng);
    for layer in &mut params.layers {
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let plan = loop {
        let plan = PartitionPlan::from_rate(arch, rng.random_range(0.3..0.7));
        if plan.both_subnets_connected() {
            break plan;
        }
    };
    let masks = plan.masks(arch);
    let batch = 3;
    let x: Vec<f64> = (0..batch * arch.input().len()).map(|_| rng.random::<f64>()).collect();
    let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..arch.num_classes())).collect();
    let lambda = rng.random_range(0.5..2.0);

    let (_, grads) = batch_gradient(arch, &params, &masks, &x, &y, lambda, true)?;
    let classes = arch.num_classes();
    let targets = (
        softmax_rows(&forward(arch, &params, &x, batch, &masks.private)?.logits, classes),
        softmax_rows(&forward(arch, &params, &x, batch, &masks.shared)?.logits, classes),
    );

    let mut worst: f64 = 0.0;
    let analytic: Vec<Vec<f64>> = grads.tensors().map(|t| t.to_vec()).collect();
    for (ti, tensor_grad) in analytic.iter().enumerate() {
        for (i, &a) in tensor_grad.iter().enumerate() {
            let original = tensor_value(&params, ti, i);
            set_tensor_value(&mut params, ti, i, original + FD_STEP);
            let up = frozen_objective(arch, &params, &masks, &x, &y, lambda, &targets)?;
            set_tensor_value(&mut params, ti, i, original - FD_STEP);
            let down = frozen_objective(arch, &params, &masks, &x, &y, lambda, &targets)?;
            set_tensor_value(&mut params, ti, i, original);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok((worst, lambda, params.num_entries()))
}

fn tensor_value(p: &ModelParams, tensor: usize, i: usize) -> f64 {
    let layer = &p.layers[tensor / 2];
    if tensor.is_multiple_of(2) {
        layer.weight[i]
    } else {
        layer.bias[i]
    }
}

fn set_tensor_value(p: &mut ModelParams, tensor: usize, i: usize, v: f64) {
    let layer = &mut p.layers[tensor / 2];
    if tensor.is_multiple_of(2) {
        layer.weight[i] = v;
    } else {
        layer.bias[i] = v;
    }
}

fn describe(arch: &Architecture) -> String {
    let kinds: Vec<&str> = arch
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::MaxPool2d { .. } => "pool",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        })
        .collect();
    kinds.join("-")
}

/// Runs the check on `nets` random networks drawn from `seed`.
pub fn run(seed: u64, nets: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(nets);
    for index in 0..nets {
        let arch = random_architecture(&mut rng)?;
        let (max_rel_error, lambda, parameters) = check_network(&arch, &mut rng)?;
        cases.push(GradcheckCase {
            index,
            description: describe(&arch),
            parameters,
            lambda,
            max_rel_error,
        });
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        cases,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_networks_pass() {
        let report = run(11, 8).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.cases.iter().any(|c| c.description.contains("conv")));
    }

    #[test]
    fn random_architectures_are_always_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let arch = random_architecture(&mut rng).unwrap();
            let parametric = arch.slots().len();
            assert!((2..=4).contains(&parametric), "{parametric}");
        }
    }
}
