use super::{Architecture, ForwardMask, InputShape, LayerSpec, ModelParams, ParamGrads};
use crate::error::{Error, Result};

/// Everything `backward` needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// Input activation of every layer, batch-major.
    inputs: Vec<Vec<f64>>,
    /// Flat input index selected by each pooling output.
    pool_argmax: Vec<Option<Vec<usize>>>,
    mask: ForwardMask,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mask(&self) -> &ForwardMask {
        &self.mask
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `batch x num_classes`, row-major.
    pub logits: Vec<f64>,
    pub cache: ForwardCache,
}

/// Evaluates the network on a batch. Masked channels of parametric layers
/// output exactly zero.
pub fn forward(
    arch: &Architecture,
    params: &ModelParams,
    x: &[f64],
    batch: usize,
    mask: &ForwardMask,
) -> Result<ForwardPass> {
    arch.check_params(params)?;
    mask.check(arch)?;
    if batch == 0 || x.len() != batch * arch.input().len() {
        return Err(Error::Shape(format!(
            "input has {} values, expected {} samples of {}",
            x.len(),
            batch,
            arch.input().len()
        )));
    }

    let mut inputs = Vec::with_capacity(arch.layers().len());
    let mut pool_argmax = Vec::with_capacity(arch.layers().len());
    let mut current = x.to_vec();
    let mut slot = 0;
    for (idx, layer) in arch.layers().iter().enumerate() {
        let in_shape = arch.shape_at(idx);
        let out_shape = arch.shape_at(idx + 1);
        let mut argmax = None;
        let next = match *layer {
            LayerSpec::Dense { in_units, out_units } => {
                let p = &params.layers[slot];
                let geom = DenseGeom {
                    batch,
                    in_units,
                    out_units,
                };
                let out = dense_forward(&current, geom, &p.weight, &p.bias, &mask.active[slot]);
                slot += 1;
                out
            }
            LayerSpec::Conv2d {
                kernel_size,
                stride,
                ..
            } => {
                let p = &params.layers[slot];
                let geom = ConvGeom::new(batch, in_shape, out_shape, kernel_size, stride);
                let out = conv_forward(&current, geom, &p.weight, &p.bias, &mask.active[slot]);
                slot += 1;
                out
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let geom = ConvGeom::new(batch, in_shape, out_shape, window, stride);
                let (out, idx) = pool_forward(&current, geom);
                argmax = Some(idx);
                out
            }
            LayerSpec::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Flatten => current.clone(),
        };
        inputs.push(std::mem::replace(&mut current, next));
        pool_argmax.push(argmax);
    }

    Ok(ForwardPass {
        logits: current,
        cache: ForwardCache {
            batch,
            inputs,
            pool_argmax,
            mask: mask.clone(),
        },
    })
}

/// Back-propagates `dlogits` (`batch x num_classes`) through a cached
/// forward pass of `params`. Parameters owned by masked channels get
/// exactly zero gradient.
pub fn backward(
    arch: &Architecture,
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Result<ParamGrads> {
    let batch = cache.batch;
    if cache.inputs.len() != arch.layers().len()
        || cache.mask.check(arch).is_err()
        || arch.check_params(params).is_err()
        || cache
            .inputs
            .iter()
            .enumerate()
            .any(|(i, a)| a.len() != batch * arch.shape_at(i).len())
    {
        return Err(Error::Internal(
            "forward cache does not match the architecture".into(),
        ));
    }
    if dlogits.len() != batch * arch.num_classes() {
        return Err(Error::Internal(format!(
            "logit gradient has {} values, expected {}",
            dlogits.len(),
            batch * arch.num_classes()
        )));
    }

    let mut grads = arch.zeros();
    let mut delta = dlogits.to_vec();
    let mut slot = arch.slots().len();
    for (idx, layer) in arch.layers().iter().enumerate().rev() {
        let input = &cache.inputs[idx];
        let in_shape = arch.shape_at(idx);
        let out_shape = arch.shape_at(idx + 1);
        // The raw network input needs no gradient.
        let want_input_grad = idx > 0;
        delta = match *layer {
            LayerSpec::Dense { in_units, out_units } => {
                slot -= 1;
                let geom = DenseGeom {
                    batch,
                    in_units,
                    out_units,
                };
                let g = &mut grads.layers[slot];
                dense_backward(
                    input,
                    &mut delta,
                    geom,
                    &params.layers[slot].weight,
                    &cache.mask.active[slot],
                    &mut g.weight,
                    &mut g.bias,
                    want_input_grad,
                )
            }
            LayerSpec::Conv2d {
                kernel_size,
                stride,
                ..
            } => {
                slot -= 1;
                let geom = ConvGeom::new(batch, in_shape, out_shape, kernel_size, stride);
                let g = &mut grads.layers[slot];
                conv_backward(
                    input,
                    &mut delta,
                    geom,
                    &params.layers[slot].weight,
                    &cache.mask.active[slot],
                    &mut g.weight,
                    &mut g.bias,
                    want_input_grad,
                )
            }
            LayerSpec::MaxPool2d { .. } => {
                let argmax = cache.pool_argmax[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Internal("pooling cache missing".into()))?;
                let mut dx = vec![0.0; input.len()];
                for (&src, &d) in argmax.iter().zip(&delta) {
                    dx[src] += d;
                }
                dx
            }
            LayerSpec::Relu => delta
                .iter()
                .zip(input)
                .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => delta,
        };
    }
    Ok(grads)
}

#[derive(Clone, Copy)]
struct DenseGeom {
    batch: usize,
    in_units: usize,
    out_units: usize,
}

fn dense_forward(x: &[f64], g: DenseGeom, weight: &[f64], bias: &[f64], active: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_units];
    for (xb, ob) in x.chunks_exact(g.in_units).zip(out.chunks_exact_mut(g.out_units)) {
        for (o, slot) in ob.iter_mut().enumerate() {
            if !active[o] {
                continue;
            }
            let row = &weight[o * g.in_units..(o + 1) * g.in_units];
            *slot = bias[o] + dot(row, xb);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    delta: &mut [f64],
    g: DenseGeom,
    weight: &[f64],
    active: &[bool],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let mut dx = if want_input_grad {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_units..(b + 1) * g.in_units];
        let db = &mut delta[b * g.out_units..(b + 1) * g.out_units];
        for o in 0..g.out_units {
            if !active[o] {
                db[o] = 0.0;
                continue;
            }
            let d = db[o];
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let grow = &mut gw[o * g.in_units..(o + 1) * g.in_units];
            axpy(d, xb, grow);
            if want_input_grad {
                let row = &weight[o * g.in_units..(o + 1) * g.in_units];
                axpy(d, row, &mut dx[b * g.in_units..(b + 1) * g.in_units]);
            }
        }
    }
    dx
}

/// Geometry shared by convolution and pooling (valid padding).
#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(batch: usize, input: InputShape, output: InputShape, k: usize, stride: usize) -> Self {
        let (in_c, in_h, in_w) = image_dims(input);
        let (out_c, out_h, out_w) = image_dims(output);
        ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            k,
            stride,
        }
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

fn image_dims(shape: InputShape) -> (usize, usize, usize) {
    match shape {
        InputShape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        InputShape::Flat { features } => (features, 1, 1),
    }
}

fn conv_forward(x: &[f64], g: ConvGeom, weight: &[f64], bias: &[f64], active: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let row_len = g.in_c * g.k * g.k;
    for (xb, ob) in x.chunks_exact(g.in_len()).zip(out.chunks_exact_mut(g.out_len())) {
        for oc in 0..g.out_c {
            if !active[oc] {
                continue;
            }
            let w = &weight[oc * row_len..(oc + 1) * row_len];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias[oc];
                    for ic in 0..g.in_c {
                        for ky in 0..g.k {
                            let iy = oy * g.stride + ky;
                            let xrow = &xb[(ic * g.in_h + iy) * g.in_w + ox * g.stride..][..g.k];
                            let wrow = &w[(ic * g.k + ky) * g.k..][..g.k];
                            acc += dot(wrow, xrow);
                        }
                    }
                    ob[(oc * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    delta: &mut [f64],
    g: ConvGeom,
    weight: &[f64],
    active: &[bool],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let mut dx = if want_input_grad {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let row_len = g.in_c * g.k * g.k;
    let plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let db = &mut delta[b * g.out_len()..(b + 1) * g.out_len()];
        for oc in 0..g.out_c {
            let dplane = &mut db[oc * plane..(oc + 1) * plane];
            if !active[oc] {
                dplane.fill(0.0);
                continue;
            }
            let w = &weight[oc * row_len..(oc + 1) * row_len];
            let gwo = &mut gw[oc * row_len..(oc + 1) * row_len];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let d = dplane[oy * g.out_w + ox];
                    if d == 0.0 {
                        continue;
                    }
                    gb[oc] += d;
                    for ic in 0..g.in_c {
                        for ky in 0..g.k {
                            let iy = oy * g.stride + ky;
                            let start = (ic * g.in_h + iy) * g.in_w + ox * g.stride;
                            let wstart = (ic * g.k + ky) * g.k;
                            axpy(d, &xb[start..start + g.k], &mut gwo[wstart..wstart + g.k]);
                            if want_input_grad {
                                let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
                                axpy(d, &w[wstart..wstart + g.k], &mut dxb[start..start + g.k]);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; ties go to the first position in scan order.
fn pool_forward(x: &[f64], g: ConvGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; g.batch * g.out_len()];
    let mut argmax = vec![0usize; out.len()];
    for b in 0..g.batch {
        let base = b * g.in_len();
        for c in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let i = base + (c * g.in_h + oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
                            if x[i] > best {
                                best = x[i];
                                best_idx = i;
                            }
                        }
                    }
                    let o = b * g.out_len() + (c * g.out_h + oy) * g.out_w + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
