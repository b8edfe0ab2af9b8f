use super::{ModelParams, ParamGrads};
use crate::error::{Error, Result};

/// SGD with Nesterov momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// g' = g + weight_decay * w
/// v  = momentum * v + g'
/// w  = w - lr * (g' + momentum * v)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(like: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: like.zeros_like(),
        }
    }

    /// Applies one update. Rejects non-finite gradients without touching
    /// `params`; the caller attaches round/client context.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.velocity) {
            return Err(Error::Internal("optimizer buffers do not match the model".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Internal("non-finite gradient".into()));
        }
        let (lr, m, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((w, g), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                let gd = gi + wd * *wi;
                *vi = m * *vi + gd;
                *wi -= lr * (gd + m * *vi);
            }
        }
        if !params.is_finite() {
            return Err(Error::Internal("update produced non-finite weights".into()));
        }
        Ok(())
    }
}
