//! Central finite-difference check of model gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ForwardOptions, Model, TokenBatch};
use crate::{Real, Result};

/// Worst disagreement within one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub params: Vec<ParamCheck>,
    /// Closest approach of any relu/hardtanh input to a kink.
    pub kink_distance: f64,
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the eval-mode loss gradient of every parameter entry with
/// `(L(p + h) - L(p - h)) / 2h`.
pub fn check_gradients<T: Real>(model: &Model<T>, batch: &TokenBatch, h: f64, floor: f64) -> Result<GradientCheck> {
    let carry = model.zero_carry(batch.batch());
    let opts = ForwardOptions::default();
    let pass = model.forward::<ChaCha8Rng>(batch, &carry, None, opts)?;
    let kink_distance = pass.graph().kink_distance();
    let grads = pass.gradients(model.params())?;

    let mut probe = model.clone();
    let loss_at = |probe: &mut Model<T>, id, k: usize, value: T| -> Result<f64> {
        probe.params_mut().get_mut(id).data_mut()[k] = value;
        Ok(probe.forward::<ChaCha8Rng>(batch, &carry, None, opts)?.loss().as_f64())
    };
    let mut params = Vec::new();
    for id in model.params().ids() {
        let original = model.params().get(id).clone();
        let mut worst = ParamCheck {
            name: model.params().name(id).into(),
            entries: original.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..original.len() {
            let p = original.data()[k];
            let up = loss_at(&mut probe, id, k, p + T::lit(h))?;
            let down = loss_at(&mut probe, id, k, p - T::lit(h))?;
            probe.params_mut().get_mut(id).data_mut()[k] = p;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].data()[k].as_f64();
            let err = relative_error(analytic, numeric, floor);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = k;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
        }
        params.push(worst);
    }
    Ok(GradientCheck { params, kink_distance })
}
