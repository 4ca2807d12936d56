//! Adam with decoupled decay, and a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use super::{Grads, Tape, Tensor};
use crate::Result;

/// Which decoupled decay coefficient applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayGroup {
    /// Ordinary weights.
    Weight,
    /// Restriction-map learner weights (their own decay coefficient).
    Sheaf,
    /// Never decayed (biases, residual vectors).
    None,
}

/// Named trainable array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub decay: DecayGroup,
}

impl Param {
    pub fn new(name: &str, shape: Vec<usize>, values: Vec<f64>, decay: DecayGroup) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            name: name.to_string(),
            shape,
            values,
            decay,
        }
    }
}

/// Ordered set of parameters; the order fixes the tape leaf layout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Param) {
        self.params.push(p);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Registers every parameter as a grad-requiring leaf, in order.
    pub fn leaf_all(&self, tape: &Tape) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), true))
            .collect()
    }
}

/// Adam with decoupled weight decay; restriction-map learner parameters use a
/// separate decay coefficient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub sheaf_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, sheaf_decay: f64, params: &ParamSet) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            sheaf_decay,
            m: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with `params[i]`; `None` means zero
    /// gradient (decay still applies).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params.get_mut(i);
            let decay = match p.decay {
                DecayGroup::Weight => self.weight_decay,
                DecayGroup::Sheaf => self.sheaf_decay,
                DecayGroup::None => 0.0,
            };
            let zero;
            let g: &[f64] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; p.values.len()];
                    &zero
                }
            };
            for (k, val) in p.values.iter_mut().enumerate() {
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *val -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *val);
            }
        }
    }
}

/// Relative gap between two gradient estimates. The denominator floor keeps
/// central-difference rounding noise on true-zero coordinates from reading as
/// an O(1) relative error.
fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate. Returns the worst relative
/// error over all parameters.
pub fn grad_check<F>(f: F, params: &[(Vec<usize>, Vec<f64>)], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let tape = Tape::new();
    let handles: Vec<Tensor> = params
        .iter()
        .map(|(shape, values)| tape.leaf(shape.clone(), values.clone(), true))
        .collect();
    let out = f(&tape, &handles)?;
    let grads: Grads = tape.backward(out);

    let eval = |perturbed: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let handles: Vec<Tensor> = params
            .iter()
            .zip(perturbed)
            .map(|((shape, _), values)| tape.leaf(shape.clone(), values.clone(), false))
            .collect();
        let out = f(&tape, &handles)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut values: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    for (pi, handle) in handles.iter().enumerate() {
        let analytic = grads
            .get(*handle)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; values[pi].len()]);
        for k in 0..values[pi].len() {
            let keep = values[pi][k];
            values[pi][k] = keep + step;
            let up = eval(&values)?;
            values[pi][k] = keep - step;
            let down = eval(&values)?;
            values[pi][k] = keep;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_gap(analytic[k], fd));
        }
    }
    Ok(worst)
}
