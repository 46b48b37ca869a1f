//! Combined training objective.
//!
//! Manual mode: `L = L_c + λ·L_s`. Automatic mode weighs both tasks by
//! learned log-variances `s_c, s_s` (homoscedastic uncertainty weighting):
//! `L = e^{−s_c}·L_c + e^{−s_s}·L_s + (s_c + s_s)/2`, with `s_c = s_s = 0`
//! at initialisation. The L2 term is carried by the optimizer as decoupled
//! weight decay, not by the loss.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::params::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaMode {
    Manual { lambda: f64 },
    Automatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: LambdaMode,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { lambda: LambdaMode::Manual { lambda: 1.0 }, weight_decay: 1e-4 }
    }
}

impl ObjectiveConfig {
    pub fn manual(lambda: f64) -> Self {
        ObjectiveConfig { lambda: LambdaMode::Manual { lambda }, ..Default::default() }
    }

    pub fn automatic() -> Self {
        ObjectiveConfig { lambda: LambdaMode::Automatic, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let LambdaMode::Manual { lambda } = self.lambda {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("objective.lambda must lie in [0, 1], got {lambda}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "objective.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Learnable log-variances for automatic task weighting.
#[derive(Clone, Debug)]
pub struct UncertaintyWeights {
    pub log_var_cls: ParamId,
    pub log_var_shift: ParamId,
}

impl UncertaintyWeights {
    pub fn new<F: Real>(store: &mut ParamStore<F>) -> Result<Self> {
        Ok(UncertaintyWeights {
            log_var_cls: store.add_undecayed("objective.log_var_cls", Tensor::scalar(F::zero()))?,
            log_var_shift: store.add_undecayed("objective.log_var_shift", Tensor::scalar(F::zero()))?,
        })
    }
}

fn weighted<F: Real>(g: &mut Graph<F>, loss: Var, log_var: Var) -> Result<Var> {
    let neg = g.tape.scale(log_var, -F::one());
    let precision = g.tape.exp(neg);
    let term = g.tape.mul(precision, loss)?;
    let half = g.tape.scale(log_var, F::of(0.5));
    g.tape.add(term, half)
}

/// Total objective from `L_c` and, when the shift task is active, `L_s`.
pub fn total_objective<F: Real>(
    g: &mut Graph<F>,
    l_c: Var,
    l_s: Option<Var>,
    cfg: &ObjectiveConfig,
    weights: Option<&UncertaintyWeights>,
) -> Result<Var> {
    match cfg.lambda {
        LambdaMode::Manual { lambda } => match l_s {
            Some(l_s) if lambda != 0.0 => {
                let s = g.tape.scale(l_s, F::of(lambda));
                g.tape.add(l_c, s)
            }
            _ => Ok(l_c),
        },
        LambdaMode::Automatic => {
            let w = weights
                .ok_or_else(|| Error::Config("automatic task weighting needs log-variance parameters".into()))?;
            let (sc, ss) = (g.param(w.log_var_cls), g.param(w.log_var_shift));
            let c = weighted(g, l_c, sc)?;
            match l_s {
                Some(l_s) => {
                    let s = weighted(g, l_s, ss)?;
                    g.tape.add(c, s)
                }
                None => Ok(c),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(cfg: ObjectiveConfig, lc: f64, ls: Option<f64>, logs: (f64, f64)) -> f64 {
        let mut store = ParamStore::<f64>::new();
        let w = UncertaintyWeights::new(&mut store).unwrap();
        store.get_mut(w.log_var_cls).value = Tensor::scalar(logs.0);
        store.get_mut(w.log_var_shift).value = Tensor::scalar(logs.1);
        let mut g = Graph::new(&store);
        let c = g.input(Tensor::scalar(lc));
        let s = ls.map(|v| g.input(Tensor::scalar(v)));
        let l = total_objective(&mut g, c, s, &cfg, Some(&w)).unwrap();
        g.tape.scalar(l)
    }

    #[test]
    fn manual_examples() {
        assert_eq!(eval(ObjectiveConfig::manual(0.0), 0.731, Some(0.3), (0.0, 0.0)), 0.731);
        assert!((eval(ObjectiveConfig::manual(1.0), 0.5, Some(0.3), (0.0, 0.0)) - 0.8).abs() < 1e-15);
        assert_eq!(eval(ObjectiveConfig::manual(0.9), 0.5, None, (0.0, 0.0)), 0.5);
    }

    #[test]
    fn automatic_at_init_is_plain_sum() {
        assert_eq!(eval(ObjectiveConfig::automatic(), 0.5, Some(0.3), (0.0, 0.0)), 0.8);
        let v = eval(ObjectiveConfig::automatic(), 0.5, Some(0.3), (0.4, -0.2));
        let expect = (-0.4f64).exp() * 0.5 + (0.2f64).exp() * 0.3 + 0.1;
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(ObjectiveConfig::manual(1.2).validate().is_err());
        assert!(ObjectiveConfig::manual(0.9).validate().is_ok());
        let mut c = ObjectiveConfig::automatic();
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
    }
}
