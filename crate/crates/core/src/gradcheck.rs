//! End-to-end check of analytic parameter gradients against central finite
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MagnError, Result};
use crate::exec::BranchMode;
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Side of the square input image.
    pub size: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are compared absolutely.
    pub floor: f64,
    /// Test hook: perturbs the analytic gradient of the first tensor.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(),
            size: 15,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-7,
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    /// One line per parameter tensor.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let flag = if g.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<32} {:>6} {:.3e} {flag}\n", g.name, g.count, g.max_rel_error));
        }
        s
    }
}

/// Parameters with every tensor randomised, including biases, slopes and
/// the tail, so no gradient path is trivially zero.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for (name, t) in p.names().to_vec().iter().zip(p.tensors_mut()) {
        let bound = if name.ends_with(".act") {
            0.2
        } else {
            // Keep at least the fan-in scale for zero-initialised tensors.
            t.max_abs().max(0.2)
        };
        for v in t.data_mut() {
            *v += rng.gen_range(-bound..bound) * 0.5;
        }
    }
    Ok(p)
}

pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mcfg = ModelConfig {
        precision: crate::model::Precision::F64,
        ..cfg.model.clone()
    };
    mcfg.validate()?;
    let params = random_params(&mcfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let shape = [cfg.size, cfg.size, mcfg.in_channels];
    let n = shape.iter().product();
    let input = Tensor::new(&shape, (0..n).map(|_| rng.gen::<f64>()).collect())?;
    let target = Tensor::new(&shape, (0..n).map(|_| rng.gen::<f64>()).collect())?;

    let pg = model::loss_and_gradients(&params, &mcfg, &input, &target, BranchMode::Record(Vec::new()))?;
    let log = pg
        .branches
        .into_log()
        .ok_or_else(|| MagnError::invalid("gradcheck", "branch log missing".to_string()))?;
    let replay = BranchMode::replay(log);
    let mut grads = pg.grads;
    if cfg.corrupt_gradient {
        if let Some(g) = grads.first_mut() {
            for v in g.data_mut() {
                *v = *v * 1.5 + 1e-3;
            }
        }
    }

    let mut groups = Vec::with_capacity(params.len());
    for (ti, name) in params.names().iter().enumerate() {
        let len = params.tensors()[ti].len();
        let errors = (0..len)
            .into_par_iter()
            .map(|j| {
                let eval = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data_mut()[j] += delta;
                    model::loss(&p, &mcfg, &input, &target, replay.clone())
                };
                let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
                let analytic = grads[ti].data()[j];
                let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
                Ok((analytic - numeric).abs() / denom)
            })
            .collect::<Result<Vec<f64>>>()?;
        groups.push(GroupError {
            name: name.clone(),
            count: len,
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}
