//! Run configuration: JSON schema and flag overrides.

use serde::{Deserialize, Serialize};

use roa_core::model::{SplitConfig, SystemSpec};
use roa_core::optim::{GradMethod, OptimizerConfig};
use roa_core::poly::Polynomial;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermCfg {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

fn build_poly(nvars: usize, terms: &[TermCfg], what: &str) -> anyhow::Result<Polynomial> {
    let mut p = Polynomial::zero(nvars);
    for t in terms {
        if t.exponents.len() != nvars {
            anyhow::bail!(
                "{what}: term has {} exponents, expected {nvars}",
                t.exponents.len()
            );
        }
        p.add_term(roa_core::poly::Monomial(t.exponents.clone()), t.coeff);
    }
    Ok(p)
}

/// Inline system description. Polynomial entries use exponent tuples in
/// the order `(t, x_1..x_n, u_1..u_m)`; input-set inequalities use only
/// the input variables and target inequalities only the states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemCfg {
    pub n: usize,
    pub m: usize,
    pub f: Vec<Vec<TermCfg>>,
    pub x_box: Vec<(f64, f64)>,
    #[serde(default)]
    pub u_set: Vec<Vec<TermCfg>>,
    pub u_box: Vec<(f64, f64)>,
    #[serde(default)]
    pub xt_set: Vec<Vec<TermCfg>>,
    #[serde(rename = "T")]
    pub t_final: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SystemField {
    Builtin(String),
    Inline(Box<SystemCfg>),
}

// hand-rolled so inline-system mistakes keep their field-precise errors
// instead of serde's catch-all untagged message
impl<'de> Deserialize<'de> for SystemField {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(name) => Ok(SystemField::Builtin(name)),
            other => serde_json::from_value::<SystemCfg>(other)
                .map(|cfg| SystemField::Inline(Box::new(cfg)))
                .map_err(|e| serde::de::Error::custom(format!("system: {e}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SplitsField {
    Explicit {
        #[serde(default)]
        time: Vec<f64>,
        axes: Vec<Vec<f64>>,
    },
    Equidistant {
        equidistant: EquidistantCfg,
    },
}

impl<'de> Deserialize<'de> for SplitsField {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            time: Option<Vec<f64>>,
            #[serde(default)]
            axes: Option<Vec<Vec<f64>>>,
            #[serde(default)]
            equidistant: Option<EquidistantCfg>,
        }
        let raw = Raw::deserialize(deserializer)?;
        match (raw.equidistant, raw.axes) {
            (Some(e), None) => Ok(SplitsField::Equidistant { equidistant: e }),
            (None, Some(axes)) => Ok(SplitsField::Explicit {
                time: raw.time.unwrap_or_default(),
                axes,
            }),
            (Some(_), Some(_)) => Err(serde::de::Error::custom(
                "splits: give either explicit positions or an equidistant count, not both",
            )),
            (None, None) => Err(serde::de::Error::custom(
                "splits: missing field `axes` (or an `equidistant` block)",
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquidistantCfg {
    #[serde(default)]
    pub time: usize,
    pub axes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCfg {
    #[serde(default = "default_bench_degrees")]
    pub degrees: Vec<u32>,
    #[serde(default = "default_bench_ntheta")]
    pub n_theta: Vec<usize>,
}

fn default_bench_degrees() -> Vec<u32> {
    vec![4]
}

fn default_bench_ntheta() -> Vec<usize> {
    vec![2, 4, 6]
}

impl Default for BenchmarkCfg {
    fn default() -> Self {
        BenchmarkCfg {
            degrees: default_bench_degrees(),
            n_theta: default_bench_ntheta(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: SystemField,
    #[serde(default = "default_degree")]
    pub degree: u32,
    pub splits: SplitsField,
    #[serde(default)]
    pub optimizer: Option<OptimizerPatch>,
    #[serde(default)]
    pub grad: Option<GradMethod>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mc_samples: Option<usize>,
    #[serde(default)]
    pub grid_resolution: Option<Vec<usize>>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkCfg>,
}

fn default_degree() -> u32 {
    4
}

fn default_tol() -> f64 {
    1e-9
}

fn default_seed() -> u64 {
    0
}

/// Optional per-field overrides of the optimizer defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OptimizerPatch {
    pub step_size: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps_adam: Option<f64>,
    pub max_iters: Option<usize>,
    pub min_gap_frac: Option<f64>,
    pub solver_tol: Option<f64>,
    pub lsqr_maxiter: Option<usize>,
}

impl RunConfig {
    pub fn build_system(&self) -> anyhow::Result<SystemSpec> {
        let sys = match &self.system {
            SystemField::Builtin(name) => match name.as_str() {
                "double-integrator" => SystemSpec::double_integrator(),
                "brockett" => SystemSpec::brockett(),
                other => anyhow::bail!(
                    "unknown system '{other}' (built-ins: double-integrator, brockett)"
                ),
            },
            SystemField::Inline(cfg) => {
                let nz = 1 + cfg.n + cfg.m;
                let f = cfg
                    .f
                    .iter()
                    .map(|terms| build_poly(nz, terms, "dynamics"))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let u_set = cfg
                    .u_set
                    .iter()
                    .map(|terms| build_poly(cfg.m, terms, "input set"))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let xt_set = cfg
                    .xt_set
                    .iter()
                    .map(|terms| build_poly(cfg.n, terms, "target set"))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                SystemSpec {
                    n: cfg.n,
                    m: cfg.m,
                    f,
                    x_box: cfg.x_box.clone(),
                    u_set,
                    u_box: cfg.u_box.clone(),
                    xt_set,
                    t_final: cfg.t_final,
                }
            }
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn build_splits(&self, sys: &SystemSpec) -> anyhow::Result<SplitConfig> {
        let splits = match &self.splits {
            SplitsField::Explicit { time, axes } => {
                let mut time = time.clone();
                time.sort_by(f64::total_cmp);
                let mut axes = axes.clone();
                for a in &mut axes {
                    a.sort_by(f64::total_cmp);
                }
                SplitConfig {
                    time_splits: time,
                    axis_splits: axes,
                }
            }
            SplitsField::Equidistant { equidistant } => {
                if equidistant.axes.len() != sys.n {
                    anyhow::bail!(
                        "equidistant.axes has {} entries for {} states",
                        equidistant.axes.len(),
                        sys.n
                    );
                }
                SplitConfig::equidistant(sys, equidistant.time, &equidistant.axes)
            }
        };
        splits.validate(sys)?;
        Ok(splits)
    }

    pub fn build_optimizer(&self, iters_flag: Option<usize>) -> OptimizerConfig {
        let mut cfg = OptimizerConfig {
            solver_tol: self.tol,
            ..OptimizerConfig::default()
        };
        if let Some(p) = &self.optimizer {
            if let Some(v) = p.step_size {
                cfg.step_size = v;
            }
            if let Some(v) = p.beta1 {
                cfg.beta1 = v;
            }
            if let Some(v) = p.beta2 {
                cfg.beta2 = v;
            }
            if let Some(v) = p.eps_adam {
                cfg.eps_adam = v;
            }
            if let Some(v) = p.max_iters {
                cfg.max_iters = v;
            }
            if let Some(v) = p.min_gap_frac {
                cfg.min_gap_frac = v;
            }
            if let Some(v) = p.solver_tol {
                cfg.solver_tol = v;
            }
            if let Some(v) = p.lsqr_maxiter {
                cfg.lsqr_maxiter = v;
            }
        }
        if let Some(g) = self.grad {
            cfg.grad_method = g;
        }
        if let Some(it) = iters_flag {
            cfg.max_iters = it;
        }
        cfg
    }
}
