//! Run configuration. One TOML file (`key = value`, `[section]` headers)
//! fully determines a pipeline run.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::PoissonProblem;
use crate::mat2;
use crate::mesh::{build_rect_mesh, Mesh};
use crate::optimize::LbfgsOptions;
use crate::prior::{BiLaplacianPrior, PriorCoefficients};
use crate::risk::{Penalty, RiskMeasure};
use crate::shape::{bernstein_ffd_basis, fourier_basis, DisplacementBasis, Source};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_lx")]
    pub lx: f64,
    #[serde(default = "default_ly")]
    pub ly: f64,
}

fn default_lx() -> f64 {
    4.0
}

fn default_ly() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub gamma: f64,
    pub delta: f64,
    /// Eigenvalue along `(sin a, cos a)`.
    pub theta_along: f64,
    /// Eigenvalue along `(cos a, -sin a)`.
    pub theta_across: f64,
    pub theta_angle: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { gamma: 1.0, delta: 25.0, theta_along: 2.0, theta_across: 0.5, theta_angle: std::f64::consts::FRAC_PI_4 }
    }
}

impl PriorConfig {
    pub fn coefficients(&self) -> PriorCoefficients {
        PriorCoefficients {
            gamma: self.gamma,
            delta: self.delta,
            theta: mat2::anisotropic_tensor(self.theta_along, self.theta_across, self.theta_angle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    Fourier {
        n_z: i64,
        /// Symmetric box half-width for every coefficient.
        half_width: f64,
    },
    BernsteinFfd {
        k: usize,
        l: usize,
        lower: [f64; 2],
        upper: [f64; 2],
        half_width: f64,
    },
}

impl ShapeConfig {
    pub fn basis(&self, lx: f64) -> Result<DisplacementBasis> {
        match *self {
            ShapeConfig::Fourier { n_z, .. } => fourier_basis(n_z, lx),
            ShapeConfig::BernsteinFfd { k, l, lower, upper, .. } => bernstein_ffd_basis(k, l, lower, upper),
        }
    }

    pub fn half_width(&self) -> f64 {
        match *self {
            ShapeConfig::Fourier { half_width, .. } | ShapeConfig::BernsteinFfd { half_width, .. } => half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_amplitude")]
    pub source_amplitude: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_amplitude() -> f64 {
    0.1
}

fn default_tau() -> f64 {
    1.0
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { source_amplitude: default_amplitude(), tau: default_tau() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_s: usize,
    #[serde(default)]
    pub n_test: usize,
    /// Snapshots used for POD; defaults to all training samples.
    #[serde(default)]
    pub n_pod: Option<usize>,
    #[serde(default)]
    pub n_as: Option<usize>,
    pub r_u: usize,
    pub r_m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Pde,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuuConfig {
    pub risk: RiskMeasure,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub n_saa: usize,
    pub backend: BackendKind,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_pgtol")]
    pub pgtol: f64,
    #[serde(default)]
    pub ftol: f64,
}

fn default_alpha() -> f64 {
    0.001
}

fn default_max_iterations() -> usize {
    500
}

fn default_pgtol() -> f64 {
    1e-8
}

impl OuuConfig {
    pub fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions { max_iterations: self.max_iterations, pgtol: self.pgtol, ftol: self.ftol, ..LbfgsOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub n_mc: usize,
    #[serde(default = "default_beta")]
    pub cvar_beta: f64,
    #[serde(default = "default_entropic")]
    pub entropic_beta: f64,
}

fn default_beta() -> f64 {
    0.95
}

fn default_entropic() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_reps() -> usize {
    30
}

fn default_batch() -> usize {
    16
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repetitions: default_reps(), batch: default_batch() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    pub shape: ShapeConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ouu: Option<OuuConfig>,
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
}

/// Stage seeds are fixed offsets from the master seed.
pub mod seed_offset {
    pub const GENERATE: u64 = 0;
    pub const TEST: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SAA: u64 = 3;
    pub const EVALUATE: u64 = 4;
    pub const BENCH: u64 = 5;
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh.nx == 0 || self.mesh.ny == 0 || !(self.mesh.lx > 0.0) || !(self.mesh.ly > 0.0) {
            return Err(Error::invalid("mesh needs positive cell counts and lengths"));
        }
        if !(self.shape.half_width() > 0.0) {
            return Err(Error::invalid("shape box half-width must be positive"));
        }
        let d = &self.data;
        if d.n_s < 2 {
            return Err(Error::invalid("need at least two training samples"));
        }
        let n_pod = d.n_pod.unwrap_or(d.n_s);
        let n_as = d.n_as.unwrap_or(d.n_s);
        if n_pod > d.n_s || n_as > d.n_s || n_pod < 2 || n_as < 1 {
            return Err(Error::invalid("n_pod and n_as must lie within the training sample count"));
        }
        if d.r_u == 0 || d.r_u > n_pod - 1 {
            return Err(Error::invalid(format!("r_u = {} must lie in 1..=n_pod - 1 = {}", d.r_u, n_pod - 1)));
        }
        if d.r_m == 0 {
            return Err(Error::invalid("r_m must be positive"));
        }
        if self.network.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        self.train.validate()?;
        if let Some(o) = &self.ouu {
            o.risk.validate()?;
            if o.n_saa == 0 || !(o.alpha >= 0.0) {
                return Err(Error::invalid("ouu needs n_saa > 0 and alpha >= 0"));
            }
        }
        if let Some(e) = &self.evaluate {
            if e.n_mc == 0 || !(e.cvar_beta > 0.0 && e.cvar_beta < 1.0) || !(e.entropic_beta > 0.0) {
                return Err(Error::invalid("evaluate needs n_mc > 0, cvar_beta in (0, 1), entropic_beta > 0"));
            }
        }
        if self.bench.repetitions == 0 || self.bench.batch == 0 {
            return Err(Error::invalid("bench repetitions and batch must be positive"));
        }
        Ok(())
    }

    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_add(offset)
    }

    pub fn build_mesh(&self) -> Result<Mesh> {
        build_rect_mesh(self.mesh.nx, self.mesh.ny, self.mesh.lx, self.mesh.ly)
    }

    pub fn build_prior(&self, mesh: &Mesh) -> Result<BiLaplacianPrior> {
        BiLaplacianPrior::from_coefficients(mesh, &self.prior.coefficients())
    }

    pub fn build_problem(&self, mesh: Mesh) -> Result<PoissonProblem> {
        let basis = self.shape.basis(self.mesh.lx)?;
        let source = if self.problem.source_amplitude == 0.0 {
            Source::Zero
        } else {
            Source::SinCos { amplitude: self.problem.source_amplitude }
        };
        PoissonProblem::with_uniform_target(mesh, basis, source, self.problem.tau)
    }

    pub fn penalty(&self, area: f64) -> Penalty {
        Penalty { alpha: self.ouu.as_ref().map_or(0.0, |o| o.alpha), area }
    }

    /// Latent network widths: `[r_m + d_z, hidden.., r_u]`.
    pub fn net_widths(&self, d_z: usize) -> Vec<usize> {
        let mut w = vec![self.data.r_m + d_z];
        w.extend(&self.network.hidden);
        w.push(self.data.r_u);
        w
    }
}

/// Desk-scale configuration of the Poisson experiment.
pub const EXAMPLE_CONFIG: &str = r#"seed = 0

[mesh]
nx = 32
ny = 8

[prior]
gamma = 1.0
delta = 25.0
theta_along = 2.0
theta_across = 0.5
theta_angle = 0.7853981633974483

[shape]
kind = "fourier"
n_z = 5
half_width = 0.2

[problem]
source_amplitude = 0.1
tau = 1.0

[data]
n_s = 256
n_test = 128
r_u = 40
r_m = 30

[network]
hidden = [128, 128]

[train]
epochs = 500
learning_rate = 1e-2
milestones = [200, 300, 400]
decay = 0.5
batch_size = 32
alpha_d = 1.0
seed = 8

[ouu]
risk = { kind = "mean" }
alpha = 0.001
n_saa = 2048
backend = "surrogate"

[evaluate]
n_mc = 512
cvar_beta = 0.95
entropic_beta = 1.0

[bench]
repetitions = 30
batch = 16
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_parses() {
        let c = RunConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
        assert_eq!(c.net_widths(11), vec![41, 128, 128, 40]);
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn long_schedule_and_cvar_parse() {
        let s = EXAMPLE_CONFIG
            .replace("epochs = 500", "epochs = 2000")
            .replace("learning_rate = 1e-2", "learning_rate = 5e-4")
            .replace("milestones = [200, 300, 400]", "milestones = [800, 1200, 1800]")
            .replace("hidden = [128, 128]", "hidden = [512, 512, 512, 512]")
            .replace("risk = { kind = \"mean\" }", "risk = { kind = \"cvar\", beta = 0.95 }");
        let c = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(c.train.milestones, vec![800, 1200, 1800]);
        assert_eq!(c.train.learning_rate, 5e-4);
        assert!(matches!(c.ouu.unwrap().risk, RiskMeasure::Cvar { beta, epsilon: None } if beta == 0.95));
    }

    #[test]
    fn rejects_bad_ranks_and_unknown_keys() {
        assert!(RunConfig::from_toml_str(&EXAMPLE_CONFIG.replace("r_u = 40", "r_u = 400")).is_err());
        assert!(RunConfig::from_toml_str(&EXAMPLE_CONFIG.replace("nx = 32", "nx = 32\nbogus = 1")).is_err());
    }
}
