//! Workflow stages: sample generation, basis construction with the Jacobian
//! pass, surrogate training, design optimization, evaluation and timing.
//!
//! Each stage has an in-memory form and an on-disk form that reads and writes
//! SDK1 arrays under an output directory tracked by `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{seed_offset, BackendKind, RunConfig};
use crate::error::{Error, Result};
use crate::forward::PoissonProblem;
use crate::io::{array_to_csv, read_array, write_array, Array};
use crate::network::{LatentNet, ReducedRecord};
use crate::optimize::{optimize, Backend, OptResult, RiskObjective};
use crate::prior::{stream_rng, BiLaplacianPrior};
use crate::rbno::{Rbno, TestRecord};
use crate::reduce::{compute_active_subspace, compute_pod, AsBasis, PodBasis};
use crate::risk::{empirical_cvar, risk_saa, RiskMeasure};
use crate::shape::{check_diffeomorphism, ADMISSIBLE_DET_F};
use crate::train::{init_net, train, TrainConfig, TrainOutcome, TrainingDataset};

/// Problem, prior and configuration shared by all stages.
pub struct Context {
    pub config: RunConfig,
    pub problem: PoissonProblem,
    pub prior: BiLaplacianPrior,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mesh = config.build_mesh()?;
        let prior = config.build_prior(&mesh)?;
        let problem = config.build_problem(mesh)?;
        Ok(Context { config, problem, prior })
    }

    pub fn shape_dim(&self) -> usize {
        self.problem.shape_dim()
    }

    pub fn half_width(&self) -> f64 {
        self.config.shape.half_width()
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let h = self.half_width();
        (vec![-h; self.shape_dim()], vec![h; self.shape_dim()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub m: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Inadmissible shape draws discarded while sampling.
    pub rejected: usize,
}

/// Uniform draw from `[-h, h]^d` repeated until the deformation is admissible.
pub fn sample_admissible_design(ctx: &Context, rng: &mut impl Rng) -> Result<(Vec<f64>, usize)> {
    let h = ctx.half_width();
    let p = &ctx.problem;
    for rejected in 0..10_000 {
        let z: Vec<f64> = (0..ctx.shape_dim()).map(|_| rng.random_range(-h..=h)).collect();
        if check_diffeomorphism(p.mesh(), p.basis(), &z)? > ADMISSIBLE_DET_F {
            return Ok((z, rejected));
        }
    }
    Err(Error::InadmissibleDesign("no admissible design found in 10000 draws".into()))
}

/// Parameter draw for sample `i` of a stage: its own stream under `seed`.
pub fn sample_parameters(ctx: &Context, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n).into_par_iter().map(|i| ctx.prior.sample(&mut stream_rng(seed, i as u64))).collect()
}

/// Draws `n` (m, z) pairs and solves their states.
pub fn generate_samples(ctx: &Context, n: usize, seed: u64) -> Result<SampleSet> {
    let out: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let (z, rejected) = sample_admissible_design(ctx, &mut rng)?;
            let m = ctx.prior.sample(&mut rng);
            let u = ctx.problem.solve_state(&m, &z).map_err(|e| tag_sample(e, i))?.into_u();
            Ok((m, z, u, rejected))
        })
        .collect();
    let mut set = SampleSet { m: Vec::with_capacity(n), z: Vec::with_capacity(n), u: Vec::with_capacity(n), rejected: 0 };
    for r in out {
        let (m, z, u, rej) = r?;
        set.m.push(m);
        set.z.push(z);
        set.u.push(u);
        set.rejected += rej;
    }
    Ok(set)
}

fn tag_sample(e: Error, i: usize) -> Error {
    match e {
        Error::SolverFailure { reason, condition } => Error::SolverFailure { reason: format!("sample {i}: {reason}"), condition },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct ReducedData {
    pub pod: PodBasis,
    pub as_basis: AsBasis,
    pub train: Vec<ReducedRecord>,
    pub test: Vec<ReducedRecord>,
}

/// Per-sample `(Phi^T M D_m u, Phi^T M D_z u)` with one factorization each.
pub fn jacobian_pass(ctx: &Context, set: &SampleSet, phi: &DMatrix<f64>) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    (0..set.m.len())
        .into_par_iter()
        .map(|i| {
            let s = ctx.problem.solve_state(&set.m[i], &set.z[i]).map_err(|e| tag_sample(e, i))?;
            s.jacobian_rows(phi).map_err(|e| tag_sample(e, i))
        })
        .collect()
}

fn project_records(set: &SampleSet, rows: &[(DMatrix<f64>, DMatrix<f64>)], pod: &PodBasis, as_basis: &AsBasis) -> Vec<ReducedRecord> {
    (0..set.m.len())
        .map(|i| ReducedRecord {
            m_r: as_basis.encode(&set.m[i]),
            z: set.z[i].clone(),
            u_r: pod.encode(&set.u[i]),
            j_mr: &rows[i].0 * &as_basis.psi,
            j_zr: rows[i].1.clone(),
        })
        .collect()
}

/// POD from the first `n_pod` training states, the Jacobian pass over all
/// samples, the active subspace from the first `n_as` of them, and projection.
pub fn reduce(ctx: &Context, train_set: &SampleSet, test_set: &SampleSet) -> Result<ReducedData> {
    let d = &ctx.config.data;
    let n_pod = d.n_pod.unwrap_or(train_set.u.len()).min(train_set.u.len());
    let n_as = d.n_as.unwrap_or(train_set.u.len()).min(train_set.u.len());
    let pod = compute_pod(&train_set.u[..n_pod], ctx.problem.mass(), d.r_u)?;
    let train_rows = jacobian_pass(ctx, train_set, &pod.phi)?;
    let test_rows = jacobian_pass(ctx, test_set, &pod.phi)?;
    let b: Vec<DMatrix<f64>> = train_rows[..n_as].iter().map(|r| r.0.clone()).collect();
    let as_basis = compute_active_subspace(&b, &ctx.prior, vec![0.0; ctx.problem.dim()], d.r_m)?;
    Ok(ReducedData {
        train: project_records(train_set, &train_rows, &pod, &as_basis),
        test: project_records(test_set, &test_rows, &pod, &as_basis),
        pod,
        as_basis,
    })
}

pub fn test_records(set: &SampleSet, reduced: &[ReducedRecord]) -> Vec<TestRecord> {
    reduced
        .iter()
        .enumerate()
        .map(|(i, r)| TestRecord { m: set.m[i].clone(), z: set.z[i].clone(), u: set.u[i].clone(), j_mr: r.j_mr.clone(), j_zr: r.j_zr.clone() })
        .collect()
}

/// Trains one surrogate with the configured schedule, overriding `alpha_d` and the seed.
pub fn train_surrogate(ctx: &Context, data: &ReducedData, alpha_d: f64, seed: u64) -> Result<(Rbno, TrainOutcome)> {
    let config = TrainConfig { alpha_d, seed, ..ctx.config.train.clone() };
    // the network sees shape coordinates rescaled to the unit box
    let z_scale = ctx.half_width().recip();
    let records = data
        .train
        .iter()
        .map(|r| ReducedRecord { z: r.z.iter().map(|v| v * z_scale).collect(), j_zr: &r.j_zr / z_scale, ..r.clone() })
        .collect();
    let dataset = TrainingDataset::split(records, config.validation_fraction, seed)?;
    let net = init_net(&ctx.config.net_widths(ctx.shape_dim()), seed)?;
    let outcome = train(&net, &dataset, &config)?;
    let rbno = Rbno::new(data.pod.clone(), data.as_basis.clone(), outcome.net.clone())?.with_z_scale(z_scale)?;
    Ok((rbno, outcome))
}

/// Statistics of the QoI at a fixed design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiStatistics {
    pub n: usize,
    pub seed: u64,
    pub mean: f64,
    pub variance: f64,
    pub cvar_beta: f64,
    pub cvar: f64,
    pub entropic_beta: f64,
    pub entropic: f64,
    pub objective_with_penalty: f64,
}

pub struct Evaluation {
    pub stats: QoiStatistics,
    pub qoi: Vec<f64>,
    /// Bottom-node flux per realization.
    pub flux: Vec<Vec<f64>>,
}

/// Fresh Monte Carlo of the true QoI at design `z`.
pub fn evaluate_design(ctx: &Context, z: &[f64], n: usize, seed: u64, cvar_beta: f64, entropic_beta: f64) -> Result<Evaluation> {
    let ms = sample_parameters(ctx, n, seed);
    evaluate_with_samples(ctx, z, &ms, seed, cvar_beta, entropic_beta)
}

/// QoI statistics over the given parameter fields; `seed` is only recorded.
pub fn evaluate_with_samples(ctx: &Context, z: &[f64], ms: &[Vec<f64>], seed: u64, cvar_beta: f64, entropic_beta: f64) -> Result<Evaluation> {
    let p = &ctx.problem;
    let n = ms.len();
    if n == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    if check_diffeomorphism(p.mesh(), p.basis(), z)? <= ADMISSIBLE_DET_F {
        return Err(Error::InadmissibleDesign("design violates the admissibility threshold".into()));
    }
    let out: Vec<Result<(f64, Vec<f64>)>> = ms
        .par_iter()
        .map(|m| {
            let s = p.solve_state(m, z)?;
            Ok((s.qoi()?.value, p.bottom_flux_profile(s.u(), m, z)?))
        })
        .collect();
    let mut qoi = Vec::with_capacity(n);
    let mut flux = Vec::with_capacity(n);
    for r in out {
        let (q, f) = r?;
        qoi.push(q);
        flux.push(f);
    }
    let mean = qoi.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 { qoi.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let entropic = risk_saa(&qoi, &RiskMeasure::Entropic { beta: entropic_beta }, None)?.value;
    let penalty = ctx.config.penalty(p.mesh().area()).eval(z).0;
    Ok(Evaluation {
        stats: QoiStatistics {
            n,
            seed,
            mean,
            variance,
            cvar_beta,
            cvar: empirical_cvar(&qoi, cvar_beta),
            entropic_beta,
            entropic,
            objective_with_penalty: mean + penalty,
        },
        qoi,
        flux,
    })
}

/// Runs the configured design optimization from `z = 0`.
pub fn optimize_design(ctx: &Context, rbno: Option<&Rbno>) -> Result<OptResult> {
    let o = ctx.config.ouu.as_ref().ok_or_else(|| Error::invalid("configuration has no [ouu] section"))?;
    let samples = sample_parameters(ctx, o.n_saa, ctx.config.stage_seed(seed_offset::SAA));
    let backend = match o.backend {
        BackendKind::Pde => Backend::Pde(&ctx.problem),
        BackendKind::Surrogate => Backend::Surrogate {
            rbno: rbno.ok_or_else(|| Error::invalid("surrogate backend needs a trained model"))?,
            problem: &ctx.problem,
        },
    };
    let mut obj = RiskObjective::new(backend, o.risk, ctx.config.penalty(ctx.problem.mesh().area()), samples)?;
    let (lo, hi) = ctx.bounds();
    optimize(&mut obj, &vec![0.0; ctx.shape_dim()], &lo, &hi, &o.lbfgs())
}

/// Median seconds per sample for the four timed operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub repetitions: usize,
    pub state_solve: f64,
    pub adjoint_solve: f64,
    pub surrogate_forward: f64,
    pub surrogate_jacobian: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times state and adjoint solves against surrogate evaluation, per sample,
/// one at a time and in batches.
pub fn bench_timings(ctx: &Context, rbno: &Rbno, repetitions: usize, batch: usize) -> Result<Vec<BenchRow>> {
    let seed = ctx.config.stage_seed(seed_offset::BENCH);
    let mut rng = stream_rng(seed, 0);
    let mut inputs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (z, _) = sample_admissible_design(ctx, &mut rng)?;
        inputs.push((ctx.prior.sample(&mut rng), z));
    }
    let mut rows = Vec::new();
    for (mode, count) in [("single", 1usize), ("batched", batch)] {
        let mut times = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..repetitions {
            let work = &inputs[..count];
            let t = Instant::now();
            let states: Vec<_> = work.iter().map(|(m, z)| ctx.problem.solve_state(m, z)).collect::<Result<_>>()?;
            times[0].push(t.elapsed().as_secs_f64() / count as f64);
            let t = Instant::now();
            for s in &states {
                s.solve_adjoint(s.load())?;
            }
            times[1].push(t.elapsed().as_secs_f64() / count as f64);
            let encoded: Vec<Vec<f64>> = work.iter().map(|(m, _)| rbno.as_basis.encode(m)).collect();
            let t = Instant::now();
            if count == 1 {
                rbno.predict(&work[0].0, &work[0].1, false)?;
            } else {
                let x = DMatrix::from_fn(rbno.net.input_dim(), count, |r, c| {
                    let mr = &encoded[c];
                    if r < mr.len() {
                        mr[r]
                    } else {
                        work[c].1[r - mr.len()] * rbno.z_scale
                    }
                });
                let y = rbno.net.forward_batch(&x);
                let _u = &rbno.pod.phi * y;
            }
            times[2].push(t.elapsed().as_secs_f64() / count as f64);
            let t = Instant::now();
            for (m, z) in work {
                rbno.predict(m, z, true)?;
            }
            times[3].push(t.elapsed().as_secs_f64() / count as f64);
        }
        let [a, b, c, d] = times;
        rows.push(BenchRow {
            mode: mode.to_string(),
            repetitions,
            state_solve: median(a),
            adjoint_solve: median(b),
            surrogate_forward: median(c),
            surrogate_jacobian: median(d),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// On-disk stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config: RunConfig,
    pub files: BTreeMap<String, FileEntry>,
    /// Per-stage counters and summary values.
    pub stages: BTreeMap<String, BTreeMap<String, serde_json::Value>>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        RunManifest { format: "SDK1".into(), config, files: BTreeMap::new(), stages: BTreeMap::new() }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?)
    }

    /// Loads the manifest if present, else starts a fresh one.
    pub fn open(dir: &Path, config: &RunConfig) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            let mut m = Self::load(dir)?;
            m.config = config.clone();
            Ok(m)
        } else {
            Ok(Self::new(config.clone()))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_bytes(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(dir.join(name), bytes)?;
        self.files.insert(name.to_string(), FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write_array(&mut self, dir: &Path, name: &str, a: &Array) -> Result<()> {
        self.write_bytes(dir, name, &a.to_bytes())
    }

    /// Reads a tracked file after checking its digest.
    pub fn read_verified(&self, dir: &Path, name: &str) -> Result<Vec<u8>> {
        let entry = self.files.get(name).ok_or_else(|| Error::Format(format!("{name} is not listed in the manifest")))?;
        let bytes = std::fs::read(dir.join(name))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{name} does not match its manifest digest")));
        }
        Ok(bytes)
    }

    pub fn read_array(&self, dir: &Path, name: &str) -> Result<Array> {
        Array::from_bytes(&self.read_verified(dir, name)?)
    }

    /// Checks every tracked file; returns the names that fail.
    pub fn verify_all(&self, dir: &Path) -> Vec<String> {
        self.files.keys().filter(|name| self.read_verified(dir, name).is_err()).cloned().collect()
    }

    pub fn record(&mut self, stage: &str, key: &str, value: impl Serialize) -> Result<()> {
        self.stages.entry(stage.to_string()).or_default().insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }
}

fn write_set(man: &mut RunManifest, dir: &Path, prefix: &str, set: &SampleSet) -> Result<()> {
    man.write_array(dir, &format!("{prefix}m.sdk"), &Array::from_rows(&set.m)?)?;
    man.write_array(dir, &format!("{prefix}z.sdk"), &Array::from_rows(&set.z)?)?;
    man.write_array(dir, &format!("{prefix}u.sdk"), &Array::from_rows(&set.u)?)
}

fn read_set(man: &RunManifest, dir: &Path, prefix: &str) -> Result<SampleSet> {
    Ok(SampleSet {
        m: man.read_array(dir, &format!("{prefix}m.sdk"))?.rows()?,
        z: man.read_array(dir, &format!("{prefix}z.sdk"))?.rows()?,
        u: man.read_array(dir, &format!("{prefix}u.sdk"))?.rows()?,
        rejected: 0,
    })
}

pub fn cmd_generate(config: &RunConfig, dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let ctx = Context::new(config.clone())?;
    let mut man = RunManifest::new(config.clone());
    ctx.problem.counters().reset();
    let train_set = generate_samples(&ctx, config.data.n_s, config.stage_seed(seed_offset::GENERATE))?;
    let test_set = generate_samples(&ctx, config.data.n_test, config.stage_seed(seed_offset::TEST))?;
    write_set(&mut man, dir, "", &train_set)?;
    write_set(&mut man, dir, "test_", &test_set)?;
    let counts = ctx.problem.counters().snapshot();
    let draws = train_set.rejected + test_set.rejected + config.data.n_s + config.data.n_test;
    man.record("generate", "state_solves", counts.state_solves)?;
    man.record("generate", "rejected_designs", train_set.rejected + test_set.rejected)?;
    man.record("generate", "rejection_rate", (train_set.rejected + test_set.rejected) as f64 / draws as f64)?;
    man.save(dir)?;
    Ok(man)
}

fn write_records(man: &mut RunManifest, dir: &Path, prefix: &str, recs: &[ReducedRecord]) -> Result<()> {
    let rows = |f: &dyn Fn(&ReducedRecord) -> Vec<f64>| Array::from_rows(&recs.iter().map(f).collect::<Vec<_>>());
    man.write_array(dir, &format!("{prefix}m_r.sdk"), &rows(&|r| r.m_r.clone())?)?;
    man.write_array(dir, &format!("{prefix}u_r.sdk"), &rows(&|r| r.u_r.clone())?)?;
    man.write_array(dir, &format!("{prefix}j_mr.sdk"), &Array::from_matrices(&recs.iter().map(|r| r.j_mr.clone()).collect::<Vec<_>>())?)?;
    man.write_array(dir, &format!("{prefix}j_zr.sdk"), &Array::from_matrices(&recs.iter().map(|r| r.j_zr.clone()).collect::<Vec<_>>())?)
}

fn read_records(man: &RunManifest, dir: &Path, prefix: &str, z: &[Vec<f64>]) -> Result<Vec<ReducedRecord>> {
    let m_r = man.read_array(dir, &format!("{prefix}m_r.sdk"))?.rows()?;
    let u_r = man.read_array(dir, &format!("{prefix}u_r.sdk"))?.rows()?;
    let j_mr = man.read_array(dir, &format!("{prefix}j_mr.sdk"))?.to_matrices()?;
    let j_zr = man.read_array(dir, &format!("{prefix}j_zr.sdk"))?.to_matrices()?;
    if [u_r.len(), j_mr.len(), j_zr.len(), z.len()].iter().any(|&n| n != m_r.len()) {
        return Err(Error::Format("reduced record arrays disagree in length".into()));
    }
    Ok((0..m_r.len())
        .map(|i| ReducedRecord { m_r: m_r[i].clone(), z: z[i].clone(), u_r: u_r[i].clone(), j_mr: j_mr[i].clone(), j_zr: j_zr[i].clone() })
        .collect())
}

fn eigen_csv(pod: &[f64], as_: &[f64]) -> String {
    let mut s = String::from("index,pod,active_subspace\n");
    for i in 0..pod.len().max(as_.len()) {
        let f = |v: &[f64]| v.get(i).map_or(String::new(), |x| format!("{x:e}"));
        let _ = writeln!(s, "{i},{},{}", f(pod), f(as_));
    }
    s
}

pub fn cmd_reduce(config: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let ctx = Context::new(config.clone())?;
    let mut man = RunManifest::open(dir, config)?;
    let train_set = read_set(&man, dir, "")?;
    let test_set = read_set(&man, dir, "test_")?;
    ctx.problem.counters().reset();
    let data = reduce(&ctx, &train_set, &test_set)?;
    let counts = ctx.problem.counters().snapshot();
    man.write_array(dir, "pod_mean.sdk", &Array::vector(data.pod.mean.clone()))?;
    man.write_array(dir, "pod_phi.sdk", &Array::from_matrix(&data.pod.phi))?;
    man.write_array(dir, "pod_eigenvalues.sdk", &Array::vector(data.pod.eigenvalues.clone()))?;
    man.write_array(dir, "as_mean.sdk", &Array::vector(data.as_basis.mean.clone()))?;
    man.write_array(dir, "as_psi.sdk", &Array::from_matrix(&data.as_basis.psi))?;
    man.write_array(dir, "as_eigenvalues.sdk", &Array::vector(data.as_basis.eigenvalues.clone()))?;
    man.write_bytes(dir, "eigenvalues.csv", eigen_csv(&data.pod.eigenvalues, &data.as_basis.eigenvalues).as_bytes())?;
    write_records(&mut man, dir, "", &data.train)?;
    write_records(&mut man, dir, "test_", &data.test)?;
    man.record("reduce", "r_u", data.pod.rank())?;
    man.record("reduce", "r_m", data.as_basis.rank())?;
    man.record("reduce", "factorizations", counts.factorizations)?;
    man.record("reduce", "adjoint_solves", counts.adjoint_solves)?;
    let total: f64 = data.pod.eigenvalues.iter().sum();
    let kept: f64 = data.pod.eigenvalues.iter().take(data.pod.rank()).sum();
    man.record("reduce", "pod_captured_variance", if total > 0.0 { kept / total } else { 1.0 })?;
    man.save(dir)?;
    Ok(man)
}

fn load_reduced(ctx: &Context, man: &RunManifest, dir: &Path) -> Result<(ReducedData, SampleSet)> {
    let pod = PodBasis::from_parts(
        man.read_array(dir, "pod_mean.sdk")?.data,
        man.read_array(dir, "pod_phi.sdk")?.to_matrix()?,
        man.read_array(dir, "pod_eigenvalues.sdk")?.data,
        ctx.problem.mass(),
    )?;
    let as_basis = AsBasis::from_parts(
        man.read_array(dir, "as_mean.sdk")?.data,
        man.read_array(dir, "as_psi.sdk")?.to_matrix()?,
        man.read_array(dir, "as_eigenvalues.sdk")?.data,
        &ctx.prior,
    )?;
    let train_z = man.read_array(dir, "z.sdk")?.rows()?;
    let test_set = read_set(man, dir, "test_")?;
    let train = read_records(man, dir, "", &train_z)?;
    let test = read_records(man, dir, "test_", &test_set.z)?;
    Ok((ReducedData { pod, as_basis, train, test }, test_set))
}

/// Checkpoint descriptor stored next to the flat parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub widths: Vec<usize>,
    pub r_u: usize,
    pub r_m: usize,
    pub d_z: usize,
    pub z_scale: f64,
    pub seed: u64,
    pub alpha_d: f64,
    pub best_epoch: usize,
    pub config_sha256: String,
    pub params_file: String,
}

pub fn model_tag(alpha_d: f64, seed: u64) -> String {
    format!("{}_s{seed}", if alpha_d != 0.0 { "dino" } else { "no" })
}

fn history_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,lr,train_loss,validation_loss,state_term,jac_m_term,jac_z_term\n");
    for h in &outcome.history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            h.epoch, h.learning_rate, h.train_loss, h.validation_loss, h.state_term, h.jac_m_term, h.jac_z_term
        );
    }
    s
}

/// Trains `replicates` models with seeds `train.seed + k`.
pub fn cmd_train(config: &RunConfig, dir: &Path, replicates: usize) -> Result<RunManifest> {
    let ctx = Context::new(config.clone())?;
    let mut man = RunManifest::open(dir, config)?;
    let (data, test_set) = load_reduced(&ctx, &man, dir)?;
    let tests = test_records(&test_set, &data.test);
    let config_sha = sha256_hex(config.to_toml_string()?.as_bytes());
    for k in 0..replicates.max(1) {
        let seed = config.train.seed + k as u64;
        let (rbno, outcome) = train_surrogate(&ctx, &data, config.train.alpha_d, seed)?;
        if outcome.floored_denominators > 0 {
            eprintln!("warning: {} loss denominators were floored at 1e-12", outcome.floored_denominators);
        }
        let tag = model_tag(config.train.alpha_d, seed);
        let params_file = format!("net_{tag}.sdk");
        man.write_array(dir, &params_file, &Array::vector(rbno.net.params()))?;
        let info = CheckpointInfo {
            widths: rbno.net.widths().to_vec(),
            r_u: data.pod.rank(),
            r_m: data.as_basis.rank(),
            d_z: ctx.shape_dim(),
            z_scale: rbno.z_scale,
            seed,
            alpha_d: config.train.alpha_d,
            best_epoch: outcome.best_epoch,
            config_sha256: config_sha.clone(),
            params_file,
        };
        man.write_bytes(dir, &format!("net_{tag}.json"), (serde_json::to_string_pretty(&info)? + "\n").as_bytes())?;
        man.write_bytes(dir, &format!("history_{tag}.csv"), history_csv(&outcome).as_bytes())?;
        if !tests.is_empty() {
            let errors = rbno.test_errors(&tests, ctx.problem.mass())?;
            man.record("train", &format!("test_errors_{tag}"), errors)?;
        }
        man.record("train", &format!("final_train_loss_{tag}"), outcome.history.last().map(|h| h.train_loss))?;
    }
    man.save(dir)?;
    Ok(man)
}

/// Loads the checkpoint trained with the configured `alpha_d` and seed.
pub fn load_rbno(ctx: &Context, man: &RunManifest, dir: &Path) -> Result<Rbno> {
    let (data, _) = load_reduced(ctx, man, dir)?;
    let tag = model_tag(ctx.config.train.alpha_d, ctx.config.train.seed);
    let info: CheckpointInfo = serde_json::from_slice(&man.read_verified(dir, &format!("net_{tag}.json"))?)?;
    let mut net = LatentNet::zeros(&info.widths)?;
    net.set_params(&man.read_array(dir, &info.params_file)?.data)?;
    Rbno::new(data.pod, data.as_basis, net)?.with_z_scale(info.z_scale)
}

fn trace_csv(r: &OptResult) -> (String, String) {
    let mut trace = String::from("iteration,objective,proj_grad_norm,step,active_bounds\n");
    let mut timing = String::from("iteration,wall_time\n");
    for t in &r.trace {
        let _ = writeln!(trace, "{},{:e},{:e},{:e},{}", t.iteration, t.value, t.proj_grad_norm, t.step, t.active_bounds);
        let _ = writeln!(timing, "{},{:e}", t.iteration, t.wall_time);
    }
    (trace, timing)
}

pub fn cmd_optimize(config: &RunConfig, dir: &Path) -> Result<(RunManifest, OptResult)> {
    std::fs::create_dir_all(dir)?;
    let ctx = Context::new(config.clone())?;
    let mut man = RunManifest::open(dir, config)?;
    let o = config.ouu.as_ref().ok_or_else(|| Error::invalid("configuration has no [ouu] section"))?;
    let rbno = match o.backend {
        BackendKind::Surrogate => Some(load_rbno(&ctx, &man, dir)?),
        BackendKind::Pde => None,
    };
    ctx.problem.counters().reset();
    let start = Instant::now();
    let result = optimize_design(&ctx, rbno.as_ref())?;
    let wall = start.elapsed().as_secs_f64();
    let counts = ctx.problem.counters().snapshot();
    let (trace, timing) = trace_csv(&result);
    man.write_bytes(dir, "opt_result.json", (serde_json::to_string_pretty(&result_summary(&result, ctx.shape_dim()))? + "\n").as_bytes())?;
    man.write_bytes(dir, "opt_trace.csv", trace.as_bytes())?;
    // wall-clock data is kept apart so the other artifacts stay reproducible
    std::fs::write(dir.join("opt_timing.csv"), timing + &format!("total,{wall:e}\n"))?;
    man.record("optimize", "pde_state_solves", counts.state_solves)?;
    man.record("optimize", "pde_adjoint_solves", counts.adjoint_solves)?;
    man.record("optimize", "objective_evaluations", result.evaluations)?;
    man.save(dir)?;
    Ok((man, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptSummary {
    pub z: Vec<f64>,
    pub t: Option<f64>,
    pub value: f64,
    pub proj_grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: crate::optimize::OptStatus,
}

fn result_summary(r: &OptResult, d_z: usize) -> OptSummary {
    OptSummary {
        z: r.x[..d_z].to_vec(),
        t: r.x.get(d_z).copied(),
        value: r.value,
        proj_grad_norm: r.proj_grad_norm,
        iterations: r.iterations,
        evaluations: r.evaluations,
        status: r.status,
    }
}

/// Evaluates `z`, or the optimized design recorded in `dir` when `z` is `None`.
pub fn cmd_evaluate(config: &RunConfig, dir: &Path, z: Option<Vec<f64>>) -> Result<QoiStatistics> {
    std::fs::create_dir_all(dir)?;
    let ctx = Context::new(config.clone())?;
    let mut man = RunManifest::open(dir, config)?;
    let e = config.evaluate.as_ref().ok_or_else(|| Error::invalid("configuration has no [evaluate] section"))?;
    let z = match z {
        Some(z) => z,
        None => {
            let s: OptSummary = serde_json::from_slice(&man.read_verified(dir, "opt_result.json")?)?;
            s.z
        }
    };
    if z.len() != ctx.shape_dim() {
        return Err(Error::invalid("design vector does not match the shape basis"));
    }
    let ev = evaluate_design(&ctx, &z, e.n_mc, config.stage_seed(seed_offset::EVALUATE), e.cvar_beta, e.entropic_beta)?;
    let bottom = ctx.problem.bottom_dofs();
    let mut csv = String::from("sample");
    for &v in bottom {
        let _ = write!(csv, ",x={}", ctx.problem.mesh().vertices()[v][0]);
    }
    csv.push('\n');
    for (i, row) in ev.flux.iter().enumerate() {
        let _ = write!(csv, "{i}");
        for f in row {
            let _ = write!(csv, ",{f:e}");
        }
        csv.push('\n');
    }
    man.write_bytes(dir, "evaluate_stats.json", (serde_json::to_string_pretty(&ev.stats)? + "\n").as_bytes())?;
    man.write_bytes(dir, "flux_profile.csv", csv.as_bytes())?;
    man.save(dir)?;
    Ok(ev.stats)
}

pub fn cmd_bench(config: &RunConfig, dir: &Path) -> Result<Vec<BenchRow>> {
    std::fs::create_dir_all(dir)?;
    let ctx = Context::new(config.clone())?;
    let man = RunManifest::open(dir, config)?;
    let rbno = if man.files.contains_key(&format!("net_{}.json", model_tag(config.train.alpha_d, config.train.seed))) {
        load_rbno(&ctx, &man, dir)?
    } else {
        untrained_rbno(&ctx)?
    };
    let rows = bench_timings(&ctx, &rbno, config.bench.repetitions, config.bench.batch)?;
    let mut csv = String::from("mode,repetitions,state_solve,adjoint_solve,surrogate_forward,surrogate_jacobian\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:e},{:e},{:e},{:e}",
            r.mode, r.repetitions, r.state_solve, r.adjoint_solve, r.surrogate_forward, r.surrogate_jacobian
        );
    }
    std::fs::write(dir.join("bench_timing.csv"), csv)?;
    Ok(rows)
}

/// Surrogate with random weights and placeholder bases, for timing only.
pub fn untrained_rbno(ctx: &Context) -> Result<Rbno> {
    let n = ctx.problem.dim();
    let d = &ctx.config.data;
    let mut rng = stream_rng(ctx.config.stage_seed(seed_offset::BENCH), 1);
    let phi = DMatrix::from_fn(n, d.r_u, |_, _| rng.random_range(-1.0..1.0));
    let psi = DMatrix::from_fn(n, d.r_m, |_, _| rng.random_range(-1.0..1.0));
    let pod = PodBasis::from_parts(vec![0.0; n], phi, vec![0.0; d.r_u], ctx.problem.mass())?;
    let as_basis = AsBasis::from_parts(vec![0.0; n], psi, vec![0.0; d.r_m], &ctx.prior)?;
    let net = LatentNet::random(&ctx.config.net_widths(ctx.shape_dim()), &mut rng)?;
    Rbno::new(pod, as_basis, net)?.with_z_scale(ctx.half_width().recip())
}

/// Writes a tracked SDK1 array as CSV next to it and returns the path.
pub fn cmd_export(dir: &Path, name: &str) -> Result<PathBuf> {
    let man = RunManifest::load(dir)?;
    let a = man.read_array(dir, name)?;
    let out = dir.join(format!("{}.csv", name.trim_end_matches(".sdk")));
    std::fs::write(&out, array_to_csv(&a)?)?;
    Ok(out)
}

/// Reads an SDK1 file directly, without the manifest.
pub fn read_untracked(path: &Path) -> Result<Array> {
    read_array(path)
}

/// Writes an SDK1 file directly, without the manifest.
pub fn write_untracked(path: &Path, a: &Array) -> Result<()> {
    write_array(path, a)
}
