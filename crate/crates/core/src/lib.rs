//! Reduced-basis neural operators for shape optimization under uncertainty,
//! on a reference-domain Poisson model problem.

pub mod config;
pub mod error;
pub mod fem;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod mat2;
pub mod mesh;
pub mod network;
pub mod optimize;
pub mod pipeline;
pub mod prior;
pub mod rbno;
pub mod reduce;
pub mod risk;
pub mod shape;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use io::Array;
pub use forward::{PoissonProblem, QoiEval, SolveCounts, StateSolution};
pub use linalg::{Factorization, SparseOperator};
pub use mesh::{build_rect_mesh, BoundaryTag, Mesh, MeshSpec, Point};
pub use network::{LatentNet, ReducedRecord};
pub use optimize::{minimize_box, optimize, Backend, LbfgsOptions, OptResult, OptStatus, RiskObjective};
pub use prior::{build_prior, BiLaplacianPrior, GaussianGeometry, PriorCoefficients};
pub use rbno::{Rbno, TestErrors, TestRecord};
pub use reduce::{compute_active_subspace, compute_pod, AsBasis, PodBasis};
pub use risk::{Penalty, RiskMeasure};
pub use shape::{check_diffeomorphism, DisplacementBasis, ShapeParams, Source};
pub use train::{train, TrainConfig, TrainingDataset};
pub use pipeline::{Context, RunManifest, SampleSet};
