//! Shared fixtures for the criterion benchmarks.

use sdk_core::config::{RunConfig, EXAMPLE_CONFIG};
use sdk_core::pipeline::{sample_admissible_design, untrained_rbno, Context};
use sdk_core::prior::stream_rng;
use sdk_core::{Rbno, Result};

pub struct Fixture {
    pub ctx: Context,
    pub rbno: Rbno,
    pub m: Vec<f64>,
    pub z: Vec<f64>,
}

/// The example configuration with a random surrogate and one admissible input.
pub fn fixture() -> Result<Fixture> {
    let ctx = Context::new(RunConfig::from_toml_str(EXAMPLE_CONFIG)?)?;
    let rbno = untrained_rbno(&ctx)?;
    let mut rng = stream_rng(0, 0);
    let (z, _) = sample_admissible_design(&ctx, &mut rng)?;
    let m = ctx.prior.sample(&mut rng);
    Ok(Fixture { ctx, rbno, m, z })
}
