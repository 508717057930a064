//! Kernel initializers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// The four initializer choices: {kaiming, xavier} x {gaussian, uniform}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    KaimingGaussian,
    KaimingUniform,
    XavierGaussian,
    XavierUniform,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        InitScheme::KaimingGaussian,
        InitScheme::KaimingUniform,
        InitScheme::XavierGaussian,
        InitScheme::XavierUniform,
    ];
}

/// Draw a (c_out, c_in, k, k) kernel.
///
/// kaiming: std = sqrt(2/fan_in), uniform bound = sqrt(6/fan_in);
/// xavier: std = sqrt(2/(fan_in+fan_out)), bound = sqrt(6/(fan_in+fan_out)).
pub fn init_kernel(
    c_out: usize,
    c_in: usize,
    k: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let fan_in = c_in * k * k;
    let fan_out = c_out * k * k;
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::ZeroFan);
    }
    let n = c_out * c_in * k * k;
    let out = match scheme {
        InitScheme::KaimingGaussian => {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| (rng.gaussian() * std) as f32).collect()
        }
        InitScheme::KaimingUniform => {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
        }
        InitScheme::XavierGaussian => {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| (rng.gaussian() * std) as f32).collect()
        }
        InitScheme::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
        }
    };
    Ok(out)
}
