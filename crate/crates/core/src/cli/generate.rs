use crate::corpus::TokenSeq;
use crate::dist::{sample_vmf, VmfParams};
use crate::eval::sentence_rng;
use crate::model::{beam_search, BeamResult, Model};
use crate::{Error, Result};

/// Below this angle the two endpoints are treated as parallel.
pub const PARALLEL_ANGLE: f64 = 1e-6;

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Spherical linear interpolation between unit vectors.
pub fn slerp(z1: &[f64], z2: &[f64], t: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() || z1.is_empty() {
        return Err(Error::domain("slerp", format!("dimensions {} and {}", z1.len(), z2.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain("slerp", format!("t = {t} outside [0, 1]")));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    let omega = dot.clamp(-1.0, 1.0).acos();
    if std::f64::consts::PI - omega < PARALLEL_ANGLE {
        return Err(Error::domain("slerp", "antipodal endpoints have no unique great circle"));
    }
    if omega < PARALLEL_ANGLE {
        return Ok(normalized(z1.iter().zip(z2).map(|(a, b)| (1.0 - t) * a + t * b).collect()));
    }
    let s = omega.sin();
    let (a, b) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    Ok(normalized(z1.iter().zip(z2).map(|(x, y)| a * x + b * y).collect()))
}

/// The `i`-th edit vector drawn from the uniform prior under `seed`.
pub fn prior_edit_vector(seed: u64, i: usize, dim: usize) -> Result<Vec<f64>> {
    sample_vmf(&VmfParams::uniform(dim)?, &mut sentence_rng(seed, i))
}

/// Beam-decodes the editor from `prototype` with a fixed edit vector.
pub fn decode(model: &Model, prototype: &TokenSeq, z: &[f64], beam: usize, max_len: usize) -> Result<BeamResult> {
    let mut dec = model.editor.decoder(&model.params, prototype, z)?;
    beam_search(&mut dec, beam, max_len)
}

/// `count` sentences edited from `prototype` with prior draws 0, 1, ...
pub fn generate(
    model: &Model,
    prototype: &TokenSeq,
    count: usize,
    seed: u64,
    beam: usize,
    max_len: usize,
) -> Result<Vec<BeamResult>> {
    (0..count)
        .map(|i| decode(model, prototype, &prior_edit_vector(seed, i, model.config.z_dim)?, beam, max_len))
        .collect()
}

/// Decodes at the two prior draws used by [`generate`] and at `steps`
/// evenly spaced slerp midpoints between them, in order of t.
pub fn interpolate(
    model: &Model,
    prototype: &TokenSeq,
    steps: usize,
    seed: u64,
    beam: usize,
    max_len: usize,
) -> Result<Vec<BeamResult>> {
    let d = model.config.z_dim;
    let (z1, z2) = (prior_edit_vector(seed, 0, d)?, prior_edit_vector(seed, 1, d)?);
    (0..steps + 2)
        .map(|i| {
            let t = i as f64 / (steps + 1) as f64;
            decode(model, prototype, &slerp(&z1, &z2, t)?, beam, max_len)
        })
        .collect()
}
