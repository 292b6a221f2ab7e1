//! Named parameter traversal shared by the optimizer, checkpointing, and
//! checksum utilities.
//!
//! Every trainable component exposes its arrays through `ParamVisit` in a
//! stable order with stable names. The same names key optimizer moments and
//! checkpoint entries, so order changes are format changes.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use sha2::{Digest, Sha256};

use crate::rng::Rng;
use rand::Rng as _;

pub trait ParamVisit {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, v| total += v.len());
        total
    }
}

/// SHA-256 over parameter names and raw little-endian f64 bytes, in visit
/// order. Two models agree on this exactly when every array is bit-identical.
pub fn params_checksum(params: &dyn ParamVisit) -> String {
    let mut hasher = Sha256::new();
    params.visit(&mut |name, v| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for x in v.iter() {
            hasher.update(x.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Collect all parameters into one flat vector (visit order).
pub fn flatten_params(params: &dyn ParamVisit) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit(&mut |_, v| out.extend(v.iter().copied()));
    out
}

/// Overwrite all parameters from one flat vector (visit order).
pub fn unflatten_params(params: &mut dyn ParamVisit, flat: &[f64]) {
    let mut offset = 0;
    params.visit_mut(&mut |_, mut v| {
        for x in v.iter_mut() {
            *x = flat[offset];
            offset += 1;
        }
    });
    assert_eq!(offset, flat.len(), "flat parameter length");
}

pub fn xavier_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn zeros1(len: usize) -> Array1<f64> {
    Array1::zeros(len)
}

/// Small uniform init used for embeddings and codebook tokens.
pub fn small_uniform2(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn small_uniform3(
    rng: &mut Rng,
    d0: usize,
    d1: usize,
    d2: usize,
    scale: f64,
) -> Array3<f64> {
    Array3::from_shape_fn((d0, d1, d2), |_| rng.gen_range(-scale..scale))
}

pub fn small_uniform_dyn(rng: &mut Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}
