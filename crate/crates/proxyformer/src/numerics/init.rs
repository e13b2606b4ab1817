//! Parameter initializers.
//!
//! All random draws come from a caller-owned seeded stream, and parameters
//! consume it in registration order, so a fixed seed and a fixed module
//! layout reproduce identical weights on every platform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::tensor::{ParamId, ParamSet, Tensor};

/// Uniform Xavier/Glorot draw with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape and draw count agree")
}

/// Registers a `[fan_in, fan_out]` weight for `x @ w` layers.
pub fn register_linear(
    params: &mut ParamSet,
    name: &str,
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    params.register(name, xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out))
}

/// Registers a zero weight of the given shape (used for output projections
/// and final prediction layers so a fresh model starts at its neutral
/// point).
pub fn register_zeros(params: &mut ParamSet, name: &str, shape: &[usize]) -> Result<ParamId> {
    params.register(name, Tensor::zeros(shape))
}

/// Registers a `[KH, KW, Cin, Cout]` convolution kernel.
pub fn register_conv(
    params: &mut ParamSet,
    name: &str,
    rng: &mut ChaCha8Rng,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Result<ParamId> {
    let fan_in = kh * kw * cin;
    let fan_out = kh * kw * cout;
    params.register(name, xavier_uniform(rng, &[kh, kw, cin, cout], fan_in, fan_out))
}

/// Registers a layer-norm affine pair: gain of ones, bias of zeros.
pub fn register_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) -> Result<(ParamId, ParamId)> {
    let gain = params.register(&format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?;
    let bias = params.register(&format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
    Ok((gain, bias))
}
