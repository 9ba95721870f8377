//! Counter-addressed random streams and synthetic student-teacher batches.
//!
//! Every stream is a ChaCha8 keystream keyed by a 64-bit seed and selected
//! by a 64-bit stream id, so batch `t` is produced without replaying
//! batches `0..t`. Normals come from the Box-Muller transform applied to
//! pairs of 53-bit uniforms in (0, 1].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

use super::model::Model;

/// A reproducible stream of uniforms and standard normals.
pub struct Stream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng, spare: None }
    }

    /// Uniform in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal<T: Real>(&mut self, out: &mut [T]) {
        for x in out {
            *x = T::from_f64(self.normal());
        }
    }
}

/// Stream ids inside one data seed: inputs and label noise never overlap.
fn input_stream(step: u64) -> u64 {
    step.wrapping_mul(2)
}

fn noise_stream(step: u64) -> u64 {
    step.wrapping_mul(2).wrapping_add(1)
}

/// Batch `step` of the data stream: `x ~ N(0, I)` and
/// `y = teacher(x) + N(0, sigma^2)`.
pub fn generate_batch<T: Real>(
    data_seed: u64,
    step: u64,
    batch: usize,
    d_model: usize,
    teacher: &Model<T>,
    label_noise: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut x = Tensor::zeros(&[batch, d_model]);
    Stream::new(data_seed, input_stream(step)).fill_normal(&mut x.data);
    let mut y = teacher.forward_plain(&x)?;
    if label_noise > 0.0 {
        let mut noise = Stream::new(data_seed, noise_stream(step));
        let sigma = T::from_f64(label_noise);
        for v in &mut y.data {
            *v += sigma * T::from_f64(noise.normal());
        }
    }
    Ok((x, y))
}
