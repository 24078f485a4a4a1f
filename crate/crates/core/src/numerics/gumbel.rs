use ndarray::Array2;
use rand::Rng;

/// Standard Gumbel variate from a uniform draw `u` in `(0, 1)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Uniform draw clamped one machine epsilon away from 0 and 1.
pub fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen::<f64>().clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Matrix of independent standard Gumbel samples, filled in row-major order.
pub fn gumbel_sample<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || gumbel_from_uniform(uniform_open(rng)))
}
