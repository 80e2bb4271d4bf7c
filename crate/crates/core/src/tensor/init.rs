use rand::Rng;

use super::Tensor;
use crate::scalar::Real;

/// Glorot-uniform sample in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn glorot_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f32> = glorot(&mut a, &[10, 20], 20, 10);
        let u: Tensor<f32> = glorot(&mut b, &[10, 20], 20, 10);
        assert_eq!(t, u);
        let lim = (6.0f32 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= lim));
    }
}
