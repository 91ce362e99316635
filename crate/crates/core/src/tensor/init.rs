use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Kaiming (He) normal initialization: entries drawn from `N(0, 2/fan_in)`.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let std = libm::sqrt(2.0 / fan_in as f64);
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{component_rng, Component};
    use alloc::vec;

    #[test]
    fn sample_variance_matches_two_over_fan_in() {
        let mut rng = component_rng(11, Component::Init);
        let t = kaiming_normal(vec![1_000_000], 2, &mut rng);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = kaiming_normal(vec![4, 3], 3, &mut component_rng(5, Component::Init));
        let b = kaiming_normal(vec![4, 3], 3, &mut component_rng(5, Component::Init));
        assert_eq!(a, b);
    }
}
