use rand::Rng as _;

use crate::error::{AutodiffError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Inverted-dropout mask: each entry is 0 with probability `drop_rate`,
/// otherwise `1/(1−drop_rate)`, so the masked activation keeps its
/// expectation.
pub fn dropout_mask(shape: &[usize], drop_rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(AutodiffError::Invalid(format!(
            "drop rate must be in [0, 1), got {drop_rate}"
        )));
    }
    if drop_rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = 1.0 / (1.0 - drop_rate);
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        if rng.random::<f64>() >= drop_rate {
            *x = keep;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_rate_is_all_ones() {
        let m = dropout_mask(&[3, 4], 0.0, &mut rng_from_seed(1)).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn rate_of_one_is_rejected() {
        assert!(dropout_mask(&[2], 1.0, &mut rng_from_seed(1)).is_err());
        assert!(dropout_mask(&[2], -0.1, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn half_rate_zero_fraction() {
        // sd of the fraction is 0.0005 at 1e6 draws; 0.002 is four sigma.
        let m = dropout_mask(&[1_000_000], 0.5, &mut rng_from_seed(2)).unwrap();
        let zeros = m.data().iter().filter(|&&x| x == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.5).abs() < 0.002, "{zeros}");
        assert!(m.data().iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn masked_activation_keeps_its_mean() {
        let mut rng = rng_from_seed(3);
        let activation = 1.7;
        let n = 200_000;
        let mask = dropout_mask(&[n], 0.5, &mut rng).unwrap();
        let mean = mask.data().iter().map(|m| m * activation).sum::<f64>() / n as f64;
        assert!((mean / activation - 1.0).abs() < 0.01, "{mean}");
    }
}
