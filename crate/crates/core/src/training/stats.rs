use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DELTA_FLOOR: f64 = 1e-6;

/// Per-pixel variance of the training images, floored.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStatistics {
    /// Shaped like one image, `[C,H,W]`.
    pub delta_i: Tensor,
}

impl DatasetStatistics {
    pub fn new(delta_i: Tensor) -> Result<Self> {
        if delta_i.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid("image variances must be positive and finite"));
        }
        Ok(Self { delta_i })
    }

    /// Variance over one pass of images, each entry floored at `floor`.
    pub fn from_images<'a>(
        images: impl IntoIterator<Item = &'a Tensor>,
        floor: f64,
    ) -> Result<Self> {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        let mut shape = Vec::new();
        for img in images {
            if n == 0 {
                shape = img.shape().to_vec();
                mean = vec![0.0; img.len()];
                m2 = vec![0.0; img.len()];
            } else if img.shape() != shape.as_slice() {
                return Err(shape_err(
                    "dataset_statistics",
                    format!("{:?} vs {shape:?}", img.shape()),
                ));
            }
            n += 1;
            for ((x, mu), s) in img.data().iter().zip(&mut mean).zip(&mut m2) {
                let d = x - *mu;
                *mu += d / n as f64;
                *s += d * (x - *mu);
            }
        }
        if n == 0 {
            return Err(invalid("no images to estimate statistics from"));
        }
        let var = m2.iter().map(|s| (s / n as f64).max(floor)).collect();
        Self::new(Tensor::new(shape, var)?)
    }

    pub fn inverse(&self) -> Tensor {
        self.delta_i.map(|v| 1.0 / v)
    }
}

/// `mean over pixels of (I - I')^2 / delta_I` for `[B, ...]` batches, with
/// `inv_delta` the per-pixel reciprocal variance node.
pub fn reconstruction_loss(tape: &mut Tape, i: Var, i_prime: Var, inv_delta: Var) -> Result<Var> {
    if tape.shape(i) != tape.shape(i_prime) {
        return Err(shape_err(
            "reconstruction_loss",
            format!("{:?} vs {:?}", tape.shape(i), tape.shape(i_prime)),
        ));
    }
    let pixels = tape.value(inv_delta).len();
    let total = tape.value(i).len();
    if pixels == 0 || !total.is_multiple_of(pixels) {
        return Err(shape_err(
            "reconstruction_loss",
            format!("{:?} against {pixels} variances", tape.shape(i)),
        ));
    }
    let b = total / pixels;
    let diff = tape.sub(i, i_prime)?;
    let sq = tape.square(diff)?;
    let flat = tape.reshape(sq, &[b, pixels])?;
    let w = tape.reshape(inv_delta, &[pixels])?;
    let w = tape.broadcast_axis0(w, b)?;
    let weighted = tape.mul(flat, w)?;
    Ok(tape.mean(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(i: &Tensor, ip: &Tensor, st: &DatasetStatistics) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(i.clone());
        let b = t.constant(ip.clone());
        let w = t.constant(st.inverse());
        let l = reconstruction_loss(&mut t, a, b, w).unwrap();
        t.value(l).item()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let i = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let st = DatasetStatistics::new(Tensor::full(&[3, 4, 4], 0.3)).unwrap();
        assert_eq!(loss(&i, &i, &st), 0.0);
    }

    #[test]
    fn unit_offset_with_unit_variance_is_one() {
        let i = Tensor::full(&[2, 1, 3, 3], 2.0);
        let ip = Tensor::full(&[2, 1, 3, 3], 1.0);
        let st = DatasetStatistics::new(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        assert_eq!(loss(&i, &ip, &st), 1.0);
    }

    #[test]
    fn matches_direct_summation() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let i = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
        let ip = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
        let var: Vec<f64> = (0..32).map(|_| r.random_range(0.1..2.0)).collect();
        let st = DatasetStatistics::new(Tensor::new(vec![2, 4, 4], var.clone()).unwrap()).unwrap();
        let mut total = 0.0;
        for (k, (a, b)) in i.data().iter().zip(ip.data()).enumerate() {
            total += (a - b).powi(2) / var[k % 32];
        }
        assert!((loss(&i, &ip, &st) - total / 96.0).abs() < 1e-6);
    }

    #[test]
    fn constant_images_are_floored() {
        let imgs = vec![Tensor::full(&[1, 2, 2], 0.5); 4];
        let st = DatasetStatistics::from_images(&imgs, DELTA_FLOOR).unwrap();
        assert!(st.delta_i.data().iter().all(|&v| v == DELTA_FLOOR));
        let l = loss(&Tensor::full(&[1, 1, 2, 2], 0.5), &Tensor::full(&[1, 1, 2, 2], 0.5), &st);
        assert_eq!(l, 0.0);
        assert!(DatasetStatistics::from_images(&[], DELTA_FLOOR).is_err());
    }

    #[test]
    fn variance_estimate_matches_two_pass() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Tensor> = (0..20).map(|_| Tensor::randn(&[1, 2, 2], 2.0, &mut r)).collect();
        let st = DatasetStatistics::from_images(&imgs, DELTA_FLOOR).unwrap();
        for p in 0..4 {
            let mean = imgs.iter().map(|t| t.data()[p]).sum::<f64>() / 20.0;
            let var = imgs.iter().map(|t| (t.data()[p] - mean).powi(2)).sum::<f64>() / 20.0;
            assert!((st.delta_i.data()[p] - var).abs() < 1e-12);
        }
    }
}
