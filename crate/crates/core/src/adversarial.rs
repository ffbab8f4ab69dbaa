//! WGAN-GP pieces: interpolation, gradient penalty, critic and generator
//! losses.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLossConfig {
    pub lambda: f64,
    pub critic_steps: usize,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            critic_steps: 5,
        }
    }
}

impl GanLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One uniform weight in `[0, 1)` per batch row.
pub fn sample_weights<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<f64> {
    (0..batch).map(|_| rng.random::<f64>()).collect()
}

/// `C = w * fake + (1 - w) * real`, with `w[i]` shared across row `i`.
pub fn interpolate(fake: &Tensor, real: &Tensor, w: &[f64]) -> Result<Tensor> {
    if fake.shape() != real.shape() || fake.shape().len() != 2 {
        return Err(shape_err(
            "interpolate",
            format!("{:?} vs {:?}", fake.shape(), real.shape()),
        ));
    }
    if w.len() != fake.rows() {
        return Err(shape_err(
            "interpolate",
            format!("{} weights for {} rows", w.len(), fake.rows()),
        ));
    }
    if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("interpolation weight {bad} outside [0, 1]")));
    }
    let n = fake.cols();
    let data = fake
        .data()
        .chunks(n)
        .zip(real.data().chunks(n))
        .zip(w)
        .flat_map(|((f, r), &wi)| {
            f.iter()
                .zip(r)
                .map(move |(a, b)| wi * a + (1.0 - wi) * b)
        })
        .collect();
    Tensor::new(fake.shape().to_vec(), data)
}

/// `lambda * mean_i (|grad_c D(c)_i| - 1)^2` as a differentiable node.
///
/// `critic` maps the `[B, n]` node to `[B, 1]` scores. Rows are scored
/// independently, so differentiating the summed score yields every
/// per-row input gradient at once.
pub fn gradient_penalty<F>(tape: &mut Tape, critic: F, c: Var, lambda: f64) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let scores = critic(tape, c)?;
    let total = tape.sum(scores);
    let grad = tape.grad_graph(total, &[c])?[0];
    let norms = tape.row_norms(grad)?;
    let dev = tape.add_scalar(norms, -1.0);
    let sq = tape.square(dev)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, lambda))
}

/// The critic objective `mean(d_real) - mean(d_fake) - gp`, which the
/// critic maximizes.
pub fn critic_objective(tape: &mut Tape, d_real: Var, d_fake: Var, gp: Var) -> Result<Var> {
    if tape.value(d_real).len() != tape.value(d_fake).len() {
        return Err(shape_err(
            "critic_loss",
            format!("{:?} vs {:?}", tape.shape(d_real), tape.shape(d_fake)),
        ));
    }
    let r = tape.mean(d_real);
    let f = tape.mean(d_fake);
    let gap = tape.sub(r, f)?;
    tape.sub(gap, gp)
}

/// Numeric form of [`critic_objective`].
pub fn critic_loss(d_real: &[f64], d_fake: &[f64], gp: f64) -> Result<f64> {
    if d_real.len() != d_fake.len() || d_real.is_empty() {
        return Err(invalid(format!(
            "critic batches differ: {} real, {} fake",
            d_real.len(),
            d_fake.len()
        )));
    }
    Ok(mean(d_real) - mean(d_fake) - gp)
}

/// `-mean(d_fake)`.
pub fn generator_adv_loss(tape: &mut Tape, d_fake: Var) -> Var {
    let m = tape.mean(d_fake);
    tape.scale(m, -1.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Activation, Discriminator, DiscriminatorConfig, Transform, TransformConfig, Variant};
    use crate::testutil::{assert_grad_close, eval};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn linear_critic(u: Vec<f64>) -> impl FnOnce(&mut Tape, Var) -> Result<Var> {
        move |t: &mut Tape, x: Var| {
            let n = u.len();
            let w = t.constant(Tensor::new(vec![n, 1], u)?);
            t.matmul(x, w)
        }
    }

    fn penalty_value(critic: impl FnOnce(&mut Tape, Var) -> Result<Var>, c: Tensor, lambda: f64) -> f64 {
        let mut t = Tape::new();
        let cv = t.var(c);
        let gp = gradient_penalty(&mut t, critic, cv, lambda).unwrap();
        t.value(gp).item()
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let f = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
        assert_eq!(interpolate(&f, &r, &[1.0; 3]).unwrap(), f);
        assert_eq!(interpolate(&f, &r, &[0.0; 3]).unwrap(), r);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng(3));
        let c = interpolate(&Tensor::zeros(&[3, 4]), &v.map(|x| 2.0 * x), &[0.5; 3]).unwrap();
        assert_eq!(c, v);
        assert!(interpolate(&f, &Tensor::zeros(&[3, 5]), &[0.5; 3]).is_err());
        assert!(interpolate(&f, &r, &[0.5; 2]).is_err());
        assert!(interpolate(&f, &r, &[1.5; 3]).is_err());
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let u = vec![0.6, 0.0, -0.8];
        let c = Tensor::randn(&[5, 3], 1.0, &mut rng(4));
        assert!(penalty_value(linear_critic(u), c, 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_critic_penalty_is_lambda() {
        let c = Tensor::randn(&[4, 3], 1.0, &mut rng(5));
        let critic = |t: &mut Tape, x: Var| {
            let z = t.scale(x, 0.0);
            let s = t.sum_axis1(z)?;
            let s = t.add_scalar(s, 3.0);
            t.reshape(s, &[4, 1])
        };
        assert!((penalty_value(critic, c, 10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn doubled_sum_critic_matches_closed_form() {
        let c = Tensor::randn(&[6, 9], 1.0, &mut rng(6));
        let p = penalty_value(linear_critic(vec![2.0; 9]), c, 10.0);
        assert!((p - 250.0).abs() < 1e-5, "{p}");
    }

    #[test]
    fn penalty_rejects_first_order_only_critic() {
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng(7));
        let mut t = Tape::new();
        let cv = t.var(c);
        let critic = |t: &mut Tape, x: Var| {
            let s = t.softmax(x);
            let w = t.constant(Tensor::full(&[3, 1], 1.0));
            t.matmul(s, w)
        };
        assert!(matches!(
            gradient_penalty(&mut t, critic, cv, 10.0),
            Err(Error::UnsupportedSecondOrder { op: "softmax" })
        ));
    }

    #[test]
    fn penalty_gradient_matches_nested_finite_differences() {
        let d = Discriminator::new(DiscriminatorConfig {
            input: 8,
            hidden: vec![6],
            activation: Activation::Tanh,
        })
        .unwrap();
        let ps = d.init(&mut rng(8));
        let c = Tensor::randn(&[3, 8], 1.0, &mut rng(9));
        let f = |t: &mut Tape, v: &[Var]| {
            let p = &v[1..];
            gradient_penalty(t, |t, x| d.forward(t, p, x), v[0], 10.0)
        };
        let mut inputs = vec![c];
        inputs.extend(ps.tensors().iter().cloned());
        // The oracle's inner gradient is itself a central difference.
        let nested = |inputs: &[Tensor]| -> f64 {
            let h = 1e-4;
            let mut total = 0.0;
            let c = &inputs[0];
            let (b, n) = (c.rows(), c.cols());
            for i in 0..b {
                let mut g2 = 0.0;
                for j in 0..n {
                    let score = |delta: f64| {
                        let mut cc = c.clone();
                        cc.data_mut()[i * n + j] += delta;
                        let mut all = vec![cc];
                        all.extend(inputs[1..].iter().cloned());
                        eval(
                            &|t: &mut Tape, v: &[Var]| {
                                let y = d.forward(t, &v[1..], v[0])?;
                                Ok(t.sum(y))
                            },
                            &all,
                        )
                    };
                    let g = (score(h) - score(-h)) / (2.0 * h);
                    g2 += g * g;
                }
                total += (g2.sqrt() - 1.0).powi(2);
            }
            10.0 * total / b as f64
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let gp = f(&mut tape, &vars).unwrap();
        assert!((tape.value(gp).item() - nested(&inputs)).abs() < 1e-5);
        let grads = tape.backward(gp).unwrap();
        let h = 1e-3;
        for (k, p) in inputs.iter().enumerate().skip(1) {
            let analytic = grads.or_zeros(&tape, vars[k]);
            for i in 0..p.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (nested(&plus) - nested(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-3),
                    "param {k}[{i}]: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss(&[0.3, -1.0], &[0.3, -1.0], 0.0).unwrap(), 0.0);
        assert_eq!(critic_loss(&[1.0, 3.0], &[0.0, 2.0], 0.0).unwrap(), 1.0);
        let r = [0.5, 2.0, -1.0];
        let f = [0.1, 0.2, 0.3];
        let expect = (0.5 + 2.0 - 1.0) / 3.0 - 0.6 / 3.0;
        assert!((critic_loss(&r, &f, 0.0).unwrap() - expect).abs() < 1e-15);
        assert!(critic_loss(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn critic_objective_ignores_output_offset() {
        let d = Discriminator::new(DiscriminatorConfig {
            input: 4,
            hidden: vec![5],
            activation: Activation::Tanh,
        })
        .unwrap();
        let ps = d.init(&mut rng(10));
        let real = Tensor::randn(&[3, 4], 1.0, &mut rng(11));
        let fake = Tensor::randn(&[3, 4], 1.0, &mut rng(12));
        let c = interpolate(&fake, &real, &[0.2, 0.5, 0.9]).unwrap();
        let objective = |offset: f64| {
            let mut t = Tape::new();
            let p = ps.bind(&mut t, true);
            let score = |t: &mut Tape, x: Tensor| -> Var {
                let xv = t.var(x);
                let y = d.forward(t, &p, xv).unwrap();
                t.add_scalar(y, offset)
            };
            let dr = score(&mut t, real.clone());
            let df = score(&mut t, fake.clone());
            let cv = t.var(c.clone());
            let gp = gradient_penalty(
                &mut t,
                |t, x| {
                    let y = d.forward(t, &p, x)?;
                    Ok(t.add_scalar(y, offset))
                },
                cv,
                10.0,
            )
            .unwrap();
            let obj = critic_objective(&mut t, dr, df, gp).unwrap();
            t.value(obj).item()
        };
        assert!((objective(0.0) - objective(7.5)).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_examples_and_gradient() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_vec(vec![0.0]));
        let l = generator_adv_loss(&mut t, z);
        assert_eq!(t.value(l).item(), 0.0);
        let v = t.constant(Tensor::from_vec(vec![1.0, 3.0]));
        let l = generator_adv_loss(&mut t, v);
        assert_eq!(t.value(l).item(), -2.0);

        let g = Transform::new(TransformConfig {
            variant: Variant::NoVq,
            frames: 8,
            bins: 4,
            channels: vec![2],
            positions: 2,
            k: 2,
            d: 2,
        })
        .unwrap();
        let d = Discriminator::new(DiscriminatorConfig {
            input: 4,
            hidden: vec![3],
            activation: Activation::Tanh,
        })
        .unwrap();
        let gp = g.init(&mut rng(13));
        let dp = d.init(&mut rng(14));
        let a = Tensor::randn(&[2, 1, 8, 4], 1.0, &mut rng(15));
        let ng = gp.len();
        let f = |t: &mut Tape, v: &[Var]| {
            let feats = g.raw(t, &v[1..1 + ng], v[0])?;
            let flat = t.reshape(feats, &[2, 4])?;
            let s = d.forward(t, &v[1 + ng..], flat)?;
            Ok(generator_adv_loss(t, s))
        };
        let mut inputs = vec![a];
        inputs.extend(gp.tensors().iter().cloned());
        inputs.extend(dp.tensors().iter().cloned());
        assert_grad_close(&f, &inputs, 1e-5, 1e-4, 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(GanLossConfig::default().validate().is_ok());
        assert!(GanLossConfig { lambda: -1.0, critic_steps: 5 }.validate().is_err());
        assert!(GanLossConfig { lambda: 10.0, critic_steps: 0 }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn interpolate_stays_between_inputs(seed in any::<u64>(), b in 1usize..6, n in 1usize..6) {
            let mut r = rng(seed);
            let f = Tensor::randn(&[b, n], 1.0, &mut r);
            let re = Tensor::randn(&[b, n], 1.0, &mut r);
            let w = sample_weights(b, &mut r);
            let c = interpolate(&f, &re, &w).unwrap();
            for ((x, y), z) in f.data().iter().zip(re.data()).zip(c.data()) {
                prop_assert!(*z >= x.min(*y) - 1e-15 && *z <= x.max(*y) + 1e-15);
            }
        }

        #[test]
        fn scaled_sum_critic_closed_form(m in 1usize..40, lambda in 0.0f64..20.0) {
            let c = Tensor::randn(&[2, m], 1.0, &mut rng(m as u64));
            let p = penalty_value(linear_critic(vec![2.0; m]), c, lambda);
            let expect = lambda * (2.0 * (m as f64).sqrt() - 1.0).powi(2);
            prop_assert!((p - expect).abs() <= 1e-9 * expect.max(1.0));
        }

        #[test]
        fn penalty_is_nonnegative(seed in any::<u64>()) {
            let d = Discriminator::new(DiscriminatorConfig {
                input: 5,
                hidden: vec![4],
                activation: Activation::Tanh,
            }).unwrap();
            let ps = d.init(&mut rng(seed));
            let c = Tensor::randn(&[3, 5], 1.0, &mut rng(seed ^ 1));
            let mut t = Tape::new();
            let p = ps.bind(&mut t, true);
            let cv = t.var(c);
            let gp = gradient_penalty(&mut t, |t, x| d.forward(t, &p, x), cv, 10.0).unwrap();
            prop_assert!(t.value(gp).item() >= 0.0);
        }
    }
}
