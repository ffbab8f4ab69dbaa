//! Codebook, nearest-prototype quantization and the VQ loss terms.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Pairs of prototypes closer than this are reported as degenerate.
pub const DISTINCT_TOL: f64 = 1e-9;

/// `K` prototype rows of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    prototypes: Tensor,
}

impl Codebook {
    pub fn new(prototypes: Tensor) -> Result<Self> {
        let [k, d] = prototypes.shape() else {
            return Err(invalid(format!(
                "codebook must be K x d, got {:?}",
                prototypes.shape()
            )));
        };
        if *k < 2 || *d < 1 {
            return Err(invalid(format!("codebook needs K >= 2 and d >= 1, got {k} x {d}")));
        }
        if !prototypes.is_finite() {
            return Err(invalid("codebook holds non-finite values"));
        }
        Ok(Self { prototypes })
    }

    /// Gaussian prototypes scaled by `1/sqrt(d)`.
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(invalid("codebook dimension must be positive"));
        }
        let cb = Self::new(Tensor::randn(&[k, d], 1.0 / (d as f64).sqrt(), rng))?;
        if cb.min_pairwise_distance() <= DISTINCT_TOL {
            return Err(invalid("random codebook produced coincident prototypes"));
        }
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        self.prototypes.row(j)
    }

    /// Replaces the prototypes, keeping the shape.
    pub fn set_prototypes(&mut self, t: Tensor) -> Result<()> {
        if t.shape() != self.prototypes.shape() {
            return Err(shape_err(
                "codebook",
                format!("{:?} vs {:?}", t.shape(), self.prototypes.shape()),
            ));
        }
        self.prototypes = t;
        Ok(())
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.k();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                best = best.min(sq_dist(self.prototype(i), self.prototype(j)).sqrt());
            }
        }
        best
    }

    /// True when two prototypes have collapsed onto each other.
    pub fn is_degenerate(&self) -> bool {
        self.min_pairwise_distance() <= DISTINCT_TOL
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest prototype and its squared distance. Ties go to the
/// lowest index.
pub fn nearest(row: &[f64], cb: &Codebook) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..cb.k() {
        let dist = sq_dist(row, cb.prototype(j));
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Result of quantizing `L` embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// `L x d`; row `i` is a copy of prototype `indices[i]`.
    pub vectors: Tensor,
}

pub fn quantize(e: &Tensor, cb: &Codebook) -> Result<Quantized> {
    match e.shape() {
        [_, d] if *d == cb.d() => {}
        s => {
            return Err(shape_err(
                "quantize",
                format!("embedding {s:?} against codebook dimension {}", cb.d()),
            ))
        }
    }
    let indices: Vec<usize> = (0..e.rows()).map(|i| nearest(e.row(i), cb).0).collect();
    Ok(Quantized {
        vectors: lookup(cb, &indices)?,
        indices,
    })
}

/// Gathers prototypes by index.
pub fn lookup(cb: &Codebook, indices: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= cb.k()) {
        return Err(invalid(format!("index {bad} out of range for K = {}", cb.k())));
    }
    let data = indices
        .iter()
        .flat_map(|&i| cb.prototype(i).iter().copied())
        .collect();
    Tensor::new(vec![indices.len(), cb.d()], data)
}

/// Codebook and commitment terms on the tape.
///
/// `codebook = mean_rows |sg(e) - q|^2` and
/// `commitment = beta * mean_rows |e - sg(q)|^2`.
pub fn vq_losses(tape: &mut Tape, e: Var, q: Var, beta: f64) -> Result<(Var, Var)> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("beta must be non-negative, got {beta}")));
    }
    if tape.shape(e) != tape.shape(q) || tape.shape(e).len() != 2 {
        return Err(shape_err(
            "vq_losses",
            format!("{:?} vs {:?}", tape.shape(e), tape.shape(q)),
        ));
    }
    let rows = tape.shape(e)[0] as f64;

    let e_sg = tape.stop_gradient(e);
    let diff = tape.sub(e_sg, q)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq);
    let codebook = tape.scale(total, 1.0 / rows);

    let q_sg = tape.stop_gradient(q);
    let diff = tape.sub(e, q_sg)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq);
    let commitment = tape.scale(total, beta / rows);
    Ok((codebook, commitment))
}

/// Forward value `q`, gradient passed to `e` unchanged.
pub fn straight_through(tape: &mut Tape, e: Var, q: Var) -> Result<Var> {
    tape.straight_through(e, q)
}

/// Tracks how long each prototype has gone unselected.
#[derive(Clone, Debug)]
pub struct UsageTracker {
    last_used: Vec<u64>,
    reported: Vec<bool>,
    window: u64,
}

impl UsageTracker {
    pub fn new(k: usize, window: u64) -> Self {
        Self {
            last_used: vec![0; k],
            reported: vec![false; k],
            window,
        }
    }

    /// Records the indices used at `step` and returns prototypes that just
    /// crossed the idle window.
    pub fn record(&mut self, step: u64, indices: &[usize]) -> Vec<usize> {
        for &i in indices {
            self.last_used[i] = step;
            self.reported[i] = false;
        }
        let mut dead = Vec::new();
        for (j, (&last, rep)) in self.last_used.iter().zip(&mut self.reported).enumerate() {
            if !*rep && step.saturating_sub(last) >= self.window {
                *rep = true;
                dead.push(j);
            }
        }
        if !dead.is_empty() {
            log::warn!(
                "{} prototypes unused for {} steps at step {step}: {dead:?}",
                dead.len(),
                self.window
            );
        }
        dead
    }

    pub fn dead(&self, step: u64) -> Vec<usize> {
        (0..self.last_used.len())
            .filter(|&j| step.saturating_sub(self.last_used[j]) >= self.window)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::numeric_grad;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        Codebook::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()).unwrap()
    }

    fn brute_force(e: &Tensor, cb: &Codebook) -> Vec<usize> {
        (0..e.rows())
            .map(|i| {
                let dists: Vec<f64> = (0..cb.k())
                    .map(|j| {
                        e.row(i)
                            .iter()
                            .zip(cb.prototype(j))
                            .map(|(a, b)| (a - b).powi(2))
                            .sum()
                    })
                    .collect();
                let m = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                dists.iter().position(|&v| v == m).unwrap()
            })
            .collect()
    }

    #[test]
    fn row_on_prototype_selects_it() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let c = Codebook::random(6, 4, &mut r).unwrap();
        let e = Tensor::new(vec![1, 4], c.prototype(3).to_vec()).unwrap();
        let q = quantize(&e, &c).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.vectors.data(), c.prototype(3));
        assert_eq!(nearest(e.row(0), &c).1, 0.0);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let c = Codebook::random(8, 4, &mut r).unwrap();
        let e = Tensor::randn(&[5, 4], 0.5, &mut r);
        assert_eq!(quantize(&e, &c).unwrap().indices, brute_force(&e, &c));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = cb(&[&[5.0, 5.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let e = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&e, &c).unwrap().indices, vec![1]);
    }

    #[test]
    fn rejects_bad_codebooks_and_shapes() {
        assert!(Codebook::new(Tensor::zeros(&[1, 3])).is_err());
        assert!(Codebook::new(Tensor::new(vec![2, 1], vec![0.0, f64::NAN]).unwrap()).is_err());
        let c = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(quantize(&Tensor::zeros(&[3, 3]), &c).is_err());
        assert!(lookup(&c, &[2]).is_err());
        let dup = cb(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(dup.is_degenerate());
        assert!(!c.is_degenerate());
    }

    #[test]
    fn losses_vanish_on_prototypes() {
        let c = cb(&[&[0.0, 1.0], &[2.0, -1.0]]);
        let mut t = Tape::new();
        let q = lookup(&c, &[1, 0, 1]).unwrap();
        let e = t.var(q.clone());
        let qv = t.var(q);
        let (a, b) = vq_losses(&mut t, e, qv, 0.25).unwrap();
        assert_eq!(t.value(a).item(), 0.0);
        assert_eq!(t.value(b).item(), 0.0);
    }

    #[test]
    fn quarter_offset_gives_known_terms() {
        // |delta|^2 = 0.25 per row: delta = (0.3, 0.4) scaled by 1.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut e = q.clone();
        for row in e.data_mut().chunks_mut(2) {
            row[0] += 0.3;
            row[1] -= 0.4;
        }
        let mut t = Tape::new();
        let ev = t.var(e);
        let qv = t.var(q);
        let (a, b) = vq_losses(&mut t, ev, qv, 0.25).unwrap();
        assert!((t.value(a).item() - 0.25).abs() < 1e-12);
        assert!((t.value(b).item() - 0.0625).abs() < 1e-12);

        let (a2, b2) = vq_losses(&mut t, ev, qv, 0.0).unwrap();
        assert_eq!(t.value(b2).item(), 0.0);
        assert!((t.value(a2).item() - 0.25).abs() < 1e-12);
        assert!(vq_losses(&mut t, ev, qv, -1.0).is_err());
    }

    #[test]
    fn loss_terms_send_gradient_to_one_side_only() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let e = Tensor::randn(&[3, 4], 1.0, &mut r);
        let q = Tensor::randn(&[3, 4], 1.0, &mut r);
        let term = |which: usize| {
            move |t: &mut Tape, v: &[Var]| {
                let (a, b) = vq_losses(t, v[0], v[1], 0.25)?;
                Ok(if which == 0 { a } else { b })
            }
        };
        let inputs = [e.clone(), q.clone()];
        let f0 = term(0);
        let f1 = term(1);
        // Analytic side matches finite differences.
        let mut t = Tape::new();
        let (ev, qv) = (t.var(e.clone()), t.var(q.clone()));
        let (a, b) = vq_losses(&mut t, ev, qv, 0.25).unwrap();
        let ga = t.backward(a).unwrap();
        assert!(ga.get(ev).is_none());
        let fd = numeric_grad(&f0, &inputs, 1e-5);
        for (x, y) in ga.or_zeros(&t, qv).data().iter().zip(fd[1].data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let gb = t.backward(b).unwrap();
        assert!(gb.get(qv).is_none());
        let fd = numeric_grad(&f1, &inputs, 1e-5);
        for (x, y) in gb.or_zeros(&t, ev).data().iter().zip(fd[0].data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let e = t.var(Tensor::randn(&[3, 2], 1.0, &mut r));
        let q = t.var(Tensor::randn(&[3, 2], 1.0, &mut r));
        let st = straight_through(&mut t, e, q).unwrap();
        assert_eq!(t.value(st), t.value(q));
        let s = t.sum(st);
        let g = t.backward(s).unwrap();
        assert!(g.get(e).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(q).is_none());
    }

    #[test]
    fn usage_tracker_reports_once() {
        let mut u = UsageTracker::new(3, 10);
        assert!(u.record(1, &[0, 1]).is_empty());
        assert_eq!(u.record(10, &[0, 1]), vec![2]);
        assert!(u.record(11, &[0]).is_empty());
        assert_eq!(u.record(21, &[0]), vec![1]);
        assert_eq!(u.dead(21), vec![1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantize_is_idempotent_and_optimal(seed in any::<u64>(), k in 2usize..64, d in 1usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let c = Codebook::random(k, d, &mut r).unwrap();
            let e = Tensor::randn(&[7, d], 1.0, &mut r);
            let q = quantize(&e, &c).unwrap();
            prop_assert_eq!(&quantize(&q.vectors, &c).unwrap().indices, &q.indices);
            for i in 0..7 {
                let dq = sq_dist(e.row(i), q.vectors.row(i));
                for j in 0..k {
                    prop_assert!(dq <= sq_dist(e.row(i), c.prototype(j)));
                }
            }
        }
    }
}
