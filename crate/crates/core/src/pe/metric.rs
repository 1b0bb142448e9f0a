use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MONOTONICITY_TOL: f64 = 1e-9;

const MAX_WITNESSES: usize = 16;

pub fn pe_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("rows of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// Triples whose first gap strictly exceeds the second.
    pub comparable: usize,
    pub violations: usize,
    /// Up to a few `(t1, t2, t3)` with `|t1 - t2| > |t1 - t3|` but
    /// `d(p1, p2) <= d(p1, p3) + tol`.
    pub witnesses: Vec<(f64, f64, f64)>,
}

fn distinct_count(times: &[f64]) -> usize {
    let mut t = times.to_vec();
    t.sort_by(|a, b| a.total_cmp(b));
    t.dedup();
    t.len()
}

fn distance_matrix(rows: &Tensor, n: usize) -> Result<Vec<f64>> {
    if rows.rank() != 2 || rows.shape()[0] != n {
        return Err(Error::ShapeMismatch(format!("{n} times but embedding of shape {:?}", rows.shape())));
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = pe_distance(rows.row(i), rows.row(j))?;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Enumerates all ordered triples of `sample_times` looking for larger time
/// gaps that do not yield larger embedding distances.
pub fn check_monotonicity<F>(pe: F, sample_times: &[f64]) -> Result<MonotonicityReport>
where
    F: Fn(&[f64]) -> Result<Tensor>,
{
    if distinct_count(sample_times) < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: distinct_count(sample_times) });
    }
    let n = sample_times.len();
    let d = distance_matrix(&pe(sample_times)?, n)?;
    let t = sample_times;
    let mut report = MonotonicityReport { comparable: 0, violations: 0, witnesses: Vec::new() };
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let gap_ij = (t[i] - t[j]).abs();
            for k in 0..n {
                if k == i || k == j || gap_ij <= (t[i] - t[k]).abs() {
                    continue;
                }
                report.comparable += 1;
                if d[i * n + j] <= d[i * n + k] + MONOTONICITY_TOL {
                    report.violations += 1;
                    if report.witnesses.len() < MAX_WITNESSES {
                        report.witnesses.push((t[i], t[j], t[k]));
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Largest spread of `d(p(t), p(t + lag))` over `base_times`. The embedding
/// is evaluated once over the base times followed by their shifted copies.
pub fn check_translation_invariance<F>(pe: F, base_times: &[f64], lag: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Tensor>,
{
    if base_times.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: base_times.len() });
    }
    if lag == 0.0 || !lag.is_finite() {
        return Err(Error::InvalidConfig(format!("lag must be finite and nonzero, got {lag}")));
    }
    let n = base_times.len();
    let all: Vec<f64> = base_times.iter().copied().chain(base_times.iter().map(|t| t + lag)).collect();
    let rows = pe(&all)?;
    if rows.rank() != 2 || rows.shape()[0] != 2 * n {
        return Err(Error::ShapeMismatch(format!("{} times but embedding of shape {:?}", 2 * n, rows.shape())));
    }
    let dists = (0..n).map(|i| pe_distance(rows.row(i), rows.row(n + i))).collect::<Result<Vec<_>>>()?;
    Ok(dists.iter().map(|d| (d - dists[0]).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pe::{ctlpe, irr_sinusoidal_pe, CtlpeParams};

    fn random_ctlpe(rng: &mut impl Rng, d: usize) -> CtlpeParams {
        let slope = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let bias = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CtlpeParams::new(slope, bias).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pe_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(pe_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(pe_distance(&[1.0, 2.0], &[4.0, -1.0]).unwrap(), pe_distance(&[4.0, -1.0], &[1.0, 2.0]).unwrap());
        assert!(matches!(pe_distance(&[1.0], &[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ctlpe_has_no_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_ctlpe(&mut rng, 16);
        let times: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = check_monotonicity(|ts| ctlpe(ts, &p, true).map(|m| m.rows), &times).unwrap();
        assert!(r.comparable > 0);
        assert_eq!(r.violations, 0);
        let dev = check_translation_invariance(|ts| ctlpe(ts, &p, true).map(|m| m.rows), &times, 0.37).unwrap();
        assert!(dev < 1e-9);
    }

    #[test]
    fn constant_embedding_violates_every_comparable_triple() {
        let p = CtlpeParams::new(vec![0.0; 4], vec![1.0; 4]).unwrap();
        let times = [0.0, 0.1, 0.5, 0.7, 2.0];
        let r = check_monotonicity(|ts| ctlpe(ts, &p, true).map(|m| m.rows), &times).unwrap();
        assert_eq!(r.violations, r.comparable);
    }

    #[test]
    fn wide_span_sinusoid_violates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1e5)).collect();
        let r = check_monotonicity(|ts| irr_sinusoidal_pe(ts, 16, 1.0).map(|m| m.rows), &times).unwrap();
        assert!(r.violations >= 1);
    }

    #[test]
    fn sinusoid_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let times: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1e3)).collect();
        let dev = check_translation_invariance(|ts| irr_sinusoidal_pe(ts, 16, 1.0).map(|m| m.rows), &times, 7.5).unwrap();
        assert!(dev < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let p = CtlpeParams::new(vec![1.0], vec![0.0]).unwrap();
        let f = |ts: &[f64]| ctlpe(ts, &p, true).map(|m| m.rows);
        assert!(matches!(check_monotonicity(f, &[1.0, 1.0, 2.0]), Err(Error::TooFewSamples { .. })));
        assert!(matches!(check_translation_invariance(f, &[1.0], 1.0), Err(Error::TooFewSamples { .. })));
    }
}
