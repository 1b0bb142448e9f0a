use crate::error::{Error, Result};

/// Piecewise-cubic natural spline through per-knot channel vectors. Outside
/// the knots the path continues linearly with the boundary derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct SplinePath {
    knots: Vec<f64>,
    channels: usize,
    /// `[a, b, c, d]` of interval `i`, channel `c` at `i * channels + c`.
    coeffs: Vec<[f64; 4]>,
}

/// Solves a tridiagonal system in place (Thomas algorithm).
fn solve_tridiagonal(lower: &[f64], diag: &mut [f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    for i in 1..n {
        let w = lower[i - 1] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - upper[i] * rhs[i + 1]) / diag[i];
    }
}

pub fn natural_cubic_spline(knot_times: &[f64], knot_values: &[Vec<f64>]) -> Result<SplinePath> {
    let n = knot_times.len();
    if n < 2 {
        return Err(Error::TooFewKnots(n));
    }
    if knot_values.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} knots but {} value vectors", knot_values.len())));
    }
    if let Some(i) = knot_times.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(Error::NonMonotonicKnots(i + 1));
    }
    let channels = knot_values[0].len();
    if knot_values.iter().any(|v| v.len() != channels) {
        return Err(Error::ShapeMismatch("knot vectors differ in length".into()));
    }
    if knot_times.iter().chain(knot_values.iter().flatten()).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("spline knots".into()));
    }
    let h: Vec<f64> = knot_times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut coeffs = vec![[0.0; 4]; (n - 1) * channels];
    for c in 0..channels {
        let y: Vec<f64> = knot_values.iter().map(|v| v[c]).collect();
        // second derivatives, zero at both ends
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag: Vec<f64> = (1..=k).map(|i| 2.0 * (h[i - 1] + h[i])).collect();
            let off: Vec<f64> = (1..k).map(|i| h[i]).collect();
            let mut rhs: Vec<f64> =
                (1..=k).map(|i| 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1])).collect();
            solve_tridiagonal(&off, &mut diag, &off, &mut rhs);
            m[1..=k].copy_from_slice(&rhs);
        }
        for i in 0..n - 1 {
            coeffs[i * channels + c] = [
                y[i],
                (y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
                m[i] / 2.0,
                (m[i + 1] - m[i]) / (6.0 * h[i]),
            ];
        }
    }
    Ok(SplinePath { knots: knot_times.to_vec(), channels, coeffs })
}

impl SplinePath {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    fn interval(&self, t: f64) -> usize {
        let n = self.knots.len();
        match self.knots.partition_point(|&k| k <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        }
    }

    fn poly(&self, i: usize, dt: f64, order: usize) -> Vec<f64> {
        self.coeffs[i * self.channels..(i + 1) * self.channels]
            .iter()
            .map(|&[a, b, c, d]| match order {
                0 => a + dt * (b + dt * (c + dt * d)),
                1 => b + dt * (2.0 * c + 3.0 * dt * d),
                _ => 2.0 * c + 6.0 * d * dt,
            })
            .collect()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let (t0, t1) = (self.start(), self.end());
        if t < t0 {
            let v = self.poly(0, 0.0, 0);
            let s = self.poly(0, 0.0, 1);
            return v.iter().zip(s).map(|(v, s)| v + s * (t - t0)).collect();
        }
        if t > t1 {
            let i = self.knots.len() - 2;
            let h = t1 - self.knots[i];
            let v = self.poly(i, h, 0);
            let s = self.poly(i, h, 1);
            return v.iter().zip(s).map(|(v, s)| v + s * (t - t1)).collect();
        }
        let i = self.interval(t);
        self.poly(i, t - self.knots[i], 0)
    }

    pub fn derivative(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.start(), self.end());
        let i = self.interval(t);
        self.poly(i, t - self.knots[i], 1)
    }

    /// Second derivative; zero in the linear extrapolation regions.
    pub fn second_derivative(&self, t: f64) -> Vec<f64> {
        if t < self.start() || t > self.end() {
            return vec![0.0; self.channels];
        }
        let i = self.interval(t);
        self.poly(i, t - self.knots[i], 2)
    }

    /// Second derivative at knot `k` from the left and right intervals.
    pub fn second_derivative_jump(&self, k: usize) -> Vec<f64> {
        let left = self.poly(k - 1, self.knots[k] - self.knots[k - 1], 2);
        let right = self.poly(k, 0.0, 2);
        left.iter().zip(right).map(|(l, r)| l - r).collect()
    }
}

pub fn spline_eval(path: &SplinePath, t: f64) -> Vec<f64> {
    path.eval(t)
}

pub fn spline_derivative(path: &SplinePath, t: f64) -> Vec<f64> {
    path.derivative(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(path: &SplinePath, t: f64) -> f64 {
        path.eval(t)[0]
    }

    #[test]
    fn two_knots_are_linear() {
        let p = natural_cubic_spline(&[1.0, 3.0], &[vec![2.0], vec![6.0]]).unwrap();
        for t in [1.0, 1.5, 2.0, 2.7, 3.0] {
            assert!((scalar(&p, t) - (2.0 + 2.0 * (t - 1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn line_data_is_reproduced() {
        let t = [0.0, 0.3, 1.1, 1.2, 2.5, 4.0];
        let v: Vec<Vec<f64>> = t.iter().map(|x| vec![3.0 * x - 1.0, -x]).collect();
        let p = natural_cubic_spline(&t, &v).unwrap();
        for w in t.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let e = p.eval(mid);
            assert!((e[0] - (3.0 * mid - 1.0)).abs() < 1e-10);
            assert!((e[1] + mid).abs() < 1e-10);
            assert!((p.derivative(mid)[0] - 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn hat_midpoint_matches_hand_solve() {
        // interior second derivative M1: 2(1+1)·M1 = 6((0-1) - (1-0)) = -12, so M1 = -3
        // S(0.5) = 0.5·b + 0.125·d with b = 1 - (0 + M1)/6 = 1.5, d = M1/6 = -0.5
        let p = natural_cubic_spline(&[0.0, 1.0, 2.0], &[vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        assert!((scalar(&p, 0.5) - (0.75 - 0.0625)).abs() < 1e-14);
    }

    #[test]
    fn extrapolates_linearly() {
        let p = natural_cubic_spline(&[0.0, 1.0, 2.0], &[vec![0.0], vec![1.0], vec![0.0]]).unwrap();
        let s = p.derivative(2.0)[0];
        assert!((scalar(&p, 3.5) - (0.0 + s * 1.5)).abs() < 1e-12);
        let s0 = p.derivative(0.0)[0];
        assert!((scalar(&p, -1.0) + s0).abs() < 1e-12);
    }

    #[test]
    fn natural_boundaries_and_derivative_oracle() {
        let t = [0.0, 0.4, 0.9, 1.7, 2.0];
        let v: Vec<Vec<f64>> = t.iter().map(|x: &f64| vec![x.sin() * 3.0]).collect();
        let p = natural_cubic_spline(&t, &v).unwrap();
        assert!(p.second_derivative(0.0)[0].abs() < 1e-8);
        assert!(p.second_derivative(2.0)[0].abs() < 1e-8);
        let h = 1e-5;
        for x in [0.1, 0.55, 1.3, 1.95] {
            let fd = (scalar(&p, x + h) - scalar(&p, x - h)) / (2.0 * h);
            assert!((fd - p.derivative(x)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(natural_cubic_spline(&[0.0], &[vec![1.0]]), Err(Error::TooFewKnots(1))));
        assert!(matches!(
            natural_cubic_spline(&[0.0, 1.0, 1.0], &[vec![1.0], vec![1.0], vec![2.0]]),
            Err(Error::NonMonotonicKnots(2))
        ));
    }
}
