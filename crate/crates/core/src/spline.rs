//! Uniform Catmull-Rom splines used to vary phantom anatomy along z.

use serde::{Deserialize, Serialize};

/// Catmull-Rom spline through equally spaced knots, clamped outside its range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spline {
    pub start: f64,
    pub step: f64,
    pub knots: Vec<f64>,
}

impl Spline {
    pub fn new(start: f64, step: f64, knots: Vec<f64>) -> Self {
        assert!(step > 0.0 && !knots.is_empty());
        Self { start, step, knots }
    }

    pub fn end(&self) -> f64 {
        self.start + self.step * (self.knots.len() - 1) as f64
    }

    fn knot(&self, i: isize) -> f64 {
        let last = self.knots.len() as isize - 1;
        self.knots[i.clamp(0, last) as usize]
    }

    /// Cubic coefficients `c0 + c1 t + c2 t^2 + c3 t^3` of segment `i`.
    fn segment(&self, i: isize) -> [f64; 4] {
        let (p0, p1, p2, p3) = (self.knot(i - 1), self.knot(i), self.knot(i + 1), self.knot(i + 2));
        [
            p1,
            0.5 * (p2 - p0),
            0.5 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3),
            0.5 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3),
        ]
    }

    pub fn eval(&self, u: f64) -> f64 {
        if self.knots.len() == 1 {
            return self.knots[0];
        }
        let s = ((u - self.start) / self.step).clamp(0.0, (self.knots.len() - 1) as f64);
        let i = (s.floor() as isize).min(self.knots.len() as isize - 2);
        let t = s - i as f64;
        let c = self.segment(i);
        c[0] + t * (c[1] + t * (c[2] + t * c[3]))
    }

    /// Upper bound on `|ds/du|` over the whole domain.
    pub fn lipschitz(&self) -> f64 {
        (0..self.knots.len().saturating_sub(1) as isize)
            .map(|i| {
                let c = self.segment(i);
                (c[1].abs() + 2.0 * c[2].abs() + 3.0 * c[3].abs()) / self.step
            })
            .fold(0.0, f64::max)
    }

    /// Upper bound on `|s(u)|`; the cubic is bounded by the sum of its coefficient magnitudes.
    pub fn abs_bound(&self) -> f64 {
        if self.knots.len() == 1 {
            return self.knots[0].abs();
        }
        (0..self.knots.len() as isize - 1)
            .map(|i| self.segment(i).iter().map(|c| c.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots() {
        let s = Spline::new(-10.0, 5.0, vec![1.0, 4.0, -2.0, 3.0, 0.5]);
        for (i, k) in s.knots.iter().enumerate() {
            assert!((s.eval(-10.0 + 5.0 * i as f64) - k).abs() < 1e-12);
        }
        assert_eq!(s.eval(-100.0), 1.0);
        assert_eq!(s.eval(100.0), 0.5);
    }

    #[test]
    fn lipschitz_bounds_finite_differences() {
        let s = Spline::new(0.0, 30.0, vec![3.0, -1.0, 7.0, 2.0, 2.5, 9.0]);
        let l = s.lipschitz();
        let mut u = -5.0;
        while u < 160.0 {
            let d = (s.eval(u + 0.01) - s.eval(u)).abs() / 0.01;
            assert!(d <= l + 1e-9, "slope {d} exceeds bound {l} at {u}");
            assert!(s.eval(u).abs() <= s.abs_bound() + 1e-12);
            u += 0.37;
        }
    }
}
