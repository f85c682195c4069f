//! Least-squares projection onto polynomials of the state, for conditional
//! expectations in the regression backward solvers.

use crate::error::{Error, Result};
use crate::real::Real;

/// Ridge added to the diagonal of the normalised normal equations.
pub const RIDGE: f64 = 1e-10;

/// Monomials of total degree `≤ degree` in `n` standardised variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basis {
    n: usize,
    exps: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(n: usize, degree: usize) -> Self {
        let mut exps = Vec::new();
        for total in 0..=degree as u32 {
            let mut cur = vec![0u32; n];
            push_degree(&mut exps, &mut cur, 0, total);
        }
        Basis { n, exps }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn eval<T: Real>(&self, z: &[T], out: &mut [T]) {
        for (o, e) in out.iter_mut().zip(&self.exps) {
            let mut v = T::one();
            for (i, &k) in e.iter().enumerate() {
                if k > 0 {
                    v *= z[i].powi(k as i32);
                }
            }
            *o = v;
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, at: usize, left: u32) {
    if cur.is_empty() {
        if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if at + 1 == cur.len() {
        cur[at] = left;
        out.push(cur.clone());
        cur[at] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[at] = k;
        push_degree(out, cur, at + 1, left - k);
    }
    cur[at] = 0;
}

/// A fitted projection: standardisation of the regressors plus coefficients
/// for each of `r` targets.
#[derive(Debug, Clone)]
pub struct Fit<T> {
    basis: Basis,
    mean: Vec<T>,
    inv_scale: Vec<T>,
    /// `B × r`.
    coef: Vec<T>,
    r: usize,
}

impl<T: Real> Fit<T> {
    /// Regresses `targets` (`M × r`) on `basis(x_p)`; `x(p)` yields the regressors of sample `p`.
    pub fn new<'a>(basis: &Basis, samples: usize, x: impl Fn(usize) -> &'a [T], targets: &[T], r: usize, step: usize) -> Result<Self>
    where
        T: 'a,
    {
        let n = basis.n();
        let b = basis.len();
        let m = T::from_usize_lossy(samples);
        let mut mean = vec![T::zero(); n];
        for p in 0..samples {
            for (a, &v) in mean.iter_mut().zip(x(p)) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![T::zero(); n];
        for p in 0..samples {
            for (i, &v) in x(p).iter().enumerate() {
                var[i] += (v - mean[i]) * (v - mean[i]);
            }
        }
        // a coordinate with no spread carries no information: map it to 0
        let inv_scale: Vec<T> = var
            .iter()
            .zip(&mean)
            .map(|(&s, &mu)| {
                let sd = (s / m).sqrt();
                if sd > T::lit(1e-12) * (T::one() + mu.abs()) {
                    T::one() / sd
                } else {
                    T::zero()
                }
            })
            .collect();

        let mut a = vec![T::zero(); b * b];
        let mut rhs = vec![T::zero(); b * r];
        let mut phi = vec![T::zero(); b];
        let mut z = vec![T::zero(); n];
        for p in 0..samples {
            standardise(x(p), &mean, &inv_scale, &mut z);
            basis.eval(&z, &mut phi);
            for i in 0..b {
                for j in i..b {
                    a[i * b + j] += phi[i] * phi[j];
                }
                for t in 0..r {
                    rhs[i * r + t] += phi[i] * targets[p * r + t];
                }
            }
        }
        let ridge = T::lit(RIDGE);
        for i in 0..b {
            for j in i..b {
                let v = a[i * b + j] / m;
                a[i * b + j] = v;
                a[j * b + i] = v;
            }
            a[i * b + i] += ridge;
        }
        rhs.iter_mut().for_each(|v| *v /= m);
        if !cholesky_solve(&mut a, b, &mut rhs, r) {
            return Err(Error::SingularRegression(step));
        }
        Ok(Fit { basis: basis.clone(), mean, inv_scale, coef: rhs, r })
    }

    pub fn predict(&self, x: &[T], out: &mut [T]) {
        let b = self.basis.len();
        let mut z = vec![T::zero(); x.len()];
        let mut phi = vec![T::zero(); b];
        standardise(x, &self.mean, &self.inv_scale, &mut z);
        self.basis.eval(&z, &mut phi);
        for t in 0..self.r {
            out[t] = (0..b).map(|i| phi[i] * self.coef[i * self.r + t]).sum();
        }
    }
}

fn standardise<T: Real>(x: &[T], mean: &[T], inv_scale: &[T], out: &mut [T]) {
    for i in 0..x.len() {
        out[i] = (x[i] - mean[i]) * inv_scale[i];
    }
}

/// Solves `A X = B` in place for symmetric positive definite `A` (`n × n`) and
/// `B` (`n × r`). Returns `false` when a pivot is not positive.
pub fn cholesky_solve<T: Real>(a: &mut [T], n: usize, b: &mut [T], r: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for t in 0..r {
        for i in 0..n {
            let mut s = b[i * r + t];
            for k in 0..i {
                s -= a[i * n + k] * b[k * r + t];
            }
            b[i * r + t] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * r + t];
            for k in (i + 1)..n {
                s -= a[k * n + i] * b[k * r + t];
            }
            b[i * r + t] = s / a[i * n + i];
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::new(1, 2).len(), 3);
        assert_eq!(Basis::new(2, 2).len(), 6);
        assert_eq!(Basis::new(3, 3).len(), 20);
        assert_eq!(Basis::new(2, 0).len(), 1);
    }

    #[test]
    fn recovers_a_quadratic() {
        let xs: Vec<[f64; 1]> = (0..200).map(|i| [i as f64 / 50.0 - 2.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x[0] + 0.5 * x[0] * x[0]).collect();
        let fit = Fit::new(&Basis::new(1, 2), xs.len(), |p| &xs[p][..], &ys, 1, 0).unwrap();
        let mut out = [0.0];
        fit.predict(&[0.7], &mut out);
        assert!((out[0] - (1.0 - 1.4 + 0.245)).abs() < 1e-8);
    }

    #[test]
    fn constant_regressor_does_not_break() {
        let xs = vec![[3.0]; 10];
        let ys: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = Fit::new(&Basis::new(1, 2), 10, |p| &xs[p][..], &ys, 1, 0).unwrap();
        let mut out = [0.0];
        fit.predict(&[3.0], &mut out);
        assert!((out[0] - 4.5).abs() < 1e-8);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        let mut b = vec![1.0, 1.0];
        assert!(!cholesky_solve(&mut a, 2, &mut b, 1));
    }
}
