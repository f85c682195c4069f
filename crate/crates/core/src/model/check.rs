use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Coef, ProblemSpec};
use crate::real::{relative_gap, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEntry {
    pub function: String,
    /// `"gradient"` or `"hessian_x"`.
    pub kind: &'static str,
    pub max_gap: f64,
    pub worst_point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub entries: Vec<DerivativeEntry>,
    pub tol: f64,
}

impl DerivativeReport {
    pub fn pass(&self) -> bool {
        self.first_failure().is_none()
    }

    pub fn first_failure(&self) -> Option<&DerivativeEntry> {
        self.entries.iter().find(|e| !(e.max_gap <= self.tol))
    }

    pub fn max_gap(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| if e.max_gap > m || e.max_gap.is_nan() { e.max_gap } else { m })
    }

    pub fn entry(&self, function: &str, kind: &str) -> Option<&DerivativeEntry> {
        self.entries.iter().find(|e| e.function == function && e.kind == kind)
    }
}

const CHECK_SEED: u64 = 0x00de_41a7;

/// Compares every bundled first derivative (all arguments) and the x-Hessians of
/// `psi`, `beta`, `phi` against central finite differences at `samples` random
/// points of a box around the initial state.
pub fn check_derivatives<T: Real>(spec: &ProblemSpec<T>, samples: usize, tol: f64) -> DerivativeReport {
    let dims = spec.dims;
    let slots = dims.slots();
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let points: Vec<Vec<T>> = (0..samples.max(1))
        .map(|_| {
            let mut p = vec![T::zero(); slots];
            p[0] = T::lit(rng.random::<f64>()) * spec.horizon;
            for i in 0..dims.n {
                p[dims.x_offset() + i] = spec.x0[i] + T::lit(rng.random_range(-1.0..1.0));
            }
            for s in dims.y_offset()..dims.u_offset() {
                p[s] = T::lit(rng.random_range(-1.0..1.0));
            }
            for c in 0..dims.k {
                let w: f64 = rng.random();
                p[dims.u_offset() + c] = spec.u_lo[c] + T::lit(w) * (spec.u_hi[c] - spec.u_lo[c]);
            }
            p
        })
        .collect();
    let x_dirs: Vec<Vec<T>> = (0..points.len())
        .map(|_| {
            let mut d = vec![T::zero(); slots];
            for i in 0..dims.n {
                d[dims.x_offset() + i] = T::lit(rng.random_range(-1.0..1.0));
            }
            d
        })
        .collect();

    // power-of-two steps keep the perturbed points exactly representable
    let eps = T::epsilon();
    let h1 = pow2(eps.cbrt());
    let h2 = pow2(eps.sqrt().sqrt());
    let second_order = ["beta", "phi"];

    let mut entries = Vec::new();
    for (name, c) in spec.coef.named(&dims) {
        let mut grad_entry = DerivativeEntry { function: name.clone(), kind: "gradient", max_gap: 0.0, worst_point: vec![] };
        let wants_hessian = name.starts_with("psi") || second_order.contains(&name.as_str());
        let mut hess_entry = DerivativeEntry { function: name.clone(), kind: "hessian_x", max_gap: 0.0, worst_point: vec![] };
        for (p, dir) in points.iter().zip(&x_dirs) {
            let gap = gradient_gap(&c, p, h1);
            record(&mut grad_entry, gap, p);
            if wants_hessian {
                record(&mut hess_entry, hessian_gap(&c, p, dir, h2), p);
            }
        }
        entries.push(grad_entry);
        if wants_hessian {
            entries.push(hess_entry);
        }
    }
    DerivativeReport { entries, tol }
}

fn record<T: Real>(e: &mut DerivativeEntry, gap: f64, p: &[T]) {
    // NaN is sticky: once seen it is the reported gap
    let worse = gap.is_nan() || gap > e.max_gap || e.worst_point.is_empty();
    if worse && !e.max_gap.is_nan() {
        e.max_gap = gap;
        e.worst_point = p.iter().map(|v| v.as_f64()).collect();
    }
}

fn pow2<T: Real>(x: T) -> T {
    T::lit(2.0).powi(x.log2().ceil().to_i32().unwrap_or(0))
}

fn gradient_gap<T: Real>(c: &Coef<T>, p: &[T], h: T) -> f64 {
    let mut grad = vec![T::zero(); p.len()];
    if c.gradient(p, &mut grad).is_err() {
        return f64::INFINITY;
    }
    let mut q = p.to_vec();
    let mut worst = 0.0f64;
    for s in 0..p.len() {
        let step = h * pow2(T::one().max(p[s].abs()));
        q[s] = p[s] + step;
        let up = c.value(&q);
        q[s] = p[s] - step;
        let down = c.value(&q);
        q[s] = p[s];
        let (Ok(up), Ok(down)) = (up, down) else {
            return f64::INFINITY;
        };
        let fd = (up - down) / (step + step);
        worst = worst.max(relative_gap(grad[s], fd).as_f64());
    }
    worst
}

fn hessian_gap<T: Real>(c: &Coef<T>, p: &[T], dir: &[T], h: T) -> f64 {
    let Ok(exact) = c.second_directional(p, dir) else {
        return f64::INFINITY;
    };
    let shifted = |s: T| -> Option<T> {
        let q: Vec<T> = p.iter().zip(dir).map(|(&a, &d)| a + s * d).collect();
        c.value(&q).ok()
    };
    let (Some(up), Some(mid), Some(down)) = (shifted(h), shifted(T::zero()), shifted(-h)) else {
        return f64::INFINITY;
    };
    let fd = (up - mid - mid + down) / (h * h);
    relative_gap(exact, fd).as_f64()
}
