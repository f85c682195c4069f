use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{self, Dims, Dual, Expr, Slots, Var};
use crate::real::Real;

/// A scalar coefficient function over the flat variable vector `[t, x, y, z, u]`
/// together with its derivatives.
pub trait ScalarFn<T: Real>: Send + Sync + fmt::Debug {
    fn value(&self, p: &[T]) -> Result<T>;

    /// Writes the full gradient into `grad` (length = number of slots) and returns the value.
    fn gradient(&self, p: &[T], grad: &mut [T]) -> Result<T>;

    /// `dirᵀ ∇² f(p) dir`.
    fn second_directional(&self, p: &[T], dir: &[T]) -> Result<T>;

    /// Third directional derivative `D³f(p)[dir, dir, dir]`.
    fn third_directional(&self, _p: &[T], _dir: &[T]) -> Result<T> {
        Err(Error::MissingDerivative(format!("third derivative of {}", self.label())))
    }

    /// Structurally zero everywhere.
    fn is_zero(&self) -> bool {
        false
    }

    fn label(&self) -> String;
}

pub type Coef<T> = Arc<dyn ScalarFn<T>>;

/// Expression-defined coefficient, differentiated by nested dual numbers.
#[derive(Debug, Clone)]
pub struct ExprFn {
    dims: Dims,
    expr: Expr,
    text: String,
    used: Vec<usize>,
}

impl ExprFn {
    pub fn parse(text: &str, dims: Dims) -> Result<Self> {
        let expr = expr::parse(text, &dims)?;
        let mut used = Vec::new();
        expr.for_each_var(&mut |v| {
            let s = dims.slot(v);
            if !used.contains(&s) {
                used.push(s);
            }
        });
        used.sort_unstable();
        Ok(ExprFn { dims, expr, text: text.to_string(), used })
    }

    /// Parses and checks that only variables of the allowed kinds appear.
    pub fn parse_restricted(text: &str, dims: Dims, allowed: &[VarKind], path: &str) -> Result<Self> {
        let f = Self::parse(text, dims)?;
        for &slot in &f.used {
            let kind = VarKind::of(dims.var_at(slot).expect("slot in range"));
            if !allowed.contains(&kind) {
                return Err(Error::schema(
                    path,
                    format!("variable `{}` is not an argument of this coefficient", dims.name(dims.var_at(slot).unwrap())),
                ));
            }
        }
        Ok(f)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Argument group of a variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    T,
    X,
    Y,
    Z,
    U,
}

impl VarKind {
    pub fn of(v: Var) -> Self {
        match v {
            Var::T => VarKind::T,
            Var::X(_) => VarKind::X,
            Var::Y(_) => VarKind::Y,
            Var::Z(..) => VarKind::Z,
            Var::U(_) => VarKind::U,
        }
    }
}

impl<T: Real> ScalarFn<T> for ExprFn {
    fn value(&self, p: &[T]) -> Result<T> {
        Ok(self.expr.eval(&Slots { dims: &self.dims, values: p })?)
    }

    fn gradient(&self, p: &[T], grad: &mut [T]) -> Result<T> {
        grad.iter_mut().for_each(|g| *g = T::zero());
        if self.used.is_empty() {
            return self.value(p);
        }
        let mut seeded: Vec<Dual<T>> = p.iter().map(|&x| Dual::new(x, T::zero())).collect();
        let mut value = T::zero();
        for &s in &self.used {
            seeded[s].eps = T::one();
            let d = self.expr.eval_with::<T, Dual<T>, _>(&Slots { dims: &self.dims, values: &seeded })?;
            seeded[s].eps = T::zero();
            grad[s] = d.eps;
            value = d.re;
        }
        Ok(value)
    }

    fn second_directional(&self, p: &[T], dir: &[T]) -> Result<T> {
        Ok(self.expr.eval_dual2(&self.dims, p, dir)?.second())
    }

    fn third_directional(&self, p: &[T], dir: &[T]) -> Result<T> {
        Ok(self.expr.eval_dual3(&self.dims, p, dir)?.third())
    }

    fn is_zero(&self) -> bool {
        self.expr.is_literal_zero()
    }

    fn label(&self) -> String {
        self.text.clone()
    }
}

type ValueFn<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;
type FillFn<T> = Box<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// Coefficient with hand-written derivatives.
pub struct ClosedForm<T> {
    label: String,
    value: ValueFn<T>,
    gradient: FillFn<T>,
    /// Full `slots × slots` Hessian, row-major.
    hessian: Option<FillFn<T>>,
    third_vanishes: bool,
    zero: bool,
}

impl<T> fmt::Debug for ClosedForm<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedForm").field("label", &self.label).finish_non_exhaustive()
    }
}

impl<T: Real> ClosedForm<T> {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(&[T]) -> T + Send + Sync + 'static,
        gradient: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        ClosedForm {
            label: label.into(),
            value: Box::new(value),
            gradient: Box::new(gradient),
            hessian: None,
            third_vanishes: false,
            zero: false,
        }
    }

    pub fn with_hessian(mut self, hessian: impl Fn(&[T], &mut [T]) + Send + Sync + 'static) -> Self {
        self.hessian = Some(Box::new(hessian));
        self
    }

    pub fn zero() -> Self {
        let mut c = Self::quadratic("0", 0.0, &[], &[]);
        c.zero = true;
        c
    }

    /// `c + Σ a_s p_s + ½ Σ b_s p_s²` over slots.
    pub fn quadratic(label: impl Into<String>, constant: f64, linear: &[(usize, f64)], diag: &[(usize, f64)]) -> Self {
        let c = T::lit(constant);
        let lin: Vec<(usize, T)> = linear.iter().map(|&(s, a)| (s, T::lit(a))).collect();
        let quad: Vec<(usize, T)> = diag.iter().map(|&(s, b)| (s, T::lit(b))).collect();
        let (lin_v, quad_v) = (lin.clone(), quad.clone());
        let (lin_g, quad_g) = (lin, quad.clone());
        let half = T::lit(0.5);
        let mut cf = ClosedForm::new(
            label,
            move |p: &[T]| {
                let mut v = c;
                for &(s, a) in &lin_v {
                    v += a * p[s];
                }
                for &(s, b) in &quad_v {
                    v += half * b * p[s] * p[s];
                }
                v
            },
            move |p: &[T], g: &mut [T]| {
                g.iter_mut().for_each(|x| *x = T::zero());
                for &(s, a) in &lin_g {
                    g[s] += a;
                }
                for &(s, b) in &quad_g {
                    g[s] += b * p[s];
                }
            },
        )
        .with_hessian(move |_p: &[T], h: &mut [T]| {
            h.iter_mut().for_each(|x| *x = T::zero());
            let n = (h.len() as f64).sqrt() as usize;
            for &(s, b) in &quad {
                h[s * n + s] += b;
            }
        });
        cf.third_vanishes = true;
        cf
    }
}

impl<T: Real> ScalarFn<T> for ClosedForm<T> {
    fn value(&self, p: &[T]) -> Result<T> {
        let v = (self.value)(p);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(expr::ExprError::NonFinite { op: "closed form" }.into())
        }
    }

    fn gradient(&self, p: &[T], grad: &mut [T]) -> Result<T> {
        (self.gradient)(p, grad);
        self.value(p)
    }

    fn second_directional(&self, p: &[T], dir: &[T]) -> Result<T> {
        let h = self
            .hessian
            .as_ref()
            .ok_or_else(|| Error::MissingDerivative(format!("second derivative of {}", self.label)))?;
        let n = p.len();
        let mut buf = vec![T::zero(); n * n];
        h(p, &mut buf);
        let mut acc = T::zero();
        for i in 0..n {
            if dir[i] == T::zero() {
                continue;
            }
            for j in 0..n {
                acc += dir[i] * buf[i * n + j] * dir[j];
            }
        }
        Ok(acc)
    }

    fn third_directional(&self, _p: &[T], _dir: &[T]) -> Result<T> {
        if self.third_vanishes {
            Ok(T::zero())
        } else {
            Err(Error::MissingDerivative(format!("third derivative of {}", self.label)))
        }
    }

    fn is_zero(&self) -> bool {
        self.zero
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// The coefficient octet of the controlled system, one scalar function per component.
#[derive(Debug, Clone)]
pub struct Coefficients<T: Real> {
    /// Drift, `n` components.
    pub f: Vec<Coef<T>>,
    /// Diffusion, `n × d` row-major.
    pub sigma: Vec<Coef<T>>,
    /// Backward driver, `m` components.
    pub g: Vec<Coef<T>>,
    /// Terminal map, `m` components.
    pub psi: Vec<Coef<T>>,
    pub l: Coef<T>,
    pub beta: Coef<T>,
    pub gamma: Coef<T>,
    pub phi: Coef<T>,
}

impl<T: Real> Coefficients<T> {
    pub fn sigma_is_zero(&self) -> bool {
        self.sigma.iter().all(|s| s.is_zero())
    }

    /// `(name, function)` pairs for every component.
    pub fn named(&self, dims: &Dims) -> Vec<(String, Coef<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.f.iter().enumerate() {
            out.push((format!("f[{}]", i + 1), c.clone()));
        }
        for (r, c) in self.sigma.iter().enumerate() {
            out.push((format!("sigma[{},{}]", r / dims.d + 1, r % dims.d + 1), c.clone()));
        }
        for (i, c) in self.g.iter().enumerate() {
            out.push((format!("g[{}]", i + 1), c.clone()));
        }
        for (i, c) in self.psi.iter().enumerate() {
            out.push((format!("psi[{}]", i + 1), c.clone()));
        }
        out.push(("l".into(), self.l.clone()));
        out.push(("beta".into(), self.beta.clone()));
        out.push(("gamma".into(), self.gamma.clone()));
        out.push(("phi".into(), self.phi.clone()));
        out
    }
}

/// Scratch-buffer evaluator for the coefficient bundle at one point.
///
/// The point is the flat `[t, x, y, z, u]` vector; callers set the pieces and
/// then ask for values or derivative blocks.
pub struct Evaluator<'a, T: Real> {
    pub dims: Dims,
    pub coef: &'a Coefficients<T>,
    point: Vec<T>,
    grad: Vec<T>,
    dir: Vec<T>,
}

/// Derivative blocks of the flat variable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    T,
    X,
    Y,
    Z,
    U,
}

impl<'a, T: Real> Evaluator<'a, T> {
    pub fn new(dims: Dims, coef: &'a Coefficients<T>) -> Self {
        let s = dims.slots();
        Evaluator { dims, coef, point: vec![T::zero(); s], grad: vec![T::zero(); s], dir: vec![T::zero(); s] }
    }

    pub fn point(&self) -> &[T] {
        &self.point
    }

    fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        let d = &self.dims;
        match b {
            Block::T => 0..1,
            Block::X => d.x_offset()..d.y_offset(),
            Block::Y => d.y_offset()..d.z_offset(),
            Block::Z => d.z_offset()..d.u_offset(),
            Block::U => d.u_offset()..d.slots(),
        }
    }

    /// Sets every argument. `y` and `z` may be empty, meaning zero.
    pub fn set(&mut self, t: T, x: &[T], y: &[T], z: &[T], u: &[T]) {
        self.point[0] = t;
        self.set_block(Block::X, x);
        self.set_block(Block::Y, y);
        self.set_block(Block::Z, z);
        self.set_block(Block::U, u);
    }

    pub fn set_block(&mut self, b: Block, v: &[T]) {
        let r = self.block_range(b);
        if v.is_empty() {
            self.point[r].iter_mut().for_each(|p| *p = T::zero());
        } else {
            self.point[r].copy_from_slice(v);
        }
    }

    pub fn value(&self, c: &Coef<T>) -> Result<T> {
        c.value(&self.point)
    }

    pub fn values(&self, cs: &[Coef<T>], out: &mut [T]) -> Result<()> {
        for (o, c) in out.iter_mut().zip(cs) {
            *o = c.value(&self.point)?;
        }
        Ok(())
    }

    /// Gradient of one component restricted to `block`.
    pub fn grad(&mut self, c: &Coef<T>, block: Block, out: &mut [T]) -> Result<T> {
        let v = c.gradient(&self.point, &mut self.grad)?;
        let r = self.block_range(block);
        out.copy_from_slice(&self.grad[r]);
        Ok(v)
    }

    /// Jacobian of a vector function with respect to `block`, `cs.len() × |block|` row-major.
    pub fn jacobian(&mut self, cs: &[Coef<T>], block: Block, out: &mut [T]) -> Result<()> {
        let r = self.block_range(block);
        let w = r.len();
        for (i, c) in cs.iter().enumerate() {
            c.gradient(&self.point, &mut self.grad)?;
            out[i * w..(i + 1) * w].copy_from_slice(&self.grad[r.clone()]);
        }
        Ok(())
    }

    /// Hessian in `x`, `n × n`, by polarisation of second directional derivatives.
    pub fn hessian_x(&mut self, c: &Coef<T>, out: &mut [T]) -> Result<()> {
        let n = self.dims.n;
        let off = self.dims.x_offset();
        let mut diag = vec![T::zero(); n];
        for i in 0..n {
            self.dir.iter_mut().for_each(|d| *d = T::zero());
            self.dir[off + i] = T::one();
            diag[i] = c.second_directional(&self.point, &self.dir)?;
            out[i * n + i] = diag[i];
        }
        let half = T::lit(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                self.dir.iter_mut().for_each(|d| *d = T::zero());
                self.dir[off + i] = T::one();
                self.dir[off + j] = T::one();
                let both = c.second_directional(&self.point, &self.dir)?;
                let hij = half * (both - diag[i] - diag[j]);
                out[i * n + j] = hij;
                out[j * n + i] = hij;
            }
        }
        Ok(())
    }

    /// `aᵀ ∇²_x f b`, the mixed second derivative in x.
    pub fn second_x(&mut self, c: &Coef<T>, a: &[T], b: &[T]) -> Result<T> {
        let n = self.dims.n;
        let mut h = vec![T::zero(); n * n];
        self.hessian_x(c, &mut h)?;
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                acc += a[i] * h[i * n + j] * b[j];
            }
        }
        Ok(acc)
    }

    /// `D³_x f[a, b, b]` from directional third derivatives:
    /// `(D³(a+b) + D³(a-b) - 2 D³(a)) / 6`.
    pub fn third_x_abb(&mut self, c: &Coef<T>, a: &[T], b: &[T]) -> Result<T> {
        let off = self.dims.x_offset();
        let n = self.dims.n;
        let eval = |sa: T, sb: T, this: &mut Self| -> Result<T> {
            this.dir.iter_mut().for_each(|d| *d = T::zero());
            for i in 0..n {
                this.dir[off + i] = sa * a[i] + sb * b[i];
            }
            c.third_directional(&this.point, &this.dir)
        };
        let one = T::one();
        let plus = eval(one, one, self)?;
        let minus = eval(one, -one, self)?;
        let pure = eval(one, T::zero(), self)?;
        Ok((plus + minus - pure - pure) / T::lit(6.0))
    }
}
