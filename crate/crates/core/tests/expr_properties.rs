//! Randomized expression corpus: dual-number derivatives against central finite
//! differences, print/parse round trips and evaluation purity.

use proptest::prelude::*;
use varhor::expr::{parse, BinOp, Dims, Expr, Func, Slots, Var};

const DIMS: Dims = Dims::new(1, 1, 1, 1);

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    Expr::Bin(op, Box::new(a), Box::new(b))
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

/// `c + a·a`, strictly positive for any finite `a`.
fn lifted(c: f64, a: Expr) -> Expr {
    bin(BinOp::Add, num(c), bin(BinOp::Mul, a.clone(), a))
}

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        Just(Expr::Var(Var::T)),
        Just(Expr::Var(Var::X(0))),
        Just(Expr::Var(Var::Y(0))),
        Just(Expr::Var(Var::Z(0, 0))),
        Just(Expr::Var(Var::U(0))),
        (1u32..2000).prop_map(|k| num(k as f64 / 1000.0)),
    ]
}

/// Trees of depth at most 6 whose every operation stays inside its smooth domain
/// for arguments of moderate size.
fn corpus() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(6, 48, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| bin(BinOp::Add, a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| bin(BinOp::Sub, a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| bin(BinOp::Mul, call(Func::Sin, a), b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| bin(BinOp::Div, a, lifted(1.5, b))),
            inner.clone().prop_map(|a| bin(BinOp::Pow, call(Func::Cos, a), num(2.0))),
            inner.clone().prop_map(|a| bin(BinOp::Pow, lifted(0.5, a), num(0.5))),
            inner.clone().prop_map(|a| call(Func::Exp, call(Func::Sin, a))),
            inner.clone().prop_map(|a| call(Func::Log, lifted(2.0, a))),
            inner.clone().prop_map(|a| call(Func::Sqrt, lifted(1.0, a))),
            inner.clone().prop_map(|a| call(Func::Sin, a)),
            inner.clone().prop_map(|a| call(Func::Cos, a)),
            inner.clone().prop_map(|a| call(Func::Abs, bin(BinOp::Add, num(2.0), call(Func::Cos, a)))),
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
        ]
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, 5)
}

fn eval(e: &Expr, p: &[f64]) -> f64 {
    e.eval(&Slots { dims: &DIMS, values: p }).unwrap()
}

fn shifted(p: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    p.iter().zip(dir).map(|(a, b)| a + h * b).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn first_derivative_matches_central_difference(e in corpus(), p in point(), dir in point()) {
        let h = 1e-6;
        let (_, d1, _) = e.directional(&DIMS, &p, &dir, 1).unwrap();
        let fd = (eval(&e, &shifted(&p, &dir, h)) - eval(&e, &shifted(&p, &dir, -h))) / (2.0 * h);
        prop_assert!(close(d1, fd, 1e-6), "{} : ad {d1} fd {fd}", e.display(&DIMS));
    }

    #[test]
    fn second_derivative_matches_central_difference(e in corpus(), p in point(), dir in point()) {
        let h = 1e-4;
        let (v, _, d2) = e.directional(&DIMS, &p, &dir, 2).unwrap();
        let d2 = d2.unwrap();
        let fd = (eval(&e, &shifted(&p, &dir, h)) - 2.0 * v + eval(&e, &shifted(&p, &dir, -h))) / (h * h);
        prop_assert!(close(d2, fd, 1e-4), "{} : ad {d2} fd {fd}", e.display(&DIMS));
    }

    #[test]
    fn print_then_parse_is_identity(e in corpus()) {
        let text = e.display(&DIMS).to_string();
        let back = parse(&text, &DIMS).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn evaluation_is_pure(e in corpus(), p in point()) {
        let a = eval(&e, &p);
        let b = eval(&e, &p);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn derivative_of_mixed_expression_matches_difference() {
    let e = parse("x1*y1 + sin(u1)", &DIMS).unwrap();
    // slots: t, x1, y1, z11, u1
    let p = [0.0, 0.7, -0.2, 0.0, 0.4];
    let dir = [0.0, 1.0, 0.0, 0.0, 0.0];
    let (_, d1, _) = e.directional(&DIMS, &p, &dir, 1).unwrap();
    let h = 1e-6;
    let fd = (eval(&e, &shifted(&p, &dir, h)) - eval(&e, &shifted(&p, &dir, -h))) / (2.0 * h);
    assert!((d1 + 0.2).abs() < 1e-15);
    assert!((d1 - fd).abs() <= 1e-6 * fd.abs());
}

#[test]
fn evaluation_at_exponential_point() {
    let e = parse("x1+u1", &DIMS).unwrap();
    let t: f64 = 0.3;
    let p = [t, t.exp() - 1.0, 0.0, 0.0, 1.0];
    assert!((eval(&e, &p) - 1.349_858_807_576_003).abs() < 1e-12);
}
