use segforge_core::autodiff::{finite_diff_check, AutodiffError, Tape, Tensor, Var};

/// Finite-difference check of `Σ r·(y(x) − y(x₀))` for `(y, r) = f(x)`.
///
/// Subtracting the base-point output keeps the loss near zero, so rounding
/// the scalar to f32 does not swamp the central differences.
pub fn centered_check<F>(f: F, x: &Tensor, eps: f32) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<(Var, Tensor), AutodiffError>,
{
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let (y, _) = f(&mut t, v).unwrap();
    let base = t.value(y).clone();
    finite_diff_check(
        |t, v| {
            let (y, r) = f(t, v)?;
            let b = t.constant(base.clone());
            let d = t.sub(y, b)?;
            let rv = t.constant(r.clone());
            let p = t.mul(d, rv)?;
            t.sum(p)
        },
        x,
        eps,
    )
    .unwrap()
}

