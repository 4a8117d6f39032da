use super::{AutodiffError, Tape, Tensor, Var};

/// Compare tape gradients of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`. Non-smooth points (ReLU
/// kinks, max-pool ties) within `eps` of the input give meaningless results
/// and should be avoided by the caller.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.data().to_vec(),
        None => alloc::vec![0.0; x.len()],
    };
    let eval = |probe: &Tensor| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone(), false);
        let y = f(&mut t, v)?;
        let s = t.value(y).shape();
        t.value(y).item().map(|v| v as f64).ok_or(AutodiffError::NotScalar(s))
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + eps;
        let minus = orig - eps;
        probe.data_mut()[i] = plus;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (plus as f64 - minus as f64);
        let ad = analytic[i] as f64;
        let err = (ad - numeric).abs() / (ad.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
