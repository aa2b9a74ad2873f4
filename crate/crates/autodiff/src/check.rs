use crate::{AutodiffError, Graph, Real, Tensor, Var};

fn eval_loss<T, E, F>(x: &Tensor<T>, f: &F) -> Result<T, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f(&mut g, xv)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(AutodiffError::Dimension("gradient_check: f must be scalar".into()).into());
    }
    Ok(v.item())
}

/// Compares the tape gradient of the scalar function `f` at `x` with
/// central finite differences and returns the largest relative error.
///
/// Each coordinate's error is `|tape - fd| / max(|tape|, |fd|, s)` where
/// `s` is 1e-3 of the largest gradient magnitude, so coordinates that are
/// negligible next to the rest of the gradient are compared on that
/// absolute scale instead of blowing up the ratio.
pub fn gradient_check<T, E, F>(x: &Tensor<T>, h: T, f: F) -> Result<T, E>
where
    T: Real,
    E: From<AutodiffError>,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let tape: Vec<T> = match grads.get(xv) {
        Some(v) => v.to_vec(),
        None => vec![T::zero(); x.numel()],
    };

    let two_h = h + h;
    let mut fd = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_loss(&probe, &f)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_loss(&probe, &f)?;
        probe.data_mut()[i] = orig;
        fd.push((plus - minus) / two_h);
    }

    let scale = tape
        .iter()
        .chain(&fd)
        .fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = (scale * T::from_f64_lossy(1e-3)).max(T::min_positive_value());
    Ok(tape
        .iter()
        .zip(&fd)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), |m, v| m.max(v)))
}
