use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central finite difference with step `eps`:
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_components(f, x, eps, &all)
}

/// As [`grad_check`], restricted to the listed flat components of `x`.
pub fn grad_check_components<F>(f: F, x: &Tensor, eps: f64, components: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true))?;
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let v = tape.leaf(probe)?;
        let out = f(&tape, v)?;
        tape.scalar(out)
    };

    let mut worst = 0.0f64;
    for &i in components {
        if i >= x.numel() {
            return Err(Error::contract(format!("component {i} out of range")));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_closed_form() {
        let x = Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(x.clone().with_grad(true)).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0, 6.0]);

        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec([4], vec![0.3, -1.5, 2.0, 7.0]).unwrap();
        let err = grad_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
