use crate::diffcore::Tensor;
use crate::error::{OanError, Result};
use crate::scalar::Scalar;

/// `p ← p − lr·g` for every parameter. Nothing is modified if any gradient
/// is non-finite or mis-shaped.
pub fn sgd_step<T: Scalar>(params: &mut [(&str, &mut Tensor<T>)], grads: &[&[T]], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(OanError::config(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(OanError::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: (g.len(), 1),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OanError::Numeric(format!("gradient of {name}")));
        }
    }
    for ((_, p), g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.iter()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::<f64>::from_f64(1, 2, &[1.0, -2.0]).unwrap();
        let orig = p.clone();
        sgd_step(&mut [("p", &mut p)], &[&[0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, orig);
        sgd_step(&mut [("p", &mut p)], &[&[3.0, 4.0]], 0.0).unwrap();
        assert_eq!(p, orig);

        // d/dx ½x² = x at x = 1
        let mut x = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut [("x", &mut x)], &[&[1.0]], 0.1).unwrap();
        assert!((x.item() - 0.9).abs() < 1e-15);

        match sgd_step(&mut [("fc1.weight", &mut x)], &[&[f64::NAN]], 0.1) {
            Err(OanError::Numeric(m)) => assert!(m.contains("fc1.weight")),
            other => panic!("{other:?}"),
        }
        assert!((x.item() - 0.9).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn step_is_exact_elementwise(p in proptest::collection::vec(-10.0f64..10.0, 1..8), lr in 0.0f64..1.0) {
            let g: Vec<f64> = p.iter().map(|v| v * 0.5 - 1.0).collect();
            let mut t = Tensor::<f64>::from_f64(1, p.len(), &p).unwrap();
            sgd_step(&mut [("p", &mut t)], &[&g], lr).unwrap();
            for ((&new, &old), &gi) in t.data().iter().zip(&p).zip(&g) {
                proptest::prop_assert_eq!(new, old - lr * gi);
            }
        }
    }
}
