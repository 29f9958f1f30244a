//! Objectives: the cosine distillation loss, softmax cross-entropy for
//! classification and logit MSE for task-level distillation.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Norms below this make the cosine loss undefined.
pub const MIN_NORM: f64 = 1e-12;

fn check_same(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `(1 - cos(t, s)) / 2` and its gradient with respect to `s`.
pub(crate) fn cosine_loss_grad(t: &[f64], s: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_same("cosine_distill_loss", t, s)?;
    let nt = dot(t, t).sqrt();
    let ns = dot(s, s).sqrt();
    for norm in [nt, ns] {
        if !(norm >= MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
    }
    let a = dot(t, s);
    let denom = nt * ns;
    let cos = (a / denom).clamp(-1.0, 1.0);
    let loss = 0.5 * (1.0 - cos);
    let ns3 = denom * ns * ns;
    let grad = t
        .iter()
        .zip(s)
        .map(|(&ti, &si)| -0.5 * (ti / denom - a * si / ns3))
        .collect();
    Ok((loss, grad))
}

pub(crate) fn cosine_loss(t: &[f64], s: &[f64]) -> Result<f64> {
    check_same("cosine_distill_loss", t, s)?;
    let nt = dot(t, t).sqrt();
    let ns = dot(s, s).sqrt();
    for norm in [nt, ns] {
        if !(norm >= MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
    }
    Ok(0.5 * (1.0 - (dot(t, s) / (nt * ns)).clamp(-1.0, 1.0)))
}

/// Distillation objective between teacher vector `t` and student vector `s`.
pub fn cosine_distill_loss(t: &Tensor, s: &Tensor) -> Result<f64> {
    cosine_loss(t.data(), s.data())
}

/// Gradient of [`cosine_distill_loss`] with respect to the student vector.
/// The teacher vector is a constant.
pub fn cosine_distill_backward(t: &Tensor, s: &Tensor) -> Result<Tensor> {
    Tensor::vector(cosine_loss_grad(t.data(), s.data())?.1)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy and its gradient `softmax - onehot` with respect to logits.
pub(crate) fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            classes: logits.len(),
        });
    }
    let (argmax, &m) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty logits");
    // log-sum-exp as m + ln(1 + sum of the non-max terms) keeps precision
    // when one logit dominates.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &z)| (z - m).exp())
        .sum();
    let loss = (m - logits[label]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    Ok(cross_entropy_grad(logits.data(), label)?.0)
}

pub(crate) fn mse_grad(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_same("mse_logit_loss", student, teacher)?;
    let k = student.len() as f64;
    let loss = student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / k;
    let grad = student.iter().zip(teacher).map(|(s, t)| 2.0 * (s - t) / k).collect();
    Ok((loss, grad))
}

/// Mean squared difference between student and teacher logits.
pub fn mse_logit_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::dim("mse_logit_loss", student.shape(), teacher.shape()));
    }
    Ok(mse_grad(student.data(), teacher.data())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_loss_reference_points() {
        let t = v(&[1.0, 0.0]);
        assert_eq!(cosine_distill_loss(&t, &v(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_distill_loss(&t, &v(&[-1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_distill_loss(&t, &v(&[0.0, 1.0])).unwrap(), 0.5);
        let expected = (1.0 - 1.0 / 2f64.sqrt()) / 2.0;
        let got = cosine_distill_loss(&t, &v(&[1.0, 1.0])).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.146447).abs() < 1e-6);
    }

    #[test]
    fn cosine_loss_rejects_degenerate_vectors() {
        let t = v(&[1.0, 0.0]);
        let z = v(&[0.0, 0.0]);
        assert!(matches!(cosine_distill_loss(&t, &z), Err(Error::DegenerateVector { .. })));
        assert!(matches!(cosine_distill_loss(&z, &t), Err(Error::DegenerateVector { .. })));
        assert!(matches!(cosine_distill_backward(&t, &v(&[1e-13, 0.0])), Err(Error::DegenerateVector { .. })));
        assert!(matches!(cosine_distill_loss(&t, &v(&[1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradient_vanishes_when_parallel() {
        let t = v(&[0.3, -1.2, 2.0]);
        let g = cosine_distill_backward(&t, &t.scale(2.5).unwrap()).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn cross_entropy_reference_points() {
        let ln2 = std::f64::consts::LN_2;
        assert!((softmax_cross_entropy(&v(&[0.0, 0.0]), 0).unwrap() - ln2).abs() < 1e-15);
        let l = softmax_cross_entropy(&v(&[0.0, 3f64.ln()]), 0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.386294).abs() < 1e-6);
        let l = softmax_cross_entropy(&v(&[50.0, -50.0]), 0).unwrap();
        assert!(l.is_finite() && (0.0..1e-20).contains(&l));
        assert!(matches!(softmax_cross_entropy(&v(&[0.0, 0.0]), 2), Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn mse_reference_points() {
        assert_eq!(mse_logit_loss(&v(&[1.5, -2.0]), &v(&[1.5, -2.0])).unwrap(), 0.0);
        assert_eq!(mse_logit_loss(&v(&[1.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 0.5);
        assert_eq!(mse_logit_loss(&v(&[2.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(matches!(mse_logit_loss(&v(&[1.0]), &v(&[1.0, 2.0])), Err(Error::Dimension { .. })));
    }

    fn pair(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-3.0f64..3.0, d),
            proptest::collection::vec(-3.0f64..3.0, d),
        )
            .prop_filter("non-degenerate", |(a, b)| dot(a, a) > 1e-6 && dot(b, b) > 1e-6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn cosine_loss_is_bounded((t, s) in pair(6)) {
            let l = cosine_loss(&t, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn cosine_loss_is_scale_invariant((t, s) in pair(6), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let a = cosine_loss(&t, &s).unwrap();
            let b = cosine_loss(&t, &scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn cosine_gradient_is_orthogonal_to_student((t, s) in pair(5)) {
            let (_, g) = cosine_loss_grad(&t, &s).unwrap();
            let scale = dot(&g, &g).sqrt() * dot(&s, &s).sqrt();
            prop_assert!(dot(&g, &s).abs() <= 1e-10 * scale.max(1.0));
        }
    }
}
