//! Central finite-difference gradient verification.

use super::{Gradients, Trainable};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps entries whose true
/// gradient is zero from dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss`, perturbing
/// every parameter entry of `model` by `±step`.
pub fn check_gradients<M: Trainable + ?Sized>(
    model: &mut M,
    analytic: &Gradients,
    step: f64,
    loss: impl Fn(&M) -> f64,
) -> GradCheckReport {
    let names = model.param_names();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    assert_eq!(shapes.len(), analytic.0.len(), "gradient tensor count");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (t, &len) in shapes.iter().enumerate() {
        assert_eq!(len, analytic.0[t].len(), "gradient shape of {}", names[t]);
        for e in 0..len {
            let original = model.params()[t][e];
            model.params_mut()[t][e] = original + step;
            let plus = loss(model);
            model.params_mut()[t][e] = original - step;
            let minus = loss(model);
            model.params_mut()[t][e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.0[t][e];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((names[t].clone(), e, a, numeric));
                }
            }
        }
    }
    report
}
