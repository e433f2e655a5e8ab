//! Finite-difference verification of analytic gradients.
//!
//! The numeric side only ever calls forward evaluations, so it stays
//! independent of the backward pass it is checking. Comparisons use a
//! relative tolerance with a small absolute floor for near-zero pairs, where
//! central differences are dominated by cancellation noise.

use crate::error::Result;
use crate::model::Model;
use crate::TokenId;

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate.
pub fn central_differences(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// True when `a` and `b` agree within `tol` relative error, or within the
/// absolute floor when both are tiny.
pub fn agree(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= tol * scale || (a - b).abs() <= 1e-7
}

#[derive(Debug)]
pub struct GradCheckFailure {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare every parameter gradient of a full teacher-forced chunk loss
/// against central differences. Dropout off, no label smoothing; the loss is
/// the mean non-pad NLL.
pub fn check_model_gradients(
    model: &mut Model<f64>,
    src: &[TokenId],
    tgt: &[TokenId],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    use crate::attention::DropoutCtx;
    use crate::numerics::Tape;

    // Analytic pass.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (sum, count) =
        model.chunk_nll_sum(&mut tape, &bound, src, tgt, 0.0, &mut DropoutCtx::off())?;
    let loss = tape.scale(sum, 1.0 / count as f64);
    tape.backward(loss)?;
    model.write_grads(&bound, &tape)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.params.for_each(&mut |name, t| {
        analytic.push((name, t.grad().map(|g| g.to_vec()).unwrap_or_default()));
    });

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };

    for (ti, (name, grads)) in analytic.iter().enumerate() {
        for e in 0..grads.len() {
            nudge(model, ti, e, h);
            let up = model.chunk_loss_value(src, tgt, 0.0)?;
            nudge(model, ti, e, -2.0 * h);
            let down = model.chunk_loss_value(src, tgt, 0.0)?;
            nudge(model, ti, e, h);
            let numeric = (up - down) / (2.0 * h);
            let a = grads[e];
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.worst_rel && (a - numeric).abs() > 1e-7 {
                report.worst_rel = rel;
            }
            if !agree(a, numeric, tol) {
                report.failures.push(GradCheckFailure {
                    tensor: name.clone(),
                    index: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn nudge(model: &mut Model<f64>, tensor_index: usize, element: usize, delta: f64) {
    let mut i = 0;
    model.params.for_each_mut(&mut |_, t| {
        if i == tensor_index {
            t.data_mut()[element] += delta;
        }
        i += 1;
    });
}
