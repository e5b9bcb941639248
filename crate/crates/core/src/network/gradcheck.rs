use super::model::{backward, forward, HeadGrads, HeadOutputs};
use super::params::ModelParams;
use crate::datamodel::FeatureSequence;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// Per tensor: (name, element count, max relative error).
    pub per_tensor: Vec<(String, usize, f64)>,
}

/// Compares analytic parameter gradients against central finite differences
/// of `loss` for every element of every tensor, in f64.
///
/// `loss` maps head outputs to a scalar and its gradient with respect to
/// those outputs. Relative error is `|analytic - numeric| / (|analytic| + 1e-8)`;
/// the first tensor whose error exceeds `tol` is named in the returned
/// [`Error::Gradient`].
pub fn gradient_check<L>(
    params: &ModelParams<f64>,
    seq: &FeatureSequence,
    loss: L,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&HeadOutputs<f64>) -> (f64, HeadGrads<f64>),
{
    let pass = forward(params, seq)?;
    let (_, upstream) = loss(&pass.outputs);
    let analytic = backward(params, &pass, &upstream);
    let mut flat_analytic = Vec::new();
    analytic.visit(&mut |_, g| flat_analytic.push(g.clone()));

    let mut probe = params.clone();
    let names = params.layers.names();
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        per_tensor: Vec::new(),
    };
    let mut failure: Option<Error> = None;

    for (ti, name) in names.iter().enumerate() {
        let len = flat_analytic[ti].len();
        let mut tensor_max = 0.0f64;
        for idx in 0..len {
            let original = tensor_value(&probe, ti, idx);
            set_tensor_value(&mut probe, ti, idx, original + step);
            let plus = loss(&forward(&probe, seq)?.outputs).0;
            set_tensor_value(&mut probe, ti, idx, original - step);
            let minus = loss(&forward(&probe, seq)?.outputs).0;
            set_tensor_value(&mut probe, ti, idx, original);

            let numeric = (plus - minus) / (2.0 * step);
            let a = flat_analytic[ti][idx];
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.n_checked += 1;
            tensor_max = tensor_max.max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
            }
            if rel >= tol && failure.is_none() {
                failure = Some(Error::Gradient {
                    tensor: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
        report.per_tensor.push((name.clone(), len, tensor_max));
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn tensor_value(p: &ModelParams<f64>, ti: usize, idx: usize) -> f64 {
    let mut out = 0.0;
    let mut i = 0;
    p.layers.visit(&mut |_, t| {
        if i == ti {
            out = t.value[idx];
        }
        i += 1;
    });
    out
}

fn set_tensor_value(p: &mut ModelParams<f64>, ti: usize, idx: usize, v: f64) {
    let mut i = 0;
    p.layers.visit_mut(&mut |_, t| {
        if i == ti {
            t.value[idx] = v;
        }
        i += 1;
    });
}
