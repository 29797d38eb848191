//! Central finite-difference gradient checking.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{NodeId, Tape, Tensor};

/// Outcome of a finite-difference sweep over a set of named tensors.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Max relative error per tensor name.
    pub per_param: IndexMap<String, f64>,
    pub max_rel_err: f64,
    /// (name, flat index) of the worst coordinate, when any exists.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a small floor so coordinates whose true gradient is
/// near zero are judged on an absolute scale (central differences carry
/// roundoff noise of order eps/h).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn build_scalar<S: Scalar>(
    f: &dyn Fn(&mut Tape<S>, &IndexMap<String, NodeId>) -> Result<NodeId>,
    params: &IndexMap<String, Tensor<S>>,
    tracked: bool,
) -> Result<(Tape<S>, IndexMap<String, NodeId>, NodeId)> {
    let mut tape = Tape::new();
    let mut leaves = IndexMap::new();
    for (name, t) in params {
        leaves.insert(name.clone(), tape.leaf(t.clone(), tracked));
    }
    let root = f(&mut tape, &leaves)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::contract(
            "finite_diff_check: f must produce a scalar",
        ));
    }
    let v = tape.value(root).item().to_f64().unwrap();
    if !v.is_finite() {
        return Err(Error::numeric("finite_diff_check", "non-finite probe value"));
    }
    Ok((tape, leaves, root))
}

/// Checks the tape gradient of a scalar function against central finite
/// differences, sweeping every element of every named tensor.
///
/// `f` builds the scalar loss on the given tape from the named leaves; the
/// same builder is used for the analytic pass (tracked leaves) and for the
/// `f(x+h)`/`f(x-h)` probes (untracked).
pub fn finite_diff_check<S: Scalar>(
    f: &dyn Fn(&mut Tape<S>, &IndexMap<String, NodeId>) -> Result<NodeId>,
    params: &IndexMap<String, Tensor<S>>,
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    if h <= 0.0 {
        return Err(Error::contract("finite_diff_check: h must be positive"));
    }

    // Analytic pass.
    let (tape, leaves, root) = build_scalar(f, params, true)?;
    let grads = tape.backward(root)?;
    let mut analytic: IndexMap<String, Vec<f64>> = IndexMap::new();
    for (name, id) in &leaves {
        let g = grads.get(*id).expect("tracked leaves always have gradients");
        analytic.insert(
            name.clone(),
            g.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        );
    }
    drop(tape);

    // Numeric probes.
    let probe = |p: &IndexMap<String, Tensor<S>>| -> Result<f64> {
        let (tape, _, root) = build_scalar(f, p, false)?;
        Ok(tape.value(root).item().to_f64().unwrap())
    };
    let hs = lit::<S>(h);
    let mut work = params.clone();
    let mut report = FiniteDiffReport {
        per_param: IndexMap::new(),
        max_rel_err: 0.0,
        worst: None,
        tol,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in &names {
        let len = params[name].numel();
        let mut param_max = 0.0f64;
        for i in 0..len {
            let orig = work[name].data()[i];
            work[name].data_mut()[i] = orig + hs;
            let plus = probe(&work)?;
            work[name].data_mut()[i] = orig - hs;
            let minus = probe(&work)?;
            work[name].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_err(analytic[name][i], numeric);
            if e > param_max {
                param_max = e;
            }
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
        report.per_param.insert(name.clone(), param_max);
    }
    Ok(report)
}
