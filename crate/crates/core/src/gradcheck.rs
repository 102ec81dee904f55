//! Finite-difference gradient checking.
//!
//! Compares the analytic gradients produced by [`Graph::backward`] against
//! central finite differences of the forward pass alone, so the check is
//! independent of the reverse-mode implementation it validates. The loss is
//! a fixed random projection of the output, which exercises distinct
//! adjoints per output element.

use crate::error::Result;
use crate::graph::Graph;
use crate::params::ParameterSet;
use crate::rng;
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates compared (parameters plus input elements).
    pub checked: usize,
    /// Worst relative deviation seen.
    pub max_rel_error: Real,
    /// First failing coordinate, if any: (description, analytic, fd).
    pub first_failure: Option<(String, Real, Real)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

fn projection_loss(out: &Tensor, weights: &[Real]) -> Real {
    out.data().iter().zip(weights).map(|(&o, &w)| o * w).sum()
}

/// Check `coords` randomly chosen parameter/input coordinates of `graph`
/// against central finite differences with step `h` and relative tolerance
/// `tol`. Gradients whose magnitudes are both below 1e-8 are treated as
/// matching zeros.
pub fn check_graph(
    graph: &Graph,
    params: &ParameterSet,
    input: &Tensor,
    time: Option<&[usize]>,
    coords: usize,
    h: Real,
    tol: Real,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = rng::rng_from(seed, &[0xfd]);
    let (out, _) = graph.forward(params, input, time)?;
    let proj: Vec<Real> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();

    // analytic gradients
    let mut work = params.clone();
    work.zero_grads();
    let (out2, mut tape) = graph.forward(&work, input, time)?;
    let dy = Tensor::new(out2.shape().to_vec(), proj.clone())?;
    let input_grad = graph.backward(&mut work, &mut tape, &dy)?;

    // enumerate all (entry, coord) pairs plus input coords
    let mut sites: Vec<(usize, usize)> = Vec::new();
    for (eid, e) in work.iter().enumerate() {
        for c in 0..e.value.numel() {
            sites.push((eid, c));
        }
    }
    let n_params = sites.len();
    for c in 0..input.numel() {
        sites.push((usize::MAX, c));
    }
    sites.shuffle(&mut rng);
    let take = coords.min(sites.len());

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, first_failure: None };
    for &(eid, c) in sites.iter().take(take) {
        let (analytic, fd) = if eid == usize::MAX {
            let analytic = input_grad.data()[c];
            let mut xp = input.clone();
            xp.data_mut()[c] += h;
            let mut xm = input.clone();
            xm.data_mut()[c] -= h;
            let (op, _) = graph.forward(params, &xp, time)?;
            let (om, _) = graph.forward(params, &xm, time)?;
            (analytic, (projection_loss(&op, &proj) - projection_loss(&om, &proj)) / (2.0 * h))
        } else {
            let analytic = work.grad(eid).data()[c];
            let mut pp = params.clone();
            pp.value_mut(eid).data_mut()[c] += h;
            let mut pm = params.clone();
            pm.value_mut(eid).data_mut()[c] -= h;
            let (op, _) = graph.forward(&pp, input, time)?;
            let (om, _) = graph.forward(&pm, input, time)?;
            (analytic, (projection_loss(&op, &proj) - projection_loss(&om, &proj)) / (2.0 * h))
        };
        report.checked += 1;
        if analytic.abs() < 1e-8 && fd.abs() < 1e-8 {
            continue;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
        }
        if rel > tol && report.first_failure.is_none() {
            let what = if eid == usize::MAX {
                format!("input[{c}]")
            } else {
                format!("{}[{c}]", work.entry(eid).name)
            };
            report.first_failure = Some((what, analytic, fd));
        }
    }
    let _ = n_params;
    Ok(report)
}
