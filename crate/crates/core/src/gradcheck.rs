//! Central finite-difference checking of analytic gradients (64-bit only).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error. Central differences at eps 1e-5
/// carry roughly 1e-11..1e-10 of roundoff, so gradients smaller than this
/// are held to an absolute error of `tol * REL_FLOOR` instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Maximum relative error per input, in input order.
    pub max_rel: Vec<f64>,
    /// Elements per input whose central difference straddles a kink
    /// (relu/abs/l1 changed branch), where no derivative estimate exists.
    pub straddled: Vec<usize>,
    /// Elements checked per input.
    pub checked: Vec<usize>,
    /// Worst element overall: (input, element, analytic, numeric).
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_straddled(&self) -> usize {
        self.straddled.iter().sum()
    }

    pub fn total_checked(&self) -> usize {
        self.checked.iter().sum()
    }
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let loss = build(&mut g, &vars)?;
    g.check_finite()?;
    if g.value(loss).numel() != 1 {
        return Err(Error::invalid("gradcheck", "graph must produce a scalar"));
    }
    Ok((g, vars, loss))
}

/// Compares the reverse-mode gradient of the scalar produced by `build`
/// against central differences with step `eps`, for every element of every
/// input. Elements whose two probes land on a different smooth piece than the
/// base point are counted in `straddled` and excluded from `max_rel`.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = evaluate(&build, inputs, true)?;
    let grads = g.backward(loss)?;
    let base = g.kink_pattern();
    drop(g);
    let mut report = GradReport {
        max_rel: Vec::with_capacity(inputs.len()),
        straddled: Vec::with_capacity(inputs.len()),
        checked: Vec::with_capacity(inputs.len()),
        worst_at: None,
    };
    let mut overall = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut worst = 0.0f64;
        let mut straddled = 0;
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let (up, kinks_up) = probe_eval(&build, &probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let (down, kinks_down) = probe_eval(&build, &probe)?;
            probe[i].data_mut()[e] = orig;
            if kinks_up != base || kinks_down != base {
                straddled += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let rel = relative_error(analytic.data()[e], numeric);
            worst = worst.max(rel);
            if rel > overall {
                overall = rel;
                report.worst_at = Some((i, e, analytic.data()[e], numeric));
            }
        }
        report.max_rel.push(worst);
        report.straddled.push(straddled);
        report.checked.push(inputs[i].numel());
    }
    Ok(report)
}

fn probe_eval<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(build, inputs, false)?;
    Ok((g.value(loss).data()[0], g.kink_pattern()))
}
