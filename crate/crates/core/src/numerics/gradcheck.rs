//! Central finite-difference checks for tape gradients.

use super::{Matrix, NumericsError, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Adds `delta` to entry 0 of the analytic gradient of parameter
    /// `index`. Used to confirm the checker catches a broken gradient.
    pub perturb_analytic: Option<(usize, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            perturb_analytic: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `backward` against central differences of `f` for every
/// entry of every named parameter.
///
/// `f` receives a fresh tape and one leaf per parameter (same order) and
/// must return a scalar node.
pub fn check_gradients<F, E>(
    params: &[(String, Matrix)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |values: &[Matrix]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok(tape.scalar_value(out)?)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    let grads = tape.backward(root)?;

    let mut values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut analytic = grads.get(leaves[p]);
        if let Some((idx, delta)) = opts.perturb_analytic {
            if idx == p && !analytic.is_empty() {
                analytic.as_mut_slice()[0] += delta;
            }
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..values[p].len() {
            let original = values[p].as_slice()[k];
            values[p].as_mut_slice()[k] = original + opts.step;
            let plus = eval(&values)?;
            values[p].as_mut_slice()[k] = original - opts.step;
            let minus = eval(&values)?;
            values[p].as_mut_slice()[k] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.as_slice()[k];
            let scale = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / scale;
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst_entry = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance: opts.tolerance,
    })
}
