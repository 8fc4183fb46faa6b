//! Analytic-versus-numeric gradient comparison.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Checks at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator, so that inputs whose
    /// true gradient vanishes (e.g. a bias cancelled by normalization) are
    /// judged on round-off-sized absolute error instead of noise over noise.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-6,
            max_coords: None,
            seed: 0,
            abs_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub coords: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, abs_floor)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub inputs: Vec<InputCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel error {:.3e} (tolerance {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance
        )
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences. `f` must be deterministic: it is re-evaluated on fresh graphs.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for idx in 0..inputs.len() {
        let n = inputs[idx].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &c in &coords {
            let orig = values[idx].data()[c];
            values[idx].data_mut()[c] = orig + opts.step;
            let plus = eval(&values)?;
            values[idx].data_mut()[c] = orig - opts.step;
            let minus = eval(&values)?;
            values[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx].data()[c];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(opts.abs_floor);
        let rel_error = if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 };
        checks.push(InputCheck {
            coords: coords.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    // NaN must surface as a failure rather than be skipped by `max`.
    let max_rel_error = checks
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0, |m, e| if e.is_nan() || e > m { e } else { m });
    Ok(GradCheckReport {
        name: name.to_string(),
        passed: max_rel_error < opts.tolerance,
        inputs: checks,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}
