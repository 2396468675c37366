//! Central finite differences against the analytic gradient.

use rand::Rng as _;
use serde::Serialize;

use super::Params;
use crate::rng;

/// Magnitudes below this are treated as this when forming relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords: usize,
    pub step: f64,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` with `(loss(θ + h·e) − loss(θ − h·e)) / 2h` on `coords`
/// coordinates drawn uniformly over all parameters.
pub fn check<L>(params: &Params<f64>, analytic: &Params<f64>, loss: L, coords: usize, h: f64, seed: u64) -> GradCheckReport
where
    L: Fn(&Params<f64>) -> f64,
{
    let names = params.names();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut r = rng::stream(&[0x6C4E_C4, seed]);
    let mut probe = params.clone();
    let mut worst: Option<CoordCheck> = None;

    for _ in 0..coords {
        let mut flat = r.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let orig = params.tensors()[ti].data[flat];
        probe.tensors_mut()[ti].data[flat] = orig + h;
        let up = loss(&probe);
        probe.tensors_mut()[ti].data[flat] = orig - h;
        let down = loss(&probe);
        probe.tensors_mut()[ti].data[flat] = orig;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic.tensors()[ti].data[flat];
        let c = CoordCheck { tensor: names[ti].clone(), index: flat, analytic: a, numeric, rel_err: rel_err(a, numeric) };
        if worst.as_ref().is_none_or(|w| c.rel_err > w.rel_err) {
            worst = Some(c);
        }
    }
    GradCheckReport { coords, step: h, max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err), worst }
}
