//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};

/// Denominator floor of the relative error, so coordinates with vanishing gradients
/// are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `grad` against `(loss(p + h) - loss(p - h)) / 2h` at `probes` coordinates drawn by
/// picking a parameter block uniformly and then a coordinate within it.
///
/// `store` exposes the model's parameters for in-place nudging; each probe restores the
/// original value bitwise.
pub fn gradient_check<M, R: Rng + ?Sized>(
    model: &mut M,
    probes: usize,
    step: f64,
    rng: &mut R,
    store: impl Fn(&mut M) -> &mut ParamStore<f64>,
    loss: impl Fn(&M) -> f64,
    grad: &Gradients<f64>,
) -> GradCheckReport {
    let blocks: Vec<ParamId> = store(model)
        .ids()
        .filter(|&id| !store(model).get(id).is_empty())
        .collect();
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = blocks[rng.random_range(0..blocks.len())];
        let index = rng.random_range(0..store(model).get(id).len());
        let original = store(model).get(id)[index];
        store(model).get_mut(id)[index] = original + step;
        let up = loss(model);
        store(model).get_mut(id)[index] = original - step;
        let down = loss(model);
        store(model).get_mut(id)[index] = original;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grad.at(id, index);
        out.push(GradProbe {
            param: store(model).name(id).to_owned(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    GradCheckReport { probes: out }
}
