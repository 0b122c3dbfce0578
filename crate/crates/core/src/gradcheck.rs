//! Central finite-difference checks of parameter gradients.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` gradients against `(f(w+h) - f(w-h)) / 2h` on
/// `samples` coordinates drawn uniformly over all trainable elements.
pub fn check_params<F>(
    store: &mut ParamStore,
    analytic: &[(ParamId, Vec<f64>)],
    samples: usize,
    step: f64,
    floor: f64,
    rng: &mut Rng,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let trainable: Vec<ParamId> = store.ids().filter(|id| store.is_trainable(*id)).collect();
    let total: usize = trainable.iter().map(|id| store.tensor(*id).numel()).sum();
    let mut coordinates = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut chosen = trainable[0];
        for id in &trainable {
            let n = store.tensor(*id).numel();
            if flat < n {
                chosen = *id;
                break;
            }
            flat -= n;
        }
        let index = flat;
        let a = analytic
            .iter()
            .find(|(id, _)| *id == chosen)
            .map_or(0.0, |(_, g)| g[index]);
        let original = store.tensor(chosen).data()[index];
        store.tensor_mut(chosen).data_mut()[index] = original + step;
        let plus = loss(store)?;
        store.tensor_mut(chosen).data_mut()[index] = original - step;
        let minus = loss(store)?;
        store.tensor_mut(chosen).data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * step);
        coordinates.push(CoordinateCheck {
            param: store.name(chosen).to_string(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, floor),
        });
    }
    Ok(GradCheckReport { coordinates })
}
