use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Gradients, Graph, NnError, ParamId, ParamStore, Var};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Total coordinate budget, spread evenly over the parameter tensors
    /// (at least one coordinate each).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, max_coords: 200, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub loss: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F, E>(params: &ParamStore<f64>, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(NnError::Shape(format!("loss of shape {:?}", v.shape())).into());
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(NnError::NonFinite("loss".into()).into());
    }
    Ok(x)
}

/// Central-difference check of the gradients of the scalar built by `f`
/// against reverse-mode gradients.
pub fn grad_check<F, E>(params: &ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?.params
    };
    compare_gradients(params, f, &analytic, cfg)
}

/// Like [`grad_check`] but against caller-supplied gradients.
pub fn compare_gradients<F, E>(
    params: &ParamStore<f64>,
    f: F,
    analytic: &Gradients<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    let loss = evaluate(params, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quota = (cfg.max_coords / params.len().max(1)).max(1);
    let mut work = params.clone();
    let mut coords = Vec::new();
    let mut max_rel = 0.0f64;
    for id in params.ids() {
        let numel = params.get(id).len();
        let picks = rand::seq::index::sample(&mut rng, numel, quota.min(numel));
        for index in picks.into_iter() {
            let numeric = central_difference(&mut work, id, index, cfg.step, &f)?;
            let a = analytic.get(id).map_or(0.0, |g| g.data()[index]);
            let rel = relative_error(a, numeric);
            max_rel = max_rel.max(rel);
            coords.push(CoordCheck {
                param: params.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, loss, coords })
}

fn central_difference<F, E>(
    work: &mut ParamStore<f64>,
    id: ParamId,
    index: usize,
    step: f64,
    f: &F,
) -> Result<f64, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<NnError>,
{
    let orig = work.get(id).data()[index];
    work.get_mut(id).data_mut()[index] = orig + step;
    let plus = evaluate(work, f);
    work.get_mut(id).data_mut()[index] = orig - step;
    let minus = evaluate(work, f);
    work.get_mut(id).data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}
