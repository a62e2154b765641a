use crate::{Gradients, NnError, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched, moments included. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    if grads.len() != params.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() && g.len() != params.get(id).len() {
                return Err(NnError::Shape(format!("gradient shape mismatch for {}", params.name(id))));
            }
            if !g.all_finite() {
                return Err(NnError::NonFinite(params.name(id).to_string()));
            }
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(cfg.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        let i = id.index();
        let m = params.first_moment[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g.data()) {
            *mj = b1 * *mj + one_b1 * gj;
        }
        let v = params.second_moment[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g.data()) {
            *vj = b2 * *vj + one_b2 * gj * gj;
        }
        let update: Vec<T> = params.first_moment[i]
            .data()
            .iter()
            .zip(params.second_moment[i].data())
            .map(|(&mj, &vj)| step_size * mj / ((vj.sqrt() * inv_sqrt_bc2) + eps))
            .collect();
        for (p, u) in params.get_mut(id).data_mut().iter_mut().zip(update) {
            *p = *p - u;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x)).unwrap();
        s
    }

    fn grad_of(g: f64) -> Gradients<f64> {
        let mut gr = Gradients::empty(1);
        gr.accumulate(crate::ParamId(0), &Tensor::scalar(g));
        gr
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.7);
        adam_step(&mut s, &grad_of(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 150.0] {
            let mut s = scalar_store(1.0);
            let cfg = AdamConfig::with_lr(0.01);
            adam_step(&mut s, &grad_of(g), &cfg).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.get(crate::ParamId(0)).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = scalar_store(0.0);
        for _ in 0..100 {
            adam_step(&mut s, &grad_of(2.5), &AdamConfig::default()).unwrap();
        }
        assert!(s.get(crate::ParamId(0)).item() < -0.05);
        let mut s = scalar_store(0.0);
        for _ in 0..100 {
            adam_step(&mut s, &grad_of(-0.1), &AdamConfig::default()).unwrap();
        }
        assert!(s.get(crate::ParamId(0)).item() > 0.05);
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let mut s = scalar_store(1.0);
        let err = adam_step(&mut s, &grad_of(f64::NAN), &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
        assert_eq!(s.get(crate::ParamId(0)).item(), 1.0);
        assert_eq!(s.step(), 0);
    }
}
