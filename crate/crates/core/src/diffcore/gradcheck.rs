//! Finite-difference gradient verification.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, ValueId};
use crate::error::{Error, Result};

/// Outcome for one parameter.
#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub param: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub items: Vec<GradCheckItem>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.items
            .iter()
            .map(|i| i.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// Compare the tape's analytic gradients against central finite differences
/// for each listed parameter. The forward closure must be deterministic and
/// produce a scalar. Relative error uses a unit floor in the denominator so
/// noise-level gradients do not produce spurious failures.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    grad_check_inner(store, params, h, forward, false)
}

/// Variant used as a negative control: runs the same comparison with the
/// tape's backward corruption hook enabled.
pub fn grad_check_corrupted<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    grad_check_inner(store, params, h, forward, true)
}

fn grad_check_inner<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    forward: F,
    corrupt: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<ValueId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    tape.set_backward_corruption(corrupt);
    let out = forward(&mut tape, store)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract(
            "grad_check forward must produce a scalar".into(),
        ));
    }
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| store.grad(id).data().to_vec())
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, store)?;
        Ok(tape.value(out).item())
    };

    let mut items = Vec::with_capacity(params.len());
    for (pi, &id) in params.iter().enumerate() {
        let n = store.value(id).numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let f_plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let f_minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
        items.push(GradCheckItem {
            param: store.get(id).name.clone(),
            max_rel_error: worst,
        });
    }
    store.zero_grads();
    Ok(GradCheckReport { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_passes_at_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add_uniform("w", &[3, 4], 4, &mut rng);
        let b = store.add_uniform("b", &[3], 4, &mut rng);
        let x = Tensor::new(
            vec![4, 2],
            (0..8).map(|i| (i as f64) * 0.31 - 1.0).collect(),
        )
        .unwrap();
        let report = grad_check(&mut store, &[w, b], 1e-5, |tape, store| {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let xv = tape.constant(x.clone());
            let y = tape.linear(wv, xv, Some(bv))?;
            let s = tape.sigmoid(y);
            tape.mean_all(s)
        })
        .unwrap();
        assert!(report.passes(1e-6), "max err {}", report.max_error());
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(&[&[0.4, -0.2]]));
        let x = Tensor::matrix(&[&[1.0], &[2.0]]);
        let report = grad_check_corrupted(&mut store, &[w], 1e-5, |tape, store| {
            let wv = tape.param(store, w);
            let xv = tape.constant(x.clone());
            let y = tape.linear(wv, xv, None)?;
            tape.sum_all(y);
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(!report.passes(1e-4), "corruption went undetected");
    }
}
