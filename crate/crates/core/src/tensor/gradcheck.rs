use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement between tape gradients and central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares `backward` against central differences with step `h` for every
/// entry of every parameter in `ids`. The relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        let v = tape.value(loss);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be 1x1, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            store.get(id).grad.clone().ok_or_else(|| {
                Error::Contract(format!("no gradient for `{}`", store.param(id).name))
            })
        })
        .collect::<Result<_>>()?;
    store.zero_grads();

    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        for (i, &g) in grad.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (g - numeric).abs();
            let rel = abs / g.abs().max(numeric.abs()).max(floor);
            out.max_abs_error = out.max_abs_error.max(abs);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    Ok(out)
}
