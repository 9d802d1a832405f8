//! Central-difference gradient verification.
//!
//! Runs the analytic backward pass once, then perturbs sampled parameter
//! entries by `±step` and compares. Only meaningful at `f64`; single
//! precision drowns the differences in rounding noise.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Rng};
use crate::tape::{Tape, Var};

/// Relative-error floor: gradients whose magnitude never exceeds this are
/// compared against the floor instead of each other.
const DENOM_FLOOR: f64 = 1e-8;

/// Check analytic gradients of a scalar-valued build `f` against central
/// differences over the listed parameters. Returns the worst relative error.
///
/// `f` must rebuild the computation from the store each call; up to
/// `max_probes_per_param` entries of each parameter are perturbed.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    targets: &[ParamId],
    step: f64,
    max_probes_per_param: usize,
    rng: &mut Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Validation(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    for &pid in targets {
        if store.is_frozen_param(pid) {
            let (g, n) = store.meta(pid);
            return Err(Error::Validation(format!(
                "cannot gradient-check frozen parameter {g}/{n}"
            )));
        }
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Validation("gradient check needs a scalar loss".into()));
    }
    let grads = tape.backward(loss)?;

    let eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        let out = tape.value(v).data()[0];
        if !out.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {out} during probe")));
        }
        Ok(out)
    };

    let mut max_rel: f64 = 0.0;
    for &pid in targets {
        let numel = store.get(pid).numel();
        let probes: Vec<usize> = if numel <= max_probes_per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(rng, numel, max_probes_per_param).into_vec()
        };
        for idx in probes {
            let orig = store.get(pid).data()[idx];
            store.get_mut(pid).data_mut()[idx] = orig + step;
            let plus = eval(store)?;
            store.get_mut(pid).data_mut()[idx] = orig - step;
            let minus = eval(store)?;
            store.get_mut(pid).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.param(pid).map(|g| g[idx]).unwrap_or(0.0);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at probe {idx}: analytic {analytic}, numeric {numeric}"
                )));
            }
            let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TransformerBlock;
    use crate::params::trunc_normal;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("probe", "x", trunc_normal(&mut rng, 4, 4, 1.0)).unwrap();
        let err = grad_check(&mut store, &[x], 1e-5, 16, &mut rng, |tape, store| {
            let xv = tape.param(store, x);
            let sq = tape.mul(xv, xv)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "quadratic rel error {err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("probe", "x", trunc_normal(&mut rng, 2, 2, 1.0)).unwrap();
        let err = grad_check(&mut store, &[x], 1e-2, 4, &mut rng, |tape, store| {
            let xv = tape.param(store, x);
            Ok(tape.sum_all(xv))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn frozen_target_rejected() {
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("probe", "x", trunc_normal(&mut rng, 2, 2, 1.0)).unwrap();
        store.set_frozen("probe", true).unwrap();
        let err = grad_check(&mut store, &[x], 1e-5, 4, &mut rng, |tape, store| {
            let xv = tape.param(store, x);
            Ok(tape.sum_all(xv))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn transformer_block_passes_fd_check() {
        let mut rng = Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut store, "blk", "b", 8, 2, 16, &mut rng).unwrap();
        let input = store.add("probe", "x", trunc_normal(&mut rng, 4, 8, 1.0)).unwrap();

        let mut targets = vec![input];
        targets.extend(store.group_params("blk").iter().copied());
        let err = grad_check(&mut store, &targets, 1e-5, 6, &mut rng, |tape, store| {
            let x = tape.param(store, input);
            let y = block.forward(tape, store, x, None, false)?;
            // reduce through a non-symmetric weighting so every output entry matters
            let w = Tensor::matrix(4, 8, (0..32).map(|i| ((i * 7 % 13) as f64) * 0.1 - 0.5).collect()).unwrap();
            let wv = tape.constant(w);
            let prod = tape.mul(y, wv)?;
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(err < 1e-4, "block rel error {err}");
    }

    #[test]
    fn attention_softmax_and_norms_pass_fd_check() {
        let mut rng = Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("probe", "x", trunc_normal(&mut rng, 3, 6, 1.0)).unwrap();
        let err = grad_check(&mut store, &[x], 1e-5, 18, &mut rng, |tape, store| {
            let xv = tape.param(store, x);
            let attn = tape.attn_softmax(xv, Some(&[true, true, false, true, true, true]), false)?;
            let normed = tape.l2_normalize_rows(attn)?;
            let ls = tape.log_softmax_rows(normed);
            let gathered = tape.gather_entries(ls, &[(0, 1), (1, 3), (2, 5)])?;
            Ok(tape.sum_all(gathered))
        })
        .unwrap();
        assert!(err < 1e-4, "softmax chain rel error {err}");
    }
}
