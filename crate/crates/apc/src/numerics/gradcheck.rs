//! Central finite-difference verification of taped gradients.

use std::collections::HashMap;

use crate::error::Result;
use crate::numerics::array::RealArray;
use crate::numerics::param::ParamSet;
use crate::numerics::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - central| / max(1, |central|)
    pub max_rel_error: f64,
    /// number of coordinates checked (trainable only)
    pub checked: usize,
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare taped gradients of `f` against central differences over every
/// trainable coordinate of `params`. Frozen parameters are skipped.
pub fn grad_check<F>(f: F, params: &mut ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamSet) -> Result<Var>,
{
    let analytic: HashMap<String, RealArray> = {
        let tape = Tape::new();
        let loss = f(&tape, params)?;
        tape.backward(loss)?
    };

    let eval = |params: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let loss = f(&tape, params)?;
        Ok(tape.item(loss))
    };

    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for name in &names {
        let n = params.get(name)?.value.len();
        for i in 0..n {
            let orig = params.get(name)?.value.data()[i];
            params.get_mut(name)?.value.data_mut()[i] = orig + eps;
            let fp = eval(params)?;
            params.get_mut(name)?.value.data_mut()[i] = orig - eps;
            let fm = eval(params)?;
            params.get_mut(name)?.value.data_mut()[i] = orig;

            let central = (fp - fm) / (2.0 * eps);
            let ana = analytic
                .get(name)
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let rel = (ana - central).abs() / central.abs().max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::StreamRng;

    #[test]
    fn linear_function_has_zero_error() {
        let mut params = ParamSet::new();
        params.insert(
            "p",
            RealArray::new(vec![4], vec![0.3, -1.0, 2.0, 0.7]).unwrap(),
            true,
        );
        let report = grad_check(|t, ps| Ok(t.sum(t.param(ps, "p")?)), &mut params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn softmax_cross_entropy_self_consistency() {
        let mut rng = StreamRng::new(3, "test");
        let mut params = ParamSet::new();
        params.insert(
            "logits",
            RealArray::new(vec![2, 5], rng.normal_vec(10, 0.0, 1.0)).unwrap(),
            true,
        );
        let report = grad_check(
            |t, ps| {
                let z = t.param(ps, "logits")?;
                let lse = t.logsumexp_rows(z);
                let picked = t.gather(z, &[(0, 2), (1, 4)])?;
                let nll = t.sub(t.sum(lse), t.sum(picked))?;
                Ok(t.scale(nll, 0.5))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn frozen_coordinates_are_skipped() {
        let mut params = ParamSet::new();
        params.insert("a", RealArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        params.insert("b", RealArray::new(vec![5], vec![1.0; 5]).unwrap(), false);
        let report = grad_check(
            |t, ps| {
                let a = t.param(ps, "a")?;
                let b = t.param(ps, "b")?;
                let sa = t.sum(a);
                let sb = t.sum(b);
                t.mul(sa, sb)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, params.trainable_len());
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-6);
    }

    /// Random composites of the exported ops stay under 1e-4 across seeds.
    #[test]
    fn random_composites_pass_grad_check() {
        for seed in 0..20u64 {
            let mut rng = StreamRng::new(seed, "gradcheck");
            let mut params = ParamSet::new();
            params.insert(
                "w1",
                RealArray::new(vec![3, 4], rng.normal_vec(12, 0.0, 0.8)).unwrap(),
                true,
            );
            params.insert(
                "w2",
                RealArray::new(vec![4, 3], rng.normal_vec(12, 0.0, 0.8)).unwrap(),
                true,
            );
            params.insert(
                "gamma",
                RealArray::new(vec![4], rng.normal_vec(4, 1.0, 0.1)).unwrap(),
                true,
            );
            params.insert("beta", RealArray::new(vec![4], rng.normal_vec(4, 0.0, 0.1)).unwrap(), true);
            params.insert(
                "v",
                RealArray::new(vec![4], rng.normal_vec(4, 0.0, 1.0)).unwrap(),
                true,
            );
            let report = grad_check(
                |t, ps| {
                    let w1 = t.param(ps, "w1")?;
                    let w2 = t.param(ps, "w2")?;
                    let gamma = t.param(ps, "gamma")?;
                    let beta = t.param(ps, "beta")?;
                    let v = t.param(ps, "v")?;
                    let h = t.layer_norm(w1, gamma, beta)?;
                    let h = t.gelu(h);
                    let z = t.matmul(h, w2)?;
                    let s = t.softmax_rows(z);
                    let zz = t.matmul(s, w1)?;
                    let pooled = t.sum_axis0(zz);
                    let sim = t.cosine_similarity(pooled, v)?;
                    let spread = t.sum(t.abs(z));
                    let scaled = t.scale(spread, 0.01);
                    t.add(sim, scaled)
                },
                &mut params,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "seed {seed}: {}",
                report.max_rel_error
            );
        }
    }
}
