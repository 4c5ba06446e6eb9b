//! Adaptive-moment optimizer over a [`ParamSet`].

use indexmap::IndexMap;

use crate::numerics::array::RealArray;
use crate::numerics::param::ParamSet;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: IndexMap<String, RealArray>,
    second: IndexMap<String, RealArray>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn with_lr(learning_rate: f64) -> Self {
        Self::new(learning_rate, 0.9, 0.999, 1e-8)
    }

    /// One update from the gradients currently stored on `params`.
    /// Non-trainable parameters are never touched.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| RealArray::zeros(p.value.shape()));
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| RealArray::zeros(p.value.shape()));
            let g = p.gradient.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let xd = p.value.data_mut();
            for i in 0..g.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                xd[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert(
            "p",
            RealArray::new(vec![2], vec![3.0, -2.0]).unwrap(),
            true,
        );
        let mut opt = Adam::with_lr(0.1);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let t = Tape::new();
            let p = t.param(&params, "p").unwrap();
            let loss = t.dot(p, p).unwrap();
            let val = t.item(loss);
            let grads = t.backward(loss).unwrap();
            params.apply_grads(&grads).unwrap();
            opt.step(&mut params);
            last = val;
        }
        assert!(last < 1e-3, "loss {last}");
    }

    #[test]
    fn frozen_values_never_move() {
        let mut params = ParamSet::new();
        params.insert("f", RealArray::new(vec![1], vec![5.0]).unwrap(), false);
        let before = params.get("f").unwrap().value.clone();
        let mut opt = Adam::with_lr(0.5);
        params.get_mut("f").unwrap().gradient = RealArray::new(vec![1], vec![100.0]).unwrap();
        opt.step(&mut params);
        assert_eq!(params.get("f").unwrap().value, before);
    }
}
