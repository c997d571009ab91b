//! AdamW with decoupled weight decay and exportable moment buffers.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub hp: AdamWParams,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, hp: AdamWParams) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            hp,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamWParams {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hp;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Detached so the moments never pin an old step's graph.
            let g = g.detach();
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta.detach() * (1.0 - lr * weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moment buffers keyed `adam.m.<name>` / `adam.v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.m[i].clone());
            out.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (buf, key) in [(&mut self.m[i], format!("adam.m.{name}")), (&mut self.v[i], format!("adam.v.{name}"))] {
                let t = state.get(&key).ok_or_else(|| Error::Config(format!("optimizer state lacks {key}")))?;
                *buf = t.to_dtype(var.dtype())?.to_device(var.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn hp(lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], hp(0.1)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        // Bias-corrected first step is ±lr, after the decoupled decay.
        assert!((got[0] - (1.0 * 0.999 - 0.1)).abs() < 1e-6);
        assert!((got[1] - (-2.0 * 0.999 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_null_update() {
        let x = Var::from_tensor(&Tensor::new(&[0.3f32, 7.0], &Device::Cpu).unwrap()).unwrap();
        let before: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], hp(0.0)).unwrap();
        for _ in 0..3 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let after: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], AdamWParams { weight_decay: 0.0, ..hp(0.05) }).unwrap();
        for _ in 0..400 {
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let v: f64 = x.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 1.0).abs() < 1e-2, "{v}");
    }
}
