//! Adam with bias correction. State is keyed by parameter name; parameters
//! without a gradient in a given step are left untouched.

use crate::elem::Elem;
use crate::graph::{Grads, Params};
use indexmap::IndexMap;
use ndarray::ArrayD;

pub struct Adam<E: Elem> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, ArrayD<E>>,
    v: IndexMap<String, ArrayD<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<E>, grads: &Grads<E>, lr: f64) {
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lre = E::from_f64(lr);
        let epse = E::from_f64(self.eps);
        for (name, g) in grads.map.iter() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let p = params.get_mut(name);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mh = mv / bc1;
                let vh = vv / bc2;
                *pv = *pv - lre * mh / (vh.sqrt() + epse);
            });
        }
    }
}

impl<E: Elem> Default for Adam<E> {
    fn default() -> Self {
        Self::new()
    }
}
