//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Scalar settings; the moment arrays live beside them in [`Adam`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            settings: AdamSettings { learning_rate, beta1: BETA1, beta2: BETA2, epsilon: EPSILON, step: 0 },
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched, and
    /// so are their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        let s = &mut self.settings;
        s.step += 1;
        let t = s.step as i32;
        let (b1, b2) = (s.beta1, s.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, m), v), g) in params.values_mut().iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grads) {
            let Some(g) = g else { continue };
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= s.learning_rate * (m / c1) / ((v / c2).sqrt() + s.epsilon);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::from_elem((1, 2), 1.0));
        store.insert("frozen", Mat::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(0.1, &store);
        adam.step(&mut store, &[Some(Mat::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap()), None]);
        // With bias correction the first update is lr·sign(g), up to eps.
        assert!((store.get("x")[[0, 0]] - 0.9).abs() < 1e-8);
        assert!((store.get("x")[[0, 1]] - 1.1).abs() < 1e-8);
        assert_eq!(store.get("frozen")[[0, 0]], 5.0);
        assert_eq!(adam.settings.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::from_elem((1, 1), 4.0));
        let mut adam = Adam::new(0.05, &store);
        for _ in 0..2000 {
            let x = store.get("x")[[0, 0]];
            adam.step(&mut store, &[Some(Mat::from_elem((1, 1), 2.0 * (x - 1.5)))]);
        }
        assert!((store.get("x")[[0, 0]] - 1.5).abs() < 1e-3);
    }
}
