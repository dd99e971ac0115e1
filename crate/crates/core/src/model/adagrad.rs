use serde::{Deserialize, Serialize};

use crate::compress::SparseUpdate;
use crate::error::{invalid, Result};

/// AdaGrad hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaGrad {
    pub learning_rate: f32,
    pub epsilon: f32,
}

impl Default for AdaGrad {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epsilon: 1e-6,
        }
    }
}

impl AdaGrad {
    #[inline]
    fn step(&self, param: &mut f32, acc: &mut f32, g: f32) {
        *acc += g * g;
        *param -= self.learning_rate * g / (acc.sqrt() + self.epsilon);
    }
}

/// Sum-of-squares accumulators for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    opt: AdaGrad,
    accum: Vec<f32>,
}

impl AdaGradState {
    pub fn new(len: usize, opt: AdaGrad) -> Self {
        Self {
            opt,
            accum: vec![0.0; len],
        }
    }

    pub fn accumulators(&self) -> &[f32] {
        &self.accum
    }

    pub fn optimizer(&self) -> AdaGrad {
        self.opt
    }

    /// Applies a dense gradient. Zero entries leave both the parameter and
    /// its accumulator untouched.
    pub fn apply_dense(&mut self, params: &mut [f32], grad: &[f32]) -> Result<()> {
        if params.len() != self.accum.len() || grad.len() != self.accum.len() {
            return Err(invalid(format!(
                "adagrad over {} entries given {} params and {} gradients",
                self.accum.len(),
                params.len(),
                grad.len()
            )));
        }
        for ((p, a), &g) in params.iter_mut().zip(self.accum.iter_mut()).zip(grad) {
            if g != 0.0 {
                self.opt.step(p, a, g);
            }
        }
        Ok(())
    }

    /// Applies a sparse gradient; entries outside the update are not touched.
    pub fn apply_sparse(&mut self, params: &mut [f32], update: &SparseUpdate) -> Result<()> {
        if params.len() != self.accum.len() || update.total_length() as usize != self.accum.len() {
            return Err(invalid(format!(
                "adagrad over {} entries given {} params and an update of length {}",
                self.accum.len(),
                params.len(),
                update.total_length()
            )));
        }
        for (i, g) in update.entries() {
            let i = i as usize;
            self.opt.step(&mut params[i], &mut self.accum[i], g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_about_lr() {
        let mut state = AdaGradState::new(1, AdaGrad::default());
        let mut p = [1.0f32];
        state.apply_dense(&mut p, &[0.5]).unwrap();
        let expected = 1.0 - 0.005 * 0.5 / (0.5 + 1e-6);
        assert!((p[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(state.accumulators(), &[0.25]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut state = AdaGradState::new(2, AdaGrad::default());
        let mut p = [0.3f32, -0.7];
        state.apply_dense(&mut p, &[0.0, 1.0]).unwrap();
        assert_eq!(p[0].to_bits(), 0.3f32.to_bits());
        assert_eq!(state.accumulators()[0], 0.0);
    }

    #[test]
    fn sparse_touches_only_listed_indices() {
        let mut state = AdaGradState::new(5, AdaGrad::default());
        let mut p = [0.1f32, 0.2, 0.3, 0.4, 0.5];
        let before = p;
        let u = SparseUpdate::new("s", 5, vec![1, 3], vec![0.5, -1.0]).unwrap();
        state.apply_sparse(&mut p, &u).unwrap();
        for i in [0, 2, 4] {
            assert_eq!(p[i].to_bits(), before[i].to_bits());
            assert_eq!(state.accumulators()[i], 0.0);
        }
        assert!(p[1] < before[1] && p[3] > before[3]);
    }

    #[test]
    fn sparse_equals_dense_on_same_entries() {
        let g = [0.0f32, 0.25, 0.0, -0.125];
        let u = SparseUpdate::new("s", 4, vec![1, 3], vec![0.25, -0.125]).unwrap();
        let mut a = AdaGradState::new(4, AdaGrad::default());
        let mut b = a.clone();
        let mut pa = [1.0f32; 4];
        let mut pb = pa;
        for _ in 0..3 {
            a.apply_dense(&mut pa, &g).unwrap();
            b.apply_sparse(&mut pb, &u).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }

    #[test]
    fn accumulators_never_decrease() {
        let mut state = AdaGradState::new(3, AdaGrad::default());
        let mut p = [0.0f32; 3];
        let mut prev = state.accumulators().to_vec();
        for step in 0..20 {
            let g = [(step as f32).sin(), -0.1, 0.0];
            state.apply_dense(&mut p, &g).unwrap();
            assert!(state.accumulators().iter().zip(&prev).all(|(a, b)| a >= b));
            prev = state.accumulators().to_vec();
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut state = AdaGradState::new(3, AdaGrad::default());
        assert!(state.apply_dense(&mut [0.0; 3], &[0.0; 2]).is_err());
        let u = SparseUpdate::empty("s", 4);
        assert!(state.apply_sparse(&mut [0.0; 3], &u).is_err());
    }
}
