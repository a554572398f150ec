//! Limited-memory BFGS history with a pluggable initial inverse Hessian.

use std::collections::VecDeque;

use crate::error::Result;
use crate::sparse::dot;

#[derive(Debug, Clone)]
pub struct History {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Stores `(s, y)` if it satisfies the curvature condition; returns
    /// whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if self.capacity == 0 {
            return false;
        }
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if !(sy > 1e-14 * scale) {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    /// Last pair's `sᵀy / yᵀy`, the usual scalar initial inverse Hessian.
    pub fn gamma(&self) -> Option<f64> {
        self.pairs.back().map(|(_, y, rho)| 1.0 / (rho * dot(y, y)))
    }

    /// Two-loop recursion: returns `H g`.
    pub fn apply(&self, g: &[f64], h0: impl FnOnce(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (k, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &q);
            alpha[k] = a;
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        }
        let mut r = h0(&q)?;
        for (k, (s, y, rho)) in self.pairs.iter().enumerate() {
            let b = rho * dot(y, &r);
            let c = alpha[k] - b;
            r.iter_mut().zip(s).for_each(|(ri, si)| *ri += c * si);
        }
        Ok(r)
    }
}
