//! Compensated (Neumaier) accumulation.
//!
//! Reductions over observations go through these accumulators so that totals
//! are, to within the final rounding, independent of observation order.

use nalgebra::{DMatrix, DVector};

#[inline]
fn two_sum(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Scalar {
    sum: f64,
    comp: f64,
}

impl Scalar {
    pub fn add(&mut self, x: f64) {
        two_sum(&mut self.sum, &mut self.comp, x);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone)]
pub struct Matrix {
    sum: DMatrix<f64>,
    comp: DMatrix<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            sum: DMatrix::zeros(rows, cols),
            comp: DMatrix::zeros(rows, cols),
        }
    }

    pub fn add(&mut self, x: &DMatrix<f64>) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(x.iter()) {
            two_sum(s, c, v);
        }
    }

    pub fn add_entry(&mut self, row: usize, col: usize, x: f64) {
        let idx = (row, col);
        let (mut s, mut c) = (self.sum[idx], self.comp[idx]);
        two_sum(&mut s, &mut c, x);
        self.sum[idx] = s;
        self.comp[idx] = c;
    }

    pub fn value(&self) -> DMatrix<f64> {
        &self.sum + &self.comp
    }
}

#[derive(Debug, Clone)]
pub struct Vector {
    sum: DVector<f64>,
    comp: DVector<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            sum: DVector::zeros(len),
            comp: DVector::zeros(len),
        }
    }

    pub fn add(&mut self, x: &DVector<f64>) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(x.iter()) {
            two_sum(s, c, v);
        }
    }

    pub fn value(&self) -> DVector<f64> {
        &self.sum + &self.comp
    }
}
