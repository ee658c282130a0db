use super::VelocityField;
use crate::tensor::Matrix;

/// `v(x, t) = c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub c: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn eval(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        self.c.clone()
    }
    fn jvp(&self, _x: &[f64], _t: f64, _u: &[f64]) -> Vec<f64> {
        vec![0.0; self.c.len()]
    }
    fn vjp(&self, _x: &[f64], _t: f64, _w: &[f64]) -> Vec<f64> {
        vec![0.0; self.c.len()]
    }
    fn grad_of_jvp_probe(&self, _x: &[f64], _t: f64, _eps: &[f64]) -> Vec<f64> {
        vec![0.0; self.c.len()]
    }
    fn exact_trace(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn jacobian_is_state_independent(&self) -> bool {
        true
    }
}

/// `v(x, t) = M x + c`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub m: Matrix,
    pub c: Vec<f64>,
}

impl LinearField {
    pub fn new(m: Matrix) -> Self {
        let c = vec![0.0; m.rows()];
        LinearField { m, c }
    }

    /// `v = a x` in dimension `d`.
    pub fn scalar(a: f64, d: usize) -> Self {
        Self::new(Matrix::from_diag(&vec![a; d]))
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.m.rows()
    }
    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        let mut v = self.m.matvec(x);
        v.iter_mut().zip(&self.c).for_each(|(a, b)| *a += b);
        v
    }
    fn jvp(&self, _x: &[f64], _t: f64, u: &[f64]) -> Vec<f64> {
        self.m.matvec(u)
    }
    fn vjp(&self, _x: &[f64], _t: f64, w: &[f64]) -> Vec<f64> {
        self.m.matvec_t(w)
    }
    fn grad_of_jvp_probe(&self, _x: &[f64], _t: f64, _eps: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
    fn exact_trace(&self, _x: &[f64], _t: f64) -> f64 {
        self.m.trace()
    }
    fn jacobian_is_state_independent(&self) -> bool {
        true
    }
}
