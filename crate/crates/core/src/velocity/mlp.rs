//! Fully connected `tanh` network `v_theta(x, t)` with hand-written forward,
//! reverse and forward-over-reverse passes.
//!
//! Input is `[x, t, sin 2 pi t, cos 2 pi t, sin 4 pi t, cos 4 pi t]`; hidden
//! layers use `tanh`; the output layer is affine.

use std::io::{Read, Write};
use std::path::Path;

use super::VelocityField;
use crate::error::{FlowError, Result};
use crate::tensor::{dot, Rng};

pub const TIME_FEATURES: usize = 5;
pub const FLWM_MAGIC: &[u8; 4] = b"FLWM";
pub const FLWM_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocity {
    dim: usize,
    /// Layer widths including input (`dim + TIME_FEATURES`) and output (`dim`).
    widths: Vec<usize>,
    /// Per layer: row-major weights (`out x in`) followed by biases.
    params: Vec<f64>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let w = 2.0 * std::f64::consts::PI * t;
    [t, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
}

impl MlpVelocity {
    /// Glorot-uniform hidden layers, zero-initialised output layer.
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim + TIME_FEATURES);
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut params = Vec::new();
        let n_layers = widths.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let last = l + 1 == n_layers;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(if last { 0.0 } else { rng.uniform_range(-bound, bound) });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        MlpVelocity { dim, widths, params }
    }

    pub fn from_parts(dim: usize, widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths[0] != dim + TIME_FEATURES || *widths.last().unwrap() != dim {
            return Err(FlowError::shape(format!(
                "layer widths {widths:?} incompatible with dimension {dim}"
            )));
        }
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(FlowError::shape(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(MlpVelocity { dim, widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn offset(&self, layer: usize) -> usize {
        self.widths[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, biases)` of a layer.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.offset(l);
        let (cols, rows) = (self.widths[l], self.widths[l + 1]);
        let w = &self.params[off..off + rows * cols];
        let b = &self.params[off + rows * cols..off + rows * cols + rows];
        (w, b)
    }

    fn input(&self, x: &[f64], t: f64) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        let mut a = Vec::with_capacity(self.widths[0]);
        a.extend_from_slice(x);
        a.extend_from_slice(&time_features(t));
        a
    }

    fn is_last(&self, l: usize) -> bool {
        l + 1 == self.n_layers()
    }

    pub fn forward(&self, x: &[f64], t: f64) -> MlpTape {
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(self.input(x, t));
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let cols = self.widths[l];
            let a = acts.last().unwrap();
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(i, bi)| bi + dot(&w[i * cols..(i + 1) * cols], a))
                .collect();
            if !self.is_last(l) {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        MlpTape { acts }
    }

    /// Reverse sweep with output cotangent `w_out`. Accumulates parameter
    /// gradients into `param_grad` when given; returns the gradient with
    /// respect to `x`.
    pub fn backward(&self, tape: &MlpTape, w_out: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut adj = w_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w, _) = self.layer(l);
            let (cols, rows) = (self.widths[l], self.widths[l + 1]);
            if !self.is_last(l) {
                let h = &tape.acts[l + 1];
                adj.iter_mut().zip(h).for_each(|(g, hv)| *g *= 1.0 - hv * hv);
            }
            let a = &tape.acts[l];
            if let Some(pg) = param_grad.as_deref_mut() {
                let off = self.offset(l);
                for i in 0..rows {
                    let gi = adj[i];
                    if gi != 0.0 {
                        let dst = &mut pg[off + i * cols..off + (i + 1) * cols];
                        dst.iter_mut().zip(a).for_each(|(d, av)| *d += gi * av);
                    }
                    pg[off + rows * cols + i] += gi;
                }
            }
            let mut prev = vec![0.0; cols];
            for i in 0..rows {
                let gi = adj[i];
                if gi != 0.0 {
                    prev.iter_mut()
                        .zip(&w[i * cols..(i + 1) * cols])
                        .for_each(|(p, wv)| *p += gi * wv);
                }
            }
            adj = prev;
        }
        adj.truncate(self.dim);
        adj
    }

    /// Forward pass together with the tangent `(d a_l / dx) u` of every layer.
    fn forward_tangent(&self, x: &[f64], t: f64, u: &[f64]) -> (MlpTape, Vec<Vec<f64>>) {
        let tape = self.forward(x, t);
        let mut tangents = Vec::with_capacity(self.widths.len());
        let mut tan0 = u.to_vec();
        tan0.extend_from_slice(&[0.0; TIME_FEATURES]);
        tangents.push(tan0);
        // pre-activation tangents are stored for hidden layers; the caller
        // needs them for the second-order sweep.
        let mut pre = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let (w, _) = self.layer(l);
            let cols = self.widths[l];
            let rows = self.widths[l + 1];
            let a = tangents.last().unwrap();
            let zt: Vec<f64> = (0..rows).map(|i| dot(&w[i * cols..(i + 1) * cols], a)).collect();
            let at = if self.is_last(l) {
                zt.clone()
            } else {
                let h = &tape.acts[l + 1];
                zt.iter().zip(h).map(|(z, hv)| z * (1.0 - hv * hv)).collect()
            };
            pre.push(zt);
            tangents.push(at);
        }
        // tangents[l] = d a_l; append pre-activation tangents after them
        tangents.extend(pre);
        (tape, tangents)
    }

    fn jvp_impl(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let (_, tangents) = self.forward_tangent(x, t, u);
        tangents[self.n_layers()].clone()
    }

    fn grad_of_jvp_probe_impl(&self, x: &[f64], t: f64, eps: &[f64]) -> Vec<f64> {
        let n = self.n_layers();
        let (tape, tangents) = self.forward_tangent(x, t, eps);
        let pre_tan = |l: usize| &tangents[n + 1 + l];
        // g = eps . a_L'; sweep back through both the primal and tangent graphs.
        let mut adj_tan = eps.to_vec();
        let mut adj = vec![0.0; self.dim];
        for l in (0..n).rev() {
            let (w, _) = self.layer(l);
            let (cols, rows) = (self.widths[l], self.widths[l + 1]);
            let (adj_zt, adj_z) = if self.is_last(l) {
                (adj_tan.clone(), adj.clone())
            } else {
                let h = &tape.acts[l + 1];
                let zt = pre_tan(l);
                let mut adj_zt = vec![0.0; rows];
                let mut adj_z = vec![0.0; rows];
                for i in 0..rows {
                    let s = 1.0 - h[i] * h[i];
                    adj_zt[i] = s * adj_tan[i];
                    let adj_s = zt[i] * adj_tan[i];
                    let adj_h = adj[i] - 2.0 * h[i] * adj_s;
                    adj_z[i] = s * adj_h;
                }
                (adj_zt, adj_z)
            };
            let mut prev_tan = vec![0.0; cols];
            let mut prev = vec![0.0; cols];
            for i in 0..rows {
                let row = &w[i * cols..(i + 1) * cols];
                let (gt, gp) = (adj_zt[i], adj_z[i]);
                for j in 0..cols {
                    prev_tan[j] += gt * row[j];
                    prev[j] += gp * row[j];
                }
            }
            adj_tan = prev_tan;
            adj = prev;
        }
        adj.truncate(self.dim);
        adj
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FLWM_MAGIC)?;
        w.write_all(&[FLWM_VERSION])?;
        w.write_all(&(self.n_layers() as u32).to_le_bytes())?;
        for l in 0..self.n_layers() {
            let (weights, biases) = self.layer(l);
            w.write_all(&(self.widths[l + 1] as u32).to_le_bytes())?;
            w.write_all(&(self.widths[l] as u32).to_le_bytes())?;
            let mut buf = Vec::with_capacity((weights.len() + biases.len()) * 8);
            for v in weights.iter().chain(biases) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |reason: String| FlowError::Format { kind: "FLWM", reason };
        let mut head = [0u8; 5];
        r.read_exact(&mut head).map_err(|e| bad(e.to_string()))?;
        if &head[..4] != FLWM_MAGIC {
            return Err(bad(format!("bad magic {:?}", &head[..4])));
        }
        if head[4] != FLWM_VERSION {
            return Err(bad(format!("unsupported version {}", head[4])));
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut b4).map_err(|e| bad(e.to_string()))?;
            Ok(u32::from_le_bytes(b4) as usize)
        };
        let n_layers = read_u32(r)?;
        if n_layers == 0 || n_layers > 64 {
            return Err(bad(format!("implausible layer count {n_layers}")));
        }
        let mut widths = Vec::new();
        let mut params = Vec::new();
        for l in 0..n_layers {
            let rows = read_u32(r)?;
            let cols = read_u32(r)?;
            if l == 0 {
                widths.push(cols);
            } else if widths[l] != cols {
                return Err(bad(format!("layer {l} expects {} inputs, has {cols}", widths[l])));
            }
            widths.push(rows);
            let mut buf = vec![0u8; (rows * cols + rows) * 8];
            r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
            params.extend(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        }
        let dim = *widths.last().unwrap();
        Self::from_parts(dim, widths, params).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| FlowError::io(path, e))?,
        );
        self.write_checkpoint(&mut f).map_err(|e| FlowError::io(path, e))?;
        f.flush().map_err(|e| FlowError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| FlowError::io(path, e))?);
        Self::read_checkpoint(&mut f)
    }
}

impl VelocityField for MlpVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(x, t).acts.pop().unwrap()
    }

    fn jvp(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        self.jvp_impl(x, t, u)
    }

    fn vjp(&self, x: &[f64], t: f64, w: &[f64]) -> Vec<f64> {
        let tape = self.forward(x, t);
        self.backward(&tape, w, None)
    }

    fn eval_then_vjp(
        &self,
        x: &[f64],
        t: f64,
        cotangent: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let tape = self.forward(x, t);
        let w = cotangent(tape.output());
        let g = self.backward(&tape, &w, None);
        (tape.output().to_vec(), g)
    }

    fn grad_of_jvp_probe(&self, x: &[f64], t: f64, eps: &[f64]) -> Vec<f64> {
        self.grad_of_jvp_probe_impl(x, t, eps)
    }
}
