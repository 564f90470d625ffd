//! Dense feed-forward networks with exact reverse-mode gradients, and Adam.
//!
//! Parameters of an [`Mlp`] live in one flat buffer. Layer `l` stores its
//! weight matrix `W_l` (`in × out`, row-major) followed by its bias `b_l`.
//! Gradients returned by [`Mlp::backward`] use the same layout, which lets
//! [`Adam`] operate on plain slices.
//!
//! Hidden layers use a leaky rectifier; the output layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input value at flat index {0}")]
    NonFiniteInput(usize),
    #[error("non-finite gradient at parameter {index} (value {value})")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NnError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NnError::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// `c = a·b + beta·c` with explicit strides, all dimensions checked against
/// the slices before entering the kernel.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, rs: usize, cc: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(m, rsa, k, csa) < a.len(), "gemm: lhs out of bounds");
        assert!(last(k, rsb, n, csb) < b.len(), "gemm: rhs out of bounds");
    }
    assert!(last(m, rsc, n, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Multilayer perceptron: leaky-rectified hidden layers, affine output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    slope: f64,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward`], consumed by [`Mlp::backward`].
///
/// Holding the tape by value means a backward pass can run at most once per
/// forward record.
#[derive(Debug)]
pub struct Tape {
    widths: Vec<usize>,
    // inputs to every layer: layer_inputs[0] is the network input
    layer_inputs: Vec<Matrix>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.layer_inputs[0].rows()
    }
}

fn n_params_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Zero-initialised network.
    pub fn zeros(widths: &[usize], slope: f64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NnError::Architecture(format!("widths {widths:?}")));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(NnError::Architecture(format!("leaky slope {slope} not in (0,1)")));
        }
        Ok(Mlp { widths: widths.to_vec(), slope, params: vec![0.0; n_params_for(widths)] })
    }

    /// He-style uniform fan-in initialisation (gain for the leaky rectifier);
    /// biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, slope)?;
        let gain2 = 2.0 / (1.0 + slope * slope);
        for l in 0..net.n_layers() {
            let fan_in = net.widths[l] as f64;
            let bound = (3.0 * gain2 / fan_in).sqrt();
            let (w, _) = net.layer_mut(l);
            w.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], slope: f64, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths, slope)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape(format!(
                "{} parameters for widths {widths:?} (need {})",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        n_params_for(&self.widths[..=layer])
    }

    /// Weight (`in × out`, row-major) and bias slices of one layer.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        let (w, b) = self.params[start..start + i * o + o].split_at(i * o);
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        self.params[start..start + i * o + o].split_at_mut(i * o)
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input width {} but network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if let Some(i) = inputs.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput(i));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &Matrix) -> Matrix {
        let (w, b) = self.layer(l);
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let mut y = Matrix::zeros(x.rows(), o);
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm(x.rows(), i, o, x.as_slice(), i, 1, w, o, 1, 1.0, y.as_mut_slice(), o, 1);
        y
    }

    fn activate(&self, z: &mut Matrix) {
        let s = self.slope;
        z.as_mut_slice().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= s
            }
        });
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let last = self.n_layers() - 1;
        let mut x = self.affine(0, inputs);
        for l in 1..=last {
            self.activate(&mut x);
            x = self.affine(l, &x);
        }
        Ok(x)
    }

    /// Forward pass recording the activations needed by [`Mlp::backward`].
    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.n_layers());
        layer_inputs.push(inputs.clone());
        let mut x = self.affine(0, inputs);
        for l in 1..self.n_layers() {
            self.activate(&mut x);
            let next = self.affine(l, &x);
            layer_inputs.push(x);
            x = next;
        }
        Ok((x, Tape { widths: self.widths.clone(), layer_inputs }))
    }

    /// Parameter gradients given upstream gradients of the outputs.
    pub fn backward(&self, tape: Tape, output_grads: &Matrix) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.n_params()];
        self.backward_into(tape, output_grads, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Mlp::backward`], but accumulates into `grads`.
    pub fn backward_into(&self, tape: Tape, output_grads: &Matrix, grads: &mut [f64]) -> Result<()> {
        if tape.widths != self.widths {
            return Err(NnError::Shape("tape was recorded by a different architecture".into()));
        }
        if grads.len() != self.n_params() {
            return Err(NnError::Shape(format!(
                "gradient buffer has {} entries, network has {}",
                grads.len(),
                self.n_params()
            )));
        }
        let batch = tape.batch();
        if output_grads.rows() != batch || output_grads.cols() != self.output_dim() {
            return Err(NnError::Shape(format!(
                "output grads {}x{} but outputs are {}x{}",
                output_grads.rows(),
                output_grads.cols(),
                batch,
                self.output_dim()
            )));
        }
        let mut dz = output_grads.clone();
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let x = &tape.layer_inputs[l];
            let start = self.offset(l);
            {
                let (gw, gb) = grads[start..start + i * o + o].split_at_mut(i * o);
                // dW += xᵀ · dz
                gemm(i, batch, o, x.as_slice(), 1, i, dz.as_slice(), o, 1, 1.0, gw, o, 1);
                for r in 0..batch {
                    gb.iter_mut().zip(dz.row(r)).for_each(|(g, d)| *g += d);
                }
            }
            if l == 0 {
                break;
            }
            // dx = dz · Wᵀ, then through the activation of layer l-1
            let (w, _) = self.layer(l);
            let mut dx = Matrix::zeros(batch, i);
            gemm(batch, o, i, dz.as_slice(), o, 1, w, 1, o, 0.0, dx.as_mut_slice(), i, 1);
            let s = self.slope;
            dx.as_mut_slice().iter_mut().zip(x.as_slice()).for_each(|(d, a)| {
                if *a < 0.0 {
                    *d *= s
                }
            });
            dz = dx;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One update. Fails without touching anything if shapes disagree or a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index, value });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Scales all gradient slices jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = groups.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        groups.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}
