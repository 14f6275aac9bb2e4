use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::sigmoid;
use super::{join, Matrix, NeuralError, Params};

/// One direction of a gated recurrent unit.
///
/// ```text
/// r  = σ(W_r x + U_r h + b_r)
/// z  = σ(W_z x + U_z h + b_z)
/// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Matrix,
}

/// Activations kept from a forward pass for backpropagation through time.
#[derive(Clone, Debug)]
pub struct GruTrace {
    /// `(T + 1) × H`; row 0 is the zero initial state, row `t + 1` is `h_t`.
    pub h: Matrix,
    pub z: Matrix,
    pub r: Matrix,
    pub n: Matrix,
}

impl GruTrace {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output(&self, t: usize) -> &[f64] {
        self.h.row(t + 1)
    }

    pub fn last(&self) -> &[f64] {
        self.h.row(self.len())
    }
}

impl GruParams {
    /// Weights uniform in `±1/sqrt(fan_in)`; biases use the hidden fan-in.
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let hb = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            w_z: Matrix::init_fan_in(hidden_dim, input_dim, rng),
            u_z: Matrix::init_fan_in(hidden_dim, hidden_dim, rng),
            b_z: Matrix::uniform(hidden_dim, 1, hb, rng),
            w_r: Matrix::init_fan_in(hidden_dim, input_dim, rng),
            u_r: Matrix::init_fan_in(hidden_dim, hidden_dim, rng),
            b_r: Matrix::uniform(hidden_dim, 1, hb, rng),
            w_h: Matrix::init_fan_in(hidden_dim, input_dim, rng),
            u_h: Matrix::init_fan_in(hidden_dim, hidden_dim, rng),
            b_h: Matrix::uniform(hidden_dim, 1, hb, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let z = Matrix::zeros;
        Self {
            w_z: z(hidden_dim, input_dim),
            u_z: z(hidden_dim, hidden_dim),
            b_z: z(hidden_dim, 1),
            w_r: z(hidden_dim, input_dim),
            u_r: z(hidden_dim, hidden_dim),
            b_r: z(hidden_dim, 1),
            w_h: z(hidden_dim, input_dim),
            u_h: z(hidden_dim, hidden_dim),
            b_h: z(hidden_dim, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn check_input(&self, xs: &Matrix) -> Result<(), NeuralError> {
        if xs.rows() > 0 && xs.cols() != self.input_dim() {
            return Err(NeuralError::Config(format!(
                "GRU expects inputs of length {}, got {}",
                self.input_dim(),
                xs.cols()
            )));
        }
        Ok(())
    }

    /// Runs the recurrence over the rows of `xs` in order (or reversed when
    /// `reverse` is set; trace rows are then in processing order).
    pub fn forward(&self, xs: &Matrix, reverse: bool) -> Result<GruTrace, NeuralError> {
        self.check_input(xs)?;
        let t_len = xs.rows();
        let hd = self.hidden_dim();
        let mut trace = GruTrace {
            h: Matrix::zeros(t_len + 1, hd),
            z: Matrix::zeros(t_len, hd),
            r: Matrix::zeros(t_len, hd),
            n: Matrix::zeros(t_len, hd),
        };
        let mut az = vec![0.0; hd];
        let mut ar = vec![0.0; hd];
        let mut an = vec![0.0; hd];
        let mut rh = vec![0.0; hd];
        for step in 0..t_len {
            let x = xs.row(if reverse { t_len - 1 - step } else { step });
            let h_prev = trace.h.row(step).to_vec();
            az.copy_from_slice(self.b_z.as_slice());
            ar.copy_from_slice(self.b_r.as_slice());
            an.copy_from_slice(self.b_h.as_slice());
            self.w_z.matvec_add(x, &mut az);
            self.u_z.matvec_add(&h_prev, &mut az);
            self.w_r.matvec_add(x, &mut ar);
            self.u_r.matvec_add(&h_prev, &mut ar);
            for i in 0..hd {
                let r = sigmoid(ar[i]);
                trace.r.set(step, i, r);
                rh[i] = r * h_prev[i];
            }
            self.w_h.matvec_add(x, &mut an);
            self.u_h.matvec_add(&rh, &mut an);
            for i in 0..hd {
                let z = sigmoid(az[i]);
                let n = an[i].tanh();
                trace.z.set(step, i, z);
                trace.n.set(step, i, n);
                trace.h.set(step + 1, i, (1.0 - z) * h_prev[i] + z * n);
            }
        }
        Ok(trace)
    }

    /// Backpropagation through time. `dh` holds `dL/dh_t` for every step in
    /// processing order. Returns `dL/dx` in the original input order.
    pub fn backward(
        &self,
        xs: &Matrix,
        reverse: bool,
        trace: &GruTrace,
        dh: &Matrix,
        grads: &mut GruParams,
    ) -> Matrix {
        let t_len = trace.len();
        let hd = self.hidden_dim();
        let mut dxs = Matrix::zeros(t_len, self.input_dim());
        let mut carry = vec![0.0; hd];
        let mut dhp = vec![0.0; hd];
        let mut daz = vec![0.0; hd];
        let mut dar = vec![0.0; hd];
        let mut dan = vec![0.0; hd];
        let mut rh = vec![0.0; hd];
        let mut drh = vec![0.0; hd];
        for step in (0..t_len).rev() {
            let xi = if reverse { t_len - 1 - step } else { step };
            let x = xs.row(xi);
            let h_prev = trace.h.row(step);
            let z = trace.z.row(step);
            let r = trace.r.row(step);
            let n = trace.n.row(step);
            let dh_row = dh.row(step);
            for i in 0..hd {
                let g = dh_row[i] + carry[i];
                dhp[i] = g * (1.0 - z[i]);
                let dz = g * (n[i] - h_prev[i]);
                let dn = g * z[i];
                dan[i] = dn * (1.0 - n[i] * n[i]);
                daz[i] = dz * z[i] * (1.0 - z[i]);
                rh[i] = r[i] * h_prev[i];
            }
            drh.iter_mut().for_each(|v| *v = 0.0);
            self.u_h.t_matvec_add(&dan, &mut drh);
            for i in 0..hd {
                dhp[i] += drh[i] * r[i];
                let dr = drh[i] * h_prev[i];
                dar[i] = dr * r[i] * (1.0 - r[i]);
            }
            grads.w_h.add_outer(&dan, x);
            grads.u_h.add_outer(&dan, &rh);
            grads.b_h.add_column(&dan);
            grads.w_z.add_outer(&daz, x);
            grads.u_z.add_outer(&daz, h_prev);
            grads.b_z.add_column(&daz);
            grads.w_r.add_outer(&dar, x);
            grads.u_r.add_outer(&dar, h_prev);
            grads.b_r.add_column(&dar);
            self.u_z.t_matvec_add(&daz, &mut dhp);
            self.u_r.t_matvec_add(&dar, &mut dhp);
            let dx = dxs.row_mut(xi);
            self.w_h.t_matvec_add(&dan, dx);
            self.w_z.t_matvec_add(&daz, dx);
            self.w_r.t_matvec_add(&dar, dx);
            carry.copy_from_slice(&dhp);
        }
        dxs
    }
}

impl Params for GruParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        f(&join(prefix, "w_z"), &self.w_z);
        f(&join(prefix, "u_z"), &self.u_z);
        f(&join(prefix, "b_z"), &self.b_z);
        f(&join(prefix, "w_r"), &self.w_r);
        f(&join(prefix, "u_r"), &self.u_r);
        f(&join(prefix, "b_r"), &self.b_r);
        f(&join(prefix, "w_h"), &self.w_h);
        f(&join(prefix, "u_h"), &self.u_h);
        f(&join(prefix, "b_h"), &self.b_h);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f(&join(prefix, "w_z"), &mut self.w_z);
        f(&join(prefix, "u_z"), &mut self.u_z);
        f(&join(prefix, "b_z"), &mut self.b_z);
        f(&join(prefix, "w_r"), &mut self.w_r);
        f(&join(prefix, "u_r"), &mut self.u_r);
        f(&join(prefix, "b_r"), &mut self.b_r);
        f(&join(prefix, "w_h"), &mut self.w_h);
        f(&join(prefix, "u_h"), &mut self.u_h);
        f(&join(prefix, "b_h"), &mut self.b_h);
    }
}

/// Forward and backward GRUs whose outputs are concatenated per timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiGru {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

#[derive(Clone, Debug)]
pub struct BiGruTrace {
    pub fwd: GruTrace,
    pub bwd: GruTrace,
}

impl BiGruTrace {
    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }

    /// `[h⃗_t, h⃖_t]` for input position `t`.
    pub fn output(&self, t: usize) -> Vec<f64> {
        let n = self.len();
        let mut v = self.fwd.output(t).to_vec();
        v.extend_from_slice(self.bwd.output(n - 1 - t));
        v
    }

    pub fn outputs(&self) -> Matrix {
        let n = self.len();
        let hd = self.fwd.h.cols();
        let mut m = Matrix::zeros(n, 2 * hd);
        for t in 0..n {
            m.row_mut(t)[..hd].copy_from_slice(self.fwd.output(t));
            m.row_mut(t)[hd..].copy_from_slice(self.bwd.output(n - 1 - t));
        }
        m
    }

    /// Final states of both directions: `h⃗_T` and `h⃖_1`.
    pub fn final_states(&self) -> Vec<f64> {
        let mut v = self.fwd.last().to_vec();
        v.extend_from_slice(self.bwd.last());
        v
    }
}

impl BiGru {
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let fwd = GruParams::new(input_dim, hidden_dim, rng);
        let bwd = GruParams::new(input_dim, hidden_dim, rng);
        Self { fwd, bwd }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            fwd: GruParams::zeros(input_dim, hidden_dim),
            bwd: GruParams::zeros(input_dim, hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn forward(&self, xs: &Matrix) -> Result<BiGruTrace, NeuralError> {
        Ok(BiGruTrace {
            fwd: self.fwd.forward(xs, false)?,
            bwd: self.bwd.forward(xs, true)?,
        })
    }

    /// `d_out` is `T × 2H`, indexed by input position. Returns `dL/dx`.
    pub fn backward(&self, xs: &Matrix, trace: &BiGruTrace, d_out: &Matrix, grads: &mut BiGru) -> Matrix {
        let n = trace.len();
        let hd = self.hidden_dim();
        let mut dh_f = Matrix::zeros(n, hd);
        let mut dh_b = Matrix::zeros(n, hd);
        for t in 0..n {
            dh_f.row_mut(t).copy_from_slice(&d_out.row(t)[..hd]);
            dh_b.row_mut(n - 1 - t).copy_from_slice(&d_out.row(t)[hd..]);
        }
        let mut dx = self.fwd.backward(xs, false, &trace.fwd, &dh_f, &mut grads.fwd);
        let dx_b = self.bwd.backward(xs, true, &trace.bwd, &dh_b, &mut grads.bwd);
        dx.add_scaled(&dx_b, 1.0);
        dx
    }

    /// Backward pass when the loss only depends on [`BiGruTrace::final_states`].
    pub fn backward_final(&self, xs: &Matrix, trace: &BiGruTrace, d_final: &[f64], grads: &mut BiGru) -> Matrix {
        let n = trace.len();
        let hd = self.hidden_dim();
        let mut dh_f = Matrix::zeros(n, hd);
        let mut dh_b = Matrix::zeros(n, hd);
        if n > 0 {
            dh_f.row_mut(n - 1).copy_from_slice(&d_final[..hd]);
            dh_b.row_mut(n - 1).copy_from_slice(&d_final[hd..]);
        }
        let mut dx = self.fwd.backward(xs, false, &trace.fwd, &dh_f, &mut grads.fwd);
        let dx_b = self.bwd.backward(xs, true, &trace.bwd, &dh_b, &mut grads.bwd);
        dx.add_scaled(&dx_b, 1.0);
        dx
    }
}

impl Params for BiGru {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
    }
}
