use serde::{Deserialize, Serialize};

use super::{Matrix, NeuralError, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. Gradients are validated before any parameter moves.
    pub fn apply<P: Params + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<(), NeuralError> {
        let mut grad_tensors: Vec<(String, Vec<f64>, usize, usize)> = Vec::new();
        grads.visit("", &mut |name, g| {
            grad_tensors.push((name.to_string(), g.as_slice().to_vec(), g.rows(), g.cols()))
        });
        for (name, g, _, _) in &grad_tensors {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::Training(format!("non-finite gradient in `{name}`")));
            }
        }
        let mut shapes_ok = true;
        let mut idx = 0;
        params.visit("", &mut |_, p| {
            match grad_tensors.get(idx) {
                Some((_, _, r, c)) if *r == p.rows() && *c == p.cols() => {}
                _ => shapes_ok = false,
            }
            idx += 1;
        });
        if !shapes_ok || idx != grad_tensors.len() {
            return Err(NeuralError::Shape("gradients do not match parameters".into()));
        }
        if self.first.is_empty() {
            self.first = grad_tensors.iter().map(|(_, g, _, _)| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grad_tensors.len()
            || self.first.iter().zip(&grad_tensors).any(|(m, (_, g, _, _))| m.len() != g.len())
        {
            return Err(NeuralError::Shape("optimizer moments do not match parameters".into()));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let mut idx = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut("", &mut |_, p: &mut Matrix| {
            let g = &grad_tensors[idx].1;
            let m = &mut first[idx];
            let v = &mut second[idx];
            for (((w, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

/// One optimization step: evaluates `loss_grad` at the current parameters and
/// applies the update. Returns the loss before the update.
pub fn train_step<P, F>(params: &mut P, state: &mut OptimizerState, loss_grad: F) -> Result<f64, NeuralError>
where
    P: Params,
    F: FnOnce(&P) -> (f64, P),
{
    let (loss, grads) = loss_grad(params);
    if !loss.is_finite() {
        return Err(NeuralError::Training(format!("non-finite loss {loss}")));
    }
    state.apply(params, &grads)?;
    Ok(loss)
}
