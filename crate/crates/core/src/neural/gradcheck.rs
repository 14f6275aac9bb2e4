use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{flatten, Matrix, NeuralError, Params};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Minimum number of sampled coordinates (all of them when the model is smaller).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// Coordinates are sampled per tensor (at least a few from every tensor) so a
/// fault confined to one matrix cannot hide. The error for one coordinate is
/// `|g_a − g_fd| / max(1, |g_a|, |g_fd|)`.
pub fn grad_check<P, F>(params: &P, loss_grad: F, cfg: GradCheckConfig) -> Result<GradCheckReport, NeuralError>
where
    P: Params + Clone,
    F: Fn(&P) -> (f64, P),
{
    let (loss0, analytic) = loss_grad(params);
    if !loss0.is_finite() {
        return Err(NeuralError::Check(format!("non-finite loss {loss0}")));
    }
    let analytic = flatten(&analytic);

    let mut tensors: Vec<(String, usize, usize)> = Vec::new();
    let mut offset = 0;
    params.visit("", &mut |name, m: &Matrix| {
        tensors.push((name.to_string(), offset, m.len()));
        offset += m.len();
    });
    let total = offset;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= cfg.samples {
        for (ti, (_, start, len)) in tensors.iter().enumerate() {
            coords.extend((*start..start + len).map(|c| (ti, c)));
        }
    } else {
        for (ti, (_, start, len)) in tensors.iter().enumerate() {
            let share = ((cfg.samples as f64 * *len as f64 / total as f64).ceil() as usize).max(4);
            let k = share.min(*len);
            coords.extend(sample(&mut rng, *len, k).into_iter().map(|i| (ti, start + i)));
        }
    }

    let base = flatten(params);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    for &(ti, c) in &coords {
        let mut values = base.clone();
        values[c] = base[c] + cfg.eps;
        super::assign_flat(&mut probe, &values);
        let lp = loss_grad(&probe).0;
        values[c] = base[c] - cfg.eps;
        super::assign_flat(&mut probe, &values);
        let lm = loss_grad(&probe).0;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(NeuralError::Check(format!("non-finite perturbed loss in `{}`", tensors[ti].0)));
        }
        let fd = (lp - lm) / (2.0 * cfg.eps);
        let ga = analytic[c];
        let err = (ga - fd).abs() / 1.0f64.max(ga.abs()).max(fd.abs());
        if err > worst {
            worst = err;
            worst_param = tensors[ti].0.clone();
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_param,
        checked: coords.len(),
    })
}
