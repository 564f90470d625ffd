use super::{GflowNet, Result, TrainError, Trajectory};
use crate::nn::Matrix;
use crate::policy::TrajectoryState;

/// Trajectory-balance loss with gradients for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TbLoss {
    pub loss: f64,
    pub grad_log_z: f64,
    pub grad_forward: Vec<f64>,
    pub grad_backward: Vec<f64>,
    /// Per-trajectory `log Z + Σ log p_F − log R − Σ log p_B`.
    pub residuals: Vec<f64>,
}

/// Mean squared balance residual over `batch`.
///
/// Forward and backward log-densities are recomputed under the current
/// policies from the stored increments, so stale values recorded at
/// rollout time never enter the loss.
pub fn tb_loss(batch: &[Trajectory], gfn: &GflowNet) -> Result<TbLoss> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty batch".into()));
    }
    let horizon = gfn.horizon();
    for (i, t) in batch.iter().enumerate() {
        if t.horizon() != horizon || t.states.len() != horizon + 1 {
            return Err(TrainError::Contract(format!("trajectory {i} has horizon {}", t.horizon())));
        }
        if !t.log_reward.is_finite() {
            return Err(TrainError::Contract(format!("trajectory {i} has zero or non-finite reward")));
        }
    }
    let b = batch.len();

    // forward rows: (trajectory, step t in 1..=T) scored at s_{t−1}
    let f_states: Vec<&TrajectoryState> = batch.iter().flat_map(|t| t.states[..horizon].iter()).collect();
    let (f_out, f_tape) = gfn.forward.outputs_with_tape(&f_states)?;
    let mut f_grad = Matrix::zeros(f_states.len(), gfn.forward.net().output_dim());
    let mut sum_pf = vec![0.0; b];
    for (r, out) in f_out.iter().enumerate() {
        let (i, s) = (r / horizon, r % horizon);
        sum_pf[i] += out.log_pdf_accumulate_grad(&batch[i].increments[s], 1.0, f_grad.row_mut(r));
    }

    // backward rows: steps t in 2..=T scored at s_t
    let per = horizon - 1;
    let b_states: Vec<&TrajectoryState> = batch.iter().flat_map(|t| t.states[2..].iter()).collect();
    let mut sum_pb = vec![0.0; b];
    let backward_pass = if horizon > 1 {
        let (b_out, b_tape) = gfn.backward.outputs_with_tape(&b_states)?;
        let mut b_grad = Matrix::zeros(b_states.len(), gfn.backward.net().output_dim());
        for (r, out) in b_out.iter().enumerate() {
            let (i, s) = (r / per, r % per + 2);
            let dec = batch[i].states[s].point().signed_diff(batch[i].states[s - 1].point());
            sum_pb[i] += out.log_pdf_accumulate_grad(&dec, 1.0, b_grad.row_mut(r));
        }
        Some((b_tape, b_grad))
    } else {
        None
    };

    let residuals: Vec<f64> =
        (0..b).map(|i| gfn.log_z + sum_pf[i] - batch[i].log_reward - sum_pb[i]).collect();
    let loss = residuals.iter().map(|d| d * d).sum::<f64>() / b as f64;
    let coef: Vec<f64> = residuals.iter().map(|d| 2.0 * d / b as f64).collect();
    let grad_log_z = coef.iter().sum();

    for r in 0..f_grad.rows() {
        let c = coef[r / horizon];
        f_grad.row_mut(r).iter_mut().for_each(|g| *g *= c);
    }
    let grad_forward = gfn.forward.net().backward(f_tape, &f_grad)?;
    let grad_backward = match backward_pass {
        Some((tape, mut g)) => {
            for r in 0..g.rows() {
                let c = -coef[r / per];
                g.row_mut(r).iter_mut().for_each(|v| *v *= c);
            }
            gfn.backward.net().backward(tape, &g)?
        }
        None => vec![0.0; gfn.backward.net().n_params()],
    };

    Ok(TbLoss { loss, grad_log_z, grad_forward, grad_backward, residuals })
}
