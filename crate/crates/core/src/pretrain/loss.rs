use serde::{Deserialize, Serialize};

use super::mask::MaskPlan;
use super::targets::Targets;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Denominator of the local term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalNorm {
    /// Sum over masked tokens divided by all N tokens.
    #[default]
    OverN,
    /// Sum over masked tokens divided by the masked count.
    OverMasked,
}

impl LocalNorm {
    fn denom(self, plan: &MaskPlan) -> f64 {
        match self {
            LocalNorm::OverN => plan.n as f64,
            LocalNorm::OverMasked => plan.masked.len().max(1) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewLoss {
    pub global: f64,
    pub local: f64,
}

/// `total` is always exactly `global + local`; there is no weighting knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global: f64,
    pub local: f64,
    pub total: f64,
    pub views: Vec<ViewLoss>,
}

impl LossReport {
    /// Averages the view terms separately and sums the averages.
    pub fn from_views(views: Vec<ViewLoss>) -> Self {
        let k = views.len().max(1) as f64;
        let global = views.iter().map(|v| v.global).sum::<f64>() / k;
        let local = views.iter().map(|v| v.local).sum::<f64>() / k;
        LossReport {
            global,
            local,
            total: global + local,
            views,
        }
    }
}

/// `‖o − o_m‖²` and the masked-token squared error, from plain tensors.
pub fn mlr_loss(targets: &Targets, z_pred: &Tensor, o_m: &[f64], plan: &MaskPlan, norm: LocalNorm) -> Result<LossReport> {
    if z_pred.shape() != targets.z.shape() || o_m.len() != targets.o.len() {
        return Err(Error::shape(
            "mlr_loss",
            format!("prediction {:?} / {} vs targets {:?}", z_pred.shape(), o_m.len(), targets.z.shape()),
        ));
    }
    let global = targets.o.iter().zip(o_m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let sq: f64 = plan
        .masked
        .iter()
        .map(|&i| targets.z.row(i).iter().zip(z_pred.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok(LossReport::from_views(vec![ViewLoss {
        global,
        local: sq / norm.denom(plan),
    }]))
}

/// Tape form of [`mlr_loss`]; returns the global and local terms.
pub fn mlr_loss_tape(
    tape: &mut Tape,
    targets: &Targets,
    z_pred: Var,
    o_m: Var,
    plan: &MaskPlan,
    norm: LocalNorm,
) -> Result<(Var, Var)> {
    let d = targets.o.len();
    let o = tape.constant(Tensor::matrix(1, d, targets.o.clone())?);
    let diff = tape.sub(o, o_m)?;
    let global = tape.sum_squares(diff)?;
    let z = tape.constant(targets.z.gather_rows(&plan.masked)?);
    let pred = tape.gather_rows(z_pred, &plan.masked)?;
    let diff = tape.sub(z, pred)?;
    let sq = tape.sum_squares(diff)?;
    let local = tape.scale(sq, 1.0 / norm.denom(plan))?;
    Ok((global, local))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets() -> Targets {
        let z = Tensor::matrix(8, 2, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let o = z.mean_axis(0).unwrap().into_data();
        Targets { z, o }
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = targets();
        let plan = MaskPlan::from_masked(8, vec![1, 4, 6]).unwrap();
        let r = mlr_loss(&t, &t.z, &t.o, &plan, LocalNorm::OverN).unwrap();
        assert_eq!((r.global, r.local, r.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_masked_token_arithmetic() {
        let t = targets();
        let plan = MaskPlan::from_masked(8, vec![3]).unwrap();
        let mut pred = t.z.clone();
        pred.row_mut(3)[0] += 2.0;
        // an unmasked error must not count
        pred.row_mut(5)[1] += 7.0;
        let n = mlr_loss(&t, &pred, &t.o, &plan, LocalNorm::OverN).unwrap();
        assert!((n.local - 0.5).abs() < 1e-15);
        let m = mlr_loss(&t, &pred, &t.o, &plan, LocalNorm::OverMasked).unwrap();
        assert!((m.local - 4.0).abs() < 1e-15);
        assert_eq!(m.local / n.local, 8.0);
    }

    #[test]
    fn tape_matches_plain() {
        let t = targets();
        let plan = MaskPlan::from_masked(8, vec![0, 2, 7]).unwrap();
        let pred = t.z.map(|v| v * 1.3 - 0.2);
        let om = vec![0.4, -0.9];
        let plain = mlr_loss(&t, &pred, &om, &plan, LocalNorm::OverMasked).unwrap();
        let mut tape = Tape::new(crate::numerics::Dtype::F64);
        let p = tape.constant(pred);
        let o = tape.constant(Tensor::matrix(1, 2, om).unwrap());
        let (g, l) = mlr_loss_tape(&mut tape, &t, p, o, &plan, LocalNorm::OverMasked).unwrap();
        assert!((tape.value(g).item() - plain.global).abs() < 1e-14);
        assert!((tape.value(l).item() - plain.local).abs() < 1e-14);
        assert_eq!(plain.total, plain.global + plain.local);
    }
}
