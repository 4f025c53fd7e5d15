//! Composite training loss over pose pairs `[Bt, 2, L, 12J+4]`.
//!
//! The reconstruction term compares normalized poses. Geometric terms
//! compare prediction and truth after both pass through the same
//! denormalization, so the ground truth is an exact fixed point.

use serde::{Deserialize, Serialize};

use super::{NormStats, PoseLayout, Skeleton};
use crate::diffusion::loss_diff;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keeps square roots differentiable at zero length.
const LEN_EPS: f64 = 1e-12;
const BCE_CLAMP: f64 = 1e-6;

pub const TERM_NAMES: [&str; 7] = ["diff", "vel", "foot", "bl", "dm", "ro", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vel: f64,
    pub foot: f64,
    pub bl: f64,
    pub dm: f64,
    pub ro: f64,
    /// Weight of the contact-flag cross entropy; 0 disables it.
    pub contact: f64,
    /// Inter-person distance below which joint pairs enter the distance loss.
    pub tau_dm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vel: 1.0, foot: 1.0, bl: 1.0, dm: 1.0, ro: 0.1, contact: 0.0, tau_dm: 1.0 }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self { vel: 0.0, foot: 0.0, bl: 0.0, dm: 0.0, ro: 0.0, contact: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub diff: Tensor,
    pub vel: Tensor,
    pub foot: Tensor,
    pub bl: Tensor,
    pub dm: Tensor,
    pub ro: Tensor,
    pub contact: Option<Tensor>,
    pub total: Tensor,
}

impl LossBreakdown {
    /// Scalar value of every term, in [`TERM_NAMES`] order, plus the
    /// contact term when enabled.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = [&self.diff, &self.vel, &self.foot, &self.bl, &self.dm, &self.ro, &self.total]
            .iter()
            .zip(TERM_NAMES)
            .map(|(t, n)| (n, t.data()[0]))
            .collect();
        if let Some(c) = &self.contact {
            out.push(("contact", c.data()[0]));
        }
        out
    }
}

/// Joint positions `[Bt, 2, L, J, 3]` of physical-unit poses.
pub fn positions(x: &Tensor, joints: usize) -> Result<Tensor> {
    let s = x.shape();
    let r = PoseLayout { joints }.positions();
    x.narrow(3, r.start, r.len())?.reshape(&[s[0], s[1], s[2], joints, 3])
}

fn frame_diff(pos: &Tensor) -> Result<Tensor> {
    let l = pos.dim(2);
    pos.narrow(2, 1, l - 1)?.sub(&pos.narrow(2, 0, l - 1)?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(a.sub(b)?.square().mean_all())
}

fn norm_last(v: &Tensor) -> Result<Tensor> {
    Ok(v.square().sum_axis(v.rank() - 1, false)?.add_scalar(LEN_EPS).sqrt())
}

/// Frame-difference velocity MSE.
pub fn loss_vel(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if pred.dim(2) < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    mse(&frame_diff(pred)?, &frame_diff(truth)?)
}

/// Squared predicted foot speed where the true contact flag is set,
/// averaged over every (frame, foot). `contacts` is `[Bt, 2, L, 4]`.
pub fn loss_foot(pred: &Tensor, contacts: &Tensor, feet: &[usize; 4]) -> Result<Tensor> {
    let l = pred.dim(2);
    if l < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    let speed2 = frame_diff(pred)?.select(3, feet)?.square().sum_axis(4, false)?;
    let mask: Vec<f64> = contacts.narrow(2, 1, l - 1)?.data().iter().map(|&c| if c > 0.5 { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, speed2.shape())?;
    Ok(speed2.mul(&mask)?.mean_all())
}

/// Per-frame bone lengths `[Bt, 2, L, bones]`.
pub fn bone_lengths(pos: &Tensor, skel: &Skeleton) -> Result<Tensor> {
    let (child, parent): (Vec<usize>, Vec<usize>) = skel.bones().into_iter().unzip();
    norm_last(&pos.select(3, &child)?.sub(&pos.select(3, &parent)?)?)
}

/// MSE between predicted and true per-frame bone lengths.
pub fn loss_bl(pred: &Tensor, truth: &Tensor, skel: &Skeleton) -> Result<Tensor> {
    mse(&bone_lengths(pred, skel)?, &bone_lengths(truth, skel)?)
}

/// Inter-person joint distances `[Bt, L, J, J]`.
pub fn distance_map(pos: &Tensor) -> Result<Tensor> {
    let (bt, l, j) = (pos.dim(0), pos.dim(2), pos.dim(3));
    let a = pos.narrow(1, 0, 1)?.reshape(&[bt, l, j, 1, 3])?;
    let b = pos.narrow(1, 1, 1)?.reshape(&[bt, l, 1, j, 3])?;
    norm_last(&a.sub(&b)?)
}

/// Squared distance-map error over joint pairs closer than `tau` in the
/// truth; zero when no pair qualifies.
pub fn loss_dm(pred: &Tensor, truth: &Tensor, tau: f64) -> Result<Tensor> {
    let d_true = distance_map(truth)?;
    let mask: Vec<f64> = d_true.data().iter().map(|&d| if d < tau { 1.0 } else { 0.0 }).collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mask = Tensor::from_vec(mask, d_true.shape())?;
    Ok(distance_map(pred)?.sub(&d_true)?.square().mul(&mask)?.sum_all().mul_scalar(1.0 / count))
}

fn dot_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.mul(b)?.sum_axis(a.rank() - 1, true)
}

fn unit(v: &Tensor) -> Result<Tensor> {
    let n = v.square().sum_axis(v.rank() - 1, true)?.add_scalar(LEN_EPS).sqrt();
    v.div(&n)
}

fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ax = a.rank() - 1;
    let c = |t: &Tensor, i| t.narrow(ax, i, 1);
    let x = c(a, 1)?.mul(&c(b, 2)?)?.sub(&c(a, 2)?.mul(&c(b, 1)?)?)?;
    let y = c(a, 2)?.mul(&c(b, 0)?)?.sub(&c(a, 0)?.mul(&c(b, 2)?)?)?;
    let z = c(a, 0)?.mul(&c(b, 1)?)?.sub(&c(a, 1)?.mul(&c(b, 0)?)?)?;
    Tensor::concat(&[&x, &y, &z], ax)
}

/// Differentiable Gram–Schmidt lift; returns the three columns.
pub fn rot6d_columns(r6: &Tensor) -> Result<[Tensor; 3]> {
    let ax = r6.rank() - 1;
    let b1 = unit(&r6.narrow(ax, 0, 3)?)?;
    let a2 = r6.narrow(ax, 3, 3)?;
    let b2 = unit(&a2.sub(&b1.mul(&dot_last(&b1, &a2)?)?)?)?;
    let b3 = cross(&b1, &b2)?;
    Ok([b1, b2, b3])
}

/// Entries of `R_aᵀ R_b` from root 6-D rotations `[Bt, 2, L, 6]`.
pub fn relative_rotation(r6: &Tensor) -> Result<Tensor> {
    let a = rot6d_columns(&r6.narrow(1, 0, 1)?)?;
    let b = rot6d_columns(&r6.narrow(1, 1, 1)?)?;
    let mut entries = Vec::with_capacity(9);
    for ai in &a {
        for bj in &b {
            entries.push(dot_last(ai, bj)?);
        }
    }
    Tensor::concat(&entries.iter().collect::<Vec<_>>(), r6.rank() - 1)
}

pub fn loss_ro(pred_r6: &Tensor, true_r6: &Tensor) -> Result<Tensor> {
    mse(&relative_rotation(pred_r6)?, &relative_rotation(true_r6)?)
}

fn loss_contact_bce(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let on = truth.mul(&p.ln())?;
    let off = truth.affine(-1.0, 1.0).mul(&p.affine(-1.0, 1.0).ln())?;
    Ok(on.add(&off)?.mean_all().neg())
}

/// All loss terms for normalized truth `x0` and prediction `x0_hat`.
pub fn loss_total(x0: &Tensor, x0_hat: &Tensor, stats: &NormStats, skel: &Skeleton, w: &LossWeights) -> Result<LossBreakdown> {
    let layout = PoseLayout { joints: skel.joints() };
    match x0.shape() {
        &[_, 2, _, p] if p == layout.width() && p == stats.width() => {}
        s => return Err(Error::shape("loss_total", s, &[0, 2, 0, layout.width()])),
    }
    let diff = loss_diff(x0, x0_hat)?;
    let truth = stats.denormalize(x0)?;
    let pred = stats.denormalize(x0_hat)?;
    let (pt, pp) = (positions(&truth, layout.joints)?, positions(&pred, layout.joints)?);
    let contacts = |x: &Tensor| x.narrow(3, layout.contacts().start, 4);
    let root6 = |x: &Tensor| x.narrow(3, layout.rotations().start, 6);

    let vel = loss_vel(&pp, &pt)?;
    let foot = loss_foot(&pp, &contacts(&truth)?, &skel.feet)?;
    let bl = loss_bl(&pp, &pt, skel)?;
    let dm = loss_dm(&pp, &pt, w.tau_dm)?;
    let ro = loss_ro(&root6(&pred)?, &root6(&truth)?)?;
    let contact = if w.contact > 0.0 { Some(loss_contact_bce(&contacts(&pred)?, &contacts(&truth)?)?) } else { None };

    let mut total = diff.clone();
    for (term, lambda) in [(&vel, w.vel), (&foot, w.foot), (&bl, w.bl), (&dm, w.dm), (&ro, w.ro)] {
        if lambda != 0.0 {
            total = total.add(&term.mul_scalar(lambda))?;
        }
    }
    if let Some(c) = &contact {
        total = total.add(&c.mul_scalar(w.contact))?;
    }
    Ok(LossBreakdown { diff, vel, foot, bl, dm, ro, contact, total })
}
