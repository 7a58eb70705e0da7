//! Finite-difference validation of tape gradients.
//!
//! `grad_check` rebuilds the loss through a user closure once per perturbed
//! coordinate, so it works for anything expressible on a [`Tape`], from a
//! single op to the full model loss. Large tensors are spot-checked on a
//! seeded sample of coordinates.
//!
//! Estimates use a fourth-order central stencil evaluated at two step sizes.
//! The plain second-order difference has truncation error ~h²·f'''/6, which
//! for coordinates with derivatives near 1e-7 exceeds any usable tolerance
//! at every step size (shrinking h trades truncation for cancellation).
//!
//! Coordinates sitting next to a ReLU kink are excluded rather than counted
//! as mismatches: no symmetric difference estimates the one-sided derivative
//! there, and a kink centered on the coordinate fools every stencil scale
//! identically (each converges to the mean of the two one-sided slopes).
//! Exclusion is therefore decided exactly, by comparing the tape's ReLU
//! activation pattern at the stencil extremes against the base point; any
//! sign flip means the interval straddles a kink. The two-step stencil
//! comparison stays on as a backstop for crossings the endpoints miss.

use crate::autodiff::{Gradients, Tape, ValueId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Base step; the per-coordinate step is `h * max(1, |theta_i|)`.
    pub h: f64,
    /// Maximum relative error for the check to pass.
    pub tolerance: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Seed for the coordinate sampler.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tolerance: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates excluded because the stencil interval straddles a ReLU
    /// kink, or the two step sizes disagreed.
    pub coords_nonsmooth: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn coords_nonsmooth(&self) -> usize {
        self.params.iter().map(|p| p.coords_nonsmooth).sum()
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamReport> {
        self.params
            .iter()
            .filter(|p| p.max_rel_err >= self.tolerance)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare tape gradients of a scalar function against finite differences.
///
/// `build` receives a fresh tape and one grad leaf per entry of `params`
/// (same order) and must record the scalar loss. It is called twice with
/// unperturbed parameters to detect nondeterminism, then six times per
/// sampled coordinate.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    settings: &GradCheckSettings,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let forward = |build: &mut F,
                   values: &[Tensor],
                   want_grads: bool|
     -> Result<(f64, Vec<bool>, Option<Gradients>, Vec<ValueId>)> {
        let mut tape = Tape::new();
        let ids: Vec<_> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: tape.value(loss).shape().to_vec(),
            });
        }
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: "grad_check".into(),
            });
        }
        let pattern = tape.relu_activation_pattern();
        let grads = if want_grads {
            Some(tape.backward(loss)?)
        } else {
            None
        };
        Ok((loss_val, pattern, grads, ids))
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (loss_a, base_pattern, grads, ids) = forward(&mut build, &base, true)?;
    let (loss_b, _, _, _) = forward(&mut build, &base, false)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::NonDeterministic {
            first: loss_a,
            second: loss_b,
        });
    }
    let grads = grads.expect("requested");

    let mut rng = Rng::from_seed(settings.seed).derive(&[0x6772_6164]);
    let mut reports = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]).expect("leaf registered");
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= settings.max_coords {
            (0..n).collect()
        } else {
            rng.sample_indices(n, settings.max_coords)
        };

        let mut max_err: f64 = 0.0;
        let mut worst = (0.0, 0.0);
        let mut nonsmooth = 0;
        for &c in &coords {
            let theta = tensor.data()[c];
            let h = settings.h * theta.abs().max(1.0);
            let mut eval = |offset: f64| -> Result<(f64, Vec<bool>)> {
                let mut shifted = base.clone();
                shifted[pi].data_mut()[c] = theta + offset;
                forward(&mut build, &shifted, false).map(|(loss, pattern, _, _)| (loss, pattern))
            };
            let (f_m4, pattern_m4) = eval(-2.0 * h)?;
            let (f_p4, pattern_p4) = eval(2.0 * h)?;
            if pattern_m4 != base_pattern || pattern_p4 != base_pattern {
                nonsmooth += 1;
                continue;
            }
            let (f_m2, _) = eval(-h)?;
            let (f_m1, _) = eval(-h / 2.0)?;
            let (f_p1, _) = eval(h / 2.0)?;
            let (f_p2, _) = eval(h)?;
            // fourth-order stencils at steps h and h/2
            let d_h = (f_m4 - 8.0 * f_m2 + 8.0 * f_p2 - f_p4) / (12.0 * h);
            let d_half = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (6.0 * h);
            let disagreement = (d_h - d_half).abs();
            if disagreement > 1e-9 && disagreement / d_h.abs().max(d_half.abs()).max(1e-8) > 0.05 {
                nonsmooth += 1;
                continue;
            }
            let numeric = d_half;
            let a = analytic.data()[c];
            let err = rel_err(a, numeric);
            if err > max_err {
                max_err = err;
                worst = (a, numeric);
            }
        }
        overall = overall.max(max_err);
        reports.push(ParamReport {
            name: name.clone(),
            coords_checked: coords.len(),
            coords_nonsmooth: nonsmooth,
            max_rel_err: max_err,
            worst_pair: worst,
        });
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err: overall,
        tolerance: settings.tolerance,
    })
}
