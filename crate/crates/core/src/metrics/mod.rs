//! Evaluation metrics: relative errors, empirical and Gaussian
//! 2-Wasserstein distances, scaling-law fits, and ensemble spread.

pub mod harness;
mod wasserstein;

pub use harness::{
    pushforward_gaussian, sensor_scaling_study, spec_w2, spectral_norm, theorem_harness,
    GaussianSpec, ScalingReport, TheoremReport, THEOREM_SLACK_TOL,
};
pub use wasserstein::{empirical_w2, gaussian_w2, jacobi_eigh, w2_1d, ASSIGNMENT_MAX_POINTS};

use crate::error::{Error, Result};

/// Relative L2 error `||pred - truth|| / ||truth||`.
///
/// Errors when lengths differ or the reference is identically zero.
pub fn relative_l2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(
            "relative_l2",
            format!("lengths {} vs {}", pred.len(), truth.len()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::domain(
            "relative_l2",
            "reference is identically zero; relative error undefined",
        ));
    }
    Ok((num / den).sqrt())
}

/// Relative L2 per channel for `q x p` row-major fields, plus the
/// channel-averaged variant.
pub fn relative_l2_by_channel(pred: &[f64], truth: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || pred.len() != truth.len() || pred.len() % channels != 0 {
        return Err(Error::dim(
            "relative_l2_by_channel",
            format!(
                "lengths {} / {} vs {channels} channels",
                pred.len(),
                truth.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let p: Vec<f64> = pred.iter().skip(c).step_by(channels).copied().collect();
        let t: Vec<f64> = truth.iter().skip(c).step_by(channels).copied().collect();
        out.push(relative_l2(&p, &t)?);
    }
    Ok(out)
}

/// Mean over channels of the per-channel relative L2.
pub fn relative_l2_channel_mean(pred: &[f64], truth: &[f64], channels: usize) -> Result<f64> {
    let per = relative_l2_by_channel(pred, truth, channels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean relative L2 over a set of (pred, truth) pairs.
pub fn mean_relative_l2(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param("mean_relative_l2", "no pairs"));
    }
    let mut acc = 0.0;
    for (p, t) in pairs {
        acc += relative_l2(p, t)?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
///
/// Used to verify scaling laws: data following `y = c * x^alpha` yields
/// `alpha` exactly. Requires at least two points with positive x and y.
pub fn fit_log_slope(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::param("fit_log_slope", "need at least two points"));
    }
    let mut lx = Vec::with_capacity(pairs.len());
    let mut ly = Vec::with_capacity(pairs.len());
    for &(x, y) in pairs {
        if !(x > 0.0 && y > 0.0) {
            return Err(Error::param(
                "fit_log_slope",
                format!("log-log fit needs positive values, got ({x}, {y})"),
            ));
        }
        lx.push(x.ln());
        ly.push(y.ln());
    }
    let n = pairs.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..pairs.len() {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if sxx == 0.0 {
        return Err(Error::param("fit_log_slope", "all x values identical"));
    }
    Ok(sxy / sxx)
}

/// Pointwise uncertainty of an ensemble: unbiased standard deviation at
/// every position, plus mean/max summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySummary {
    pub per_point_std: Vec<f64>,
    pub mean_std: f64,
    pub max_std: f64,
}

/// Unbiased per-position standard deviation across an ensemble of
/// equal-length vectors (at least two members required).
pub fn ensemble_uncertainty(members: &[Vec<f64>]) -> Result<UncertaintySummary> {
    if members.len() < 2 {
        return Err(Error::param(
            "ensemble_uncertainty",
            format!("need at least two members, got {}", members.len()),
        ));
    }
    let len = members[0].len();
    if len == 0 {
        return Err(Error::param("ensemble_uncertainty", "members are empty"));
    }
    for (i, e) in members.iter().enumerate() {
        if e.len() != len {
            return Err(Error::dim(
                "ensemble_uncertainty",
                format!("member {i} has length {} vs {len}", e.len()),
            ));
        }
    }
    let n = members.len() as f64;
    let mut per_point_std = Vec::with_capacity(len);
    for j in 0..len {
        let mean = members.iter().map(|e| e[j]).sum::<f64>() / n;
        let var =
            members.iter().map(|e| (e[j] - mean) * (e[j] - mean)).sum::<f64>() / (n - 1.0);
        per_point_std.push(var.max(0.0).sqrt());
    }
    let mean_std = per_point_std.iter().sum::<f64>() / len as f64;
    let max_std = per_point_std.iter().cloned().fold(0.0, f64::max);
    Ok(UncertaintySummary {
        per_point_std,
        mean_std,
        max_std,
    })
}

/// Sample mean and (population) covariance of `n` points in `d` dims,
/// given row-major flat data.
pub fn fit_gaussian(data: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if d == 0 || data.is_empty() || data.len() % d != 0 {
        return Err(Error::dim(
            "fit_gaussian",
            format!("data length {} not a multiple of dim {d}", data.len()),
        ));
    }
    let n = data.len() / d;
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in data.chunks_exact(d) {
        for i in 0..d {
            for j in 0..=i {
                let v = (row[i] - mean[i]) * (row[j] - mean[j]);
                cov[i * d + j] += v;
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok((mean, cov))
}
