//! Empirical validation of the posterior-approximation bound.
//!
//! For a linear decoder `z -> A z` the Lipschitz constant is exactly the
//! largest singular value of `A`, and Gaussian latent posteriors push
//! forward to Gaussians in closed form. That makes both sides of the
//! bound `W2(decoded model posterior, decoded true posterior) <=
//! L_D * eps_flow + eps_rec` computable exactly, so the inequality can
//! be asserted on randomized trials rather than merely plotted. The
//! trained nonlinear system contributes trend evidence (the sensor
//! scaling study); the inequality itself is checked where it is exact.

use crate::error::{Error, Result};
use crate::metrics::{fit_log_slope, gaussian_w2, jacobi_eigh};

/// Tolerance for the asserted inequalities: both sides travel through
/// eigendecompositions, so exact zero slack is not representable.
pub const THEOREM_SLACK_TOL: f64 = 1e-9;

/// A Gaussian distribution given by mean and (row-major) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianSpec {
    /// Validates dimensions, symmetry (within 1e-12), and approximate
    /// positive semidefiniteness (eigenvalues >= -1e-10).
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::dim(
                "GaussianSpec::new",
                format!("mean dim {d} vs covariance length {}", cov.len()),
            ));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-12 {
                    return Err(Error::param(
                        "GaussianSpec::new",
                        format!("covariance not symmetric at ({i}, {j})"),
                    ));
                }
            }
        }
        let (eigs, _) = jacobi_eigh(&cov, d)?;
        if let Some(bad) = eigs.iter().find(|&&w| w < -1e-10) {
            return Err(Error::domain(
                "GaussianSpec::new",
                format!("covariance has negative eigenvalue {bad}"),
            ));
        }
        Ok(GaussianSpec { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        GaussianSpec {
            mean: vec![0.0; d],
            cov,
        }
    }
}

fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        for j in 0..cols {
            out[i] += a[i * cols + j] * x[j];
        }
    }
    out
}

/// C = A (rows x inner) * B (inner x cols), row-major.
fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            let aik = a[i * inner + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..cols {
                out[i * cols + j] += aik * b[k * cols + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Largest singular value of a row-major `rows x cols` matrix: the
/// square root of the top eigenvalue of `A^T A`.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if rows == 0 || cols == 0 || a.len() != rows * cols {
        return Err(Error::dim(
            "spectral_norm",
            format!("matrix length {} vs {rows} x {cols}", a.len()),
        ));
    }
    let at = transpose(a, rows, cols);
    let mut ata = matmul(&at, a, cols, rows, cols);
    // Round-trip symmetry can drift in the last bit; symmetrize.
    for i in 0..cols {
        for j in 0..i {
            let avg = 0.5 * (ata[i * cols + j] + ata[j * cols + i]);
            ata[i * cols + j] = avg;
            ata[j * cols + i] = avg;
        }
    }
    let (eigs, _) = jacobi_eigh(&ata, cols)?;
    let top = eigs.iter().cloned().fold(0.0, f64::max);
    Ok(top.max(0.0).sqrt())
}

/// Image of a Gaussian under `x -> A x + shift`: mean `A mu + shift`,
/// covariance `A Sigma A^T`.
pub fn pushforward_gaussian(
    a: &[f64],
    rows: usize,
    cols: usize,
    spec: &GaussianSpec,
    shift: &[f64],
) -> Result<GaussianSpec> {
    if spec.dim() != cols || a.len() != rows * cols || shift.len() != rows {
        return Err(Error::dim(
            "pushforward_gaussian",
            format!(
                "matrix {rows} x {cols}, input dim {}, shift dim {}",
                spec.dim(),
                shift.len()
            ),
        ));
    }
    let mut mean = matvec(a, rows, cols, &spec.mean);
    for (m, s) in mean.iter_mut().zip(shift) {
        *m += s;
    }
    let asig = matmul(a, &spec.cov, rows, cols, cols);
    let at = transpose(a, rows, cols);
    let mut cov = matmul(&asig, &at, rows, cols, rows);
    for i in 0..rows {
        for j in 0..i {
            let avg = 0.5 * (cov[i * rows + j] + cov[j * rows + i]);
            cov[i * rows + j] = avg;
            cov[j * rows + i] = avg;
        }
    }
    GaussianSpec::new(mean, cov)
}

/// W2 between two Gaussian specs (closed form).
pub fn spec_w2(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    gaussian_w2(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Both sides of the posterior-approximation bound for one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremReport {
    /// Measured W2 between decoded model and decoded true posteriors.
    pub lhs: f64,
    /// Decoder Lipschitz constant (largest singular value).
    pub l_d: f64,
    /// Latent-space W2 between model and true posteriors.
    pub eps_flow: f64,
    /// Reconstruction offset magnitude.
    pub eps_rec: f64,
    /// `l_d * eps_flow + eps_rec`.
    pub rhs: f64,
    /// `rhs - lhs`; nonnegative up to round-off when the bound holds.
    pub slack: f64,
}

pub fn theorem_csv_header() -> &'static str {
    "lhs,l_d,eps_flow,eps_rec,rhs,slack"
}

impl TheoremReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.lhs, self.l_d, self.eps_flow, self.eps_rec, self.rhs, self.slack
        )
    }
}

/// Evaluate the bound for a linear decoder `z -> A z` whose imperfect
/// version adds a constant offset `recon_offset` (so the reconstruction
/// error is exactly its norm). The model posterior is decoded by the
/// imperfect decoder, the true posterior by the ideal one; the theorem
/// promises `lhs <= l_d * eps_flow + eps_rec`, and a violation beyond
/// round-off is reported as a contract error because it can only mean
/// the arithmetic is wrong.
pub fn theorem_harness(
    a: &[f64],
    rows: usize,
    cols: usize,
    latent_true: &GaussianSpec,
    latent_model: &GaussianSpec,
    recon_offset: &[f64],
) -> Result<TheoremReport> {
    if latent_true.dim() != cols || latent_model.dim() != cols {
        return Err(Error::dim(
            "theorem_harness",
            format!(
                "latent dims {} / {} vs decoder input {cols}",
                latent_true.dim(),
                latent_model.dim()
            ),
        ));
    }
    let l_d = spectral_norm(a, rows, cols)?;
    let eps_flow = spec_w2(latent_model, latent_true)?;
    let eps_rec = recon_offset.iter().map(|x| x * x).sum::<f64>().sqrt();

    let zero = vec![0.0; rows];
    let decoded_true = pushforward_gaussian(a, rows, cols, latent_true, &zero)?;
    let decoded_model = pushforward_gaussian(a, rows, cols, latent_model, recon_offset)?;
    let lhs = spec_w2(&decoded_model, &decoded_true)?;

    let rhs = l_d * eps_flow + eps_rec;
    let slack = rhs - lhs;
    if slack < -THEOREM_SLACK_TOL {
        return Err(Error::contract(
            "theorem_harness",
            format!("bound violated: lhs {lhs} > rhs {rhs} (slack {slack})"),
        ));
    }
    Ok(TheoremReport {
        lhs,
        l_d,
        eps_flow,
        eps_rec,
        rhs,
        slack,
    })
}

/// Error-versus-sensor-count study.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub counts: Vec<usize>,
    /// Mean error over seeds, one entry per count.
    pub errors: Vec<f64>,
    /// Fitted log-log slope of error against sensor count.
    pub slope: f64,
    /// Smoothness order of the generating fields (for rate comparison).
    pub sobolev_order: f64,
}

impl ScalingReport {
    pub fn csv_header() -> &'static str {
        "sensors,error"
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut put = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
        put(format!("{}\n", Self::csv_header()))?;
        for (&m, &e) in self.counts.iter().zip(&self.errors) {
            put(format!("{m},{e}\n"))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Run `eval(count, seed)` over every (count, seed) cell, average errors
/// per count, and fit the log-log slope. Counts must be at least three
/// and strictly increasing; errors must be positive for the log fit.
pub fn sensor_scaling_study(
    counts: &[usize],
    seeds: &[u64],
    sobolev_order: f64,
    mut eval: impl FnMut(usize, u64) -> Result<f64>,
) -> Result<ScalingReport> {
    if counts.len() < 3 {
        return Err(Error::param(
            "sensor_scaling_study",
            format!("need at least 3 sensor counts, got {}", counts.len()),
        ));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(
            "sensor_scaling_study",
            "sensor counts must be strictly increasing",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::param("sensor_scaling_study", "need at least one seed"));
    }
    let mut errors = Vec::with_capacity(counts.len());
    for &m in counts {
        let mut acc = 0.0;
        for &seed in seeds {
            acc += eval(m, seed)?;
        }
        errors.push(acc / seeds.len() as f64);
    }
    let pairs: Vec<(f64, f64)> = counts
        .iter()
        .zip(&errors)
        .map(|(&m, &e)| (m as f64, e))
        .collect();
    let slope = fit_log_slope(&pairs)?;
    Ok(ScalingReport {
        counts: counts.to_vec(),
        errors,
        slope,
        sobolev_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_spec(d: usize, rng: &mut Rng) -> GaussianSpec {
        let mean: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let m: Vec<f64> = (0..d * d).map(|_| rng.next_gaussian()).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = if i == j { 0.05 } else { 0.0 };
                for k in 0..d {
                    acc += m[k * d + i] * m[k * d + j];
                }
                cov[i * d + j] = acc;
            }
        }
        GaussianSpec::new(mean, cov).unwrap()
    }

    /// Scaled Householder reflection: exactly orthogonal times `c`.
    fn scaled_householder(d: usize, c: f64, rng: &mut Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let h = if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / vv;
                a[i * d + j] = c * h;
            }
        }
        a
    }

    #[test]
    fn spec_validation_enforces_symmetry_and_psd() {
        assert!(GaussianSpec::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.5, 1.0]).is_ok());
        // Asymmetric.
        assert!(GaussianSpec::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.4, 1.0]).is_err());
        // Negative eigenvalue.
        assert!(matches!(
            GaussianSpec::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]),
            Err(Error::Domain { .. })
        ));
        // Tiny negative eigenvalue within tolerance passes.
        assert!(GaussianSpec::new(vec![0.0], vec![-5e-11]).is_ok());
    }

    #[test]
    fn spectral_norm_known_matrices() {
        // Diagonal.
        let d = spectral_norm(&[3.0, 0.0, 0.0, 2.0], 2, 2).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
        // Column (3, 4): lone singular value 5.
        let c = spectral_norm(&[3.0, 4.0], 2, 1).unwrap();
        assert!((c - 5.0).abs() < 1e-12);
        // Rotation: spectral norm 1.
        let th = 0.7f64;
        let r = spectral_norm(&[th.cos(), -th.sin(), th.sin(), th.cos()], 2, 2).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pushforward_matches_hand_computation() {
        // A = [[2, 0], [0, 3]], N(mean (1, -1), cov diag(4, 9)), shift (5, 0)
        // -> mean (7, -3), cov diag(16, 81).
        let spec = GaussianSpec::new(vec![1.0, -1.0], vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let out = pushforward_gaussian(
            &[2.0, 0.0, 0.0, 3.0],
            2,
            2,
            &spec,
            &[5.0, 0.0],
        )
        .unwrap();
        assert_eq!(out.mean, vec![7.0, -3.0]);
        assert_eq!(out.cov, vec![16.0, 0.0, 0.0, 81.0]);
    }

    #[test]
    fn identical_posteriors_and_zero_offset_give_zero_both_sides() {
        let mut rng = Rng::from_seed(1);
        let spec = random_spec(3, &mut rng);
        let a: Vec<f64> = (0..9).map(|_| rng.next_gaussian()).collect();
        let r = theorem_harness(&a, 3, 3, &spec, &spec, &[0.0; 3]).unwrap();
        assert!(r.lhs.abs() < 1e-9);
        assert!(r.rhs.abs() < 1e-9);
        assert!(r.eps_flow.abs() < 1e-9 && r.eps_rec == 0.0);
    }

    #[test]
    fn identity_decoder_is_the_equality_case() {
        let mut rng = Rng::from_seed(2);
        let p = random_spec(3, &mut rng);
        let q = random_spec(3, &mut rng);
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let r = theorem_harness(&eye, 3, 3, &p, &q, &[0.0; 3]).unwrap();
        assert!((r.l_d - 1.0).abs() < 1e-12);
        assert!((r.lhs - r.eps_flow).abs() < 1e-9, "isometry must be tight");
    }

    #[test]
    fn scaled_orthogonal_decoders_are_tight_to_machine_precision() {
        let mut rng = Rng::from_seed(3);
        for trial in 0..20 {
            let c = 0.5 + rng.next_f64() * 3.0;
            let a = scaled_householder(4, c, &mut rng);
            let p = random_spec(4, &mut rng);
            let q = random_spec(4, &mut rng);
            let r = theorem_harness(&a, 4, 4, &p, &q, &[0.0; 4]).unwrap();
            assert!((r.l_d - c).abs() < 1e-9, "trial {trial}: sigma_max {} vs {c}", r.l_d);
            assert!(
                (r.lhs - c * r.eps_flow).abs() < 1e-9,
                "trial {trial}: pushforward W2 {} vs scaled latent W2 {}",
                r.lhs,
                c * r.eps_flow
            );
        }
    }

    #[test]
    fn bound_holds_on_a_thousand_random_trials() {
        let mut rng = Rng::from_seed(4);
        let mut min_slack = f64::INFINITY;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..4).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let p = random_spec(2, &mut rng);
            let q = random_spec(2, &mut rng);
            let offset: Vec<f64> = (0..2).map(|_| rng.next_gaussian() * 0.3).collect();
            let r = theorem_harness(&a, 2, 2, &p, &q, &offset).unwrap();
            assert!(r.slack >= -THEOREM_SLACK_TOL);
            assert!(r.lhs >= 0.0 && r.rhs >= 0.0 && r.l_d >= 0.0);
            min_slack = min_slack.min(r.slack);
        }
        assert!(min_slack.is_finite());
    }

    #[test]
    fn lipschitz_pushforward_inequality_on_random_rectangular_maps() {
        let mut rng = Rng::from_seed(5);
        for _ in 0..200 {
            let a: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect(); // 3 x 2
            let p = random_spec(2, &mut rng);
            let q = random_spec(2, &mut rng);
            let l = spectral_norm(&a, 3, 2).unwrap();
            let zero = vec![0.0; 3];
            let ap = pushforward_gaussian(&a, 3, 2, &p, &zero).unwrap();
            let aq = pushforward_gaussian(&a, 3, 2, &q, &zero).unwrap();
            let lhs = spec_w2(&ap, &aq).unwrap();
            let rhs = l * spec_w2(&p, &q).unwrap();
            assert!(lhs <= rhs + 1e-9, "{lhs} > {l} * W2 = {rhs}");
        }
    }

    #[test]
    fn scaling_study_validates_inputs_and_fits_slopes() {
        // Planted power law error = m^(-1/2): slope recovered exactly.
        let report = sensor_scaling_study(&[16, 64, 256], &[1, 2], 1.0, |m, _| {
            Ok((m as f64).powf(-0.5))
        })
        .unwrap();
        assert!((report.slope + 0.5).abs() < 1e-12);
        assert_eq!(report.errors.len(), 3);
        assert_eq!(report.sobolev_order, 1.0);

        // Too few counts.
        assert!(sensor_scaling_study(&[16, 64], &[1], 1.0, |_, _| Ok(1.0)).is_err());
        // Not strictly increasing.
        assert!(sensor_scaling_study(&[16, 16, 64], &[1], 1.0, |_, _| Ok(1.0)).is_err());
        // No seeds.
        assert!(sensor_scaling_study(&[16, 64, 256], &[], 1.0, |_, _| Ok(1.0)).is_err());
        // Eval failures propagate.
        assert!(sensor_scaling_study(&[16, 64, 256], &[1], 1.0, |_, _| {
            Err(Error::param("eval", "boom"))
        })
        .is_err());
    }

    #[test]
    fn nearest_sensor_interpolation_error_shrinks_with_sensor_count() {
        use crate::data::harmonic_field;
        use crate::geometry::farthest_point_subset;

        // Fixed disk-like cloud; smooth harmonic field; nearest-sensor
        // interpolation. Error must fall monotonically as sensors grow.
        let mut rng = Rng::from_seed(6);
        let mut coords = Vec::new();
        while coords.len() < 2 * 400 {
            let (x, y) = (2.0 * rng.next_f64() - 1.0, 2.0 * rng.next_f64() - 1.0);
            if x * x + y * y <= 1.0 {
                coords.extend_from_slice(&[x, y]);
            }
        }
        let cloud = crate::geometry::PointCloud::new(coords, 2, "disk").unwrap();
        let field =
            harmonic_field(&cloud, &[(0.3, 1.0), (-0.5, 0.25), (0.7, -0.2)]).unwrap();

        let report = sensor_scaling_study(&[8, 32, 128], &[0], 1.0, |m, seed| {
            let picked = farthest_point_subset(&cloud, m, seed)?;
            let mut pred = vec![0.0; cloud.len()];
            for i in 0..cloud.len() {
                let (xi, yi) = (cloud.coords()[2 * i], cloud.coords()[2 * i + 1]);
                let mut best = (f64::INFINITY, 0usize);
                for &s in &picked.indices {
                    let dx = xi - cloud.coords()[2 * s];
                    let dy = yi - cloud.coords()[2 * s + 1];
                    let d2 = dx * dx + dy * dy;
                    if d2 < best.0 {
                        best = (d2, s);
                    }
                }
                pred[i] = field[best.1];
            }
            crate::metrics::relative_l2(&pred, &field)
        })
        .unwrap();
        assert!(
            report.errors[0] > report.errors[1] && report.errors[1] > report.errors[2],
            "interpolation error must decrease: {:?}",
            report.errors
        );
        assert!(report.slope < -0.2, "slope {} should be clearly negative", report.slope);
    }

    #[test]
    fn csv_surfaces_have_documented_headers() {
        assert_eq!(theorem_csv_header(), "lhs,l_d,eps_flow,eps_rec,rhs,slack");
        let report = ScalingReport {
            counts: vec![8, 32],
            errors: vec![0.5, 0.25],
            slope: -0.5,
            sobolev_order: 1.0,
        };
        let dir = std::env::temp_dir().join(format!("gff-scaling-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scaling.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "sensors,error\n8,0.5\n32,0.25\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
