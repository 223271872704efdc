//! Synthetic field datasets on irregular 2-D domains.
//!
//! Three domain families (annulus, notched triangle, perturbed disk) are
//! filled with quasi-uniform points by dart throwing: uniform candidates
//! are accepted only when at least a minimum distance from every point
//! already placed, with the radius relaxed when the process stalls. Field
//! values come either from a Gaussian random field (squared-exponential
//! kernel, sampled exactly via Cholesky) or from harmonic polynomials.
//!
//! [`CorruptStream`] turns clean samples into training pairs: each draw
//! picks a sample, subsamples its mesh to a common size, draws a sensor
//! fraction from the configured set, and adds observation noise. Every
//! draw is a pure function of `(dataset, config, draw index)`, which is
//! what makes training runs replayable and resumable.

mod gffd;

pub use gffd::{expected_file_size, read_dataset, write_dataset};

use crate::error::{Error, Result};
use crate::geometry::{build_conditioning, sample_sensors, ConditioningInstance, PointCloud};
use crate::rng::Rng;

// Stream tags for deriving independent substreams from one root seed.
pub(crate) mod tags {
    pub const DOMAIN: u64 = 0x01;
    pub const FIELD: u64 = 0x02;
    pub const ORDER: u64 = 0x03;
    pub const MESH: u64 = 0x04;
    pub const FRACTION: u64 = 0x05;
    pub const SENSORS: u64 = 0x06;
    pub const NOISE: u64 = 0x07;
    pub const QUERIES: u64 = 0x08;
    pub const FLOW_NOISE: u64 = 0x09;
    pub const FLOW_TIME: u64 = 0x0A;
    pub const MODEL_INIT: u64 = 0x0B;
    pub const SAMPLER: u64 = 0x0C;
    pub const CRF_DRAW: u64 = 0x0D;
}

/// One clean field: a cloud plus `m x p` values.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub cloud: PointCloud,
    pub values: Vec<f64>,
    pub channels: usize,
}

impl FieldSample {
    pub fn new(cloud: PointCloud, values: Vec<f64>, channels: usize) -> Result<Self> {
        if channels == 0 || values.len() != cloud.len() * channels {
            return Err(Error::dim(
                "FieldSample::new",
                format!(
                    "values length {} vs {} points x {channels} channels",
                    values.len(),
                    cloud.len()
                ),
            ));
        }
        Ok(FieldSample {
            cloud,
            values,
            channels,
        })
    }

    /// Sample restricted to `indices` (cloud and values together).
    pub fn select(&self, indices: &[usize]) -> Result<FieldSample> {
        let cloud = self.cloud.select(indices)?;
        let mut values = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            values.extend_from_slice(&self.values[i * self.channels..(i + 1) * self.channels]);
        }
        FieldSample::new(cloud, values, self.channels)
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity stats (mean 0, std 1) for `p` channels.
    pub fn identity(p: usize) -> Self {
        NormStats {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }

    /// Population mean/std per channel over the given samples. Channels
    /// with zero spread get std 1 so normalization stays invertible.
    pub fn compute(samples: &[FieldSample], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .ok_or_else(|| Error::param("NormStats::compute", "empty index set"))?;
        let p = samples[*first].channels;
        let mut sum = vec![0.0; p];
        let mut sumsq = vec![0.0; p];
        let mut count = 0usize;
        for &i in indices {
            let s = &samples[i];
            for row in 0..s.cloud.len() {
                for c in 0..p {
                    let v = s.values[row * p + c];
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            count += s.cloud.len();
        }
        let mut mean = vec![0.0; p];
        let mut std = vec![0.0; p];
        for c in 0..p {
            mean[c] = sum[c] / count as f64;
            let var = (sumsq[c] / count as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(NormStats { mean, std })
    }

    /// `v -> (v - mean) / std`, per channel, in place.
    pub fn apply(&self, values: &mut [f64], channels: usize) {
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % channels;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, values: &mut [f64], channels: usize) {
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % channels;
            *v = *v * self.std[c] + self.mean[c];
        }
    }
}

/// Dataset-level metadata. Only the arrays survive a file round trip;
/// the rest is reconstructed (stats from the training split, provenance
/// fields from defaults).
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub dim: usize,
    pub channels: usize,
    pub generator: String,
    pub root_seed: u64,
    pub stats: NormStats,
}

/// An ordered collection of field samples plus metadata.
#[derive(Debug, Clone)]
pub struct FieldDataset {
    pub samples: Vec<FieldSample>,
    pub meta: DatasetMeta,
}

/// Train/held-out index split. By convention the holdout is the tail of
/// the sample list, so splits are reproducible from the file alone.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Hold out the last `holdout` samples.
    pub fn tail_holdout(n: usize, holdout: usize) -> Result<Split> {
        if holdout >= n {
            return Err(Error::param(
                "Split::tail_holdout",
                format!("holdout {holdout} must be smaller than sample count {n}"),
            ));
        }
        Ok(Split {
            train: (0..n - holdout).collect(),
            test: (n - holdout..n).collect(),
        })
    }

    /// Default holdout: one eighth of the data (at least 1 when n > 1).
    pub fn default_for(n: usize) -> Result<Split> {
        let holdout = if n > 1 { (n / 8).max(1) } else { 0 };
        Split::tail_holdout(n, holdout)
    }
}

impl FieldDataset {
    pub fn new(samples: Vec<FieldSample>, meta: DatasetMeta) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("FieldDataset::new", "no samples"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.cloud.dim() != meta.dim || s.channels != meta.channels {
                return Err(Error::dim(
                    "FieldDataset::new",
                    format!(
                        "sample {i}: dim {} / channels {} vs meta {} / {}",
                        s.cloud.dim(),
                        s.channels,
                        meta.dim,
                        meta.channels
                    ),
                ));
            }
        }
        Ok(FieldDataset { samples, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Smallest cloud size across the given samples.
    pub fn min_points(&self, indices: &[usize]) -> usize {
        indices
            .iter()
            .map(|&i| self.samples[i].cloud.len())
            .min()
            .unwrap_or(0)
    }
}

// ── Domains ─────────────────────────────────────────────────────────────

/// The three synthetic domain families (all 2-D).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    /// Ring with inner radius 0.5, outer radius 1.
    Annulus,
    /// Triangle (0,1), (-1,-1), (1,-1) minus a rectangular notch.
    NotchTriangle,
    /// Disk with a seed-dependent low-frequency boundary perturbation.
    PerturbedDisk,
}

impl DomainKind {
    pub fn parse(s: &str) -> Result<DomainKind> {
        match s {
            "annulus" => Ok(DomainKind::Annulus),
            "notch-triangle" => Ok(DomainKind::NotchTriangle),
            "perturbed-disk" => Ok(DomainKind::PerturbedDisk),
            other => Err(Error::param(
                "DomainKind::parse",
                format!("unknown domain kind {other:?} (annulus, notch-triangle, perturbed-disk)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DomainKind::Annulus => "annulus",
            DomainKind::NotchTriangle => "notch-triangle",
            DomainKind::PerturbedDisk => "perturbed-disk",
        }
    }
}

pub const ANNULUS_R_IN: f64 = 0.5;
pub const ANNULUS_R_OUT: f64 = 1.0;

/// Notch rectangle cut out of the triangle: `[x_lo, x_hi] x [y_lo, y_hi]`.
pub const NOTCH_RECT: (f64, f64, f64, f64) = (-0.12, 0.12, -1.0, -0.25);

const TRI_A: (f64, f64) = (0.0, 1.0);
const TRI_B: (f64, f64) = (-1.0, -1.0);
const TRI_C: (f64, f64) = (1.0, -1.0);

fn half_plane(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn inside_triangle(x: f64, y: f64) -> bool {
    let p = (x, y);
    let d1 = half_plane(p, TRI_A, TRI_B);
    let d2 = half_plane(p, TRI_B, TRI_C);
    let d3 = half_plane(p, TRI_C, TRI_A);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

fn inside_notch(x: f64, y: f64) -> bool {
    let (x_lo, x_hi, y_lo, y_hi) = NOTCH_RECT;
    x >= x_lo && x <= x_hi && y >= y_lo && y <= y_hi
}

/// Boundary radius of the perturbed disk for a given seed.
fn perturbed_disk_radius(theta: f64, coeffs: &[(f64, f64)]) -> f64 {
    let mut r = 0.72;
    for (k, &(a, b)) in coeffs.iter().enumerate() {
        let kf = (k + 1) as f64;
        r += a * (kf * theta).cos() + b * (kf * theta).sin();
    }
    r
}

fn perturbed_disk_coeffs(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = Rng::derive(seed, 0xD15C);
    (1..=3)
        .map(|k| {
            let amp = 0.04 / k as f64;
            (
                (rng.next_f64() * 2.0 - 1.0) * amp,
                (rng.next_f64() * 2.0 - 1.0) * amp,
            )
        })
        .collect()
}

/// Membership test and loose area for each kind (area drives the initial
/// dart-throwing radius).
fn domain_membership(kind: DomainKind, seed: u64) -> (Box<dyn Fn(f64, f64) -> bool>, f64) {
    match kind {
        DomainKind::Annulus => (
            Box::new(|x, y| {
                let r2 = x * x + y * y;
                r2 >= ANNULUS_R_IN * ANNULUS_R_IN && r2 <= ANNULUS_R_OUT * ANNULUS_R_OUT
            }),
            std::f64::consts::PI * (ANNULUS_R_OUT * ANNULUS_R_OUT - ANNULUS_R_IN * ANNULUS_R_IN),
        ),
        DomainKind::NotchTriangle => (
            Box::new(|x, y| inside_triangle(x, y) && !inside_notch(x, y)),
            2.0 - 0.24 * 0.75,
        ),
        DomainKind::PerturbedDisk => {
            let coeffs = perturbed_disk_coeffs(seed);
            (
                Box::new(move |x, y| {
                    let r = (x * x + y * y).sqrt();
                    let theta = y.atan2(x);
                    r <= perturbed_disk_radius(theta, &coeffs)
                }),
                std::f64::consts::PI * 0.72 * 0.72,
            )
        }
    }
}

/// Quasi-uniform points inside a synthetic domain: dart throwing with a
/// minimum-distance rule, radius relaxed whenever placement stalls.
/// Deterministic per `(kind, n_points, seed)`.
pub fn gen_domain(kind: DomainKind, n_points: usize, seed: u64) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::param("gen_domain", "n_points must be positive"));
    }
    let (inside, area) = domain_membership(kind, seed);
    let mut rng = Rng::derive(seed, tags::DOMAIN);
    let mut r_min = 0.7 * (area / n_points as f64).sqrt();
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n_points);
    let mut stall = 0usize;
    while pts.len() < n_points {
        let x = rng.next_f64() * 2.0 - 1.0;
        let y = rng.next_f64() * 2.0 - 1.0;
        let ok = inside(x, y)
            && pts
                .iter()
                .all(|&(px, py)| (px - x) * (px - x) + (py - y) * (py - y) >= r_min * r_min);
        if ok {
            pts.push((x, y));
            stall = 0;
        } else {
            stall += 1;
            if stall >= 2000 {
                r_min *= 0.92;
                stall = 0;
            }
        }
    }
    let mut coords = Vec::with_capacity(n_points * 2);
    for (x, y) in pts {
        coords.push(x);
        coords.push(y);
    }
    PointCloud::new(coords, 2, kind.name())
}

// ── Field generators ────────────────────────────────────────────────────

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix (row-major `n x n`).
pub(crate) fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numeric {
                        op: "cholesky",
                        details: format!(
                            "matrix not positive definite at pivot {i} (value {s}); \
                             increase the diagonal jitter"
                        ),
                    });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Diagonal jitter added to every GRF covariance matrix.
pub const GRF_JITTER: f64 = 1e-8;

/// Draw `channels` independent Gaussian-random-field channels on `cloud`
/// with squared-exponential covariance
/// `k(a, b) = amplitude^2 * exp(-|a-b|^2 / (2 lengthscale^2))`.
///
/// Returns `m x channels` row-major values.
pub fn grf_sample(
    cloud: &PointCloud,
    lengthscale: f64,
    amplitude: f64,
    channels: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(lengthscale > 0.0) {
        return Err(Error::param(
            "grf_sample",
            format!("lengthscale must be positive, got {lengthscale}"),
        ));
    }
    if amplitude < 0.0 || channels == 0 {
        return Err(Error::param(
            "grf_sample",
            "amplitude must be >= 0 and channels >= 1",
        ));
    }
    let m = cloud.len();
    if amplitude == 0.0 {
        return Ok(vec![0.0; m * channels]);
    }
    let mut k = vec![0.0; m * m];
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    for i in 0..m {
        for j in 0..=i {
            let d2 = dist2_pts(cloud.point(i), cloud.point(j));
            let v = amplitude * amplitude * (-d2 * inv).exp();
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
        k[i * m + i] += GRF_JITTER;
    }
    let l = cholesky(&k, m)?;
    let mut rng = Rng::derive(seed, tags::FIELD);
    let mut out = vec![0.0; m * channels];
    for c in 0..channels {
        let xi = rng.gaussian_vec(m);
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[i * m + j] * xi[j];
            }
            out[i * channels + c] = acc;
        }
    }
    Ok(out)
}

fn dist2_pts(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Harmonic polynomial field on a 2-D cloud:
/// `u(x, y) = sum_k a_k Re((x+iy)^k) + b_k Im((x+iy)^k)`, k starting at 1.
///
/// Every such field satisfies the Laplace equation exactly.
pub fn harmonic_field(cloud: &PointCloud, coeffs: &[(f64, f64)]) -> Result<Vec<f64>> {
    if cloud.dim() != 2 {
        return Err(Error::param(
            "harmonic_field",
            format!("requires a 2-D cloud, got dim {}", cloud.dim()),
        ));
    }
    if coeffs.is_empty() {
        return Err(Error::param("harmonic_field", "no coefficients"));
    }
    let m = cloud.len();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let p = cloud.point(i);
        let (x, y) = (p[0], p[1]);
        // (re, im) tracks (x + iy)^k incrementally.
        let (mut re, mut im) = (1.0, 0.0);
        let mut acc = 0.0;
        for &(a, b) in coeffs {
            let nre = re * x - im * y;
            let nim = re * y + im * x;
            re = nre;
            im = nim;
            acc += a * re + b * im;
        }
        out[i] = acc;
    }
    Ok(out)
}

// ── Dataset generators ──────────────────────────────────────────────────

/// Configuration for synthetic dataset generation.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub kind: DomainKind,
    pub n_points: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub lengthscale: f64,
    pub amplitude: f64,
    pub root_seed: u64,
}

/// Gaussian-random-field dataset: a fresh domain realization and field
/// per sample, all derived from one root seed.
pub fn generate_grf_dataset(cfg: &GenConfig) -> Result<FieldDataset> {
    if cfg.n_samples == 0 {
        return Err(Error::param("generate_grf_dataset", "n_samples must be positive"));
    }
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let domain_seed = crate::rng::mix64(cfg.root_seed ^ crate::rng::mix64(i as u64));
        let cloud = gen_domain(cfg.kind, cfg.n_points, domain_seed)?;
        let field_seed = crate::rng::mix64(domain_seed ^ 0xF1E1D);
        let values = grf_sample(&cloud, cfg.lengthscale, cfg.amplitude, cfg.channels, field_seed)?;
        samples.push(FieldSample::new(cloud, values, cfg.channels)?);
    }
    let split = Split::default_for(samples.len())?;
    let stats = NormStats::compute(&samples, &split.train)?;
    FieldDataset::new(
        samples,
        DatasetMeta {
            dim: 2,
            channels: cfg.channels,
            generator: format!("grf-{}", cfg.kind.name()),
            root_seed: cfg.root_seed,
            stats,
        },
    )
}

/// Harmonic-polynomial dataset (single channel): random coefficients up
/// to degree 3, decaying with degree.
pub fn generate_harmonic_dataset(
    kind: DomainKind,
    n_points: usize,
    n_samples: usize,
    root_seed: u64,
) -> Result<FieldDataset> {
    if n_samples == 0 {
        return Err(Error::param("generate_harmonic_dataset", "n_samples must be positive"));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let domain_seed = crate::rng::mix64(root_seed ^ crate::rng::mix64(i as u64));
        let cloud = gen_domain(kind, n_points, domain_seed)?;
        let mut rng = Rng::derive(domain_seed, tags::FIELD);
        let coeffs: Vec<(f64, f64)> = (1..=3)
            .map(|k| {
                let s = 1.0 / k as f64;
                (rng.next_gaussian() * s, rng.next_gaussian() * s)
            })
            .collect();
        let values = harmonic_field(&cloud, &coeffs)?;
        samples.push(FieldSample::new(cloud, values, 1)?);
    }
    let split = Split::default_for(samples.len())?;
    let stats = NormStats::compute(&samples, &split.train)?;
    FieldDataset::new(
        samples,
        DatasetMeta {
            dim: 2,
            channels: 1,
            generator: format!("harmonic-{}", kind.name()),
            root_seed,
            stats,
        },
    )
}

// ── Corruption stream ───────────────────────────────────────────────────

/// Observation model applied to clean samples during training and eval.
#[derive(Debug, Clone)]
pub struct CorruptConfig {
    /// Noise standard deviation relative to each channel's training std.
    pub noise_level: f64,
    /// Sensor fractions drawn uniformly per instance.
    pub fraction_set: Vec<f64>,
    pub root_seed: u64,
}

/// Deterministic stream of (partial observation, clean target) pairs.
///
/// Draw `k` cycles the index list in epoch order (a fresh shuffle per
/// epoch), subsamples each mesh to the split-wide minimum size, picks a
/// fraction, and corrupts the observation. Every draw is independent of
/// stream history.
pub struct CorruptStream<'a> {
    ds: &'a FieldDataset,
    indices: Vec<usize>,
    cfg: CorruptConfig,
    m_min: usize,
}

impl<'a> CorruptStream<'a> {
    pub fn new(ds: &'a FieldDataset, indices: &[usize], cfg: CorruptConfig) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("CorruptStream::new", "empty index set"));
        }
        if cfg.fraction_set.is_empty() {
            return Err(Error::param("CorruptStream::new", "empty fraction set"));
        }
        for &f in &cfg.fraction_set {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::param(
                    "CorruptStream::new",
                    format!("fraction {f} outside (0, 1]"),
                ));
            }
        }
        if cfg.noise_level < 0.0 {
            return Err(Error::param("CorruptStream::new", "negative noise level"));
        }
        let m_min = ds.min_points(indices);
        Ok(CorruptStream {
            ds,
            indices: indices.to_vec(),
            cfg,
            m_min,
        })
    }

    pub fn target_points(&self) -> usize {
        self.m_min
    }

    /// The `k`-th (instance, clean target) pair of the stream.
    pub fn draw(&self, k: u64) -> Result<(ConditioningInstance, FieldSample)> {
        let n = self.indices.len() as u64;
        let epoch = k / n;
        let pos = (k % n) as usize;

        // Epoch-shuffled visit order.
        let mut order: Vec<usize> = self.indices.clone();
        let mut order_rng = Rng::derive2(self.cfg.root_seed, tags::ORDER, epoch);
        order_rng.shuffle(&mut order);
        let sample_idx = order[pos];
        let sample = &self.ds.samples[sample_idx];

        // Per-(epoch, sample) mesh subsample to the common size.
        let target = if sample.cloud.len() > self.m_min {
            let mut mesh_rng = Rng::derive2(
                self.cfg.root_seed,
                tags::MESH,
                epoch.wrapping_mul(0x10001).wrapping_add(sample_idx as u64),
            );
            let keep = mesh_rng.sample_indices(sample.cloud.len(), self.m_min);
            sample.select(&keep)?
        } else {
            sample.clone()
        };

        // Per-draw fraction, sensors, and noise.
        let mut frac_rng = Rng::derive2(self.cfg.root_seed, tags::FRACTION, k);
        let fraction = self.cfg.fraction_set[frac_rng.next_index(self.cfg.fraction_set.len())];
        let sensor_seed = Rng::derive2(self.cfg.root_seed, tags::SENSORS, k).next_u64();
        let sensors = sample_sensors(&target.cloud, fraction, sensor_seed)?;
        let noise_seed = Rng::derive2(self.cfg.root_seed, tags::NOISE, k).next_u64();
        let inst = build_conditioning(
            &target.cloud,
            &sensors,
            &target.values,
            target.channels,
            self.cfg.noise_level,
            &self.ds.meta.stats.std,
            noise_seed,
        )?;
        Ok((inst, target))
    }
}
