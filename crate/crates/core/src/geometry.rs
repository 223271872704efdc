//! Point clouds, sensor masks, and mesh-quality measures.
//!
//! A field lives on an unstructured cloud of points in `[-1, 1]^d`
//! (d = 1, 2, or 3). Observations are taken at a sensor subset of the
//! cloud, encoded as a binary mask plus noisy values at the masked
//! points. Reconstruction difficulty is governed by how well the sensors
//! cover the domain, which the fill distance and separation radius
//! quantify.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Unstructured points in `[-1, 1]^d`, row-major `m x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
    dim: usize,
    /// Free-form label for the generating domain ("annulus", ...).
    pub domain_id: String,
}

impl PointCloud {
    pub fn new(coords: Vec<f64>, dim: usize, domain_id: &str) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::param(
                "PointCloud::new",
                format!("dim must be 1, 2, or 3, got {dim}"),
            ));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::dim(
                "PointCloud::new",
                format!("coordinate buffer length {} is not a positive multiple of dim {dim}", coords.len()),
            ));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("PointCloud::new", "non-finite coordinate"));
        }
        Ok(PointCloud {
            coords,
            dim,
            domain_id: domain_id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Cloud restricted to `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return Err(Error::param("PointCloud::select", "empty index set"));
        }
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(
                    "PointCloud::select",
                    format!("index {i} out of bounds for {} points", self.len()),
                ));
            }
            coords.extend_from_slice(self.point(i));
        }
        PointCloud::new(coords, self.dim, &self.domain_id)
    }

    /// Map coordinates affinely so the bounding box becomes `[-1, 1]^d`.
    /// Axes with zero extent map to 0. Returns (lo, hi) per axis.
    pub fn normalize_unit_box(&mut self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..self.len() {
            for (a, &v) in self.point(i).iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let n = self.len();
        for i in 0..n {
            for a in 0..d {
                let v = self.coords[i * d + a];
                let span = hi[a] - lo[a];
                self.coords[i * d + a] = if span == 0.0 {
                    0.0
                } else {
                    2.0 * (v - lo[a]) / span - 1.0
                };
            }
        }
        (lo, hi)
    }
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A sensor subset of a cloud: indices plus the equivalent binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    pub indices: Vec<usize>,
    pub mask: Vec<f64>,
}

impl SensorSet {
    /// Build from in-range, distinct indices. An empty set is allowed
    /// (all-zero mask: the nothing-observed conditioning state).
    pub fn from_indices(indices: Vec<usize>, m: usize) -> Result<Self> {
        let mut mask = vec![0.0; m];
        for &i in &indices {
            if i >= m {
                return Err(Error::param(
                    "SensorSet::from_indices",
                    format!("index {i} out of bounds for {m} points"),
                ));
            }
            if mask[i] != 0.0 {
                return Err(Error::param(
                    "SensorSet::from_indices",
                    format!("duplicate index {i}"),
                ));
            }
            mask[i] = 1.0;
        }
        Ok(SensorSet { indices, mask })
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// Draw `ceil(fraction * m)` sensors uniformly without replacement.
///
/// `fraction` must lie in `(0, 1]`. The draw is a pure function of
/// `(m, fraction, seed)`.
pub fn sample_sensors(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<SensorSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(
            "sample_sensors",
            format!("fraction must be in (0, 1], got {fraction}"),
        ));
    }
    let m = cloud.len();
    let k = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    let mut rng = Rng::from_seed(seed);
    let indices = rng.sample_indices(m, k);
    SensorSet::from_indices(indices, m)
}

/// Quasi-uniform subset of size `k` by farthest-point traversal, seeded
/// by the choice of the first point.
pub fn farthest_point_subset(cloud: &PointCloud, k: usize, seed: u64) -> Result<SensorSet> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(Error::param(
            "farthest_point_subset",
            format!("k must be in 1..={m}, got {k}"),
        ));
    }
    let mut rng = Rng::from_seed(seed);
    let first = rng.next_index(m);
    let mut chosen = vec![first];
    let mut best = vec![f64::INFINITY; m];
    for _ in 1..k {
        let last = *chosen.last().expect("nonempty");
        for i in 0..m {
            best[i] = best[i].min(dist2(cloud.point(i), cloud.point(last)));
        }
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in best.iter().enumerate() {
            if d > far {
                far = d;
                next = i;
            }
        }
        chosen.push(next);
    }
    chosen.sort_unstable();
    chosen.dedup();
    SensorSet::from_indices(chosen, m)
}

/// Fill distance of `points` with respect to evaluation set `eval`:
/// `max_{e in eval} min_{x in points} |e - x|`.
///
/// `eval` stands in for the continuous domain; pass a dense cloud.
pub fn fill_distance(points: &PointCloud, eval: &PointCloud) -> Result<f64> {
    if points.dim() != eval.dim() {
        return Err(Error::dim(
            "fill_distance",
            format!("dims disagree: {} vs {}", points.dim(), eval.dim()),
        ));
    }
    let mut worst = 0.0f64;
    for e in 0..eval.len() {
        let pe = eval.point(e);
        let mut best = f64::INFINITY;
        for x in 0..points.len() {
            best = best.min(dist2(pe, points.point(x)));
        }
        worst = worst.max(best);
    }
    Ok(worst.sqrt())
}

/// Separation radius: half the smallest pairwise distance.
/// Needs at least two points.
pub fn separation_radius(points: &PointCloud) -> Result<f64> {
    let m = points.len();
    if m < 2 {
        return Err(Error::param(
            "separation_radius",
            format!("need at least 2 points, got {m}"),
        ));
    }
    let mut best = f64::INFINITY;
    for i in 0..m {
        for j in (i + 1)..m {
            best = best.min(dist2(points.point(i), points.point(j)));
        }
    }
    Ok(0.5 * best.sqrt())
}

/// A partially observed field: cloud, sensor mask, and noisy values
/// (zeroed at unobserved points).
#[derive(Debug, Clone)]
pub struct ConditioningInstance {
    pub cloud: PointCloud,
    pub sensors: SensorSet,
    /// `m x p` observations; rows with mask 0 are exactly zero.
    pub obs: Vec<f64>,
    pub channels: usize,
}

impl ConditioningInstance {
    pub fn new(cloud: PointCloud, sensors: SensorSet, obs: Vec<f64>, channels: usize) -> Result<Self> {
        let m = cloud.len();
        if sensors.mask.len() != m {
            return Err(Error::dim(
                "ConditioningInstance::new",
                format!("mask length {} vs {m} points", sensors.mask.len()),
            ));
        }
        if channels == 0 || obs.len() != m * channels {
            return Err(Error::dim(
                "ConditioningInstance::new",
                format!("obs length {} vs {m} x {channels}", obs.len()),
            ));
        }
        for i in 0..m {
            if sensors.mask[i] == 0.0 {
                for c in 0..channels {
                    if obs[i * channels + c] != 0.0 {
                        return Err(Error::contract(
                            "ConditioningInstance::new",
                            format!("nonzero observation at unmasked point {i}"),
                        ));
                    }
                }
            }
        }
        Ok(ConditioningInstance {
            cloud,
            sensors,
            obs,
            channels,
        })
    }

    /// Fully observed, noise-free instance (the stage-two reference).
    pub fn full(cloud: PointCloud, values: &[f64], channels: usize) -> Result<Self> {
        let m = cloud.len();
        let sensors = SensorSet::from_indices((0..m).collect(), m)?;
        ConditioningInstance::new(cloud, sensors, values.to_vec(), channels)
    }
}

/// Observe `field` (`m x p`) at `sensors`, adding i.i.d. Gaussian noise
/// with per-channel standard deviation `noise_level * channel_std[c]`,
/// then zeroing unobserved points.
pub fn build_conditioning(
    cloud: &PointCloud,
    sensors: &SensorSet,
    field: &[f64],
    channels: usize,
    noise_level: f64,
    channel_std: &[f64],
    seed: u64,
) -> Result<ConditioningInstance> {
    let m = cloud.len();
    if field.len() != m * channels || channels == 0 {
        return Err(Error::dim(
            "build_conditioning",
            format!("field length {} vs {m} x {channels}", field.len()),
        ));
    }
    if channel_std.len() != channels {
        return Err(Error::dim(
            "build_conditioning",
            format!("channel_std length {} vs {channels} channels", channel_std.len()),
        ));
    }
    if noise_level < 0.0 {
        return Err(Error::param("build_conditioning", "negative noise level"));
    }
    let mut rng = Rng::from_seed(seed);
    let mut obs = vec![0.0; m * channels];
    for i in 0..m {
        for c in 0..channels {
            // Draw in a fixed order regardless of the mask so the noise
            // stream depends only on the seed.
            let eps = rng.next_gaussian() * noise_level * channel_std[c];
            obs[i * channels + c] = (field[i * channels + c] + eps) * sensors.mask[i];
        }
    }
    ConditioningInstance::new(cloud.clone(), sensors.clone(), obs, channels)
}

/// Regular grid over `[-1, 1]^d` with `per_side` points per axis.
pub fn grid_cloud(dim: usize, per_side: usize) -> Result<PointCloud> {
    if per_side < 2 {
        return Err(Error::param("grid_cloud", "need at least 2 points per side"));
    }
    let step = 2.0 / (per_side - 1) as f64;
    let axis: Vec<f64> = (0..per_side).map(|i| -1.0 + i as f64 * step).collect();
    let coords = match dim {
        1 => axis,
        2 => {
            let mut c = Vec::with_capacity(per_side * per_side * 2);
            for &x in &axis {
                for &y in &axis {
                    c.push(x);
                    c.push(y);
                }
            }
            c
        }
        3 => {
            let mut c = Vec::with_capacity(per_side.pow(3) * 3);
            for &x in &axis {
                for &y in &axis {
                    for &z in &axis {
                        c.push(x);
                        c.push(y);
                        c.push(z);
                    }
                }
            }
            c
        }
        _ => {
            return Err(Error::param(
                "grid_cloud",
                format!("dim must be 1, 2, or 3, got {dim}"),
            ))
        }
    };
    PointCloud::new(coords, dim, "grid")
}
