//! Conditional rectified flow in the autoencoder's latent space.
//!
//! A transformer velocity network learns to transport Gaussian noise to
//! encoded-field latents along straight paths: for noise `z0`, data
//! latent `z1`, and `t` uniform in [0, 1], the network sees
//! `z_t = (1 - t) z0 + t z1` and regresses the constant displacement
//! `z1 - z0` (noise lives at t = 0, data at t = 1). Conditioning on the
//! partial observation is additive: the frozen encoder's code `z_c` is
//! summed onto the tokens. Time enters through a sinusoidal embedding
//! and per-block adaptive layer-norm modulation whose projections start
//! at zero, so an untrained network is exactly time-independent.
//!
//! Sampling integrates the learned velocity with forward Euler from
//! `t = 0` to `t = 1`; repeated draws through the decoder give posterior
//! ensembles with pointwise uncertainty.

use crate::data::tags;
use crate::error::{Error, Result};
use crate::geofae::{GeoFaeModel, LatentCode};
use crate::geometry::ConditioningInstance;
use crate::nn::{Attention, Linear, Mlp, ParamStore, StoreBinding, LN_EPS};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Velocity-network hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Token width `D`; must equal the autoencoder's latent dim.
    pub latent_dim: usize,
    /// Token count `P`; must equal the autoencoder's latent token count.
    pub latent_tokens: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_embed_dim: usize,
    /// Euler steps used when the caller does not specify.
    pub default_steps: usize,
}

impl FlowConfig {
    /// Small configuration for single-core experimentation.
    pub fn desk(latent_dim: usize, latent_tokens: usize) -> Self {
        FlowConfig {
            latent_dim,
            latent_tokens,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            time_embed_dim: latent_dim,
            default_steps: 10,
        }
    }

    /// Full-scale configuration.
    pub fn paper(latent_dim: usize, latent_tokens: usize) -> Self {
        FlowConfig {
            latent_dim,
            latent_tokens,
            blocks: 8,
            heads: 8,
            mlp_ratio: 2,
            time_embed_dim: latent_dim,
            default_steps: 10,
        }
    }

    pub fn by_name(name: &str, latent_dim: usize, latent_tokens: usize) -> Result<Self> {
        match name {
            "desk" => Ok(FlowConfig::desk(latent_dim, latent_tokens)),
            "paper" => Ok(FlowConfig::paper(latent_dim, latent_tokens)),
            other => Err(Error::config(
                "FlowConfig::by_name",
                format!("unknown preset {other:?} (desk, paper)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |details: String| Err(Error::config("FlowConfig::validate", details));
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return fail(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.latent_tokens == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return fail("latent_tokens, blocks, mlp_ratio must all be >= 1".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return fail(format!(
                "time_embed_dim {} must be positive and even",
                self.time_embed_dim
            ));
        }
        if self.default_steps == 0 {
            return fail("default_steps must be >= 1".into());
        }
        Ok(())
    }
}

/// Straight-path interpolation `z_t = (1 - t) z0 + t z1` with noise at
/// `t = 0` and data at `t = 1`.
pub fn interpolate_zt(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(
            "interpolate_zt",
            format!("t must be in [0, 1], got {t}"),
        ));
    }
    if z0.shape() != z1.shape() {
        return Err(Error::dim(
            "interpolate_zt",
            format!("shapes {:?} vs {:?}", z0.shape(), z1.shape()),
        ));
    }
    let data: Vec<f64> = z0
        .as_slice()
        .iter()
        .zip(z1.as_slice())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::from_vec(z0.shape().to_vec(), data)
}

/// Sinusoidal embedding of a continuous time in [0, 1]: frequencies are
/// a geometric ladder over `10000^(-i/half)`, with time scaled by 1000
/// so the fastest band resolves small steps. Layout `[cos | sin]`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(
            "time_embedding",
            format!("dim must be positive and even, got {dim}"),
        ));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10000.0f64).ln() / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Tensor::matrix(1, dim, out)
}

struct DitBlock {
    attn: Attention,
    mlp: Mlp,
    /// Zero-initialized projection of the time feature to the six
    /// modulation vectors (shift/scale/gate for attention and MLP).
    modulation: Linear,
}

/// The velocity network: DiT-style transformer over the latent tokens.
pub struct FlowModel {
    pub cfg: FlowConfig,
    pub store: ParamStore,
    t_mlp: Mlp,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    head: Linear,
}

impl FlowModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let hidden = cfg.mlp_ratio * d;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive2(seed, tags::MODEL_INIT, 1);

        let t_mlp = Mlp::new(&mut store, "flow.t_mlp", cfg.time_embed_dim, d, d, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            blocks.push(DitBlock {
                attn: Attention::new(&mut store, &format!("flow.blk{i}.attn"), d, cfg.heads, &mut rng)?,
                mlp: Mlp::new(&mut store, &format!("flow.blk{i}.mlp"), d, hidden, d, &mut rng),
                // Zero-initialized modulation closes every gate, so the
                // whole network starts as its final layer-norm + head.
                modulation: Linear::new_zeroed(&mut store, &format!("flow.blk{i}.mod"), d, 6 * d),
            });
        }
        let final_mod = Linear::new_zeroed(&mut store, "flow.final_mod", d, 2 * d);
        let head = Linear::new(&mut store, "flow.head", d, d, &mut rng);

        Ok(FlowModel {
            cfg,
            store,
            t_mlp,
            blocks,
            final_mod,
            head,
        })
    }

    fn check_tokens(&self, what: &str, t: &Tensor) -> Result<()> {
        let (p, d) = t.dims2()?;
        if p != self.cfg.latent_tokens || d != self.cfg.latent_dim {
            return Err(Error::dim(
                "FlowModel::dit_forward",
                format!(
                    "{what} is {p} x {d}, config expects {} x {}",
                    self.cfg.latent_tokens, self.cfg.latent_dim
                ),
            ));
        }
        Ok(())
    }

    /// Velocity forward on an existing tape. `z_t` and `z_c` are `P x D`
    /// token nodes; conditioning is additive (`tokens = z_t + z_c`) and
    /// time modulates every block through adaptive layer norm.
    pub fn dit_forward_on_tape(
        &self,
        tape: &mut Tape,
        bind: &StoreBinding,
        z_t: Var,
        t: f64,
        z_c: Var,
    ) -> Result<Var> {
        self.check_tokens("z_t", tape.value(z_t))?;
        self.check_tokens("z_c", tape.value(z_c))?;
        let d = self.cfg.latent_dim;

        let mut x = tape.add(z_t, z_c)?;
        let t_emb = tape.constant(time_embedding(t, self.cfg.time_embed_dim)?);
        let c = self.t_mlp.forward(tape, bind, t_emb)?; // [1, D]

        for block in &self.blocks {
            let m = block.modulation.forward(tape, bind, c)?; // [1, 6D]
            let shift1 = tape.slice_cols(m, 0, d)?;
            let scale1 = tape.slice_cols(m, d, d)?;
            let gate1 = tape.slice_cols(m, 2 * d, d)?;
            let shift2 = tape.slice_cols(m, 3 * d, d)?;
            let scale2 = tape.slice_cols(m, 4 * d, d)?;
            let gate2 = tape.slice_cols(m, 5 * d, d)?;

            let n1 = tape.layer_norm_plain(x, LN_EPS)?;
            let s1 = tape.affine(scale1, 1.0, 1.0)?; // 1 + scale
            let n1 = tape.mul_row(n1, s1)?;
            let n1 = tape.add_row(n1, shift1)?;
            let a = block.attn.forward(tape, bind, n1, n1)?;
            let a = tape.mul_row(a, gate1)?;
            x = tape.add(x, a)?;

            let n2 = tape.layer_norm_plain(x, LN_EPS)?;
            let s2 = tape.affine(scale2, 1.0, 1.0)?;
            let n2 = tape.mul_row(n2, s2)?;
            let n2 = tape.add_row(n2, shift2)?;
            let f = block.mlp.forward(tape, bind, n2)?;
            let f = tape.mul_row(f, gate2)?;
            x = tape.add(x, f)?;
        }

        let m = self.final_mod.forward(tape, bind, c)?; // [1, 2D]
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, d)?;
        let n = tape.layer_norm_plain(x, LN_EPS)?;
        let s = tape.affine(scale, 1.0, 1.0)?;
        let n = tape.mul_row(n, s)?;
        let n = tape.add_row(n, shift)?;
        self.head.forward(tape, bind, n)
    }

    /// Inference velocity: fresh tape, no gradients.
    pub fn velocity(&self, z_t: &Tensor, t: f64, z_c: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let zc = tape.constant(z_c.clone());
        let v = self.dit_forward_on_tape(&mut tape, &bind, zt, t, zc)?;
        Ok(tape.value(v).clone())
    }

    /// Rectified-flow training loss on an existing tape.
    ///
    /// Draws `z0 ~ N(0, I)` and `t ~ U[0, 1]` from `seed`, encodes the
    /// reference (full observation) to `z1` and the partial instance to
    /// the conditioning code, and regresses the velocity at `z_t` onto
    /// `z1 - z0`. The encoder must be frozen; it receives no gradient.
    pub fn crf_loss_on_tape(
        &self,
        tape: &mut Tape,
        bind: &StoreBinding,
        fae: &GeoFaeModel,
        inst: &ConditioningInstance,
        reference: &ConditioningInstance,
        seed: u64,
    ) -> Result<Var> {
        if !fae.is_frozen() {
            return Err(Error::contract(
                "crf_loss",
                "autoencoder must be frozen before flow training",
            ));
        }
        if fae.cfg.latent_dim != self.cfg.latent_dim
            || fae.cfg.latent_tokens != self.cfg.latent_tokens
        {
            return Err(Error::config(
                "crf_loss",
                format!(
                    "flow tokens {} x {} vs autoencoder {} x {}",
                    self.cfg.latent_tokens,
                    self.cfg.latent_dim,
                    fae.cfg.latent_tokens,
                    fae.cfg.latent_dim
                ),
            ));
        }
        if reference.sensors.count() != reference.cloud.len() {
            return Err(Error::contract(
                "crf_loss",
                "reference instance must observe every point (full mask)",
            ));
        }

        let z1 = fae.encode(reference)?.tokens;
        let z_c = fae.encode(inst)?.tokens;
        let n = z1.numel();
        let z0_data = Rng::derive2(seed, tags::FLOW_NOISE, 0).gaussian_vec(n);
        let z0 = Tensor::from_vec(z1.shape().to_vec(), z0_data)?;
        let t = Rng::derive2(seed, tags::FLOW_TIME, 0).next_f64();

        let z_t = interpolate_zt(&z0, &z1, t)?;
        let target_data: Vec<f64> = z1
            .as_slice()
            .iter()
            .zip(z0.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let target = Tensor::from_vec(z1.shape().to_vec(), target_data)?;

        let ztv = tape.constant(z_t);
        let zcv = tape.constant(z_c);
        let v = self.dit_forward_on_tape(tape, bind, ztv, t, zcv)?;
        velocity_match_loss(tape, v, &target)
    }

    /// Loss value without gradients (evaluation convenience).
    pub fn crf_loss_value(
        &self,
        fae: &GeoFaeModel,
        inst: &ConditioningInstance,
        reference: &ConditioningInstance,
        seed: u64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let loss = self.crf_loss_on_tape(&mut tape, &bind, fae, inst, reference, seed)?;
        tape.value(loss).item()
    }

    /// Integrate the learned velocity from Gaussian noise at `t = 0` to
    /// the data end `t = 1` with `steps` forward-Euler steps.
    pub fn euler_sample(&self, z_c: &LatentCode, steps: usize, seed: u64) -> Result<Tensor> {
        let shape = [self.cfg.latent_tokens, self.cfg.latent_dim];
        let z0_data = Rng::derive2(seed, tags::SAMPLER, 0).gaussian_vec(shape[0] * shape[1]);
        let z0 = Tensor::from_vec(shape.to_vec(), z0_data)?;
        euler_integrate(&z0, steps, |z, t| self.velocity(z, t, &z_c.tokens))
    }
}

/// Mean squared deviation between a velocity node and its target.
pub fn velocity_match_loss(tape: &mut Tape, v: Var, target: &Tensor) -> Result<Var> {
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(v, tgt)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Forward-Euler integration of `dz/dt = velocity(z, t)` from `z0` at
/// `t = 0` to `t = 1` in `steps` equal steps. Generic in the velocity so
/// closed-form fields can exercise the integrator exactly.
pub fn euler_integrate(
    z0: &Tensor,
    steps: usize,
    velocity: impl Fn(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::param("euler_integrate", "steps must be >= 1"));
    }
    let h = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::dim(
                "euler_integrate",
                format!("velocity shape {:?} vs state {:?}", v.shape(), z.shape()),
            ));
        }
        let data: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .map(|(a, b)| a + h * b)
            .collect();
        z = Tensor::from_vec(z.shape().to_vec(), data)?;
    }
    Ok(z)
}

/// Decoded posterior samples at a shared query set, with pointwise
/// mean and unbiased standard deviation (zero when only one member).
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    /// One decoded field per draw, each flat `q x p`.
    pub members: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub channels: usize,
}

/// Draw `n_samples` posterior fields for one conditioning instance: the
/// code is computed once (the velocity's conditioning is constant in
/// time), each draw integrates from fresh noise, and every latent is
/// decoded at `queries` (flat row-major `q x d`).
pub fn posterior_ensemble(
    flow: &FlowModel,
    fae: &GeoFaeModel,
    inst: &ConditioningInstance,
    n_samples: usize,
    queries: &[f64],
    steps: usize,
    seed: u64,
) -> Result<PosteriorEnsemble> {
    if n_samples == 0 {
        return Err(Error::param("posterior_ensemble", "n_samples must be >= 1"));
    }
    let z_c = fae.encode(inst)?;
    let mut members = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let draw_seed = Rng::derive2(seed, tags::SAMPLER, (i + 1) as u64).next_u64();
        let z1 = flow.euler_sample(&z_c, steps, draw_seed)?;
        members.push(fae.decode(&LatentCode { tokens: z1 }, queries)?);
    }
    let len = members[0].len();
    let n = n_samples as f64;
    let mut mean = vec![0.0; len];
    for m in &members {
        for (a, &v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= n;
    }
    let mut std = vec![0.0; len];
    if n_samples > 1 {
        for m in &members {
            for (s, (&v, &mu)) in std.iter_mut().zip(m.iter().zip(&mean)) {
                *s += (v - mu) * (v - mu);
            }
        }
        for s in &mut std {
            *s = (*s / (n - 1.0)).sqrt();
        }
    }
    Ok(PosteriorEnsemble {
        members,
        mean,
        std,
        channels: fae.cfg.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geofae::GeoFaeConfig;
    use crate::geometry::{build_conditioning, sample_sensors, PointCloud};

    fn tiny_flow_cfg() -> FlowConfig {
        FlowConfig {
            latent_dim: 8,
            latent_tokens: 4,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            time_embed_dim: 8,
            default_steps: 10,
        }
    }

    fn tiny_fae_cfg() -> GeoFaeConfig {
        GeoFaeConfig {
            latent_dim: 8,
            latent_tokens: 4,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            fourier_bands: 4,
            fourier_std: 10.0,
            channels: 1,
            coord_dim: 2,
        }
    }

    fn rand_tokens(seed: u64) -> Tensor {
        let mut rng = Rng::from_seed(seed);
        Tensor::matrix(4, 8, (0..32).map(|_| rng.next_gaussian()).collect()).unwrap()
    }

    fn instance_pair(seed: u64) -> (ConditioningInstance, ConditioningInstance) {
        let mut rng = Rng::from_seed(seed);
        let coords: Vec<f64> = (0..20).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let cloud = PointCloud::new(coords, 2, "t").unwrap();
        let values: Vec<f64> = (0..10).map(|_| rng.next_gaussian()).collect();
        let sensors = sample_sensors(&cloud, 0.5, seed ^ 1).unwrap();
        let partial =
            build_conditioning(&cloud, &sensors, &values, 1, 0.0, &[1.0], seed ^ 2).unwrap();
        let full = ConditioningInstance::full(cloud, &values, 1).unwrap();
        (partial, full)
    }

    #[test]
    fn interpolation_hits_both_endpoints_and_midpoint() {
        let z0 = rand_tokens(1);
        let z1 = rand_tokens(2);
        assert!(interpolate_zt(&z0, &z1, 0.0).unwrap().bitwise_eq(&z0));
        assert!(interpolate_zt(&z0, &z1, 1.0).unwrap().bitwise_eq(&z1));
        let zeros = Tensor::zeros(&[4, 8]);
        let twos = Tensor::from_vec(vec![4, 8], vec![2.0; 32]).unwrap();
        let mid = interpolate_zt(&zeros, &twos, 0.5).unwrap();
        assert!(mid.as_slice().iter().all(|&v| v == 1.0));
        assert!(interpolate_zt(&z0, &z1, -0.1).is_err());
        assert!(interpolate_zt(&z0, &z1, 1.1).is_err());
    }

    #[test]
    fn time_embedding_known_values_and_injectivity() {
        let e0 = time_embedding(0.0, 8).unwrap();
        let v = e0.as_slice();
        assert!(v[..4].iter().all(|&c| c == 1.0)); // cos(0)
        assert!(v[4..].iter().all(|&s| s == 0.0)); // sin(0)
        let a = time_embedding(0.30, 8).unwrap();
        let b = time_embedding(0.31, 8).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-4);
        assert!(time_embedding(0.5, 7).is_err());
    }

    #[test]
    fn untrained_velocity_is_time_independent_and_matches_reduction() {
        // Zero-initialized modulation: every gate is zero, so the blocks
        // pass tokens through untouched and the final modulated norm is
        // the plain norm. Output must be head(LN(z_t + z_c)).
        let model = FlowModel::new(tiny_flow_cfg(), 3).unwrap();
        let z_t = rand_tokens(4);
        let z_c = rand_tokens(5);
        let va = model.velocity(&z_t, 0.2, &z_c).unwrap();
        let vb = model.velocity(&z_t, 0.9, &z_c).unwrap();
        assert!(va.bitwise_eq(&vb), "untrained velocity must ignore t");

        // Independent reduction oracle via raw tape ops.
        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape, false);
        let sum = {
            let a = tape.constant(z_t.clone());
            let b = tape.constant(z_c.clone());
            tape.add(a, b).unwrap()
        };
        let n = tape.layer_norm_plain(sum, LN_EPS).unwrap();
        let want = model.head.forward(&mut tape, &bind, n).unwrap();
        assert!(tape.value(want).max_abs_diff(&va).unwrap() < 1e-14);
    }

    #[test]
    fn velocity_depends_on_conditioning() {
        let model = FlowModel::new(tiny_flow_cfg(), 6).unwrap();
        let z_t = rand_tokens(7);
        let va = model.velocity(&z_t, 0.4, &rand_tokens(8)).unwrap();
        let vb = model.velocity(&z_t, 0.4, &rand_tokens(9)).unwrap();
        assert!(va.max_abs_diff(&vb).unwrap() > 0.0);
        assert_eq!(va.shape(), &[4, 8]);
    }

    #[test]
    fn token_shape_mismatch_is_a_dimension_error() {
        let model = FlowModel::new(tiny_flow_cfg(), 10).unwrap();
        let bad = Tensor::matrix(3, 8, vec![0.0; 24]).unwrap();
        assert!(matches!(
            model.velocity(&bad, 0.5, &rand_tokens(11)),
            Err(crate::error::Error::Dimension { .. })
        ));
    }

    #[test]
    fn velocity_match_loss_oracle_and_zero_cases() {
        let target = rand_tokens(12);
        // v == target -> 0.
        let mut tape = Tape::new();
        let v = tape.constant(target.clone());
        let loss = velocity_match_loss(&mut tape, v, &target).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        // v == 0 -> mean of target^2.
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[4, 8]));
        let loss = velocity_match_loss(&mut tape, v, &target).unwrap();
        let want = target.as_slice().iter().map(|x| x * x).sum::<f64>() / 32.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn crf_loss_requires_frozen_encoder_and_full_reference() {
        let fae = GeoFaeModel::new(tiny_fae_cfg(), 13).unwrap();
        let flow = FlowModel::new(tiny_flow_cfg(), 14).unwrap();
        let (partial, full) = instance_pair(15);
        // Not frozen: contract error.
        assert!(matches!(
            flow.crf_loss_value(&fae, &partial, &full, 1),
            Err(crate::error::Error::Contract { .. })
        ));
        let mut fae = fae;
        fae.freeze();
        // Partial reference: contract error.
        assert!(matches!(
            flow.crf_loss_value(&fae, &partial, &partial, 1),
            Err(crate::error::Error::Contract { .. })
        ));
        // Valid call: finite positive loss.
        let loss = flow.crf_loss_value(&fae, &partial, &full, 1).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn crf_loss_gradient_matches_central_differences() {
        let mut fae = GeoFaeModel::new(tiny_fae_cfg(), 16).unwrap();
        fae.freeze();
        let flow = FlowModel::new(tiny_flow_cfg(), 17).unwrap();
        let (partial, full) = instance_pair(18);
        let seed = 9;

        let mut tape = Tape::new();
        let bind = flow.store.bind(&mut tape, true);
        let loss = flow
            .crf_loss_on_tape(&mut tape, &bind, &fae, &partial, &full, seed)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(flow.store.numel());
        for (i, e) in flow.store.entries().iter().enumerate() {
            match bind.grad(&grads, i) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(e.value.numel())),
            }
        }

        let mut flow = flow;
        let base = flow.store.to_flat();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut flat = base.clone();
            flat[i] = base[i] + h;
            flow.store.load_flat(&flat).unwrap();
            let lp = flow.crf_loss_value(&fae, &partial, &full, seed).unwrap();
            flat[i] = base[i] - h;
            flow.store.load_flat(&flat).unwrap();
            let lm = flow.crf_loss_value(&fae, &partial, &full, seed).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
        flow.store.load_flat(&base).unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn frozen_encoder_receives_no_gradient_through_crf_loss() {
        let mut fae = GeoFaeModel::new(tiny_fae_cfg(), 19).unwrap();
        fae.freeze();
        let flow = FlowModel::new(tiny_flow_cfg(), 20).unwrap();
        let (partial, full) = instance_pair(21);
        let before = fae.store.clone();
        let mut tape = Tape::new();
        let bind = flow.store.bind(&mut tape, true);
        let loss = flow
            .crf_loss_on_tape(&mut tape, &bind, &fae, &partial, &full, 2)
            .unwrap();
        let _ = tape.backward(loss).unwrap();
        assert!(fae.store.bitwise_eq(&before));
    }

    #[test]
    fn euler_integrates_constant_velocity_exactly_for_any_step_count() {
        let z0 = rand_tokens(22);
        let c = rand_tokens(23);
        let shift = |z: &Tensor, steps: usize| -> Tensor {
            euler_integrate(z, steps, |_, _| Ok(c.clone())).unwrap()
        };
        let one = shift(&z0, 1);
        let thousand = shift(&z0, 1000);
        for i in 0..32 {
            let want = z0.as_slice()[i] + c.as_slice()[i];
            assert!((one.as_slice()[i] - want).abs() < 1e-15);
            assert!(
                (thousand.as_slice()[i] - want).abs() < 1e-12,
                "straight-line transport must not depend on step count"
            );
        }
    }

    #[test]
    fn euler_matches_exponential_growth_closed_form() {
        // dz/dt = z from 1: z(1) = e. Forward Euler: (1 + 1/n)^n.
        let z0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let out = euler_integrate(&z0, 1000, |z, _| Ok(z.clone())).unwrap();
        let got = out.as_slice()[0];
        let e = std::f64::consts::E;
        assert!(
            (got - e).abs() / e < 2e-3,
            "1000-step Euler gave {got}, want about {e}"
        );
        let exact = (1.0 + 1.0 / 1000.0f64).powi(1000);
        assert!((got - exact).abs() < 1e-12);
    }

    #[test]
    fn euler_rejects_zero_steps() {
        let z0 = rand_tokens(24);
        assert!(matches!(
            euler_integrate(&z0, 0, |z, _| Ok(z.clone())),
            Err(crate::error::Error::Parameter { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let flow = FlowModel::new(tiny_flow_cfg(), 25).unwrap();
        let code = LatentCode {
            tokens: rand_tokens(26),
        };
        let a = flow.euler_sample(&code, 10, 7).unwrap();
        let b = flow.euler_sample(&code, 10, 7).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = flow.euler_sample(&code, 10, 8).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
    }

    #[test]
    fn posterior_ensemble_shapes_and_spread() {
        let mut fae = GeoFaeModel::new(tiny_fae_cfg(), 27).unwrap();
        fae.freeze();
        let flow = FlowModel::new(tiny_flow_cfg(), 28).unwrap();
        let (partial, _) = instance_pair(29);
        let queries = vec![0.1, 0.2, -0.5, 0.4, 0.9, -0.9];
        let ens = posterior_ensemble(&flow, &fae, &partial, 3, &queries, 5, 11).unwrap();
        assert_eq!(ens.members.len(), 3);
        assert_eq!(ens.mean.len(), 3);
        assert_eq!(ens.std.len(), 3);
        assert!(ens.std.iter().all(|&s| s >= 0.0));
        assert!(
            ens.members[0] != ens.members[1],
            "independent draws must differ"
        );
        // Hand-check the unbiased std at entry 0.
        let vals: Vec<f64> = ens.members.iter().map(|m| m[0]).collect();
        let mu = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 2.0;
        assert!((ens.std[0] - var.sqrt()).abs() < 1e-12);
        assert!(matches!(
            posterior_ensemble(&flow, &fae, &partial, 0, &queries, 5, 11),
            Err(crate::error::Error::Parameter { .. })
        ));
    }

    #[test]
    fn single_member_ensemble_has_zero_std() {
        let mut fae = GeoFaeModel::new(tiny_fae_cfg(), 30).unwrap();
        fae.freeze();
        let flow = FlowModel::new(tiny_flow_cfg(), 31).unwrap();
        let (partial, _) = instance_pair(32);
        let ens = posterior_ensemble(&flow, &fae, &partial, 1, &[0.0, 0.0], 3, 12).unwrap();
        assert!(ens.std.iter().all(|&s| s == 0.0));
        assert_eq!(ens.mean, ens.members[0]);
    }

    #[test]
    fn presets_validate() {
        assert!(FlowConfig::desk(32, 16).validate().is_ok());
        assert!(FlowConfig::paper(256, 256).validate().is_ok());
        let mut bad = tiny_flow_cfg();
        bad.time_embed_dim = 7;
        assert!(bad.validate().is_err());
        assert!(FlowConfig::by_name("desk", 32, 16).is_ok());
        assert!(FlowConfig::by_name("mega", 32, 16).is_err());
    }
}
