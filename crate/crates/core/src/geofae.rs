//! Geometric function autoencoder.
//!
//! The encoder turns a partially observed field on an arbitrary point
//! cloud into a fixed grid of `P x D` latent tokens: coordinates get
//! random Fourier features, the sensor mask and masked observations each
//! pass through a small MLP, the three embeddings are concatenated and
//! projected to width `D`, and a cross-attention bottleneck (trainable
//! latent queries attending over the input set) followed by `L` pre-norm
//! self-attention blocks produces the code. Because the queries are
//! fixed, the code shape never depends on the input size, and because
//! attention sums over keys, the encoder is permutation-invariant over
//! input points.
//!
//! The decoder evaluates the field continuously: query coordinates are
//! Fourier-embedded, refined by `K` cross-attention blocks against the
//! code, and projected to field values. Each query row is processed
//! independently, so outputs are identical however queries are batched.

use crate::data::{tags, FieldSample};
use crate::error::{Error, Result};
use crate::geometry::ConditioningInstance;
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamId, ParamStore, StoreBinding};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoFaeConfig {
    /// Embedding width `D`.
    pub latent_dim: usize,
    /// Number of latent query tokens `P`.
    pub latent_tokens: usize,
    /// Encoder self-attention blocks `L`.
    pub enc_blocks: usize,
    /// Decoder cross-attention blocks `K`.
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Random Fourier frequency count (embedding width `2 * bands`).
    pub fourier_bands: usize,
    /// Standard deviation of the frozen frequency matrix.
    pub fourier_std: f64,
    /// Field channels `p`.
    pub channels: usize,
    /// Coordinate dimension `d`.
    pub coord_dim: usize,
}

impl GeoFaeConfig {
    /// Small configuration for single-core experimentation.
    pub fn desk(channels: usize, coord_dim: usize) -> Self {
        GeoFaeConfig {
            latent_dim: 32,
            latent_tokens: 16,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 4,
            mlp_ratio: 2,
            fourier_bands: 16,
            fourier_std: 4.0,
            channels,
            coord_dim,
        }
    }

    /// Full-scale configuration.
    pub fn paper(channels: usize, coord_dim: usize) -> Self {
        GeoFaeConfig {
            latent_dim: 256,
            latent_tokens: 256,
            enc_blocks: 8,
            dec_blocks: 4,
            heads: 8,
            mlp_ratio: 2,
            fourier_bands: 128,
            fourier_std: 10.0,
            channels,
            coord_dim,
        }
    }

    pub fn by_name(name: &str, channels: usize, coord_dim: usize) -> Result<Self> {
        match name {
            "desk" => Ok(GeoFaeConfig::desk(channels, coord_dim)),
            "paper" => Ok(GeoFaeConfig::paper(channels, coord_dim)),
            other => Err(Error::config(
                "GeoFaeConfig::by_name",
                format!("unknown preset {other:?} (desk, paper)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |details: String| Err(Error::config("GeoFaeConfig::validate", details));
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return fail(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            ));
        }
        if self.latent_dim % 2 != 0 {
            return fail(format!(
                "latent_dim {} must be even (mask/observation embeddings each get half)",
                self.latent_dim
            ));
        }
        if self.latent_tokens == 0 || self.enc_blocks == 0 || self.dec_blocks == 0 {
            return fail("latent_tokens, enc_blocks, dec_blocks must all be >= 1".into());
        }
        if self.mlp_ratio == 0 || self.fourier_bands == 0 || self.channels == 0 {
            return fail("mlp_ratio, fourier_bands, channels must all be >= 1".into());
        }
        if !(1..=3).contains(&self.coord_dim) {
            return fail(format!("coord_dim {} outside 1..=3", self.coord_dim));
        }
        if !(self.fourier_std > 0.0) {
            return fail(format!("fourier_std {} must be positive", self.fourier_std));
        }
        Ok(())
    }
}

/// Fixed-size latent representation of one field.
#[derive(Debug, Clone)]
pub struct LatentCode {
    /// `P x D` tokens.
    pub tokens: Tensor,
}

/// Random Fourier features for a coordinate batch:
/// `gamma(x) = [sin(2 pi B x) | cos(2 pi B x)]` with `B: bands x d`.
///
/// Both inputs are constants during training (the frequency matrix is
/// frozen), so this is computed outside the tape.
pub fn fourier_embed(coords: &[f64], n: usize, d: usize, b: &Tensor) -> Result<Tensor> {
    let (bands, bd) = b.dims2()?;
    if bd != d || coords.len() != n * d {
        return Err(Error::dim(
            "fourier_embed",
            format!(
                "coords {} as {n} x {d} vs frequency matrix {bands} x {bd}",
                coords.len()
            ),
        ));
    }
    let bm = b.as_slice();
    let mut out = vec![0.0; n * 2 * bands];
    for i in 0..n {
        for j in 0..bands {
            let mut dot = 0.0;
            for k in 0..d {
                dot += bm[j * d + k] * coords[i * d + k];
            }
            let arg = std::f64::consts::TAU * dot;
            out[i * 2 * bands + j] = arg.sin();
            out[i * 2 * bands + bands + j] = arg.cos();
        }
    }
    Tensor::matrix(n, 2 * bands, out)
}

struct EncBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

struct DecBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

/// The autoencoder: configuration, parameters, and layer handles.
pub struct GeoFaeModel {
    pub cfg: GeoFaeConfig,
    pub store: ParamStore,
    frozen: bool,
    fourier_b: ParamId,
    mask_mlp: Mlp,
    obs_mlp: Mlp,
    input_proj: Linear,
    latent_q: ParamId,
    perc_ln_q: LayerNorm,
    perc_ln_kv: LayerNorm,
    perc_attn: Attention,
    perc_ln_mlp: LayerNorm,
    perc_mlp: Mlp,
    post_ln: LayerNorm,
    enc: Vec<EncBlock>,
    dec_in: Linear,
    dec: Vec<DecBlock>,
    head: Linear,
}

impl GeoFaeModel {
    pub fn new(cfg: GeoFaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let hidden = cfg.mlp_ratio * d;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive2(seed, tags::MODEL_INIT, 0);

        // Frozen Fourier frequencies (plain normal, not truncated).
        let b_data: Vec<f64> = (0..cfg.fourier_bands * cfg.coord_dim)
            .map(|_| rng.next_gaussian() * cfg.fourier_std)
            .collect();
        let fourier_b = store.push(
            "fae.fourier_b",
            Tensor::matrix(cfg.fourier_bands, cfg.coord_dim, b_data)?,
            false,
            false,
        );

        let mask_mlp = Mlp::new(&mut store, "fae.mask_mlp", 1, d, d / 2, &mut rng);
        let obs_mlp = Mlp::new(&mut store, "fae.obs_mlp", cfg.channels, d, d / 2, &mut rng);
        let input_proj = Linear::new(
            &mut store,
            "fae.input_proj",
            2 * cfg.fourier_bands + d,
            d,
            &mut rng,
        );
        // Unit-scale random queries; the initial layer norm makes the
        // stream scale-free, so only their directions matter.
        let latent_q = store.push(
            "fae.latent_q",
            crate::nn::trunc_normal(&[cfg.latent_tokens, d], 1.0, &mut rng),
            true,
            false,
        );
        let perc_ln_q = LayerNorm::new(&mut store, "fae.perc.ln_q", d);
        let perc_ln_kv = LayerNorm::new(&mut store, "fae.perc.ln_kv", d);
        let perc_attn = Attention::new(&mut store, "fae.perc.attn", d, cfg.heads, &mut rng)?;
        let perc_ln_mlp = LayerNorm::new(&mut store, "fae.perc.ln_mlp", d);
        let perc_mlp = Mlp::new(&mut store, "fae.perc.mlp", d, hidden, d, &mut rng);
        let post_ln = LayerNorm::new(&mut store, "fae.post_ln", d);

        let mut enc = Vec::with_capacity(cfg.enc_blocks);
        for l in 0..cfg.enc_blocks {
            enc.push(EncBlock {
                ln1: LayerNorm::new(&mut store, &format!("fae.enc{l}.ln1"), d),
                attn: Attention::new(&mut store, &format!("fae.enc{l}.attn"), d, cfg.heads, &mut rng)?,
                ln2: LayerNorm::new(&mut store, &format!("fae.enc{l}.ln2"), d),
                mlp: Mlp::new(&mut store, &format!("fae.enc{l}.mlp"), d, hidden, d, &mut rng),
            });
        }

        let dec_in = Linear::new(&mut store, "fae.dec_in", 2 * cfg.fourier_bands, d, &mut rng);
        let mut dec = Vec::with_capacity(cfg.dec_blocks);
        for k in 0..cfg.dec_blocks {
            dec.push(DecBlock {
                ln_q: LayerNorm::new(&mut store, &format!("fae.dec{k}.ln_q"), d),
                ln_kv: LayerNorm::new(&mut store, &format!("fae.dec{k}.ln_kv"), d),
                attn: Attention::new(&mut store, &format!("fae.dec{k}.attn"), d, cfg.heads, &mut rng)?,
                ln_mlp: LayerNorm::new(&mut store, &format!("fae.dec{k}.ln_mlp"), d),
                mlp: Mlp::new(&mut store, &format!("fae.dec{k}.mlp"), d, hidden, d, &mut rng),
            });
        }
        let head = Linear::new(&mut store, "fae.head", d, cfg.channels, &mut rng);

        Ok(GeoFaeModel {
            cfg,
            store,
            frozen: false,
            fourier_b,
            mask_mlp,
            obs_mlp,
            input_proj,
            latent_q,
            perc_ln_q,
            perc_ln_kv,
            perc_attn,
            perc_ln_mlp,
            perc_mlp,
            post_ln,
            enc,
            dec_in,
            dec,
            head,
        })
    }

    /// Mark the model frozen: training binds become constant binds and
    /// the flow trainer's contract check passes.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Bind parameters for a forward pass; trainable only when the model
    /// is not frozen and the caller asks for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> StoreBinding {
        self.store.bind(tape, trainable && !self.frozen)
    }

    fn check_instance(&self, inst: &ConditioningInstance) -> Result<()> {
        if inst.channels != self.cfg.channels {
            return Err(Error::dim(
                "GeoFaeModel::encode",
                format!(
                    "instance has {} channels, model expects {}",
                    inst.channels, self.cfg.channels
                ),
            ));
        }
        if inst.cloud.dim() != self.cfg.coord_dim {
            return Err(Error::dim(
                "GeoFaeModel::encode",
                format!(
                    "instance coords are {}-d, model expects {}-d",
                    inst.cloud.dim(),
                    self.cfg.coord_dim
                ),
            ));
        }
        Ok(())
    }

    /// Encoder forward on an existing tape. Returns the `P x D` code node.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bind: &StoreBinding,
        inst: &ConditioningInstance,
    ) -> Result<Var> {
        self.check_instance(inst)?;
        let m = inst.cloud.len();
        let p = self.cfg.channels;

        // Per-point features: Fourier coords | mask MLP | masked-obs MLP.
        let fourier = fourier_embed(
            inst.cloud.coords(),
            m,
            self.cfg.coord_dim,
            self.store.value(self.fourier_b),
        )?;
        let fourier = tape.constant(fourier);
        let mask_in = tape.constant(Tensor::matrix(m, 1, inst.sensors.mask.clone())?);
        let mask_feat = self.mask_mlp.forward(tape, bind, mask_in)?;
        let obs_in = tape.constant(Tensor::matrix(m, p, inst.obs.clone())?);
        let obs_feat = self.obs_mlp.forward(tape, bind, obs_in)?;
        let concat = tape.concat_cols(&[fourier, mask_feat, obs_feat])?;
        let z = self.input_proj.forward(tape, bind, concat)?;

        // Cross-attention bottleneck onto the latent queries.
        let zq = bind.var(self.latent_q);
        let q_n = self.perc_ln_q.forward(tape, bind, zq)?;
        let kv_n = self.perc_ln_kv.forward(tape, bind, z)?;
        let attn_out = self.perc_attn.forward(tape, bind, q_n, kv_n)?;
        let z_prime = tape.add(zq, attn_out)?;
        let z_prime_n = self.perc_ln_mlp.forward(tape, bind, z_prime)?;
        let mlp_out = self.perc_mlp.forward(tape, bind, z_prime_n)?;
        let z_agg = tape.add(z_prime, mlp_out)?;

        // Pre-norm transformer stack, starting from LN(z_agg).
        let mut zl = self.post_ln.forward(tape, bind, z_agg)?;
        for block in &self.enc {
            let n1 = block.ln1.forward(tape, bind, zl)?;
            let a = block.attn.forward(tape, bind, n1, n1)?;
            let z_mid = tape.add(zl, a)?;
            let n2 = block.ln2.forward(tape, bind, z_mid)?;
            let f = block.mlp.forward(tape, bind, n2)?;
            zl = tape.add(z_mid, f)?;
        }
        Ok(zl)
    }

    /// Decoder forward on an existing tape: evaluate the code at `n`
    /// query coordinates (flat row-major `n x d`). Returns `n x p`.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        bind: &StoreBinding,
        code: Var,
        queries: &[f64],
    ) -> Result<Var> {
        let d = self.cfg.coord_dim;
        if queries.is_empty() || queries.len() % d != 0 {
            return Err(Error::dim(
                "GeoFaeModel::decode",
                format!("query buffer length {} is not a positive multiple of {d}", queries.len()),
            ));
        }
        let n = queries.len() / d;
        let fourier = fourier_embed(queries, n, d, self.store.value(self.fourier_b))?;
        let fourier = tape.constant(fourier);
        let mut x = self.dec_in.forward(tape, bind, fourier)?;
        for block in &self.dec {
            let q_n = block.ln_q.forward(tape, bind, x)?;
            let kv_n = block.ln_kv.forward(tape, bind, code)?;
            let a = block.attn.forward(tape, bind, q_n, kv_n)?;
            let x_prime = tape.add(x, a)?;
            let n_mlp = block.ln_mlp.forward(tape, bind, x_prime)?;
            let f = block.mlp.forward(tape, bind, n_mlp)?;
            x = tape.add(x_prime, f)?;
        }
        self.head.forward(tape, bind, x)
    }

    /// Inference encoder: fresh tape, no gradients.
    pub fn encode(&self, inst: &ConditioningInstance) -> Result<LatentCode> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let code = self.encode_on_tape(&mut tape, &bind, inst)?;
        Ok(LatentCode {
            tokens: tape.value(code).clone(),
        })
    }

    /// Inference decoder: fresh tape, no gradients. `queries` is flat
    /// row-major `n x d`; returns flat `n x p` values.
    pub fn decode(&self, code: &LatentCode, queries: &[f64]) -> Result<Vec<f64>> {
        let (pt, pd) = code.tokens.dims2()?;
        if pt != self.cfg.latent_tokens || pd != self.cfg.latent_dim {
            return Err(Error::dim(
                "GeoFaeModel::decode",
                format!(
                    "code is {pt} x {pd}, model expects {} x {}",
                    self.cfg.latent_tokens, self.cfg.latent_dim
                ),
            ));
        }
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let code_var = tape.constant(code.tokens.clone());
        let out = self.decode_on_tape(&mut tape, &bind, code_var, queries)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    /// Reconstruction loss on an existing tape: encode the instance,
    /// decode at the target points selected by `query_idx`, and return
    /// the mean squared error node over all selected values.
    pub fn fae_loss_on_tape(
        &self,
        tape: &mut Tape,
        bind: &StoreBinding,
        inst: &ConditioningInstance,
        target: &FieldSample,
        query_idx: &[usize],
    ) -> Result<Var> {
        if query_idx.is_empty() {
            return Err(Error::param("fae_loss", "empty query set"));
        }
        if target.channels != self.cfg.channels {
            return Err(Error::dim(
                "fae_loss",
                format!(
                    "target has {} channels, model expects {}",
                    target.channels, self.cfg.channels
                ),
            ));
        }
        let selected = target.select(query_idx)?;
        let code = self.encode_on_tape(tape, bind, inst)?;
        let pred = self.decode_on_tape(tape, bind, code, selected.cloud.coords())?;
        let truth = tape.constant(Tensor::matrix(
            query_idx.len(),
            self.cfg.channels,
            selected.values,
        )?);
        let diff = tape.sub(pred, truth)?;
        let sq = tape.mul(diff, diff)?;
        tape.mean_all(sq)
    }

    /// Loss value without gradients (evaluation convenience).
    pub fn fae_loss_value(
        &self,
        inst: &ConditioningInstance,
        target: &FieldSample,
        query_idx: &[usize],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape, false);
        let loss = self.fae_loss_on_tape(&mut tape, &bind, inst, target, query_idx)?;
        tape.value(loss).item()
    }

    /// Reconstruct field values at all points of a cloud (inference).
    pub fn reconstruct(&self, inst: &ConditioningInstance, queries: &[f64]) -> Result<Vec<f64>> {
        let code = self.encode(inst)?;
        self.decode(&code, queries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_conditioning, sample_sensors, PointCloud, SensorSet};

    fn tiny_cfg() -> GeoFaeConfig {
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

    fn random_cloud(m: usize, seed: u64) -> PointCloud {
        let mut rng = Rng::from_seed(seed);
        let coords: Vec<f64> = (0..m * 2).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        PointCloud::new(coords, 2, "test").unwrap()
    }

    fn random_instance(m: usize, fraction: f64, seed: u64) -> (ConditioningInstance, FieldSample) {
        let cloud = random_cloud(m, seed);
        let mut rng = Rng::from_seed(seed ^ 0xABC);
        let values: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        let sample = FieldSample::new(cloud.clone(), values.clone(), 1).unwrap();
        let sensors = sample_sensors(&cloud, fraction, seed ^ 0x5E5).unwrap();
        let inst = build_conditioning(&cloud, &sensors, &values, 1, 0.0, &[1.0], seed ^ 0x901).unwrap();
        (inst, sample)
    }

    #[test]
    fn fourier_embedding_of_origin_is_sin_zero_cos_one() {
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.25, 7.0, 3.0]).unwrap();
        let g = fourier_embed(&[0.0, 0.0], 1, 2, &b).unwrap();
        let v = g.as_slice();
        assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&v[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_frequency_matrix_gives_constant_embedding() {
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let g1 = fourier_embed(&[0.3, -0.8], 1, 2, &b).unwrap();
        let g2 = fourier_embed(&[-0.9, 0.1], 1, 2, &b).unwrap();
        assert!(g1.bitwise_eq(&g2));
    }

    #[test]
    fn one_full_period_leaves_a_band_unchanged() {
        // Band frequency (3, 0): gamma argument is 2 pi * 3 x, so a shift
        // of 1/3 in x is one full period.
        let b = Tensor::matrix(2, 2, vec![3.0, 0.0, 1.7, 0.9]).unwrap();
        let g1 = fourier_embed(&[0.1, 0.4], 1, 2, &b).unwrap();
        let g2 = fourier_embed(&[0.1 + 1.0 / 3.0, 0.4], 1, 2, &b).unwrap();
        let (a, c) = (g1.as_slice(), g2.as_slice());
        // Band 0 entries (sin at 0, cos at 2) agree; band 1 entries differ.
        assert!((a[0] - c[0]).abs() < 1e-12);
        assert!((a[2] - c[2]).abs() < 1e-12);
        assert!((a[1] - c[1]).abs() > 1e-3);
    }

    #[test]
    fn latent_shape_is_fixed_across_input_sizes() {
        let model = GeoFaeModel::new(tiny_cfg(), 3).unwrap();
        for m in [8usize, 64, 333] {
            let (inst, _) = random_instance(m, 0.5, m as u64);
            let code = model.encode(&inst).unwrap();
            assert_eq!(code.tokens.shape(), &[4, 8], "m = {m}");
        }
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let model = GeoFaeModel::new(tiny_cfg(), 4).unwrap();
        let m = 24;
        let (inst, _) = random_instance(m, 0.5, 77);
        let base = model.encode(&inst).unwrap();
        let mut rng = Rng::from_seed(123);
        for trial in 0..3 {
            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let cloud = inst.cloud.select(&perm).unwrap();
            let obs: Vec<f64> = perm.iter().map(|&i| inst.obs[i]).collect();
            let sensor_idx: Vec<usize> = perm
                .iter()
                .enumerate()
                .filter(|(_, &old)| inst.sensors.mask[old] == 1.0)
                .map(|(new, _)| new)
                .collect();
            let sensors = SensorSet::from_indices(sensor_idx, m).unwrap();
            let pinst = ConditioningInstance::new(cloud, sensors, obs, 1).unwrap();
            let code = model.encode(&pinst).unwrap();
            let diff = code.tokens.max_abs_diff(&base.tokens).unwrap();
            assert!(diff < 1e-8, "trial {trial}: permutation moved latents by {diff}");
        }
    }

    #[test]
    fn full_and_empty_masks_give_different_latents() {
        let model = GeoFaeModel::new(tiny_cfg(), 5).unwrap();
        let cloud = random_cloud(16, 9);
        let mut rng = Rng::from_seed(10);
        let values: Vec<f64> = (0..16).map(|_| rng.next_gaussian()).collect();
        let full = ConditioningInstance::full(cloud.clone(), &values, 1).unwrap();
        let none = ConditioningInstance::new(
            cloud,
            SensorSet::from_indices(vec![], 16).unwrap(),
            vec![0.0; 16],
            1,
        )
        .unwrap();
        let a = model.encode(&full).unwrap();
        let b = model.encode(&none).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() > 0.0);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let model = GeoFaeModel::new(tiny_cfg(), 6).unwrap();
        let cloud = random_cloud(8, 11);
        let values = vec![0.5; 16]; // 2 channels
        let inst = ConditioningInstance::full(cloud, &values, 2).unwrap();
        assert!(matches!(
            model.encode(&inst),
            Err(crate::error::Error::Dimension { .. })
        ));
    }

    #[test]
    fn duplicated_queries_give_bitwise_equal_outputs() {
        let model = GeoFaeModel::new(tiny_cfg(), 7).unwrap();
        let (inst, _) = random_instance(12, 1.0, 13);
        let code = model.encode(&inst).unwrap();
        let q = vec![0.3, -0.4, 0.3, -0.4, -0.9, 0.2];
        let out = model.decode(&code, &q).unwrap();
        assert_eq!(out[0], out[1], "duplicated query rows must agree exactly");
        assert_ne!(out[0], out[2]);
    }

    #[test]
    fn query_batch_split_changes_nothing() {
        let model = GeoFaeModel::new(tiny_cfg(), 8).unwrap();
        let (inst, _) = random_instance(12, 1.0, 14);
        let code = model.encode(&inst).unwrap();
        let mut rng = Rng::from_seed(15);
        let q: Vec<f64> = (0..20).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let whole = model.decode(&code, &q).unwrap();
        let first = model.decode(&code, &q[..10]).unwrap();
        let second = model.decode(&code, &q[10..]).unwrap();
        for (i, &w) in whole.iter().enumerate() {
            let split = if i < 5 { first[i] } else { second[i - 5] };
            assert!(
                (w - split).abs() <= 1e-12,
                "query {i}: whole {w} vs split {split}"
            );
        }
    }

    #[test]
    fn zeroed_output_head_decodes_to_zero_field() {
        let mut model = GeoFaeModel::new(tiny_cfg(), 9).unwrap();
        model
            .store
            .set_by_name("fae.head.w", Tensor::zeros(&[8, 1]))
            .unwrap();
        let (inst, _) = random_instance(10, 1.0, 16);
        let code = model.encode(&inst).unwrap();
        let out = model.decode(&code, &[0.1, 0.2, -0.3, 0.4]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_observations_give_different_latents_at_init() {
        // Residual branches start active, so the untrained encoder is
        // already sensitive to the observed values, not just the mask.
        let model = GeoFaeModel::new(tiny_cfg(), 10).unwrap();
        let (inst, _) = random_instance(9, 1.0, 17);
        let mut other = inst.clone();
        for v in &mut other.obs {
            *v += 1.0;
        }
        let a = model.encode(&inst).unwrap();
        let b = model.encode(&other).unwrap();
        let diff = a.tokens.max_abs_diff(&b.tokens).unwrap();
        assert!(diff > 1e-8, "latents ignored a shift in observations");
    }

    #[test]
    fn loss_is_zero_when_target_equals_prediction_and_csq_for_offset() {
        let model = GeoFaeModel::new(tiny_cfg(), 11).unwrap();
        let (inst, target) = random_instance(10, 1.0, 18);
        let idx: Vec<usize> = (0..10).collect();
        // Decode the model's own prediction and use it as the target.
        let code = model.encode(&inst).unwrap();
        let pred = model.decode(&code, target.cloud.coords()).unwrap();
        let self_target = FieldSample::new(target.cloud.clone(), pred.clone(), 1).unwrap();
        let zero = model.fae_loss_value(&inst, &self_target, &idx).unwrap();
        assert!(zero.abs() < 1e-24, "self-target loss {zero}");
        // Shift the target by c: MSE becomes exactly c^2.
        let c = 0.37;
        let shifted: Vec<f64> = pred.iter().map(|v| v + c).collect();
        let shifted_target = FieldSample::new(target.cloud.clone(), shifted, 1).unwrap();
        let loss = model.fae_loss_value(&inst, &shifted_target, &idx).unwrap();
        assert!((loss - c * c).abs() < 1e-12, "offset loss {loss} vs {}", c * c);
    }

    #[test]
    fn empty_query_set_is_a_parameter_error() {
        let model = GeoFaeModel::new(tiny_cfg(), 12).unwrap();
        let (inst, target) = random_instance(6, 1.0, 19);
        assert!(matches!(
            model.fae_loss_value(&inst, &target, &[]),
            Err(crate::error::Error::Parameter { .. })
        ));
    }

    /// Randomize the entries that init leaves at zero (biases and norm
    /// offsets), so gradient checks exercise every branch for real.
    fn randomize_zeroed(model: &mut GeoFaeModel, seed: u64) {
        crate::nn::randomize_zeroed_store(&mut model.store, seed);
    }

    #[test]
    fn fae_loss_gradient_matches_central_differences() {
        let mut model = GeoFaeModel::new(tiny_cfg(), 13).unwrap();
        randomize_zeroed(&mut model, 99);
        let (inst, target) = random_instance(8, 0.5, 20);
        let idx = [0usize, 2, 5, 7];

        // Analytic gradient, flattened in store order.
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, true);
        let loss = model
            .fae_loss_on_tape(&mut tape, &bind, &inst, &target, &idx)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(model.store.numel());
        for (i, e) in model.store.entries().iter().enumerate() {
            match bind.grad(&grads, i) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(e.value.numel())),
            }
        }

        // Central differences over every trainable coordinate.
        let trainable: Vec<bool> = model
            .store
            .entries()
            .iter()
            .flat_map(|e| std::iter::repeat(e.trainable).take(e.value.numel()))
            .collect();
        let base = model.store.to_flat();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            if !trainable[i] {
                continue;
            }
            let mut flat = base.clone();
            flat[i] = base[i] + h;
            model.store.load_flat(&flat).unwrap();
            let lp = model.fae_loss_value(&inst, &target, &idx).unwrap();
            flat[i] = base[i] - h;
            model.store.load_flat(&flat).unwrap();
            let lm = model.fae_loss_value(&inst, &target, &idx).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
        model.store.load_flat(&base).unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradient_reaches_latent_queries_through_nonzero_decoder() {
        // Zero encoder residuals (the init state) still let gradients
        // reach z_q once the decoder branches are active.
        let mut model = GeoFaeModel::new(tiny_cfg(), 14).unwrap();
        let mut rng = Rng::from_seed(55);
        for k in 0..model.cfg.dec_blocks {
            for suffix in ["attn.wo.w", "mlp.fc2.w"] {
                let name = format!("fae.dec{k}.{suffix}");
                let shape = {
                    let e = model
                        .store
                        .entries()
                        .iter()
                        .find(|e| e.name == name)
                        .unwrap();
                    e.value.shape().to_vec()
                };
                model
                    .store
                    .set_by_name(&name, crate::nn::trunc_normal(&shape, 0.1, &mut rng))
                    .unwrap();
            }
        }
        let (inst, target) = random_instance(8, 0.5, 21);
        let idx = [0usize, 3, 6];
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, true);
        let loss = model
            .fae_loss_on_tape(&mut tape, &bind, &inst, &target, &idx)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let gq = bind.grad(&grads, model.latent_q.0).unwrap();
        let norm: f64 = gq.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "latent query gradient norm {norm}");
    }

    #[test]
    fn frozen_model_binds_constants() {
        let mut model = GeoFaeModel::new(tiny_cfg(), 15).unwrap();
        model.freeze();
        let (inst, target) = random_instance(6, 1.0, 22);
        let idx = [0usize, 1];
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, true); // trainable request ignored
        let loss = model
            .fae_loss_on_tape(&mut tape, &bind, &inst, &target, &idx)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        for i in 0..model.store.len() {
            assert!(bind.grad(&grads, i).is_none(), "param {i} got a gradient");
        }
    }

    #[test]
    fn presets_validate_and_config_errors_are_caught() {
        assert!(GeoFaeConfig::desk(1, 2).validate().is_ok());
        assert!(GeoFaeConfig::paper(3, 2).validate().is_ok());
        let mut bad = tiny_cfg();
        bad.heads = 3; // 8 % 3 != 0
        assert!(bad.validate().is_err());
        bad = tiny_cfg();
        bad.coord_dim = 4;
        assert!(bad.validate().is_err());
        assert!(GeoFaeConfig::by_name("desk", 1, 2).is_ok());
        assert!(GeoFaeConfig::by_name("huge", 1, 2).is_err());
    }
}
