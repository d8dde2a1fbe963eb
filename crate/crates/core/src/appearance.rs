//! View- and illumination-dependent appearance.
//!
//! Appearance features from the field are projected onto a compact neural
//! basis `H`. A coefficient network conditioned on position (and optionally
//! illumination codes) emits per-point affine parameters that modulate the
//! view direction feature-wise; the resulting coefficients are fused with
//! the basis by a small integrator network into outgoing radiance.
//!
//! Ablation variants swap out individual stages: a direct MLP head instead
//! of the whole decomposition, a linear blend instead of the integrator,
//! plain concatenation instead of the directional modulation, or raw
//! features instead of the projected basis.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

use crate::autodiff::{Activation, GradTensor, Reduce, Tape};
use crate::error::{Error, Result};
use crate::field::{FeatureKind, VMGrid};

/// Sinusoidal positional encoding `r(·)`:
/// `[v, sin(2^0 πv), cos(2^0 πv), …, sin(2^{L-1} πv), cos(2^{L-1} πv)]`,
/// each block `d` wide, input block first.
#[derive(Clone, Copy, Debug)]
pub struct PosEncConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        PosEncConfig {
            num_frequencies: 2,
            include_input: true,
        }
    }
}

impl PosEncConfig {
    pub fn encoded_len(&self, d: usize) -> usize {
        let base = if self.include_input { 1 } else { 0 };
        d * (base + 2 * self.num_frequencies)
    }

    /// Encode one vector.
    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_len(v.len()));
        if self.include_input {
            out.extend_from_slice(v);
        }
        for level in 0..self.num_frequencies {
            let freq = (1u64 << level) as f64 * std::f64::consts::PI;
            for &x in v {
                out.push((freq * x).sin());
            }
            for &x in v {
                out.push((freq * x).cos());
            }
        }
        out
    }

    /// Encode a batch of 3-vectors into a constant `(P, encoded_len)` tensor.
    pub fn encode_batch(&self, vs: &[[f64; 3]]) -> GradTensor {
        let width = self.encoded_len(3);
        let mut data = Vec::with_capacity(vs.len() * width);
        for v in vs {
            data.extend(self.encode(v));
        }
        GradTensor::constant(&[vs.len(), width], data).unwrap()
    }
}

/// Fully-connected layer `(P,in) -> (P,out)`.
pub struct Linear {
    pub w: GradTensor,
    pub b: GradTensor,
}

impl Linear {
    /// Fan-in scaled uniform init, zero bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            w: GradTensor::param(&[fan_in, fan_out], w).unwrap(),
            b: GradTensor::zeros_param(&[fan_out]),
        }
    }

    /// Near-zero normal init for the film head, so training starts close
    /// to view-independent radiance.
    pub fn new_near_zero(fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Linear {
            w: GradTensor::param(&[fan_in, fan_out], w).unwrap(),
            b: GradTensor::zeros_param(&[fan_out]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &GradTensor) -> Result<GradTensor> {
        tape.add(&tape.matmul(x, &self.w)?, &self.b)
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, GradTensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Learned projection `W` from appearance features onto `N_p` basis entries.
pub struct BasisProjection {
    /// `(feature_dim, N_p)`
    pub w: GradTensor,
}

impl BasisProjection {
    pub fn new(feature_dim: usize, n_bases: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / feature_dim as f64).sqrt();
        let w: Vec<f64> = (0..feature_dim * n_bases)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        BasisProjection {
            w: GradTensor::param(&[feature_dim, n_bases], w).unwrap(),
        }
    }

    pub fn n_bases(&self) -> usize {
        self.w.shape()[1]
    }

    /// `H = W-contraction of T_c`: `(P, C) -> (P, N_p)`.
    pub fn project(&self, tape: &Tape, features: &GradTensor) -> Result<GradTensor> {
        tape.matmul(features, &self.w)
    }
}

/// Coefficient network: trunk MLP plus one of two heads. The film head
/// emits per-point affine parameters `(W_x, b_x)` applied to the raw view
/// direction; the plain head (concat-conditioning ablation) maps the trunk
/// output straight to coefficients.
pub struct CoefficientNet {
    pub trunk: Vec<Linear>,
    pub film: Option<Linear>,
    pub plain_head: Option<Linear>,
    pub post: Option<Linear>,
    pub film_width: usize,
    pub leaky_slope: f64,
}

impl CoefficientNet {
    pub fn trunk_forward(&self, tape: &Tape, x: &GradTensor) -> Result<GradTensor> {
        let mut h = x.clone();
        for layer in &self.trunk {
            h = tape.unary(
                &layer.forward(tape, &h)?,
                Activation::LeakyRelu(self.leaky_slope),
            )?;
        }
        Ok(h)
    }

    /// Split the film head output into `W_x (P, N_w*3)` and `b_x (P, N_w)`.
    pub fn film_params(&self, tape: &Tape, ctx: &GradTensor) -> Result<(GradTensor, GradTensor)> {
        let film = self
            .film
            .as_ref()
            .ok_or_else(|| Error::contract("this variant has no film head"))?;
        let out = film.forward(tape, ctx)?;
        let nw = self.film_width;
        let wx = tape.narrow(&out, 1, 0, nw * 3)?;
        let bx = tape.narrow(&out, 1, nw * 3, nw)?;
        Ok((wx, bx))
    }

    /// Raw feature-wise modulation `k_raw[i] = Σ_j W_x[i,j]·d[j] + b_x[i]`.
    /// `dirs` is `(P, 3)`; no unit-norm contract is imposed here so the
    /// affine structure can be probed directly.
    pub fn apply_film(
        &self,
        tape: &Tape,
        wx: &GradTensor,
        bx: &GradTensor,
        dirs: &GradTensor,
    ) -> Result<GradTensor> {
        let p = dirs.shape()[0];
        let nw = self.film_width;
        let d_tiled = tape.repeat_cols(dirs, nw)?; // (P, N_w*3), blocks of d
        let prod = tape.hadamard(wx, &d_tiled)?;
        let rows = tape.reshape(&prod, &[p * nw, 3])?;
        let summed = tape.reduce(&rows, Reduce::Sum, Some(1))?;
        let k = tape.reshape(&summed, &[p, nw])?;
        tape.add(&k, bx)
    }

    pub fn post_forward(&self, tape: &Tape, k_raw: &GradTensor) -> Result<GradTensor> {
        match &self.post {
            Some(post) => post.forward(tape, k_raw),
            None => Ok(k_raw.clone()),
        }
    }
}

/// Two hidden ReLU layers, sigmoid RGB output.
pub struct IntegratorNet {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl IntegratorNet {
    pub fn new(in_dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        IntegratorNet {
            l1: Linear::new(in_dim, width, rng),
            l2: Linear::new(width, width, rng),
            l3: Linear::new(width, 3, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &GradTensor) -> Result<GradTensor> {
        let h1 = tape.relu(&self.l1.forward(tape, x)?)?;
        let h2 = tape.relu(&self.l2.forward(tape, &h1)?)?;
        tape.sigmoid(&self.l3.forward(tape, &h2)?)
    }
}

/// Learnable per-lighting-condition codes; inactive codes never enter the
/// forward pass.
pub struct IlluminationCodes {
    pub z: GradTensor,
    pub active: bool,
}

impl IlluminationCodes {
    pub fn new(n_conditions: usize, dim: usize, active: bool, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..n_conditions * dim).map(|_| normal.sample(rng)).collect();
        IlluminationCodes {
            z: GradTensor::param(&[n_conditions, dim], vals).unwrap(),
            active,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// (a) direct MLP head from features + view direction to RGB
    NoDecomposition,
    /// (b) dot product between coefficients and bases instead of the integrator
    LinearBlend,
    /// (c) view direction concatenated into the trunk, no modulation
    ConcatConditioning,
    /// (d) raw appearance features in place of the projected basis
    RawFeatures,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => AblationVariant::Full,
            "a" | "no_decomposition" => AblationVariant::NoDecomposition,
            "b" | "linear_blend" => AblationVariant::LinearBlend,
            "c" | "concat_conditioning" => AblationVariant::ConcatConditioning,
            "d" | "raw_features" => AblationVariant::RawFeatures,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant '{other}' (expected full, a, b, c, d or long names)"
                )))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoDecomposition => "no_decomposition",
            AblationVariant::LinearBlend => "linear_blend",
            AblationVariant::ConcatConditioning => "concat_conditioning",
            AblationVariant::RawFeatures => "raw_features",
        }
    }
}

/// Sizing for the appearance stage. `feature_dim` must match the grid's
/// appearance feature length.
#[derive(Clone, Copy, Debug)]
pub struct AppearanceSpec {
    pub feature_dim: usize,
    pub n_bases: usize,
    pub film_width: usize,
    pub illum_dim: usize,
    pub n_conditions: usize,
    pub use_illum_codes: bool,
    pub posenc_levels: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub integrator_width: usize,
    /// Feed `r(d)` into the trunk even in modes that modulate raw `d`.
    pub trunk_view_input: bool,
    pub variant: AblationVariant,
    pub leaky_slope: f64,
}

impl AppearanceSpec {
    pub fn illum_active(&self) -> bool {
        self.use_illum_codes && self.n_conditions > 1
    }
}

pub struct AppearanceModel {
    pub spec: AppearanceSpec,
    pub posenc: PosEncConfig,
    pub basis: Option<BasisProjection>,
    pub coeff: Option<CoefficientNet>,
    pub integrator: Option<IntegratorNet>,
    /// Direct head for the no-decomposition ablation.
    pub direct_head: Option<Vec<Linear>>,
    pub illum: IlluminationCodes,
}

impl AppearanceModel {
    pub fn new(spec: AppearanceSpec, rng: &mut impl Rng) -> Self {
        let posenc = PosEncConfig {
            num_frequencies: spec.posenc_levels,
            include_input: true,
        };
        let pe = posenc.encoded_len(3);
        let z_dim = if spec.illum_active() { spec.illum_dim } else { 0 };
        let illum = IlluminationCodes::new(
            spec.n_conditions.max(1),
            spec.illum_dim,
            spec.illum_active(),
            rng,
        );

        let mut model = AppearanceModel {
            spec,
            posenc,
            basis: None,
            coeff: None,
            integrator: None,
            direct_head: None,
            illum,
        };

        match spec.variant {
            AblationVariant::NoDecomposition => {
                let in_dim = spec.feature_dim + pe + z_dim;
                let mut layers = Vec::with_capacity(spec.trunk_depth);
                let mut prev = in_dim;
                for i in 0..spec.trunk_depth {
                    let out = if i + 1 == spec.trunk_depth { 3 } else { spec.trunk_width };
                    layers.push(Linear::new(prev, out, rng));
                    prev = out;
                }
                model.direct_head = Some(layers);
            }
            variant => {
                let basis_dim = if variant == AblationVariant::RawFeatures {
                    spec.feature_dim
                } else {
                    model.basis = Some(BasisProjection::new(spec.feature_dim, spec.n_bases, rng));
                    spec.n_bases
                };
                let pe_d_in_trunk = variant == AblationVariant::ConcatConditioning
                    || spec.trunk_view_input;
                let trunk_in = pe + if pe_d_in_trunk { pe } else { 0 } + z_dim + basis_dim;
                let mut trunk = Vec::with_capacity(spec.trunk_depth);
                let mut prev = trunk_in;
                for _ in 0..spec.trunk_depth {
                    trunk.push(Linear::new(prev, spec.trunk_width, rng));
                    prev = spec.trunk_width;
                }
                let (film, plain_head) = if variant == AblationVariant::ConcatConditioning {
                    (None, Some(Linear::new(spec.trunk_width, spec.film_width, rng)))
                } else {
                    (
                        Some(Linear::new_near_zero(
                            spec.trunk_width,
                            spec.film_width * 3 + spec.film_width,
                            1e-2,
                            rng,
                        )),
                        None,
                    )
                };
                let post = if variant == AblationVariant::LinearBlend {
                    Some(Linear::new(spec.film_width, 3 * basis_dim, rng))
                } else {
                    None
                };
                model.coeff = Some(CoefficientNet {
                    trunk,
                    film,
                    plain_head,
                    post,
                    film_width: spec.film_width,
                    leaky_slope: spec.leaky_slope,
                });
                if variant != AblationVariant::LinearBlend {
                    let coeff_width = spec.film_width;
                    model.integrator = Some(IntegratorNet::new(
                        coeff_width + basis_dim,
                        spec.integrator_width,
                        rng,
                    ));
                }
            }
        }
        model
    }

    pub fn named_params(&self) -> Vec<(String, GradTensor)> {
        let mut out = Vec::new();
        if let Some(basis) = &self.basis {
            out.push(("basis.w".to_string(), basis.w.clone()));
        }
        if let Some(coeff) = &self.coeff {
            for (i, l) in coeff.trunk.iter().enumerate() {
                l.push_params(&format!("coeff.trunk.{i}"), &mut out);
            }
            if let Some(l) = &coeff.film {
                l.push_params("coeff.film", &mut out);
            }
            if let Some(l) = &coeff.plain_head {
                l.push_params("coeff.head", &mut out);
            }
            if let Some(l) = &coeff.post {
                l.push_params("coeff.post", &mut out);
            }
        }
        if let Some(integ) = &self.integrator {
            integ.l1.push_params("integrator.l1", &mut out);
            integ.l2.push_params("integrator.l2", &mut out);
            integ.l3.push_params("integrator.l3", &mut out);
        }
        if let Some(head) = &self.direct_head {
            for (i, l) in head.iter().enumerate() {
                l.push_params(&format!("head.{i}"), &mut out);
            }
        }
        if self.illum.active {
            out.push(("illum.z".to_string(), self.illum.z.clone()));
        }
        out
    }

    fn check_unit_dirs(dirs: &[[f64; 3]]) -> Result<()> {
        for d in dirs {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "view direction {:?} is not unit length (|d| = {})",
                    d, n
                )));
            }
        }
        Ok(())
    }

    fn z_rows(&self, tape: &Tape, illum: &[usize]) -> Result<Option<GradTensor>> {
        if !self.illum.active {
            return Ok(None);
        }
        let s = self.illum.z.shape()[0];
        if let Some(&bad) = illum.iter().find(|&&i| i >= s) {
            return Err(Error::contract(format!(
                "illumination index {bad} out of range {s}"
            )));
        }
        Ok(Some(tape.index_select(
            &self.illum.z,
            0,
            &Arc::new(illum.to_vec()),
        )?))
    }

    /// Basis for the integrator: projected `H`, or raw features for the
    /// no-basis ablation.
    pub fn basis_features(&self, tape: &Tape, feat_c: &GradTensor) -> Result<GradTensor> {
        match (&self.basis, self.spec.variant) {
            (_, AblationVariant::RawFeatures) => Ok(feat_c.clone()),
            (Some(basis), _) => basis.project(tape, feat_c),
            (None, v) => Err(Error::contract(format!(
                "variant {} has no basis projection",
                v.as_str()
            ))),
        }
    }

    pub fn trunk_context(
        &self,
        tape: &Tape,
        positions: &[[f64; 3]],
        dirs: &[[f64; 3]],
        illum: &[usize],
        h: &GradTensor,
    ) -> Result<GradTensor> {
        let coeff = self
            .coeff
            .as_ref()
            .ok_or_else(|| Error::contract("variant has no coefficient network"))?;
        let pe_x = self.posenc.encode_batch(positions);
        let pe_d_in_trunk = self.spec.variant == AblationVariant::ConcatConditioning
            || self.spec.trunk_view_input;
        let z = self.z_rows(tape, illum)?;
        let mut parts: Vec<GradTensor> = vec![pe_x];
        if pe_d_in_trunk {
            parts.push(self.posenc.encode_batch(dirs));
        }
        if let Some(z) = z {
            parts.push(z);
        }
        parts.push(h.clone());
        let refs: Vec<&GradTensor> = parts.iter().collect();
        let trunk_in = tape.concat(&refs, 1)?;
        coeff.trunk_forward(tape, &trunk_in)
    }

    /// Coefficients `k` for a batch of samples. `feat_c` are the appearance
    /// features at the sample positions; `dirs` must be unit length.
    pub fn coefficients(
        &self,
        tape: &Tape,
        feat_c: &GradTensor,
        positions: &[[f64; 3]],
        dirs: &[[f64; 3]],
        illum: &[usize],
    ) -> Result<GradTensor> {
        Self::check_unit_dirs(dirs)?;
        let h = self.basis_features(tape, feat_c)?;
        let ctx = self.trunk_context(tape, positions, dirs, illum, &h)?;
        let coeff = self.coeff.as_ref().unwrap();
        if let Some(head) = &coeff.plain_head {
            return head.forward(tape, &ctx);
        }
        let (wx, bx) = coeff.film_params(tape, &ctx)?;
        let d_const = GradTensor::constant(
            &[dirs.len(), 3],
            dirs.iter().flatten().copied().collect(),
        )?;
        let k_raw = coeff.apply_film(tape, &wx, &bx, &d_const)?;
        coeff.post_forward(tape, &k_raw)
    }

    /// Outgoing radiance `(P, 3)` in (0,1), dispatching on the active variant.
    pub fn radiance_batch(
        &self,
        tape: &Tape,
        feat_c: &GradTensor,
        positions: &[[f64; 3]],
        dirs: &[[f64; 3]],
        illum: &[usize],
    ) -> Result<GradTensor> {
        Self::check_unit_dirs(dirs)?;
        let p = positions.len();
        match self.spec.variant {
            AblationVariant::NoDecomposition => {
                let head = self.direct_head.as_ref().unwrap();
                let pe_d = self.posenc.encode_batch(dirs);
                let z = self.z_rows(tape, illum)?;
                let mut parts: Vec<GradTensor> = vec![feat_c.clone(), pe_d];
                if let Some(z) = z {
                    parts.push(z);
                }
                let refs: Vec<&GradTensor> = parts.iter().collect();
                let mut h = tape.concat(&refs, 1)?;
                for (i, layer) in head.iter().enumerate() {
                    h = layer.forward(tape, &h)?;
                    if i + 1 < head.len() {
                        h = tape.unary(&h, Activation::LeakyRelu(self.spec.leaky_slope))?;
                    }
                }
                tape.sigmoid(&h)
            }
            AblationVariant::LinearBlend => {
                let h = self.basis_features(tape, feat_c)?;
                let k = self.coefficients(tape, feat_c, positions, dirs, illum)?;
                let n = h.shape()[1];
                // per-channel dot product: k viewed as (3, n) rows against h
                let h3 = tape.repeat_cols(&h, 3)?;
                let prod = tape.hadamard(&k, &h3)?;
                let rows = tape.reshape(&prod, &[p * 3, n])?;
                let summed = tape.reduce(&rows, Reduce::Sum, Some(1))?;
                let rgb_raw = tape.reshape(&summed, &[p, 3])?;
                tape.sigmoid(&rgb_raw)
            }
            _ => {
                let h = self.basis_features(tape, feat_c)?;
                let k = self.coefficients(tape, feat_c, positions, dirs, illum)?;
                let integ = self.integrator.as_ref().ok_or_else(|| {
                    Error::contract("variant requires an integrator network")
                })?;
                let kh = tape.concat(&[&k, &h], 1)?;
                integ.forward(tape, &kh)
            }
        }
    }
}

/// The full trainable model: factorized field plus appearance stage.
pub struct Model {
    pub grid: VMGrid,
    pub appearance: AppearanceModel,
}

impl Model {
    pub fn new(grid: VMGrid, appearance: AppearanceModel) -> Result<Self> {
        let c = grid.feature_dim(FeatureKind::Appearance);
        if c != appearance.spec.feature_dim {
            return Err(Error::dim(format!(
                "grid appearance feature dim {} does not match appearance spec {}",
                c, appearance.spec.feature_dim
            )));
        }
        Ok(Model { grid, appearance })
    }

    pub fn variant(&self) -> AblationVariant {
        self.appearance.spec.variant
    }

    /// Switch the dispatch mode. Component shapes must already line up
    /// (useful for comparing full vs raw-features with an identity basis).
    pub fn set_variant(&mut self, v: AblationVariant) {
        self.appearance.spec.variant = v;
    }

    pub fn named_params(&self) -> Vec<(String, GradTensor)> {
        let mut out = self.grid.named_params();
        out.extend(self.appearance.named_params());
        out
    }

    /// Radiance for a batch of sample points with per-sample directions and
    /// illumination indices.
    pub fn radiance_batch(
        &self,
        tape: &Tape,
        positions: &[[f64; 3]],
        dirs: &[[f64; 3]],
        illum: &[usize],
    ) -> Result<GradTensor> {
        let feat_c = self
            .grid
            .query_features_batch(tape, positions, FeatureKind::Appearance)?;
        self.appearance
            .radiance_batch(tape, &feat_c, positions, dirs, illum)
    }

    /// Radiance at a single point, shape `(3)`.
    pub fn radiance(
        &self,
        tape: &Tape,
        x: [f64; 3],
        d: [f64; 3],
        illum: usize,
    ) -> Result<GradTensor> {
        let rgb = self.radiance_batch(tape, &[x], &[d], &[illum])?;
        tape.reshape(&rgb, &[3])
    }
}

#[cfg(test)]
mod tests;
