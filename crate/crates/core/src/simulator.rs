//! Synthetic dual-pol InSAR scenes with known canopy height and decay fields.
//!
//! Chain: height field -> water-cloud backscatter (terrain-modulated, speckled,
//! temporal median) -> height-dependent `(tau, rho_inf)` -> per-pair true
//! coherence at each temporal baseline -> finite-look sample coherence.
//! Volume decorrelation is not modelled; `kz_max` is recorded only.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::decay_model;
use crate::error::{io_err, Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pol {
    Hh,
    Hv,
}

impl Pol {
    pub const ALL: [Pol; 2] = [Pol::Hh, Pol::Hv];

    pub fn as_str(self) -> &'static str {
        match self {
            Pol::Hh => "hh",
            Pol::Hv => "hv",
        }
    }

    pub fn parse(s: &str) -> Option<Pol> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hh" => Some(Pol::Hh),
            "hv" => Some(Pol::Hv),
            _ => None,
        }
    }
}

/// Water-cloud model parameters for one polarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WcmParams {
    /// Bare-ground backscatter, linear power.
    pub sigma_ground: f64,
    /// Dense-canopy backscatter, linear power.
    pub sigma_vegetation: f64,
    /// Attenuation with height, 1/m.
    pub beta: f64,
}

impl WcmParams {
    pub fn default_hv() -> Self {
        Self {
            sigma_ground: 10f64.powf(-1.6),
            sigma_vegetation: 10f64.powf(-1.1),
            beta: 0.12,
        }
    }

    pub fn default_hh() -> Self {
        Self {
            sigma_ground: 10f64.powf(-1.2),
            sigma_vegetation: 10f64.powf(-0.7),
            beta: 0.10,
        }
    }

    pub fn backscatter(&self, h: f64) -> f64 {
        let t = (-self.beta * h).exp();
        self.sigma_ground * t + self.sigma_vegetation * (1.0 - t)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_ground > 0.0 && self.sigma_vegetation > 0.0 && self.beta > 0.0) {
            return Err(Error::Config(format!("water-cloud parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Exponential map from canopy height to decay parameters:
/// `tau(h) = tau_min + (tau_max - tau_min) exp(-h / h_tau)`, same form for `rho_inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayMapping {
    pub tau_max: f64,
    pub tau_min: f64,
    pub h_tau: f64,
    pub rho_max: f64,
    pub rho_min: f64,
    pub h_rho: f64,
}

impl DecayMapping {
    pub fn default_hv() -> Self {
        Self {
            tau_max: 45.0,
            tau_min: 2.0,
            h_tau: 8.0,
            rho_max: 0.7,
            rho_min: 0.2,
            h_rho: 8.0,
        }
    }

    pub fn default_hh() -> Self {
        Self {
            tau_max: 60.0,
            tau_min: 3.0,
            h_tau: 9.0,
            rho_max: 0.8,
            rho_min: 0.3,
            h_rho: 10.0,
        }
    }

    pub fn tau(&self, h: f64) -> f64 {
        self.tau_min + (self.tau_max - self.tau_min) * (-h / self.h_tau).exp()
    }

    pub fn rho_inf(&self, h: f64) -> f64 {
        self.rho_min + (self.rho_max - self.rho_min) * (-h / self.h_rho).exp()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.tau_max > self.tau_min
            && self.tau_min >= 0.5
            && 0.0 <= self.rho_min
            && self.rho_min < self.rho_max
            && self.rho_max <= 1.0
            && self.h_tau > 0.0
            && self.h_rho > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid decay mapping: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPol<T> {
    pub hh: T,
    pub hv: T,
}

impl<T> PerPol<T> {
    pub fn get(&self, pol: Pol) -> &T {
        match pol {
            Pol::Hh => &self.hh,
            Pol::Hv => &self.hv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeightFieldParams {
    pub mean_target: f64,
    pub max: f64,
    /// Standard deviation of the unclipped field, m.
    pub spread: f64,
    /// Gaussian correlation length of the stand-scale component, pixels.
    pub correlation_length: f64,
    /// Fraction of the scene covered by zero-height clearings.
    pub clearing_fraction: f64,
}

impl Default for HeightFieldParams {
    fn default() -> Self {
        Self {
            mean_target: 7.8,
            max: 35.0,
            spread: 5.5,
            correlation_length: 6.0,
            clearing_fraction: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainParams {
    pub base_elevation: f64,
    pub relief: f64,
    /// Pixels.
    pub correlation_length: f64,
    /// Off-nadir angle of the flat-terrain geometry, degrees.
    pub off_nadir_deg: f64,
    /// Backscatter scales as `(cos theta_loc / cos theta_0)^exponent`.
    pub backscatter_exponent: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            base_elevation: 600.0,
            relief: 80.0,
            correlation_length: 24.0,
            off_nadir_deg: 28.0,
            backscatter_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Pixel spacing, m.
    pub spacing: f64,
    pub acquisitions: usize,
    pub interval_days: u32,
    /// Coherence-estimation looks; `None` returns the true coherence (bias-free).
    pub looks: Option<u32>,
    /// Intensity speckle ENL; `None` disables speckle.
    pub enl: Option<f64>,
    pub heights: HeightFieldParams,
    pub terrain: TerrainParams,
    pub wcm: PerPol<WcmParams>,
    pub decay: PerPol<DecayMapping>,
    pub invalid_fraction: f64,
    /// Recorded for provenance; volume decorrelation is neglected.
    pub kz_max: f64,
    pub seed: u64,
}

/// Default looks per mapping unit: 20 m, 40 m, 60 m.
pub const DEFAULT_LOOKS: [(u32, u32); 3] = [(20, 21), (40, 60), (60, 119)];

pub fn default_looks(spacing_m: f64) -> u32 {
    DEFAULT_LOOKS
        .iter()
        .min_by(|a, b| (a.0 as f64 - spacing_m).abs().total_cmp(&(b.0 as f64 - spacing_m).abs()))
        .map(|&(_, l)| l)
        .unwrap_or(21)
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            spacing: 20.0,
            acquisitions: 9,
            interval_days: 14,
            looks: Some(21),
            enl: Some(21.0),
            heights: HeightFieldParams::default(),
            terrain: TerrainParams::default(),
            wcm: PerPol {
                hh: WcmParams::default_hh(),
                hv: WcmParams::default_hv(),
            },
            decay: PerPol {
                hh: DecayMapping::default_hh(),
                hv: DecayMapping::default_hv(),
            },
            invalid_fraction: 0.05,
            kz_max: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Square scene of `size` pixels with the given seed.
    pub fn square(size: usize, seed: u64) -> Self {
        Self {
            width: size,
            height: size,
            seed,
            ..Self::default()
        }
    }

    /// True coherence and noiseless intensities: the closed-loop setting.
    pub fn ideal(mut self) -> Self {
        self.looks = None;
        self.enl = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene must have at least one pixel".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("pixel spacing must be positive".into()));
        }
        if self.acquisitions < 2 || self.interval_days == 0 {
            return Err(Error::Config("need at least two acquisitions at a positive interval".into()));
        }
        if matches!(self.looks, Some(l) if l < 2) {
            return Err(Error::Config("looks must be at least 2".into()));
        }
        if matches!(self.enl, Some(e) if !(e >= 1.0)) {
            return Err(Error::Config("ENL must be at least 1".into()));
        }
        if !(0.0..=0.3).contains(&self.invalid_fraction) {
            return Err(Error::Config("invalid fraction must lie in [0, 0.3]".into()));
        }
        let h = &self.heights;
        if !(h.max > 0.0 && h.mean_target > 0.0 && h.mean_target < h.max && h.spread > 0.0) {
            return Err(Error::Config(format!("invalid height-field parameters: {h:?}")));
        }
        if !(0.0..0.9).contains(&h.clearing_fraction) || !(h.correlation_length > 0.0) {
            return Err(Error::Config(format!("invalid height-field parameters: {h:?}")));
        }
        if !(self.terrain.correlation_length > 0.0) {
            return Err(Error::Config("terrain correlation length must be positive".into()));
        }
        for pol in Pol::ALL {
            self.wcm.get(pol).validate()?;
            self.decay.get(pol).validate()?;
        }
        Ok(())
    }

    /// Every ordered acquisition pair `(i, j)`, `i < j`.
    pub fn pairs(&self) -> Vec<Pair> {
        let mut out = Vec::new();
        for i in 0..self.acquisitions {
            for j in i + 1..self.acquisitions {
                out.push(Pair {
                    first: i,
                    second: j,
                    lag: self.interval_days * (j - i) as u32,
                });
            }
        }
        out
    }

    /// Distinct temporal baselines, ascending.
    pub fn lags(&self) -> Vec<u32> {
        (1..self.acquisitions).map(|k| self.interval_days * k as u32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    /// Days.
    pub lag: u32,
}

// Layer identifiers for counter-based seeding.
const LAYER_HEIGHT: u64 = 1;
const LAYER_HEIGHT_DETAIL: u64 = 2;
const LAYER_CLEARING: u64 = 3;
const LAYER_DEM: u64 = 4;
const LAYER_MASK: u64 = 5;
const LAYER_SPECKLE: u64 = 1 << 16;
const LAYER_COHERENCE: u64 = 1 << 24;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for one pixel of one layer, independent of evaluation order.
pub fn pixel_rng(seed: u64, layer: u64, index: usize) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ layer) ^ index as u64);
    ChaCha8Rng::seed_from_u64(key)
}

fn layer_rng(seed: u64, layer: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ layer))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with mirrored borders.
fn blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    tmp.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            *out = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[y * width + reflect(x as isize + j as isize - r, width)])
                .sum();
        }
    });
    let mut out = vec![0.0; values.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    });
    out
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}

/// Zero-mean, unit-variance smooth random field.
fn smooth_field(width: usize, height: usize, sigma: f64, seed: u64, layer: u64) -> Vec<f64> {
    let mut rng = layer_rng(seed, layer);
    let noise: Vec<f64> = (0..width * height).map(|_| rng.sample(StandardNormal)).collect();
    let mut f = blur(&noise, width, height, sigma);
    standardize(&mut f);
    f
}

/// Value below which `fraction` of `values` fall.
fn quantile(values: &[f64], fraction: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() as f64 * fraction).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Smoothed Gaussian random field clipped to `[0, max]` with hard-edged
/// zero-height clearings, offset by bisection so its mean hits the target.
pub fn generate_height_field(config: &SceneConfig, seed: u64) -> Raster {
    let (w, h) = (config.width, config.height);
    let p = &config.heights;
    let coarse = smooth_field(w, h, p.correlation_length, seed, LAYER_HEIGHT);
    let fine = smooth_field(w, h, (p.correlation_length / 4.0).max(0.7), seed, LAYER_HEIGHT_DETAIL);
    let mut z: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a + 0.35 * b).collect();
    standardize(&mut z);

    let clearing = smooth_field(w, h, 2.0 * p.correlation_length, seed, LAYER_CLEARING);
    let cut = if p.clearing_fraction > 0.0 {
        quantile(&clearing, p.clearing_fraction)
    } else {
        f64::NEG_INFINITY
    };
    let open: Vec<bool> = clearing.iter().map(|&c| c < cut).collect();

    let field = |offset: f64| -> Vec<f64> {
        z.iter()
            .zip(&open)
            .map(|(&v, &o)| if o { 0.0 } else { (offset + p.spread * v).clamp(0.0, p.max) })
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mut lo, mut hi) = (-p.max - 10.0 * p.spread, 2.0 * p.max + 10.0 * p.spread);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(&field(mid)) < p.mean_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Raster::new(w, h, config.spacing, field(0.5 * (lo + hi)))
        .expect("grid size")
        .with_role("height", "m")
}

/// Water-cloud backscatter, linear power.
pub fn wcm_backscatter(h: &Raster, p: &WcmParams) -> Raster {
    h.map(|v| p.backscatter(v)).with_role("sigma", "linear")
}

pub fn height_to_decay(h: &Raster, m: &DecayMapping) -> (Raster, Raster) {
    (
        h.map(|v| m.tau(v)).with_role("tau", "days"),
        h.map(|v| m.rho_inf(v)).with_role("rho_inf", "1"),
    )
}

/// Sample coherence magnitude of `looks` pairs of circular complex Gaussian
/// samples with correlation `gamma_true`. `looks = None` returns `gamma_true`.
pub fn sample_coherence_with<R: Rng>(rng: &mut R, gamma_true: f64, looks: u32) -> f64 {
    let g = gamma_true.clamp(0.0, 1.0);
    let c = (1.0 - g * g).sqrt();
    let (mut cross_re, mut cross_im, mut p1, mut p2) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..looks {
        let ar: f64 = rng.sample(StandardNormal);
        let ai: f64 = rng.sample(StandardNormal);
        let br: f64 = rng.sample(StandardNormal);
        let bi: f64 = rng.sample(StandardNormal);
        let (zr, zi) = (g * ar + c * br, g * ai + c * bi);
        // z1 * conj(z2)
        cross_re += ar * zr + ai * zi;
        cross_im += ai * zr - ar * zi;
        p1 += ar * ar + ai * ai;
        p2 += zr * zr + zi * zi;
    }
    let denom = (p1 * p2).sqrt();
    if denom > 0.0 {
        (cross_re.hypot(cross_im) / denom).min(1.0)
    } else {
        0.0
    }
}

pub fn sample_coherence(gamma_true: f64, looks: u32, seed: u64) -> f64 {
    sample_coherence_with(&mut ChaCha8Rng::seed_from_u64(seed), gamma_true, looks)
}

fn speckle_draw(rng: &mut ChaCha8Rng, enl: f64) -> f64 {
    Gamma::new(enl, 1.0 / enl).expect("enl >= 1").sample(rng)
}

/// Multiplies each pixel by an independent unit-mean Gamma(enl) draw.
pub fn apply_speckle(intensity: &Raster, enl: f64, seed: u64) -> Raster {
    speckle_layer(intensity, Some(enl), seed, LAYER_SPECKLE)
}

fn speckle_layer(intensity: &Raster, enl: Option<f64>, seed: u64, layer: u64) -> Raster {
    let Some(enl) = enl else {
        return intensity.clone();
    };
    let values = intensity
        .values()
        .par_iter()
        .enumerate()
        .map(|(i, &v)| if v.is_nan() { v } else { v * speckle_draw(&mut pixel_rng(seed, layer, i), enl) })
        .collect();
    let mut out = Raster::new(intensity.width(), intensity.height(), intensity.spacing, values).expect("grid");
    out.role = intensity.role.clone();
    out.units = intensity.units.clone();
    out
}

/// DEM and derived local incidence angle (degrees). Range runs along +x with
/// the sensor on the -x side, so slopes rising in +x face the sensor.
fn terrain(config: &SceneConfig) -> (Raster, Raster) {
    let (w, h) = (config.width, config.height);
    let t = &config.terrain;
    let z = smooth_field(w, h, t.correlation_length, config.seed, LAYER_DEM);
    let dem = Raster::new(w, h, config.spacing, z.iter().map(|v| t.base_elevation + t.relief * v).collect())
        .expect("grid")
        .with_role("dem", "m");
    let theta0 = t.off_nadir_deg.to_radians();
    let at = |x: isize, y: isize| dem.get(reflect(x, w), reflect(y, h));
    let inc = Raster::from_fn(w, h, config.spacing, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let p = (at(x + 1, y) - at(x - 1, y)) / (2.0 * config.spacing);
        let q = (at(x, y + 1) - at(x, y - 1)) / (2.0 * config.spacing);
        let cos = (theta0.cos() + p * theta0.sin()) / (1.0 + p * p + q * q).sqrt();
        cos.clamp(-1.0, 1.0).acos().to_degrees()
    })
    .with_role("inc_angle", "deg");
    (dem, inc)
}

fn validity_mask(config: &SceneConfig) -> Raster {
    let (w, h) = (config.width, config.height);
    let mut values = vec![1.0; w * h];
    if config.invalid_fraction > 0.0 {
        let blobs = smooth_field(w, h, 3.0, config.seed, LAYER_MASK);
        let cut = quantile(&blobs, 1.0 - config.invalid_fraction);
        for (v, &b) in values.iter_mut().zip(&blobs) {
            if b > cut {
                *v = 0.0;
            }
        }
    }
    Raster::new(w, h, config.spacing, values).expect("grid").with_role("valid_mask", "1")
}

/// In-memory scene: every layer at full precision.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub height: Raster,
    pub dem: Raster,
    pub inc_angle: Raster,
    /// 1 = valid, 0 = simulated layover/shadow.
    pub valid_mask: Raster,
    /// Temporal-median backscatter, linear power.
    pub sigma: PerPol<Raster>,
    pub pairs: Vec<Pair>,
    /// Sample coherence, one raster per entry of `pairs`.
    pub coherence: PerPol<Vec<Raster>>,
    pub tau_true: PerPol<Raster>,
    pub rho_inf_true: PerPol<Raster>,
}

pub fn simulate_stack(config: &SceneConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let height = generate_height_field(config, config.seed);
    let (dem, inc_angle) = terrain(config);
    let valid_mask = validity_mask(config);
    let pairs = config.pairs();
    let cos0 = config.terrain.off_nadir_deg.to_radians().cos();
    let exponent = config.terrain.backscatter_exponent;

    let per_pol = |pol: Pol, pol_index: u64| -> (Raster, Raster, Raster, Vec<Raster>) {
        let wcm = wcm_backscatter(&height, config.wcm.get(pol));
        let modulated: Vec<f64> = wcm
            .values()
            .iter()
            .zip(inc_angle.values())
            .map(|(&s, &theta)| s * (theta.to_radians().cos().max(0.05) / cos0).powf(exponent))
            .collect();
        let clean = Raster::new(config.width, config.height, config.spacing, modulated).expect("grid");
        let sigma = temporal_median_backscatter(&clean, config, pol_index);

        let (tau, rho) = height_to_decay(&height, config.decay.get(pol));
        let coherence = pairs
            .iter()
            .enumerate()
            .map(|(k, pair)| {
                let layer = LAYER_COHERENCE + pol_index * 4096 + k as u64;
                let values = tau
                    .values()
                    .par_iter()
                    .zip(rho.values())
                    .enumerate()
                    .map(|(i, (&t, &r))| {
                        let g = decay_model(pair.lag as f64, t, r);
                        match config.looks {
                            None => g,
                            Some(l) => sample_coherence_with(&mut pixel_rng(config.seed, layer, i), g, l),
                        }
                    })
                    .collect();
                Raster::new(config.width, config.height, config.spacing, values)
                    .expect("grid")
                    .with_role(format!("coh_{}_{}_{}", pol.as_str(), pair.first, pair.second), "1")
            })
            .collect();
        (
            sigma.with_role(format!("sigma_{}", pol.as_str()), "linear"),
            tau.with_role(format!("tau_true_{}", pol.as_str()), "days"),
            rho.with_role(format!("rho_inf_true_{}", pol.as_str()), "1"),
            coherence,
        )
    };
    let (s_hh, t_hh, r_hh, c_hh) = per_pol(Pol::Hh, 0);
    let (s_hv, t_hv, r_hv, c_hv) = per_pol(Pol::Hv, 1);

    Ok(SyntheticScene {
        config: config.clone(),
        height,
        dem,
        inc_angle,
        valid_mask,
        sigma: PerPol { hh: s_hh, hv: s_hv },
        pairs,
        coherence: PerPol { hh: c_hh, hv: c_hv },
        tau_true: PerPol { hh: t_hh, hv: t_hv },
        rho_inf_true: PerPol { hh: r_hh, hv: r_hv },
    })
}

fn temporal_median_backscatter(clean: &Raster, config: &SceneConfig, pol_index: u64) -> Raster {
    if config.enl.is_none() {
        return clean.clone();
    }
    let looks: Vec<Raster> = (0..config.acquisitions as u64)
        .map(|a| speckle_layer(clean, config.enl, config.seed, LAYER_SPECKLE + pol_index * 256 + a))
        .collect();
    let values = (0..clean.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            buf.clear();
            buf.extend(looks.iter().map(|r| r.values()[i]));
            crate::coherence::median_in_place(buf)
        })
        .collect();
    Raster::new(clean.width(), clean.height(), clean.spacing, values).expect("grid")
}

/// One file of a scene directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub file: String,
    pub role: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pol: Option<Pol>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<[usize; 2]>,
}

pub const SCENE_MANIFEST: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub generator: String,
    pub config: SceneConfig,
    pub width: usize,
    pub height: usize,
    pub spacing: f64,
    pub lags: Vec<u32>,
    pub polarizations: Vec<Pol>,
    pub looks: Option<u32>,
    pub seed: u64,
    pub reference: String,
    pub valid_mask: String,
    pub bands: Vec<BandEntry>,
    pub ground_truth: Vec<BandEntry>,
}

impl SceneManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SCENE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            detail: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(SCENE_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(path))
    }
}

impl SyntheticScene {
    /// Writes one raster per layer plus [`SCENE_MANIFEST`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SceneManifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bands = Vec::new();
        let mut ground_truth = Vec::new();
        let put = |r: &Raster, file: &str| -> Result<String> {
            r.write(&dir.join(file))?;
            Ok(file.to_string())
        };
        let entry = |file: String, role: &str, pol: Option<Pol>| BandEntry {
            file,
            role: role.to_string(),
            pol,
            lag: None,
            pair: None,
        };

        let reference = put(&self.height, "height.rst")?;
        let valid_mask = put(&self.valid_mask, "valid_mask.rst")?;
        bands.push(entry(put(&self.dem, "dem.rst")?, "dem", None));
        bands.push(entry(put(&self.inc_angle, "inc_angle.rst")?, "inc_angle", None));
        for pol in Pol::ALL {
            let p = pol.as_str();
            bands.push(entry(put(self.sigma.get(pol), &format!("sigma_{p}.rst"))?, "sigma", Some(pol)));
            for (pair, r) in self.pairs.iter().zip(self.coherence.get(pol)) {
                let file = put(r, &format!("coh_{p}_{:02}_{:02}.rst", pair.first, pair.second))?;
                bands.push(BandEntry {
                    lag: Some(pair.lag),
                    pair: Some([pair.first, pair.second]),
                    ..entry(file, "coherence", Some(pol))
                });
            }
            ground_truth.push(entry(put(self.tau_true.get(pol), &format!("tau_true_{p}.rst"))?, "tau", Some(pol)));
            ground_truth.push(entry(
                put(self.rho_inf_true.get(pol), &format!("rho_inf_true_{p}.rst"))?,
                "rho_inf",
                Some(pol),
            ));
        }
        let manifest = SceneManifest {
            format_version: 1,
            generator: format!("canopy-core {}", env!("CARGO_PKG_VERSION")),
            config: self.config.clone(),
            width: self.config.width,
            height: self.config.height,
            spacing: self.config.spacing,
            lags: self.config.lags(),
            polarizations: Pol::ALL.to_vec(),
            looks: self.config.looks,
            seed: self.config.seed,
            reference,
            valid_mask,
            bands,
            ground_truth,
        };
        manifest.write(dir)?;
        Ok(manifest)
    }
}
