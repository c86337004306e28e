use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aggregate::{block_aggregate, block_fraction};
use super::combo::{BandRole, ComboSpec};
use super::normalize::BandStats;
use super::source::{BandSource, SceneDir};
use crate::coherence::{fit_decay_map, median_aggregate, DecayMaps};
use crate::error::{io_err, Error, Result};
use crate::raster::Raster;
use crate::simulator::Pol;

/// Co-registered feature bands in canonical order, with the validity mask
/// and (for labelled scenes) the reference height on the same grid.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub combo: String,
    /// Mapping unit, m.
    pub resolution: u32,
    pub fingerprint: String,
    bands: Vec<(BandRole, Raster)>,
    stats: Option<Vec<BandStats>>,
    pub valid_mask: Raster,
    pub reference: Option<Raster>,
}

impl FeatureStack {
    pub fn new(
        combo: impl Into<String>,
        resolution: u32,
        bands: Vec<(BandRole, Raster)>,
        valid_mask: Raster,
        reference: Option<Raster>,
    ) -> Result<Self> {
        for (role, r) in &bands {
            valid_mask.check_same_grid(r).map_err(|e| Error::Config(format!("band {role}: {e}")))?;
        }
        if let Some(r) = &reference {
            valid_mask.check_same_grid(r)?;
        }
        let mut seen = std::collections::HashSet::new();
        if !bands.iter().all(|(role, _)| seen.insert(*role)) {
            return Err(Error::Config("duplicate band role in feature stack".into()));
        }
        Ok(Self {
            combo: combo.into(),
            resolution,
            fingerprint: String::new(),
            bands,
            stats: None,
            valid_mask,
            reference,
        })
    }

    pub fn bands(&self) -> &[(BandRole, Raster)] {
        &self.bands
    }

    pub(crate) fn bands_mut(&mut self) -> &mut [(BandRole, Raster)] {
        &mut self.bands
    }

    pub fn band_tags(&self) -> Vec<String> {
        self.bands.iter().map(|(r, _)| r.tag()).collect()
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn width(&self) -> usize {
        self.valid_mask.width()
    }

    pub fn height(&self) -> usize {
        self.valid_mask.height()
    }

    pub fn spacing(&self) -> f64 {
        self.valid_mask.spacing
    }

    pub fn stats(&self) -> Option<&[BandStats]> {
        self.stats.as_deref()
    }

    pub(crate) fn set_stats(&mut self, stats: Option<Vec<BandStats>>) {
        self.stats = stats;
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    /// Pixel `i` is usable for training and scoring: inside the validity
    /// mask with a finite reference height.
    pub fn target_valid(&self, i: usize) -> bool {
        let m = self.valid_mask.values()[i];
        let ref_ok = self.reference.as_ref().map_or(true, |r| !r.values()[i].is_nan());
        m == 1.0 && ref_ok
    }
}

/// Integer factor between the scene spacing and the requested mapping unit.
pub fn resolution_factor(spacing: f64, resolution: u32) -> Result<usize> {
    let ratio = resolution as f64 / spacing;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::Usage(format!(
            "resolution {resolution} m is not an integer multiple of the {spacing} m scene spacing"
        )));
    }
    Ok(factor as usize)
}

/// Loads and assembles the bands of `combo` from a scene directory. Decay
/// bands come from `decay_dir` when it holds maps at the requested
/// resolution, otherwise they are fitted on the fly.
pub fn build_feature_stack(scene_dir: &Path, combo: &str, resolution: u32, decay_dir: Option<&Path>) -> Result<FeatureStack> {
    let mut src = SceneDir::open(scene_dir)?;
    if let Some(d) = decay_dir {
        src = src.with_decay(d)?;
    }
    build_feature_stack_from(&src, &ComboSpec::parse(combo)?, resolution)
}

/// Validity masks and band preparation on the target grid. Pixels outside
/// the validity mask become nodata before any aggregation. At coarser
/// resolution a block is valid when at least half of its pixels are.
struct Coarsen {
    factor: usize,
    fine_mask: Raster,
    coarse_mask: Raster,
}

impl Coarsen {
    fn new(src: &dyn BandSource, resolution: u32) -> Result<Self> {
        let factor = resolution_factor(src.spacing(), resolution)?;
        let fine_mask = src.valid_mask()?;
        let coarse_mask = if factor == 1 {
            fine_mask.map(|v| if v == 1.0 { 1.0 } else { 0.0 })
        } else {
            block_fraction(&fine_mask, factor)?.map(|f| if f >= 0.5 { 1.0 } else { 0.0 })
        }
        .with_role("valid_mask", "1");
        Ok(Self {
            factor,
            fine_mask,
            coarse_mask,
        })
    }

    fn prep(&self, r: Raster) -> Result<Raster> {
        let r = r.masked_by(&self.fine_mask)?;
        let r = if self.factor == 1 { r } else { block_aggregate(&r, self.factor)? };
        r.masked_by(&self.coarse_mask)
    }

    /// Per-pair coherence is block-averaged before the per-lag median.
    fn lag_median(&self, src: &dyn BandSource, pol: Pol, lag: u32) -> Result<Raster> {
        let pairs = src
            .coherence_pairs(pol, lag)?
            .into_iter()
            .map(|r| self.prep(r))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(u32, &Raster)> = pairs.iter().map(|r| (lag, r)).collect();
        let (_, m) = median_aggregate(&refs)?.pop().expect("one lag");
        Ok(m)
    }
}

/// Fits decay maps for both polarizations at `resolution` from the per-lag
/// coherence medians. Returns the grid spacing with the maps.
pub fn fit_scene_decay(src: &dyn BandSource, resolution: u32) -> Result<(f64, Vec<(Pol, DecayMaps)>)> {
    let grid = Coarsen::new(src, resolution)?;
    let mut out = Vec::new();
    for pol in Pol::ALL {
        let stack = src
            .lags()
            .into_iter()
            .map(|l| Ok((l, grid.lag_median(src, pol, l)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((pol, fit_decay_map(&stack, &grid.coarse_mask)?));
    }
    Ok((src.spacing() * grid.factor as f64, out))
}

/// Decay parameters are refitted from the coarse medians unless the source
/// holds precomputed maps on the target grid.
pub fn build_feature_stack_from(src: &dyn BandSource, combo: &ComboSpec, resolution: u32) -> Result<FeatureStack> {
    let grid = Coarsen::new(src, resolution)?;
    let lags = src.lags();
    let mut medians: HashMap<(Pol, u32), Raster> = HashMap::new();
    let mut median = |pol: Pol, lag: u32| -> Result<Raster> {
        if let Some(r) = medians.get(&(pol, lag)) {
            return Ok(r.clone());
        }
        let m = grid.lag_median(src, pol, lag)?;
        medians.insert((pol, lag), m.clone());
        Ok(m)
    };
    let mut decay: HashMap<Pol, (Raster, Raster)> = HashMap::new();

    let spacing = src.spacing() * grid.factor as f64;
    let coarse_mask = &grid.coarse_mask;
    let mut bands = Vec::new();
    for role in combo.bands(&lags) {
        let raster = match role {
            BandRole::Sigma(pol) => grid
                .prep(src.sigma(pol)?)?
                .map(|v| if v > 0.0 { 10.0 * v.log10() } else { f64::NAN }),
            BandRole::Coherence { lag, pol } => {
                if !lags.contains(&lag) {
                    return Err(Error::Manifest(format!("band '{role}' not found: scene lags are {lags:?}")));
                }
                median(pol, lag)?
            }
            BandRole::Tau(pol) | BandRole::RhoInf(pol) => {
                if !decay.contains_key(&pol) {
                    let maps = match src.decay(pol, spacing)? {
                        Some((t, r)) => (t.masked_by(coarse_mask)?, r.masked_by(coarse_mask)?),
                        None => {
                            let stack = lags
                                .iter()
                                .map(|&l| Ok((l, median(pol, l)?)))
                                .collect::<Result<Vec<_>>>()?;
                            let maps = fit_decay_map(&stack, coarse_mask)?;
                            (maps.tau, maps.rho_inf)
                        }
                    };
                    decay.insert(pol, maps);
                }
                let (t, r) = &decay[&pol];
                if matches!(role, BandRole::Tau(_)) {
                    t.clone()
                } else {
                    r.clone()
                }
            }
            BandRole::IncAngle => grid.prep(src.inc_angle()?)?,
            BandRole::Dem => grid.prep(src.dem()?)?,
        };
        bands.push((role, raster.with_role(role.tag(), role.units())));
    }
    let reference = grid.prep(src.reference()?)?.with_role("height", "m");
    let mut stack = FeatureStack::new(combo.id(), resolution, bands, grid.coarse_mask.clone(), Some(reference))?;
    stack.fingerprint = src.fingerprint();
    Ok(stack)
}

pub const STACK_MANIFEST: &str = "stack.json";

#[derive(Debug, Serialize, Deserialize)]
struct StackManifest {
    combo: String,
    resolution: u32,
    scene_fingerprint: String,
    bands: Vec<String>,
    files: Vec<String>,
    stats: Option<Vec<BandStats>>,
    valid_mask: String,
    reference: Option<String>,
}

impl FeatureStack {
    /// One raster per band plus `stack.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut files = Vec::new();
        for (role, r) in &self.bands {
            let f = format!("{}.rst", role.tag());
            r.write(&dir.join(&f))?;
            files.push(f);
        }
        self.valid_mask.write(&dir.join("valid_mask.rst"))?;
        let reference = match &self.reference {
            Some(r) => {
                r.write(&dir.join("reference.rst"))?;
                Some("reference.rst".to_string())
            }
            None => None,
        };
        let m = StackManifest {
            combo: self.combo.clone(),
            resolution: self.resolution,
            scene_fingerprint: self.fingerprint.clone(),
            bands: self.band_tags(),
            files,
            stats: self.stats.clone(),
            valid_mask: "valid_mask.rst".into(),
            reference,
        };
        let path = dir.join(STACK_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&m).expect("serializes") + "\n").map_err(io_err(path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(STACK_MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: StackManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let mut bands = Vec::new();
        for (tag, file) in m.bands.iter().zip(&m.files) {
            let role = BandRole::parse(tag).ok_or_else(|| Error::Format {
                path: path.clone(),
                detail: format!("unknown band tag '{tag}'"),
            })?;
            bands.push((role, Raster::read(&dir.join(file))?));
        }
        let reference = m.reference.as_ref().map(|f| Raster::read(&dir.join(f))).transpose()?;
        let mut stack = FeatureStack::new(m.combo, m.resolution, bands, Raster::read(&dir.join(&m.valid_mask))?, reference)?;
        stack.fingerprint = m.scene_fingerprint;
        stack.stats = m.stats;
        Ok(stack)
    }
}
