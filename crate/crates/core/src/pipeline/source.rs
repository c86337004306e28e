use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coherence::{DecayMaps, STATUS_LEGEND};
use crate::error::{io_err, Error, Result};
use crate::raster::Raster;
use crate::simulator::{Pol, SceneConfig, SceneManifest, SyntheticScene};

/// Where feature stacks read their layers from: a scene directory on disk or
/// an in-memory [`SyntheticScene`].
pub trait BandSource {
    fn spacing(&self) -> f64;
    fn lags(&self) -> Vec<u32>;
    /// Reference canopy height, m.
    fn reference(&self) -> Result<Raster>;
    /// 1 = valid, 0 = excluded.
    fn valid_mask(&self) -> Result<Raster>;
    /// Temporal-median backscatter, linear power.
    fn sigma(&self, pol: Pol) -> Result<Raster>;
    /// Every pair coherence raster at `lag`.
    fn coherence_pairs(&self, pol: Pol, lag: u32) -> Result<Vec<Raster>>;
    fn inc_angle(&self) -> Result<Raster>;
    fn dem(&self) -> Result<Raster>;
    /// Precomputed `(tau, rho_inf)` maps on a grid of `spacing`, if available.
    fn decay(&self, _pol: Pol, _spacing: f64) -> Result<Option<(Raster, Raster)>> {
        Ok(None)
    }
    /// Identity of the underlying scene, shared by its disk and memory forms.
    fn fingerprint(&self) -> String;
}

/// FNV-1a over the canonical JSON of the scene configuration.
pub(crate) fn scene_fingerprint(config: &SceneConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl BandSource for SyntheticScene {
    fn spacing(&self) -> f64 {
        self.config.spacing
    }

    fn lags(&self) -> Vec<u32> {
        self.config.lags()
    }

    fn reference(&self) -> Result<Raster> {
        Ok(self.height.clone())
    }

    fn valid_mask(&self) -> Result<Raster> {
        Ok(self.valid_mask.clone())
    }

    fn sigma(&self, pol: Pol) -> Result<Raster> {
        Ok(self.sigma.get(pol).clone())
    }

    fn coherence_pairs(&self, pol: Pol, lag: u32) -> Result<Vec<Raster>> {
        let out: Vec<Raster> = self
            .pairs
            .iter()
            .zip(self.coherence.get(pol))
            .filter(|(p, _)| p.lag == lag)
            .map(|(_, r)| r.clone())
            .collect();
        if out.is_empty() {
            return Err(Error::Manifest(format!("scene has no {} coherence at lag {lag}", pol.as_str())));
        }
        Ok(out)
    }

    fn inc_angle(&self) -> Result<Raster> {
        Ok(self.inc_angle.clone())
    }

    fn dem(&self) -> Result<Raster> {
        Ok(self.dem.clone())
    }

    fn fingerprint(&self) -> String {
        scene_fingerprint(&self.config)
    }
}

pub const DECAY_MANIFEST: &str = "decay.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFiles {
    pub pol: Pol,
    pub tau: String,
    pub rho_inf: String,
    pub residual: String,
    pub status: String,
}

/// Output of a decay-fitting run over one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayManifest {
    pub scene_fingerprint: String,
    pub spacing: f64,
    pub lags: Vec<u32>,
    pub status_legend: String,
    pub bands: Vec<DecayFiles>,
}

impl DecayManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(DECAY_MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            detail: e.to_string(),
        })
    }

    /// Writes four rasters per polarization plus the manifest.
    pub fn write_maps(dir: &Path, scene_fingerprint: &str, spacing: f64, lags: &[u32], maps: &[(Pol, DecayMaps)]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bands = Vec::new();
        for (pol, m) in maps {
            let p = pol.as_str();
            let put = |r: &Raster, name: &str, units: &str| -> Result<String> {
                let file = format!("{name}_{p}.rst");
                r.clone().with_role(format!("{name}_{p}"), units).write(&dir.join(&file))?;
                Ok(file)
            };
            bands.push(DecayFiles {
                pol: *pol,
                tau: put(&m.tau, "tau", "days")?,
                rho_inf: put(&m.rho_inf, "rho_inf", "1")?,
                residual: put(&m.residual, "residual", "1")?,
                status: put(&m.status, "status", "code")?,
            });
        }
        let manifest = DecayManifest {
            scene_fingerprint: scene_fingerprint.to_string(),
            spacing,
            lags: lags.to_vec(),
            status_legend: STATUS_LEGEND.to_string(),
            bands,
        };
        manifest.write(dir)?;
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(DECAY_MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(io_err(path))
    }
}

/// Scene directory written by the simulator, optionally paired with a
/// directory of fitted decay maps.
#[derive(Debug, Clone)]
pub struct SceneDir {
    dir: PathBuf,
    manifest: SceneManifest,
    decay: Option<(PathBuf, DecayManifest)>,
}

impl SceneDir {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: SceneManifest::read(dir)?,
            decay: None,
        })
    }

    /// Attach fitted decay maps; they must come from this scene.
    pub fn with_decay(mut self, dir: &Path) -> Result<Self> {
        let m = DecayManifest::read(dir)?;
        let own = scene_fingerprint(&self.manifest.config);
        if m.scene_fingerprint != own {
            return Err(Error::Manifest(format!(
                "decay maps in {} were fitted on scene {} but {} holds scene {own}",
                dir.display(),
                m.scene_fingerprint,
                self.dir.display()
            )));
        }
        self.decay = Some((dir.to_path_buf(), m));
        Ok(self)
    }

    pub fn manifest(&self) -> &SceneManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn load(&self, file: &str) -> Result<Raster> {
        let path = self.dir.join(file);
        if !path.exists() {
            return Err(Error::Manifest(format!("band file {} listed in the scene manifest is missing", path.display())));
        }
        Raster::read(&path)
    }

    fn band(&self, role: &str, pol: Option<Pol>) -> Result<Raster> {
        let entry = self
            .manifest
            .bands
            .iter()
            .find(|b| b.role == role && b.pol == pol)
            .ok_or_else(|| {
                let what = pol.map(|p| format!("{role}_{}", p.as_str())).unwrap_or_else(|| role.to_string());
                Error::Manifest(format!("band '{what}' not found in scene manifest {}", self.dir.display()))
            })?;
        self.load(&entry.file)
    }
}

impl BandSource for SceneDir {
    fn spacing(&self) -> f64 {
        self.manifest.spacing
    }

    fn lags(&self) -> Vec<u32> {
        self.manifest.lags.clone()
    }

    fn reference(&self) -> Result<Raster> {
        self.load(&self.manifest.reference)
    }

    fn valid_mask(&self) -> Result<Raster> {
        self.load(&self.manifest.valid_mask)
    }

    fn sigma(&self, pol: Pol) -> Result<Raster> {
        self.band("sigma", Some(pol))
    }

    fn coherence_pairs(&self, pol: Pol, lag: u32) -> Result<Vec<Raster>> {
        let files: Vec<&str> = self
            .manifest
            .bands
            .iter()
            .filter(|b| b.role == "coherence" && b.pol == Some(pol) && b.lag == Some(lag))
            .map(|b| b.file.as_str())
            .collect();
        if files.is_empty() {
            return Err(Error::Manifest(format!(
                "band 'coh_{lag}_{}' not found in scene manifest {} (lags: {:?})",
                pol.as_str(),
                self.dir.display(),
                self.manifest.lags
            )));
        }
        files.into_iter().map(|f| self.load(f)).collect()
    }

    fn inc_angle(&self) -> Result<Raster> {
        self.band("inc_angle", None)
    }

    fn dem(&self) -> Result<Raster> {
        self.band("dem", None)
    }

    fn decay(&self, pol: Pol, spacing: f64) -> Result<Option<(Raster, Raster)>> {
        let Some((dir, m)) = &self.decay else {
            return Ok(None);
        };
        if (m.spacing - spacing).abs() > 1e-9 {
            return Ok(None);
        }
        let Some(files) = m.bands.iter().find(|b| b.pol == pol) else {
            return Ok(None);
        };
        Ok(Some((Raster::read(&dir.join(&files.tau))?, Raster::read(&dir.join(&files.rho_inf))?)))
    }

    fn fingerprint(&self) -> String {
        scene_fingerprint(&self.manifest.config)
    }
}
