//! Single-band grids. In memory, nodata is `NaN`; on disk it is the sentinel
//! declared in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 8] = b"CNPYRST1";
pub const NODATA_SENTINEL: f32 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    /// Pixel spacing in metres.
    pub spacing: f64,
    pub role: String,
    pub units: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    width: usize,
    height: usize,
    spacing: f64,
    nodata: f32,
    role: String,
    units: String,
    dtype: String,
    layout: String,
}

impl Raster {
    pub fn new(width: usize, height: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::Usage(format!(
                "{width}x{height} raster needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            spacing,
            role: String::new(),
            units: String::new(),
            values,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: f64, value: f64) -> Self {
        Self::new(width, height, spacing, vec![value; width * height]).expect("consistent size")
    }

    pub fn from_fn(width: usize, height: usize, spacing: f64, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, spacing, values).expect("consistent size")
    }

    pub fn with_role(mut self, role: impl Into<String>, units: impl Into<String>) -> Self {
        self.role = role.into();
        self.units = units.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn is_valid(&self, i: usize) -> bool {
        !self.values[i].is_nan()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn same_grid(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.spacing == other.spacing
    }

    pub fn check_same_grid(&self, other: &Raster) -> Result<()> {
        if !self.same_grid(other) {
            return Err(Error::Config(format!(
                "grid mismatch: {}x{} @ {} m ('{}') vs {}x{} @ {} m ('{}')",
                self.width, self.height, self.spacing, self.role, other.width, other.height, other.spacing, other.role
            )));
        }
        Ok(())
    }

    /// Mean over valid pixels; `None` when every pixel is nodata.
    pub fn valid_mean(&self) -> Option<f64> {
        let (s, n) = self
            .values
            .iter()
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| {
            if !v.is_nan() {
                *v = f(*v)
            }
        });
        out
    }

    /// Copy with pixels set to nodata wherever `mask` is zero or nodata.
    pub fn masked_by(&self, mask: &Raster) -> Result<Raster> {
        self.check_same_grid(mask)?;
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(&mask.values) {
            if m.is_nan() || m == 0.0 {
                *v = f64::NAN;
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = RasterHeader {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            nodata: NODATA_SENTINEL,
            role: self.role.clone(),
            units: self.units.clone(),
            dtype: "f32le".into(),
            layout: "row-major".into(),
        };
        let payload = container::f32_payload(
            self.values
                .iter()
                .map(|&v| if v.is_nan() { NODATA_SENTINEL } else { v as f32 }),
        );
        container::write(path, RASTER_MAGIC, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Raster> {
        let (h, payload): (RasterHeader, Vec<u8>) = container::read(path, RASTER_MAGIC)?;
        if h.dtype != "f32le" || h.layout != "row-major" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported dtype/layout {}/{}", h.dtype, h.layout),
            });
        }
        if payload.len() != h.width * h.height * 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("payload holds {} bytes, expected {}", payload.len(), h.width * h.height * 4),
            });
        }
        let values = container::decode_f32(&payload)
            .into_iter()
            .map(|v| if v == h.nodata { f64::NAN } else { v as f64 })
            .collect();
        Ok(Raster::new(h.width, h.height, h.spacing, values)?.with_role(h.role, h.units))
    }
}
