use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Nodata-aware block mean; partial edge blocks are dropped and all-nodata
/// blocks stay nodata.
pub fn block_aggregate(r: &Raster, factor: usize) -> Result<Raster> {
    block_reduce(r, factor, |vals| {
        let (s, n) = vals.iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    })
}

/// Fraction of each block whose value is nonzero and not nodata; used to
/// carry a binary validity mask to a coarser grid.
pub fn block_fraction(r: &Raster, factor: usize) -> Result<Raster> {
    block_reduce(r, factor, |vals| {
        vals.iter().filter(|v| !v.is_nan() && **v != 0.0).count() as f64 / vals.len() as f64
    })
}

fn block_reduce(r: &Raster, factor: usize, reduce: impl Fn(&[f64]) -> f64 + Sync) -> Result<Raster> {
    if factor < 2 {
        return Err(Error::Usage(format!("aggregation factor must be at least 2, got {factor}")));
    }
    let (w, h) = (r.width() / factor, r.height() / factor);
    if w == 0 || h == 0 {
        return Err(Error::Usage(format!(
            "{}x{} raster is smaller than one {factor}x{factor} block",
            r.width(),
            r.height()
        )));
    }
    let values: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(factor * factor),
            |buf, i| {
                let (bx, by) = (i % w, i / w);
                buf.clear();
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        buf.push(r.get(x, y));
                    }
                }
                reduce(buf)
            },
        )
        .collect();
    Ok(Raster::new(w, h, r.spacing * factor as f64, values)?.with_role(r.role.clone(), r.units.clone()))
}
