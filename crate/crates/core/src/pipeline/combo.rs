use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::simulator::Pol;

/// Feature band identity. The derived ordering is the canonical band order:
/// sigma, coherences by ascending lag (HH before HV), tau, rho_inf,
/// incidence angle, DEM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BandRole {
    Sigma(Pol),
    Coherence { lag: u32, pol: Pol },
    Tau(Pol),
    RhoInf(Pol),
    IncAngle,
    Dem,
}

impl BandRole {
    pub fn tag(&self) -> String {
        match self {
            BandRole::Sigma(p) => format!("sigma_{}", p.as_str()),
            BandRole::Coherence { lag, pol } => format!("coh_{lag}_{}", pol.as_str()),
            BandRole::Tau(p) => format!("tau_{}", p.as_str()),
            BandRole::RhoInf(p) => format!("rho_inf_{}", p.as_str()),
            BandRole::IncAngle => "inc_angle".into(),
            BandRole::Dem => "dem".into(),
        }
    }

    pub fn parse(tag: &str) -> Option<BandRole> {
        match tag {
            "inc_angle" => return Some(BandRole::IncAngle),
            "dem" => return Some(BandRole::Dem),
            _ => {}
        }
        let (head, pol) = tag.rsplit_once('_')?;
        let pol = Pol::parse(pol)?;
        match head {
            "sigma" => Some(BandRole::Sigma(pol)),
            "tau" => Some(BandRole::Tau(pol)),
            "rho_inf" => Some(BandRole::RhoInf(pol)),
            _ => {
                let lag = head.strip_prefix("coh_")?.parse().ok()?;
                Some(BandRole::Coherence { lag, pol })
            }
        }
    }

    pub fn units(&self) -> &'static str {
        match self {
            BandRole::Sigma(_) => "dB",
            BandRole::Coherence { .. } | BandRole::RhoInf(_) => "1",
            BandRole::Tau(_) => "days",
            BandRole::IncAngle => "deg",
            BandRole::Dem => "m",
        }
    }
}

impl fmt::Display for BandRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Input-modality group of a combo spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Sigma,
    Coh(u32),
    CohAll,
    Tau,
    RhoInf,
    Inc,
    Dem,
}

impl Group {
    fn name(&self) -> String {
        match self {
            Group::Sigma => "sigma".into(),
            Group::Coh(l) => format!("coh{l}"),
            Group::CohAll => "coh_all".into(),
            Group::Tau => "tau".into(),
            Group::RhoInf => "rho_inf".into(),
            Group::Inc => "inc".into(),
            Group::Dem => "dem".into(),
        }
    }
}

/// Parsed combo string such as `"sigma+coh14,hh,hv"` or `"all,hv"`: `+`-joined
/// groups, then polarizations.
///
/// Groups: `sigma`, `coh<lag>` (also `coh_<lag>`), `coh_all`, `tau`,
/// `rho_inf`, `decay` (tau + rho_inf), `inc`, `dem`, `geom` (inc + dem), and
/// `all` (sigma, coh14, tau, rho_inf, inc, dem).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComboSpec {
    pub groups: BTreeSet<Group>,
    pub pols: BTreeSet<Pol>,
}

impl ComboSpec {
    pub fn parse(spec: &str) -> Result<ComboSpec> {
        let mut parts = spec.split(',').map(str::trim);
        let head = parts.next().unwrap_or("");
        let mut groups = BTreeSet::new();
        for g in head.split('+').map(str::trim) {
            let add: &[Group] = match g {
                "sigma" => &[Group::Sigma],
                "coh_all" | "cohall" => &[Group::CohAll],
                "tau" => &[Group::Tau],
                "rho_inf" | "rho" => &[Group::RhoInf],
                "decay" => &[Group::Tau, Group::RhoInf],
                "inc" | "inc_angle" => &[Group::Inc],
                "dem" => &[Group::Dem],
                "geom" => &[Group::Inc, Group::Dem],
                "all" => &[Group::Sigma, Group::Coh(14), Group::Tau, Group::RhoInf, Group::Inc, Group::Dem],
                other => {
                    let lag = other
                        .strip_prefix("coh")
                        .map(|s| s.trim_start_matches('_'))
                        .and_then(|s| s.parse::<u32>().ok())
                        .filter(|&l| l > 0)
                        .ok_or_else(|| Error::Usage(format!("unknown band group '{other}' in combo '{spec}'")))?;
                    groups.insert(Group::Coh(lag));
                    &[]
                }
            };
            groups.extend(add.iter().copied());
        }
        let mut pols = BTreeSet::new();
        for p in parts {
            pols.insert(Pol::parse(p).ok_or_else(|| Error::Usage(format!("unknown polarization '{p}' in combo '{spec}'")))?);
        }
        let needs_pol = groups.iter().any(|g| !matches!(g, Group::Inc | Group::Dem));
        if needs_pol && pols.is_empty() {
            return Err(Error::Usage(format!("combo '{spec}' names no polarization (append ,hh and/or ,hv)")));
        }
        Ok(ComboSpec { groups, pols })
    }

    /// Canonical identifier; equal for equivalent spellings.
    pub fn id(&self) -> String {
        let mut s = self.groups.iter().map(Group::name).collect::<Vec<_>>().join("+");
        for p in &self.pols {
            s.push(',');
            s.push_str(p.as_str());
        }
        s
    }

    /// Bands in canonical order, given the lags available in the scene.
    pub fn bands(&self, lags: &[u32]) -> Vec<BandRole> {
        let mut out = BTreeSet::new();
        for &pol in &self.pols {
            for g in &self.groups {
                match *g {
                    Group::Sigma => {
                        out.insert(BandRole::Sigma(pol));
                    }
                    Group::Coh(lag) => {
                        out.insert(BandRole::Coherence { lag, pol });
                    }
                    Group::CohAll => out.extend(lags.iter().map(|&lag| BandRole::Coherence { lag, pol })),
                    Group::Tau => {
                        out.insert(BandRole::Tau(pol));
                    }
                    Group::RhoInf => {
                        out.insert(BandRole::RhoInf(pol));
                    }
                    Group::Inc | Group::Dem => {}
                }
            }
        }
        if self.groups.contains(&Group::Inc) {
            out.insert(BandRole::IncAngle);
        }
        if self.groups.contains(&Group::Dem) {
            out.insert(BandRole::Dem);
        }
        out.into_iter().collect()
    }
}
