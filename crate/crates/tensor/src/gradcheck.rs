//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Relative errors are computed against `max(|analytic|, |numeric|, floor)`;
/// below the floor, finite-difference rounding (~1e-10) would dominate.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probes {
    /// Every coordinate of every parameter.
    All,
    /// At most `per_param` coordinates per tensor, chosen by `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(param name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compare autodiff gradients of the scalar built by `build` against central
/// differences with half-width `step`, perturbing the parameters in `store`.
///
/// `build` must be a pure function of the store (no hidden state updates).
pub fn gradcheck<F>(store: &mut ParamStore<f64>, step: f64, probes: Probes, mut build: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
    {
        let mut tmp = store.clone();
        tmp.zero_grad();
        grads.accumulate_into(&mut tmp);
        for (i, (_, p)) in tmp.iter().enumerate() {
            analytic[i].copy_from_slice(p.grad.data());
        }
    }

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.value(id).numel();
        let coords: Vec<usize> = match probes {
            Probes::All => (0..n).collect(),
            Probes::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, n, per_param.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for j in coords {
            let original = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = original + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = original - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            let err = relative_error(a, numeric);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
