use rayon::prelude::*;

use super::table::PixelTable;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

/// Exhaustive k-nearest-neighbour regressor; the model is the table itself.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub table: PixelTable,
}

pub fn knn_fit(table: &PixelTable, k: usize) -> Result<KnnModel> {
    if k == 0 || k > table.len() {
        return Err(Error::Usage(format!("k = {k} must lie in 1..={}", table.len())));
    }
    Ok(KnnModel {
        k,
        table: table.clone(),
    })
}

impl KnnModel {
    /// Mean target of the `k` rows nearest in Euclidean distance; equal
    /// distances go to the lower row index.
    pub fn predict_row(&self, query: &[f64]) -> f64 {
        let t = &self.table;
        // Max-heap of the best k so far, ordered by (distance, index).
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for i in 0..t.len() {
            let d2: f64 = t.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == self.k {
                let worst = best[0];
                if d2 > worst.0 || (d2 == worst.0 && i > worst.1) {
                    continue;
                }
                best[0] = (d2, i);
                sift_down(&mut best);
            } else {
                best.push((d2, i));
                sift_up(&mut best);
            }
        }
        best.iter().map(|&(_, i)| t.targets()[i]).sum::<f64>() / best.len() as f64
    }
}

fn greater(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

fn sift_up(h: &mut [(f64, usize)]) {
    let mut i = h.len() - 1;
    while i > 0 {
        let p = (i - 1) / 2;
        if !greater(h[i], h[p]) {
            break;
        }
        h.swap(i, p);
        i = p;
    }
}

fn sift_down(h: &mut [(f64, usize)]) {
    let mut i = 0;
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut m = i;
        if l < h.len() && greater(h[l], h[m]) {
            m = l;
        }
        if r < h.len() && greater(h[r], h[m]) {
            m = r;
        }
        if m == i {
            break;
        }
        h.swap(i, m);
        i = m;
    }
}

pub fn knn_predict(model: &KnnModel, rows: &[f64]) -> Result<Vec<f64>> {
    let d = model.table.n_features();
    if d == 0 || rows.len() % d != 0 {
        return Err(Error::Usage(format!("{} values do not form rows of {d} features", rows.len())));
    }
    Ok(rows.par_chunks(d).map(|q| model.predict_row(q)).collect())
}
