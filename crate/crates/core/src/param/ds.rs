//! Direct-sampling multiple-point simulation for two-facies images.
//!
//! Neighbourhoods are measured in node offsets, so the training image is
//! assumed to share the target grid's node spacing.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid2D, ScalarField};
use crate::param::ti::TrainingImage;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsParams {
    pub n_neighbors: usize,
    /// Accepted fraction of mismatching neighbours.
    pub threshold: f64,
    /// Fraction of the training image scanned per node.
    pub scan_fraction: f64,
}

impl Default for DsParams {
    fn default() -> Self {
        Self {
            n_neighbors: 30,
            threshold: 0.1,
            scan_fraction: 0.3,
        }
    }
}

impl DsParams {
    fn validate(&self) -> Result<()> {
        if self.n_neighbors == 0 {
            return Err(invalid("direct sampling needs at least one neighbour"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid("distance threshold must lie in [0, 1]"));
        }
        if !(self.scan_fraction > 0.0 && self.scan_fraction <= 1.0) {
            return Err(invalid("scan fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

const EMPTY: u8 = u8::MAX;

/// Simulates one realization on `target`, honouring `conditioning` exactly.
pub fn direct_sampling(
    ti: &TrainingImage,
    target: Grid2D,
    conditioning: &[(usize, f64)],
    ds: &DsParams,
    rng: &mut RngStream,
) -> Result<ScalarField> {
    ds.validate()?;
    let palette = ti.palette();
    let mut sim = vec![EMPTY; target.len()];
    for &(node, value) in conditioning {
        if node >= target.len() {
            return Err(invalid(format!("conditioning node {node} outside the target grid")));
        }
        sim[node] = if value == palette[0] {
            0
        } else if value == palette[1] {
            1
        } else {
            return Err(invalid(format!("conditioning value {value} not in the palette")));
        };
    }

    let tg = *ti.grid();
    let codes = ti.codes();
    let n_ti = codes.len();
    let n_scan = ((ds.scan_fraction * n_ti as f64).ceil() as usize).clamp(1, n_ti);

    // Offsets sorted by distance, covering the whole target grid.
    let (nx, ny) = (target.nx as i64, target.ny as i64);
    let mut offsets: Vec<(i64, i64)> = (-(ny - 1)..ny)
        .flat_map(|dj| (-(nx - 1)..nx).map(move |di| (di, dj)))
        .filter(|&o| o != (0, 0))
        .collect();
    let (hx, hy) = (target.dx(), target.dy());
    offsets.sort_by(|a, b| {
        let da = (a.0 as f64 * hx).powi(2) + (a.1 as f64 * hy).powi(2);
        let db = (b.0 as f64 * hx).powi(2) + (b.1 as f64 * hy).powi(2);
        da.total_cmp(&db)
    });

    let mut path: Vec<usize> = (0..target.len()).filter(|k| sim[*k] == EMPTY).collect();
    rng.shuffle(&mut path);

    let mut pattern: Vec<(i64, i64, u8)> = Vec::with_capacity(ds.n_neighbors);
    for node in path {
        let (i, j) = target.coords(node);
        let (i, j) = (i as i64, j as i64);
        pattern.clear();
        for &(di, dj) in &offsets {
            let (a, b) = (i + di, j + dj);
            if a < 0 || b < 0 || a >= nx || b >= ny {
                continue;
            }
            let v = sim[target.index(a as usize, b as usize)];
            if v != EMPTY {
                pattern.push((di, dj, v));
                if pattern.len() == ds.n_neighbors {
                    break;
                }
            }
        }
        if pattern.is_empty() {
            sim[node] = codes[rng.below(n_ti)];
            continue;
        }
        let accept = (ds.threshold * pattern.len() as f64).floor() as usize;
        let start = rng.below(n_ti);
        let mut best = (usize::MAX, 0u8);
        for step in 0..n_scan {
            let cand = (start + step) % n_ti;
            let (ci, cj) = tg.coords(cand);
            let (ci, cj) = (ci as i64, cj as i64);
            let mut mismatches = 0usize;
            for &(di, dj, v) in &pattern {
                let (a, b) = (ci + di, cj + dj);
                let same = a >= 0
                    && b >= 0
                    && (a as usize) < tg.nx
                    && (b as usize) < tg.ny
                    && codes[tg.index(a as usize, b as usize)] == v;
                if !same {
                    mismatches += 1;
                    if mismatches >= best.0 {
                        break;
                    }
                }
            }
            if mismatches < best.0 {
                best = (mismatches, codes[cand]);
                if mismatches <= accept {
                    break;
                }
            }
        }
        sim[node] = best.1;
    }
    let values = sim.iter().map(|c| palette[*c as usize]).collect();
    ScalarField::new(target, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ti::{generate_channel_ti, ChannelSpec};

    fn small_ti() -> TrainingImage {
        let g = Grid2D::new(120, 120, 119.0, 119.0).unwrap();
        generate_channel_ti(g, &ChannelSpec::channelized(1.0), &mut RngStream::new(5, 0)).unwrap()
    }

    #[test]
    fn fully_conditioned_target_is_verbatim() {
        let ti = small_ti();
        let g = Grid2D::new(6, 5, 5.0, 4.0).unwrap();
        let cond: Vec<(usize, f64)> = (0..g.len()).map(|k| (k, if k % 4 == 0 { 2.3 } else { 0.5 })).collect();
        let f = direct_sampling(&ti, g, &cond, &DsParams::default(), &mut RngStream::new(1, 0)).unwrap();
        for (k, v) in cond {
            assert_eq!(f.values()[k], v);
        }
    }

    #[test]
    fn palette_and_conditioning_are_honoured() {
        let ti = small_ti();
        let g = Grid2D::new(30, 30, 29.0, 29.0).unwrap();
        let cond = vec![(0, 2.3), (100, 0.5), (450, 2.3)];
        let f = direct_sampling(&ti, g, &cond, &DsParams::default(), &mut RngStream::new(2, 0)).unwrap();
        assert!(f.values().iter().all(|v| *v == 0.5 || *v == 2.3));
        for (k, v) in cond {
            assert_eq!(f.values()[k], v);
        }
    }

    #[test]
    fn rejects_bad_conditioning() {
        let ti = small_ti();
        let g = Grid2D::new(5, 5, 4.0, 4.0).unwrap();
        let ds = DsParams::default();
        assert!(direct_sampling(&ti, g, &[(25, 0.5)], &ds, &mut RngStream::new(1, 0)).is_err());
        assert!(direct_sampling(&ti, g, &[(3, 1.0)], &ds, &mut RngStream::new(1, 0)).is_err());
        let bad = DsParams {
            n_neighbors: 0,
            ..ds
        };
        assert!(direct_sampling(&ti, g, &[], &bad, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn same_stream_same_realization() {
        let ti = small_ti();
        let g = Grid2D::new(20, 20, 19.0, 19.0).unwrap();
        let ds = DsParams::default();
        let a = direct_sampling(&ti, g, &[], &ds, &mut RngStream::new(9, 3)).unwrap();
        let b = direct_sampling(&ti, g, &[], &ds, &mut RngStream::new(9, 3)).unwrap();
        assert_eq!(a, b);
    }
}
