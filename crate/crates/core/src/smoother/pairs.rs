//! Innovation/update training pairs built from differences of ensemble members.

use nalgebra::DMatrix;

use crate::ensemble::Ensemble;
use crate::error::{invalid, Error, Result};
use crate::obs::{noise_draws, ObservationSet};
use crate::rng::RngStream;
use crate::smoother::kalman::check_outputs;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPairs {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
}

impl TrainingPairs {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::DimensionMismatch {
                what: "pair columns",
                expected: inputs.ncols(),
                found: outputs.ncols(),
            });
        }
        if inputs.ncols() == 0 {
            return Err(invalid("training pairs are empty"));
        }
        Ok(Self { inputs, outputs })
    }

    /// `N_y x N` innovation-like inputs.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// `N_m x N` parameter differences.
    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of unordered member pairs.
pub fn pair_count(n_members: usize) -> usize {
    n_members * n_members.saturating_sub(1) / 2
}

/// For every `i < j` in lexicographic order: input `f(m_i) - f(m_j) + alpha eps_ij`
/// with a fresh draw `eps_ij ~ N(0, R)`, output `m_i - m_j`.
pub fn generate_training_pairs(
    e: &Ensemble,
    obs: &ObservationSet,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<TrainingPairs> {
    let y = check_outputs(e, obs)?;
    let m = e.params();
    let ne = e.n_members();
    let n = pair_count(ne);
    let mut inputs = noise_draws(obs, alpha, n, rng)?;
    let mut outputs = DMatrix::zeros(m.nrows(), n);
    let mut col = 0;
    for i in 0..ne {
        for j in i + 1..ne {
            for r in 0..y.nrows() {
                inputs[(r, col)] += y[(r, i)] - y[(r, j)];
            }
            for r in 0..m.nrows() {
                outputs[(r, col)] = m[(r, i)] - m[(r, j)];
            }
            col += 1;
        }
    }
    TrainingPairs::new(inputs, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::{ObsKind, ObsLabel};

    fn obs(n: usize, std: f64) -> ObservationSet {
        let labels = (0..n)
            .map(|_| ObsLabel {
                kind: ObsKind::Concentration,
                x: 0.0,
                y: 0.0,
                t: Some(1.0),
            })
            .collect();
        ObservationSet::new(vec![0.0; n], vec![std; n], labels).unwrap()
    }

    fn ensemble(ne: usize, seed: u64) -> Ensemble {
        let mut rng = RngStream::new(seed, 0);
        let p = DMatrix::from_fn(3, ne, |_, _| rng.normal());
        let y = DMatrix::from_fn(2, ne, |_, _| rng.normal());
        Ensemble::new(p, 0).unwrap().with_outputs(y).unwrap()
    }

    #[test]
    fn two_members_one_pair() {
        let e = ensemble(2, 1);
        let p = generate_training_pairs(&e, &obs(2, 0.1), 1.0, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(p.len(), 1);
        let expect = e.params().column(0) - e.params().column(1);
        assert_eq!(p.outputs().column(0), expect);
    }

    #[test]
    fn lexicographic_order_and_antisymmetry() {
        let e = ensemble(5, 2);
        let p = generate_training_pairs(&e, &obs(2, 1e-300), 1.0, &mut RngStream::new(2, 0)).unwrap();
        let mut col = 0;
        for i in 0..5 {
            for j in i + 1..5 {
                let swapped_in = e.outputs().unwrap().column(j) - e.outputs().unwrap().column(i);
                let swapped_out = e.params().column(j) - e.params().column(i);
                for r in 0..2 {
                    assert!((p.inputs()[(r, col)] + swapped_in[r]).abs() < 1e-250);
                }
                assert_eq!(p.outputs().column(col), -swapped_out);
                col += 1;
            }
        }
    }

    #[test]
    fn missing_outputs_rejected() {
        let e = Ensemble::new(DMatrix::zeros(2, 3), 0).unwrap();
        assert!(generate_training_pairs(&e, &obs(2, 1.0), 1.0, &mut RngStream::new(1, 0)).is_err());
    }
}
