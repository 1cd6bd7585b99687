//! Limited-memory piecewise-affine lower model of the oracle function: the
//! pointwise maximum of the tangent planes at the last `M` evaluation points,
//! optionally strengthened by a strong-convexity modulus, a bounding box on
//! the domain, or a constant floor.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::dot;

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error("bundle is empty")]
    EmptyBundle,
}

/// One tangent plane: anchor point, value, and gradient there.
#[derive(Debug, Clone)]
pub struct BundlePiece {
    pub anchor: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// An affine inequality `z >= slope^T x + offset` exported to the epigraph
/// form of the model.
#[derive(Debug, Clone)]
pub struct EpigraphRow {
    pub slope: Vec<f64>,
    pub offset: f64,
}

/// Ring buffer of at most `memory` tangent planes, newest last.
#[derive(Debug, Clone)]
pub struct Bundle {
    dim: usize,
    memory: usize,
    pieces: VecDeque<BundlePiece>,
    rho: f64,
    box_bounds: Option<(Vec<f64>, Vec<f64>)>,
    floor: Option<f64>,
}

impl Bundle {
    pub fn new(dim: usize, memory: usize) -> Self {
        assert!(memory >= 1, "bundle memory must be at least 1");
        Bundle { dim, memory, pieces: VecDeque::new(), rho: 0.0, box_bounds: None, floor: None }
    }

    /// Strengthen every piece by `(rho/2) |x - anchor|^2`; only sound when the
    /// oracle function is rho-strongly convex.
    pub fn with_strong_convexity(mut self, rho: f64) -> Self {
        assert!(rho >= 0.0);
        self.rho = rho;
        self
    }

    /// Restrict the model to a box known to contain the oracle domain.
    pub fn with_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.dim);
        assert_eq!(upper.len(), self.dim);
        self.box_bounds = Some((lower, upper));
        self
    }

    /// Apply a known constant lower bound on the oracle function.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = Some(floor);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn box_bounds(&self) -> Option<(&[f64], &[f64])> {
        self.box_bounds.as_ref().map(|(l, u)| (l.as_slice(), u.as_slice()))
    }

    pub fn floor(&self) -> Option<f64> {
        self.floor
    }

    /// Pieces oldest to newest.
    pub fn pieces(&self) -> impl Iterator<Item = &BundlePiece> {
        self.pieces.iter()
    }

    pub fn newest(&self) -> Option<&BundlePiece> {
        self.pieces.back()
    }

    /// Append a tangent plane, evicting the oldest when over capacity.
    pub fn push(&mut self, piece: BundlePiece) {
        assert_eq!(piece.anchor.len(), self.dim);
        assert_eq!(piece.gradient.len(), self.dim);
        assert!(piece.value.is_finite(), "bundle piece value must be finite");
        self.pieces.push_back(piece);
        while self.pieces.len() > self.memory {
            self.pieces.pop_front();
        }
    }

    /// Model value at `x`: the max over pieces (with the quadratic term when
    /// a strong-convexity modulus is set), then the floor, and `+inf` outside
    /// the box.
    pub fn eval(&self, x: &[f64]) -> Result<f64, BundleError> {
        if self.pieces.is_empty() {
            return Err(BundleError::EmptyBundle);
        }
        assert_eq!(x.len(), self.dim);
        if let Some((lower, upper)) = &self.box_bounds {
            for i in 0..self.dim {
                if x[i] < lower[i] || x[i] > upper[i] {
                    return Ok(f64::INFINITY);
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        for p in &self.pieces {
            let mut v = p.value;
            for i in 0..self.dim {
                let d = x[i] - p.anchor[i];
                v += p.gradient[i] * d;
                if self.rho > 0.0 {
                    v += 0.5 * self.rho * d * d;
                }
            }
            best = best.max(v);
        }
        if let Some(floor) = self.floor {
            best = best.max(floor);
        }
        Ok(best)
    }

    /// Epigraph rows `z >= slope^T x + offset`, one per piece plus one for the
    /// floor when set. With a strong-convexity modulus the slopes are shifted
    /// by `-rho * anchor` and the shared quadratic `(rho/2)|x|^2` is exported
    /// once to the subproblem objective (see [`Bundle::rho`]); the box is
    /// exported as bound constraints by the subproblem assembler, not here.
    pub fn epigraph_rows(&self) -> Result<Vec<EpigraphRow>, BundleError> {
        if self.pieces.is_empty() {
            return Err(BundleError::EmptyBundle);
        }
        let mut rows = Vec::with_capacity(self.pieces.len() + 1);
        for p in &self.pieces {
            let mut slope = p.gradient.clone();
            let mut offset = p.value - dot(&p.gradient, &p.anchor);
            if self.rho > 0.0 {
                for i in 0..self.dim {
                    slope[i] -= self.rho * p.anchor[i];
                }
                offset += 0.5 * self.rho * dot(&p.anchor, &p.anchor);
            }
            rows.push(EpigraphRow { slope, offset });
        }
        if let Some(floor) = self.floor {
            rows.push(EpigraphRow { slope: vec![0.0; self.dim], offset: floor });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece(anchor: Vec<f64>, value: f64, gradient: Vec<f64>) -> BundlePiece {
        BundlePiece { anchor, value, gradient }
    }

    #[test]
    fn memory_one_keeps_newest() {
        let mut b = Bundle::new(1, 1);
        b.push(piece(vec![0.0], 1.0, vec![1.0]));
        b.push(piece(vec![2.0], 5.0, vec![3.0]));
        assert_eq!(b.len(), 1);
        assert_eq!(b.newest().unwrap().value, 5.0);
    }

    #[test]
    fn fifo_eviction() {
        let mut b = Bundle::new(1, 20);
        for k in 0..25 {
            b.push(piece(vec![k as f64], k as f64, vec![0.0]));
        }
        assert_eq!(b.len(), 20);
        let anchors: Vec<f64> = b.pieces().map(|p| p.anchor[0]).collect();
        assert_eq!(anchors, (5..25).map(|k| k as f64).collect::<Vec<_>>());
    }

    #[test]
    fn under_capacity_keeps_all() {
        let mut b = Bundle::new(1, 3);
        b.push(piece(vec![0.0], 0.0, vec![0.0]));
        b.push(piece(vec![1.0], 1.0, vec![0.0]));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn eval_single_affine_piece() {
        let mut b = Bundle::new(1, 4);
        b.push(piece(vec![0.0], 1.0, vec![2.0]));
        assert_eq!(b.eval(&[3.0]).unwrap(), 7.0);
    }

    #[test]
    fn eval_max_of_two_pieces() {
        let mut b = Bundle::new(1, 4);
        b.push(piece(vec![0.0], 0.0, vec![1.0]));
        b.push(piece(vec![2.0], 2.0, vec![-1.0]));
        // at x=1: max(1, 3) = 3
        assert_eq!(b.eval(&[1.0]).unwrap(), 3.0);
    }

    #[test]
    fn eval_tight_at_newest_anchor() {
        // Tangents of f(x) = 0.5 |x|^2: value 0.5 |a|^2, gradient a.
        let mut b = Bundle::new(2, 4);
        b.push(piece(vec![1.0, 1.0], 1.0, vec![1.0, 1.0]));
        b.push(piece(vec![0.25, -0.5], 0.15625, vec![0.25, -0.5]));
        assert_eq!(b.eval(&[0.25, -0.5]).unwrap(), 0.15625);
    }

    #[test]
    fn eval_empty_bundle_errors() {
        let b = Bundle::new(1, 1);
        assert_eq!(b.eval(&[0.0]).unwrap_err(), BundleError::EmptyBundle);
    }

    #[test]
    fn eval_box_and_floor() {
        let mut b = Bundle::new(1, 4).with_box(vec![-1.0], vec![1.0]).with_floor(-5.0);
        b.push(piece(vec![0.0], -10.0, vec![0.0]));
        assert_eq!(b.eval(&[0.5]).unwrap(), -5.0);
        assert!(b.eval(&[2.0]).unwrap().is_infinite());
    }

    #[test]
    fn epigraph_row_plain() {
        let mut b = Bundle::new(1, 4);
        b.push(piece(vec![0.0], 1.0, vec![2.0]));
        let rows = b.epigraph_rows().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].slope, vec![2.0]);
        assert_eq!(rows[0].offset, 1.0);
    }

    #[test]
    fn epigraph_row_with_strong_convexity() {
        // rho=2, anchor 1, value 0, gradient 0: (x-1)^2 = x^2 - 2x + 1, so the
        // affine part is -2x + 1 with the quadratic exported separately.
        let mut b = Bundle::new(1, 4).with_strong_convexity(2.0);
        b.push(piece(vec![1.0], 0.0, vec![0.0]));
        let rows = b.epigraph_rows().unwrap();
        assert_eq!(rows[0].slope, vec![-2.0]);
        assert_eq!(rows[0].offset, 1.0);
        assert_eq!(b.rho(), 2.0);
    }

    #[test]
    fn epigraph_floor_row() {
        let mut b = Bundle::new(2, 4).with_floor(-5.0);
        b.push(piece(vec![0.0, 0.0], 0.0, vec![1.0, 1.0]));
        let rows = b.epigraph_rows().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].slope, vec![0.0, 0.0]);
        assert_eq!(rows[1].offset, -5.0);
    }

    #[test]
    fn adding_pieces_never_lowers_eval() {
        let mut b = Bundle::new(1, 8);
        b.push(piece(vec![0.0], 0.0, vec![1.0]));
        let probes: Vec<f64> = (-10..10).map(|k| k as f64 / 3.0).collect();
        let before: Vec<f64> = probes.iter().map(|&x| b.eval(&[x]).unwrap()).collect();
        b.push(piece(vec![1.0], 0.5, vec![1.0]));
        for (p, old) in probes.iter().zip(before) {
            assert!(b.eval(&[*p]).unwrap() >= old);
        }
    }
}
