//! Structured meshes on [0,1] and [0,1]².
//!
//! 2D nodes use double indexing (j, k): j walks the x₂ (row) direction and k
//! the x₁ (column) direction, so the residual stencils in [`crate::fem`]
//! transcribe directly. Flat node index = j·n + k.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Dim {
    pub fn as_usize(self) -> usize {
        match self {
            Dim::One => 1,
            Dim::Two => 2,
        }
    }

    pub fn from_usize(d: usize) -> Result<Self> {
        match d {
            1 => Ok(Dim::One),
            2 => Ok(Dim::Two),
            _ => Err(Error::invalid(format!("dimension must be 1 or 2, got {d}"))),
        }
    }
}

/// Uniform grid with `n` nodes per side on the unit interval or square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    pub dim: Dim,
    pub n: usize,
}

impl Mesh {
    pub fn new(dim: Dim, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid(format!(
                "mesh needs at least 3 nodes per side, got {n}"
            )));
        }
        Ok(Mesh { dim, n })
    }

    pub fn new_1d(n: usize) -> Result<Self> {
        Mesh::new(Dim::One, n)
    }

    pub fn new_2d(n: usize) -> Result<Self> {
        Mesh::new(Dim::Two, n)
    }

    /// Node spacing h = 1/(n−1).
    pub fn h(&self) -> f64 {
        1.0 / (self.n as f64 - 1.0)
    }

    pub fn node_count(&self) -> usize {
        match self.dim {
            Dim::One => self.n,
            Dim::Two => self.n * self.n,
        }
    }

    /// Number of interior (non-Dirichlet) nodes.
    pub fn interior_count(&self) -> usize {
        let m = self.n - 2;
        match self.dim {
            Dim::One => m,
            Dim::Two => m * m,
        }
    }

    /// Coordinates of a flat node index; x₂ is 0 in 1D.
    pub fn coords(&self, idx: usize) -> (f64, f64) {
        let h = self.h();
        match self.dim {
            Dim::One => (idx as f64 * h, 0.0),
            Dim::Two => {
                let j = idx / self.n;
                let k = idx % self.n;
                (k as f64 * h, j as f64 * h)
            }
        }
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        match self.dim {
            Dim::One => idx == 0 || idx == self.n - 1,
            Dim::Two => {
                let j = idx / self.n;
                let k = idx % self.n;
                j == 0 || k == 0 || j == self.n - 1 || k == self.n - 1
            }
        }
    }

    /// Flat indices of interior nodes, in row-major interior order.
    pub fn interior_nodes(&self) -> Vec<usize> {
        match self.dim {
            Dim::One => (1..self.n - 1).collect(),
            Dim::Two => {
                let mut out = Vec::with_capacity(self.interior_count());
                for j in 1..self.n - 1 {
                    for k in 1..self.n - 1 {
                        out.push(j * self.n + k);
                    }
                }
                out
            }
        }
    }

    /// Trapezoidal quadrature weight of a node (product rule in 2D).
    pub fn quad_weight(&self, idx: usize) -> f64 {
        let h = self.h();
        let w1 = |i: usize| {
            if i == 0 || i == self.n - 1 {
                0.5 * h
            } else {
                h
            }
        };
        match self.dim {
            Dim::One => w1(idx),
            Dim::Two => w1(idx / self.n) * w1(idx % self.n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_mesh() {
        assert!(Mesh::new_1d(2).is_err());
        assert!(Mesh::new_2d(3).is_ok());
    }

    #[test]
    fn interior_indexing_2d() {
        let m = Mesh::new_2d(4).unwrap();
        assert_eq!(m.interior_count(), 4);
        assert_eq!(m.interior_nodes(), vec![5, 6, 9, 10]);
        assert!(m.is_boundary(0));
        assert!(m.is_boundary(3));
        assert!(!m.is_boundary(5));
    }

    #[test]
    fn quad_weights_sum_to_domain_measure() {
        for mesh in [Mesh::new_1d(7).unwrap(), Mesh::new_2d(5).unwrap()] {
            let total: f64 = (0..mesh.node_count()).map(|i| mesh.quad_weight(i)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
