//! Continuous latent graphs `H = (Z, W)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{check_permutation, permute_pairs, permute_rows};
use crate::tensor::Tensor;

/// Node latents `z` (`[n, d]`) and pair latents `w` (`[n*n, d]`). With
/// `virtual_node` set, the last node is the appended graph-level node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGraph {
    pub z: Tensor,
    pub w: Tensor,
    pub virtual_node: bool,
}

impl LatentGraph {
    pub fn new(z: Tensor, w: Tensor, virtual_node: bool) -> Result<Self> {
        if w.rows != z.rows * z.rows || w.cols != z.cols {
            return Err(invalid(format!(
                "pair latents {:?} do not match node latents {:?}",
                w.shape(),
                z.shape()
            )));
        }
        if virtual_node && z.rows < 2 {
            return Err(invalid("a virtual node needs at least one real node"));
        }
        Ok(Self { z, w, virtual_node })
    }

    pub fn zeros(n: usize, dim: usize, virtual_node: bool) -> Self {
        Self {
            z: Tensor::zeros(n, dim),
            w: Tensor::zeros(n * n, dim),
            virtual_node,
        }
    }

    /// Standard normal node latents with symmetric pair latents.
    pub fn gaussian(n: usize, dim: usize, virtual_node: bool, rng: &mut impl Rng) -> Self {
        let z = Tensor::from_vec(
            n,
            dim,
            (0..n * dim).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("sized");
        let w = symmetric_pair_noise(n, dim, rng);
        Self { z, w, virtual_node }
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..i).all(|j| self.w.row(i * n + j) == self.w.row(j * n + i)))
    }

    /// Nodes including the virtual node.
    pub fn n(&self) -> usize {
        self.z.rows
    }

    pub fn real_nodes(&self) -> usize {
        self.z.rows - usize::from(self.virtual_node)
    }

    pub fn dim(&self) -> usize {
        self.z.cols
    }

    pub fn same_shape(&self, other: &LatentGraph) -> bool {
        self.z.same_shape(&other.z)
            && self.w.same_shape(&other.w)
            && self.virtual_node == other.virtual_node
    }

    pub fn zip_map(&self, other: &LatentGraph, f: impl Fn(f64, f64) -> f64 + Copy) -> LatentGraph {
        LatentGraph {
            z: self.z.zip_map(&other.z, f),
            w: self.w.zip_map(&other.w, f),
            virtual_node: self.virtual_node,
        }
    }

    pub fn max_abs_diff(&self, other: &LatentGraph) -> f64 {
        self.z
            .max_abs_diff(&other.z)
            .max(self.w.max_abs_diff(&other.w))
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.w.is_finite()
    }

    /// Extends a permutation of the real nodes with the virtual node fixed
    /// in last position.
    pub fn full_permutation(&self, perm: &[usize]) -> Result<Vec<usize>> {
        check_permutation(perm, self.real_nodes())?;
        let mut full = perm.to_vec();
        if self.virtual_node {
            full.push(self.real_nodes());
        }
        Ok(full)
    }

    /// Row `i` of the result is row `perm[i]` of `self`, over real nodes.
    pub fn permute(&self, perm: &[usize]) -> Result<LatentGraph> {
        let full = self.full_permutation(perm)?;
        Ok(LatentGraph {
            z: permute_rows(&self.z, &full),
            w: permute_pairs(&self.w, &full),
            virtual_node: self.virtual_node,
        })
    }
}

/// Row index map sending pair `(i, j)` to `(j, i)`.
pub fn pair_transpose(n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..n).map(move |j| j * n + i))
        .collect()
}

/// Standard normal `[n*n, dim]` draw where row `(j, i)` repeats row `(i, j)`.
pub fn symmetric_pair_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut w = Tensor::zeros(n * n, dim);
    for i in 0..n {
        for j in i..n {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            w.row_mut(i * n + j).copy_from_slice(&row);
            w.row_mut(j * n + i).copy_from_slice(&row);
        }
    }
    w
}
