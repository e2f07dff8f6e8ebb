//! Node-blocked sparse storage (3x3 blocks) and two linear solvers with
//! Dirichlet masking: block-Jacobi preconditioned conjugate gradients and a
//! sparse Cholesky factorization of the free block.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, Side};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("conjugate gradient stalled after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("operator is not positive definite on the free space (curvature {0:.3e})")]
    Indefinite(f64),
    #[error("singular diagonal block at node {0}")]
    SingularBlock(usize),
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
}

/// Block sparsity of a symmetric node graph. Each row lists its columns in
/// increasing order, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPattern {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    diag: Vec<usize>,
}

impl BlockPattern {
    /// Pattern coupling every pair of nodes that share an element.
    pub fn from_elements(n_nodes: usize, elements: &[[usize; 4]]) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n_nodes).map(|i| vec![i]).collect();
        for e in elements {
            for &a in e {
                adj[a].extend_from_slice(e);
            }
        }
        let mut row_ptr = Vec::with_capacity(n_nodes + 1);
        let mut cols = Vec::new();
        let mut diag = Vec::with_capacity(n_nodes);
        row_ptr.push(0);
        for (i, mut row) in adj.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            let d = row.binary_search(&i).expect("diagonal present");
            diag.push(cols.len() + d);
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols, diag }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz_blocks(&self) -> usize {
        self.cols.len()
    }

    /// Storage slot of block `(i, j)`.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn diagonal_slot(&self, i: usize) -> usize {
        self.diag[i]
    }
}

/// Square matrix stored as 3x3 blocks over a [`BlockPattern`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub blocks: Vec<Matrix3<f64>>,
}

impl BlockMatrix {
    pub fn zeros(pattern: &BlockPattern) -> Self {
        Self { blocks: vec![Matrix3::zeros(); pattern.nnz_blocks()] }
    }

    pub fn clear(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = Matrix3::zeros());
    }

    pub fn mul_vec(&self, pattern: &BlockPattern, x: &[Vector3<f64>], y: &mut [Vector3<f64>]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = Vector3::zeros();
            for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                acc += self.blocks[k] * x[pattern.cols[k]];
            }
            *yi = acc;
        }
    }

    /// Largest entry of `A - A^T`.
    pub fn asymmetry(&self, pattern: &BlockPattern) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..pattern.n_rows() {
            for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                let j = pattern.cols[k];
                let t = pattern.slot(j, i).expect("symmetric pattern");
                worst = worst.max((self.blocks[k] - self.blocks[t].transpose()).amax());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn mask(v: &mut [Vector3<f64>], fixed: &[[bool; 3]]) {
    for (x, f) in v.iter_mut().zip(fixed) {
        for c in 0..3 {
            if f[c] {
                x[c] = 0.0;
            }
        }
    }
}

/// Solves `A x = b` restricted to the free components (`fixed[i][c] == false`).
/// Fixed components of `x` are returned as zero; fixed components of `b` are
/// ignored. The preconditioner inverts the free part of every diagonal block.
pub fn pcg(
    a: &BlockMatrix,
    pattern: &BlockPattern,
    b: &[Vector3<f64>],
    fixed: &[[bool; 3]],
    rtol: f64,
    max_iter: usize,
) -> Result<(Vec<Vector3<f64>>, PcgStats), LinearSolveError> {
    let n = pattern.n_rows();
    let mut precond = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = a.blocks[pattern.diagonal_slot(i)];
        for c in 0..3 {
            if fixed[i][c] {
                for k in 0..3 {
                    d[(c, k)] = 0.0;
                    d[(k, c)] = 0.0;
                }
                d[(c, c)] = 1.0;
            }
        }
        let inv = d.try_inverse().ok_or(LinearSolveError::SingularBlock(i))?;
        precond.push(inv);
    }
    let mut r = b.to_vec();
    mask(&mut r, fixed);
    let b_norm = dot(&r, &r).sqrt();
    let mut x = vec![Vector3::zeros(); n];
    if b_norm == 0.0 {
        return Ok((x, PcgStats { iterations: 0, relative_residual: 0.0 }));
    }
    let apply_precond = |r: &[Vector3<f64>], z: &mut Vec<Vector3<f64>>| {
        z.clear();
        z.extend(r.iter().zip(&precond).map(|(ri, m)| m * ri));
        mask(z, fixed);
    };
    let mut z = Vec::with_capacity(n);
    apply_precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![Vector3::zeros(); n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.mul_vec(pattern, &p, &mut ap);
        mask(&mut ap, fixed);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(LinearSolveError::Indefinite(curvature));
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= rtol {
            return Ok((x, PcgStats { iterations: it, relative_residual: rel }));
        }
        apply_precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinearSolveError::NotConverged { iterations: max_iter, residual: rel })
}

/// Symbolic Cholesky analysis of the free part of a block matrix. Reusable
/// for every matrix on the same pattern with the same fixed components.
#[derive(Debug, Clone)]
pub struct CholeskyPlan {
    fixed: Vec<[bool; 3]>,
    free_index: Vec<[usize; 3]>,
    n_free: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// Source of every stored lower-triangle value: block slot and entry.
    gather: Vec<(usize, u8, u8)>,
    symbolic: SymbolicLlt<usize>,
}

impl CholeskyPlan {
    pub fn new(pattern: &BlockPattern, fixed: &[[bool; 3]]) -> Result<Self, LinearSolveError> {
        let mut free_index = vec![[usize::MAX; 3]; pattern.n_rows()];
        let mut n_free = 0;
        for (node, f) in fixed.iter().enumerate() {
            for c in 0..3 {
                if !f[c] {
                    free_index[node][c] = n_free;
                    n_free += 1;
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n_free + 1);
        let mut row_idx = Vec::new();
        let mut gather = Vec::new();
        col_ptr.push(0);
        for node in 0..pattern.n_rows() {
            for c in 0..3 {
                let j = free_index[node][c];
                if j == usize::MAX {
                    continue;
                }
                // the pattern is symmetric, so row `node` lists column `node`
                for k in pattern.row_ptr[node]..pattern.row_ptr[node + 1] {
                    let other = pattern.cols[k];
                    if other < node {
                        continue;
                    }
                    let slot = pattern.slot(other, node).expect("symmetric pattern");
                    for r in 0..3 {
                        let i = free_index[other][r];
                        if i != usize::MAX && i >= j {
                            row_idx.push(i);
                            gather.push((slot, r as u8, c as u8));
                        }
                    }
                }
                col_ptr.push(row_idx.len());
            }
        }
        let structure = SymbolicSparseColMatRef::new_checked(n_free, n_free, &col_ptr, None, &row_idx);
        let symbolic =
            SymbolicLlt::try_new(structure, Side::Lower).map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
        Ok(Self { fixed: fixed.to_vec(), free_index, n_free, col_ptr, row_idx, gather, symbolic })
    }

    pub fn matches(&self, fixed: &[[bool; 3]]) -> bool {
        self.fixed == fixed
    }

    /// Solves the free block of `a x = b`; fixed components of `x` are zero.
    pub fn solve(&self, a: &BlockMatrix, b: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, LinearSolveError> {
        let mut x = vec![Vector3::zeros(); b.len()];
        if self.n_free == 0 {
            return Ok(x);
        }
        let values: Vec<f64> = self.gather.iter().map(|&(slot, r, c)| a.blocks[slot][(r as usize, c as usize)]).collect();
        let structure = SymbolicSparseColMatRef::new_checked(self.n_free, self.n_free, &self.col_ptr, None, &self.row_idx);
        let matrix = SparseColMatRef::new(structure, &values);
        let llt = Llt::try_new_with_symbolic(self.symbolic.clone(), matrix, Side::Lower)
            .map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
        let mut rhs = Mat::<f64>::zeros(self.n_free, 1);
        for (node, idx) in self.free_index.iter().enumerate() {
            for c in 0..3 {
                if idx[c] != usize::MAX {
                    rhs[(idx[c], 0)] = b[node][c];
                }
            }
        }
        llt.solve_in_place(&mut rhs);
        for (node, idx) in self.free_index.iter().enumerate() {
            for c in 0..3 {
                if idx[c] != usize::MAX {
                    x[node][c] = rhs[(idx[c], 0)];
                }
            }
        }
        if x.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(LinearSolveError::Factorization("non-finite solution".into()));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 1D chain of springs coupled in all three components.
    fn chain(n: usize) -> (BlockPattern, BlockMatrix) {
        let elems: Vec<[usize; 4]> = (0..n - 1).map(|i| [i, i + 1, i, i + 1]).collect();
        let pattern = BlockPattern::from_elements(n, &elems);
        let mut a = BlockMatrix::zeros(&pattern);
        let k = Matrix3::new(2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0);
        for i in 0..n - 1 {
            for (p, q, s) in [(i, i, 1.0), (i + 1, i + 1, 1.0), (i, i + 1, -1.0), (i + 1, i, -1.0)] {
                let slot = pattern.slot(p, q).unwrap();
                a.blocks[slot] += k * s;
            }
        }
        (pattern, a)
    }

    #[test]
    fn pattern_is_sorted_and_symmetric() {
        let p = BlockPattern::from_elements(5, &[[0, 1, 2, 3], [1, 2, 3, 4]]);
        assert_eq!(p.nnz_blocks(), 4 + 5 + 5 + 5 + 4);
        for i in 0..5 {
            let row = &p.cols[p.row_ptr[i]..p.row_ptr[i + 1]];
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            for &j in row {
                assert!(p.slot(j, i).is_some());
            }
        }
        assert_eq!(p.slot(0, 4), None);
    }

    #[test]
    fn solves_grounded_chain() {
        let n = 30;
        let (pattern, a) = chain(n);
        let mut fixed = vec![[false; 3]; n];
        fixed[0] = [true; 3];
        let exact: Vec<Vector3<f64>> = (0..n)
            .map(|i| if i == 0 { Vector3::zeros() } else { Vector3::new(i as f64, -0.5 * i as f64, (i as f64).sqrt()) })
            .collect();
        let mut b = vec![Vector3::zeros(); n];
        a.mul_vec(&pattern, &exact, &mut b);
        let (x, stats) = pcg(&a, &pattern, &b, &fixed, 1e-12, 10 * 3 * n).unwrap();
        assert!(stats.iterations <= 3 * n);
        let direct = CholeskyPlan::new(&pattern, &fixed).unwrap().solve(&a, &b).unwrap();
        for ((xi, di), ei) in x.iter().zip(&direct).zip(&exact) {
            assert!((xi - ei).norm() < 1e-8 * (1.0 + ei.norm()));
            assert!((di - ei).norm() < 1e-10 * (1.0 + ei.norm()));
        }
        assert_eq!(a.asymmetry(&pattern), 0.0);
    }

    #[test]
    fn zero_rhs_and_floating_system() {
        let (pattern, a) = chain(4);
        let fixed = vec![[false; 3]; 4];
        let (x, stats) = pcg(&a, &pattern, &vec![Vector3::zeros(); 4], &fixed, 1e-10, 50).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(x.iter().all(|v| v.norm() == 0.0));
        // without supports the chain has rigid modes; a self-equilibrated load
        // is still solvable, an unbalanced one is not
        let b = vec![Vector3::x(), Vector3::zeros(), Vector3::zeros(), Vector3::zeros()];
        assert!(pcg(&a, &pattern, &b, &fixed, 1e-12, 100).is_err());
        assert!(CholeskyPlan::new(&pattern, &fixed).unwrap().solve(&a, &b).is_err());
    }

    #[test]
    fn plan_with_partially_fixed_nodes() {
        let n = 6;
        let (pattern, a) = chain(n);
        let mut fixed = vec![[false; 3]; n];
        fixed[0] = [true; 3];
        fixed[3] = [false, true, false];
        let plan = CholeskyPlan::new(&pattern, &fixed).unwrap();
        assert!(plan.matches(&fixed));
        let b: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(1.0, i as f64, -2.0)).collect();
        let x = plan.solve(&a, &b).unwrap();
        let (y, _) = pcg(&a, &pattern, &b, &fixed, 1e-13, 200).unwrap();
        assert_eq!(x[3].y, 0.0);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((xi - yi).norm() < 1e-9);
        }
    }
}
