//! Information-exchange graph, gain sparsity pattern, and output matrix.
//!
//! The same undirected graph plays three roles: it couples areas physically
//! through tie lines (Laplacian), it decides which output each area's
//! controller may read (sparsity pattern of the gain), and it selects which
//! neighbours' ΔP_G / ΔP_tie measurements an area aggregates (output matrix).

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Undirected connected graph over control areas. Edges are stored 0-based
/// and canonicalized with the smaller index first; the public constructor
/// takes 1-based pairs as they appear in config files.
#[derive(Clone, Debug)]
pub struct InterconnectionGraph {
    n_areas: usize,
    edges: Vec<(usize, usize)>,
}

impl InterconnectionGraph {
    /// `edges` are 1-based unordered pairs. Rejects self-loops, duplicates,
    /// out-of-range indices, and disconnected graphs.
    pub fn new(n_areas: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_areas == 0 {
            return Err(Error::InvalidGraph("n_areas must be positive".into()));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == 0 || b == 0 || a > n_areas || b > n_areas {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a},{b}) out of range 1..={n_areas}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at area {a}")));
            }
            let e = (a.min(b) - 1, a.max(b) - 1);
            if canon.contains(&e) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a},{b})")));
            }
            canon.push(e);
        }
        let graph = Self { n_areas, edges: canon };
        if !graph.is_connected() {
            return Err(Error::InvalidGraph("graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Path graph 1-2-...-n, the radial layout used by the nominal config.
    pub fn chain(n_areas: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = (1..n_areas).map(|i| (i, i + 1)).collect();
        Self::new(n_areas, &edges)
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    /// Canonicalized 0-based edges.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// 0-based neighbours of 0-based `area`, ascending.
    pub fn neighbors(&self, area: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == area {
                    Some(b)
                } else if b == area {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn degree(&self, area: usize) -> usize {
        self.neighbors(area).len()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_areas];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Sparsity mask for the feedback gain: entry (a,b) may be nonzero iff area a
/// may read area b's output.
#[derive(Clone, Debug, PartialEq)]
pub struct StructurePattern {
    mask: DMatrix<bool>,
    n_nonzero: usize,
}

impl StructurePattern {
    pub fn new(mask: DMatrix<bool>) -> Result<Self> {
        let n_nonzero = mask.iter().filter(|&&m| m).count();
        if n_nonzero == 0 {
            return Err(Error::InvalidParameter(
                "structure pattern must have at least one free entry".into(),
            ));
        }
        Ok(Self { mask, n_nonzero })
    }

    /// Fully dense pattern; used for unstructured instances and tests.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            mask: DMatrix::from_element(rows, cols, true),
            n_nonzero: rows * cols,
        }
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    /// The paper's n_K: number of free entries.
    pub fn n_nonzero(&self) -> usize {
        self.n_nonzero
    }

    pub fn rows(&self) -> usize {
        self.mask.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mask.ncols()
    }

    /// Free entries in row-major order; the fixed ordering keeps every
    /// consumer (sampling, flattening for finite differences) deterministic.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut idx = Vec::with_capacity(self.n_nonzero);
        for i in 0..self.mask.nrows() {
            for j in 0..self.mask.ncols() {
                if self.mask[(i, j)] {
                    idx.push((i, j));
                }
            }
        }
        idx
    }

    pub fn contains(&self, matrix: &DMatrix<f64>) -> bool {
        matrix.nrows() == self.rows()
            && matrix.ncols() == self.cols()
            && matrix
                .iter()
                .zip(self.mask.iter())
                .all(|(&v, &m)| m || v == 0.0)
    }
}

/// Unweighted graph Laplacian (degree minus adjacency). Tie-line strength
/// enters through the per-area coupling block, not through edge weights.
pub fn build_laplacian(graph: &InterconnectionGraph) -> DMatrix<f64> {
    let n = graph.n_areas();
    let mut lap = DMatrix::zeros(n, n);
    for &(a, b) in graph.edges() {
        lap[(a, a)] += 1.0;
        lap[(b, b)] += 1.0;
        lap[(a, b)] -= 1.0;
        lap[(b, a)] -= 1.0;
    }
    lap
}

/// Gain mask: diagonal always free (an area always uses its own output),
/// off-diagonal free iff the corresponding edge exists.
pub fn build_structure_pattern(graph: &InterconnectionGraph) -> StructurePattern {
    let n = graph.n_areas();
    let mut mask = DMatrix::from_element(n, n, false);
    for i in 0..n {
        mask[(i, i)] = true;
    }
    for &(a, b) in graph.edges() {
        mask[(a, b)] = true;
        mask[(b, a)] = true;
    }
    StructurePattern::new(mask).expect("diagonal guarantees nonzero support")
}

/// Output matrix C (n_areas × 4·n_areas) over the per-area state ordering
/// [Δf, ΔP_G, ΔP_tie, ∫z]. Row i sums ΔP_G and ΔP_tie over area i and its
/// neighbours; `include_frequency` additionally sums Δf (the variant with
/// frequency deviation in the feedback).
pub fn build_output_matrix(graph: &InterconnectionGraph, include_frequency: bool) -> DMatrix<f64> {
    let n = graph.n_areas();
    let mut c = DMatrix::zeros(n, 4 * n);
    for i in 0..n {
        let mut hood = graph.neighbors(i);
        hood.push(i);
        for j in hood {
            c[(i, 4 * j + 1)] = 1.0; // ΔP_G slot
            c[(i, 4 * j + 2)] = 1.0; // ΔP_tie slot
            if include_frequency {
                c[(i, 4 * j)] = 1.0; // Δf slot
            }
        }
    }
    c
}

/// Zeroes every entry outside the mask; entries inside pass through
/// untouched (bit-exact).
pub fn project_onto_pattern(matrix: &DMatrix<f64>, pattern: &StructurePattern) -> Result<DMatrix<f64>> {
    if matrix.nrows() != pattern.rows() || matrix.ncols() != pattern.cols() {
        return Err(Error::ShapeMismatch(format!(
            "matrix {}x{} vs pattern {}x{}",
            matrix.nrows(),
            matrix.ncols(),
            pattern.rows(),
            pattern.cols()
        )));
    }
    let mut out = matrix.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            if !pattern.mask()[(i, j)] {
                out[(i, j)] = 0.0;
            }
        }
    }
    Ok(out)
}
