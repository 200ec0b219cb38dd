//! Dynamic KNN graphs over patch nodes.
//!
//! Each node `i` gets an ordered list of exactly `k` source nodes `j`; the edge `j → i`
//! carries information from `j` into `i`. Candidates are ranked by squared Euclidean
//! distance with ties broken by ascending index, and dilation `d` keeps every `d`-th of the
//! `k·d` nearest.

use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Result, VigError};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    k: usize,
    dilation: usize,
    neighbors: Vec<u32>,
}

impl Graph {
    /// Build from a flat `num_nodes × k` neighbor table, checking every invariant.
    pub fn from_neighbors(num_nodes: usize, k: usize, dilation: usize, neighbors: Vec<u32>) -> Result<Self> {
        let g = Graph {
            num_nodes,
            k,
            dilation,
            neighbors,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dilation == 0 {
            return Err(VigError::Contract("graph needs k ≥ 1 and dilation ≥ 1".into()));
        }
        if self.neighbors.len() != self.num_nodes * self.k {
            return Err(VigError::Contract(format!(
                "{} neighbor entries for {} nodes with k = {}",
                self.neighbors.len(),
                self.num_nodes,
                self.k
            )));
        }
        for i in 0..self.num_nodes {
            let list = self.neighbors(i);
            for (r, &j) in list.iter().enumerate() {
                if j as usize >= self.num_nodes {
                    return Err(VigError::Contract(format!("node {i}: neighbor {j} out of range")));
                }
                if j as usize == i {
                    return Err(VigError::Contract(format!("node {i} lists itself")));
                }
                if list[..r].contains(&j) {
                    return Err(VigError::Contract(format!("node {i}: duplicate neighbor {j}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Source nodes feeding node `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbor_table(&self) -> &[u32] {
        &self.neighbors
    }

    /// Apply a node relabeling: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let mut neighbors = vec![0u32; self.neighbors.len()];
        for i in 0..self.num_nodes {
            let dst = perm[i];
            for (r, &j) in self.neighbors(i).iter().enumerate() {
                neighbors[dst * self.k + r] = perm[j as usize] as u32;
            }
        }
        Graph {
            neighbors,
            ..self.clone()
        }
    }

    /// One edge per line: `i j rank`, where `j` is the `rank`-th neighbor of `i`.
    pub fn write_edge_list(&self, mut w: impl Write) -> io::Result<()> {
        for i in 0..self.num_nodes {
            for (rank, j) in self.neighbors(i).iter().enumerate() {
                writeln!(w, "{i} {j} {rank}")?;
            }
        }
        Ok(())
    }

    /// Graphviz rendering with edges drawn from source to target node.
    ///
    /// With a grid width the nodes are pinned at their patch positions; `highlight` marks a
    /// center node and its neighbors.
    pub fn to_dot(&self, grid_width: Option<usize>, highlight: Option<usize>) -> String {
        let mut s = String::from("digraph vig {\n  node [shape=circle, width=0.2, label=\"\"];\n");
        let hood = highlight.map(|c| self.neighbors(c).to_vec()).unwrap_or_default();
        for i in 0..self.num_nodes {
            let _ = write!(s, "  n{i}");
            let mut attrs = Vec::new();
            if let Some(w) = grid_width {
                attrs.push(format!("pos=\"{},{}!\"", i % w, -((i / w) as i64)));
            }
            if highlight == Some(i) {
                attrs.push("shape=star, style=filled, fillcolor=red".into());
            } else if hood.contains(&(i as u32)) {
                attrs.push("style=filled, fillcolor=orange".into());
            }
            if !attrs.is_empty() {
                let _ = write!(s, " [{}]", attrs.join(", "));
            }
            s.push_str(";\n");
        }
        for i in 0..self.num_nodes {
            if highlight.is_some_and(|c| c != i) {
                continue;
            }
            for j in self.neighbors(i) {
                let _ = writeln!(s, "  n{j} -> n{i};");
            }
        }
        s.push_str("}\n");
        s
    }
}

/// `M[i][j] = ‖x_i − x_j‖²` for the rows of `x: [N×D]`.
pub fn pairwise_sq_distances<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let xs = x.data();
    let mut m = vec![T::zero(); n * n];
    m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = &xs[i * d..(i + 1) * d];
        for (j, out) in row.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            // Same operand order for (i, j) and (j, i) keeps M exactly symmetric.
            let (a, b) = if i < j { (xi, &xs[j * d..(j + 1) * d]) } else { (&xs[j * d..(j + 1) * d], xi) };
            *out = a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum();
        }
    });
    Ok(Tensor::from_parts_unchecked(vec![n, n], m))
}

/// Add a pairwise positional bias to a distance matrix.
pub fn adjust_with_relative_pe<T: Element>(m: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if m.shape() != bias.shape() {
        return Err(VigError::dim(format!(
            "distance matrix {:?} vs relative bias {:?}",
            m.shape(),
            bias.shape()
        )));
    }
    let data = m.data().iter().zip(bias.data()).map(|(&a, &b)| a + b).collect();
    Ok(Tensor::from_parts_unchecked(m.shape().to_vec(), data))
}

/// Dilated KNN graph from a distance matrix.
pub fn knn_graph<T: Element>(m: &Tensor<T>, k: usize, dilation: usize) -> Result<Graph> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(VigError::dim(format!("distance matrix must be square, got {n}x{n2}")));
    }
    if k == 0 || dilation == 0 {
        return Err(VigError::Contract("k and dilation must be at least 1".into()));
    }
    let span = k * dilation;
    if span > n.saturating_sub(1) {
        return Err(VigError::InsufficientNodes {
            needed: span,
            available: n.saturating_sub(1),
        });
    }
    let md = m.data();
    let mut neighbors = vec![0u32; n * k];
    neighbors.par_chunks_mut(k).enumerate().for_each_init(
        || Vec::with_capacity(n),
        |cands, (i, out)| {
            let row = &md[i * n..(i + 1) * n];
            cands.clear();
            cands.extend((0..n as u32).filter(|&j| j as usize != i));
            let cmp = |a: &u32, b: &u32| {
                row[*a as usize]
                    .partial_cmp(&row[*b as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(b))
            };
            if span < cands.len() {
                cands.select_nth_unstable_by(span - 1, cmp);
                cands.truncate(span);
            }
            cands.sort_unstable_by(cmp);
            for (slot, &j) in out.iter_mut().zip(cands.iter().step_by(dilation)) {
                *slot = j;
            }
        },
    );
    Ok(Graph {
        num_nodes: n,
        k,
        dilation,
        neighbors,
    })
}

/// `⌈l/4⌉` for the 1-based layer index `l`.
pub fn dilation_rate(layer: usize) -> usize {
    layer.max(1).div_ceil(4)
}

/// [`dilation_rate`] clamped so that `k·d ≤ num_nodes − 1`.
pub fn dilation_for_layer(layer: usize, k: usize, num_nodes: usize) -> usize {
    let cap = (num_nodes.saturating_sub(1) / k.max(1)).max(1);
    dilation_rate(layer).min(cap)
}

/// Neighbor count and dilation that fit a graph of `num_nodes` nodes.
pub fn effective_k_dilation(layer: usize, k: usize, num_nodes: usize) -> (usize, usize) {
    let k = k.min(num_nodes.saturating_sub(1)).max(1);
    (k, dilation_for_layer(layer, k, num_nodes))
}

/// Fixed 2-D sine/cosine codes for an `h × w` grid, one `dim`-vector per position.
///
/// A quarter of the channels each carry `sin`/`cos` of the column and row coordinate at
/// geometrically spaced frequencies; channels beyond the largest multiple of 4 stay zero.
pub fn sincos_codes<T: Element>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut data = vec![T::zero(); h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..][..dim];
            for f in 0..quarter {
                let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
                let (ax, ay) = (x as f64 * omega, y as f64 * omega);
                row[f] = T::lit(ax.sin());
                row[quarter + f] = T::lit(ax.cos());
                row[2 * quarter + f] = T::lit(ay.sin());
                row[3 * quarter + f] = T::lit(ay.cos());
            }
        }
    }
    Tensor::from_parts_unchecked(vec![h * w, dim], data)
}

/// Pairwise positional bias `−(2/dim)·e_iᵀe_j` over an `h × w` grid.
///
/// The product of the fixed codes is largest for nearby positions, so the negative sign
/// pulls spatially close nodes together once the bias is added to feature distances.
pub fn relative_bias<T: Element>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let codes = sincos_codes::<T>(h, w, dim);
    let n = h * w;
    let scale = T::lit(-2.0 / dim.max(1) as f64);
    let cs = codes.data();
    let mut data = vec![T::zero(); n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ei = &cs[i * dim..(i + 1) * dim];
        for (j, out) in row.iter_mut().enumerate() {
            let (a, b) = if i <= j { (ei, &cs[j * dim..(j + 1) * dim]) } else { (&cs[j * dim..(j + 1) * dim], ei) };
            *out = scale * a.iter().zip(b).map(|(&p, &q)| p * q).sum::<T>();
        }
    });
    Tensor::from_parts_unchecked(vec![n, n], data)
}
