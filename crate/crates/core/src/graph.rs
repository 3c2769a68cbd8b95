//! Grid and mesh-graph construction for the limited area.
//!
//! The forecast grid is a W x H lattice of unit-spaced nodes in a planar
//! projection frame. Mesh levels are regular quadrilateral lattices laid over
//! the same extent, tripling the node spacing per level so that a level-l
//! node sits exactly at the center of a 3x3 group of level-(l-1) nodes.
//!
//! Placement convention (documented because the counts depend on it): level 1
//! has n1 x n1 nodes at *cell centers*, i.e. x_a = (W-1) * (a + 0.5) / n1 and
//! likewise in y. On non-square grids this stretches the cells; the
//! grid-to-mesh connection radius is 0.67 times the larger of the two level-1
//! spacings. Under this convention the MEPS-scale configuration (238x268
//! grid, 81/27/9/3 levels) reproduces the reference edge counts exactly,
//! including 100656 Grid2Mesh edges.

use crate::container::Container;
use crate::error::{LamError, Result};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Which mesh-graph construction a [`LamGraph`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Levels merged onto one node set (GC-LAM).
    MultiScale,
    /// Levels kept distinct, joined by up/down edges (Hi-LAM).
    Hierarchical,
    /// Finest level only (1L-LAM).
    SingleLevel,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::MultiScale => "multiscale",
            Variant::Hierarchical => "hierarchical",
            Variant::SingleLevel => "single",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = LamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiscale" => Ok(Variant::MultiScale),
            "hierarchical" => Ok(Variant::Hierarchical),
            "single" => Ok(Variant::SingleLevel),
            other => Err(LamError::config(format!(
                "unknown variant '{other}' (multiscale|hierarchical|single)"
            ))),
        }
    }
}

/// The forecast grid: W x H nodes with unit spacing, the outermost
/// `boundary_width` bands forming the boundary area.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub boundary_width: usize,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, boundary_width: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(LamError::config(format!(
                "grid {width}x{height} too small"
            )));
        }
        if width < 2 * boundary_width + 2 || height < 2 * boundary_width + 2 {
            return Err(LamError::config(format!(
                "grid {width}x{height} cannot hold boundary width {boundary_width} (needs >= 2b+2)"
            )));
        }
        Ok(GridSpec {
            width,
            height,
            boundary_width,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.width * self.height
    }

    /// Node id for column i (x) and row j (y); x varies fastest.
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.n_nodes());
        for j in 0..self.height {
            for i in 0..self.width {
                out.push([i as f64, j as f64]);
            }
        }
        out
    }

    pub fn in_boundary(&self, i: usize, j: usize) -> bool {
        let b = self.boundary_width;
        i < b || j < b || i >= self.width - b || j >= self.height - b
    }

    /// Node ids of the boundary band, ascending.
    pub fn boundary_nodes(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for j in 0..self.height {
            for i in 0..self.width {
                if self.in_boundary(i, j) {
                    out.push(self.node_index(i, j) as u32);
                }
            }
        }
        out
    }

    /// Node ids outside the boundary band, ascending.
    pub fn interior_nodes(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for j in 0..self.height {
            for i in 0..self.width {
                if !self.in_boundary(i, j) {
                    out.push(self.node_index(i, j) as u32);
                }
            }
        }
        out
    }
}

/// One regular mesh level: nx x ny nodes, 8-neighborhood bidirectional edges
/// (stored directed, both directions).
#[derive(Debug, Clone, PartialEq)]
pub struct MeshLevel {
    pub nx: usize,
    pub ny: usize,
    pub spacing: [f64; 2],
    pub coords: Vec<[f64; 2]>,
    pub edges: Vec<(u32, u32)>,
}

impl MeshLevel {
    pub fn node_index(&self, a: usize, b: usize) -> usize {
        b * self.nx + a
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    /// Position of node (0,0); mesh lattices are regular so this is the origin.
    fn origin(&self) -> [f64; 2] {
        self.coords[0]
    }
}

/// Directed intra-level edges of an nx x ny lattice with horizontal, vertical
/// and diagonal neighbors, sorted lexicographically by (src, dst).
fn mesh_edges_8(nx: usize, ny: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::with_capacity(4 * nx * ny);
    for b in 0..ny as i64 {
        for a in 0..nx as i64 {
            let src = (b * nx as i64 + a) as u32;
            for db in -1..=1i64 {
                for da in -1..=1i64 {
                    if da == 0 && db == 0 {
                        continue;
                    }
                    let (na, nb) = (a + da, b + db);
                    if na >= 0 && na < nx as i64 && nb >= 0 && nb < ny as i64 {
                        edges.push((src, (nb * nx as i64 + na) as u32));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Build one mesh level from explicit spacing and origin.
pub fn build_mesh_level(
    nx: usize,
    ny: usize,
    spacing: [f64; 2],
    origin: [f64; 2],
) -> Result<MeshLevel> {
    if nx < 2 || ny < 2 {
        return Err(LamError::config(format!(
            "mesh level {nx}x{ny} too small (needs >= 2 per axis)"
        )));
    }
    let mut coords = Vec::with_capacity(nx * ny);
    for b in 0..ny {
        for a in 0..nx {
            coords.push([
                origin[0] + a as f64 * spacing[0],
                origin[1] + b as f64 * spacing[1],
            ]);
        }
    }
    Ok(MeshLevel {
        nx,
        ny,
        spacing,
        coords,
        edges: mesh_edges_8(nx, ny),
    })
}

/// Build the level stack for a grid: level l has n1 / 3^(l-1) nodes per axis.
/// All coordinates are computed through the shared level-1 cell-center
/// expression so coincident nodes are bit-identical across levels.
pub fn grid_mesh_levels(grid: &GridSpec, n1: usize, n_levels: usize) -> Result<Vec<MeshLevel>> {
    if n_levels == 0 {
        return Err(LamError::config("need at least one mesh level"));
    }
    let divisor = 3usize.pow(n_levels as u32 - 1);
    if n1 % divisor != 0 {
        return Err(LamError::config(format!(
            "n1 = {n1} is not divisible by 3^(levels-1) = {divisor}; \
             the 3:1 center alignment requires it"
        )));
    }
    if n1 / divisor < 2 {
        return Err(LamError::config(format!(
            "top level would have {} nodes per axis (needs >= 2)",
            n1 / divisor
        )));
    }
    let ex = (grid.width - 1) as f64;
    let ey = (grid.height - 1) as f64;
    let dx1 = ex / n1 as f64;
    let dy1 = ey / n1 as f64;
    let pos = |f: usize| -> [f64; 2] { [dx1 * (f as f64 + 0.5), dy1 * (f as f64 + 0.5)] };

    let mut levels = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let step = 3usize.pow(l as u32);
        let n = n1 / step;
        let off = (step - 1) / 2;
        let mut coords = Vec::with_capacity(n * n);
        for b in 0..n {
            for a in 0..n {
                let fx = off + a * step;
                let fy = off + b * step;
                coords.push([pos(fx)[0], pos(fy)[1]]);
            }
        }
        levels.push(MeshLevel {
            nx: n,
            ny: n,
            spacing: [dx1 * step as f64, dy1 * step as f64],
            coords,
            edges: mesh_edges_8(n, n),
        });
    }
    Ok(levels)
}

/// A directed edge set with per-edge static features (normalized length and
/// source-to-target vector difference).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeSet {
    pub pairs: Vec<(u32, u32)>,
    /// Three features per edge: (|d| / L, dx / L, dy / L) with L the longest
    /// edge in the graph.
    pub feats: Vec<[f64; 3]>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Map a coarse node position onto the index of the coincident node of
/// `fine`, or fail with an alignment error.
fn coincident_index(fine: &MeshLevel, p: [f64; 2], tol: f64) -> Result<u32> {
    let o = fine.origin();
    let a = ((p[0] - o[0]) / fine.spacing[0]).round();
    let b = ((p[1] - o[1]) / fine.spacing[1]).round();
    if a < 0.0 || b < 0.0 || a >= fine.nx as f64 || b >= fine.ny as f64 {
        return Err(LamError::Alignment(format!(
            "node at ({}, {}) falls outside the finest level",
            p[0], p[1]
        )));
    }
    let idx = fine.node_index(a as usize, b as usize);
    let q = fine.coords[idx];
    if (q[0] - p[0]).abs() > tol || (q[1] - p[1]).abs() > tol {
        return Err(LamError::Alignment(format!(
            "no coincident fine node for ({}, {}); nearest lattice point is ({}, {})",
            p[0], p[1], q[0], q[1]
        )));
    }
    Ok(idx as u32)
}

/// Merged multi-scale mesh: the finest level's nodes carry the union of all
/// levels' edges (re-indexed, duplicates removed).
#[derive(Debug, Clone, PartialEq)]
pub struct MergedMesh {
    pub nx: usize,
    pub ny: usize,
    pub coords: Vec<[f64; 2]>,
    pub edges: Vec<(u32, u32)>,
    /// For each level beyond the first, the merged node index of each of its
    /// nodes (used by the degree diagnostic).
    pub upper_node_map: Vec<Vec<u32>>,
}

pub fn build_multiscale(levels: &[MeshLevel]) -> Result<MergedMesh> {
    if levels.is_empty() {
        return Err(LamError::config("merge of zero levels"));
    }
    let fine = &levels[0];
    let tol = 1e-6 * fine.spacing[0].max(fine.spacing[1]);
    let mut edges = fine.edges.clone();
    let mut upper_node_map = Vec::new();
    for level in &levels[1..] {
        let map: Vec<u32> = level
            .coords
            .iter()
            .map(|&p| coincident_index(fine, p, tol))
            .collect::<Result<_>>()?;
        for &(s, d) in &level.edges {
            edges.push((map[s as usize], map[d as usize]));
        }
        upper_node_map.push(map);
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(MergedMesh {
        nx: fine.nx,
        ny: fine.ny,
        coords: fine.coords.clone(),
        edges,
        upper_node_map,
    })
}

/// Inter-level edges of the hierarchy: each level-l node connects to its
/// closest level-(l+1) node (ties broken by lowest node index); down edges
/// are the flipped copies.
pub fn build_hierarchy(levels: &[MeshLevel]) -> Result<(Vec<Vec<(u32, u32)>>, Vec<Vec<(u32, u32)>>)> {
    if levels.len() < 2 {
        return Err(LamError::config(
            "hierarchy needs at least two mesh levels",
        ));
    }
    let mut up = Vec::with_capacity(levels.len() - 1);
    let mut down = Vec::with_capacity(levels.len() - 1);
    for w in levels.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        let mut up_edges = Vec::with_capacity(lo.n_nodes());
        for (i, p) in lo.coords.iter().enumerate() {
            let mut best = 0u32;
            let mut best_d2 = f64::INFINITY;
            for (j, q) in hi.coords.iter().enumerate() {
                let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                let d2 = dx * dx + dy * dy;
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j as u32;
                }
            }
            up_edges.push((i as u32, best));
        }
        up_edges.sort_unstable();
        let mut down_edges: Vec<(u32, u32)> = up_edges.iter().map(|&(s, d)| (d, s)).collect();
        down_edges.sort_unstable();
        up.push(up_edges);
        down.push(down_edges);
    }
    Ok((up, down))
}

/// Directed grid-to-mesh edges: every grid node connects to all level-1 mesh
/// nodes strictly closer than 0.67 times the mesh spacing (the larger axis
/// spacing on stretched meshes). Returns the edges and the number of grid
/// nodes that ended up with no edge (permitted; reported in stats).
pub fn build_grid2mesh(grid: &GridSpec, level1: &MeshLevel) -> Result<(Vec<(u32, u32)>, usize)> {
    let radius = 0.67 * level1.spacing[0].max(level1.spacing[1]);
    let r2 = radius * radius;
    let o = level1.origin();
    let (dx, dy) = (level1.spacing[0], level1.spacing[1]);
    let mut edges = Vec::new();
    let mut isolated = 0usize;
    for j in 0..grid.height {
        let y = j as f64;
        let qlo = (((y - radius - o[1]) / dy).floor() as i64 - 1).max(0);
        let qhi = (((y + radius - o[1]) / dy).ceil() as i64 + 1).min(level1.ny as i64 - 1);
        for i in 0..grid.width {
            let x = i as f64;
            let plo = (((x - radius - o[0]) / dx).floor() as i64 - 1).max(0);
            let phi = (((x + radius - o[0]) / dx).ceil() as i64 + 1).min(level1.nx as i64 - 1);
            let gid = grid.node_index(i, j) as u32;
            let before = edges.len();
            for q in qlo..=qhi {
                for p in plo..=phi {
                    let m = level1.node_index(p as usize, q as usize);
                    let c = level1.coords[m];
                    let (ddx, ddy) = (x - c[0], y - c[1]);
                    if ddx * ddx + ddy * ddy < r2 {
                        edges.push((gid, m as u32));
                    }
                }
            }
            if edges.len() == before {
                isolated += 1;
            }
        }
    }
    edges.sort_unstable();
    Ok((edges, isolated))
}

/// Directed mesh-to-grid edges: the 4 closest level-1 mesh nodes per grid
/// node, k-NN ties broken by lowest mesh node index.
pub fn build_mesh2grid(grid: &GridSpec, level1: &MeshLevel) -> Result<Vec<(u32, u32)>> {
    if level1.n_nodes() < 4 {
        return Err(LamError::config(format!(
            "mesh2grid needs >= 4 mesh nodes, level has {}",
            level1.n_nodes()
        )));
    }
    let o = level1.origin();
    let (dx, dy) = (level1.spacing[0], level1.spacing[1]);
    let mut edges = Vec::with_capacity(4 * grid.n_nodes());
    let mut cands: Vec<(f64, u32)> = Vec::with_capacity(64);
    for j in 0..grid.height {
        let y = j as f64;
        let qc = ((y - o[1]) / dy).round() as i64;
        let qlo = (qc - 3).clamp(0, level1.ny as i64 - 1);
        let qhi = (qc + 3).clamp(0, level1.ny as i64 - 1);
        for i in 0..grid.width {
            let x = i as f64;
            let pc = ((x - o[0]) / dx).round() as i64;
            let plo = (pc - 3).clamp(0, level1.nx as i64 - 1);
            let phi = (pc + 3).clamp(0, level1.nx as i64 - 1);
            cands.clear();
            for q in qlo..=qhi {
                for p in plo..=phi {
                    let m = level1.node_index(p as usize, q as usize);
                    let c = level1.coords[m];
                    let (ddx, ddy) = (x - c[0], y - c[1]);
                    cands.push((ddx * ddx + ddy * ddy, m as u32));
                }
            }
            debug_assert!(cands.len() >= 4);
            cands.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            let gid = grid.node_index(i, j) as u32;
            for &(_, m) in cands.iter().take(4) {
                edges.push((m, gid));
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Longest raw edge length over a collection of edge lists.
pub fn max_edge_length(
    sets: &[(&[(u32, u32)], &[[f64; 2]], &[[f64; 2]])],
) -> f64 {
    let mut max_len = 0.0f64;
    for (pairs, src_coords, dst_coords) in sets {
        for &(s, d) in pairs.iter() {
            let a = src_coords[s as usize];
            let b = dst_coords[d as usize];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            max_len = max_len.max((dx * dx + dy * dy).sqrt());
        }
    }
    max_len
}

/// Per-edge features (|d|, dx, dy) with d = target - source, all divided by
/// `norm_len` (the longest edge in the graph variant).
pub fn compute_edge_features(
    pairs: &[(u32, u32)],
    src_coords: &[[f64; 2]],
    dst_coords: &[[f64; 2]],
    norm_len: f64,
) -> Vec<[f64; 3]> {
    pairs
        .iter()
        .map(|&(s, d)| {
            let a = src_coords[s as usize];
            let b = dst_coords[d as usize];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            [len / norm_len, dx / norm_len, dy / norm_len]
        })
        .collect()
}

/// Per-node grid features: (x/max, y/max, topography, boundary indicator),
/// coordinates normalized by the maximum coordinate value.
pub fn grid_static_features(grid: &GridSpec, topography: &[f64]) -> Result<Vec<[f64; 4]>> {
    if topography.len() != grid.n_nodes() {
        return Err(LamError::dim(format!(
            "topography has {} values for {} grid nodes",
            topography.len(),
            grid.n_nodes()
        )));
    }
    let max_coord = ((grid.width - 1).max(grid.height - 1)) as f64;
    let mut out = Vec::with_capacity(grid.n_nodes());
    for j in 0..grid.height {
        for i in 0..grid.width {
            let id = grid.node_index(i, j);
            out.push([
                i as f64 / max_coord,
                j as f64 / max_coord,
                topography[id],
                if grid.in_boundary(i, j) { 1.0 } else { 0.0 },
            ]);
        }
    }
    Ok(out)
}

/// Node coordinates and static features (normalized coordinates) of one mesh
/// level inside a [`LamGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeshNodes {
    pub nx: usize,
    pub ny: usize,
    pub coords: Vec<[f64; 2]>,
    pub feats: Vec<[f64; 2]>,
}

/// The full graph for one model variant: grid, mesh levels, and every edge
/// set with static features.
#[derive(Debug, Clone, PartialEq)]
pub struct LamGraph {
    pub variant: Variant,
    pub grid: GridSpec,
    pub n1: usize,
    pub grid_coords: Vec<[f64; 2]>,
    pub grid_static: Vec<[f64; 4]>,
    pub boundary: Vec<u32>,
    pub interior: Vec<u32>,
    /// Multi-scale and single-level variants hold one entry (the merged /
    /// only mesh); the hierarchical variant holds one per level.
    pub levels: Vec<MeshNodes>,
    /// Intra-level edge sets, parallel to `levels` (one merged set for the
    /// multi-scale variant).
    pub intra: Vec<EdgeSet>,
    pub up: Vec<EdgeSet>,
    pub down: Vec<EdgeSet>,
    pub g2m: EdgeSet,
    pub m2g: EdgeSet,
    pub max_edge_len: f64,
    /// Merged node index of each upper-level node (multi-scale only).
    pub upper_node_map: Vec<Vec<u32>>,
    pub g2m_isolated_grid_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStats {
    pub mesh_nodes: usize,
    pub mesh_edges: usize,
    pub g2m_edges: usize,
    pub m2g_edges: usize,
    pub g2m_isolated_grid_nodes: usize,
}

impl LamGraph {
    pub fn mesh_node_count(&self) -> usize {
        self.levels.iter().map(|l| l.coords.len()).sum()
    }

    /// All mesh-graph edges: intra-level plus inter-level up/down.
    pub fn mesh_edge_count(&self) -> usize {
        self.intra.iter().map(EdgeSet::len).sum::<usize>()
            + self.up.iter().map(EdgeSet::len).sum::<usize>()
            + self.down.iter().map(EdgeSet::len).sum::<usize>()
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            mesh_nodes: self.mesh_node_count(),
            mesh_edges: self.mesh_edge_count(),
            g2m_edges: self.g2m.len(),
            m2g_edges: self.m2g.len(),
            g2m_isolated_grid_nodes: self.g2m_isolated_grid_nodes,
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_grid_nodes(&self) -> usize {
        self.grid.n_nodes()
    }
}

fn mesh_static_feats(coords: &[[f64; 2]], max_coord: f64) -> Vec<[f64; 2]> {
    coords
        .iter()
        .map(|c| [c[0] / max_coord, c[1] / max_coord])
        .collect()
}

/// Build the complete graph for a variant. `topography` supplies the static
/// surface field per grid node (all zeros is fine when only the structure
/// matters).
pub fn build_lam_graph(
    grid: &GridSpec,
    n1: usize,
    n_levels: usize,
    variant: Variant,
    topography: &[f64],
) -> Result<LamGraph> {
    let levels_needed = match variant {
        Variant::SingleLevel => 1,
        _ => n_levels,
    };
    if variant == Variant::Hierarchical && n_levels < 2 {
        return Err(LamError::config(
            "hierarchical variant needs at least 2 levels",
        ));
    }
    let mesh_levels = grid_mesh_levels(grid, n1, levels_needed)?;
    let max_coord = ((grid.width - 1).max(grid.height - 1)) as f64;
    let grid_coords = grid.coords();

    // variant-specific mesh node sets and intra edges (pairs only for now)
    let (level_nodes, intra_pairs, up_pairs, down_pairs, upper_node_map) = match variant {
        Variant::SingleLevel => {
            let l = &mesh_levels[0];
            (
                vec![(l.nx, l.ny, l.coords.clone())],
                vec![l.edges.clone()],
                Vec::new(),
                Vec::new(),
                Vec::new(),
            )
        }
        Variant::MultiScale => {
            let merged = build_multiscale(&mesh_levels)?;
            (
                vec![(merged.nx, merged.ny, merged.coords)],
                vec![merged.edges],
                Vec::new(),
                Vec::new(),
                merged.upper_node_map,
            )
        }
        Variant::Hierarchical => {
            let (up, down) = build_hierarchy(&mesh_levels)?;
            (
                mesh_levels
                    .iter()
                    .map(|l| (l.nx, l.ny, l.coords.clone()))
                    .collect(),
                mesh_levels.iter().map(|l| l.edges.clone()).collect(),
                up,
                down,
                Vec::new(),
            )
        }
    };

    let (g2m_pairs, isolated) = build_grid2mesh(grid, &mesh_levels[0])?;
    let m2g_pairs = build_mesh2grid(grid, &mesh_levels[0])?;

    // global feature normalizer: the longest edge across every set
    let level_coords: Vec<&Vec<[f64; 2]>> = level_nodes.iter().map(|(_, _, c)| c).collect();
    let mut max_sets: Vec<(&[(u32, u32)], &[[f64; 2]], &[[f64; 2]])> = Vec::new();
    for (l, pairs) in intra_pairs.iter().enumerate() {
        max_sets.push((pairs, level_coords[l], level_coords[l]));
    }
    for (l, pairs) in up_pairs.iter().enumerate() {
        max_sets.push((pairs, level_coords[l], level_coords[l + 1]));
    }
    for (l, pairs) in down_pairs.iter().enumerate() {
        max_sets.push((pairs, level_coords[l + 1], level_coords[l]));
    }
    max_sets.push((&g2m_pairs, &grid_coords, level_coords[0]));
    max_sets.push((&m2g_pairs, level_coords[0], &grid_coords));
    let max_edge_len = max_edge_length(&max_sets);
    if max_edge_len <= 0.0 {
        return Err(LamError::config("graph has no edges of positive length"));
    }

    let intra: Vec<EdgeSet> = intra_pairs
        .into_iter()
        .enumerate()
        .map(|(l, pairs)| {
            let feats = compute_edge_features(&pairs, level_coords[l], level_coords[l], max_edge_len);
            EdgeSet { pairs, feats }
        })
        .collect();
    let up: Vec<EdgeSet> = up_pairs
        .into_iter()
        .enumerate()
        .map(|(l, pairs)| {
            let feats =
                compute_edge_features(&pairs, level_coords[l], level_coords[l + 1], max_edge_len);
            EdgeSet { pairs, feats }
        })
        .collect();
    let down: Vec<EdgeSet> = down_pairs
        .into_iter()
        .enumerate()
        .map(|(l, pairs)| {
            let feats =
                compute_edge_features(&pairs, level_coords[l + 1], level_coords[l], max_edge_len);
            EdgeSet { pairs, feats }
        })
        .collect();
    let g2m = EdgeSet {
        feats: compute_edge_features(&g2m_pairs, &grid_coords, level_coords[0], max_edge_len),
        pairs: g2m_pairs,
    };
    let m2g = EdgeSet {
        feats: compute_edge_features(&m2g_pairs, level_coords[0], &grid_coords, max_edge_len),
        pairs: m2g_pairs,
    };

    let levels: Vec<MeshNodes> = level_nodes
        .into_iter()
        .map(|(nx, ny, coords)| {
            let feats = mesh_static_feats(&coords, max_coord);
            MeshNodes {
                nx,
                ny,
                coords,
                feats,
            }
        })
        .collect();

    Ok(LamGraph {
        variant,
        grid: *grid,
        n1,
        grid_static: grid_static_features(grid, topography)?,
        boundary: grid.boundary_nodes(),
        interior: grid.interior_nodes(),
        grid_coords,
        levels,
        intra,
        up,
        down,
        g2m,
        m2g,
        max_edge_len,
        upper_node_map,
        g2m_isolated_grid_nodes: isolated,
    })
}

/// In-degree of every node under a directed edge list.
pub fn in_degrees(n_nodes: usize, edges: &[(u32, u32)]) -> Vec<u32> {
    let mut deg = vec![0u32; n_nodes];
    for &(_, d) in edges {
        deg[d as usize] += 1;
    }
    deg
}

// ── serialization ───────────────────────────────────────────────────────

fn pairs_to_u64(pairs: &[(u32, u32)]) -> Vec<u64> {
    pairs
        .iter()
        .flat_map(|&(s, d)| [s as u64, d as u64])
        .collect()
}

fn u64_to_pairs(data: &[u64]) -> Result<Vec<(u32, u32)>> {
    if data.len() % 2 != 0 {
        return Err(LamError::Corrupt("odd edge array length".into()));
    }
    data.chunks_exact(2)
        .map(|c| {
            if c[0] > u32::MAX as u64 || c[1] > u32::MAX as u64 {
                return Err(LamError::Corrupt("edge index exceeds u32".into()));
            }
            Ok((c[0] as u32, c[1] as u32))
        })
        .collect()
}

fn coords_to_f64(coords: &[[f64; 2]]) -> Vec<f64> {
    coords.iter().flat_map(|c| [c[0], c[1]]).collect()
}

fn f64_to_coords(data: &[f64]) -> Vec<[f64; 2]> {
    data.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

fn add_edge_set(c: &mut Container, name: &str, set: &EdgeSet) -> Result<()> {
    c.add_u64(
        &format!("{name}/pairs"),
        vec![set.pairs.len(), 2],
        pairs_to_u64(&set.pairs),
    )?;
    c.add_f64(
        &format!("{name}/feats"),
        vec![set.feats.len(), 3],
        set.feats.iter().flatten().copied().collect(),
    )
}

fn read_edge_set(c: &Container, name: &str) -> Result<EdgeSet> {
    let (_, pairs_raw) = c.get_u64(&format!("{name}/pairs"))?;
    let (_, feats_raw) = c.get_f64(&format!("{name}/feats"))?;
    let pairs = u64_to_pairs(pairs_raw)?;
    if feats_raw.len() != pairs.len() * 3 {
        return Err(LamError::Corrupt(format!(
            "edge set '{name}': {} features for {} edges",
            feats_raw.len(),
            pairs.len()
        )));
    }
    let feats = feats_raw
        .chunks_exact(3)
        .map(|f| [f[0], f[1], f[2]])
        .collect();
    Ok(EdgeSet { pairs, feats })
}

pub fn serialize_graph(graph: &LamGraph, path: &Path) -> Result<()> {
    let mut c = Container::new("lamgraph");
    c.set_meta("variant", graph.variant);
    c.set_meta("width", graph.grid.width);
    c.set_meta("height", graph.grid.height);
    c.set_meta("boundary_width", graph.grid.boundary_width);
    c.set_meta("n1", graph.n1);
    c.set_meta("n_levels", graph.levels.len());
    c.set_meta("max_edge_len", format!("{:e}", graph.max_edge_len));
    c.set_meta("g2m_isolated", graph.g2m_isolated_grid_nodes);

    c.add_f64(
        "grid/coords",
        vec![graph.grid_coords.len(), 2],
        coords_to_f64(&graph.grid_coords),
    )?;
    c.add_f64(
        "grid/static",
        vec![graph.grid_static.len(), 4],
        graph.grid_static.iter().flatten().copied().collect(),
    )?;
    for (l, level) in graph.levels.iter().enumerate() {
        c.set_meta(&format!("level{l}_nx"), level.nx);
        c.set_meta(&format!("level{l}_ny"), level.ny);
        c.add_f64(
            &format!("mesh/{l}/coords"),
            vec![level.coords.len(), 2],
            coords_to_f64(&level.coords),
        )?;
        c.add_f64(
            &format!("mesh/{l}/static"),
            vec![level.feats.len(), 2],
            level.feats.iter().flatten().copied().collect(),
        )?;
    }
    for (l, set) in graph.intra.iter().enumerate() {
        add_edge_set(&mut c, &format!("edges/intra/{l}"), set)?;
    }
    for (l, set) in graph.up.iter().enumerate() {
        add_edge_set(&mut c, &format!("edges/up/{l}"), set)?;
    }
    for (l, set) in graph.down.iter().enumerate() {
        add_edge_set(&mut c, &format!("edges/down/{l}"), set)?;
    }
    add_edge_set(&mut c, "edges/g2m", &graph.g2m)?;
    add_edge_set(&mut c, "edges/m2g", &graph.m2g)?;
    for (i, map) in graph.upper_node_map.iter().enumerate() {
        c.add_u64(
            &format!("mesh/upper_map/{i}"),
            vec![map.len()],
            map.iter().map(|&v| v as u64).collect(),
        )?;
    }
    c.write_to(path)
}

pub fn load_graph(path: &Path) -> Result<LamGraph> {
    let c = Container::read_from(path)?;
    if c.kind != "lamgraph" {
        return Err(LamError::Corrupt(format!(
            "expected a graph file, found kind '{}'",
            c.kind
        )));
    }
    let variant: Variant = c.meta_str("variant")?.parse()?;
    let grid = GridSpec::new(
        c.meta_parse("width")?,
        c.meta_parse("height")?,
        c.meta_parse("boundary_width")?,
    )?;
    let n_levels: usize = c.meta_parse("n_levels")?;
    let n1: usize = c.meta_parse("n1")?;
    let max_edge_len: f64 = c.meta_parse("max_edge_len")?;
    let isolated: usize = c.meta_parse("g2m_isolated")?;

    let (_, gc) = c.get_f64("grid/coords")?;
    let grid_coords = f64_to_coords(gc);
    let (_, gs) = c.get_f64("grid/static")?;
    let grid_static: Vec<[f64; 4]> = gs
        .chunks_exact(4)
        .map(|f| [f[0], f[1], f[2], f[3]])
        .collect();
    if grid_coords.len() != grid.n_nodes() || grid_static.len() != grid.n_nodes() {
        return Err(LamError::Corrupt("grid arrays do not match grid size".into()));
    }

    let mut levels = Vec::with_capacity(n_levels);
    let mut intra = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let nx: usize = c.meta_parse(&format!("level{l}_nx"))?;
        let ny: usize = c.meta_parse(&format!("level{l}_ny"))?;
        let (_, coords_raw) = c.get_f64(&format!("mesh/{l}/coords"))?;
        let (_, feats_raw) = c.get_f64(&format!("mesh/{l}/static"))?;
        levels.push(MeshNodes {
            nx,
            ny,
            coords: f64_to_coords(coords_raw),
            feats: feats_raw.chunks_exact(2).map(|f| [f[0], f[1]]).collect(),
        });
        intra.push(read_edge_set(&c, &format!("edges/intra/{l}"))?);
    }
    let n_inter = if variant == Variant::Hierarchical {
        n_levels - 1
    } else {
        0
    };
    let mut up = Vec::with_capacity(n_inter);
    let mut down = Vec::with_capacity(n_inter);
    for l in 0..n_inter {
        up.push(read_edge_set(&c, &format!("edges/up/{l}"))?);
        down.push(read_edge_set(&c, &format!("edges/down/{l}"))?);
    }
    let mut upper_node_map = Vec::new();
    let mut i = 0;
    while c.has(&format!("mesh/upper_map/{i}")) {
        let (_, raw) = c.get_u64(&format!("mesh/upper_map/{i}"))?;
        upper_node_map.push(raw.iter().map(|&v| v as u32).collect());
        i += 1;
    }

    Ok(LamGraph {
        variant,
        grid,
        n1,
        grid_coords,
        grid_static,
        boundary: grid.boundary_nodes(),
        interior: grid.interior_nodes(),
        levels,
        intra,
        up,
        down,
        g2m: read_edge_set(&c, "edges/g2m")?,
        m2g: read_edge_set(&c, "edges/m2g")?,
        max_edge_len,
        upper_node_map,
        g2m_isolated_grid_nodes: isolated,
    })
}
