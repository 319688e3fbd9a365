//! Linear triangle meshes with per-element region tags.
//!
//! A [`Mesh`] carries both the finite element space (nodes and triangles)
//! and the control partition: every element belongs to exactly one region,
//! and the controller sets one diffusivity per region.
//!
//! Boundary edges are the edges owned by a single element. An edge whose two
//! nodes both carry a prescribed value is an essential (Dirichlet) edge; every
//! other boundary edge is a flux edge.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("degenerate element {element}: area {area:e}")]
    Degenerate { element: usize, area: f64 },
    #[error("element index {0} out of range")]
    NoSuchElement(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryKind {
    /// Prescribed normal flux.
    Flux,
    /// Prescribed value.
    Essential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub a: usize,
    pub b: usize,
    pub kind: BoundaryKind,
}

/// Area and constant shape-function gradients of one linear triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementGeometry {
    pub area: f64,
    pub grads: [[f64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    region_of_element: Vec<usize>,
    n_regions: usize,
    boundary_edges: Vec<BoundaryEdge>,
    dirichlet: Vec<(usize, f64)>,
}

fn signed_double_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1])
}

fn max_edge_sq(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    d(p, q).max(d(q, r)).max(d(r, p))
}

// Relative to the longest edge, so the check is scale-free.
const DEGENERATE_TOL: f64 = 1e-12;

impl Mesh {
    /// Validates and completes a raw triangulation.
    ///
    /// Clockwise triangles are flipped to counter-clockwise. Region ids must
    /// cover `0..n_regions` without gaps.
    pub fn new(
        nodes: Vec<[f64; 2]>,
        mut elements: Vec<[usize; 3]>,
        region_of_element: Vec<usize>,
        mut dirichlet: Vec<(usize, f64)>,
    ) -> Result<Self, MeshError> {
        if elements.is_empty() {
            return Err(MeshError::Invalid("mesh has no elements".into()));
        }
        if region_of_element.len() != elements.len() {
            return Err(MeshError::Invalid(format!(
                "{} region tags for {} elements",
                region_of_element.len(),
                elements.len()
            )));
        }
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MeshError::Invalid("non-finite node coordinate".into()));
        }
        for (e, tri) in elements.iter_mut().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&n| n >= nodes.len()) {
                return Err(MeshError::Invalid(format!(
                    "element {e} references node {bad}, mesh has {} nodes",
                    nodes.len()
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Invalid(format!("element {e} repeats a node")));
            }
            let (p, q, r) = (nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            let a2 = signed_double_area(p, q, r);
            if a2.abs() <= DEGENERATE_TOL * max_edge_sq(p, q, r) {
                return Err(MeshError::Degenerate { element: e, area: 0.5 * a2 });
            }
            if a2 < 0.0 {
                tri.swap(1, 2);
            }
        }

        let n_regions = region_of_element.iter().max().map_or(0, |&m| m + 1);
        let mut seen = vec![false; n_regions];
        for &r in &region_of_element {
            seen[r] = true;
        }
        if let Some(gap) = seen.iter().position(|&s| !s) {
            return Err(MeshError::Invalid(format!("region {gap} has no elements")));
        }

        dirichlet.sort_by_key(|&(n, _)| n);
        for w in dirichlet.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MeshError::Invalid(format!("node {} prescribed twice", w[0].0)));
            }
        }
        if let Some(&(n, _)) = dirichlet.iter().find(|&&(n, _)| n >= nodes.len()) {
            return Err(MeshError::Invalid(format!("dirichlet node {n} out of range")));
        }
        if let Some(&(n, _)) = dirichlet.iter().find(|&&(_, v)| !v.is_finite()) {
            return Err(MeshError::Invalid(format!("dirichlet value at node {n} is not finite")));
        }

        let boundary_edges = extract_boundary(&elements, &dirichlet);
        Ok(Self { nodes, elements, region_of_element, n_regions, boundary_edges, dirichlet })
    }

    /// Axis-aligned rectangle `[0, width] x [0, height]` split into
    /// `nx * ny` cells, each cut along its lower-left to upper-right diagonal.
    /// Regions are a `patch_nx * patch_ny` grid of patches, numbered row by
    /// row from the lower-left corner.
    pub fn rectangle(
        width: f64,
        height: f64,
        nx: usize,
        ny: usize,
        patch_nx: usize,
        patch_ny: usize,
    ) -> Result<Self, MeshError> {
        if !(width > 0.0 && height > 0.0) {
            return Err(MeshError::Invalid("rectangle sides must be positive".into()));
        }
        if nx == 0 || ny == 0 || patch_nx == 0 || patch_ny == 0 {
            return Err(MeshError::Invalid("cell and patch counts must be at least 1".into()));
        }
        if nx % patch_nx != 0 || ny % patch_ny != 0 {
            return Err(MeshError::Invalid(format!(
                "patch grid {patch_nx}x{patch_ny} does not divide cell grid {nx}x{ny}"
            )));
        }
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([width * i as f64 / nx as f64, height * j as f64 / ny as f64]);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut elements = Vec::with_capacity(2 * nx * ny);
        let mut regions = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (p00, p10, p11, p01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                for tri in [[p00, p10, p11], [p00, p11, p01]] {
                    let c = centroid(&nodes, tri);
                    let px = ((c[0] / width * patch_nx as f64) as usize).min(patch_nx - 1);
                    let py = ((c[1] / height * patch_ny as f64) as usize).min(patch_ny - 1);
                    elements.push(tri);
                    regions.push(py * patch_nx + px);
                }
            }
        }
        Self::new(nodes, elements, regions, Vec::new())
    }

    /// Unit square with pure flux boundary.
    pub fn unit_square(nx: usize, ny: usize, patch_nx: usize, patch_ny: usize) -> Result<Self, MeshError> {
        Self::rectangle(1.0, 1.0, nx, ny, patch_nx, patch_ny)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn region_of_element(&self) -> &[usize] {
        &self.region_of_element
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Prescribed values, sorted by node id.
    pub fn dirichlet(&self) -> &[(usize, f64)] {
        &self.dirichlet
    }

    pub fn element_gradients(&self, e: usize) -> Result<ElementGeometry, MeshError> {
        let tri = self.elements.get(e).ok_or(MeshError::NoSuchElement(e))?;
        let [p0, p1, p2] = tri.map(|n| self.nodes[n]);
        let a2 = signed_double_area(p0, p1, p2);
        if a2 <= DEGENERATE_TOL * max_edge_sq(p0, p1, p2) {
            return Err(MeshError::Degenerate { element: e, area: 0.5 * a2 });
        }
        let inv = 1.0 / a2;
        Ok(ElementGeometry {
            area: 0.5 * a2,
            grads: [
                [(p1[1] - p2[1]) * inv, (p2[0] - p1[0]) * inv],
                [(p2[1] - p0[1]) * inv, (p0[0] - p2[0]) * inv],
                [(p0[1] - p1[1]) * inv, (p1[0] - p0[0]) * inv],
            ],
        })
    }

    /// Geometry of every element, in element order.
    pub fn geometries(&self) -> Vec<ElementGeometry> {
        // Validated at construction, so the unwrap cannot fire.
        (0..self.n_elements()).map(|e| self.element_gradients(e).unwrap()).collect()
    }

    pub fn area(&self) -> f64 {
        self.geometries().iter().map(|g| g.area).sum()
    }

    pub fn region_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.n_regions];
        for (g, &r) in self.geometries().iter().zip(&self.region_of_element) {
            areas[r] += g.area;
        }
        areas
    }

    /// Flags the nodes touched by at least one element of `region`.
    pub fn nodes_in_region(&self, region: usize) -> Vec<bool> {
        let mut flags = vec![false; self.n_nodes()];
        for (tri, &r) in self.elements.iter().zip(&self.region_of_element) {
            if r == region {
                for &n in tri {
                    flags[n] = true;
                }
            }
        }
        flags
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("mesh 2d tri\n");
        let _ = writeln!(out, "nodes {}", self.nodes.len());
        for [x, y] in &self.nodes {
            let _ = writeln!(out, "{x} {y}");
        }
        let _ = writeln!(out, "elements {}", self.elements.len());
        for ([a, b, c], r) in self.elements.iter().zip(&self.region_of_element) {
            let _ = writeln!(out, "{a} {b} {c} {r}");
        }
        if !self.dirichlet.is_empty() {
            let _ = writeln!(out, "dirichlet {}", self.dirichlet.len());
            for (n, v) in &self.dirichlet {
                let _ = writeln!(out, "{n} {v}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| MeshError::Parse {
                line: text.lines().count() + 1,
                msg: format!("unexpected end of file, expected {what}"),
            })
        };

        let (ln, header) = next("header")?;
        if header.split_whitespace().collect::<Vec<_>>() != ["mesh", "2d", "tri"] {
            return Err(MeshError::Parse { line: ln, msg: format!("expected `mesh 2d tri`, found `{header}`") });
        }

        let n_nodes = section_count(next("nodes section")?, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (ln, l) = next("node coordinates")?;
            let v: [f64; 2] = fields(ln, l)?;
            nodes.push(v);
        }

        let n_el = section_count(next("elements section")?, "elements")?;
        let mut elements = Vec::with_capacity(n_el);
        let mut regions = Vec::with_capacity(n_el);
        let mut element_lines = Vec::with_capacity(n_el);
        for _ in 0..n_el {
            let (ln, l) = next("element")?;
            let [a, b, c, r]: [usize; 4] = fields(ln, l)?;
            if let Some(bad) = [a, b, c].into_iter().find(|&n| n >= n_nodes) {
                return Err(MeshError::Parse {
                    line: ln,
                    msg: format!("node index {bad} out of range (mesh has {n_nodes} nodes)"),
                });
            }
            let (p, q, s) = (nodes[a], nodes[b], nodes[c]);
            let a2 = signed_double_area(p, q, s);
            if a2.abs() <= DEGENERATE_TOL * max_edge_sq(p, q, s) {
                return Err(MeshError::Parse { line: ln, msg: "zero-area element".into() });
            }
            elements.push([a, b, c]);
            regions.push(r);
            element_lines.push(ln);
        }

        let mut dirichlet = Vec::new();
        if let Ok(section) = next("") {
            let k = section_count(section, "dirichlet")?;
            for _ in 0..k {
                let (ln, l) = next("dirichlet entry")?;
                let mut parts = l.split_whitespace();
                let (Some(n), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(MeshError::Parse { line: ln, msg: "expected `node value`".into() });
                };
                let n: usize = n.parse().map_err(|e| MeshError::Parse { line: ln, msg: format!("{e}") })?;
                let v: f64 = v.parse().map_err(|e| MeshError::Parse { line: ln, msg: format!("{e}") })?;
                if n >= n_nodes {
                    return Err(MeshError::Parse { line: ln, msg: format!("node index {n} out of range") });
                }
                dirichlet.push((n, v));
            }
            if let Ok((ln, l)) = next("") {
                return Err(MeshError::Parse { line: ln, msg: format!("trailing content `{l}`") });
            }
        }

        Self::new(nodes, elements, regions, dirichlet)
    }
}

fn centroid(nodes: &[[f64; 2]], tri: [usize; 3]) -> [f64; 2] {
    let [a, b, c] = tri.map(|n| nodes[n]);
    [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
}

fn section_count((ln, l): (usize, &str), keyword: &str) -> Result<usize, MeshError> {
    let mut parts = l.split_whitespace();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(n), None) if k == keyword => n
            .parse()
            .map_err(|e| MeshError::Parse { line: ln, msg: format!("bad {keyword} count `{n}`: {e}") }),
        _ => Err(MeshError::Parse { line: ln, msg: format!("expected `{keyword} <count>`, found `{l}`") }),
    }
}

fn fields<T: std::str::FromStr + Copy + Default, const N: usize>(ln: usize, l: &str) -> Result<[T; N], MeshError>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = l.split_whitespace().collect();
    if parts.len() != N {
        return Err(MeshError::Parse { line: ln, msg: format!("expected {N} fields, found {}", parts.len()) });
    }
    let mut out = [T::default(); N];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|e| MeshError::Parse { line: ln, msg: format!("bad field `{p}`: {e}") })?;
    }
    Ok(out)
}

fn extract_boundary(elements: &[[usize; 3]], dirichlet: &[(usize, f64)]) -> Vec<BoundaryEdge> {
    let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for &[a, b, c] in elements {
        for (p, q) in [(a, b), (b, c), (c, a)] {
            *count.entry(key(p, q)).or_default() += 1;
        }
    }
    let prescribed = |n: usize| dirichlet.binary_search_by_key(&n, |&(m, _)| m).is_ok();
    let mut edges = Vec::new();
    for &[a, b, c] in elements {
        for (p, q) in [(a, b), (b, c), (c, a)] {
            if count[&key(p, q)] == 1 {
                let kind = if prescribed(p) && prescribed(q) { BoundaryKind::Essential } else { BoundaryKind::Flux };
                edges.push(BoundaryEdge { a: p, b: q, kind });
            }
        }
    }
    edges
}
