//! Iso-surface extraction from the fused distance, vertex decoration and PLY export.
//!
//! Cells are triangulated by tracing the iso-contour around each of the six cube
//! faces and chaining the face segments into closed loops. Faces with four crossings
//! are disambiguated with the asymptotic decider, so neighbouring cells always agree
//! on shared faces and meshes of closed observed surfaces are watertight. Triangles
//! wind so that normals point away from the solid side (`d > iso`), i.e. towards
//! free space.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{FusedField, NO_RETURN};
use crate::geometry::{back_project, PixelCoord};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("iso level {iso} outside the truncation band (-{mu}, {mu})")]
    InvalidIso { iso: f64, mu: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY: {0}")]
    Ply(String),
}

/// Regular lattice of `dims` cells of edge `cell` starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vector3<f64>,
    pub cell: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vector3<f64>, cell: f64, dims: [usize; 3]) -> Result<Self, MeshError> {
        let grid = Self { origin, cell, dims };
        grid.validate()?;
        Ok(grid)
    }

    /// Smallest grid with spacing `cell` covering the box `[min, max]`.
    pub fn covering(min: Vector3<f64>, max: Vector3<f64>, cell: f64) -> Result<Self, MeshError> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(MeshError::InvalidGrid(format!("cell must be positive, got {cell}")));
        }
        let mut dims = [0; 3];
        for a in 0..3 {
            let extent = max[a] - min[a];
            if !(extent >= 0.0 && extent.is_finite()) {
                return Err(MeshError::InvalidGrid(format!("empty bounds on axis {a}")));
            }
            dims[a] = ((extent / cell).ceil() as usize).max(2);
        }
        Self::new(min, cell, dims)
    }

    /// Bounding box of all back-projected depth returns, padded by `pad`.
    pub fn observed_bounds(field: &FusedField, pad: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for view in field.views() {
            for y in 0..view.depth.height() {
                for x in 0..view.depth.width() {
                    let z = view.depth.texel(x, y)[0];
                    if z == NO_RETURN {
                        continue;
                    }
                    let p = back_project(
                        PixelCoord::new(x as f64, y as f64),
                        z as f64,
                        &view.pose,
                        &view.intrinsics,
                    );
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
        lo.x.is_finite()
            .then(|| (lo - Vector3::repeat(pad), hi + Vector3::repeat(pad)))
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.cell > 0.0 && self.cell.is_finite()) {
            return Err(MeshError::InvalidGrid(format!(
                "cell must be positive, got {}",
                self.cell
            )));
        }
        if self.dims.iter().any(|&n| n < 2) {
            return Err(MeshError::InvalidGrid(format!(
                "dims {:?} must be at least 2 per axis",
                self.dims
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(MeshError::InvalidGrid("origin is not finite".into()));
        }
        Ok(())
    }

    /// Lattice points per axis (`dims + 1`).
    pub fn points(&self) -> [usize; 3] {
        [self.dims[0] + 1, self.dims[1] + 1, self.dims[2] + 1]
    }

    pub fn point_count(&self) -> usize {
        let [a, b, c] = self.points();
        a * b * c
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.cell
    }

    /// Linear lattice index, x fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [px, py, _] = self.points();
        i + px * (j + py * k)
    }

    /// All lattice points in index order.
    pub fn lattice(&self) -> Vec<Vector3<f64>> {
        let [px, py, pz] = self.points();
        let mut out = Vec::with_capacity(px * py * pz);
        for k in 0..pz {
            for j in 0..py {
                for i in 0..px {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Plain indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of triangles bordering each undirected edge.
    pub fn edge_valence(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_valence().values().all(|&n| n == 2)
    }

    /// Unnormalised face normal (twice the area).
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    /// Area-weighted vertex normals, normalised.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.face_normal(t);
            for &i in tri {
                normals[i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }
}

/// Mesh with per-vertex descriptor, instance label and colour.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecoratedMesh {
    pub mesh: TriangleMesh,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub colors: Vec<[u8; 3]>,
}

impl DecoratedMesh {
    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.mesh.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.mesh.triangles
    }

    /// Replaces the mask colours with PCA colours of the vertex descriptors.
    pub fn with_pca_colors(mut self) -> Self {
        self.colors = pca_colorize(&self.features)
            .into_iter()
            .map(unit_to_rgb)
            .collect();
        self
    }
}

const PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
];

pub const BACKGROUND_COLOR: [u8; 3] = [128, 128, 128];

/// Categorical colour for an instance id; the palette cycles from id 1.
pub fn instance_color(id: u8) -> [u8; 3] {
    if id == 0 {
        BACKGROUND_COLOR
    } else {
        PALETTE[(id as usize - 1) % PALETTE.len()]
    }
}

pub fn unit_to_rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Samples `d` on every lattice point; unobserved points are NaN.
pub fn sample_grid(field: &FusedField, grid: &GridSpec) -> Vec<f64> {
    let [px, py, _] = grid.points();
    let mut values = vec![f64::NAN; grid.point_count()];
    values
        .par_chunks_mut(px * py)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..py {
                for i in 0..px {
                    if let Some(d) = field.signed_distance(&grid.point(i, j, k)) {
                        slab[i + px * j] = d;
                    }
                }
            }
        });
    values
}

/// Triangulates the level set `d = iso`.
pub fn extract_surface(field: &FusedField, grid: &GridSpec, iso: f64) -> Result<TriangleMesh, MeshError> {
    grid.validate()?;
    let mu = field.mu();
    if !(iso > -mu && iso < mu) {
        return Err(MeshError::InvalidIso { iso, mu });
    }
    let values = sample_grid(field, grid);
    Ok(triangulate(grid, &values, iso))
}

/// Iso-surface of the fused distance with every vertex decorated from the field.
pub fn extract_mesh(field: &FusedField, grid: &GridSpec, iso: f64) -> Result<DecoratedMesh, MeshError> {
    Ok(decorate(extract_surface(field, grid, iso)?, field))
}

pub fn decorate(mesh: TriangleMesh, field: &FusedField) -> DecoratedMesh {
    let values = field.evaluate_batch(&mesh.vertices);
    let labels: Vec<u8> = values.iter().map(|v| v.instance()).collect();
    let colors = labels.iter().map(|&l| instance_color(l)).collect();
    let features = values.into_iter().map(|v| v.f).collect();
    DecoratedMesh {
        mesh,
        features,
        labels,
        colors,
    }
}

fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

fn corner_of(o: [usize; 3]) -> usize {
    o[0] | (o[1] << 1) | (o[2] << 2)
}

/// Cyclic corner order of each face, counter-clockwise seen from outside the cell.
fn face_corners() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        for side in 0..2 {
            let order: [(usize, usize); 4] = if side == 1 {
                [(0, 0), (1, 0), (1, 1), (0, 1)]
            } else {
                [(0, 0), (0, 1), (1, 1), (1, 0)]
            };
            for (n, (ob, oc)) in order.into_iter().enumerate() {
                let mut o = [0; 3];
                o[a] = side;
                o[b] = ob;
                o[c] = oc;
                faces[2 * a + side][n] = corner_of(o);
            }
        }
    }
    faces
}

/// Triangulates pre-sampled lattice values (`NaN` = unobserved).
pub fn triangulate(grid: &GridSpec, values: &[f64], iso: f64) -> TriangleMesh {
    let faces = face_corners();
    let [px, py, pz] = grid.points();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of: HashMap<(usize, u8), u32> = HashMap::new();
    let mut next_of = [usize::MAX; 8 * 8];
    let mut starts = Vec::with_capacity(12);

    for k in 0..pz - 1 {
        for j in 0..py - 1 {
            for i in 0..px - 1 {
                let mut v = [0.0; 8];
                let mut solid = 0u8;
                let mut observed = true;
                for (c, value) in v.iter_mut().enumerate() {
                    let [oi, oj, ok] = corner_offset(c);
                    *value = values[grid.index(i + oi, j + oj, k + ok)];
                    if value.is_nan() {
                        observed = false;
                        break;
                    }
                    if *value > iso {
                        solid |= 1 << c;
                    }
                }
                if !observed || solid == 0 || solid == 0xff {
                    continue;
                }
                let is_solid = |c: usize| solid & (1 << c) != 0;

                // Directed corner-pair edges: segment enters at `from` and leaves at `to`.
                next_of.fill(usize::MAX);
                starts.clear();
                for face in &faces {
                    let f = face.map(|c| v[c]);
                    let crossing: Vec<(usize, bool)> = (0..4)
                        .filter(|&n| is_solid(face[n]) != is_solid(face[(n + 1) % 4]))
                        .map(|n| (n, !is_solid(face[n])))
                        .collect();
                    let edge = |n: usize| {
                        let (a, b) = (face[n], face[(n + 1) % 4]);
                        a.min(b) * 8 + a.max(b)
                    };
                    let mut link = |e: usize, x: usize| {
                        next_of[edge(e)] = edge(x);
                        starts.push(edge(e));
                    };
                    match crossing.len() {
                        0 => {}
                        2 => {
                            let (e, x) = if crossing[0].1 {
                                (crossing[0].0, crossing[1].0)
                            } else {
                                (crossing[1].0, crossing[0].0)
                            };
                            link(e, x);
                        }
                        4 => {
                            let saddle =
                                (f[0] * f[2] - f[1] * f[3]) / (f[0] + f[2] - f[1] - f[3]);
                            let connect_solid = saddle > iso;
                            for m in 0..4 {
                                let (n, entering) = crossing[m];
                                if entering {
                                    let x = if connect_solid {
                                        crossing[(m + 3) % 4].0
                                    } else {
                                        crossing[(m + 1) % 4].0
                                    };
                                    link(n, x);
                                }
                            }
                        }
                        _ => unreachable!("a face has an even number of crossings"),
                    }
                }

                let mut vertex = |key: usize| -> u32 {
                    let (a, b) = (key / 8, key % 8);
                    let axis = (a ^ b).trailing_zeros() as u8;
                    let [oi, oj, ok] = corner_offset(a);
                    let lower = grid.index(i + oi, j + oj, k + ok);
                    *vertex_of.entry((lower, axis)).or_insert_with(|| {
                        let pa = grid.point(i + oi, j + oj, k + ok);
                        let [bi, bj, bk] = corner_offset(b);
                        let pb = grid.point(i + bi, j + bj, k + bk);
                        let t = (iso - v[a]) / (v[b] - v[a]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for &start in &starts {
                    if next_of[start] == usize::MAX {
                        continue;
                    }
                    let mut ring = Vec::with_capacity(12);
                    let mut e = start;
                    while next_of[e] != usize::MAX {
                        ring.push(vertex(e));
                        let n = next_of[e];
                        next_of[e] = usize::MAX;
                        e = n;
                    }
                    for w in 1..ring.len().saturating_sub(1) {
                        mesh.triangles.push([ring[0], ring[w], ring[w + 1]]);
                    }
                }
            }
        }
    }
    mesh
}

/// Projects descriptors onto their top three principal components and min-max
/// normalises each channel to `[0, 1]`. Missing or constant channels are 0.5.
pub fn pca_colorize(features: &[Vec<f64>]) -> Vec<[f64; 3]> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| features[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i]);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);

    let mut colors = vec![[0.5; 3]; n];
    for (ch, &idx) in order.iter().take(3).enumerate() {
        if !(eig.eigenvalues[idx] > tol) {
            break;
        }
        let mut axis = eig.eigenvectors.column(idx).into_owned();
        let pivot = axis.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs()));
        if pivot.is_some_and(|p| p < 0.0) {
            axis = -axis;
        }
        let proj = &centered * axis;
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi > lo {
            for (c, p) in colors.iter_mut().zip(proj.iter()) {
                c[ch] = (p - lo) / (hi - lo);
            }
        }
    }
    colors
}

/// Binary little-endian PLY: double x,y,z, uchar red,green,blue, `list uchar int` faces.
pub fn encode_ply(mesh: &DecoratedMesh) -> Vec<u8> {
    let verts = mesh.vertices();
    let tris = mesh.triangles();
    let header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment d3fields mesh\n\
         element vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        verts.len(),
        tris.len()
    );
    let mut out = Vec::with_capacity(header.len() + verts.len() * 27 + tris.len() * 13);
    out.extend_from_slice(header.as_bytes());
    for (i, v) in verts.iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&mesh.colors.get(i).copied().unwrap_or(BACKGROUND_COLOR));
    }
    for t in tris {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

pub fn export_ply(mesh: &DecoratedMesh, path: &Path) -> Result<(), MeshError> {
    let io = |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&encode_ply(mesh)).map_err(io)
}

/// Geometry and colours read back from a PLY file written by [`encode_ply`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyElement {
    pub name: String,
    pub count: usize,
    /// `(type, name)`; list properties are typed `list <count> <item>`.
    pub properties: Vec<(String, String)>,
}

/// Parsed PLY header and the byte offset of the body.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyHeader {
    pub format: String,
    pub elements: Vec<PlyElement>,
    pub body_offset: usize,
}

const SCALAR_TYPES: [&str; 16] = [
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8",
    "int16", "uint16", "int32", "uint32", "float32", "float64",
];

/// Parses and validates a PLY header against the format grammar.
pub fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader, MeshError> {
    let bad = |m: &str| MeshError::Ply(m.to_string());
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not ASCII"))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("first line must be 'ply'"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", f, "1.0"] => {
                if !matches!(*f, "ascii" | "binary_little_endian" | "binary_big_endian") {
                    return Err(bad("unknown format"));
                }
                format = Some(f.to_string());
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                if !SCALAR_TYPES.contains(ct) || !SCALAR_TYPES.contains(it) {
                    return Err(bad("bad list property type"));
                }
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .properties
                    .push((format!("list {ct} {it}"), name.to_string()));
            }
            ["property", ty, name] => {
                if !SCALAR_TYPES.contains(ty) {
                    return Err(bad("bad property type"));
                }
                elements
                    .last_mut()
                    .ok_or_else(|| bad("property before element"))?
                    .properties
                    .push((ty.to_string(), name.to_string()));
            }
            _ => return Err(MeshError::Ply(format!("unexpected header line '{line}'"))),
        }
    }
    Ok(PlyHeader {
        format: format.ok_or_else(|| bad("missing format line"))?,
        elements,
        body_offset: end + END.len(),
    })
}

pub fn decode_ply(bytes: &[u8]) -> Result<PlyMesh, MeshError> {
    let header = parse_ply_header(bytes)?;
    let bad = |m: &str| MeshError::Ply(m.to_string());
    let expected_vertex: Vec<(String, String)> = [
        ("double", "x"),
        ("double", "y"),
        ("double", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    let (vertex, face) = match header.elements.as_slice() {
        [v, f] if v.name == "vertex" && f.name == "face" => (v, f),
        _ => return Err(bad("expected vertex and face elements")),
    };
    if header.format != "binary_little_endian"
        || vertex.properties != expected_vertex
        || face.properties != [("list uchar int".to_string(), "vertex_indices".to_string())]
    {
        return Err(bad("unsupported property layout"));
    }
    let mut body = &bytes[header.body_offset..];
    let mut take = |n: usize| -> Result<&[u8], MeshError> {
        if body.len() < n {
            return Err(bad("body truncated"));
        }
        let (head, rest) = body.split_at(n);
        body = rest;
        Ok(head)
    };
    let mut out = PlyMesh::default();
    for _ in 0..vertex.count {
        let b = take(27)?;
        let f = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        out.vertices.push(Vector3::new(f(0), f(8), f(16)));
        out.colors.push([b[24], b[25], b[26]]);
    }
    for _ in 0..face.count {
        if take(1)?[0] != 3 {
            return Err(bad("only triangles are supported"));
        }
        let b = take(12)?;
        let mut tri = [0u32; 3];
        for (n, t) in tri.iter_mut().enumerate() {
            let i = i32::from_le_bytes(b[4 * n..4 * n + 4].try_into().unwrap());
            if i < 0 || i as usize >= vertex.count {
                return Err(bad("face index out of range"));
            }
            *t = i as u32;
        }
        out.triangles.push(tri);
    }
    if !body.is_empty() {
        return Err(bad("trailing bytes after body"));
    }
    Ok(out)
}

pub fn read_ply(path: &Path) -> Result<PlyMesh, MeshError> {
    let bytes = fs::read(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_ply(&bytes)
}
