//! Simplicial meshes in d = 1 (intervals) and d = 2 (triangles): element maps,
//! patches, uniform refinement, shape-regularity diagnostics, and polynomial
//! degree distributions with the minimum rule.

use crate::error::{Error, Result};
use nalgebra::Matrix2;
use std::collections::HashMap;
use std::fmt::Write as _;

pub type Point = [f64; 2];

/// The meshed domain: an open interval or a convex polygon (counterclockwise
/// vertex loop).
#[derive(Debug, Clone)]
pub enum Domain {
    Interval { a: f64, b: f64 },
    Polygon { vertices: Vec<Point> },
}

impl Domain {
    pub fn unit_interval() -> Self {
        Domain::Interval { a: 0.0, b: 1.0 }
    }

    pub fn unit_square() -> Self {
        Domain::Polygon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Polygon { .. } => 2,
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            Domain::Interval { a, b } => b - a,
            Domain::Polygon { vertices } => {
                let n = vertices.len();
                let mut s = 0.0;
                for i in 0..n {
                    let p = vertices[i];
                    let q = vertices[(i + 1) % n];
                    s += p[0] * q[1] - q[0] * p[1];
                }
                0.5 * s
            }
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            Domain::Interval { a, b } => a < b,
            Domain::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return false;
                }
                for i in 0..n {
                    let p = vertices[i];
                    let q = vertices[(i + 1) % n];
                    let r = vertices[(i + 2) % n];
                    let cross =
                        (q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0]);
                    if cross <= 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Signed distance to the interior: positive inside. For polygons this is
    /// the minimum over edge-line signed distances, which equals the distance
    /// to the boundary for convex polygons.
    pub fn signed_distance(&self, x: Point) -> f64 {
        match self {
            Domain::Interval { a, b } => (x[0] - a).min(b - x[0]),
            Domain::Polygon { vertices } => {
                let n = vertices.len();
                let mut d = f64::INFINITY;
                for i in 0..n {
                    let p = vertices[i];
                    let q = vertices[(i + 1) % n];
                    let e = [q[0] - p[0], q[1] - p[1]];
                    let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
                    // Inward normal of a CCW edge.
                    let nrm = [-e[1] / len, e[0] / len];
                    d = d.min(nrm[0] * (x[0] - p[0]) + nrm[1] * (x[1] - p[1]));
                }
                d
            }
        }
    }

    pub fn contains(&self, x: Point, tol: f64) -> bool {
        self.signed_distance(x) >= -tol
    }

    /// Edge list of a polygon: (start vertex, end vertex, unit inward normal,
    /// edge length). Intervals report their two endpoints with inward
    /// directions.
    pub fn sides(&self) -> Vec<(Point, Point, Point, f64)> {
        match self {
            Domain::Interval { a, b } => vec![
                ([*a, 0.0], [*a, 0.0], [1.0, 0.0], 0.0),
                ([*b, 0.0], [*b, 0.0], [-1.0, 0.0], 0.0),
            ],
            Domain::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let p = vertices[i];
                        let q = vertices[(i + 1) % n];
                        let e = [q[0] - p[0], q[1] - p[1]];
                        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
                        (p, q, [-e[1] / len, e[0] / len], len)
                    })
                    .collect()
            }
        }
    }

    /// Interior angles at polygon corners (radians).
    pub fn corner_angles(&self) -> Vec<f64> {
        match self {
            Domain::Interval { .. } => vec![],
            Domain::Polygon { vertices } => {
                let n = vertices.len();
                (0..n)
                    .map(|i| {
                        let prev = vertices[(i + n - 1) % n];
                        let v = vertices[i];
                        let next = vertices[(i + 1) % n];
                        let a = [prev[0] - v[0], prev[1] - v[1]];
                        let b = [next[0] - v[0], next[1] - v[1]];
                        let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                        let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                        ((a[0] * b[0] + a[1] * b[1]) / (na * nb))
                            .clamp(-1.0, 1.0)
                            .acos()
                    })
                    .collect()
            }
        }
    }
}

/// Affine element map F_K(x̂) = A x̂ + b from the reference simplex
/// ((0,1) or the unit triangle) onto K. For d = 1 only the first column/row
/// of A is meaningful.
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub a: Matrix2<f64>,
    pub b: Point,
    pub a_inv: Matrix2<f64>,
    pub det: f64,
}

impl AffineMap {
    pub fn apply(&self, xhat: Point) -> Point {
        [
            self.a[(0, 0)] * xhat[0] + self.a[(0, 1)] * xhat[1] + self.b[0],
            self.a[(1, 0)] * xhat[0] + self.a[(1, 1)] * xhat[1] + self.b[1],
        ]
    }

    pub fn apply_inverse(&self, x: Point) -> Point {
        let v = [x[0] - self.b[0], x[1] - self.b[1]];
        [
            self.a_inv[(0, 0)] * v[0] + self.a_inv[(0, 1)] * v[1],
            self.a_inv[(1, 0)] * v[0] + self.a_inv[(1, 1)] * v[1],
        ]
    }

    /// Push a reference-coordinate gradient to physical coordinates
    /// (multiplication by A^{-T}).
    pub fn grad_pullback(&self, g: Point) -> Point {
        [
            self.a_inv[(0, 0)] * g[0] + self.a_inv[(1, 0)] * g[1],
            self.a_inv[(0, 1)] * g[0] + self.a_inv[(1, 1)] * g[1],
        ]
    }
}

/// A facet shared between elements: a vertex in 1D, an edge in 2D.
#[derive(Debug, Clone)]
pub struct Facet {
    /// Vertex ids; in 1D both entries coincide.
    pub verts: [usize; 2],
    /// Ids of the incident elements (1 on the boundary, 2 inside).
    pub elems: Vec<usize>,
}

#[derive(Debug)]
pub struct Mesh {
    pub d: usize,
    pub domain: Domain,
    pub vertices: Vec<Point>,
    /// Vertex ids per element: 2 in 1D, 3 in 2D.
    pub elements: Vec<Vec<usize>>,
    pub maps: Vec<AffineMap>,
    pub h: Vec<f64>,
    pub vertex_to_elements: Vec<Vec<usize>>,
    pub facets: Vec<Facet>,
    facet_lookup: HashMap<[usize; 2], usize>,
}

impl Mesh {
    fn assemble(d: usize, domain: Domain, vertices: Vec<Point>, elements: Vec<Vec<usize>>) -> Result<Mesh> {
        let mut maps = Vec::with_capacity(elements.len());
        let mut h = Vec::with_capacity(elements.len());
        for (k, el) in elements.iter().enumerate() {
            let (a, b, diam) = match d {
                1 => {
                    let p = vertices[el[0]][0];
                    let q = vertices[el[1]][0];
                    (
                        Matrix2::new(q - p, 0.0, 0.0, 1.0),
                        [p, 0.0],
                        (q - p).abs(),
                    )
                }
                2 => {
                    let v0 = vertices[el[0]];
                    let v1 = vertices[el[1]];
                    let v2 = vertices[el[2]];
                    let a = Matrix2::new(
                        v1[0] - v0[0],
                        v2[0] - v0[0],
                        v1[1] - v0[1],
                        v2[1] - v0[1],
                    );
                    let e = |p: Point, q: Point| {
                        ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
                    };
                    let diam = e(v0, v1).max(e(v1, v2)).max(e(v2, v0));
                    (a, v0, diam)
                }
                _ => return Err(Error::InvalidInput(format!("dimension {d}"))),
            };
            let det = a.determinant();
            if det.abs() <= 1e-14 * diam.max(1.0) {
                return Err(Error::Geometry(format!("element {k} is degenerate")));
            }
            let a_inv = a.try_inverse().ok_or_else(|| {
                Error::Geometry(format!("element {k} map is singular"))
            })?;
            maps.push(AffineMap { a, b, a_inv, det });
            h.push(diam);
        }

        let mut vertex_to_elements = vec![Vec::new(); vertices.len()];
        for (k, el) in elements.iter().enumerate() {
            for &v in el {
                vertex_to_elements[v].push(k);
            }
        }

        let mut facet_lookup: HashMap<[usize; 2], usize> = HashMap::new();
        let mut facets: Vec<Facet> = Vec::new();
        for (k, el) in elements.iter().enumerate() {
            let local: Vec<[usize; 2]> = match d {
                1 => vec![[el[0], el[0]], [el[1], el[1]]],
                _ => vec![
                    sorted2(el[0], el[1]),
                    sorted2(el[1], el[2]),
                    sorted2(el[2], el[0]),
                ],
            };
            for key in local {
                let id = *facet_lookup.entry(key).or_insert_with(|| {
                    facets.push(Facet {
                        verts: key,
                        elems: Vec::new(),
                    });
                    facets.len() - 1
                });
                facets[id].elems.push(k);
            }
        }
        for f in &facets {
            if f.elems.len() > 2 {
                return Err(Error::Geometry(
                    "facet shared by more than two elements".into(),
                ));
            }
        }

        let mesh = Mesh {
            d,
            domain,
            vertices,
            elements,
            maps,
            h,
            vertex_to_elements,
            facets,
            facet_lookup,
        };
        mesh.check_cover()?;
        Ok(mesh)
    }

    fn check_cover(&self) -> Result<()> {
        let total: f64 = (0..self.elements.len()).map(|k| self.measure(k)).sum();
        let dm = self.domain.measure();
        if ((total - dm) / dm).abs() > 1e-12 {
            return Err(Error::Geometry(format!(
                "element measures sum to {total}, domain measure is {dm}"
            )));
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn measure(&self, k: usize) -> f64 {
        match self.d {
            1 => self.maps[k].a[(0, 0)].abs(),
            _ => 0.5 * self.maps[k].det.abs(),
        }
    }

    /// Volume scaling of the reference map: |K| / |K̂|.
    pub fn reference_jacobian(&self, k: usize) -> f64 {
        match self.d {
            1 => self.maps[k].a[(0, 0)].abs(),
            _ => self.maps[k].det.abs(),
        }
    }

    pub fn centroid(&self, k: usize) -> Point {
        let el = &self.elements[k];
        let n = el.len() as f64;
        let mut c = [0.0, 0.0];
        for &v in el {
            c[0] += self.vertices[v][0] / n;
            c[1] += self.vertices[v][1] / n;
        }
        c
    }

    /// Exact distance from a point to the closed element.
    pub fn distance_to_element(&self, x: Point, k: usize) -> f64 {
        let el = &self.elements[k];
        match self.d {
            1 => {
                let a = self.vertices[el[0]][0].min(self.vertices[el[1]][0]);
                let b = self.vertices[el[0]][0].max(self.vertices[el[1]][0]);
                if x[0] < a {
                    a - x[0]
                } else if x[0] > b {
                    x[0] - b
                } else {
                    0.0
                }
            }
            _ => {
                let v: Vec<Point> = el.iter().map(|&i| self.vertices[i]).collect();
                if point_in_triangle(x, v[0], v[1], v[2]) {
                    0.0
                } else {
                    dist_segment(x, v[0], v[1])
                        .min(dist_segment(x, v[1], v[2]))
                        .min(dist_segment(x, v[2], v[0]))
                }
            }
        }
    }

    pub fn element_contains(&self, x: Point, k: usize, tol: f64) -> bool {
        self.distance_to_element(x, k) <= tol
    }

    /// Lowest element id whose closure contains x.
    pub fn locate(&self, x: Point) -> Result<usize> {
        let tol = 1e-12 * self.h.iter().cloned().fold(0.0, f64::max).max(1.0);
        (0..self.n_elements())
            .find(|&k| self.element_contains(x, k, tol))
            .ok_or_else(|| Error::InvalidInput(format!("point {x:?} outside the mesh")))
    }

    /// The patch ω_K: all elements whose closures intersect closure(K),
    /// including K itself. Sorted by id.
    pub fn patch(&self, k: usize) -> Result<Vec<usize>> {
        if k >= self.n_elements() {
            return Err(Error::InvalidInput(format!("element id {k} out of range")));
        }
        let mut ids: Vec<usize> = self.elements[k]
            .iter()
            .flat_map(|&v| self.vertex_to_elements[v].iter().cloned())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }

    /// γ-shape regularity constant: max over K of
    /// h_K^{-1}‖F'_K‖ + h_K‖(F'_K)^{-1}‖ (spectral norms), together with the
    /// local quasi-uniformity constant C = max over touching pairs of
    /// h_K / h_K'.
    pub fn shape_regularity(&self) -> Result<(f64, f64)> {
        let mut gamma: f64 = 0.0;
        for k in 0..self.n_elements() {
            let (smax, smin) = match self.d {
                1 => {
                    let s = self.maps[k].a[(0, 0)].abs();
                    (s, s)
                }
                _ => singular_values(&self.maps[k].a),
            };
            if smin <= 1e-14 * smax {
                return Err(Error::Geometry(format!("element {k} is degenerate")));
            }
            gamma = gamma.max(smax / self.h[k] + self.h[k] / smin);
        }
        let mut c_qu: f64 = 1.0;
        for k in 0..self.n_elements() {
            for kp in self.patch(k)? {
                c_qu = c_qu.max(self.h[k] / self.h[kp]);
            }
        }
        Ok((gamma, c_qu))
    }

    pub fn facet_id(&self, v0: usize, v1: usize) -> Option<usize> {
        self.facet_lookup.get(&sorted2(v0, v1)).copied()
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        match self.d {
            1 => self
                .facet_lookup
                .get(&[v, v])
                .map(|&f| self.facets[f].elems.len() == 1)
                .unwrap_or(false),
            _ => self.facets.iter().any(|f| {
                f.elems.len() == 1 && (f.verts[0] == v || f.verts[1] == v)
            }),
        }
    }

    /// Line-oriented text serialization: `dim n_vertices n_elements` header,
    /// vertex coordinate lines, then 0-based element index lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.d, self.vertices.len(), self.elements.len());
        for v in &self.vertices {
            if self.d == 1 {
                let _ = writeln!(s, "{:.17e}", v[0]);
            } else {
                let _ = writeln!(s, "{:.17e} {:.17e}", v[0], v[1]);
            }
        }
        for el in &self.elements {
            let idx: Vec<String> = el.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{}", idx.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, domain: Domain) -> Result<Mesh> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mesh file".into()))?;
        let hs: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        if hs.len() != 3 {
            return Err(Error::Parse("header must be `dim n_vertices n_elements`".into()));
        }
        let (d, nv, ne) = (hs[0], hs[1], hs[2]);
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = lines.next().ok_or_else(|| Error::Parse("missing vertex line".into()))?;
            let c: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad vertex {line:?}"))))
                .collect::<Result<_>>()?;
            if c.len() != d {
                return Err(Error::Parse(format!("vertex line has {} coords, expected {d}", c.len())));
            }
            vertices.push([c[0], if d == 2 { c[1] } else { 0.0 }]);
        }
        let mut elements = Vec::with_capacity(ne);
        for _ in 0..ne {
            let line = lines.next().ok_or_else(|| Error::Parse("missing element line".into()))?;
            let idx: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad element {line:?}"))))
                .collect::<Result<_>>()?;
            if idx.len() != d + 1 {
                return Err(Error::Parse(format!("element line has {} indices, expected {}", idx.len(), d + 1)));
            }
            if idx.iter().any(|&i| i >= nv) {
                return Err(Error::Parse("element index out of range".into()));
            }
            elements.push(idx);
        }
        Mesh::assemble(d, domain, vertices, elements)
    }
}

fn sorted2(a: usize, b: usize) -> [usize; 2] {
    if a <= b {
        [a, b]
    } else {
        [b, a]
    }
}

fn singular_values(a: &Matrix2<f64>) -> (f64, f64) {
    let m = a.transpose() * a;
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = (tr / 2.0 - disc).max(0.0);
    (l1.sqrt(), l2.sqrt())
}

fn dist_segment(x: Point, p: Point, q: Point) -> f64 {
    let e = [q[0] - p[0], q[1] - p[1]];
    let w = [x[0] - p[0], x[1] - p[1]];
    let len2 = e[0] * e[0] + e[1] * e[1];
    let t = ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0);
    let d = [w[0] - t * e[0], w[1] - t * e[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn point_in_triangle(x: Point, a: Point, b: Point, c: Point) -> bool {
    let sign = |p: Point, q: Point, r: Point| {
        (p[0] - r[0]) * (q[1] - r[1]) - (q[0] - r[0]) * (p[1] - r[1])
    };
    let d1 = sign(x, a, b);
    let d2 = sign(x, b, c);
    let d3 = sign(x, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Uniform mesh of the domain. For intervals, `n` equal elements. For
/// axis-aligned rectangles, an n-by-n grid of cells split along the diagonal
/// (2n² triangles). Other convex polygons are fanned from the centroid and
/// each fan triangle is split into n² similar triangles.
pub fn build_uniform_mesh(domain: &Domain, n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidInput("subdivision count must be >= 1".into()));
    }
    if !domain.is_convex() {
        return Err(Error::InvalidInput(
            "only convex domains are supported".into(),
        ));
    }
    match domain {
        Domain::Interval { a, b } => {
            let vertices: Vec<Point> = (0..=n)
                .map(|i| [a + (b - a) * i as f64 / n as f64, 0.0])
                .collect();
            let elements: Vec<Vec<usize>> = (0..n).map(|i| vec![i, i + 1]).collect();
            Mesh::assemble(1, domain.clone(), vertices, elements)
        }
        Domain::Polygon { vertices: poly } => {
            if let Some((lo, hi)) = axis_aligned_rectangle(poly) {
                let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
                for j in 0..=n {
                    for i in 0..=n {
                        vertices.push([
                            lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64,
                            lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64,
                        ]);
                    }
                }
                let id = |i: usize, j: usize| j * (n + 1) + i;
                let mut elements = Vec::with_capacity(2 * n * n);
                for j in 0..n {
                    for i in 0..n {
                        elements.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                        elements.push(vec![id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
                    }
                }
                Mesh::assemble(2, domain.clone(), vertices, elements)
            } else {
                // Centroid fan; each fan triangle subdivided into n^2 copies.
                let m = poly.len();
                let mut c = [0.0, 0.0];
                for v in poly {
                    c[0] += v[0] / m as f64;
                    c[1] += v[1] / m as f64;
                }
                let mut builder = VertexDedup::new();
                let mut elements = Vec::new();
                for s in 0..m {
                    let a = poly[s];
                    let b = poly[(s + 1) % m];
                    subdivide_triangle(c, a, b, n, &mut builder, &mut elements);
                }
                Mesh::assemble(2, domain.clone(), builder.vertices, elements)
            }
        }
    }
}

fn axis_aligned_rectangle(poly: &[Point]) -> Option<(Point, Point)> {
    if poly.len() != 4 {
        return None;
    }
    let xs: Vec<f64> = poly.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = poly.iter().map(|p| p[1]).collect();
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let ok = poly
        .iter()
        .all(|p| (p[0] == x0 || p[0] == x1) && (p[1] == y0 || p[1] == y1));
    if ok {
        Some(([x0, y0], [x1, y1]))
    } else {
        None
    }
}

struct VertexDedup {
    vertices: Vec<Point>,
    lookup: HashMap<(i64, i64), usize>,
}

impl VertexDedup {
    fn new() -> Self {
        VertexDedup {
            vertices: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    fn insert(&mut self, p: Point) -> usize {
        let key = ((p[0] * 1e12).round() as i64, (p[1] * 1e12).round() as i64);
        if let Some(&i) = self.lookup.get(&key) {
            return i;
        }
        self.vertices.push(p);
        self.lookup.insert(key, self.vertices.len() - 1);
        self.vertices.len() - 1
    }
}

fn subdivide_triangle(
    a: Point,
    b: Point,
    c: Point,
    n: usize,
    builder: &mut VertexDedup,
    elements: &mut Vec<Vec<usize>>,
) {
    let pt = |i: usize, j: usize| {
        let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
        [
            a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
            a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
        ]
    };
    for i in 0..n {
        for j in 0..n - i {
            let p00 = builder.insert(pt(i, j));
            let p10 = builder.insert(pt(i + 1, j));
            let p01 = builder.insert(pt(i, j + 1));
            elements.push(vec![p00, p10, p01]);
            if i + j < n - 1 {
                let p11 = builder.insert(pt(i + 1, j + 1));
                elements.push(vec![p10, p11, p01]);
            }
        }
    }
}

/// Uniform refinement: bisection in 1D, red refinement (4 similar children via
/// edge midpoints) in 2D.
pub fn uniform_refine(mesh: &Mesh) -> Result<Mesh> {
    match mesh.d {
        1 => {
            let mut vertices = mesh.vertices.clone();
            let mut elements = Vec::with_capacity(2 * mesh.n_elements());
            for el in &mesh.elements {
                let mid = [
                    0.5 * (mesh.vertices[el[0]][0] + mesh.vertices[el[1]][0]),
                    0.0,
                ];
                vertices.push(mid);
                let m = vertices.len() - 1;
                elements.push(vec![el[0], m]);
                elements.push(vec![m, el[1]]);
            }
            Mesh::assemble(1, mesh.domain.clone(), vertices, elements)
        }
        _ => {
            let mut vertices = mesh.vertices.clone();
            let mut midpoint: HashMap<[usize; 2], usize> = HashMap::new();
            let mut elements = Vec::with_capacity(4 * mesh.n_elements());
            let mut mid = |i: usize, j: usize, vertices: &mut Vec<Point>| {
                let key = sorted2(i, j);
                if let Some(&m) = midpoint.get(&key) {
                    return m;
                }
                let p = [
                    0.5 * (vertices[i][0] + vertices[j][0]),
                    0.5 * (vertices[i][1] + vertices[j][1]),
                ];
                vertices.push(p);
                midpoint.insert(key, vertices.len() - 1);
                vertices.len() - 1
            };
            for el in &mesh.elements {
                let (v0, v1, v2) = (el[0], el[1], el[2]);
                let m01 = mid(v0, v1, &mut vertices);
                let m12 = mid(v1, v2, &mut vertices);
                let m20 = mid(v2, v0, &mut vertices);
                elements.push(vec![v0, m01, m20]);
                elements.push(vec![m01, v1, m12]);
                elements.push(vec![m20, m12, v2]);
                elements.push(vec![m01, m12, m20]);
            }
            Mesh::assemble(2, mesh.domain.clone(), vertices, elements)
        }
    }
}

/// Per-element polynomial degrees; edge degrees after the minimum rule.
#[derive(Debug, Clone)]
pub struct DegreeDistribution {
    pub p: Vec<usize>,
    /// Per-facet degrees (indexed like `mesh.facets`), present after
    /// `apply_minimum_rule`.
    pub p_facet: Option<Vec<usize>>,
}

impl DegreeDistribution {
    pub fn uniform(mesh: &Mesh, p: usize) -> Result<Self> {
        if p < 1 {
            return Err(Error::InvalidInput("degrees must be >= 1".into()));
        }
        Ok(DegreeDistribution {
            p: vec![p; mesh.n_elements()],
            p_facet: None,
        })
    }

    /// Degrees assigned by cycling through `pattern` in element order.
    pub fn cycling(mesh: &Mesh, pattern: &[usize]) -> Result<Self> {
        if pattern.iter().any(|&p| p < 1) {
            return Err(Error::InvalidInput("degrees must be >= 1".into()));
        }
        Ok(DegreeDistribution {
            p: (0..mesh.n_elements())
                .map(|k| pattern[k % pattern.len()])
                .collect(),
            p_facet: None,
        })
    }

    /// γ_p regularity constant over touching elements:
    /// max of (p_K+1)/(p_K'+1) over pairs sharing a vertex.
    pub fn gamma_p(&self, mesh: &Mesh) -> Result<f64> {
        let mut g: f64 = 1.0;
        for k in 0..mesh.n_elements() {
            for kp in mesh.patch(k)? {
                g = g.max((self.p[k] as f64 + 1.0) / (self.p[kp] as f64 + 1.0));
            }
        }
        Ok(g)
    }
}

/// Minimum rule: each facet degree is the minimum of the adjacent element
/// degrees.
pub fn apply_minimum_rule(mesh: &Mesh, degrees: &DegreeDistribution) -> Result<DegreeDistribution> {
    if degrees.p.len() != mesh.n_elements() {
        return Err(Error::InvalidInput("degree list does not match mesh".into()));
    }
    if degrees.p.iter().any(|&p| p < 1) {
        return Err(Error::InvalidInput("degrees must be >= 1".into()));
    }
    let p_facet = mesh
        .facets
        .iter()
        .map(|f| f.elems.iter().map(|&k| degrees.p[k]).min().unwrap())
        .collect();
    Ok(DegreeDistribution {
        p: degrees.p.clone(),
        p_facet: Some(p_facet),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn interval_mesh_basics() {
        let mesh = build_uniform_mesh(&Domain::unit_interval(), 4).unwrap();
        assert_eq!(mesh.n_elements(), 4);
        for k in 0..4 {
            assert_relative_eq!(mesh.h[k], 0.25);
        }
        assert!(build_uniform_mesh(&Domain::unit_interval(), 0).is_err());
    }

    #[test]
    fn square_mesh_counts_and_h() {
        let mesh = build_uniform_mesh(&Domain::unit_square(), 2).unwrap();
        assert_eq!(mesh.n_elements(), 8);
        for k in 0..8 {
            assert_relative_eq!(mesh.h[k], (2.0f64).sqrt() / 2.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn refinement_counts() {
        let m0 = build_uniform_mesh(&Domain::unit_interval(), 4).unwrap();
        let m1 = uniform_refine(&m0).unwrap();
        assert_eq!(m1.n_elements(), 8);
        assert_relative_eq!(m1.h[0], 0.125);

        let s0 = build_uniform_mesh(&Domain::unit_square(), 2).unwrap();
        let s1 = uniform_refine(&s0).unwrap();
        let s2 = uniform_refine(&s1).unwrap();
        assert_eq!(s1.n_elements(), 32);
        assert_eq!(s2.n_elements(), 128);
    }

    #[test]
    fn red_refinement_preserves_gamma() {
        let s0 = build_uniform_mesh(&Domain::unit_square(), 2).unwrap();
        let s1 = uniform_refine(&s0).unwrap();
        let (g0, _) = s0.shape_regularity().unwrap();
        let (g1, _) = s1.shape_regularity().unwrap();
        assert_relative_eq!(g0, g1, max_relative = 1e-12);
    }

    #[test]
    fn measures_cover_domain() {
        let mut mesh = build_uniform_mesh(&Domain::unit_square(), 3).unwrap();
        for _ in 0..3 {
            let total: f64 = (0..mesh.n_elements()).map(|k| mesh.measure(k)).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-12);
            mesh = uniform_refine(&mesh).unwrap();
        }
    }

    #[test]
    fn interval_patches() {
        let mesh = build_uniform_mesh(&Domain::unit_interval(), 4).unwrap();
        assert_eq!(mesh.patch(1).unwrap(), vec![0, 1, 2]);
        assert_eq!(mesh.patch(0).unwrap(), vec![0, 1]);
        assert!(mesh.patch(9).is_err());
    }

    #[test]
    fn structured_interior_patch_has_13_triangles() {
        // Oracle: brute-force adjacency enumeration on the structured mesh.
        let mesh = build_uniform_mesh(&Domain::unit_square(), 4).unwrap();
        let interior = (0..mesh.n_elements())
            .find(|&k| {
                mesh.elements[k]
                    .iter()
                    .all(|&v| !mesh.is_boundary_vertex(v))
            })
            .expect("structured 4x4 mesh has a fully interior triangle");
        let brute: Vec<usize> = (0..mesh.n_elements())
            .filter(|&kp| {
                mesh.elements[kp].iter().any(|&vp| {
                    mesh.elements[interior].iter().any(|&v| {
                        vp == v
                            || (mesh.vertices[vp][0] - mesh.vertices[v][0]).abs() < 1e-14
                                && (mesh.vertices[vp][1] - mesh.vertices[v][1]).abs() < 1e-14
                    })
                })
            })
            .collect();
        let patch = mesh.patch(interior).unwrap();
        assert_eq!(patch, brute);
        assert_eq!(patch.len(), 13);
    }

    #[test]
    fn patch_symmetry() {
        let mesh = build_uniform_mesh(&Domain::unit_square(), 3).unwrap();
        for k in 0..mesh.n_elements() {
            for kp in mesh.patch(k).unwrap() {
                assert!(mesh.patch(kp).unwrap().contains(&k));
            }
        }
    }

    #[test]
    fn shape_regularity_values() {
        let mesh = build_uniform_mesh(&Domain::unit_interval(), 5).unwrap();
        let (g, c) = mesh.shape_regularity().unwrap();
        assert_relative_eq!(g, 2.0, max_relative = 1e-13);
        assert_relative_eq!(c, 1.0, max_relative = 1e-13);
    }

    #[test]
    fn reference_triangle_gamma_from_svd() {
        // Single reference triangle: F' = I, h = sqrt(2), so
        // gamma = 1/h + h (singular values are both 1).
        let domain = Domain::Polygon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let mesh = Mesh::assemble(
            2,
            domain,
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let (g, _) = mesh.shape_regularity().unwrap();
        let h = (2.0f64).sqrt();
        assert_relative_eq!(g, 1.0 / h + h, max_relative = 1e-13);
    }

    #[test]
    fn sliver_triangle_large_gamma() {
        let domain = Domain::Polygon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.01]],
        };
        let mesh = Mesh::assemble(
            2,
            domain,
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.01]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let (g, _) = mesh.shape_regularity().unwrap();
        assert!(g > 50.0, "gamma = {g}");
    }

    #[test]
    fn minimum_rule() {
        let mesh = build_uniform_mesh(&Domain::unit_square(), 1).unwrap();
        let deg = DegreeDistribution {
            p: vec![3, 5],
            p_facet: None,
        };
        let with_edges = apply_minimum_rule(&mesh, &deg).unwrap();
        let pf = with_edges.p_facet.unwrap();
        for (f, facet) in mesh.facets.iter().enumerate() {
            let expect = facet.elems.iter().map(|&k| deg.p[k]).min().unwrap();
            assert_eq!(pf[f], expect);
            if facet.elems.len() == 2 {
                assert_eq!(pf[f], 3);
            }
        }
    }

    #[test]
    fn gamma_p_uniform_is_one() {
        let mesh = build_uniform_mesh(&Domain::unit_square(), 2).unwrap();
        let deg = DegreeDistribution::uniform(&mesh, 2).unwrap();
        assert_relative_eq!(deg.gamma_p(&mesh).unwrap(), 1.0);
    }

    #[test]
    fn serialization_roundtrip() {
        let mesh = build_uniform_mesh(&Domain::unit_square(), 2).unwrap();
        let text = mesh.to_text();
        let back = Mesh::from_text(&text, mesh.domain.clone()).unwrap();
        assert_eq!(back.n_elements(), mesh.n_elements());
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        for k in 0..mesh.n_elements() {
            assert_eq!(back.elements[k], mesh.elements[k]);
        }
    }

    #[test]
    fn nonconvex_rejected() {
        let dom = Domain::Polygon {
            vertices: vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.5], [2.0, 2.0], [0.0, 2.0]],
        };
        assert!(build_uniform_mesh(&dom, 2).is_err());
    }

    #[test]
    fn fan_triangulation_covers_convex_polygon() {
        let dom = Domain::Polygon {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.5, 0.8], [0.6, 1.4], [-0.3, 0.7]],
        };
        let mesh = build_uniform_mesh(&dom, 2).unwrap();
        let total: f64 = (0..mesh.n_elements()).map(|k| mesh.measure(k)).sum();
        assert_relative_eq!(total, dom.measure(), max_relative = 1e-12);
    }
}
