//! Colored triangle meshes, ASCII PLY I/O and the procedural test objects.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{icosphere, Vec3};

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
    triangles: Vec<[usize; 3]>,
    diameter: f64,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        colors: Vec<[u8; 3]>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<Self> {
        if colors.len() != vertices.len() {
            return Err(Error::DimensionMismatch {
                expected: vertices.len(),
                actual: colors.len(),
            });
        }
        if triangles.is_empty() {
            return Err(Error::InvalidParameter("mesh has no triangles".into()));
        }
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(Error::InvalidParameter(format!(
                "triangle index {bad} out of range ({} vertices)",
                vertices.len()
            )));
        }
        let diameter = max_pairwise_distance(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::InvalidParameter("mesh diameter must be > 0".into()));
        }
        Ok(Self {
            vertices,
            colors,
            triangles,
            diameter,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Mean of the mesh vertices, used as the voting target.
    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Returns a copy translated so its centroid is at the origin.
    pub fn centered(&self) -> Mesh {
        let c = self.centroid();
        Mesh {
            vertices: self.vertices.iter().map(|v| v - c).collect(),
            colors: self.colors.clone(),
            triangles: self.triangles.clone(),
            diameter: self.diameter,
        }
    }

    /// Distance from `p` to the closest point on any triangle.
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                point_triangle_distance(
                    p,
                    &self.vertices[t[0]],
                    &self.vertices[t[1]],
                    &self.vertices[t[2]],
                )
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_ply(&text).map_err(|message| Error::Parse {
            context: path.display().to_string(),
            message,
        })
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_ply()).map_err(|e| Error::io(path, e))
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            let _ = writeln!(s, "{} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }
}

fn max_pairwise_distance(vertices: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    // Closest point by Voronoi-region tests on the triangle.
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

fn parse_ply(text: &str) -> std::result::Result<Mesh, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err("only ASCII PLY is supported".into());
                }
            }
            Some("element") => {
                let name = tok.next().ok_or("element without name")?.to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or("element without count")?;
                elements.push((name, count, Vec::new()));
            }
            Some("property") => {
                let last = elements.last_mut().ok_or("property before element")?;
                let name = line.split_whitespace().last().unwrap_or_default();
                last.2.push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }

    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let line = lines
                .next()
                .ok_or_else(|| format!("truncated {name} data"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            match name.as_str() {
                "vertex" => {
                    let get = |key: &str| -> std::result::Result<Option<f64>, String> {
                        match props.iter().position(|p| p == key) {
                            Some(i) => vals
                                .get(i)
                                .and_then(|v| v.parse::<f64>().ok())
                                .map(Some)
                                .ok_or_else(|| format!("bad vertex line '{line}'")),
                            None => Ok(None),
                        }
                    };
                    let x = get("x")?.ok_or("vertex missing x")?;
                    let y = get("y")?.ok_or("vertex missing y")?;
                    let z = get("z")?.ok_or("vertex missing z")?;
                    let channel =
                        |key| get(key).map(|c| c.unwrap_or(255.0).clamp(0.0, 255.0) as u8);
                    vertices.push(Vec3::new(x, y, z));
                    colors.push([channel("red")?, channel("green")?, channel("blue")?]);
                }
                "face" => {
                    let n: usize = vals
                        .first()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| format!("bad face line '{line}'"))?;
                    let idx: Vec<usize> = vals
                        .iter()
                        .skip(1)
                        .take(n)
                        .map(|v| v.parse().map_err(|_| format!("bad face index in '{line}'")))
                        .collect::<std::result::Result<_, _>>()?;
                    if idx.len() != n || n < 3 {
                        return Err(format!("bad face line '{line}'"));
                    }
                    for i in 1..n - 1 {
                        triangles.push([idx[0], idx[i], idx[i + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    Mesh::new(vertices, colors, triangles).map_err(|e| e.to_string())
}

/// Incrementally assembles a mesh from flat-colored polygons.
#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
    triangles: Vec<[usize; 3]>,
}

impl MeshBuilder {
    /// Adds a convex polygon (fan-triangulated) with its own vertices.
    fn polygon(&mut self, corners: &[Vec3], color: [u8; 3]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(corners);
        self.colors
            .extend(std::iter::repeat_n(color, corners.len()));
        for i in 1..corners.len() - 1 {
            self.triangles.push([base, base + i, base + i + 1]);
        }
    }

    fn build(self) -> Mesh {
        Mesh::new(self.vertices, self.colors, self.triangles).expect("procedural mesh is valid")
    }
}

const CUBE_COLORS: [[u8; 3]; 6] = [
    [220, 30, 30],
    [30, 200, 40],
    [40, 60, 230],
    [235, 220, 30],
    [220, 40, 210],
    [30, 210, 220],
];

/// Axis-aligned cube of the given side centered at the origin; one color per face.
pub fn cube(side: f64) -> Mesh {
    box_mesh(
        Vec3::repeat(-side / 2.0),
        Vec3::repeat(side / 2.0),
        &CUBE_COLORS,
    )
}

fn box_mesh(lo: Vec3, hi: Vec3, colors: &[[u8; 3]; 6]) -> Mesh {
    let mut b = MeshBuilder::default();
    let p = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let (a, c) = (lo, hi);
    b.polygon(
        &[
            p(c.x, a.y, a.z),
            p(c.x, c.y, a.z),
            p(c.x, c.y, c.z),
            p(c.x, a.y, c.z),
        ],
        colors[0],
    );
    b.polygon(
        &[
            p(a.x, a.y, a.z),
            p(a.x, a.y, c.z),
            p(a.x, c.y, c.z),
            p(a.x, c.y, a.z),
        ],
        colors[1],
    );
    b.polygon(
        &[
            p(a.x, c.y, a.z),
            p(a.x, c.y, c.z),
            p(c.x, c.y, c.z),
            p(c.x, c.y, a.z),
        ],
        colors[2],
    );
    b.polygon(
        &[
            p(a.x, a.y, a.z),
            p(c.x, a.y, a.z),
            p(c.x, a.y, c.z),
            p(a.x, a.y, c.z),
        ],
        colors[3],
    );
    b.polygon(
        &[
            p(a.x, a.y, c.z),
            p(c.x, a.y, c.z),
            p(c.x, c.y, c.z),
            p(a.x, c.y, c.z),
        ],
        colors[4],
    );
    b.polygon(
        &[
            p(a.x, a.y, a.z),
            p(a.x, c.y, a.z),
            p(c.x, c.y, a.z),
            p(c.x, a.y, a.z),
        ],
        colors[5],
    );
    b.build()
}

/// Icosphere with a seeded, saturated random color per face.
pub fn colored_icosphere(radius: f64, subdivisions: u32, seed: u64) -> Mesh {
    let (verts, faces) = icosphere(subdivisions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = MeshBuilder::default();
    for f in faces {
        let hue: f64 = rng.random_range(0.0..360.0);
        let value: f64 = rng.random_range(0.55..1.0);
        b.polygon(
            &[
                verts[f[0]] * radius,
                verts[f[1]] * radius,
                verts[f[2]] * radius,
            ],
            hsv(hue, 0.85, value),
        );
    }
    b.build()
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to(r), to(g), to(b)]
}

const L_COLORS: [[u8; 3]; 8] = [
    [250, 140, 20],
    [120, 40, 200],
    [20, 130, 120],
    [230, 210, 30],
    [140, 90, 40],
    [250, 120, 170],
    [90, 170, 30],
    [20, 40, 120],
];

/// L-shaped prism: an `outer × outer` L with arm thickness `arm`, extruded by
/// `depth` along z, centered on its vertex centroid.
pub fn l_prism(outer: f64, arm: f64, depth: f64) -> Mesh {
    let (o, a, h) = (outer, arm, depth / 2.0);
    // Counter-clockwise L outline in the xy plane.
    let outline = [(0.0, 0.0), (o, 0.0), (o, a), (a, a), (a, o), (0.0, o)];
    let mut b = MeshBuilder::default();
    let v = |(x, y): (f64, f64), z: f64| Vec3::new(x, y, z);
    // Caps split into two convex rectangles.
    let rects = [
        [(0.0, 0.0), (o, 0.0), (o, a), (0.0, a)],
        [(0.0, a), (a, a), (a, o), (0.0, o)],
    ];
    for r in &rects {
        b.polygon(&r.map(|p| v(p, h)), L_COLORS[0]);
        b.polygon(
            &[v(r[0], -h), v(r[3], -h), v(r[2], -h), v(r[1], -h)],
            L_COLORS[1],
        );
    }
    for i in 0..outline.len() {
        let p = outline[i];
        let q = outline[(i + 1) % outline.len()];
        b.polygon(&[v(p, -h), v(q, -h), v(q, h), v(p, h)], L_COLORS[2 + i]);
    }
    b.build().centered()
}

/// Planar rectangle in the object xy plane, centered at the origin.
pub fn plane(width: f64, height: f64, color: [u8; 3]) -> Mesh {
    let (w, h) = (width / 2.0, height / 2.0);
    let mut b = MeshBuilder::default();
    b.polygon(
        &[
            Vec3::new(-w, -h, 0.0),
            Vec3::new(w, -h, 0.0),
            Vec3::new(w, h, 0.0),
            Vec3::new(-w, h, 0.0),
        ],
        color,
    );
    b.build()
}

/// Checkerboard plane of `n × n` tiles alternating between two gray levels.
pub fn checker_plane(size: f64, n: usize, dark: u8, light: u8) -> Mesh {
    let mut b = MeshBuilder::default();
    let tile = size / n as f64;
    let origin = -size / 2.0;
    for i in 0..n {
        for j in 0..n {
            let x0 = origin + i as f64 * tile;
            let y0 = origin + j as f64 * tile;
            let g = if (i + j) % 2 == 0 { dark } else { light };
            b.polygon(
                &[
                    Vec3::new(x0, y0, 0.0),
                    Vec3::new(x0 + tile, y0, 0.0),
                    Vec3::new(x0 + tile, y0 + tile, 0.0),
                    Vec3::new(x0, y0 + tile, 0.0),
                ],
                [g, g, g],
            );
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_geometry() {
        let m = cube(1.0);
        assert_eq!(m.triangles().len(), 12);
        assert!((m.diameter() - 3f64.sqrt()).abs() < 1e-12);
        assert!(m.centroid().norm() < 1e-12);
    }

    #[test]
    fn l_prism_is_centered() {
        let m = l_prism(0.14, 0.05, 0.06);
        assert!(m.centroid().norm() < 1e-12);
        assert_eq!(m.triangles().len(), 8 + 12);
    }

    #[test]
    fn rejects_invalid_meshes() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let c = vec![[0, 0, 0]; 3];
        assert!(Mesh::new(v.clone(), c.clone(), vec![]).is_err());
        assert!(Mesh::new(v.clone(), c.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new(v.clone(), c[..2].to_vec(), vec![[0, 1, 2]]).is_err());
        assert!(Mesh::new(vec![Vec3::zeros(); 3], c, vec![[0, 1, 2]]).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let m = colored_icosphere(0.05, 1, 3);
        let back = parse_ply(&m.to_ply()).unwrap();
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.colors(), m.colors());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn ply_quads_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\n\
                    property float z\nproperty float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                    element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0 1 10 20 30\n1 0 0 1 10 20 30\n1 1 0 1 10 20 30\n0 1 0 1 10 20 30\n4 0 1 2 3\n";
        let m = parse_ply(text).unwrap();
        assert_eq!(m.triangles().len(), 2);
        assert_eq!(m.colors()[0], [10, 20, 30]);
    }

    #[test]
    fn ply_errors() {
        assert!(parse_ply("nope").is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        let truncated =
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                         property float z\nend_header\n0 0 0\n";
        assert!(parse_ply(truncated).is_err());
    }

    #[test]
    fn surface_distance() {
        let m = cube(1.0);
        assert!(m.distance_to_surface(&Vec3::new(0.5, 0.1, 0.2)) < 1e-12);
        assert!((m.distance_to_surface(&Vec3::new(1.5, 0.0, 0.0)) - 1.0).abs() < 1e-12);
        assert!((m.distance_to_surface(&Vec3::zeros()) - 0.5).abs() < 1e-12);
    }
}
