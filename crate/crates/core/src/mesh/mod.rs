//! Textured triangle mesh used as the reference map, with BVH ray casting.

mod bvh;
mod io;

pub use bvh::{raycast, raycast_brute_force, Bvh, Hit};
pub use io::{load_mesh, save_obj, LoadOptions};

use std::sync::Arc;

use image::RgbImage;
use thiserror::Error;

use crate::geom::Vec3;

pub type Rgb = [f32; 3];

pub const DEFAULT_GRAY: Rgb = [0.5, 0.5, 0.5];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("unsupported mesh format: {0}")]
    UnsupportedFormat(String),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("texture {path}: {message}")]
    Texture { path: String, message: String },
}

/// Texture image with bilinear lookup in `[0,1]` UV space (v up, OBJ convention).
#[derive(Debug, Clone)]
pub struct Texture {
    pub image: RgbImage,
}

impl Texture {
    pub fn new(image: RgbImage) -> Self {
        Self { image }
    }

    /// Bilinear sample with wrap-around addressing.
    pub fn sample(&self, u: f64, v: f64) -> Rgb {
        let (w, h) = (self.image.width() as i64, self.image.height() as i64);
        let x = u.rem_euclid(1.0) * w as f64 - 0.5;
        let y = (1.0 - v.rem_euclid(1.0)) * h as f64 - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let fetch = |xi: i64, yi: i64| {
            let p = self.image.get_pixel(xi.rem_euclid(w) as u32, yi.rem_euclid(h) as u32);
            [p[0] as f32, p[1] as f32, p[2] as f32]
        };
        let (a, b, c, d) = (
            fetch(x0, y0),
            fetch(x0 + 1, y0),
            fetch(x0, y0 + 1),
            fetch(x0 + 1, y0 + 1),
        );
        let mut out = [0.0f32; 3];
        for i in 0..3 {
            let top = a[i] + (b[i] - a[i]) * fx;
            let bottom = c[i] + (d[i] - c[i]) * fx;
            out[i] = (top + (bottom - top) * fy) / 255.0;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.min[i] && self.max[i] >= other.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn is_finite(&self) -> bool {
        self.min.iter().chain(self.max.iter()).all(|v| v.is_finite())
    }
}

/// Indexed triangle mesh in the map frame.
///
/// Colours are always present per vertex. When `texture` and `uvs` are both set
/// the renderer samples the texture instead of interpolating colours.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    colors: Vec<Rgb>,
    uvs: Option<Vec<[f64; 2]>>,
    texture: Option<Arc<Texture>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, colors: Option<Vec<Rgb>>) -> Result<Self, MeshError> {
        let colors = colors.unwrap_or_else(|| vec![DEFAULT_GRAY; vertices.len()]);
        Self::with_texture(vertices, triangles, colors, None, None)
    }

    pub fn with_texture(
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        colors: Vec<Rgb>,
        uvs: Option<Vec<[f64; 2]>>,
        texture: Option<Arc<Texture>>,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        if colors.len() != n {
            return Err(MeshError::Invalid(format!("{} colours for {n} vertices", colors.len())));
        }
        if let Some(uv) = &uvs {
            if uv.len() != n {
                return Err(MeshError::Invalid(format!("{} uvs for {n} vertices", uv.len())));
            }
        }
        for (i, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= n) {
                return Err(MeshError::Invalid(format!("triangle {i} indexes past {n} vertices")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::Invalid(format!("triangle {i} repeats a vertex")));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(MeshError::Invalid("non-finite vertex position".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            colors,
            uvs,
            texture,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            triangles: Vec::new(),
            colors: Vec::new(),
            uvs: None,
            texture: None,
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn uvs(&self) -> Option<&[[f64; 2]]> {
        self.uvs.as_deref()
    }

    pub fn texture(&self) -> Option<&Texture> {
        self.texture.as_deref()
    }

    /// Texture and UVs, when the renderer should sample the texture.
    pub fn texturing(&self) -> Option<(&Texture, &[[f64; 2]])> {
        match (&self.texture, &self.uvs) {
            (Some(t), Some(uv)) => Some((t.as_ref(), uv.as_slice())),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, tri: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[tri];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unit face normal (zero for degenerate triangles).
    pub fn face_normal(&self, tri: usize) -> Vec3 {
        let [a, b, c] = self.corners(tri);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn aabb(&self) -> Aabb {
        let mut b = Aabb::empty();
        for v in &self.vertices {
            b.grow(v);
        }
        b
    }

    /// Replaces texture lookups by per-vertex colours sampled at each UV.
    pub fn bake_texture(&mut self) {
        if let Some((tex, uvs)) = self.texturing() {
            let colors: Vec<Rgb> = uvs.iter().map(|uv| tex.sample(uv[0], uv[1])).collect();
            self.colors = colors;
        }
        self.texture = None;
    }
}

/// Topmost surface height below `(x, y)`, found by casting a ray straight down
/// from just above the mesh.
pub fn floor_height(mesh: &TriangleMesh, bvh: &Bvh, x: f64, y: f64) -> Option<f64> {
    if mesh.is_empty() {
        return None;
    }
    let top = mesh.aabb().max.z + 1.0;
    let origin = Vec3::new(x, y, top);
    raycast(mesh, bvh, &origin, &Vec3::new(0.0, 0.0, -1.0)).map(|hit| {
        let corners = mesh.corners(hit.triangle_id as usize);
        (0..3).map(|i| hit.barycentric[i] * corners[i].z).sum()
    })
}
