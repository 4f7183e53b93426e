//! Tiled software rasterizer producing colour and metric depth per pose.
//!
//! Triangles are clipped against the near plane, projected, binned into
//! square tiles and rasterised with a z-buffer holding camera-space z. Tiles
//! are independent and merged in a fixed order, so output is bit-identical
//! regardless of the number of worker threads.

use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{Intrinsics, Pose, Vec2, Vec3};
use crate::mesh::{Rgb, TriangleMesh};

pub const NEAR_PLANE: f64 = 0.05;
pub const SHADING_FLOOR: f32 = 0.2;
/// Depth value of pixels no triangle covered.
pub const DEPTH_SENTINEL: f64 = f64::INFINITY;
pub const NO_TRIANGLE: u32 = u32::MAX;
pub const DEPTH_MAGIC: &[u8; 4] = b"RNCD";

const TILE: usize = 32;

#[derive(Debug, Error)]
pub enum RenderIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("not a depth file (bad magic)")]
    BadMagic,
    #[error("depth file truncated")]
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Headlight shading `max(0.2, |n · view|)`; off gives pure flat colour.
    pub shading: bool,
    pub background: Rgb,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            shading: true,
            background: [0.0; 3],
        }
    }
}

/// Colour, depth and triangle-id buffers for one virtual view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Vec<Rgb>,
    /// Camera-space z in metres, [`DEPTH_SENTINEL`] where empty.
    pub depth: Vec<f64>,
    /// Front-most triangle per pixel, [`NO_TRIANGLE`] where empty.
    pub triangle_ids: Vec<u32>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width() + x]
    }

    /// Depth at the pixel nearest to a continuous position, if on the image.
    pub fn depth_nearest(&self, px: &Vec2) -> Option<f64> {
        let (x, y) = nearest_pixel(px, self.width(), self.height())?;
        Some(self.depth_at(x, y))
    }

    pub fn covered_fraction(&self) -> f64 {
        let covered = self.depth.iter().filter(|d| d.is_finite()).count();
        covered as f64 / self.depth.len().max(1) as f64
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.intrinsics.width, self.intrinsics.height);
        for (p, c) in img.pixels_mut().zip(&self.rgb) {
            *p = image::Rgb([quantize(c[0]), quantize(c[1]), quantize(c[2])]);
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderIoError> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Writes the depth map as `RNCD` + u32 width + u32 height + u32 reserved,
    /// followed by little-endian f32 values in row-major order.
    pub fn write_depth<W: Write>(&self, mut w: W) -> Result<(), RenderIoError> {
        w.write_all(DEPTH_MAGIC)?;
        w.write_all(&self.intrinsics.width.to_le_bytes())?;
        w.write_all(&self.intrinsics.height.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.depth.len() * 4);
        for d in &self.depth {
            buf.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// Depth map read back from an `RNCD` file.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

pub fn read_depth<R: Read>(mut r: R) -> Result<DepthMap, RenderIoError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| RenderIoError::Truncated)?;
    if &header[0..4] != DEPTH_MAGIC {
        return Err(RenderIoError::BadMagic);
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let n = width as usize * height as usize;
    let mut body = vec![0u8; n * 4];
    r.read_exact(&mut body).map_err(|_| RenderIoError::Truncated)?;
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthMap { width, height, values })
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn nearest_pixel(px: &Vec2, width: usize, height: usize) -> Option<(usize, usize)> {
    let (x, y) = (px.x.round(), px.y.round());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 || !x.is_finite() || !y.is_finite() {
        return None;
    }
    Some((x as usize, y as usize))
}

/// A vertex after the near-plane clip, in camera space with its attributes.
#[derive(Clone, Copy)]
struct ClipVertex {
    cam: Vec3,
    color: Rgb,
    uv: [f64; 2],
}

impl ClipVertex {
    fn lerp(&self, other: &ClipVertex, s: f64) -> ClipVertex {
        let sf = s as f32;
        ClipVertex {
            cam: self.cam + (other.cam - self.cam) * s,
            color: [
                self.color[0] + (other.color[0] - self.color[0]) * sf,
                self.color[1] + (other.color[1] - self.color[1]) * sf,
                self.color[2] + (other.color[2] - self.color[2]) * sf,
            ],
            uv: [
                self.uv[0] + (other.uv[0] - self.uv[0]) * s,
                self.uv[1] + (other.uv[1] - self.uv[1]) * s,
            ],
        }
    }
}

/// Screen-space triangle ready for rasterisation.
struct ScreenTriangle {
    id: u32,
    /// Screen positions.
    p: [Vec2; 3],
    /// 1/z at each corner.
    inv_z: [f64; 3],
    color: [Rgb; 3],
    uv: [[f64; 2]; 3],
    /// Camera-frame unit normal.
    normal: Vec3,
    /// Inclusive pixel bounds.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    inv_area: f64,
}

fn clip_near(tri: [ClipVertex; 3]) -> Vec<[ClipVertex; 3]> {
    let inside = tri.map(|v| v.cam.z >= NEAR_PLANE);
    let count = inside.iter().filter(|&&b| b).count();
    match count {
        3 => vec![tri],
        0 => Vec::new(),
        _ => {
            // Sutherland-Hodgman against z = near, yields a triangle or a quad.
            let mut poly: Vec<ClipVertex> = Vec::with_capacity(4);
            for i in 0..3 {
                let a = tri[i];
                let b = tri[(i + 1) % 3];
                let (ina, inb) = (inside[i], inside[(i + 1) % 3]);
                if ina {
                    poly.push(a);
                }
                if ina != inb {
                    let s = (NEAR_PLANE - a.cam.z) / (b.cam.z - a.cam.z);
                    let mut v = a.lerp(&b, s);
                    v.cam.z = NEAR_PLANE;
                    poly.push(v);
                }
            }
            (1..poly.len() - 1).map(|k| [poly[0], poly[k], poly[k + 1]]).collect()
        }
    }
}

fn setup_triangles(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics) -> Vec<ScreenTriangle> {
    let cam: Vec<Vec3> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();
    let uvs = mesh.texturing().map(|(_, uv)| uv);
    let (w, h) = (k.width as usize, k.height as usize);
    let mut out = Vec::new();
    for (id, tri) in mesh.triangles().iter().enumerate() {
        let idx = tri.map(|i| i as usize);
        if idx.iter().all(|&i| cam[i].z < NEAR_PLANE) {
            continue;
        }
        let normal_world = mesh.face_normal(id);
        let normal = pose.rotation * normal_world;
        let verts = idx.map(|i| ClipVertex {
            cam: cam[i],
            color: mesh.colors()[i],
            uv: uvs.map_or([0.0, 0.0], |uv| uv[i]),
        });
        for piece in clip_near(verts) {
            let p = piece.map(|v| k.project_camera(&v.cam));
            let area = (p[1] - p[0]).perp(&(p[2] - p[0]));
            if !(area.abs() > 1e-12) {
                continue;
            }
            let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min).ceil();
            let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max).floor();
            let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min).ceil();
            let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max).floor();
            if max_x < 0.0
                || max_y < 0.0
                || min_x > (w - 1) as f64
                || min_y > (h - 1) as f64
                || min_x > max_x
                || min_y > max_y
            {
                continue;
            }
            out.push(ScreenTriangle {
                id: id as u32,
                p,
                inv_z: piece.map(|v| 1.0 / v.cam.z),
                color: piece.map(|v| v.color),
                uv: piece.map(|v| v.uv),
                normal,
                x0: min_x.max(0.0) as usize,
                x1: (max_x as usize).min(w - 1),
                y0: min_y.max(0.0) as usize,
                y1: (max_y as usize).min(h - 1),
                inv_area: 1.0 / area,
            });
        }
    }
    out
}

struct TileOut {
    x0: usize,
    y0: usize,
    tw: usize,
    th: usize,
    rgb: Vec<Rgb>,
    depth: Vec<f64>,
    ids: Vec<u32>,
}

fn raster_tile(
    tris: &[ScreenTriangle],
    bin: &[u32],
    (x0, y0, tw, th): (usize, usize, usize, usize),
    mesh: &TriangleMesh,
    k: &Intrinsics,
    opts: &RenderOptions,
) -> TileOut {
    let mut depth = vec![DEPTH_SENTINEL; tw * th];
    let mut ids = vec![NO_TRIANGLE; tw * th];
    let mut winner: Vec<u32> = vec![u32::MAX; tw * th];
    let mut bary_buf: Vec<[f64; 3]> = vec![[0.0; 3]; tw * th];

    for &ti in bin {
        let t = &tris[ti as usize];
        let xs = t.x0.max(x0);
        let xe = t.x1.min(x0 + tw - 1);
        let ys = t.y0.max(y0);
        let ye = t.y1.min(y0 + th - 1);
        if xs > xe || ys > ye {
            continue;
        }
        for y in ys..=ye {
            let py = y as f64;
            for x in xs..=xe {
                let q = Vec2::new(x as f64, py);
                // Edge functions normalised to barycentrics.
                let w0 = (t.p[2] - t.p[1]).perp(&(q - t.p[1])) * t.inv_area;
                let w1 = (t.p[0] - t.p[2]).perp(&(q - t.p[2])) * t.inv_area;
                let w2 = (t.p[1] - t.p[0]).perp(&(q - t.p[0])) * t.inv_area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * t.inv_z[0] + w1 * t.inv_z[1] + w2 * t.inv_z[2];
                if !(inv_z > 0.0) {
                    continue;
                }
                let z = 1.0 / inv_z;
                let li = (y - y0) * tw + (x - x0);
                // Strict test with triangles visited in id order: equal depth keeps the lower id.
                if z < depth[li] {
                    depth[li] = z;
                    ids[li] = t.id;
                    winner[li] = ti;
                    bary_buf[li] = [w0 * t.inv_z[0] * z, w1 * t.inv_z[1] * z, w2 * t.inv_z[2] * z];
                }
            }
        }
    }

    let texturing = mesh.texturing();
    let mut rgb = vec![opts.background; tw * th];
    for li in 0..tw * th {
        let ti = winner[li];
        if ti == u32::MAX {
            continue;
        }
        let t = &tris[ti as usize];
        let b = bary_buf[li];
        let mut c = match texturing {
            Some((tex, _)) => {
                let u = b[0] * t.uv[0][0] + b[1] * t.uv[1][0] + b[2] * t.uv[2][0];
                let v = b[0] * t.uv[0][1] + b[1] * t.uv[1][1] + b[2] * t.uv[2][1];
                tex.sample(u, v)
            }
            None => {
                let bf = b.map(|v| v as f32);
                [0, 1, 2].map(|ch| bf[0] * t.color[0][ch] + bf[1] * t.color[1][ch] + bf[2] * t.color[2][ch])
            }
        };
        if opts.shading {
            let (x, y) = (x0 + li % tw, y0 + li / tw);
            let view = k.ray(&Vec2::new(x as f64, y as f64)).normalize();
            let s = (t.normal.dot(&view).abs() as f32).max(SHADING_FLOOR);
            c = c.map(|v| v * s);
        }
        rgb[li] = c;
    }
    TileOut {
        x0,
        y0,
        tw,
        th,
        rgb,
        depth,
        ids,
    }
}

pub fn render(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics) -> RenderedView {
    render_with(mesh, pose, k, &RenderOptions::default())
}

pub fn render_with(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics, opts: &RenderOptions) -> RenderedView {
    let (w, h) = (k.width as usize, k.height as usize);
    let n = w * h;
    let mut view = RenderedView {
        rgb: vec![opts.background; n],
        depth: vec![DEPTH_SENTINEL; n],
        triangle_ids: vec![NO_TRIANGLE; n],
        pose: *pose,
        intrinsics: *k,
    };
    if n == 0 || mesh.is_empty() {
        return view;
    }
    let tris = setup_triangles(mesh, pose, k);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, t) in tris.iter().enumerate() {
        for ty in t.y0 / TILE..=t.y1 / TILE {
            for tx in t.x0 / TILE..=t.x1 / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    let tiles: Vec<TileOut> = bins
        .par_iter()
        .enumerate()
        .map(|(bi, bin)| {
            let (tx, ty) = (bi % tiles_x, bi / tiles_x);
            let (x0, y0) = (tx * TILE, ty * TILE);
            let rect = (x0, y0, TILE.min(w - x0), TILE.min(h - y0));
            raster_tile(&tris, bin, rect, mesh, k, opts)
        })
        .collect();
    for tile in tiles {
        for row in 0..tile.th {
            let dst = (tile.y0 + row) * w + tile.x0;
            let src = row * tile.tw;
            view.rgb[dst..dst + tile.tw].copy_from_slice(&tile.rgb[src..src + tile.tw]);
            view.depth[dst..dst + tile.tw].copy_from_slice(&tile.depth[src..src + tile.tw]);
            view.triangle_ids[dst..dst + tile.tw].copy_from_slice(&tile.ids[src..src + tile.tw]);
        }
    }
    view
}

/// Renders every pose; output order matches `poses`.
pub fn render_batch(mesh: &TriangleMesh, poses: &[Pose], k: &Intrinsics) -> Vec<RenderedView> {
    poses.par_iter().map(|p| render(mesh, p, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{backproject, Mat3};
    use crate::mesh::{raycast, Bvh};

    fn k_small() -> Intrinsics {
        Intrinsics::centered(60.0, 64, 48)
    }

    #[test]
    fn empty_mesh_renders_background() {
        let v = render(&TriangleMesh::empty(), &Pose::identity(), &k_small());
        assert!(v.depth.iter().all(|d| *d == DEPTH_SENTINEL));
        assert!(v.rgb.iter().all(|c| *c == [0.0; 3]));
        assert!(v.triangle_ids.iter().all(|t| *t == NO_TRIANGLE));
    }

    #[test]
    fn fronto_parallel_plane_has_exact_depth() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-50.0, -50.0, 2.0),
                Vec3::new(50.0, -50.0, 2.0),
                Vec3::new(0.0, 80.0, 2.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let v = render(&mesh, &Pose::identity(), &k_small());
        assert!(v.depth.iter().all(|d| (d - 2.0).abs() < 1e-6));
    }

    #[test]
    fn near_plane_clipping_keeps_visible_part() {
        // Floor running from behind the camera to far in front.
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-5.0, 1.0, -5.0),
                Vec3::new(5.0, 1.0, -5.0),
                Vec3::new(0.0, 1.0, 50.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let k = k_small();
        let v = render(&mesh, &Pose::identity(), &k);
        let covered: Vec<usize> = (0..v.depth.len()).filter(|&i| v.depth[i].is_finite()).collect();
        assert!(!covered.is_empty());
        for i in covered {
            let (x, y) = (i % v.width(), i / v.width());
            let d = v.depth[i];
            assert!(d >= NEAR_PLANE - 1e-12);
            // All covered pixels are on the plane y_cam = 1.
            let p = backproject(&Vec2::new(x as f64, y as f64), d, &Pose::identity(), &k).unwrap();
            assert!((p.y - 1.0).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn depth_agrees_with_raycast() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-3.0, -2.0, 5.0),
                Vec3::new(3.0, -2.0, 9.0),
                Vec3::new(0.0, 3.0, 6.0),
                Vec3::new(-1.0, -1.0, 4.0),
                Vec3::new(2.0, 0.0, 4.5),
                Vec3::new(0.0, 2.0, 3.5),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
            None,
        )
        .unwrap();
        let bvh = Bvh::build(&mesh);
        let k = k_small();
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.1, -0.2, 0.3));
        let v = render(&mesh, &pose, &k);
        let mut checked = 0;
        for y in 0..v.height() {
            for x in 0..v.width() {
                let d = v.depth_at(x, y);
                if !d.is_finite() {
                    continue;
                }
                let center = pose.center();
                let through = backproject(&Vec2::new(x as f64, y as f64), 1.0, &pose, &k).unwrap();
                let dir = (through - center).normalize();
                let Some(hit) = raycast(&mesh, &bvh, &center, &dir) else {
                    continue;
                };
                let z = pose.transform(&(center + dir * hit.t)).z;
                assert!((z - d).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn headlight_shading_and_flat_colour() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-50.0, -50.0, 2.0),
                Vec3::new(50.0, -50.0, 2.0),
                Vec3::new(0.0, 80.0, 2.0),
            ],
            vec![[0, 1, 2]],
            Some(vec![[1.0, 0.5, 0.25]; 3]),
        )
        .unwrap();
        let k = k_small();
        let flat = render_with(
            &mesh,
            &Pose::identity(),
            &k,
            &RenderOptions {
                shading: false,
                ..Default::default()
            },
        );
        assert!(flat
            .rgb
            .iter()
            .all(|c| (c[0] - 1.0).abs() < 1e-6 && (c[2] - 0.25).abs() < 1e-6));
        let shaded = render(&mesh, &Pose::identity(), &k);
        let centre = shaded.rgb[(k.height as usize / 2) * k.width as usize + k.width as usize / 2];
        assert!(centre[0] > 0.99);
        let corner = shaded.rgb[0];
        assert!(corner[0] < centre[0] && corner[0] >= SHADING_FLOOR);
    }

    #[test]
    fn depth_file_round_trip() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::new(-1.0, -1.0, 3.0),
                Vec3::new(1.0, -1.0, 3.0),
                Vec3::new(0.0, 1.0, 3.0),
            ],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        let v = render(&mesh, &Pose::identity(), &k_small());
        let mut buf = Vec::new();
        v.write_depth(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"RNCD");
        assert_eq!(buf.len(), 16 + 4 * v.depth.len());
        let back = read_depth(buf.as_slice()).unwrap();
        assert_eq!((back.width, back.height), (64, 48));
        for (a, b) in back.values.iter().zip(&v.depth) {
            assert_eq!(*a, *b as f32);
        }
        assert!(matches!(
            read_depth(&b"XXXX0000000000000"[..]),
            Err(RenderIoError::BadMagic)
        ));
    }
}
