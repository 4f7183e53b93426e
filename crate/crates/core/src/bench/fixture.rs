//! Procedural textured city used as the benchmark map.

use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec3;
use crate::mesh::{Texture, TriangleMesh, DEFAULT_GRAY};
use crate::pipeline::derive_seed;

const ATLAS_SIZE: u32 = 2048;
const TILE: u32 = 64;
/// Texels kept clear of each tile border so bilinear lookups stay inside the tile.
const TILE_INSET: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CityParams {
    /// Buildings per side of the square block grid.
    pub blocks: usize,
    pub block_pitch: f64,
    pub footprint: (f64, f64),
    pub height: (f64, f64),
    /// Wall subdivision (columns, rows); every quad gets its own texture tile.
    pub wall_cells: (usize, usize),
    /// Ground quads per side.
    pub ground_cells: usize,
    pub seed: u64,
}

impl CityParams {
    /// About 1.7k triangles over a 100 m square.
    pub fn standard() -> Self {
        Self {
            blocks: 4,
            block_pitch: 22.0,
            footprint: (10.0, 14.0),
            height: (6.0, 20.0),
            wall_cells: (3, 3),
            ground_cells: 16,
            seed: 7,
        }
    }

    /// About 500 triangles.
    pub fn small() -> Self {
        Self {
            blocks: 3,
            block_pitch: 22.0,
            footprint: (10.0, 14.0),
            height: (6.0, 20.0),
            wall_cells: (2, 2),
            ground_cells: 10,
            seed: 11,
        }
    }
}

/// Smoothly interpolated random lattice with spacing `cell` texels, values in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, cell: u32) -> Vec<f32> {
    let n = TILE / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    (0..TILE * TILE)
        .map(|i| {
            let (x, y) = ((i % TILE) as f32 / cell as f32, (i / TILE) as f32 / cell as f32);
            let (x0, y0) = (x.floor() as u32, y.floor() as u32);
            let (fx, fy) = (smooth(x - x0 as f32), smooth(y - y0 as f32));
            let at = |a: u32, b: u32| lattice[(b * n + a) as usize];
            let top = at(x0, y0) + (at(x0 + 1, y0) - at(x0, y0)) * fx;
            let bottom = at(x0, y0 + 1) + (at(x0 + 1, y0 + 1) - at(x0, y0 + 1)) * fx;
            top + (bottom - top) * fy
        })
        .collect()
}

struct Builder {
    vertices: Vec<Vec3>,
    uvs: Vec<[f64; 2]>,
    triangles: Vec<[u32; 3]>,
    atlas: RgbImage,
    next_tile: u32,
    seed: u64,
}

impl Builder {
    fn tile_uv(&self, tile: u32) -> ([f64; 2], [f64; 2]) {
        let per_row = ATLAS_SIZE / TILE;
        let (tx, ty) = ((tile % per_row) as f64, (tile / per_row) as f64);
        let s = ATLAS_SIZE as f64;
        let (x0, x1) = (tx * TILE as f64 + TILE_INSET, (tx + 1.0) * TILE as f64 - TILE_INSET);
        let (y0, y1) = (ty * TILE as f64 + TILE_INSET, (ty + 1.0) * TILE as f64 - TILE_INSET);
        // Texture v points up.
        ([x0 / s, 1.0 - y1 / s], [x1 / s, 1.0 - y0 / s])
    }

    fn paint_tile(&mut self, tile: u32, ground: bool) {
        let per_row = ATLAS_SIZE / TILE;
        let (ox, oy) = ((tile % per_row) * TILE, (tile / per_row) * TILE);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "tile", &[tile as u64]));
        let base: [f32; 3] = if ground {
            let g = rng.gen_range(60.0..110.0);
            [g, g * 0.95, g * 0.9]
        } else {
            [
                rng.gen_range(90.0..200.0),
                rng.gen_range(90.0..200.0),
                rng.gen_range(90.0..200.0),
            ]
        };
        let octaves = [value_noise(&mut rng, 8), value_noise(&mut rng, 4)];
        let mut px: Vec<[f32; 3]> = (0..TILE * TILE)
            .map(|i| {
                let n = 0.6 * octaves[0][i as usize] + 0.4 * octaves[1][i as usize];
                let gain = 0.35 + 1.3 * n;
                base.map(|c| c * gain)
            })
            .collect();
        for _ in 0..rng.gen_range(2..5) {
            let w = rng.gen_range(6..20u32);
            let h = rng.gen_range(6..20u32);
            let x = rng.gen_range(0..TILE - w);
            let y = rng.gen_range(0..TILE - h);
            let c: [f32; 3] = [
                rng.gen_range(10.0..250.0),
                rng.gen_range(10.0..250.0),
                rng.gen_range(10.0..250.0),
            ];
            for yy in y..y + h {
                for xx in x..x + w {
                    px[(yy * TILE + xx) as usize] = c;
                }
            }
        }
        for (i, p) in px.iter().enumerate() {
            let n: f32 = rng.gen_range(-6.0..6.0);
            let (x, y) = (ox + i as u32 % TILE, oy + i as u32 / TILE);
            let rgb = p.map(|c| (c + n).clamp(0.0, 255.0) as u8);
            self.atlas.put_pixel(x, y, image::Rgb(rgb));
        }
    }

    /// Quad `a, b, c, d` (counter-clockwise seen from the front) with its own tile.
    fn quad(&mut self, corners: [Vec3; 4], ground: bool) {
        let tile = self.next_tile;
        self.next_tile += 1;
        assert!(tile < (ATLAS_SIZE / TILE).pow(2), "texture atlas is full");
        self.paint_tile(tile, ground);
        let (lo, hi) = self.tile_uv(tile);
        let base = self.vertices.len() as u32;
        self.vertices.extend(corners);
        self.uvs
            .extend([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]);
        self.triangles.push([base, base + 1, base + 2]);
        self.triangles.push([base, base + 2, base + 3]);
    }

    /// Subdivided vertical wall from `p` to `q` at ground level.
    fn wall(&mut self, p: Vec3, q: Vec3, height: f64, cells: (usize, usize)) {
        let (cols, rows) = cells;
        for i in 0..cols {
            let a = p + (q - p) * (i as f64 / cols as f64);
            let b = p + (q - p) * ((i + 1) as f64 / cols as f64);
            for j in 0..rows {
                let z0 = height * j as f64 / rows as f64;
                let z1 = height * (j + 1) as f64 / rows as f64;
                self.quad(
                    [
                        Vec3::new(a.x, a.y, z0),
                        Vec3::new(b.x, b.y, z0),
                        Vec3::new(b.x, b.y, z1),
                        Vec3::new(a.x, a.y, z1),
                    ],
                    false,
                );
            }
        }
    }
}

/// Ground grid plus a block grid of box buildings, centred on the origin.
pub fn fixture_city(params: &CityParams) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, "layout", &[]));
    let mut b = Builder {
        vertices: Vec::new(),
        uvs: Vec::new(),
        triangles: Vec::new(),
        atlas: RgbImage::new(ATLAS_SIZE, ATLAS_SIZE),
        next_tile: 0,
        seed: params.seed,
    };
    let half = params.blocks as f64 * params.block_pitch / 2.0;
    let cell = 2.0 * half / params.ground_cells as f64;
    for i in 0..params.ground_cells {
        for j in 0..params.ground_cells {
            let (x0, y0) = (-half + i as f64 * cell, -half + j as f64 * cell);
            b.quad(
                [
                    Vec3::new(x0, y0, 0.0),
                    Vec3::new(x0 + cell, y0, 0.0),
                    Vec3::new(x0 + cell, y0 + cell, 0.0),
                    Vec3::new(x0, y0 + cell, 0.0),
                ],
                true,
            );
        }
    }
    for i in 0..params.blocks {
        for j in 0..params.blocks {
            let cx = -half + (i as f64 + 0.5) * params.block_pitch;
            let cy = -half + (j as f64 + 0.5) * params.block_pitch;
            let w = rng.gen_range(params.footprint.0..=params.footprint.1) / 2.0;
            let d = rng.gen_range(params.footprint.0..=params.footprint.1) / 2.0;
            let h = rng.gen_range(params.height.0..=params.height.1);
            let c = [
                Vec3::new(cx - w, cy - d, 0.0),
                Vec3::new(cx + w, cy - d, 0.0),
                Vec3::new(cx + w, cy + d, 0.0),
                Vec3::new(cx - w, cy + d, 0.0),
            ];
            for k in 0..4 {
                b.wall(c[k], c[(k + 1) % 4], h, params.wall_cells);
            }
            b.quad(c.map(|p| Vec3::new(p.x, p.y, h)), false);
        }
    }
    let n = b.vertices.len();
    TriangleMesh::with_texture(
        b.vertices,
        b.triangles,
        vec![DEFAULT_GRAY; n],
        Some(b.uvs),
        Some(Arc::new(Texture::new(b.atlas))),
    )
    .expect("fixture mesh is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let city = fixture_city(&CityParams::standard());
        assert!(
            (1500..2500).contains(&city.triangle_count()),
            "{}",
            city.triangle_count()
        );
        let small = fixture_city(&CityParams::small());
        assert!(
            (450..550).contains(&small.triangle_count()),
            "{}",
            small.triangle_count()
        );
        let bb = city.aabb();
        assert!((bb.min.x + 44.0).abs() < 1e-9 && (bb.max.y - 44.0).abs() < 1e-9);
        assert_eq!(bb.min.z, 0.0);
    }

    #[test]
    fn deterministic() {
        let a = fixture_city(&CityParams::small());
        let b = fixture_city(&CityParams::small());
        assert_eq!(a.vertices(), b.vertices());
        assert_eq!(a.texture().unwrap().image, b.texture().unwrap().image);
    }
}
