//! Wavefront OBJ (+MTL) and PLY readers, and an OBJ writer.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;

use super::{MeshError, Rgb, Texture, TriangleMesh, DEFAULT_GRAY};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Sample the texture into per-vertex colours and drop the image.
    pub bake_texture: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { bake_texture: true }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MeshError + '_ {
    move |source| MeshError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn load_mesh(path: &Path, options: LoadOptions) -> Result<TriangleMesh, MeshError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let mut mesh = match ext.as_str() {
        "obj" => load_obj(path)?,
        "ply" => load_ply(path)?,
        other => return Err(MeshError::UnsupportedFormat(format!("extension '{other}'"))),
    };
    if mesh.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    if options.bake_texture {
        mesh.bake_texture();
    }
    Ok(mesh)
}

#[derive(Default, Clone)]
struct Material {
    diffuse: Option<Rgb>,
    texture: Option<PathBuf>,
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, parts: &[&str]) -> Result<[f64; N], MeshError> {
    if parts.len() < N {
        return Err(parse_err(path, line_no, format!("expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse::<f64>()
            .map_err(|_| parse_err(path, line_no, format!("invalid number '{p}'")))?;
    }
    Ok(out)
}

fn load_mtl(path: &Path) -> Result<HashMap<String, Material>, MeshError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = HashMap::new();
    let mut current: Option<(String, Material)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"newmtl") => {
                if let Some((name, m)) = current.take() {
                    out.insert(name, m);
                }
                let name = parts
                    .get(1)
                    .ok_or_else(|| parse_err(path, i + 1, "newmtl without a name"))?;
                current = Some((name.to_string(), Material::default()));
            }
            Some(&"Kd") => {
                let kd = parse_floats::<3>(path, i + 1, &parts[1..])?;
                if let Some((_, m)) = current.as_mut() {
                    m.diffuse = Some([kd[0] as f32, kd[1] as f32, kd[2] as f32]);
                }
            }
            Some(&"map_Kd") => {
                // Options such as -s/-o are not supported; the file name is the last token.
                let file = parts.last().filter(|_| parts.len() > 1);
                let file = file.ok_or_else(|| parse_err(path, i + 1, "map_Kd without a file"))?;
                if let Some((_, m)) = current.as_mut() {
                    m.texture = Some(dir.join(file));
                }
            }
            _ => {}
        }
    }
    if let Some((name, m)) = current.take() {
        out.insert(name, m);
    }
    Ok(out)
}

fn load_texture(path: &Path) -> Result<Texture, MeshError> {
    let img = image::open(path).map_err(|e| MeshError::Texture {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(Texture::new(img.to_rgb8()))
}

fn resolve_index(path: &Path, line_no: usize, token: &str, count: usize, what: &str) -> Result<usize, MeshError> {
    let raw: i64 = token
        .parse()
        .map_err(|_| parse_err(path, line_no, format!("invalid {what} index '{token}'")))?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        count as i64 + raw
    } else {
        -1
    };
    if idx < 0 || idx as usize >= count {
        return Err(parse_err(
            path,
            line_no,
            format!("face references {what} {raw}, but only {count} are defined"),
        ));
    }
    Ok(idx as usize)
}

type CornerKey = (usize, Option<usize>, Option<usize>);

fn load_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let mut positions: Vec<Vec3> = Vec::new();
    let mut vertex_colors: Vec<Option<Rgb>> = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    let mut materials: HashMap<String, Material> = HashMap::new();
    let mut material_names: Vec<String> = Vec::new();
    let mut current_material: Option<usize> = None;

    let mut faces: Vec<Vec<CornerKey>> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        let Some(&keyword) = parts.first() else { continue };
        match keyword {
            "v" => {
                let p = parse_floats::<3>(path, line_no, &parts[1..])?;
                positions.push(Vec3::new(p[0], p[1], p[2]));
                let color = if parts.len() >= 7 {
                    let c = parse_floats::<3>(path, line_no, &parts[4..])?;
                    Some([c[0] as f32, c[1] as f32, c[2] as f32])
                } else {
                    None
                };
                vertex_colors.push(color);
            }
            "vt" => {
                let t = parse_floats::<2>(path, line_no, &parts[1..])?;
                texcoords.push(t);
            }
            "mtllib" => {
                for file in &parts[1..] {
                    let mtl_path = dir.join(file);
                    if mtl_path.exists() {
                        materials.extend(load_mtl(&mtl_path)?);
                    } else {
                        warn!("event=missing_mtl path={}", mtl_path.display());
                    }
                }
            }
            "usemtl" => {
                let name = parts.get(1).map(|s| s.to_string()).unwrap_or_default();
                current_material = Some(match material_names.iter().position(|n| *n == name) {
                    Some(idx) => idx,
                    None => {
                        material_names.push(name);
                        material_names.len() - 1
                    }
                });
            }
            "f" => {
                if parts.len() < 4 {
                    return Err(parse_err(path, line_no, "face needs at least 3 vertices"));
                }
                let mut corners = Vec::with_capacity(parts.len() - 1);
                for token in &parts[1..] {
                    let mut fields = token.split('/');
                    let v = fields.next().unwrap_or("");
                    let vi = resolve_index(path, line_no, v, positions.len(), "vertex")?;
                    let ti = match fields.next() {
                        Some(t) if !t.is_empty() => Some(resolve_index(path, line_no, t, texcoords.len(), "texcoord")?),
                        _ => None,
                    };
                    corners.push((vi, ti, current_material));
                }
                faces.push(corners);
            }
            _ => {}
        }
    }

    // Output vertices are unique (position, uv, material) combinations. The first
    // combination seen for a position keeps that position's index, so plain meshes
    // keep their numbering.
    let mut slot_key: Vec<Option<CornerKey>> = vec![None; positions.len()];
    let mut remap: HashMap<CornerKey, u32> = HashMap::new();
    let mut out_vertices: Vec<Vec3> = positions.clone();
    let mut out_colors: Vec<Option<Rgb>> = vertex_colors.clone();
    let mut out_uvs: Vec<Option<[f64; 2]>> = vec![None; positions.len()];
    let mut out_material: Vec<Option<usize>> = vec![None; positions.len()];
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut dropped = 0usize;
    for corners in &faces {
        let ids: Vec<u32> = corners
            .iter()
            .map(|&key| {
                let (vi, ti, mat) = key;
                if let Some(&id) = remap.get(&key) {
                    return id;
                }
                let id = if slot_key[vi].is_none() {
                    slot_key[vi] = Some(key);
                    vi as u32
                } else {
                    out_vertices.push(positions[vi]);
                    out_colors.push(vertex_colors[vi]);
                    out_uvs.push(None);
                    out_material.push(None);
                    (out_vertices.len() - 1) as u32
                };
                out_uvs[id as usize] = ti.map(|t| texcoords[t]);
                out_material[id as usize] = mat;
                remap.insert(key, id);
                id
            })
            .collect();
        for k in 1..ids.len() - 1 {
            let tri = [ids[0], ids[k], ids[k + 1]];
            let same_pos = |a: u32, b: u32| out_vertices[a as usize] == out_vertices[b as usize];
            let repeated = tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2];
            if repeated || (same_pos(tri[0], tri[1]) && same_pos(tri[1], tri[2])) {
                dropped += 1;
            } else {
                triangles.push(tri);
            }
        }
    }
    if dropped > 0 {
        warn!("event=degenerate_faces_dropped path={} count={dropped}", path.display());
    }

    // Resolve materials in first-use order.
    let resolved: Vec<Material> = material_names
        .iter()
        .map(|n| materials.get(n).cloned().unwrap_or_default())
        .collect();
    let texture_paths: Vec<&PathBuf> = {
        let mut seen: Vec<&PathBuf> = Vec::new();
        for m in &resolved {
            if let Some(t) = &m.texture {
                if !seen.contains(&t) {
                    seen.push(t);
                }
            }
        }
        seen
    };
    let textures: Vec<Texture> = texture_paths
        .iter()
        .map(|p| load_texture(p))
        .collect::<Result<_, _>>()?;

    let n = out_vertices.len();
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let material = out_material[i].map(|m| &resolved[m]);
        let tex = material
            .and_then(|m| m.texture.as_ref())
            .and_then(|t| texture_paths.iter().position(|p| *p == t));
        let color = match (tex, out_uvs[i]) {
            (Some(t), Some(uv)) => textures[t].sample(uv[0], uv[1]),
            _ => out_colors[i]
                .or_else(|| material.and_then(|m| m.diffuse))
                .unwrap_or(DEFAULT_GRAY),
        };
        colors.push(color);
    }

    // A single texture applied to every vertex can stay live for the renderer.
    let referenced: Vec<bool> = {
        let mut r = vec![false; out_vertices.len()];
        for t in &triangles {
            for &v in t {
                r[v as usize] = true;
            }
        }
        r
    };
    let keep_texture = textures.len() == 1
        && (0..out_vertices.len()).all(|i| {
            !referenced[i] || (out_uvs[i].is_some() && out_material[i].is_some_and(|m| resolved[m].texture.is_some()))
        });
    if textures.len() > 1 {
        warn!(
            "event=multiple_textures path={} count={} action=baked",
            path.display(),
            textures.len()
        );
    }
    let (uvs, texture) = if keep_texture {
        (
            Some(out_uvs.iter().map(|uv| uv.unwrap_or([0.0, 0.0])).collect()),
            textures.into_iter().next().map(Arc::new),
        )
    } else {
        (None, None)
    };
    TriangleMesh::with_texture(out_vertices, triangles, colors, uvs, texture)
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyType::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }

    fn is_integer_color(self) -> bool {
        !matches!(self, PlyType::F32 | PlyType::F64)
    }
}

#[derive(Clone, Debug)]
enum PlyProperty {
    Scalar {
        name: String,
        ty: PlyType,
    },
    List {
        name: String,
        count: PlyType,
        item: PlyType,
    },
}

#[derive(Clone, Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn next_line(bytes: &[u8], pos: &mut usize, line_no: &mut usize) -> Option<String> {
    if *pos >= bytes.len() {
        return None;
    }
    let end = bytes[*pos..]
        .iter()
        .position(|&b| b == b'\n')
        .map_or(bytes.len(), |e| *pos + e);
    let line = String::from_utf8_lossy(&bytes[*pos..end])
        .trim_end_matches('\r')
        .to_string();
    *pos = (end + 1).min(bytes.len());
    *line_no += 1;
    Some(line)
}

fn load_ply(path: &Path) -> Result<TriangleMesh, MeshError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0usize;
    let mut line_no = 0usize;
    if next_line(&bytes, &mut pos, &mut line_no).as_deref() != Some("ply") {
        return Err(MeshError::UnsupportedFormat("missing 'ply' magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line =
            next_line(&bytes, &mut pos, &mut line_no).ok_or_else(|| parse_err(path, line_no, "unterminated header"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"format") => {
                binary = Some(match parts.get(1) {
                    Some(&"ascii") => false,
                    Some(&"binary_little_endian") => true,
                    other => {
                        return Err(MeshError::UnsupportedFormat(format!(
                            "PLY format {}",
                            other.unwrap_or(&"?")
                        )))
                    }
                });
            }
            Some(&"element") => {
                let name = parts
                    .get(1)
                    .ok_or_else(|| parse_err(path, line_no, "element without name"))?;
                let count = parts
                    .get(2)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, line_no, "element without count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some(&"property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, line_no, "property before element"))?;
                let bad = || parse_err(path, line_no, "malformed property");
                if parts.get(1) == Some(&"list") {
                    let count = parts.get(2).and_then(|t| PlyType::parse(t)).ok_or_else(bad)?;
                    let item = parts.get(3).and_then(|t| PlyType::parse(t)).ok_or_else(bad)?;
                    let name = parts.get(4).ok_or_else(bad)?.to_string();
                    el.properties.push(PlyProperty::List { name, count, item });
                } else {
                    let ty = parts.get(1).and_then(|t| PlyType::parse(t)).ok_or_else(bad)?;
                    let name = parts.get(2).ok_or_else(bad)?.to_string();
                    el.properties.push(PlyProperty::Scalar { name, ty });
                }
            }
            Some(&"end_header") => break,
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, line_no, "missing format line"))?;

    let mut vertices = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut has_color = false;
    let mut triangles = Vec::new();

    let mut tokens: Box<dyn Iterator<Item = (usize, String)>> = if binary {
        Box::new(std::iter::empty())
    } else {
        let body = String::from_utf8_lossy(&bytes[pos..]).to_string();
        let start_line = line_no;
        let owned: Vec<(usize, String)> = body
            .lines()
            .enumerate()
            .flat_map(|(i, l)| {
                l.split_whitespace()
                    .map(|t| (start_line + i + 1, t.to_string()))
                    .collect::<Vec<_>>()
            })
            .collect();
        Box::new(owned.into_iter())
    };
    let mut read_value = |ty: PlyType, pos: &mut usize| -> Result<f64, MeshError> {
        if binary {
            let size = ty.size();
            if *pos + size > bytes.len() {
                return Err(parse_err(path, line_no, "truncated binary body"));
            }
            let v = ty.read_le(&bytes[*pos..*pos + size]);
            *pos += size;
            Ok(v)
        } else {
            let (ln, tok) = tokens
                .next()
                .ok_or_else(|| parse_err(path, line_no, "unexpected end of ascii body"))?;
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, ln, format!("invalid number '{tok}'")))
        }
    };

    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0f64; 3];
            let mut rgb = [DEFAULT_GRAY[0] as f64; 3];
            let mut face: Vec<i64> = Vec::new();
            for prop in &el.properties {
                match prop {
                    PlyProperty::Scalar { name, ty } => {
                        let v = read_value(*ty, &mut pos)?;
                        if el.name == "vertex" {
                            let scale = if ty.is_integer_color() { 255.0 } else { 1.0 };
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                "red" | "r" => {
                                    rgb[0] = v / scale;
                                    has_color = true
                                }
                                "green" | "g" => rgb[1] = v / scale,
                                "blue" | "b" => rgb[2] = v / scale,
                                _ => {}
                            }
                        }
                    }
                    PlyProperty::List { name, count, item } => {
                        let n = read_value(*count, &mut pos)? as usize;
                        for _ in 0..n {
                            let v = read_value(*item, &mut pos)?;
                            if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                                face.push(v as i64);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                colors.push([rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
            } else if el.name == "face" {
                if face.len() < 3 {
                    return Err(parse_err(path, line_no, "face with fewer than 3 vertices"));
                }
                for &idx in &face {
                    if idx < 0 || idx as usize >= vertices.len() {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("face references vertex {idx}, but only {} are defined", vertices.len()),
                        ));
                    }
                }
                for k in 1..face.len() - 1 {
                    let tri = [face[0] as u32, face[k] as u32, face[k + 1] as u32];
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                        triangles.push(tri);
                    }
                }
            }
        }
    }
    if !has_color {
        colors = vec![DEFAULT_GRAY; vertices.len()];
    }
    TriangleMesh::new(vertices, triangles, Some(colors))
}

/// Writes `mesh` as OBJ. A live texture is written next to it as `<stem>.png`
/// with a matching `<stem>.mtl`; otherwise colours go on the `v` lines.
pub fn save_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| MeshError::Invalid(format!("bad output path {}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    let textured = mesh.texturing();
    if let Some((tex, _)) = textured {
        let mtl_name = format!("{stem}.mtl");
        let png_name = format!("{stem}.png");
        let png_path = dir.join(&png_name);
        tex.image.save(&png_path).map_err(|e| MeshError::Texture {
            path: png_path.display().to_string(),
            message: e.to_string(),
        })?;
        let mtl_path = dir.join(&mtl_name);
        fs::write(&mtl_path, format!("newmtl surface\nKd 1 1 1\nmap_Kd {png_name}\n")).map_err(io_err(&mtl_path))?;
        out.push_str(&format!("mtllib {mtl_name}\n"));
    }
    for (v, c) in mesh.vertices().iter().zip(mesh.colors()) {
        if textured.is_some() {
            out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        } else {
            out.push_str(&format!("v {} {} {} {} {} {}\n", v.x, v.y, v.z, c[0], c[1], c[2]));
        }
    }
    if let Some((_, uvs)) = textured {
        for uv in uvs {
            out.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
        }
        out.push_str("usemtl surface\n");
    }
    for t in mesh.triangles() {
        let [a, b, c] = [t[0] + 1, t[1] + 1, t[2] + 1];
        if textured.is_some() {
            out.push_str(&format!("f {a}/{a} {b}/{b} {c}/{c}\n"));
        } else {
            out.push_str(&format!("f {a} {b} {c}\n"));
        }
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}
