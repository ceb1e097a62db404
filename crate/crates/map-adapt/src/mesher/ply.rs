//! PLY serialization for extracted meshes.
//!
//! Meshes are stored with double-precision positions, one byte per color
//! channel and an unsigned 16 bit semantic label per vertex. Faces are
//! triangles. Both ascii and binary little-endian encodings are written;
//! the ascii form prints floats in shortest round-trip notation, so the
//! two encodings of the same mesh decode to identical geometry.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Point3;

use super::{Mesh, MeshVertex};
use crate::{Error, Result};

/// Body encoding of a PLY file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Serializes a mesh to PLY bytes.
pub fn ply_bytes(mesh: &Mesh, format: PlyFormat) -> Result<Vec<u8>> {
    mesh.validate()?;
    let format_line = match format {
        PlyFormat::Ascii => "format ascii 1.0",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0",
    };
    let mut header = String::new();
    let _ = writeln!(header, "ply");
    let _ = writeln!(header, "{format_line}");
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    let _ = writeln!(header, "property double x");
    let _ = writeln!(header, "property double y");
    let _ = writeln!(header, "property double z");
    let _ = writeln!(header, "property uchar red");
    let _ = writeln!(header, "property uchar green");
    let _ = writeln!(header, "property uchar blue");
    let _ = writeln!(header, "property ushort label");
    let _ = writeln!(header, "element face {}", mesh.triangles.len());
    let _ = writeln!(header, "property list uchar uint vertex_indices");
    let _ = writeln!(header, "end_header");
    let mut bytes = header.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for v in &mesh.vertices {
                let _ = writeln!(
                    body,
                    "{} {} {} {} {} {} {}",
                    v.position.x, v.position.y, v.position.z, v.color[0], v.color[1], v.color[2], v.label
                );
            }
            for t in &mesh.triangles {
                let _ = writeln!(body, "3 {} {} {}", t[0], t[1], t[2]);
            }
            bytes.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for v in &mesh.vertices {
                bytes.extend_from_slice(&v.position.x.to_le_bytes());
                bytes.extend_from_slice(&v.position.y.to_le_bytes());
                bytes.extend_from_slice(&v.position.z.to_le_bytes());
                bytes.extend_from_slice(&v.color);
                bytes.extend_from_slice(&v.label.to_le_bytes());
            }
            for t in &mesh.triangles {
                bytes.push(3);
                for &i in t {
                    bytes.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
    }
    Ok(bytes)
}

/// Writes a mesh to a PLY file.
pub fn write_ply(mesh: &Mesh, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = ply_bytes(mesh, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a mesh from a PLY file written by [`write_ply`].
///
/// Accepts ascii and binary little-endian files. Positions may be stored
/// as float or double; unknown vertex properties are skipped. Missing
/// color or label properties read as zero.
pub fn read_ply(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

/// Scalar property types that can appear in a supported PLY header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

/// Where a vertex property lands in the decoded mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VertexField {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
    Skip,
}

struct VertexLayout {
    properties: Vec<(Scalar, VertexField)>,
}

struct FaceLayout {
    count: Scalar,
    index: Scalar,
}

/// Reads one scalar from a little-endian byte cursor as f64.
fn read_scalar(bytes: &[u8], at: &mut usize, scalar: Scalar) -> Option<f64> {
    let size = scalar.size();
    let slice = bytes.get(*at..*at + size)?;
    *at += size;
    Some(match scalar {
        Scalar::I8 => slice[0] as i8 as f64,
        Scalar::U8 => slice[0] as f64,
        Scalar::I16 => i16::from_le_bytes([slice[0], slice[1]]) as f64,
        Scalar::U16 => u16::from_le_bytes([slice[0], slice[1]]) as f64,
        Scalar::I32 => i32::from_le_bytes(slice.try_into().unwrap()) as f64,
        Scalar::U32 => u32::from_le_bytes(slice.try_into().unwrap()) as f64,
        Scalar::F32 => f32::from_le_bytes(slice.try_into().unwrap()) as f64,
        Scalar::F64 => f64::from_le_bytes(slice.try_into().unwrap()),
    })
}

fn parse_ply(bytes: &[u8], path: &Path) -> Result<Mesh> {
    let fmt = |message: String| Error::format(path, message);
    // The header is ascii; find its end marker first.
    let marker = b"end_header";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| fmt("missing end_header".into()))?;
    let mut body_start = header_end + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| fmt("header is not valid ascii".into()))?;

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(fmt("missing ply magic line".into()));
    }
    let mut format = None;
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut vertex = VertexLayout {
        properties: Vec::new(),
    };
    let mut face: Option<FaceLayout> = None;
    let mut current = "";
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] => {}
            ["format", kind, "1.0"] => {
                format = Some(match *kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(fmt(format!("unsupported format {other}"))),
                });
            }
            ["element", "vertex", n] => {
                n_vertices = Some(parse_count(n, path)?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = Some(parse_count(n, path)?);
                current = "face";
            }
            ["element", name, n] => {
                parse_count(n, path)?;
                return Err(fmt(format!("unsupported element {name}")));
            }
            ["property", "list", count, index, name] if current == "face" => {
                if *name != "vertex_indices" && *name != "vertex_index" {
                    return Err(fmt(format!("unsupported face property {name}")));
                }
                let count = Scalar::parse(count)
                    .ok_or_else(|| fmt(format!("unknown property type {count}")))?;
                let index = Scalar::parse(index)
                    .ok_or_else(|| fmt(format!("unknown property type {index}")))?;
                face = Some(FaceLayout { count, index });
            }
            ["property", kind, name] if current == "vertex" => {
                let scalar = Scalar::parse(kind)
                    .ok_or_else(|| fmt(format!("unknown property type {kind}")))?;
                let field = match *name {
                    "x" => VertexField::X,
                    "y" => VertexField::Y,
                    "z" => VertexField::Z,
                    "red" => VertexField::Red,
                    "green" => VertexField::Green,
                    "blue" => VertexField::Blue,
                    "label" => VertexField::Label,
                    _ => VertexField::Skip,
                };
                vertex.properties.push((scalar, field));
            }
            ["property", ..] => {
                return Err(fmt(format!("unsupported property line: {line}")));
            }
            _ => return Err(fmt(format!("unrecognized header line: {line}"))),
        }
    }
    let format = format.ok_or_else(|| fmt("missing format line".into()))?;
    let n_vertices = n_vertices.ok_or_else(|| fmt("missing vertex element".into()))?;
    let n_faces = n_faces.ok_or_else(|| fmt("missing face element".into()))?;
    for required in [VertexField::X, VertexField::Y, VertexField::Z] {
        if !vertex.properties.iter().any(|(_, f)| *f == required) {
            return Err(fmt("vertex element lacks x, y or z".into()));
        }
    }
    let face = if n_faces > 0 {
        Some(face.ok_or_else(|| fmt("face element lacks an index list".into()))?)
    } else {
        face
    };

    let body = &bytes[body_start..];
    match format {
        PlyFormat::Ascii => parse_ascii_body(body, n_vertices, n_faces, &vertex, path),
        PlyFormat::BinaryLittleEndian => {
            parse_binary_body(body, n_vertices, n_faces, &vertex, face, path)
        }
    }
}

fn parse_count(token: &str, path: &Path) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::format(path, format!("invalid element count {token}")))
}

fn apply_field(vertex: &mut MeshVertex, field: VertexField, value: f64, path: &Path) -> Result<()> {
    match field {
        VertexField::X => vertex.position.x = value,
        VertexField::Y => vertex.position.y = value,
        VertexField::Z => vertex.position.z = value,
        VertexField::Red | VertexField::Green | VertexField::Blue => {
            if !(0.0..=255.0).contains(&value) || value.fract() != 0.0 {
                return Err(Error::format(path, format!("color value {value} out of range")));
            }
            let channel = match field {
                VertexField::Red => 0,
                VertexField::Green => 1,
                _ => 2,
            };
            vertex.color[channel] = value as u8;
        }
        VertexField::Label => {
            if !(0.0..=f64::from(u16::MAX)).contains(&value) || value.fract() != 0.0 {
                return Err(Error::format(path, format!("label value {value} out of range")));
            }
            vertex.label = value as u16;
        }
        VertexField::Skip => {}
    }
    Ok(())
}

fn check_index(value: f64, n_vertices: usize, path: &Path) -> Result<u32> {
    if value.fract() != 0.0 || value < 0.0 || value >= n_vertices as f64 {
        return Err(Error::format(
            path,
            format!("face index {value} outside 0..{n_vertices}"),
        ));
    }
    Ok(value as u32)
}

fn parse_ascii_body(
    body: &[u8],
    n_vertices: usize,
    n_faces: usize,
    vertex: &VertexLayout,
    path: &Path,
) -> Result<Mesh> {
    let fmt = |message: String| Error::format(path, message);
    let text = std::str::from_utf8(body).map_err(|_| fmt("ascii body is not valid utf-8".into()))?;
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        let token = tokens
            .next()
            .ok_or_else(|| Error::format(path, format!("file ends before {what}")))?;
        token
            .parse::<f64>()
            .map_err(|_| Error::format(path, format!("invalid number {token} in {what}")))
    };
    let mut vertices = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let mut v = MeshVertex {
            position: Point3::origin(),
            color: [0; 3],
            label: 0,
        };
        for (_, field) in &vertex.properties {
            let value = next(&format!("vertex {i}"))?;
            apply_field(&mut v, *field, value, path)?;
        }
        vertices.push(v);
    }
    let mut triangles = Vec::with_capacity(n_faces);
    if n_faces > 0 {
        for i in 0..n_faces {
            let count = next(&format!("face {i}"))?;
            if count != 3.0 {
                return Err(fmt(format!("face {i} has {count} vertices; expected 3")));
            }
            let mut tri = [0u32; 3];
            for slot in &mut tri {
                *slot = check_index(next(&format!("face {i}"))?, n_vertices, path)?;
            }
            triangles.push(tri);
        }
    }
    if tokens.next().is_some() {
        return Err(fmt("trailing data after the last face".into()));
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}

fn parse_binary_body(
    body: &[u8],
    n_vertices: usize,
    n_faces: usize,
    vertex: &VertexLayout,
    face: Option<FaceLayout>,
    path: &Path,
) -> Result<Mesh> {
    let fmt = |message: String| Error::format(path, message);
    let mut at = 0usize;
    let mut vertices = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let mut v = MeshVertex {
            position: Point3::origin(),
            color: [0; 3],
            label: 0,
        };
        for (scalar, field) in &vertex.properties {
            let value = read_scalar(body, &mut at, *scalar)
                .ok_or_else(|| Error::format(path, format!("file ends inside vertex {i}")))?;
            apply_field(&mut v, *field, value, path)?;
        }
        vertices.push(v);
    }
    let mut triangles = Vec::with_capacity(n_faces);
    if n_faces > 0 {
        let layout = face.expect("validated by the header parser");
        for i in 0..n_faces {
            let count = read_scalar(body, &mut at, layout.count)
                .ok_or_else(|| Error::format(path, format!("file ends inside face {i}")))?;
            if count != 3.0 {
                return Err(fmt(format!("face {i} has {count} vertices; expected 3")));
            }
            let mut tri = [0u32; 3];
            for slot in &mut tri {
                let value = read_scalar(body, &mut at, layout.index)
                    .ok_or_else(|| Error::format(path, format!("file ends inside face {i}")))?;
                *slot = check_index(value, n_vertices, path)?;
            }
            triangles.push(tri);
        }
    }
    if at != body.len() {
        return Err(fmt(format!("{} trailing bytes after the last face", body.len() - at)));
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}
