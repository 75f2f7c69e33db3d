use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::IoError;
use crate::surfel::{PointSample, Surfel, SurfelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Scalar properties of the `vertex` element, one row per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Result<usize, IoError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| IoError::MissingProperty(name.to_string()))
    }
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<(usize, String), IoError> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| IoError::malformed("header", "unterminated header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| IoError::malformed("header", "non-UTF-8 header"))?
            .trim_end_matches('\r')
            .to_string();
        *pos += end + 1;
        line_no += 1;
        Ok((line_no, line))
    };
    let (_, magic) = next_line(&mut pos)?;
    if magic.trim() != "ply" {
        return Err(IoError::malformed("line 1", "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (n, line) = next_line(&mut pos)?;
        let at = format!("line {n}");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(IoError::malformed(at, format!("unsupported format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| IoError::malformed(at.clone(), format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| IoError::malformed(at.clone(), "property before element"))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(IoError::malformed(at, "unknown list type"));
                };
                el.properties.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| IoError::malformed(at.clone(), "property before element"))?;
                let ty =
                    Scalar::parse(ty).ok_or_else(|| IoError::malformed(at.clone(), format!("unknown type {ty}")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => return Err(IoError::malformed(at, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| IoError::malformed("header", "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
    })
}

fn scalar_names(el: &Element) -> Vec<String> {
    el.properties
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, .. } => Some(name.clone()),
            Property::List { .. } => None,
        })
        .collect()
}

fn read_binary(header: &Header, bytes: &[u8]) -> Result<PlyTable, IoError> {
    let mut pos = header.body_offset;
    let mut table = None;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], IoError> {
        let end = *pos + n;
        if end > bytes.len() {
            return Err(IoError::malformed(
                format!("byte offset {}", *pos),
                "unexpected end of data",
            ));
        }
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let mut rows = Vec::with_capacity(if is_vertex { el.count } else { 0 });
        for _ in 0..el.count {
            let mut row = Vec::new();
            for p in &el.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        let v = ty.decode(take(&mut pos, ty.size())?);
                        if is_vertex {
                            row.push(v);
                        }
                    }
                    Property::List { count, item } => {
                        let at = pos;
                        let n = count.decode(take(&mut pos, count.size())?);
                        if !(n >= 0.0) {
                            return Err(IoError::malformed(format!("byte offset {at}"), "negative list length"));
                        }
                        take(&mut pos, n as usize * item.size())?;
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            table = Some(PlyTable {
                names: scalar_names(el),
                rows,
            });
        }
    }
    table.ok_or_else(|| IoError::malformed("header", "no vertex element"))
}

fn read_ascii(header: &Header, bytes: &[u8]) -> Result<PlyTable, IoError> {
    let text = std::str::from_utf8(&bytes[header.body_offset..])
        .map_err(|_| IoError::malformed("body", "non-UTF-8 ascii body"))?;
    let header_lines = bytes[..header.body_offset].iter().filter(|&&b| b == b'\n').count();
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header_lines + i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut table = None;
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let mut rows = Vec::new();
        for _ in 0..el.count {
            let (n, line) = lines
                .next()
                .ok_or_else(|| IoError::malformed("end of file", format!("missing {} rows", el.name)))?;
            let at = format!("line {n}");
            let mut tokens = line.split_whitespace();
            let mut next = || -> Result<f64, IoError> {
                let t = tokens
                    .next()
                    .ok_or_else(|| IoError::malformed(at.clone(), "too few values"))?;
                t.parse::<f64>()
                    .map_err(|_| IoError::malformed(at.clone(), format!("bad number {t:?}")))
            };
            let mut row = Vec::new();
            for p in &el.properties {
                match p {
                    Property::Scalar { .. } => row.push(next()?),
                    Property::List { .. } => {
                        let k = next()?;
                        for _ in 0..(k.max(0.0) as usize) {
                            next()?;
                        }
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            table = Some(PlyTable {
                names: scalar_names(el),
                rows,
            });
        }
    }
    table.ok_or_else(|| IoError::malformed("header", "no vertex element"))
}

/// Parses the `vertex` element of an ascii or binary-little-endian PLY
/// buffer.
pub fn parse_vertices(bytes: &[u8]) -> Result<PlyTable, IoError> {
    let header = parse_header(bytes)?;
    match header.format {
        PlyFormat::Ascii => read_ascii(&header, bytes),
        PlyFormat::BinaryLittleEndian => read_binary(&header, bytes),
    }
}

pub fn read_points(path: &Path) -> Result<Vec<PointSample>, IoError> {
    let t = read_table(path)?;
    let cols = ["x", "y", "z", "time"].map(|n| t.column(n));
    let [x, y, z, time] = match cols {
        [Ok(x), Ok(y), Ok(z), Ok(time)] => [x, y, z, time],
        _ => return Err(cols.into_iter().find_map(Result::err).unwrap()),
    };
    Ok(t.rows
        .iter()
        .map(|r| PointSample::new(Vector3::new(r[x], r[y], r[z]), r[time]))
        .collect())
}

fn header(count: usize, props: &[(&str, &str)]) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
    for (ty, name) in props {
        h.push_str(&format!("property {ty} {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(bytes).map_err(|e| IoError::io(path, e))
}

/// Binary little-endian PLY with `x y z` (float) and `time` (double).
pub fn write_points(path: &Path, points: &[PointSample]) -> Result<(), IoError> {
    let mut buf = header(
        points.len(),
        &[("float", "x"), ("float", "y"), ("float", "z"), ("double", "time")],
    )
    .into_bytes();
    for p in points {
        for v in p.position.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&p.time.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Writes every column of `table` as a double property, in either encoding.
pub fn write_table(path: &Path, table: &PlyTable, format: PlyFormat) -> Result<(), IoError> {
    let encoding = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut h = format!("ply\nformat {encoding} 1.0\nelement vertex {}\n", table.rows.len());
    for name in &table.names {
        h.push_str(&format!("property double {name}\n"));
    }
    h.push_str("end_header\n");
    let mut buf = h.into_bytes();
    for row in &table.rows {
        if row.len() != table.names.len() {
            return Err(IoError::malformed("table", "row width differs from the column count"));
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                buf.extend_from_slice(line.join(" ").as_bytes());
                buf.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in row {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    write_file(path, &buf)
}

/// Reads the `vertex` table of a PLY file.
pub fn read_table(path: &Path) -> Result<PlyTable, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_vertices(&bytes)
}

const SURFEL_FLOATS: [&str; 8] = ["x", "y", "z", "nx", "ny", "nz", "radius", "confidence"];

pub fn write_surfel_map(path: &Path, map: &SurfelMap) -> Result<(), IoError> {
    let mut props: Vec<(&str, &str)> = SURFEL_FLOATS.iter().map(|n| ("float", *n)).collect();
    props.push(("double", "time"));
    let mut buf = header(map.len(), &props).into_bytes();
    for s in map.surfels() {
        let vals = [
            s.position.x,
            s.position.y,
            s.position.z,
            s.normal.x,
            s.normal.y,
            s.normal.z,
            s.radius,
            s.confidence,
        ];
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&s.time.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Reads a surfel map; normals are re-normalized after the float round trip.
pub fn read_surfel_map(path: &Path, voxel: f64) -> Result<SurfelMap, IoError> {
    let t = read_table(path)?;
    let mut cols = Vec::with_capacity(9);
    for name in SURFEL_FLOATS.iter().chain(std::iter::once(&"time")) {
        cols.push(t.column(name)?);
    }
    let mut surfels = Vec::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        let v = |k: usize| r[cols[k]];
        let normal = Vector3::new(v(3), v(4), v(5));
        let s = Surfel {
            position: Vector3::new(v(0), v(1), v(2)),
            normal: normal / normal.norm(),
            radius: v(6),
            confidence: v(7),
            time: v(8),
        };
        if !s.is_valid() {
            return Err(IoError::malformed(format!("vertex {i}"), "invalid surfel"));
        }
        surfels.push(s);
    }
    Ok(SurfelMap::from_surfels(surfels, voxel))
}
