//! File formats: PFM and 16-bit PGM depth images, 8-bit PGM loss maps,
//! PLY point clouds and versioned JSON documents.
//!
//! Every encoder is deterministic, so identical inputs give identical bytes.

use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::camera::Point3;
use crate::consistency::{DepthRange, LossMap};
use crate::error::{domain, Error, Result};
use crate::metrics::PointCloud;
use crate::raster::DepthImage;

pub const SCHEMA_VERSION: u32 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Whitespace-separated header reader that remembers byte offsets.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Skips whitespace and `#` comments, returning the comments' text.
    fn skip_space(&mut self) -> Vec<String> {
        let mut comments = Vec::new();
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    let start = self.pos + 1;
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                    comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
                }
                _ => break,
            }
        }
        comments
    }

    fn token(&mut self) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map(|s| (start, s))
            .map_err(|_| parse_err(start, "header token is not UTF-8"))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, tok) = self.token()?;
        tok.parse().map_err(|_| parse_err(at, format!("invalid {what} {tok:?}")))
    }

    /// Consumes the single whitespace byte that ends a binary header.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(parse_err(self.pos, "missing whitespace after header")),
        }
    }
}

const MAX_DIMENSION: usize = 1 << 16;

fn dimensions(h: &mut Header) -> Result<(usize, usize)> {
    h.skip_space();
    let at = h.pos;
    let w: usize = h.number("width")?;
    let ht: usize = h.number("height")?;
    if w == 0 || ht == 0 || w > MAX_DIMENSION || ht > MAX_DIMENSION {
        return Err(parse_err(at, format!("dimensions {w}×{ht} out of range")));
    }
    Ok((w, ht))
}

fn check_finite(img: &DepthImage) -> Result<()> {
    if let Some(i) = img.data().iter().position(|d| !d.is_finite()) {
        return Err(domain(format!("depth at pixel {i} is not finite")));
    }
    Ok(())
}

/// Grayscale PFM, little-endian (scale −1), rows stored bottom to top.
/// Depths are written as `f32`.
pub fn encode_pfm(img: &DepthImage) -> Result<Vec<u8>> {
    check_finite(img)?;
    let (w, h) = (img.width(), img.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * w * h);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(img.get(x, y) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], background_depth: f64) -> Result<DepthImage> {
    let mut h = Header::new(bytes);
    let (at, magic) = h.token()?;
    if magic != "Pf" {
        return Err(parse_err(at, format!("bad magic {magic:?}, expected Pf")));
    }
    let (w, ht) = dimensions(&mut h)?;
    let at = h.pos;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(at, "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    let start = h.end_of_header()?;
    let need = 4 * w * ht;
    if bytes.len() < start + need {
        return Err(parse_err(bytes.len(), format!("truncated: {} of {need} data bytes", bytes.len() - start)));
    }
    let mut data = vec![0.0; w * ht];
    for (k, chunk) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        if !v.is_finite() {
            return Err(parse_err(start + 4 * k, "non-finite depth"));
        }
        let (x, row) = (k % w, k / w);
        data[(ht - 1 - row) * w + x] = v as f64;
    }
    DepthImage::from_data(w, ht, data, background_depth)
}

const PGM16_BACKGROUND: u16 = u16::MAX;
const PGM16_LEVELS: f64 = (u16::MAX - 1) as f64;

/// 16-bit binary PGM (big-endian samples). Foreground depths are clamped
/// to `range` and quantized linearly onto `0..=65534`; background pixels
/// are stored as 65535. The range and background depth travel in a header
/// comment.
pub fn encode_pgm16(img: &DepthImage, range: &DepthRange) -> Result<Vec<u8>> {
    check_finite(img)?;
    let (w, h) = (img.width(), img.height());
    let mut out = format!(
        "P5\n# depth_range {:?} {:?} background {:?}\n{w} {h}\n65535\n",
        range.min,
        range.max,
        img.background_depth()
    )
    .into_bytes();
    let span = range.span();
    for (i, &d) in img.data().iter().enumerate() {
        let q = if !img.is_foreground(i) {
            PGM16_BACKGROUND
        } else if span > 0.0 {
            (((d - range.min) / span).clamp(0.0, 1.0) * PGM16_LEVELS).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<(DepthImage, DepthRange)> {
    let mut h = Header::new(bytes);
    let (at, magic) = h.token()?;
    if magic != "P5" {
        return Err(parse_err(at, format!("bad magic {magic:?}, expected P5")));
    }
    let comments_at = h.pos;
    let comments = h.skip_space();
    let mut meta = None;
    for c in &comments {
        let parts: Vec<&str> = c.split_whitespace().collect();
        if let ["depth_range", lo, hi, "background", bg] = parts[..] {
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(comments_at, format!("bad number {s:?}")));
            meta = Some((num(lo)?, num(hi)?, num(bg)?));
        }
    }
    let (lo, hi, bg) = meta.ok_or_else(|| parse_err(comments_at, "missing depth_range comment"))?;
    let range = DepthRange::new(lo, hi).map_err(|e| parse_err(comments_at, e.to_string()))?;
    let (w, ht) = dimensions(&mut h)?;
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval != 65535 {
        return Err(parse_err(at, format!("expected maxval 65535, got {maxval}")));
    }
    let start = h.end_of_header()?;
    let need = 2 * w * ht;
    if bytes.len() < start + need {
        return Err(parse_err(bytes.len(), "truncated sample data"));
    }
    let data = bytes[start..start + need]
        .chunks_exact(2)
        .map(|c| match u16::from_be_bytes([c[0], c[1]]) {
            PGM16_BACKGROUND => bg,
            q => range.min + q as f64 / PGM16_LEVELS * range.span(),
        })
        .collect();
    Ok((DepthImage::from_data(w, ht, data, bg)?, range))
}

/// 8-bit binary PGM of a loss map: `gray = round(255 · clamp(value / scale))`.
/// The scale is recorded in a header comment.
pub fn encode_loss_map(map: &LossMap, scale: f64) -> Result<Vec<u8>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(domain(format!("loss-map scale must be positive, got {scale}")));
    }
    let mut out = format!("P5\n# scale {scale:?}\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.data {
        if !v.is_finite() {
            return Err(domain("non-finite loss value"));
        }
        out.push(((v / scale).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Gray levels and scale of an 8-bit loss-map PGM.
pub fn decode_loss_map(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>, f64)> {
    let mut h = Header::new(bytes);
    let (at, magic) = h.token()?;
    if magic != "P5" {
        return Err(parse_err(at, format!("bad magic {magic:?}, expected P5")));
    }
    let comments_at = h.pos;
    let scale = h
        .skip_space()
        .iter()
        .find_map(|c| c.strip_prefix("scale ").and_then(|s| s.trim().parse::<f64>().ok()))
        .ok_or_else(|| parse_err(comments_at, "missing scale comment"))?;
    let (w, ht) = dimensions(&mut h)?;
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(at, format!("expected maxval 255, got {maxval}")));
    }
    let start = h.end_of_header()?;
    if bytes.len() < start + w * ht {
        return Err(parse_err(bytes.len(), "truncated sample data"));
    }
    Ok((w, ht, bytes[start..start + w * ht].to_vec(), scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// PLY with `double` vertex properties `x y z` and, when present, `nx ny nz`.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Result<Vec<u8>> {
    if cloud.points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(domain("point coordinates must be finite"));
    }
    let normals = cloud.normals.as_deref();
    let mut head = String::from("ply\n");
    head += match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    };
    head += &format!("element vertex {}\n", cloud.len());
    let names: &[&str] = if normals.is_some() { &["x", "y", "z", "nx", "ny", "nz"] } else { &["x", "y", "z"] };
    for n in names {
        head += &format!("property double {n}\n");
    }
    head += "end_header\n";
    let mut out = head.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let mut vals = vec![p.x, p.y, p.z];
        if let Some(n) = normals {
            vals.extend_from_slice(&[n[i].x, n[i].y, n[i].z]);
        }
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads the `vertex` element of an ascii or binary little-endian PLY.
/// Other elements are skipped.
pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|k| start + k)
            .ok_or_else(|| parse_err(start, "unterminated header line"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| parse_err(start, "header is not UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(parse_err(at, "bad magic, expected ply"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (at, line) = next_line(&mut pos)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(parse_err(at, format!("unsupported format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| parse_err(at, format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", c, i, _] => {
                let (Some(count), Some(item)) = (Scalar::parse(c), Scalar::parse(i)) else {
                    return Err(parse_err(at, format!("unknown list types in {line:?}")));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(at, "property before any element"))?
                    .properties
                    .push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| parse_err(at, format!("unknown property type {ty:?}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(at, "property before any element"))?
                    .properties
                    .push(Property::Scalar { name: name.to_string(), ty });
            }
            _ => return Err(parse_err(at, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(0, "missing format line"))?;
    let vertex = elements.iter().find(|e| e.name == "vertex").ok_or_else(|| parse_err(pos, "no vertex element"))?;
    let index = |n: &str| {
        vertex.properties.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == n))
    };
    let (Some(ix), Some(iy), Some(iz)) = (index("x"), index("y"), index("z")) else {
        return Err(parse_err(pos, "vertex element lacks x, y or z"));
    };
    let normal_idx = match (index("nx"), index("ny"), index("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };

    let mut points = Vec::new();
    let mut normals = Vec::new();
    match format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[pos..]).map_err(|_| parse_err(pos, "ascii body is not UTF-8"))?;
            let mut toks = body.split_ascii_whitespace().map(|t| {
                let off = pos + (t.as_ptr() as usize - body.as_ptr() as usize);
                (off, t)
            });
            let mut next_num = |what: &str| -> Result<f64> {
                let (off, t) = toks.next().ok_or_else(|| parse_err(bytes.len(), format!("truncated {what}")))?;
                t.parse::<f64>().map_err(|_| parse_err(off, format!("bad number {t:?}")))
            };
            for e in &elements {
                for _ in 0..e.count {
                    let mut vals = Vec::with_capacity(e.properties.len());
                    for p in &e.properties {
                        match p {
                            Property::Scalar { .. } => vals.push(next_num(&e.name)?),
                            Property::List { .. } => {
                                let n = next_num(&e.name)?;
                                for _ in 0..n as usize {
                                    next_num(&e.name)?;
                                }
                                vals.push(f64::NAN);
                            }
                        }
                    }
                    if e.name == "vertex" {
                        points.push(Point3::new(vals[ix], vals[iy], vals[iz]));
                        if let Some([a, b, c]) = normal_idx {
                            normals.push(Vector3::new(vals[a], vals[b], vals[c]));
                        }
                    }
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut at = pos;
            let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
                if *at + n > bytes.len() {
                    return Err(parse_err(bytes.len(), "truncated binary body"));
                }
                let s = &bytes[*at..*at + n];
                *at += n;
                Ok(s)
            };
            for e in &elements {
                for _ in 0..e.count {
                    let mut vals = Vec::with_capacity(e.properties.len());
                    for p in &e.properties {
                        match p {
                            Property::Scalar { ty, .. } => vals.push(ty.read_le(take(&mut at, ty.size())?)),
                            Property::List { count, item } => {
                                let n = count.read_le(take(&mut at, count.size())?);
                                take(&mut at, n as usize * item.size())?;
                                vals.push(f64::NAN);
                            }
                        }
                    }
                    if e.name == "vertex" {
                        points.push(Point3::new(vals[ix], vals[iy], vals[iz]));
                        if let Some([a, b, c]) = normal_idx {
                            normals.push(Vector3::new(vals[a], vals[b], vals[c]));
                        }
                    }
                }
            }
        }
    }
    if normal_idx.is_some() {
        PointCloud::with_normals(points, normals)
    } else {
        Ok(PointCloud::new(points))
    }
}

/// Pretty JSON of `value` with a leading `"schema_version"` field.
/// `value` must serialize to an object.
pub fn encode_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let serde_json::Value::Object(body) = serde_json::to_value(value)? else {
        return Err(domain("only objects can carry a schema version"));
    };
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), SCHEMA_VERSION.into());
    doc.extend(body);
    let mut out = serde_json::to_vec_pretty(&serde_json::Value::Object(doc))?;
    out.push(b'\n');
    Ok(out)
}

/// Parses a JSON document, rejecting any `schema_version` other than the
/// current one. The field may be omitted in hand-written configs.
pub fn decode_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| json_parse_err(bytes, e))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(v) = obj.remove("schema_version") {
            if v.as_u64() != Some(SCHEMA_VERSION as u64) {
                return Err(parse_err(0, format!("unsupported schema_version {v}")));
            }
        }
    }
    Ok(serde_json::from_value(value)?)
}

fn json_parse_err(bytes: &[u8], e: serde_json::Error) -> Error {
    let offset = bytes
        .split(|&b| b == b'\n')
        .take(e.line().saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    parse_err(offset, e.to_string())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(std::fs::write(path, bytes)?)
}

pub fn write_pfm(path: &Path, img: &DepthImage) -> Result<()> {
    write_file(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path, background_depth: f64) -> Result<DepthImage> {
    decode_pfm(&std::fs::read(path)?, background_depth)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_file(path, &encode_ply(cloud, format)?)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&std::fs::read(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &encode_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode_json(&std::fs::read(path)?)
}
