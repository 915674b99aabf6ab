//! PLY persistence for point clouds.
//!
//! Writes `double` coordinates (ASCII by default, or binary little-endian) so
//! a save/load roundtrip is bit-exact. Reads any numeric property type, any
//! extra elements, and skips unknown vertex properties with a warning. The
//! cloud frame travels in a `comment frame <name>` header line; files
//! without one load as `robot_base`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{CloudError, PointCloud};
use crate::geom3::{FrameId, Vec3};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("binary body, byte {offset}: {message}")]
    Binary { offset: u64, message: String },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    #[default]
    Ascii,
    BinaryLittleEndian,
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
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

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    frame: Option<String>,
    /// Number of lines consumed, `end_header` included.
    lines: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> PlyError {
    PlyError::Parse { line, message: message.into() }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, PlyError> {
    let mut line_no = 0;
    let mut buf = String::new();
    let mut next_line = |r: &mut R, buf: &mut String| -> Result<Option<usize>, PlyError> {
        buf.clear();
        let n = r.read_line(buf)?;
        line_no += 1;
        Ok(if n == 0 { None } else { Some(line_no) })
    };

    let first = next_line(r, &mut buf)?;
    if first.is_none() || buf.trim_end() != "ply" {
        return Err(parse_err(1, "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut frame = None;
    loop {
        let Some(ln) = next_line(r, &mut buf)? else {
            return Err(parse_err(line_no, "header ended without 'end_header'"));
        };
        let line = buf.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("end_header") => {
                let format = format.ok_or_else(|| parse_err(ln, "header has no 'format' line"))?;
                return Ok(Header { format, elements, frame, lines: ln });
            }
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(parse_err(ln, format!("unsupported format '{other}'"))),
                    None => return Err(parse_err(ln, "format line without a format")),
                });
            }
            Some("comment") => {
                let rest: Vec<&str> = tok.collect();
                if rest.len() == 2 && rest[0] == "frame" {
                    frame = Some(rest[1].to_owned());
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(ln, "element without a name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(ln, "element count is not a non-negative integer"))?;
                elements.push(Element { name: name.to_owned(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| parse_err(ln, "property before any element"))?;
                let words: Vec<&str> = tok.collect();
                let prop = match words.as_slice() {
                    ["list", c, i, name] => Property::List {
                        name: (*name).to_owned(),
                        count: Scalar::parse(c).ok_or_else(|| parse_err(ln, format!("unknown type '{c}'")))?,
                        item: Scalar::parse(i).ok_or_else(|| parse_err(ln, format!("unknown type '{i}'")))?,
                    },
                    [ty, name] => Property::Scalar {
                        name: (*name).to_owned(),
                        ty: Scalar::parse(ty).ok_or_else(|| parse_err(ln, format!("unknown type '{ty}'")))?,
                    },
                    _ => return Err(parse_err(ln, format!("malformed property line '{line}'"))),
                };
                el.props.push(prop);
            }
            Some(other) => return Err(parse_err(ln, format!("unknown header keyword '{other}'"))),
        }
    }
}

/// Column positions of the fields the cloud needs.
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(el: &Element, header_line: usize) -> Result<VertexLayout, PlyError> {
    let find = |n: &str| el.props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == n));
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(parse_err(header_line, "vertex element lacks x, y, z properties")),
    };
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        (None, None, None) => None,
        _ => return Err(parse_err(header_line, "vertex element has an incomplete normal (nx, ny, nz)")),
    };
    for (i, p) in el.props.iter().enumerate() {
        let known = xyz.contains(&i) || normal.is_some_and(|n| n.contains(&i));
        if !known {
            log::warn!("ply: skipping unknown vertex property '{}'", p.name());
        }
    }
    Ok(VertexLayout { xyz, normal })
}

fn build_cloud(
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    frame: Option<String>,
    line_of: impl Fn(usize) -> usize,
) -> Result<PointCloud, PlyError> {
    let frame = match frame {
        Some(f) => FrameId::new(f).map_err(|e| parse_err(1, e.to_string()))?,
        None => FrameId::robot_base(),
    };
    match normals {
        None => Ok(PointCloud::new(points, frame)?),
        Some(ns) => {
            let mut unit = Vec::with_capacity(ns.len());
            for (i, n) in ns.into_iter().enumerate() {
                let len = n.norm();
                if !(len > 0.0) || !len.is_finite() {
                    return Err(parse_err(line_of(i), "normal has zero or invalid length"));
                }
                unit.push(if (len - 1.0).abs() <= f64::EPSILON { n } else { n / len });
            }
            Ok(PointCloud::with_normals(points, unit, frame)?)
        }
    }
}

/// Reads a cloud from any buffered source.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<PointCloud, PlyError> {
    let header = read_header(&mut r)?;
    let vi = header.elements.iter().position(|e| e.name == "vertex").ok_or_else(|| parse_err(header.lines, "no 'vertex' element"))?;
    let layout = vertex_layout(&header.elements[vi], header.lines)?;
    match header.format {
        PlyFormat::Ascii => read_ascii_body(r, &header, vi, &layout),
        PlyFormat::BinaryLittleEndian => read_binary_body(r, &header, vi, &layout),
    }
}

fn read_ascii_body<R: BufRead>(r: R, header: &Header, vi: usize, layout: &VertexLayout) -> Result<PointCloud, PlyError> {
    let mut lines = r.lines();
    let mut line_no = header.lines;
    let mut points = Vec::new();
    let mut normals = layout.normal.map(|_| Vec::new());
    let mut first_vertex_line = 0;
    for (ei, el) in header.elements.iter().enumerate() {
        if ei == vi {
            first_vertex_line = line_no + 1;
            points.reserve(el.count);
        }
        for row in 0..el.count {
            let line = loop {
                line_no += 1;
                match lines.next() {
                    Some(l) => {
                        let l = l?;
                        if !l.trim().is_empty() {
                            break l;
                        }
                    }
                    None => {
                        return Err(parse_err(
                            line_no,
                            format!("unexpected end of file: element '{}' declares {} rows, found {row}", el.name, el.count),
                        ))
                    }
                }
            };
            if ei != vi {
                continue;
            }
            let mut tok = line.split_whitespace();
            let mut values = Vec::with_capacity(el.props.len());
            for p in &el.props {
                let mut parse_next = |what: &str| -> Result<f64, PlyError> {
                    let t = tok.next().ok_or_else(|| parse_err(line_no, format!("missing value for '{what}'")))?;
                    t.parse::<f64>().map_err(|_| parse_err(line_no, format!("'{t}' is not a number ({what})")))
                };
                match p {
                    Property::Scalar { name, .. } => values.push(parse_next(name)?),
                    Property::List { name, .. } => {
                        let n = parse_next(name)?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(parse_err(line_no, format!("bad list length for '{name}'")));
                        }
                        for _ in 0..n as usize {
                            parse_next(name)?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if tok.next().is_some() {
                return Err(parse_err(line_no, "extra values at end of row"));
            }
            points.push(Vec3::new(values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]));
            if let (Some(ns), Some(ni)) = (normals.as_mut(), layout.normal) {
                ns.push(Vec3::new(values[ni[0]], values[ni[1]], values[ni[2]]));
            }
        }
    }
    build_cloud(points, normals, header.frame.clone(), |i| first_vertex_line + i)
}

struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<(), PlyError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(PlyError::Binary { offset: self.offset, message: format!("unexpected end of data in {what}") })
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn read_binary_body<R: BufRead>(r: R, header: &Header, vi: usize, layout: &VertexLayout) -> Result<PointCloud, PlyError> {
    let mut rd = ByteReader { inner: r, offset: 0 };
    let mut points = Vec::new();
    let mut normals = layout.normal.map(|_| Vec::new());
    let mut buf = [0u8; 8];
    for (ei, el) in header.elements.iter().enumerate() {
        let mut values = vec![0.0; el.props.len()];
        for row in 0..el.count {
            let what = format!("element '{}' row {row}", el.name);
            for (pi, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar { ty, .. } => {
                        let b = &mut buf[..ty.size()];
                        rd.take(b, &what)?;
                        values[pi] = ty.decode_le(b);
                    }
                    Property::List { count, item, .. } => {
                        let b = &mut buf[..count.size()];
                        rd.take(b, &what)?;
                        let n = count.decode_le(b);
                        if n < 0.0 {
                            return Err(PlyError::Binary { offset: rd.offset, message: "negative list length".into() });
                        }
                        let mut skip = vec![0u8; n as usize * item.size()];
                        rd.take(&mut skip, &what)?;
                    }
                }
            }
            if ei == vi {
                points.push(Vec3::new(values[layout.xyz[0]], values[layout.xyz[1]], values[layout.xyz[2]]));
                if let (Some(ns), Some(ni)) = (normals.as_mut(), layout.normal) {
                    ns.push(Vec3::new(values[ni[0]], values[ni[1]], values[ni[2]]));
                }
            }
        }
    }
    build_cloud(points, normals, header.frame.clone(), |_| header.lines)
}

pub fn write_ply<W: Write>(cloud: &PointCloud, mut w: W, format: PlyFormat) -> io::Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {fmt} 1.0")?;
    writeln!(w, "comment frame {}", cloud.frame())?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property double {name}")?;
    }
    if cloud.normals().is_some() {
        for name in ["nx", "ny", "nz"] {
            writeln!(w, "property double {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        let n = cloud.normals().map(|ns| ns[i]);
        match format {
            PlyFormat::Ascii => {
                // `Display` for f64 prints the shortest string that parses back exactly.
                write!(w, "{} {} {}", p.x, p.y, p.z)?;
                if let Some(n) = n {
                    write!(w, " {} {} {}", n.x, n.y, n.z)?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p.iter().chain(n.iter().flat_map(|n| n.iter())) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    read_ply(BufReader::new(File::open(path)?))
}

/// Saves as ASCII.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    save_ply_as(cloud, path, PlyFormat::Ascii)
}

pub fn save_ply_as(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<(), PlyError> {
    let w = BufWriter::new(File::create(path)?);
    write_ply(cloud, w, format)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{seeded_rng, unit_vector};
    use rand::Rng;

    fn small_cloud() -> PointCloud {
        PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.5, 2.25, 1e-7), Vec3::new(0.0, -0.0, 123.456)], FrameId::camera())
            .unwrap()
    }

    fn roundtrip(c: &PointCloud, format: PlyFormat) -> PointCloud {
        let mut bytes = Vec::new();
        write_ply(c, &mut bytes, format).unwrap();
        read_ply(&bytes[..]).unwrap()
    }

    #[test]
    fn three_point_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let c = small_cloud();
        save_ply(&c, &path).unwrap();
        assert_eq!(load_ply(&path).unwrap(), c);
    }

    #[test]
    fn large_cloud_roundtrip_is_bitwise() {
        let mut rng = seeded_rng(31);
        let pts: Vec<Vec3> = (0..5000).map(|_| Vec3::new(rng.random(), rng.random::<f64>() - 0.5, rng.random::<f64>() * 3.0)).collect();
        let ns: Vec<Vec3> = (0..5000).map(|_| unit_vector(&mut rng)).collect();
        let c = PointCloud::with_normals(pts, ns, FrameId::robot_base()).unwrap();
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let back = roundtrip(&c, format);
            let max_delta =
                c.points().iter().zip(back.points()).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0, f64::max);
            assert_eq!(max_delta, 0.0);
            assert_eq!(back, c);
        }
    }

    #[test]
    fn short_body_names_the_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        match read_ply(text.as_bytes()) {
            Err(PlyError::Parse { line, message }) => {
                assert_eq!(line, 9);
                assert!(message.contains("2 rows"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_names_the_line() {
        let text =
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n1 two 3\n";
        assert!(matches!(read_ply(text.as_bytes()), Err(PlyError::Parse { line: 9, .. })));
    }

    #[test]
    fn foreign_file_with_float_color_and_faces() {
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 3\nproperty float x\nproperty float y\n\
property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\n\
property list uchar int vertex_indices\nend_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0.5 0 0 255\n3 0 1 2\n";
        let c = read_ply(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.points()[2], Vec3::new(0.0, 1.0, 0.5));
        assert_eq!(c.frame(), &FrameId::robot_base());
        assert!(c.normals().is_none());
    }

    #[test]
    fn binary_float32_with_leading_element() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement camera 1\nproperty list uchar float k\n\
element vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
            .to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        for v in [0.5f32, 1.5, 2.5, -1.0, -2.0, -3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = read_ply(&bytes[..]).unwrap();
        assert_eq!(c.points(), &[Vec3::new(0.5, 1.5, 2.5), Vec3::new(-1.0, -2.0, -3.0)]);

        bytes.truncate(bytes.len() - 4);
        assert!(matches!(read_ply(&bytes[..]), Err(PlyError::Binary { .. })));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read_ply("plx\n".as_bytes()), Err(PlyError::Parse { line: 1, .. })));
        let be = "ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(matches!(read_ply(be.as_bytes()), Err(PlyError::Parse { line: 2, .. })));
        let noxyz = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(read_ply(noxyz.as_bytes()), Err(PlyError::Parse { .. })));
    }
}
