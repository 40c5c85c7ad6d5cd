use std::fmt::Write as _;
use std::path::Path;

use crate::camera::Vec3;
use crate::error::{Error, Result};

use super::TriMesh;

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    if let Some(normals) = &mesh.normals {
        for n in normals {
            let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
        }
        for t in &mesh.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        }
    } else {
        for t in &mesh.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads vertices and faces; polygons are fan-triangulated, texture and
/// normal references ignored.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad vertex coordinate"))?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        u32::try_from(resolved).map_err(|_| bad("face index out of range"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles).map_err(|e| Error::format(path, e.to_string()))
}

/// Binary little-endian PLY with double-precision vertices.
pub fn write_ply(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(header, "element face {}", mesh.triangles.len());
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    let mut out = header.into_bytes();
    for v in &mesh.vertices {
        for c in v.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn read(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().unwrap();
                (if big_endian { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Reads ASCII or binary PLY (either endianness); vertex `x y z` and face
/// `vertex_indices`/`vertex_index` lists are used, everything else skipped.
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let end = find_subslice(&bytes, b"end_header")
        .ok_or_else(|| bad("missing end_header".into()))?;
    let mut body_start = end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let w: Vec<&str> = line.split_whitespace().collect();
        match w.as_slice() {
            ["format", f, _] => format = Some(f.to_string()),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                let (c, i) = (Scalar::parse(c), Scalar::parse(i));
                match (c, i) {
                    (Some(c), Some(i)) => el.props.push(Property::List(name.to_string(), c, i)),
                    _ => return Err(bad(format!("unknown list types in `{line}`"))),
                }
            }
            ["property", t, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                let t = Scalar::parse(t).ok_or_else(|| bad(format!("unknown type in `{line}`")))?;
                el.props.push(Property::Scalar(name.to_string(), t));
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| bad("missing format line".into()))?;
    let body = &bytes[body_start..];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    match format.as_str() {
        "ascii" => {
            let text = std::str::from_utf8(body).map_err(|_| bad("body is not UTF-8".into()))?;
            let mut tokens = text.split_whitespace().map(|t| t.parse::<f64>());
            let mut next = || -> Result<f64> {
                tokens
                    .next()
                    .ok_or_else(|| bad("truncated body".into()))?
                    .map_err(|_| bad("bad number in body".into()))
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut record = Record::default();
                    for p in &el.props {
                        match p {
                            Property::Scalar(name, _) => record.scalar(name, next()?),
                            Property::List(name, _, _) => {
                                let len = next()? as usize;
                                let items = (0..len).map(|_| next()).collect::<Result<Vec<_>>>()?;
                                record.list(name, items);
                            }
                        }
                    }
                    record.emit(&el.name, &mut vertices, &mut triangles, &bad)?;
                }
            }
        }
        "binary_little_endian" | "binary_big_endian" => {
            let big = format == "binary_big_endian";
            let mut pos = 0usize;
            let mut take = |n: usize| -> Result<&[u8]> {
                let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated body".into()))?;
                pos += n;
                Ok(s)
            };
            for el in &elements {
                for _ in 0..el.count {
                    let mut record = Record::default();
                    for p in &el.props {
                        match p {
                            Property::Scalar(name, t) => record.scalar(name, t.read(take(t.size())?, big)),
                            Property::List(name, c, i) => {
                                let len = c.read(take(c.size())?, big) as usize;
                                let items = (0..len)
                                    .map(|_| Ok(i.read(take(i.size())?, big)))
                                    .collect::<Result<Vec<_>>>()?;
                                record.list(name, items);
                            }
                        }
                    }
                    record.emit(&el.name, &mut vertices, &mut triangles, &bad)?;
                }
            }
        }
        other => return Err(bad(format!("unsupported PLY format `{other}`"))),
    }
    TriMesh::new(vertices, triangles).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Default)]
struct Record {
    xyz: [Option<f64>; 3],
    face: Option<Vec<f64>>,
}

impl Record {
    fn scalar(&mut self, name: &str, v: f64) {
        match name {
            "x" => self.xyz[0] = Some(v),
            "y" => self.xyz[1] = Some(v),
            "z" => self.xyz[2] = Some(v),
            _ => {}
        }
    }

    fn list(&mut self, name: &str, items: Vec<f64>) {
        if name == "vertex_indices" || name == "vertex_index" {
            self.face = Some(items);
        }
    }

    fn emit(
        self,
        element: &str,
        vertices: &mut Vec<Vec3>,
        triangles: &mut Vec<[u32; 3]>,
        bad: &dyn Fn(String) -> Error,
    ) -> Result<()> {
        match element {
            "vertex" => match self.xyz {
                [Some(x), Some(y), Some(z)] => vertices.push(Vec3::new(x, y, z)),
                _ => return Err(bad("vertex element lacks x/y/z".into())),
            },
            "face" => {
                let idx = self.face.ok_or_else(|| bad("face element lacks vertex indices".into()))?;
                if idx.len() < 3 || idx.iter().any(|&i| i < 0.0) {
                    return Err(bad("invalid face".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Dispatches on the file extension (`.obj` or `.ply`).
pub fn read_mesh(path: &Path) -> Result<TriMesh> {
    match extension(path).as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply(path),
        _ => Err(Error::format(path, "unknown mesh extension (expected .obj or .ply)")),
    }
}

pub fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    match extension(path).as_deref() {
        Some("obj") => write_obj(path, mesh),
        Some("ply") => write_ply(path, mesh),
        _ => Err(Error::format(path, "unknown mesh extension (expected .obj or .ply)")),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}
