//! OBJ and OFF readers and writers (text formats only).

use super::{MeshError, TriangleMesh};
use crate::util::{format_sig9, Vec3};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "off" => Some(MeshFormat::Off),
            _ => None,
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, MeshError> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid number {tok:?}")))
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh, MeshError> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh").to_string();
    match format {
        MeshFormat::Obj => parse_obj(&text, &name),
        MeshFormat::Off => parse_off(&text, &name),
    }
}

/// Loads a mesh, inferring the format from the file extension.
pub fn load_mesh_auto(path: &Path) -> Result<TriangleMesh, MeshError> {
    let format = MeshFormat::from_path(path)
        .ok_or_else(|| MeshError::Io(format!("cannot infer mesh format of {}", path.display())))?;
    load_mesh(path, format)
}

pub fn save_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    let text = match format {
        MeshFormat::Obj => write_obj(mesh),
        MeshFormat::Off => write_off(mesh),
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_off(text: &str, name: &str) -> Result<TriangleMesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut header_tokens = header.split_whitespace();
    if header_tokens.next() != Some("OFF") {
        return Err(parse_err(hline, "missing OFF header"));
    }
    // counts may follow the header on the same line
    let rest: Vec<&str> = header_tokens.collect();
    let (cline, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (l, s) = lines.next().ok_or_else(|| parse_err(hline, "missing counts line"))?;
        (l, s.split_whitespace().collect())
    } else {
        (hline, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err(cline, "counts line needs vertex and face counts"));
    }
    let nv: usize = counts[0]
        .parse()
        .map_err(|_| parse_err(cline, "invalid vertex count"))?;
    let nf: usize = counts[1].parse().map_err(|_| parse_err(cline, "invalid face count"))?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of file in vertex list"))?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(l, "vertex line needs three coordinates"));
        }
        vertices.push([parse_f64(toks[0], l)?, parse_f64(toks[1], l)?, parse_f64(toks[2], l)?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines
            .next()
            .ok_or_else(|| parse_err(cline, "unexpected end of file in face list"))?;
        let toks: Vec<&str> = s.split_whitespace().collect();
        let k: usize = toks
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(l, "face line must start with a vertex count"))?;
        if k != 3 {
            return Err(parse_err(l, format!("only triangles are supported, got {k}-gon")));
        }
        if toks.len() < 4 {
            return Err(parse_err(l, "face line needs three indices"));
        }
        let mut f = [0usize; 3];
        for (slot, tok) in f.iter_mut().zip(&toks[1..4]) {
            *slot = tok
                .parse()
                .map_err(|_| parse_err(l, format!("invalid face index {tok:?}")))?;
        }
        faces.push(f);
    }
    TriangleMesh::new(vertices, faces, name)
}

pub fn parse_obj(text: &str, name: &str) -> Result<TriangleMesh, MeshError> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        let mut toks = s.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<&str> = toks.collect();
                if c.len() < 3 {
                    return Err(parse_err(line, "vertex line needs three coordinates"));
                }
                vertices.push([parse_f64(c[0], line)?, parse_f64(c[1], line)?, parse_f64(c[2], line)?]);
            }
            Some("f") => {
                let refs: Vec<&str> = toks.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        line,
                        format!("only triangles are supported, got {} indices", refs.len()),
                    ));
                }
                let mut f = [0usize; 3];
                for (slot, r) in f.iter_mut().zip(&refs) {
                    let head = r.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| parse_err(line, format!("invalid face index {r:?}")))?;
                    *slot = match idx {
                        0 => return Err(parse_err(line, "OBJ indices are 1-based; found 0")),
                        i if i > 0 => (i - 1) as usize,
                        i => {
                            let back = (-i) as usize;
                            if back > vertices.len() {
                                return Err(parse_err(line, "relative index before first vertex"));
                            }
                            vertices.len() - back
                        }
                    };
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces, name)
}

pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    s.push_str("OFF\n");
    let _ = writeln!(s, "{} {} 0", mesh.vertex_count(), mesh.face_count());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", format_sig9(v[0]), format_sig9(v[1]), format_sig9(v[2]));
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", mesh.name());
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", format_sig9(v[0]), format_sig9(v[1]), format_sig9(v[2]));
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}
