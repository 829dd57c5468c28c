use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::TriMesh;

fn bad(msg: impl Into<String>) -> Error {
    Error::MeshFormat(msg.into())
}

/// ASCII OBJ with `v` and `f` records. Coordinates use the shortest
/// representation that parses back to the same `f32`.
pub fn write_obj(mesh: &TriMesh, w: &mut impl Write) -> Result<()> {
    let mut out = String::with_capacity(32 * (mesh.vertices.len() + mesh.triangles.len()));
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads `v` and `f` records; polygons are fan-triangulated and texture or
/// normal indices (`a/b/c`) are ignored.
pub fn read_obj(r: impl BufRead) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f32> = parts
                    .take(3)
                    .map(|s| {
                        s.parse()
                            .map_err(|_| bad(format!("line {}: bad coordinate '{s}'", n + 1)))
                    })
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad(format!("line {}: vertex needs 3 coordinates", n + 1)));
                }
                vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        match first.parse::<u32>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(bad(format!("line {}: bad face index '{s}'", n + 1))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad(format!("line {}: face needs 3 indices", n + 1)));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles).map_err(|e| bad(e.to_string()))
}

/// Binary little-endian PLY with float vertices and `uchar`/`int` faces.
pub fn write_ply(mesh: &TriMesh, w: &mut impl Write) -> Result<()> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    let mut buf = header.into_bytes();
    for v in &mesh.vertices {
        for c in v {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for &i in t {
            buf.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads the layout produced by [`write_ply`]; face index lists may use
/// `int` or `uint` and polygons are fan-triangulated.
pub fn read_ply(mut r: impl BufRead) -> Result<TriMesh> {
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != "ply" {
        return Err(bad("missing 'ply' magic"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut vertex_props = Vec::new();
    let mut current = "";
    loop {
        let l = next(&mut r)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(bad(format!("unsupported PLY format '{l}'"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                nv = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                nf = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?);
                current = "face";
            }
            ["property", "float", name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["property", "list", "uchar", "int" | "uint", _] if current == "face" => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unsupported PLY header line '{l}'"))),
        }
    }
    if vertex_props != ["x", "y", "z"] {
        return Err(bad("PLY vertices must be float x y z"));
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element"))?, nf.unwrap_or(0));
    let mut f4 = [0u8; 4];
    let mut vertices: Vec<Vec3> = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut v = [0.0f32; 3];
        for c in &mut v {
            r.read_exact(&mut f4)?;
            *c = f32::from_le_bytes(f4);
        }
        vertices.push(v);
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let mut count = [0u8; 1];
        r.read_exact(&mut count)?;
        let mut idx = Vec::with_capacity(count[0] as usize);
        for _ in 0..count[0] {
            r.read_exact(&mut f4)?;
            let i = i32::from_le_bytes(f4);
            idx.push(u32::try_from(i).map_err(|_| bad("negative face index"))?);
        }
        if idx.len() < 3 {
            return Err(bad("face needs 3 indices"));
        }
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    TriMesh::new(vertices, triangles).map_err(|e| bad(e.to_string()))
}
