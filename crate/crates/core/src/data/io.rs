//! Text formats.
//!
//! xyz: one point per line, `x y z` or `x y z nx ny nz`, whitespace
//! separated. Blank lines and lines starting with `#` are skipped. Values are
//! written in shortest round-trip notation, so a write/read cycle is exact.
//!
//! PLY: ASCII only. The header must declare `format ascii 1.0` and exactly one
//! non-empty element, `vertex`, with `float` or `double` properties `x y z`
//! and optionally `nx ny nz`. Other properties are read and dropped; faces
//! and binary encodings are rejected as unsupported.
//!
//! Transform: four lines of four numbers, the row-major homogeneous matrix.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// `.ply` is PLY, anything else xyz.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => Self::Ply,
            _ => Self::Xyz,
        }
    }
}

fn numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(lineno, format!("'{tok}' is not a number")))
        })
        .collect()
}

fn build(points: Vec<Point3>, normals: Vec<Point3>, last_line: usize) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::parse(last_line.max(1), "no points"));
    }
    let cloud = if normals.is_empty() {
        PointCloud::new(points)
    } else {
        PointCloud::with_normals(points, normals)
    };
    cloud.map_err(|e| Error::parse(last_line.max(1), e.to_string()))
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        last = lineno;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = numbers(line, lineno)?;
        let with_normal = match v.len() {
            3 => false,
            6 => true,
            n => return Err(Error::parse(lineno, format!("expected 3 or 6 values, found {n}"))),
        };
        if !points.is_empty() && with_normal != !normals.is_empty() {
            return Err(Error::parse(lineno, "normals present on some lines only"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(lineno, "non-finite coordinate"));
        }
        points.push(Point3::new(v[0], v[1], v[2]));
        if with_normal {
            normals.push(Point3::new(v[3], v[4], v[5]));
        }
    }
    build(points, normals, last)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points().iter().enumerate() {
        out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        if let Some(n) = cloud.normals() {
            out.push_str(&format!(" {} {} {}", n[i][0], n[i][1], n[i][2]));
        }
        out.push('\n');
    }
    out
}

struct PlyHeader {
    vertex_count: usize,
    vertex_line: usize,
    properties: Vec<String>,
    body_start: usize,
}

fn parse_ply_header(lines: &[&str]) -> Result<PlyHeader> {
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(Error::parse(1, "missing 'ply' magic line"));
    }
    let mut vertex: Option<(usize, usize)> = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    for (i, raw) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        let tok: Vec<&str> = raw.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", enc, ..] => {
                return Err(Error::Unsupported(format!("PLY encoding '{enc}' (line {lineno})")))
            }
            ["element", "vertex", n] => {
                let n = n
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad vertex count '{n}'")))?;
                vertex = Some((n, lineno));
                in_vertex = true;
            }
            ["element", name, n] => {
                in_vertex = false;
                if *n != "0" {
                    return Err(Error::Unsupported(format!(
                        "PLY element '{name}' (line {lineno}); only vertices are read"
                    )));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Unsupported(format!("list property on vertices (line {lineno})")))
            }
            ["property", ty, name] if in_vertex => {
                if matches!(*name, "x" | "y" | "z" | "nx" | "ny" | "nz")
                    && !matches!(*ty, "float" | "double" | "float32" | "float64")
                {
                    return Err(Error::parse(lineno, format!("property {name} must be float or double")));
                }
                properties.push(name.to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {
                if !format_seen {
                    return Err(Error::parse(lineno, "header has no 'format ascii 1.0' line"));
                }
                let (vertex_count, vertex_line) =
                    vertex.ok_or_else(|| Error::parse(lineno, "header declares no vertex element"))?;
                return Ok(PlyHeader {
                    vertex_count,
                    vertex_line,
                    properties,
                    body_start: i + 1,
                });
            }
            _ => return Err(Error::parse(lineno, format!("unrecognized header line '{}'", raw.trim()))),
        }
    }
    Err(Error::parse(lines.len().max(1), "header has no 'end_header'"))
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.iter().all(|l| l.trim().is_empty()) {
        return Err(Error::parse(1, "no points"));
    }
    let h = parse_ply_header(&lines)?;
    let col = |name: &str| h.properties.iter().position(|p| p == name);
    let xyz = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(Error::parse(h.vertex_line, "vertex element lacks x, y or z")),
    };
    let nrm = match (col("nx"), col("ny"), col("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let body: Vec<(usize, &str)> = lines[h.body_start..]
        .iter()
        .enumerate()
        .map(|(i, l)| (h.body_start + i + 1, *l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != h.vertex_count {
        return Err(Error::parse(
            h.vertex_line,
            format!("header declares {} vertices, body has {}", h.vertex_count, body.len()),
        ));
    }
    let mut points = Vec::with_capacity(body.len());
    let mut normals = Vec::new();
    for (lineno, line) in body {
        let v = numbers(line, lineno)?;
        if v.len() != h.properties.len() {
            return Err(Error::parse(
                lineno,
                format!("expected {} values, found {}", h.properties.len(), v.len()),
            ));
        }
        let p = Point3::new(v[xyz[0]], v[xyz[1]], v[xyz[2]]);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(lineno, "non-finite coordinate"));
        }
        points.push(p);
        if let Some(n) = nrm {
            normals.push(Point3::new(v[n[0]], v[n[1]], v[n[2]]));
        }
    }
    build(points, normals, lines.len())
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = format!("ply\nformat ascii 1.0\nelement vertex {}\n", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    match CloudFormat::from_path(path) {
        CloudFormat::Xyz => parse_xyz(&text),
        CloudFormat::Ply => parse_ply(&text),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let text = match CloudFormat::from_path(path) {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply(cloud),
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_homogeneous();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let v = numbers(line, i + 1)?;
        if v.len() != 4 {
            return Err(Error::parse(i + 1, format!("expected 4 values, found {}", v.len())));
        }
        rows.push((i + 1, v));
    }
    if rows.len() != 4 {
        return Err(Error::parse(
            rows.last().map_or(1, |r| r.0),
            format!("expected 4 rows, found {}", rows.len()),
        ));
    }
    let m = Matrix4::from_fn(|r, c| rows[r].1[c]);
    RigidTransform::from_homogeneous(&m).map_err(|e| Error::parse(rows[3].0, e.to_string()))
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    parse_transform(&fs::read_to_string(path)?)
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    fs::write(path, format_transform(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn xyz_round_trip_is_bit_exact() {
        let c = crate::data::builtin_shapes("bunny-like-composite", 300, 3).unwrap();
        assert_eq!(parse_xyz(&format_xyz(&c)).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        write_cloud(&path, &c).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn xyz_round_trip_any_values(v in prop::collection::vec(prop::array::uniform3(-1e30f64..1e30), 1..40)) {
            let c = PointCloud::from_arrays(&v).unwrap();
            prop_assert_eq!(parse_xyz(&format_xyz(&c)).unwrap(), c);
        }
    }

    #[test]
    fn ply_round_trip_with_normals() {
        let pts = vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-1.0, 2.5, 1e-17)];
        let nrm = vec![Point3::x(), Point3::z()];
        let c = PointCloud::with_normals(pts, nrm).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_cloud(&path, &c).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), c);
    }

    #[test]
    fn ply_count_mismatch_names_the_header_line() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        match parse_ply(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("3 vertices"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ply_rejections() {
        let bin = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n";
        assert!(matches!(parse_ply(bin), Err(Error::Unsupported(_))));
        let faces = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 0 0\n";
        assert!(matches!(parse_ply(faces), Err(Error::Unsupported(_))));
        let magic = "plx\n";
        assert!(matches!(parse_ply(magic), Err(Error::Parse { line: 1, .. })));
        let extra = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n";
        assert_eq!(parse_ply(extra).unwrap().point(0), &Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn empty_and_malformed_xyz() {
        for text in ["", "\n\n", "# only a comment\n"] {
            match parse_xyz(text) {
                Err(Error::Parse { message, .. }) => assert_eq!(message, "no points"),
                other => panic!("{other:?}"),
            }
        }
        assert!(matches!(parse_xyz("1 2 3\n1 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("1 2 3\n1 2 x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("1 2 3\n1 2 3 0 0 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("1 nan 3\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn transform_round_trip_and_errors() {
        let t = RigidTransform::from_euler_zyx(0.3, -0.7, 1.1, Vector3::new(0.25, -0.5, 1e-3));
        assert_eq!(parse_transform(&format_transform(&t)).unwrap(), t);
        assert!(matches!(parse_transform("1 0 0 0\n0 1 0 0\n0 0 1 0\n"), Err(Error::Parse { .. })));
        let skew = "1 0.5 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        assert!(matches!(parse_transform(skew), Err(Error::Parse { line: 4, .. })));
    }
}
