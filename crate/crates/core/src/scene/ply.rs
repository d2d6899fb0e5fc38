//! Binary little-endian PLY I/O in the common 3DGS export layout.
//!
//! Vertex properties (all `float`, little-endian):
//!
//! | property              | meaning                                  |
//! |-----------------------|------------------------------------------|
//! | `x y z`               | position                                 |
//! | `nx ny nz`            | unused normals (optional, written as 0)  |
//! | `f_dc_0..2`           | degree-0 SH coefficients                 |
//! | `f_rest_0..k`         | higher-order SH (optional, preserved)    |
//! | `opacity`             | logit of opacity                         |
//! | `scale_0..2`          | natural log of per-axis scale            |
//! | `rot_0..3`            | quaternion `(w, x, y, z)`, not normalized |
//!
//! Unknown float properties are skipped on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{GaussianPoint, Scene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFormat {
    #[default]
    SplatPly,
}

const LOGIT_CLAMP: f64 = 1e-7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

struct Layout {
    count: usize,
    names: Vec<String>,
}

impl Layout {
    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::header(name, "required property missing"))
    }
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Layout> {
    let mut line = String::new();
    let next_line = |reader: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::header("header", e.to_string()))?;
        Ok(n > 0)
    };

    if !next_line(reader, &mut line)? || line.trim_end() != "ply" {
        return Err(Error::header("magic", "file does not start with `ply`"));
    }

    let mut count = None;
    let mut names = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    loop {
        if !next_line(reader, &mut line)? {
            return Err(Error::header("end_header", "unexpected end of file"));
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                let fmt = tokens.next().unwrap_or_default();
                if fmt != "binary_little_endian" {
                    return Err(Error::header("format", format!("unsupported format `{fmt}`")));
                }
                format_seen = true;
            }
            Some("element") => {
                let name = tokens.next().unwrap_or_default();
                let n: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::header(format!("element {name}"), "invalid count"))?;
                if name == "vertex" {
                    if count.is_some() {
                        return Err(Error::header("element vertex", "declared twice"));
                    }
                    count = Some(n);
                    in_vertex = true;
                } else if n != 0 {
                    return Err(Error::header(
                        format!("element {name}"),
                        "only the vertex element is supported",
                    ));
                } else {
                    in_vertex = false;
                }
            }
            Some("property") => {
                let ty = tokens.next().unwrap_or_default();
                let name = tokens.next().unwrap_or_default().to_string();
                if !in_vertex {
                    continue;
                }
                if ty != "float" && ty != "float32" {
                    return Err(Error::header(name, format!("unsupported property type `{ty}`")));
                }
                if names.contains(&name) {
                    return Err(Error::header(name, "duplicate property"));
                }
                names.push(name);
            }
            Some(other) => {
                return Err(Error::header(other, "unrecognized header keyword"));
            }
        }
    }
    if !format_seen {
        return Err(Error::header("format", "missing format line"));
    }
    let count = count.ok_or_else(|| Error::header("element vertex", "missing"))?;
    Ok(Layout { count, names })
}

/// Loads a scene, decoding log-scales, logit-opacities, and normalizing quaternions.
pub fn load_scene(path: impl AsRef<Path>, format: SceneFormat) -> Result<Scene> {
    let SceneFormat::SplatPly = format;
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let layout = read_header(&mut reader)?;

    let pos = [layout.index("x")?, layout.index("y")?, layout.index("z")?];
    let dc = [layout.index("f_dc_0")?, layout.index("f_dc_1")?, layout.index("f_dc_2")?];
    let opacity = layout.index("opacity")?;
    let scale = [layout.index("scale_0")?, layout.index("scale_1")?, layout.index("scale_2")?];
    let rot = [
        layout.index("rot_0")?,
        layout.index("rot_1")?,
        layout.index("rot_2")?,
        layout.index("rot_3")?,
    ];
    let mut rest = Vec::new();
    while let Ok(i) = layout.index(&format!("f_rest_{}", rest.len())) {
        rest.push(i);
    }

    let stride = layout.names.len();
    let mut row = vec![0u8; stride * 4];
    let mut values = vec![0f64; stride];
    let mut points = Vec::with_capacity(layout.count);
    for index in 0..layout.count {
        reader.read_exact(&mut row).map_err(|e| Error::io(path, e))?;
        for (v, bytes) in values.iter_mut().zip(row.chunks_exact(4)) {
            *v = f32::from_le_bytes(bytes.try_into().expect("chunk of 4")) as f64;
        }
        let get = |field: &'static str, i: usize| -> Result<f64> {
            let v = values[i];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidPoint { index, field })
            }
        };

        let position =
            Vector3::new(get("x", pos[0])?, get("y", pos[1])?, get("z", pos[2])?);
        let scale = Vector3::new(
            get("scale_0", scale[0])?.exp(),
            get("scale_1", scale[1])?.exp(),
            get("scale_2", scale[2])?.exp(),
        );
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidPoint { index, field: "scale" });
        }
        let q = Quaternion::new(
            get("rot_0", rot[0])?,
            get("rot_1", rot[1])?,
            get("rot_2", rot[2])?,
            get("rot_3", rot[3])?,
        );
        if q.norm() < 1e-12 {
            return Err(Error::InvalidPoint { index, field: "rot" });
        }
        let opacity = sigmoid(get("opacity", opacity)?).clamp(0.0, 1.0);
        let sh_dc = [get("f_dc_0", dc[0])?, get("f_dc_1", dc[1])?, get("f_dc_2", dc[2])?];
        let sh_rest = rest
            .iter()
            .map(|&i| get("f_rest", i))
            .collect::<Result<Vec<_>>>()?;

        points.push(GaussianPoint {
            position,
            scale,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity,
            sh_dc,
            sh_rest,
        });
    }

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Scene::new(id, points))
}

/// Writes a scene; refuses scenes that violate point invariants.
pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    scene.validate()?;
    let path = path.as_ref();
    let rest_len = scene.points.first().map_or(0, |p| p.sh_rest.len());

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    let mut props: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    props.extend((0..rest_len).map(|i| format!("f_rest_{i}")));
    props.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    for p in &props {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    let mut row: Vec<f32> = Vec::with_capacity(props.len());
    for p in &scene.points {
        row.clear();
        row.extend(p.position.iter().map(|&v| v as f32));
        row.extend([0.0f32; 3]);
        row.extend(p.sh_dc.iter().map(|&v| v as f32));
        row.extend(p.sh_rest.iter().map(|&v| v as f32));
        row.push(logit(p.opacity) as f32);
        row.extend(p.scale.iter().map(|&s| s.ln() as f32));
        let q = p.rotation.quaternion();
        row.extend([q.w, q.i, q.j, q.k].map(|v| v as f32));
        for v in &row {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, header: &str, rows: &[Vec<f32>]) {
        let mut f = File::create(path).unwrap();
        f.write_all(header.as_bytes()).unwrap();
        for r in rows {
            for v in r {
                f.write_all(&v.to_le_bytes()).unwrap();
            }
        }
    }

    const MINIMAL: &str = "ply\nformat binary_little_endian 1.0\nelement vertex {n}\n\
property float x\nproperty float y\nproperty float z\n\
property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n\
property float opacity\nproperty float scale_0\nproperty float scale_1\nproperty float scale_2\n\
property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\nend_header\n";

    #[test]
    fn empty_file_gives_empty_scene() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_raw(&path, &MINIMAL.replace("{n}", "0"), &[]);
        let scene = load_scene(&path, SceneFormat::SplatPly).unwrap();
        assert!(scene.is_empty());
        assert_eq!(scene.id, "empty");
    }

    #[test]
    fn zero_log_scale_decodes_to_unit_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let row = vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        write_raw(&path, &MINIMAL.replace("{n}", "1"), &[row]);
        let scene = load_scene(&path, SceneFormat::SplatPly).unwrap();
        let p = &scene.points[0];
        assert_eq!(p.scale, Vector3::new(1.0, 1.0, 1.0));
        assert!((p.opacity - 0.5).abs() < 1e-12);
        // (2,0,0,0) normalizes to identity.
        assert!((p.rotation.quaternion().w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_property_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let header = MINIMAL.replace("{n}", "0").replace("property float opacity\n", "");
        write_raw(&path, &header, &[]);
        match load_scene(&path, SceneFormat::SplatPly) {
            Err(Error::Header { field, .. }) => assert_eq!(field, "opacity"),
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_type_and_format_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let header = MINIMAL.replace("{n}", "0").replace("property float x", "property double x");
        write_raw(&path, &header, &[]);
        match load_scene(&path, SceneFormat::SplatPly) {
            Err(Error::Header { field, .. }) => assert_eq!(field, "x"),
            other => panic!("expected header error, got {other:?}"),
        }
        let header = MINIMAL.replace("{n}", "0").replace("binary_little_endian", "ascii");
        write_raw(&path, &header, &[]);
        assert!(matches!(
            load_scene(&path, SceneFormat::SplatPly),
            Err(Error::Header { field, .. }) if field == "format"
        ));
    }

    #[test]
    fn non_finite_attribute_reports_point_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ply");
        let good = vec![0.0; 10].into_iter().chain([1.0, 0.0, 0.0, 0.0]).collect::<Vec<f32>>();
        let mut bad = good.clone();
        bad[1] = f32::NAN;
        write_raw(&path, &MINIMAL.replace("{n}", "2"), &[good, bad]);
        assert!(matches!(
            load_scene(&path, SceneFormat::SplatPly),
            Err(Error::InvalidPoint { index: 1, field: "y" })
        ));
    }

    #[test]
    fn truncated_body_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ply");
        let row = vec![0.0; 10].into_iter().chain([1.0, 0.0, 0.0, 0.0]).collect::<Vec<f32>>();
        write_raw(&path, &MINIMAL.replace("{n}", "3"), &[row]);
        assert!(matches!(load_scene(&path, SceneFormat::SplatPly), Err(Error::Io { .. })));
    }

    #[test]
    fn nan_scene_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.ply");
        let mut p = GaussianPoint {
            position: Vector3::zeros(),
            scale: Vector3::repeat(0.1),
            rotation: UnitQuaternion::identity(),
            opacity: 0.5,
            sh_dc: [0.0; 3],
            sh_rest: vec![],
        };
        p.sh_dc[2] = f64::NAN;
        assert!(save_scene(&Scene::new("s", vec![p]), &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn empty_scene_declares_zero_elements() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        save_scene(&Scene::new("e", vec![]), &path).unwrap();
        let text = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&text);
        assert!(text.contains("element vertex 0\n"));
        assert!(load_scene(&path, SceneFormat::SplatPly).unwrap().is_empty());
    }
}
