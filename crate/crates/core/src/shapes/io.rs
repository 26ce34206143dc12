//! Native shape files and the dataset manifest.
//!
//! A shape file is plain text: a header line
//! `protoseg-shape v1 <class_id> <N>` followed by `N` lines `x y z label`.
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so writing and reading a shape reproduces it bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Catalog, ClassId, ClassInfo, LabeledShape, PartId, Partition, ShapePool};
use crate::error::{Error, Result};

const SHAPE_MAGIC: &str = "protoseg-shape";
const SHAPE_VERSION: &str = "v1";

pub fn format_shape(shape: &LabeledShape) -> String {
    let mut out = String::with_capacity(shape.len() * 64);
    let _ = writeln!(
        out,
        "{SHAPE_MAGIC} {SHAPE_VERSION} {} {}",
        shape.class_id,
        shape.len()
    );
    for (p, l) in shape.points.iter().zip(&shape.labels) {
        let _ = writeln!(out, "{} {} {} {}", p[0], p[1], p[2], l);
    }
    out
}

pub fn write_shape(path: &Path, shape: &LabeledShape) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_shape(shape)).map_err(|e| Error::io(path, e))
}

pub fn parse_shape(text: &str, file: &str) -> Result<LabeledShape> {
    let err = |line: usize, message: String| Error::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [magic, version, class, count] = fields.as_slice() else {
        return Err(err(1, format!("malformed header '{header}'")));
    };
    if *magic != SHAPE_MAGIC || *version != SHAPE_VERSION {
        return Err(err(1, format!("unsupported header '{header}'")));
    }
    let class_id = ClassId(
        class
            .parse()
            .map_err(|_| err(1, format!("bad class id '{class}'")))?,
    );
    let n: usize = count
        .parse()
        .map_err(|_| err(1, format!("bad point count '{count}'")))?;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(lineno, format!("expected 'x y z label', got '{line}'")));
        }
        let mut p = [0.0; 3];
        for d in 0..3 {
            p[d] = f[d]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad coordinate '{}'", f[d])))?;
        }
        let label = f[3]
            .parse()
            .map_err(|_| err(lineno, format!("bad label '{}'", f[3])))?;
        points.push(p);
        labels.push(PartId(label));
    }
    if points.len() != n {
        return Err(err(
            1,
            format!("header declares {n} points, found {}", points.len()),
        ));
    }
    LabeledShape::new(class_id, points, labels)
}

pub fn read_shape(path: &Path) -> Result<LabeledShape> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_shape(&text, &path.display().to_string())
}

/// One class entry of a manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: ClassId,
    pub name: String,
    pub parts: Vec<PartId>,
    #[serde(default)]
    pub part_names: Vec<String>,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_points: usize,
    pub classes: Vec<ManifestClass>,
}

/// Writes every shape of `pool` under `dir` and a `manifest.json` listing them.
pub fn save_manifest(dir: &Path, pool: &ShapePool) -> Result<PathBuf> {
    let mut classes = Vec::new();
    let n_points = pool.shapes().first().map_or(0, LabeledShape::len);
    for id in pool.class_ids() {
        let info = pool.catalog().class(id)?;
        let mut entry = ManifestClass {
            id,
            name: info.name.clone(),
            parts: info.parts.clone(),
            part_names: info.part_names.clone(),
            train: vec![],
            test: vec![],
        };
        for (partition, list) in [
            (Partition::Train, &mut entry.train),
            (Partition::Test, &mut entry.test),
        ] {
            let tag = match partition {
                Partition::Train => "train",
                Partition::Test => "test",
            };
            for (i, &idx) in pool.indices(id, partition).iter().enumerate() {
                let rel = PathBuf::from(&info.name).join(format!("{tag}_{i:04}.shape"));
                write_shape(&dir.join(&rel), pool.shape(idx))?;
                list.push(rel);
            }
        }
        classes.push(entry);
    }
    let manifest = Manifest { n_points, classes };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<ShapePool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let catalog = Catalog::new(manifest.classes.iter().map(|c| ClassInfo {
        id: c.id,
        name: c.name.clone(),
        parts: c.parts.clone(),
        part_names: c.part_names.clone(),
    }))?;
    let mut pool = ShapePool::new(catalog);
    for class in &manifest.classes {
        for (partition, files) in [
            (Partition::Train, &class.train),
            (Partition::Test, &class.test),
        ] {
            for rel in files {
                let file = base.join(rel);
                let shape = read_shape(&file)?;
                if shape.class_id != class.id {
                    return Err(Error::Parse {
                        file: file.display().to_string(),
                        line: 1,
                        message: format!(
                            "class {} listed under class {}",
                            shape.class_id, class.id
                        ),
                    });
                }
                pool.push(shape, partition).map_err(|e| Error::Parse {
                    file: file.display().to_string(),
                    line: 0,
                    message: e.to_string(),
                })?;
            }
        }
    }
    Ok(pool)
}
