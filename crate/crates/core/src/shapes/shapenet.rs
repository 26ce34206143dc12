//! Loader for the public ShapeNet part-segmentation release.
//!
//! Two layouts are understood, selected per category directory:
//! * per-shape `*.txt` files with lines `x y z nx ny nz label`, where the
//!   label is the global part id (0..50);
//! * paired `points/*.pts` (`x y z`) and `points_label/*.seg` files, where
//!   labels are 1-based and local to the category.
//!
//! The root must contain `synsetoffset2category.txt` mapping category names
//! to synset directories.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize_points, Catalog, ClassId, ClassInfo, LabeledShape, PartId};
use crate::error::{Error, Result};

/// Category name and number of parts, in the benchmark's canonical order.
const CATEGORIES: [(&str, u32); 16] = [
    ("Airplane", 4),
    ("Bag", 2),
    ("Cap", 2),
    ("Car", 4),
    ("Chair", 4),
    ("Earphone", 3),
    ("Guitar", 3),
    ("Knife", 2),
    ("Lamp", 4),
    ("Laptop", 2),
    ("Motorbike", 6),
    ("Mug", 2),
    ("Pistol", 3),
    ("Rocket", 3),
    ("Skateboard", 3),
    ("Table", 3),
];

pub fn shapenet_catalog() -> Catalog {
    let mut offset = 0;
    let classes = CATEGORIES.iter().enumerate().map(|(i, &(name, n))| {
        let parts: Vec<PartId> = (offset..offset + n).map(PartId).collect();
        offset += n;
        ClassInfo {
            id: ClassId(i as u32),
            name: name.to_string(),
            part_names: vec![],
            parts,
        }
    });
    Catalog::new(classes.collect::<Vec<_>>()).expect("ShapeNet part ids are disjoint")
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn parse_floats(line: &str, file: &Path, lineno: usize, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| parse_err(file, lineno, format!("non-numeric field in '{line}'")))?;
    if values.len() != expected {
        return Err(parse_err(
            file,
            lineno,
            format!("expected {expected} fields, got {}", values.len()),
        ));
    }
    Ok(values)
}

fn as_label(v: f64, file: &Path, lineno: usize) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(parse_err(
            file,
            lineno,
            format!("label {v} is not a non-negative integer"),
        ));
    }
    Ok(v as u32)
}

fn check_label(label: PartId, info: &ClassInfo, file: &Path, lineno: usize) -> Result<()> {
    if !info.parts.contains(&label) {
        return Err(parse_err(
            file,
            lineno,
            format!("label {label} is not a part of {}", info.name),
        ));
    }
    Ok(())
}

fn load_normal_file(file: &Path, info: &ClassInfo) -> Result<(Vec<[f64; 3]>, Vec<PartId>)> {
    let text = read(file)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, file, i + 1, 7)?;
        let label = PartId(as_label(v[6], file, i + 1)?);
        check_label(label, info, file, i + 1)?;
        points.push([v[0], v[1], v[2]]);
        labels.push(label);
    }
    Ok((points, labels))
}

fn load_paired_files(
    pts: &Path,
    seg: &Path,
    info: &ClassInfo,
) -> Result<(Vec<[f64; 3]>, Vec<PartId>)> {
    let mut points = Vec::new();
    for (i, line) in read(pts)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, pts, i + 1, 3)?;
        points.push([v[0], v[1], v[2]]);
    }
    let mut labels = Vec::new();
    let first = info.parts[0].0;
    for (i, line) in read(seg)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, seg, i + 1, 1)?;
        let local = as_label(v[0], seg, i + 1)?;
        if local == 0 {
            return Err(parse_err(seg, i + 1, "local labels are 1-based"));
        }
        let label = PartId(first + local - 1);
        check_label(label, info, seg, i + 1)?;
        labels.push(label);
    }
    if labels.len() != points.len() {
        return Err(parse_err(
            seg,
            labels.len() + 1,
            format!("{} labels for {} points", labels.len(), points.len()),
        ));
    }
    Ok((points, labels))
}

/// Normalizes into the unit sphere, then draws exactly `n_points` points:
/// a random subset when the source has enough, with replacement otherwise.
pub(crate) fn resample(
    class_id: ClassId,
    mut points: Vec<[f64; 3]>,
    labels: Vec<PartId>,
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledShape> {
    if points.is_empty() {
        return Err(Error::Usage("cannot resample an empty shape".into()));
    }
    normalize_points(&mut points);
    let picks: Vec<usize> = if points.len() >= n_points {
        rand::seq::index::sample(rng, points.len(), n_points).into_vec()
    } else {
        (0..n_points)
            .map(|_| rng.random_range(0..points.len()))
            .collect()
    };
    LabeledShape::new(
        class_id,
        picks.iter().map(|&i| points[i]).collect(),
        picks.iter().map(|&i| labels[i]).collect(),
    )
}

/// Loads every shape listed by the category mapping under `root`.
pub fn load_shapenet_part(root: &Path, n_points: usize, seed: u64) -> Result<Vec<LabeledShape>> {
    let catalog = shapenet_catalog();
    let mapping = root.join("synsetoffset2category.txt");
    let text = read(&mapping)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, synset] = fields.as_slice() else {
            if fields.is_empty() {
                continue;
            }
            return Err(parse_err(
                &mapping,
                i + 1,
                format!("expected '<category> <synset>', got '{line}'"),
            ));
        };
        let info = catalog
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown ShapeNet category '{name}'")))?;
        let dir = root.join(synset);
        if dir.join("points").is_dir() {
            for pts in sorted_files(&dir.join("points"), "pts")? {
                let stem = pts.file_stem().expect("file has a stem");
                let seg = dir.join("points_label").join(stem).with_extension("seg");
                let (points, labels) = load_paired_files(&pts, &seg, info)?;
                shapes.push(resample(info.id, points, labels, n_points, &mut rng)?);
            }
        } else {
            for file in sorted_files(&dir, "txt")? {
                let (points, labels) = load_normal_file(&file, info)?;
                shapes.push(resample(info.id, points, labels, n_points, &mut rng)?);
            }
        }
    }
    Ok(shapes)
}
