//! Procedural labeled shapes built from surface-sampled primitives.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    normalize_points, Catalog, ClassId, ClassInfo, LabeledShape, PartId, Partition, ShapePool,
};
use crate::error::{Error, Result};

/// Jitter added to every sampled coordinate.
pub const JITTER_SIGMA: f64 = 0.01;
/// Points each part is guaranteed to receive.
pub const MIN_POINTS_PER_PART: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SyntheticClass {
    Table,
    Chair,
    Lamp,
    Mug,
    Airplane,
    Knife,
    Guitar,
    Earphone,
}

impl SyntheticClass {
    pub const ALL: [SyntheticClass; 8] = [
        SyntheticClass::Table,
        SyntheticClass::Chair,
        SyntheticClass::Lamp,
        SyntheticClass::Mug,
        SyntheticClass::Airplane,
        SyntheticClass::Knife,
        SyntheticClass::Guitar,
        SyntheticClass::Earphone,
    ];

    pub fn id(self) -> ClassId {
        ClassId(self as u32)
    }

    pub fn from_id(id: ClassId) -> Option<Self> {
        Self::ALL.get(id.0 as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticClass::Table => "table",
            SyntheticClass::Chair => "chair",
            SyntheticClass::Lamp => "lamp",
            SyntheticClass::Mug => "mug",
            SyntheticClass::Airplane => "airplane",
            SyntheticClass::Knife => "knife",
            SyntheticClass::Guitar => "guitar",
            SyntheticClass::Earphone => "earphone",
        }
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            SyntheticClass::Table => &["table-top", "table-leg"],
            SyntheticClass::Chair => &["chair-seat", "chair-back", "chair-leg"],
            SyntheticClass::Lamp => &["lamp-base", "lamp-pole", "lamp-shade"],
            SyntheticClass::Mug => &["mug-body", "mug-handle"],
            SyntheticClass::Airplane => &["airplane-fuselage", "airplane-wing", "airplane-tail"],
            SyntheticClass::Knife => &["knife-blade", "knife-handle"],
            SyntheticClass::Guitar => &["guitar-body", "guitar-neck", "guitar-head"],
            SyntheticClass::Earphone => &["earphone-cup", "earphone-band"],
        }
    }

    /// Global part ids, assigned consecutively in class order.
    pub fn parts(self) -> Vec<PartId> {
        let offset: usize = Self::ALL[..self as usize]
            .iter()
            .map(|c| c.part_names().len())
            .sum();
        (0..self.part_names().len())
            .map(|i| PartId((offset + i) as u32))
            .collect()
    }

    fn part(self, local: usize) -> PartId {
        self.parts()[local]
    }

    pub fn info(self) -> ClassInfo {
        ClassInfo {
            id: self.id(),
            name: self.name().to_string(),
            parts: self.parts(),
            part_names: self.part_names().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn catalog() -> Catalog {
        Catalog::new(Self::ALL.iter().map(|c| c.info())).expect("synthetic part ids are disjoint")
    }
}

impl FromStr for SyntheticClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown synthetic class '{s}'")))
    }
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    /// (along, first perpendicular, second perpendicular) coordinate indices.
    fn frame(self) -> (usize, usize, usize) {
        match self {
            Axis::X => (0, 1, 2),
            Axis::Y => (1, 2, 0),
            Axis::Z => (2, 0, 1),
        }
    }
}

#[derive(Debug, Clone)]
enum Primitive {
    Cuboid {
        center: [f64; 3],
        half: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        axis: Axis,
        radius: f64,
        half_len: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    /// Open cone frustum around the Y axis, `base` is the center of the bottom ring.
    Frustum {
        base: [f64; 3],
        bottom: f64,
        top: f64,
        height: f64,
    },
    /// Section of a torus lying in the plane spanned by the two axes of `plane`.
    Arc {
        center: [f64; 3],
        plane: (usize, usize),
        radius: f64,
        tube: f64,
        from: f64,
        to: f64,
    },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Cuboid {
                half: [a, b, c], ..
            } => 8.0 * (a * b + b * c + c * a),
            Primitive::Cylinder {
                radius, half_len, ..
            } => TAU * radius * 2.0 * half_len + 2.0 * PI * radius * radius,
            Primitive::Ellipsoid {
                radii: [a, b, c], ..
            } => {
                // Knud Thomsen's approximation.
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Primitive::Frustum {
                bottom,
                top,
                height,
                ..
            } => PI * (bottom + top) * ((bottom - top).powi(2) + height * height).sqrt(),
            Primitive::Arc {
                radius,
                tube,
                from,
                to,
                ..
            } => (to - from) * radius * TAU * tube,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Primitive::Cuboid { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut fixed = 2;
                for (d, &w) in faces.iter().enumerate() {
                    if pick < w {
                        fixed = d;
                        break;
                    }
                    pick -= w;
                }
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = if d == fixed {
                        if rng.random::<bool>() {
                            half[d]
                        } else {
                            -half[d]
                        }
                    } else {
                        rng.random_range(-half[d]..=half[d])
                    };
                }
                add(center, p)
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                half_len,
            } => {
                let (along, u, v) = axis.frame();
                let side = TAU * radius * 2.0 * half_len;
                let caps = 2.0 * PI * radius * radius;
                let theta = rng.random_range(0.0..TAU);
                let mut p = [0.0; 3];
                if rng.random::<f64>() * (side + caps) < side {
                    p[along] = rng.random_range(-half_len..=half_len);
                    p[u] = radius * theta.cos();
                    p[v] = radius * theta.sin();
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    p[along] = if rng.random::<bool>() {
                        half_len
                    } else {
                        -half_len
                    };
                    p[u] = r * theta.cos();
                    p[v] = r * theta.sin();
                }
                add(center, p)
            }
            Primitive::Ellipsoid { center, radii } => {
                let mut dir: [f64; 3] = [0.0; 3];
                loop {
                    for d in dir.iter_mut() {
                        *d = StandardNormal.sample(rng);
                    }
                    let n = super::norm(&dir);
                    if n > 1e-9 {
                        dir.iter_mut().for_each(|d| *d /= n);
                        break;
                    }
                }
                add(
                    center,
                    [dir[0] * radii[0], dir[1] * radii[1], dir[2] * radii[2]],
                )
            }
            Primitive::Frustum {
                base,
                bottom,
                top,
                height,
            } => {
                // Height fraction with density proportional to the local radius.
                let u: f64 = rng.random();
                let slope = top - bottom;
                let t = if slope.abs() < 1e-12 {
                    u
                } else {
                    let total = bottom + slope / 2.0;
                    (-bottom + (bottom * bottom + 2.0 * slope * u * total).sqrt()) / slope
                };
                let r = bottom + slope * t;
                let theta = rng.random_range(0.0..TAU);
                add(base, [r * theta.cos(), t * height, r * theta.sin()])
            }
            Primitive::Arc {
                center,
                plane: (a, b),
                radius,
                tube,
                from,
                to,
            } => {
                let normal = 3 - a - b;
                let theta = rng.random_range(from..=to);
                let phi = rng.random_range(0.0..TAU);
                let ring = radius + tube * phi.cos();
                let mut p = [0.0; 3];
                p[a] = ring * theta.cos();
                p[b] = ring * theta.sin();
                p[normal] = tube * phi.sin();
                add(center, p)
            }
        }
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Splits `total` into integer shares proportional to `weights`
/// (largest remainder, ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        if let Some(first) = out.first_mut() {
            *first = total;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn vary(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

/// Primitives for one instance, as (local part index, primitive).
fn layout(class: SyntheticClass, rng: &mut ChaCha8Rng) -> Vec<(usize, Primitive)> {
    use Primitive::*;
    let mut out = Vec::new();
    match class {
        SyntheticClass::Table => {
            let (w, d) = (vary(rng, 0.8, 1.2), vary(rng, 0.5, 0.9));
            let (t, h) = (vary(rng, 0.03, 0.06), vary(rng, 0.6, 0.9));
            let leg = vary(rng, 0.03, 0.06);
            out.push((
                0,
                Cuboid {
                    center: [0.0, h, 0.0],
                    half: [w, t, d],
                },
            ));
            let inset = leg + vary(rng, 0.02, 0.1);
            for (sx, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let len = (h - t) / 2.0;
                out.push((
                    1,
                    Cuboid {
                        center: [sx * (w - inset), len, sz * (d - inset)],
                        half: [leg, len, leg],
                    },
                ));
            }
        }
        SyntheticClass::Chair => {
            let (sw, sd, sh) = (
                vary(rng, 0.4, 0.5),
                vary(rng, 0.4, 0.5),
                vary(rng, 0.4, 0.5),
            );
            let st = 0.04;
            let bh = vary(rng, 0.3, 0.5);
            let bt = vary(rng, 0.025, 0.04);
            out.push((
                0,
                Cuboid {
                    center: [0.0, sh, 0.0],
                    half: [sw, st, sd],
                },
            ));
            out.push((
                1,
                Cuboid {
                    center: [0.0, sh + st + bh, -sd + bt],
                    half: [sw, bh, bt],
                },
            ));
            let r = vary(rng, 0.025, 0.04);
            for (sx, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let len = (sh - st) / 2.0;
                let c = [sx * (sw - r - 0.02), len, sz * (sd - r - 0.02)];
                out.push((
                    2,
                    Cylinder {
                        center: c,
                        axis: Axis::Y,
                        radius: r,
                        half_len: len,
                    },
                ));
            }
        }
        SyntheticClass::Lamp => {
            let bt = vary(rng, 0.02, 0.04);
            let br = vary(rng, 0.25, 0.4);
            let ph = vary(rng, 0.8, 1.2);
            out.push((
                0,
                Cylinder {
                    center: [0.0, bt, 0.0],
                    axis: Axis::Y,
                    radius: br,
                    half_len: bt,
                },
            ));
            let pole_len = (ph - 2.0 * bt) / 2.0;
            out.push((
                1,
                Cylinder {
                    center: [0.0, 2.0 * bt + pole_len, 0.0],
                    axis: Axis::Y,
                    radius: 0.025,
                    half_len: pole_len,
                },
            ));
            let (bottom, top, height) = (
                vary(rng, 0.3, 0.45),
                vary(rng, 0.1, 0.2),
                vary(rng, 0.25, 0.35),
            );
            out.push((
                2,
                Frustum {
                    base: [0.0, ph + 2.0 * bt - height * 0.6, 0.0],
                    bottom,
                    top,
                    height,
                },
            ));
        }
        SyntheticClass::Mug => {
            let r = vary(rng, 0.35, 0.45);
            let h = vary(rng, 0.4, 0.55);
            out.push((
                0,
                Cylinder {
                    center: [0.0, 0.0, 0.0],
                    axis: Axis::Y,
                    radius: r,
                    half_len: h,
                },
            ));
            let hr = vary(rng, 0.2, 0.28).min(h * 0.8);
            out.push((
                1,
                Arc {
                    center: [r, 0.0, 0.0],
                    plane: (0, 1),
                    radius: hr,
                    tube: 0.04,
                    from: -FRAC_PI_2,
                    to: FRAC_PI_2,
                },
            ));
        }
        SyntheticClass::Airplane => {
            let len = vary(rng, 1.0, 1.3);
            let body = vary(rng, 0.1, 0.14);
            out.push((
                0,
                Ellipsoid {
                    center: [0.0, 0.0, 0.0],
                    radii: [len, body, body],
                },
            ));
            let chord = vary(rng, 0.25, 0.35);
            let span = vary(rng, 0.6, 0.9);
            let wx = vary(rng, -0.1, 0.15);
            for s in [1.0, -1.0] {
                out.push((
                    1,
                    Cuboid {
                        center: [wx, 0.0, s * (body + span / 2.0)],
                        half: [chord / 2.0, 0.02, span / 2.0],
                    },
                ));
            }
            let tx = -len + 0.12;
            let fin = vary(rng, 0.15, 0.22);
            out.push((
                2,
                Cuboid {
                    center: [tx, body + fin, 0.0],
                    half: [0.12, fin, 0.015],
                },
            ));
            out.push((
                2,
                Cuboid {
                    center: [tx, 0.03, 0.0],
                    half: [0.1, 0.015, vary(rng, 0.25, 0.35)],
                },
            ));
        }
        SyntheticClass::Knife => {
            let bl = vary(rng, 0.9, 1.3);
            let bw = vary(rng, 0.1, 0.15);
            out.push((
                0,
                Cuboid {
                    center: [bl / 2.0, 0.0, 0.0],
                    half: [bl / 2.0, bw, 0.01],
                },
            ));
            let hl = vary(rng, 0.4, 0.6);
            out.push((
                1,
                Cylinder {
                    center: [-hl / 2.0, 0.0, 0.0],
                    axis: Axis::X,
                    radius: vary(rng, 0.05, 0.07),
                    half_len: hl / 2.0,
                },
            ));
        }
        SyntheticClass::Guitar => {
            let rb = vary(rng, 0.35, 0.42);
            let th = vary(rng, 0.06, 0.09);
            out.push((
                0,
                Cylinder {
                    center: [0.0, 0.0, 0.0],
                    axis: Axis::Z,
                    radius: rb,
                    half_len: th,
                },
            ));
            let upper = rb * vary(rng, 0.7, 0.85);
            out.push((
                0,
                Cylinder {
                    center: [0.0, rb * 1.1, 0.0],
                    axis: Axis::Z,
                    radius: upper,
                    half_len: th,
                },
            ));
            let top = rb * 1.1 + upper;
            let nl = vary(rng, 0.7, 0.9);
            out.push((
                1,
                Cuboid {
                    center: [0.0, top + nl / 2.0, 0.0],
                    half: [0.04, nl / 2.0, 0.03],
                },
            ));
            let hh = vary(rng, 0.08, 0.12);
            out.push((
                2,
                Cuboid {
                    center: [0.0, top + nl + hh, 0.0],
                    half: [0.07, hh, 0.025],
                },
            ));
        }
        SyntheticClass::Earphone => {
            let w = vary(rng, 0.45, 0.6);
            let cr = vary(rng, 0.18, 0.25);
            for s in [1.0, -1.0] {
                out.push((
                    0,
                    Cylinder {
                        center: [s * w, 0.0, 0.0],
                        axis: Axis::X,
                        radius: cr,
                        half_len: 0.06,
                    },
                ));
            }
            let lift = vary(rng, 0.1, 0.2);
            out.push((
                1,
                Arc {
                    center: [0.0, lift, 0.0],
                    plane: (0, 1),
                    radius: w,
                    tube: 0.03,
                    from: 0.0,
                    to: PI,
                },
            ));
        }
    }
    out
}

/// Mixes a seed with a class tag so classes sharing a seed get unrelated draws.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one labeled instance of `class` with exactly `n_points` points.
///
/// Points are allocated to parts in proportion to surface area (each part
/// gets at least [`MIN_POINTS_PER_PART`]), jittered with Gaussian noise and
/// finally normalized into the unit sphere.
pub fn generate_shape(class: SyntheticClass, seed: u64, n_points: usize) -> Result<LabeledShape> {
    let n_parts = class.part_names().len();
    if n_points < MIN_POINTS_PER_PART * n_parts {
        return Err(Error::Config(format!(
            "{} needs at least {} points, got {n_points}",
            class.name(),
            MIN_POINTS_PER_PART * n_parts
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class as u64 + 1));
    let prims = layout(class, &mut rng);

    let mut part_area = vec![0.0; n_parts];
    for (part, prim) in &prims {
        part_area[*part] += prim.area();
    }
    let extra = apportion(n_points - MIN_POINTS_PER_PART * n_parts, &part_area);

    let jitter = Normal::new(0.0, JITTER_SIGMA).expect("valid sigma");
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for part in 0..n_parts {
        let members: Vec<&Primitive> = prims
            .iter()
            .filter(|(p, _)| *p == part)
            .map(|(_, q)| q)
            .collect();
        let areas: Vec<f64> = members.iter().map(|p| p.area()).collect();
        let counts = apportion(MIN_POINTS_PER_PART + extra[part], &areas);
        for (prim, count) in members.iter().zip(counts) {
            for _ in 0..count {
                let p = prim.sample(&mut rng);
                points.push([
                    p[0] + jitter.sample(&mut rng),
                    p[1] + jitter.sample(&mut rng),
                    p[2] + jitter.sample(&mut rng),
                ]);
                labels.push(class.part(part));
            }
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let mut points: Vec<[f64; 3]> = order.iter().map(|&i| points[i]).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    normalize_points(&mut points);
    LabeledShape::new(class.id(), points, labels)
}

/// Generates `n_train + n_test` shapes for each of `classes` into a pool.
pub fn generate_pool(
    classes: &[SyntheticClass],
    n_train: usize,
    n_test: usize,
    n_points: usize,
    seed: u64,
) -> Result<ShapePool> {
    let mut pool = ShapePool::new(SyntheticClass::catalog());
    for &class in classes {
        for i in 0..n_train + n_test {
            let shape = generate_shape(class, mix(seed, 1000 + i as u64), n_points)?;
            let partition = if i < n_train {
                Partition::Train
            } else {
                Partition::Test
            };
            pool.push(shape, partition)?;
        }
    }
    Ok(pool)
}
