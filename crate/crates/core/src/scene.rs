//! Scene descriptions and rasterization of binary amplitude objects.
//!
//! Config files are flat `key = value` text, one key per line, `#` starts a
//! comment. Lengths accept `m`, `mm`, `um` and `nm` suffixes; bare numbers are
//! meters. Lists are comma-separated.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::field::IntensityImage;

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectSpec {
    /// Three vertical slits, left to right, centered in the field of view.
    ThreeSlit {
        widths: [f64; 3],
        separations: [f64; 2],
        /// Vertical extent of every slit.
        length: f64,
    },
    /// Regular star polygon centered in the field of view; `stroke == 0`
    /// fills it, otherwise only a band of that width around the edge is open.
    Star {
        points: usize,
        outer_radius: f64,
        inner_radius: f64,
        stroke: f64,
    },
    /// 16-bit PGM thresholded at half scale.
    Bitmap(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub grid: usize,
    pub fov: f64,
    pub wavelength: f64,
    pub distance: f64,
    pub object: ObjectSpec,
    pub modulation_depth: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub init_seed: u64,
}

/// Wavelength used throughout the experiments (0.36 THz).
pub const DEFAULT_WAVELENGTH: f64 = 833.3e-6;
pub const DEFAULT_FOV: f64 = 10.5e-3;

impl SceneSpec {
    pub fn pitch(&self) -> f64 {
        self.fov / self.grid as f64
    }

    /// The lambda/7 three-slit geometry (1217/884/920 um slits, 118 um gaps).
    pub fn three_slit_lambda7(grid: usize, distance: f64) -> Self {
        Self {
            grid,
            fov: DEFAULT_FOV,
            wavelength: DEFAULT_WAVELENGTH,
            distance,
            object: ObjectSpec::ThreeSlit {
                widths: [1217e-6, 884e-6, 920e-6],
                separations: [118e-6, 118e-6],
                length: 6e-3,
            },
            modulation_depth: crate::encoding::DEFAULT_MODULATION_DEPTH,
            noise_sigma: 0.0,
            noise_seed: 0,
            init_seed: 0,
        }
    }

    pub fn star(grid: usize, distance: f64) -> Self {
        Self {
            object: ObjectSpec::Star {
                points: 5,
                outer_radius: 4.2e-3,
                inner_radius: 1.8e-3,
                stroke: 0.0,
            },
            ..Self::three_slit_lambda7(grid, distance)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || !self.grid.is_power_of_two() {
            return Err(Error::Construction(format!("grid must be a power of two >= 2, got {}", self.grid)));
        }
        for (name, v) in [("fov", self.fov), ("wavelength", self.wavelength)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Construction(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.distance.is_finite() {
            return Err(Error::Construction("distance must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Construction(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        crate::encoding::check_depth(self.modulation_depth)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::three_slit_lambda7(64, 0.0);
        let mut object_kind: Option<(String, usize)> = None;
        let mut widths = None;
        let mut separations = None;
        let mut length = None;
        let mut star = (5usize, 4.2e-3, 1.8e-3, 0.0);
        let mut bitmap = None;

        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let at = offset;
            offset += raw.len();
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| Error::format(at, format!("{key}: {msg}"));
            match key {
                "grid" => spec.grid = value.parse().map_err(|e| bad(format!("{e}")))?,
                "fov" => spec.fov = parse_length(value).map_err(bad)?,
                "wavelength" => spec.wavelength = parse_length(value).map_err(bad)?,
                "distance" => spec.distance = parse_length(value).map_err(bad)?,
                "object" => object_kind = Some((value.to_ascii_lowercase(), at)),
                "slit_widths" => widths = Some(parse_list::<3>(value).map_err(bad)?),
                "slit_separations" => separations = Some(parse_list::<2>(value).map_err(bad)?),
                "slit_length" => length = Some(parse_length(value).map_err(bad)?),
                "star_points" => star.0 = value.parse().map_err(|e| bad(format!("{e}")))?,
                "star_outer_radius" => star.1 = parse_length(value).map_err(bad)?,
                "star_inner_radius" => star.2 = parse_length(value).map_err(bad)?,
                "star_stroke" => star.3 = parse_length(value).map_err(bad)?,
                "bitmap" => bitmap = Some(PathBuf::from(value)),
                "modulation_depth" => spec.modulation_depth = parse_number(value).map_err(bad)?,
                "noise_sigma" => spec.noise_sigma = parse_number(value).map_err(bad)?,
                "noise_seed" => spec.noise_seed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "init_seed" => spec.init_seed = value.parse().map_err(|e| bad(format!("{e}")))?,
                _ => return Err(Error::format(at, format!("unknown key '{key}'"))),
            }
        }

        let (kind, at) = object_kind.unwrap_or(("three_slit".into(), 0));
        spec.object = match kind.as_str() {
            "three_slit" => {
                let ObjectSpec::ThreeSlit {
                    widths: w0,
                    separations: s0,
                    length: l0,
                } = spec.object
                else {
                    unreachable!()
                };
                ObjectSpec::ThreeSlit {
                    widths: widths.unwrap_or(w0),
                    separations: separations.unwrap_or(s0),
                    length: length.unwrap_or(l0),
                }
            }
            "star" => ObjectSpec::Star {
                points: star.0,
                outer_radius: star.1,
                inner_radius: star.2,
                stroke: star.3,
            },
            "bitmap" => ObjectSpec::Bitmap(bitmap.ok_or_else(|| Error::format(at, "object = bitmap needs a bitmap path"))?),
            other => return Err(Error::format(at, format!("unknown object '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Inverse of [`SceneSpec::parse`] (lengths written in meters).
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grid = {}", self.grid);
        let _ = writeln!(s, "fov = {:e}", self.fov);
        let _ = writeln!(s, "wavelength = {:e}", self.wavelength);
        let _ = writeln!(s, "distance = {:e}", self.distance);
        match &self.object {
            ObjectSpec::ThreeSlit {
                widths,
                separations,
                length,
            } => {
                let _ = writeln!(s, "object = three_slit");
                let _ = writeln!(s, "slit_widths = {:e}, {:e}, {:e}", widths[0], widths[1], widths[2]);
                let _ = writeln!(s, "slit_separations = {:e}, {:e}", separations[0], separations[1]);
                let _ = writeln!(s, "slit_length = {length:e}");
            }
            ObjectSpec::Star {
                points,
                outer_radius,
                inner_radius,
                stroke,
            } => {
                let _ = writeln!(s, "object = star");
                let _ = writeln!(s, "star_points = {points}");
                let _ = writeln!(s, "star_outer_radius = {outer_radius:e}");
                let _ = writeln!(s, "star_inner_radius = {inner_radius:e}");
                let _ = writeln!(s, "star_stroke = {stroke:e}");
            }
            ObjectSpec::Bitmap(p) => {
                let _ = writeln!(s, "object = bitmap");
                let _ = writeln!(s, "bitmap = {}", p.display());
            }
        }
        let _ = writeln!(s, "modulation_depth = {:e}", self.modulation_depth);
        let _ = writeln!(s, "noise_sigma = {:e}", self.noise_sigma);
        let _ = writeln!(s, "noise_seed = {}", self.noise_seed);
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        s
    }
}

fn parse_number(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.trim().parse().map_err(|e| format!("'{v}': {e}"))?;
    if !x.is_finite() {
        return Err(format!("'{v}' is not finite"));
    }
    Ok(x)
}

/// `"118um"` -> `1.18e-4`.
pub fn parse_length(v: &str) -> std::result::Result<f64, String> {
    let v = v.trim();
    let (num, scale) = if let Some(n) = v.strip_suffix("mm") {
        (n, 1e-3)
    } else if let Some(n) = v.strip_suffix("um") {
        (n, 1e-6)
    } else if let Some(n) = v.strip_suffix("nm") {
        (n, 1e-9)
    } else if let Some(n) = v.strip_suffix('m') {
        (n, 1.0)
    } else {
        (v, 1.0)
    };
    Ok(parse_number(num)? * scale)
}

fn parse_list<const K: usize>(v: &str) -> std::result::Result<[f64; K], String> {
    let items: Vec<f64> = v.split(',').map(parse_length).collect::<std::result::Result<_, _>>()?;
    items.try_into().map_err(|items: Vec<f64>| format!("expected {K} values, got {}", items.len()))
}

/// Pixel boundary nearest to a physical coordinate (error <= half a pixel).
fn edge(x: f64, pitch: f64) -> isize {
    (x / pitch).round() as isize
}

fn three_slit(n: usize, pitch: f64, widths: &[f64; 3], separations: &[f64; 2], length: f64) -> Result<Vec<f64>> {
    if widths.iter().chain(separations).chain([&length]).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Construction("slit widths, separations and length must be positive".into()));
    }
    let fov = n as f64 * pitch;
    let total = widths.iter().sum::<f64>() + separations.iter().sum::<f64>();
    if total > fov || length > fov {
        return Err(Error::Construction(format!(
            "slit geometry {:.3} mm x {:.3} mm exceeds the {:.3} mm field of view",
            total * 1e3,
            length * 1e3,
            fov * 1e3
        )));
    }
    let mut edges = Vec::with_capacity(6);
    let mut x = (fov - total) / 2.0;
    for (i, w) in widths.iter().enumerate() {
        edges.push((edge(x, pitch), edge(x + w, pitch)));
        x += w + separations.get(i).copied().unwrap_or(0.0);
    }
    let top = edge((fov - length) / 2.0, pitch);
    let bottom = edge((fov + length) / 2.0, pitch);
    let mut v = vec![0.0; n * n];
    for y in top.max(0)..bottom.min(n as isize) {
        for &(a, b) in &edges {
            for x in a.max(0)..b.min(n as isize) {
                v[y as usize * n + x as usize] = 1.0;
            }
        }
    }
    Ok(v)
}

fn star_vertices(points: usize, outer: f64, inner: f64, cx: f64, cy: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            // first tip points up
            let a = std::f64::consts::PI * k as f64 / points as f64 - std::f64::consts::FRAC_PI_2;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn star(n: usize, pitch: f64, points: usize, outer: f64, inner: f64, stroke: f64) -> Result<Vec<f64>> {
    if points < 2 || !(outer > 0.0 && inner > 0.0 && inner < outer) || !(stroke >= 0.0) {
        return Err(Error::Construction(format!(
            "star needs >= 2 points and 0 < inner < outer radius, got {points}, {inner}, {outer}"
        )));
    }
    let fov = n as f64 * pitch;
    if 2.0 * outer + stroke > fov {
        return Err(Error::Construction(format!(
            "star of radius {:.3} mm exceeds the {:.3} mm field of view",
            outer * 1e3,
            fov * 1e3
        )));
    }
    let poly = star_vertices(points, outer, inner, fov / 2.0, fov / 2.0);
    let mut v = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let p = ((x as f64 + 0.5) * pitch, (y as f64 + 0.5) * pitch);
            let open = if stroke == 0.0 {
                inside(&poly, p.0, p.1)
            } else {
                (0..poly.len()).any(|i| segment_distance(p, poly[i], poly[(i + 1) % poly.len()]) <= stroke / 2.0)
            };
            if open {
                v[y * n + x] = 1.0;
            }
        }
    }
    Ok(v)
}

/// Binary object mask (1 = transmissive) on the scene grid.
pub fn build_scene(spec: &SceneSpec) -> Result<IntensityImage> {
    spec.validate()?;
    let (n, pitch) = (spec.grid, spec.pitch());
    let values = match &spec.object {
        ObjectSpec::ThreeSlit {
            widths,
            separations,
            length,
        } => three_slit(n, pitch, widths, separations, *length)?,
        ObjectSpec::Star {
            points,
            outer_radius,
            inner_radius,
            stroke,
        } => star(n, pitch, *points, *outer_radius, *inner_radius, *stroke)?,
        ObjectSpec::Bitmap(path) => {
            let img = crate::io::read_pgm_path(path, pitch)?;
            if img.width() != n || img.height() != n {
                return Err(Error::Dimension(format!(
                    "bitmap is {}x{}, scene grid is {n}x{n}",
                    img.width(),
                    img.height()
                )));
            }
            img.values().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()
        }
    };
    IntensityImage::new(n, n, pitch, values)
}

/// Column ranges `[start, end)` of the three rasterized slits.
pub fn slit_columns(spec: &SceneSpec) -> Result<Vec<std::ops::Range<usize>>> {
    let ObjectSpec::ThreeSlit { widths, separations, .. } = &spec.object else {
        return Err(Error::Parameter("scene is not a three-slit object".into()));
    };
    let pitch = spec.pitch();
    let total = widths.iter().sum::<f64>() + separations.iter().sum::<f64>();
    let mut x = (spec.fov - total) / 2.0;
    let mut out = Vec::new();
    for (i, w) in widths.iter().enumerate() {
        out.push(edge(x, pitch).max(0) as usize..edge(x + w, pitch).max(0) as usize);
        x += w + separations.get(i).copied().unwrap_or(0.0);
    }
    Ok(out)
}
