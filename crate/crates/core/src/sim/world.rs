use nalgebra::Vector3;

use super::SimError;
use crate::geometry::Pose;
use crate::surfel::Surfel;

/// Finite parallelogram `corner + s·edge_u + t·edge_v`, `s, t ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub corner: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl Patch {
    pub fn new(corner: Vector3<f64>, edge_u: Vector3<f64>, edge_v: Vector3<f64>) -> Result<Self, SimError> {
        let p = Self { corner, edge_u, edge_v };
        let cross = edge_u.cross(&edge_v).norm();
        let all_finite = [corner, edge_u, edge_v].iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite || !(cross > 1e-12 * edge_u.norm() * edge_v.norm()) || cross == 0.0 {
            return Err(SimError::DegeneratePatch);
        }
        Ok(p)
    }

    /// Axis-aligned rectangle spanned by two of the coordinate axes at a
    /// fixed third coordinate.
    fn axis_rect(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        let d = hi - lo;
        let flat = (0..3).find(|&k| d[k] == 0.0).expect("one flat axis");
        let (a, b) = match flat {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut u = Vector3::zeros();
        u[a] = d[a];
        let mut v = Vector3::zeros();
        v[b] = d[b];
        Self {
            corner: lo,
            edge_u: u,
            edge_v: v,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.corner + (self.edge_u + self.edge_v) * 0.5
    }

    fn coords(&self, p: &Vector3<f64>) -> (f64, f64) {
        let d = p - self.corner;
        let uu = self.edge_u.norm_squared();
        let vv = self.edge_v.norm_squared();
        let uv = self.edge_u.dot(&self.edge_v);
        let du = d.dot(&self.edge_u);
        let dv = d.dot(&self.edge_v);
        let det = uu * vv - uv * uv;
        ((du * vv - dv * uv) / det, (dv * uu - du * uv) / det)
    }

    /// Ray parameter of the first hit, if any, with `1e-9 < λ ≤ max`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max: f64) -> Option<f64> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 * n.norm() * dir.norm() {
            return None;
        }
        let lambda = n.dot(&(self.corner - origin)) / denom;
        if !(lambda > 1e-9 && lambda <= max) {
            return None;
        }
        let (s, t) = self.coords(&(origin + dir * lambda));
        const EDGE_TOL: f64 = 1e-12;
        let inside = (-EDGE_TOL..=1.0 + EDGE_TOL).contains(&s) && (-EDGE_TOL..=1.0 + EDGE_TOL).contains(&t);
        inside.then_some(lambda)
    }

    /// Euclidean distance from `p` to the closed parallelogram.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let (s, t) = self.coords(p);
        if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
            return self.normal().dot(&(p - self.corner)).abs();
        }
        let c = self.corner;
        let (u, v) = (self.edge_u, self.edge_v);
        [(c, u), (c, v), (c + u, v), (c + v, u)]
            .iter()
            .map(|(a, e)| segment_distance(p, a, e))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            corner: pose.transform_point(&self.corner),
            edge_u: pose.rotate(&self.edge_u),
            edge_v: pose.rotate(&self.edge_v),
        }
    }
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, e: &Vector3<f64>) -> f64 {
    let t = ((p - a).dot(e) / e.norm_squared()).clamp(0.0, 1.0);
    (p - (a + e * t)).norm()
}

/// Axis-aligned closed box as 6 inward- or outward-facing rectangles.
fn box_patches(lo: Vector3<f64>, hi: Vector3<f64>) -> Vec<Patch> {
    let mut out = Vec::with_capacity(6);
    for k in 0..3 {
        for at in [lo[k], hi[k]] {
            let mut a = lo;
            let mut b = hi;
            a[k] = at;
            b[k] = at;
            out.push(Patch::axis_rect(a, b));
        }
    }
    out
}

/// Vertical sides of an axis-aligned box (no top or bottom).
fn pillar(lo: Vector3<f64>, hi: Vector3<f64>) -> Vec<Patch> {
    box_patches(lo, hi)
        .into_iter()
        .filter(|p| p.normal().z.abs() < 0.5)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    BoxRoom,
    CorridorLoop,
    FigureEight,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::BoxRoom, Preset::CorridorLoop, Preset::FigureEight];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::BoxRoom => "box-room",
            Preset::CorridorLoop => "corridor-loop",
            Preset::FigureEight => "figure-eight",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SimError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| SimError::UnknownPreset(name.to_string()))
    }
}

/// A set of planar patches.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WorldSpec {
    pub patches: Vec<Patch>,
}

impl WorldSpec {
    pub fn new(patches: Vec<Patch>) -> Result<Self, SimError> {
        for p in &patches {
            Patch::new(p.corner, p.edge_u, p.edge_v)?;
        }
        Ok(Self { patches })
    }

    /// Preset geometry in the frame where the preset's path starts at the
    /// identity pose.
    pub fn preset(preset: Preset) -> Self {
        let v = Vector3::new;
        let patches = match preset {
            // 8 x 6 x 3 m room around a 1.5 m circle
            Preset::BoxRoom => box_patches(v(-4.0, -1.5, -1.2), v(4.0, 4.5, 1.8)),
            // rectangular corridor ring, 2.4 m wide, around the centreline
            // of a 7 x 4 m rounded rectangle
            Preset::CorridorLoop => {
                let mut p = box_patches(v(-2.2, -1.2, -1.2), v(7.2, 5.2, 1.3));
                p.extend(pillar(v(0.2, 1.2, -1.2), v(4.8, 2.8, 1.3)));
                p
            }
            // open hall with pillars inside both lobes of a lemniscate
            Preset::FigureEight => {
                let mut p = box_patches(v(-13.0, -8.0, -1.2), v(13.0, 8.0, 2.8));
                for (x, y) in [(5.0, 0.0), (-5.0, 0.0), (0.0, 6.5), (0.0, -6.5)] {
                    p.extend(pillar(v(x - 0.3, y - 0.3, -1.2), v(x + 0.3, y + 0.3, 2.8)));
                }
                p
            }
        };
        let frame = super::path::preset_frame(preset);
        Self {
            patches: patches.iter().map(|q| q.transformed(&frame)).collect(),
        }
    }

    /// Ray parameter and patch index of the closest hit within `max_range`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(l) = p.intersect(origin, dir, max_range) {
                if best.is_none_or(|(bl, _)| l < bl) {
                    best = Some((l, i));
                }
            }
        }
        best
    }

    /// Distance to the nearest patch.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.patches.iter().map(|q| q.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Tiles every patch into cells of about `spacing` and returns one exact
    /// surfel per cell, normals facing `viewpoint`.
    pub fn surfels(&self, spacing: f64, viewpoint: &Vector3<f64>, time: f64) -> Vec<Surfel> {
        let mut out = Vec::new();
        for p in &self.patches {
            let nu = (p.edge_u.norm() / spacing).ceil().max(1.0) as usize;
            let nv = (p.edge_v.norm() / spacing).ceil().max(1.0) as usize;
            let mut normal = p.normal();
            if normal.dot(&(viewpoint - p.corner)) < 0.0 {
                normal = -normal;
            }
            let du = p.edge_u / nu as f64;
            let dv = p.edge_v / nv as f64;
            let radius = 0.5 * (du + dv).norm().max((du - dv).norm());
            for i in 0..nu {
                for j in 0..nv {
                    out.push(Surfel {
                        position: p.corner + du * (i as f64 + 0.5) + dv * (j as f64 + 0.5),
                        normal,
                        radius,
                        confidence: 1.0,
                        time,
                    });
                }
            }
        }
        out
    }
}
