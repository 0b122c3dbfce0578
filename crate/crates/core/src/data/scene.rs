use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::BoxNorm;
use crate::palette::{Background, ShapeKind, SubjectColor};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) const STAR_INNER: f64 = 0.45;

/// Area of a shape whose half-extent is 1 (circle radius, square
/// half-side, triangle and star circumradius).
pub fn unit_area(shape: ShapeKind) -> f64 {
    match shape {
        ShapeKind::Circle => PI,
        ShapeKind::Square => 4.0,
        ShapeKind::Triangle => 3.0 * 3f64.sqrt() / 4.0,
        ShapeKind::Star => 5.0 * STAR_INNER * (PI / 5.0).sin(),
    }
}

/// Rotation after which a shape maps onto itself (0 for the circle).
pub fn symmetry_period(shape: ShapeKind) -> f64 {
    match shape {
        ShapeKind::Circle => 0.0,
        ShapeKind::Square => PI / 2.0,
        ShapeKind::Triangle => 2.0 * PI / 3.0,
        ShapeKind::Star => 2.0 * PI / 5.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: ShapeKind,
    pub color: SubjectColor,
    /// Center in canvas coordinates.
    pub center: (f64, f64),
    /// Full extent as a fraction of the canvas side; the half-extent is
    /// `scale / 2`.
    pub scale: f64,
    /// Rotation in radians.
    pub rotation: f64,
}

impl SubjectSpec {
    fn half(&self) -> f64 {
        self.scale / 2.0
    }

    /// Radius of a circle around the center containing the whole shape.
    pub fn reach(&self) -> f64 {
        match self.shape {
            ShapeKind::Square => self.half() * std::f64::consts::SQRT_2,
            _ => self.half(),
        }
    }

    pub fn fits_canvas(&self) -> bool {
        let r = self.reach();
        let (x, y) = self.center;
        r <= x && x + r <= 1.0 && r <= y && y + r <= 1.0
    }

    /// Whether some pixel center of an `n`×`n` canvas lies inside the shape.
    pub fn covers_pixel(&self, n: usize) -> bool {
        (0..n * n).any(|i| self.contains(((i % n) as f64 + 0.5) / n as f64, ((i / n) as f64 + 0.5) / n as f64))
    }

    /// Whether canvas point `(x, y)` lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let r = self.half();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = (c * dx + s * dy) / r;
        let v = (-s * dx + c * dy) / r;
        match self.shape {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => point_in_polygon(u, v, &polygon(3, 1.0, 1.0)),
            ShapeKind::Star => point_in_polygon(u, v, &polygon(5, 1.0, STAR_INNER)),
        }
    }
}

/// Regular polygon (or star when `inner < outer`) pointing up, i.e. toward
/// negative `y`.
fn polygon(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    let star = inner < outer;
    let n = if star { 2 * points } else { points };
    (0..n)
        .map(|i| {
            let a = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            let r = if star && i % 2 == 1 { inner } else { outer };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Even-odd crossing test.
fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub subjects: Vec<SubjectSpec>,
    pub background: Background,
    pub canvas: usize,
}

/// One annotated subject of a rendered frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    /// Index of the subject in its `SceneSpec`.
    pub subject: usize,
    pub shape: ShapeKind,
    pub color: SubjectColor,
    pub bbox: BoxNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

/// Paint subjects in order (later ones on top). Each annotation box is the
/// tight box of the subject's own pixels, whether or not they end up covered.
pub fn render(spec: &SceneSpec) -> Result<Frame> {
    let n = spec.canvas;
    ensure!(n >= 1, Contract, "canvas must be at least one pixel");
    let bg = Background::rgb8(spec.background).map(|c| c as f64 / 255.0);
    let mut data: Vec<f64> = (0..n * n).flat_map(|_| bg).collect();
    let mut annotations = Vec::with_capacity(spec.subjects.len());
    for (i, s) in spec.subjects.iter().enumerate() {
        let rgb = s.color.rgb();
        let mut cells = vec![false; n * n];
        for py in 0..n {
            for px in 0..n {
                if s.contains((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64) {
                    cells[py * n + px] = true;
                    data[(py * n + px) * 3..(py * n + px) * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
        let bbox = BoxNorm::from_cells(&cells, n, n)
            .ok_or_else(|| Error::Contract(format!("subject {i} covers no pixel on a {n}×{n} canvas")))?;
        annotations.push(Annotation { subject: i, shape: s.shape, color: s.color, bbox });
    }
    Ok(Frame { image: Tensor::new(vec![n, n, 3], data)?, annotations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub canvas: usize,
    pub min_subjects: usize,
    pub max_subjects: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Multiplies every jitter range; 0 makes both frames identical.
    pub jitter: f64,
    pub max_center_shift: f64,
    pub min_scale_factor: f64,
    pub max_scale_factor: f64,
    pub max_rotation_deg: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 32,
            min_subjects: 1,
            max_subjects: 3,
            min_scale: 0.25,
            max_scale: 0.5,
            jitter: 1.0,
            max_center_shift: 0.15,
            min_scale_factor: 0.8,
            max_scale_factor: 1.25,
            max_rotation_deg: 30.0,
            max_retries: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            1 <= self.min_subjects && self.min_subjects <= self.max_subjects && self.max_subjects <= 4,
            Config,
            "subject counts must satisfy 1 <= min <= max <= 4"
        );
        ensure!(
            0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 0.6,
            Config,
            "subject scales must lie in (0, 0.6]"
        );
        ensure!(self.jitter >= 0.0, Config, "jitter must be non-negative");
        ensure!(self.max_retries >= 1, Config, "max_retries must be at least 1");
        Ok(())
    }
}

fn draw_subject(rng: &mut Rng, cfg: &SceneConfig) -> Result<SubjectSpec> {
    let shape = ShapeKind::ALL[rng.below(ShapeKind::ALL.len())];
    let color = SubjectColor::ALL[rng.below(SubjectColor::ALL.len())];
    let scale = rng.uniform_in(cfg.min_scale, cfg.max_scale);
    let rotation = rng.uniform_in(-PI, PI);
    for _ in 0..cfg.max_retries {
        let center = (rng.uniform(), rng.uniform());
        let s = SubjectSpec { shape, color, center, scale, rotation };
        if s.fits_canvas() && s.covers_pixel(cfg.canvas) {
            return Ok(s);
        }
    }
    Err(Error::Internal(format!("no on-canvas placement after {} tries", cfg.max_retries)))
}

pub fn draw_scene(rng: &mut Rng, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let n = cfg.min_subjects + rng.below(cfg.max_subjects - cfg.min_subjects + 1);
    let background = Background::ALL[rng.below(Background::ALL.len())];
    let subjects = (0..n).map(|_| draw_subject(rng, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(SceneSpec { subjects, background, canvas: cfg.canvas })
}

/// Move, rescale and rotate one subject; redrawn until it fits the canvas.
fn jitter_subject(s: &SubjectSpec, rng: &mut Rng, cfg: &SceneConfig) -> Result<SubjectSpec> {
    if cfg.jitter == 0.0 {
        return Ok(*s);
    }
    let j = cfg.jitter;
    for _ in 0..cfg.max_retries {
        let dx = rng.uniform_in(-1.0, 1.0) * cfg.max_center_shift * j;
        let dy = rng.uniform_in(-1.0, 1.0) * cfg.max_center_shift * j;
        let factor = 1.0 + j * (rng.uniform_in(cfg.min_scale_factor, cfg.max_scale_factor) - 1.0);
        let rot = rng.uniform_in(-1.0, 1.0) * cfg.max_rotation_deg.to_radians() * j;
        let moved = SubjectSpec {
            center: (s.center.0 + dx, s.center.1 + dy),
            scale: (s.scale * factor).min(0.6),
            rotation: s.rotation + rot,
            ..*s
        };
        if moved.fits_canvas() && moved.covers_pixel(cfg.canvas) {
            return Ok(moved);
        }
    }
    Err(Error::Internal(format!("jittered subject left the canvas {} times", cfg.max_retries)))
}

pub struct ScenePair {
    pub spec: SceneSpec,
    /// `spec` after jitter; subject `i` is the moved copy of `spec.subjects[i]`.
    pub target_spec: SceneSpec,
    pub reference: Frame,
    pub target: Frame,
}

/// Two "frames of one clip": the drawn scene and a jittered copy, each with
/// its annotation order shuffled independently.
pub fn synth_scene_pair(rng: &mut Rng, cfg: &SceneConfig) -> Result<ScenePair> {
    let spec = draw_scene(rng, cfg)?;
    let moved = SceneSpec {
        subjects: spec.subjects.iter().map(|s| jitter_subject(s, rng, cfg)).collect::<Result<_>>()?,
        ..spec.clone()
    };
    let mut reference = render(&spec)?;
    let mut target = render(&moved)?;
    rng.shuffle(&mut reference.annotations);
    rng.shuffle(&mut target.annotations);
    Ok(ScenePair { spec, target_spec: moved, reference, target })
}
