//! Normalized boxes and their rasterization onto cell grids.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Axis-aligned box in `[0, 1]` canvas coordinates, `(x0, y0, x1, y1)` with
/// `y` pointing down. Serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxNorm {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoxNorm {
    pub const FULL: BoxNorm = BoxNorm { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    /// Default single-subject layout: the central quarter of the canvas.
    pub const CENTER: BoxNorm = BoxNorm { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        ensure!(
            [x0, y0, x1, y1].iter().all(|v| v.is_finite()),
            Contract,
            "box coordinates must be finite"
        );
        ensure!(
            0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0,
            Contract,
            "invalid box [{x0}, {y0}, {x1}, {y1}]"
        );
        Ok(BoxNorm { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height.
    pub fn aspect(&self) -> f64 {
        self.width() / self.height()
    }

    /// Half-open membership `[x0, x1) × [y0, y1)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    /// Whether the center of grid cell `(x, y)` lies in the box.
    pub fn contains_cell(&self, x: usize, y: usize, grid_w: usize, grid_h: usize) -> bool {
        self.contains((x as f64 + 0.5) / grid_w as f64, (y as f64 + 0.5) / grid_h as f64)
    }

    /// Row-major cell membership over a `grid_h × grid_w` grid.
    pub fn cell_mask(&self, grid_h: usize, grid_w: usize) -> Vec<bool> {
        (0..grid_h)
            .flat_map(|y| (0..grid_w).map(move |x| (x, y)))
            .map(|(x, y)| self.contains_cell(x, y, grid_w, grid_h))
            .collect()
    }

    /// Pixel index ranges `[px0, px1) × [py0, py1)` covered by the box on a
    /// `w × h` image, never empty.
    pub fn pixel_bounds(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let px0 = ((self.x0 * w as f64).floor() as usize).min(w - 1);
        let py0 = ((self.y0 * h as f64).floor() as usize).min(h - 1);
        let px1 = ((self.x1 * w as f64).ceil() as usize).clamp(px0 + 1, w);
        let py1 = ((self.y1 * h as f64).ceil() as usize).clamp(py0 + 1, h);
        (px0, py0, px1, py1)
    }

    /// Tightest box around a set of grid cells, or `None` when empty.
    pub fn from_cells(cells: &[bool], grid_h: usize, grid_w: usize) -> Option<BoxNorm> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..grid_h {
            for x in 0..grid_w {
                if cells[y * grid_w + x] {
                    bounds = Some(match bounds {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| BoxNorm {
            x0: x0 as f64 / grid_w as f64,
            y0: y0 as f64 / grid_h as f64,
            x1: (x1 + 1) as f64 / grid_w as f64,
            y1: (y1 + 1) as f64 / grid_h as f64,
        })
    }

    pub fn parse(text: &str) -> Result<BoxNorm> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::parse("box", format!("expected x0,y0,x1,y1 but got {text:?}")));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| Error::parse("box", format!("bad coordinate {p:?} in {text:?}")))?;
        }
        BoxNorm::try_from(v)
    }
}

impl TryFrom<[f64; 4]> for BoxNorm {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoxNorm::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxNorm> for [f64; 4] {
    fn from(b: BoxNorm) -> Self {
        b.coords()
    }
}

impl fmt::Display for BoxNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.2}, {:.2}, {:.2}, {:.2}]", self.x0, self.y0, self.x1, self.y1)
    }
}
