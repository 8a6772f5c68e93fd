//! Synthetic videos of rigid sprites moving at constant velocity, with exact
//! per-pixel displacement.
//!
//! Text form, one item per line, `#` starts a comment:
//!
//! ```text
//! size 32 32
//! frames 5
//! background 0.1 0.1 0.1
//! square 4 6 6   0.9 0.2 0.2   2 1
//! circle 20 20 3   0.2 0.9 0.2   -1 0
//! ```
//!
//! A square is `x y side colour velocity` with `(x, y)` its top-left
//! corner; a circle is `cx cy radius colour velocity`. Sprites are drawn in
//! listed order, so later sprites cover earlier ones.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Square { side: f64 },
    Circle { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    /// Top-left corner for squares, centre for circles, at frame 0.
    pub x: f64,
    pub y: f64,
    pub color: [f64; 3],
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
}

impl Sprite {
    /// Whether the pixel centred at `(px+0.5, py+0.5)` is covered at frame `t`.
    pub fn covers(&self, px: usize, py: usize, t: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        let (x, y) = (self.x + self.vx * t as f64, self.y + self.vy * t as f64);
        match self.shape {
            Shape::Square { side } => cx >= x && cx < x + side && cy >= y && cy < y + side,
            Shape::Circle { radius } => (cx - x).powi(2) + (cy - y).powi(2) <= radius * radius,
        }
    }

    /// Bounding box `(x0, y0, x1, y1)` at frame 0.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self.shape {
            Shape::Square { side } => (self.x, self.y, self.x + side, self.y + side),
            Shape::Circle { radius } => (self.x - radius, self.y - radius, self.x + radius, self.y + radius),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    Solid([f64; 3]),
    /// Static horizontal ramp from black to white in every channel.
    Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
}

/// Rendered frames `F×H×W×3` and, for each consecutive pair, the `H×W×2`
/// displacement `(dx, dy)` of every pixel of the earlier frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub frames: Tensor<f64>,
    pub displacement: Vec<Tensor<f64>>,
}

impl RenderedScene {
    pub fn frame(&self, t: usize) -> Tensor<f64> {
        let s = self.frames.shape();
        let n = s[1] * s[2] * 3;
        Tensor::new(&[s[1], s[2], 3], self.frames.data()[t * n..(t + 1) * n].to_vec()).expect("frame extent")
    }

    /// Frames `start..start+len` as one `len×H×W×3` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor<f64>> {
        let s = self.frames.shape();
        if start + len > s[0] || len == 0 {
            return Err(Error::Argument(format!(
                "window {start}..{} outside {} frames",
                start + len,
                s[0]
            )));
        }
        let n = s[1] * s[2] * 3;
        Tensor::new(&[len, s[1], s[2], 3], self.frames.data()[start * n..(start + len) * n].to_vec())
    }
}

fn is_half_integer(v: f64) -> bool {
    (2.0 * v).fract() == 0.0
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Scene("canvas and frame count must be positive".into()));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            let n = i + 1;
            if !is_half_integer(s.vx) || !is_half_integer(s.vy) {
                return Err(Error::Scene(format!(
                    "sprite {n}: velocity ({}, {}) is not a multiple of 0.5 px/frame",
                    s.vx, s.vy
                )));
            }
            let (x0, y0, x1, y1) = s.bounds();
            if x0 < 0.0 || y0 < 0.0 || x1 > self.width as f64 || y1 > self.height as f64 {
                return Err(Error::Scene(format!("sprite {n}: outside the canvas at t=0")));
            }
            match s.shape {
                Shape::Square { side } if side <= 0.0 => {
                    return Err(Error::Scene(format!("sprite {n}: side must be positive")))
                }
                Shape::Circle { radius } if radius <= 0.0 => {
                    return Err(Error::Scene(format!("sprite {n}: radius must be positive")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Index of the topmost sprite over pixel `(x, y)` at frame `t`.
    fn top(&self, x: usize, y: usize, t: usize) -> Option<usize> {
        self.sprites.iter().rposition(|s| s.covers(x, y, t))
    }

    fn background_at(&self, x: usize) -> [f64; 3] {
        match self.background {
            Background::Solid(c) => c,
            Background::Gradient => {
                let v = if self.width > 1 {
                    x as f64 / (self.width - 1) as f64
                } else {
                    0.0
                };
                [v; 3]
            }
        }
    }

    pub fn render(&self) -> Result<RenderedScene> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut frames = Vec::with_capacity(self.frames * h * w * 3);
        for t in 0..self.frames {
            for y in 0..h {
                for x in 0..w {
                    let c = match self.top(x, y, t) {
                        Some(i) => self.sprites[i].color,
                        None => self.background_at(x),
                    };
                    frames.extend(c);
                }
            }
        }
        let mut displacement = Vec::with_capacity(self.frames.saturating_sub(1));
        for t in 0..self.frames.saturating_sub(1) {
            let mut d = Vec::with_capacity(h * w * 2);
            for y in 0..h {
                for x in 0..w {
                    match self.top(x, y, t) {
                        Some(i) => d.extend([self.sprites[i].vx, self.sprites[i].vy]),
                        None => d.extend([0.0, 0.0]),
                    }
                }
            }
            displacement.push(Tensor::new(&[h, w, 2], d)?);
        }
        Ok(RenderedScene {
            frames: Tensor::new(&[self.frames, h, w, 3], frames)?,
            displacement,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut size = None;
        let mut frames = None;
        let mut background = Background::Solid([0.0; 3]);
        let mut sprites = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Scene(format!("line {}: {m}", i + 1));
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            let nums = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|w| w.parse::<f64>().map_err(|_| bad(&format!("`{w}` is not a number"))))
                    .collect()
            };
            let arity = |n: usize| -> Result<Vec<f64>> {
                let v = nums()?;
                if v.len() != n {
                    return Err(bad(&format!("`{key}` takes {n} values, got {}", v.len())));
                }
                Ok(v)
            };
            let count = |v: f64| -> Result<usize> {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(bad(&format!("`{key}` needs a positive integer")));
                }
                Ok(v as usize)
            };
            match key {
                "size" => {
                    let v = arity(2)?;
                    size = Some((count(v[0])?, count(v[1])?));
                }
                "frames" => frames = Some(count(arity(1)?[0])?),
                "background" if rest == ["gradient"] => background = Background::Gradient,
                "background" => {
                    let v = arity(3)?;
                    background = Background::Solid([v[0], v[1], v[2]]);
                }
                "square" | "circle" => {
                    let v = arity(8)?;
                    let shape = if key == "square" {
                        Shape::Square { side: v[2] }
                    } else {
                        Shape::Circle { radius: v[2] }
                    };
                    sprites.push(Sprite {
                        shape,
                        x: v[0],
                        y: v[1],
                        color: [v[3], v[4], v[5]],
                        vx: v[6],
                        vy: v[7],
                    });
                }
                other => return Err(bad(&format!("unknown item `{other}`"))),
            }
        }
        let (height, width) = size.ok_or_else(|| Error::Scene("missing `size` line".into()))?;
        let frames = frames.ok_or_else(|| Error::Scene("missing `frames` line".into()))?;
        let scene = Self {
            height,
            width,
            frames,
            background,
            sprites,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("size {} {}\nframes {}\n", self.height, self.width, self.frames);
        match self.background {
            Background::Solid([r, g, b]) => writeln!(s, "background {r} {g} {b}"),
            Background::Gradient => writeln!(s, "background gradient"),
        }
        .expect("write to string");
        for sp in &self.sprites {
            let (name, size) = match sp.shape {
                Shape::Square { side } => ("square", side),
                Shape::Circle { radius } => ("circle", radius),
            };
            let [r, g, b] = sp.color;
            writeln!(s, "{name} {} {} {size} {r} {g} {b} {} {}", sp.x, sp.y, sp.vx, sp.vy).expect("write to string");
        }
        s
    }
}

/// Random squares on a dark background, placed so they stay on the canvas
/// for all `frames`. Velocities are integers in `[-1, 1]`.
pub fn translating_squares<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    frames: usize,
    count: usize,
    rng: &mut R,
) -> Result<SyntheticScene> {
    let side = (height.min(width) / 4).max(2) as f64;
    let travel = frames.saturating_sub(1) as f64;
    let mut sprites = Vec::with_capacity(count);
    for _ in 0..count {
        let vx = rng.gen_range(-1i32..=1) as f64;
        let vy = rng.gen_range(-1i32..=1) as f64;
        let mut span = |extent: usize, v: f64| -> Result<f64> {
            let lo = if v < 0.0 { travel } else { 0.0 };
            let hi = extent as f64 - side - if v > 0.0 { travel } else { 0.0 };
            if hi < lo {
                return Err(Error::Scene(format!("canvas too small for {frames} frames of motion")));
            }
            Ok(rng.gen_range(lo as i64..=hi as i64) as f64)
        };
        let x = span(width, vx)?;
        let y = span(height, vy)?;
        let color = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
        sprites.push(Sprite {
            shape: Shape::Square { side },
            x,
            y,
            color,
            vx,
            vy,
        });
    }
    let scene = SyntheticScene {
        height,
        width,
        frames,
        background: Background::Solid([0.1, 0.1, 0.1]),
        sprites,
    };
    scene.validate()?;
    Ok(scene)
}
