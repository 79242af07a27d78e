//! Scene descriptions, validity rules and rejection sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{PromptTokens, COLOR_BASE, ENV_BASE, SHAPE_BASE, STYLE_BASE};
use crate::rng::item_stream;

pub const CANVAS: usize = 16;
pub const NUM_ENVS: usize = 8;
pub const NUM_COLORS: usize = 8;
pub const MAX_OBJECTS: usize = 3;
pub const SIZES: [usize; 3] = [3, 4, 5];
/// Draws allowed per scene before sampling gives up.
pub const MAX_ATTEMPTS: usize = 10_000;

/// Object palette; environment `e` is a dimmed variant of color `e`.
pub const PALETTE: [[f32; 3]; NUM_COLORS] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.1, 0.85, 0.9],
    [0.85, 0.15, 0.8],
    [0.97, 0.97, 0.97],
    [1.0, 0.55, 0.05],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rect,
    Circle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Circle, ShapeKind::Bar];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Invert,
    Bright,
}

impl Style {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: ShapeKind,
    pub color: usize,
    pub size: usize,
    /// Column of the bounding box's top-left corner.
    pub x: i32,
    /// Row of the bounding box's top-left corner.
    pub y: i32,
}

impl Object {
    /// `(width, height)` of the bounding box.
    pub fn extent(&self) -> (i32, i32) {
        let s = self.size as i32;
        match self.shape {
            ShapeKind::Rect | ShapeKind::Circle => (s, s),
            ShapeKind::Bar => (s, 2),
        }
    }

    pub fn inside(&self, canvas: usize) -> bool {
        let (w, h) = self.extent();
        let c = canvas as i32;
        self.x >= 0 && self.y >= 0 && self.x + w <= c && self.y + h <= c
    }

    pub fn overlaps(&self, other: &Object) -> bool {
        let (w, h) = self.extent();
        let (ow, oh) = other.extent();
        self.x < other.x + ow && other.x < self.x + w && self.y < other.y + oh && other.y < self.y + h
    }

    /// Whether pixel `(row, col)` lies on the shape.
    pub fn covers(&self, row: i32, col: i32) -> bool {
        let (w, h) = self.extent();
        let (dy, dx) = (row - self.y, col - self.x);
        if dx < 0 || dy < 0 || dx >= w || dy >= h {
            return false;
        }
        match self.shape {
            ShapeKind::Rect | ShapeKind::Bar => true,
            ShapeKind::Circle => {
                // Integer test of (dx - c)² + (dy - c)² ≤ (s/2)² with c = (s-1)/2, scaled by 4.
                let s = self.size as i32;
                let (ex, ey) = (2 * dx - (s - 1), 2 * dy - (s - 1));
                ex * ex + ey * ey <= s * s
            }
        }
    }

    pub fn translated(&self, dx: i32, dy: i32) -> Object {
        Object {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub env: usize,
    pub objects: Vec<Object>,
    pub style: Option<Style>,
    pub seed: u64,
}

/// Why a scene draw was rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Invalid {
    OutOfCanvas,
    Overlap,
    BackgroundColor,
    TooMany,
    BadIndex,
}

impl SceneSpec {
    pub fn check(&self) -> std::result::Result<(), Invalid> {
        if self.env >= NUM_ENVS {
            return Err(Invalid::BadIndex);
        }
        if self.objects.len() > MAX_OBJECTS {
            return Err(Invalid::TooMany);
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.color >= NUM_COLORS || !SIZES.contains(&o.size) {
                return Err(Invalid::BadIndex);
            }
            if !o.inside(CANVAS) {
                return Err(Invalid::OutOfCanvas);
            }
            if o.color == self.env {
                return Err(Invalid::BackgroundColor);
            }
            if self.objects[..i].iter().any(|p| p.overlaps(o)) {
                return Err(Invalid::Overlap);
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    /// Full description: environment, each object's color and shape, then
    /// the style if any. Positions and sizes are not described.
    pub fn prompt(&self) -> PromptTokens {
        let mut ids = vec![ENV_BASE + self.env as u16];
        for o in &self.objects {
            ids.push(COLOR_BASE + o.color as u16);
            ids.push(SHAPE_BASE + o.shape.index() as u16);
        }
        if let Some(s) = self.style {
            ids.push(STYLE_BASE + s.index() as u16);
        }
        PromptTokens::new(&ids).expect("scene prompts fit the grammar")
    }
}

/// Prompt contents recovered from tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptContent {
    pub env: usize,
    pub objects: Vec<(usize, ShapeKind)>,
    pub style: Option<Style>,
}

pub fn decode_prompt(p: &PromptTokens) -> Result<PromptContent> {
    let toks = p.content();
    let bad = || Error::Domain(format!("prompt {toks:?} does not follow the scene grammar"));
    let (&first, mut rest) = toks.split_first().ok_or_else(bad)?;
    if !(ENV_BASE..COLOR_BASE).contains(&first) {
        return Err(bad());
    }
    let mut objects = Vec::new();
    let mut style = None;
    while let Some((&t, tail)) = rest.split_first() {
        if (COLOR_BASE..SHAPE_BASE).contains(&t) {
            let (&s, tail2) = tail.split_first().ok_or_else(bad)?;
            if !(SHAPE_BASE..STYLE_BASE).contains(&s) {
                return Err(bad());
            }
            objects.push(((t - COLOR_BASE) as usize, ShapeKind::ALL[(s - SHAPE_BASE) as usize]));
            rest = tail2;
        } else if t == STYLE_BASE || t == STYLE_BASE + 1 {
            if !tail.is_empty() {
                return Err(bad());
            }
            style = Some(if t == STYLE_BASE { Style::Invert } else { Style::Bright });
            rest = tail;
        } else {
            return Err(bad());
        }
    }
    Ok(PromptContent {
        env: (first - ENV_BASE) as usize,
        objects,
        style,
    })
}

/// Discrete space raw scene draws come from. The default covers the full
/// palette; tests shrink it so the space can be enumerated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawSpace {
    pub envs: usize,
    pub colors: usize,
    pub max_objects: usize,
    /// Out of ten draws, how many carry a style.
    pub styled_in_ten: u32,
}

impl Default for DrawSpace {
    fn default() -> Self {
        Self {
            envs: NUM_ENVS,
            colors: NUM_COLORS,
            max_objects: MAX_OBJECTS,
            styled_in_ten: 2,
        }
    }
}

impl DrawSpace {
    pub fn object(&self, rng: &mut impl Rng) -> Object {
        Object {
            shape: ShapeKind::ALL[rng.random_range(0..3)],
            color: rng.random_range(0..self.colors),
            size: SIZES[rng.random_range(0..SIZES.len())],
            x: rng.random_range(0..CANVAS as i32),
            y: rng.random_range(0..CANVAS as i32),
        }
    }

    pub fn scene(&self, rng: &mut impl Rng, seed: u64) -> SceneSpec {
        let env = rng.random_range(0..self.envs);
        let n = rng.random_range(1..=self.max_objects);
        let objects = (0..n).map(|_| self.object(rng)).collect();
        let roll = rng.random_range(0..10);
        let style = if roll >= self.styled_in_ten {
            None
        } else if roll % 2 == 0 {
            Some(Style::Invert)
        } else {
            Some(Style::Bright)
        };
        SceneSpec {
            env,
            objects,
            style,
            seed,
        }
    }

    /// Draws until a valid scene appears. Returns the scene and the number
    /// of draws used.
    pub fn sample(&self, rng: &mut impl Rng, seed: u64) -> Result<(SceneSpec, usize)> {
        for attempt in 1..=MAX_ATTEMPTS {
            let s = self.scene(rng, seed);
            if s.is_valid() {
                return Ok((s, attempt));
            }
        }
        Err(Error::ExhaustedSampling { attempts: MAX_ATTEMPTS })
    }
}

pub fn draw_object(rng: &mut impl Rng) -> Object {
    DrawSpace::default().object(rng)
}

pub fn sample_scene(rng: &mut impl Rng, seed: u64) -> Result<(SceneSpec, usize)> {
    DrawSpace::default().sample(rng, seed)
}

/// `n` valid scenes; scene `i` depends only on `(seed, stream_id, i)`.
pub fn build_scenes_in(n: usize, seed: u64, stream_id: u64) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = item_stream(seed, stream_id, i as u64);
            sample_scene(&mut rng, seed).map(|(s, _)| s)
        })
        .collect()
}

pub fn build_scenes(n: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    build_scenes_in(n, seed, crate::rng::streams::SCENES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_footprints() {
        let c = Object {
            shape: ShapeKind::Circle,
            color: 0,
            size: 3,
            x: 0,
            y: 0,
        };
        let n = (0..3)
            .flat_map(|r| (0..3).map(move |q| (r, q)))
            .filter(|&(r, q)| c.covers(r, q))
            .count();
        assert_eq!(n, 9);
        let c5 = Object { size: 5, ..c };
        assert!(!c5.covers(0, 0));
        assert!(c5.covers(2, 2) && c5.covers(0, 2));
    }

    #[test]
    fn validity_rules() {
        let o = Object {
            shape: ShapeKind::Rect,
            color: 1,
            size: 4,
            x: 12,
            y: 0,
        };
        let mut s = SceneSpec {
            env: 0,
            objects: vec![o],
            style: None,
            seed: 0,
        };
        assert!(s.is_valid());
        s.objects[0].x = 13;
        assert_eq!(s.check(), Err(Invalid::OutOfCanvas));
        s.objects[0].x = 0;
        s.objects[0].color = 0;
        assert_eq!(s.check(), Err(Invalid::BackgroundColor));
        s.objects[0].color = 2;
        s.objects.push(o.translated(-9, 3));
        assert_eq!(s.check(), Err(Invalid::Overlap));
    }

    #[test]
    fn prompts_decode_to_scene() {
        let scenes = build_scenes(50, 9).unwrap();
        for s in &scenes {
            let d = decode_prompt(&s.prompt()).unwrap();
            assert_eq!(d.env, s.env);
            assert_eq!(d.style, s.style);
            let objs: Vec<_> = s.objects.iter().map(|o| (o.color, o.shape)).collect();
            assert_eq!(d.objects, objs);
        }
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let a = build_scenes(40, 3).unwrap();
        assert_eq!(a, build_scenes(40, 3).unwrap());
        assert!(a.iter().all(SceneSpec::is_valid));
        assert_ne!(a, build_scenes(40, 4).unwrap());
    }
}
