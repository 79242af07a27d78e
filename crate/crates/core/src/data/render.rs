//! Exact integer-grid rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptTokens;
use crate::tensor::Tensor;

use super::scene::{Object, SceneSpec, Style, CANVAS, MAX_ATTEMPTS, PALETTE};

/// Background value of environment `env` at `(row, col)`.
pub fn background(env: usize, row: usize, col: usize) -> [f32; 3] {
    let base = PALETTE[env];
    let k = match env % 4 {
        0 => 1.0,
        1 => {
            if col % 2 == 1 {
                0.7
            } else {
                1.0
            }
        }
        2 => {
            if (row / 4 + col / 4) % 2 == 1 {
                0.7
            } else {
                1.0
            }
        }
        _ => 0.7 + 0.02 * row as f32,
    };
    base.map(|c| 0.05 + 0.35 * c * k)
}

fn stylize(v: f32, style: Option<Style>) -> f32 {
    match style {
        None => v,
        Some(Style::Invert) => 1.0 - v,
        Some(Style::Bright) => (v + 0.3).min(1.0),
    }
}

fn raster(env: usize, objects: &[Object], style: Option<Style>) -> Tensor {
    let mut data = vec![0.0f32; 3 * CANVAS * CANVAS];
    for row in 0..CANVAS {
        for col in 0..CANVAS {
            let mut px = background(env, row, col);
            if let Some(o) = objects.iter().rev().find(|o| o.covers(row as i32, col as i32)) {
                px = PALETTE[o.color];
            }
            for (c, v) in px.into_iter().enumerate() {
                data[(c * CANVAS + row) * CANVAS + col] = stylize(v, style);
            }
        }
    }
    Tensor::new([3, CANVAS, CANVAS], data).expect("canvas shape")
}

/// `[3, 16, 16]` image of a valid scene, values in `[0, 1]`.
pub fn render(scene: &SceneSpec) -> Tensor {
    raster(scene.env, &scene.objects, scene.style)
}

/// Short synthetic video for backbone pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    /// `[F, 3, 16, 16]`.
    #[serde(skip)]
    pub frames: Tensor,
    pub caption: PromptTokens,
    pub scene: SceneSpec,
    /// Per-object translation applied once per frame.
    pub motion: Vec<(i32, i32)>,
}

/// Object positions at frame `f`, clamped to the canvas.
pub fn moved_objects(scene: &SceneSpec, motion: &[(i32, i32)], f: usize) -> Vec<Object> {
    scene
        .objects
        .iter()
        .zip(motion)
        .map(|(o, &(dx, dy))| {
            let (w, h) = o.extent();
            let c = CANVAS as i32;
            let x = (o.x + dx * f as i32).clamp(0, c - w);
            let y = (o.y + dy * f as i32).clamp(0, c - h);
            Object { x, y, ..*o }
        })
        .collect()
}

fn frame_valid(scene: &SceneSpec, objects: Vec<Object>) -> bool {
    SceneSpec {
        objects,
        ..scene.clone()
    }
    .is_valid()
}

pub fn render_video(scene: &SceneSpec, frames: usize, motion: &[(i32, i32)]) -> Result<VideoClip> {
    if motion.len() != scene.objects.len() {
        return Err(Error::Domain(format!(
            "{} motions for {} objects",
            motion.len(),
            scene.objects.len()
        )));
    }
    let mut parts = Vec::with_capacity(frames);
    for f in 0..frames {
        let objs = moved_objects(scene, motion, f);
        if !frame_valid(scene, objs.clone()) {
            return Err(Error::Domain(format!("frame {f} violates scene validity")));
        }
        parts.push(raster(scene.env, &objs, scene.style));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let frames_t = Tensor::stack(&refs)?;
    Ok(VideoClip {
        frames: frames_t,
        caption: scene.prompt(),
        scene: scene.clone(),
        motion: motion.to_vec(),
    })
}

/// Static clip: the scene repeated over `frames` frames.
pub fn static_video(scene: &SceneSpec, frames: usize) -> Result<VideoClip> {
    render_video(scene, frames, &vec![(0, 0); scene.objects.len()])
}

/// Clip with random per-object motion chosen so every frame stays valid.
pub fn random_clip(scene: &SceneSpec, frames: usize, rng: &mut impl Rng) -> Result<VideoClip> {
    for _ in 0..MAX_ATTEMPTS {
        let motion: Vec<(i32, i32)> = scene
            .objects
            .iter()
            .map(|_| (rng.random_range(-1..=1), rng.random_range(-1..=1)))
            .collect();
        if (0..frames).all(|f| frame_valid(scene, moved_objects(scene, &motion, f))) {
            return render_video(scene, frames, &motion);
        }
    }
    Err(Error::ExhaustedSampling { attempts: MAX_ATTEMPTS })
}
