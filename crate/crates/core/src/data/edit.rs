//! Edit tasks applied analytically to scenes, and paired samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptTokens;
use crate::tensor::Tensor;

use super::render::render;
use super::scene::{draw_object, Object, SceneSpec, Style, CANVAS, MAX_ATTEMPTS, MAX_OBJECTS, NUM_COLORS, NUM_ENVS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditTask {
    Recolor { object: usize, color: usize },
    AddObject { object: Object },
    RemoveObject { object: usize },
    BackgroundSwap { env: usize },
    GlobalStyle { style: Style },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Recolor,
    AddObject,
    RemoveObject,
    BackgroundSwap,
    GlobalStyle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Recolor,
        TaskKind::AddObject,
        TaskKind::RemoveObject,
        TaskKind::BackgroundSwap,
        TaskKind::GlobalStyle,
    ];

    /// Local tasks touch a bounded region; global ones restyle the image.
    pub fn is_local(self) -> bool {
        matches!(self, TaskKind::Recolor | TaskKind::AddObject | TaskKind::RemoveObject)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Recolor => "recolor",
            TaskKind::AddObject => "add-object",
            TaskKind::RemoveObject => "remove-object",
            TaskKind::BackgroundSwap => "background-swap",
            TaskKind::GlobalStyle => "global-style",
        }
    }

    pub fn applicable(self, scene: &SceneSpec) -> bool {
        match self {
            TaskKind::Recolor | TaskKind::RemoveObject => !scene.objects.is_empty(),
            TaskKind::AddObject => scene.objects.len() < MAX_OBJECTS,
            TaskKind::BackgroundSwap => (0..NUM_ENVS).any(|e| env_swap_ok(scene, e)),
            TaskKind::GlobalStyle => scene.style.is_none(),
        }
    }
}

impl EditTask {
    pub fn kind(&self) -> TaskKind {
        match self {
            EditTask::Recolor { .. } => TaskKind::Recolor,
            EditTask::AddObject { .. } => TaskKind::AddObject,
            EditTask::RemoveObject { .. } => TaskKind::RemoveObject,
            EditTask::BackgroundSwap { .. } => TaskKind::BackgroundSwap,
            EditTask::GlobalStyle { .. } => TaskKind::GlobalStyle,
        }
    }

    /// The post-edit scene, or `InapplicableTask`.
    pub fn apply(&self, scene: &SceneSpec) -> Result<SceneSpec> {
        let bad = |why: &str| Error::InapplicableTask(format!("{}: {why}", self.kind().as_str()));
        let mut out = scene.clone();
        match *self {
            EditTask::Recolor { object, color } => {
                let o = out.objects.get_mut(object).ok_or_else(|| bad("no such object"))?;
                if o.color == color {
                    return Err(bad("color unchanged"));
                }
                o.color = color;
            }
            EditTask::AddObject { object } => {
                if scene.objects.len() >= MAX_OBJECTS {
                    return Err(bad("scene is full"));
                }
                out.objects.push(object);
            }
            EditTask::RemoveObject { object } => {
                if object >= out.objects.len() {
                    return Err(bad("no such object"));
                }
                out.objects.remove(object);
            }
            EditTask::BackgroundSwap { env } => {
                if !env_swap_ok(scene, env) {
                    return Err(bad("environment unchanged or clashes with an object"));
                }
                out.env = env;
            }
            EditTask::GlobalStyle { style } => {
                if scene.style.is_some() {
                    return Err(bad("scene already styled"));
                }
                out.style = Some(style);
            }
        }
        if !out.is_valid() {
            return Err(bad("edited scene is invalid"));
        }
        Ok(out)
    }
}

fn env_swap_ok(scene: &SceneSpec, env: usize) -> bool {
    env < NUM_ENVS && env != scene.env && scene.objects.iter().all(|o| o.color != env)
}

/// Draws a task of `kind` with valid arguments for `scene`.
pub fn sample_task(kind: TaskKind, scene: &SceneSpec, rng: &mut impl Rng) -> Result<EditTask> {
    if !kind.applicable(scene) {
        return Err(Error::InapplicableTask(format!("{} on this scene", kind.as_str())));
    }
    for _ in 0..MAX_ATTEMPTS {
        let task = match kind {
            TaskKind::Recolor => EditTask::Recolor {
                object: rng.random_range(0..scene.objects.len()),
                color: rng.random_range(0..NUM_COLORS),
            },
            TaskKind::AddObject => EditTask::AddObject {
                object: draw_object(rng),
            },
            TaskKind::RemoveObject => EditTask::RemoveObject {
                object: rng.random_range(0..scene.objects.len()),
            },
            TaskKind::BackgroundSwap => EditTask::BackgroundSwap {
                env: rng.random_range(0..NUM_ENVS),
            },
            TaskKind::GlobalStyle => EditTask::GlobalStyle {
                style: if rng.random_bool(0.5) {
                    Style::Invert
                } else {
                    Style::Bright
                },
            },
        };
        if task.apply(scene).is_ok() {
            return Ok(task);
        }
    }
    Err(Error::ExhaustedSampling { attempts: MAX_ATTEMPTS })
}

/// One training or evaluation pair. The mask is never a model input.
#[derive(Clone, Debug, PartialEq)]
pub struct EditPairSample {
    /// `[3, 16, 16]` in `[0, 1]`.
    pub src_image: Tensor,
    pub edit_image: Tensor,
    pub src_prompt: PromptTokens,
    pub edit_prompt: PromptTokens,
    /// `[1, 16, 16]`, 1 where the images differ.
    pub edit_mask: Tensor,
    pub scene: SceneSpec,
    pub task: EditTask,
}

/// Pixels where any channel differs, as a `[1, S, S]` binary mask.
pub fn diff_mask(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "diff_mask")?;
    let (c, plane) = (a.shape()[0], a.len() / a.shape()[0]);
    let mut m = vec![0.0f32; plane];
    for ch in 0..c {
        let (pa, pb) = (&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane]);
        for ((v, x), y) in m.iter_mut().zip(pa).zip(pb) {
            if x != y {
                *v = 1.0;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, m)
}

pub fn synth_pair(scene: &SceneSpec, task: &EditTask) -> Result<EditPairSample> {
    let edited = task.apply(scene)?;
    let src_image = render(scene);
    let edit_image = render(&edited);
    let edit_mask = diff_mask(&src_image, &edit_image)?;
    debug_assert_eq!(edit_mask.shape(), &[1, CANVAS, CANVAS]);
    Ok(EditPairSample {
        src_image,
        edit_image,
        src_prompt: scene.prompt(),
        edit_prompt: edited.prompt(),
        edit_mask,
        scene: scene.clone(),
        task: *task,
    })
}
