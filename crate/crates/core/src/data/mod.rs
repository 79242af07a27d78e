//! Procedural edit pairs and pretraining clips.

pub mod corpus;
pub mod edit;
pub mod filter;
pub mod io;
pub mod render;
pub mod scene;

pub use corpus::{generate, DataConfig, Dataset};
pub use edit::{synth_pair, EditPairSample, EditTask, TaskKind};
pub use filter::{filter_pairs, FilterReport, RejectReason};
pub use render::{render, render_video, VideoClip};
pub use scene::{build_scenes, SceneSpec};
