//! Whole-corpus generation as a pure function of `(config, seed)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{item_stream, streams};

use super::edit::{sample_task, synth_pair, EditPairSample, TaskKind};
use super::filter::{filter_pairs, FilterReport};
use super::render::{random_clip, VideoClip};
use super::scene::sample_scene;

/// Frame counts cycled through by pretraining clips.
pub const CLIP_FRAMES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub clips: usize,
    pub heldout_clips: usize,
    /// Edit pairs drawn from each sampled scene.
    pub tasks_per_scene: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_pairs: 2000,
            test_pairs: 50,
            clips: 1000,
            heldout_clips: 64,
            tasks_per_scene: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks_per_scene == 0 {
            return Err(Error::Config("tasks_per_scene must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<EditPairSample>,
    pub test: Vec<EditPairSample>,
    pub clips: Vec<VideoClip>,
    pub heldout_clips: Vec<VideoClip>,
}

/// Pair `i` of a split depends only on `(seed, stream_id, i / tasks_per_scene)`.
pub fn generate_pairs(n: usize, seed: u64, stream_id: u64, tasks_per_scene: usize) -> Result<Vec<EditPairSample>> {
    let scenes = n.div_ceil(tasks_per_scene.max(1));
    let mut out = Vec::with_capacity(n);
    for j in 0..scenes {
        let mut rng = item_stream(seed, stream_id, j as u64);
        let (scene, _) = sample_scene(&mut rng, seed)?;
        let kinds: Vec<TaskKind> = TaskKind::ALL.into_iter().filter(|k| k.applicable(&scene)).collect();
        for _ in 0..tasks_per_scene {
            if out.len() == n {
                break;
            }
            let kind = kinds[rng.random_range(0..kinds.len())];
            let task = sample_task(kind, &scene, &mut rng)?;
            out.push(synth_pair(&scene, &task)?);
        }
    }
    Ok(out)
}

/// Clip `i` has `CLIP_FRAMES[i % 4]` frames.
pub fn generate_clips(n: usize, seed: u64, stream_id: u64) -> Result<Vec<VideoClip>> {
    (0..n)
        .map(|i| {
            let mut rng = item_stream(seed, stream_id, i as u64);
            let (scene, _) = sample_scene(&mut rng, seed)?;
            random_clip(&scene, CLIP_FRAMES[i % CLIP_FRAMES.len()], &mut rng)
        })
        .collect()
}

/// Generates and filters the full corpus.
pub fn generate(config: &DataConfig) -> Result<(Dataset, FilterReport, FilterReport)> {
    config.validate()?;
    let s = config.seed;
    let (train, train_rep) = filter_pairs(generate_pairs(
        config.train_pairs,
        s,
        streams::PAIRS_TRAIN,
        config.tasks_per_scene,
    )?);
    let (test, test_rep) = filter_pairs(generate_pairs(
        config.test_pairs,
        s,
        streams::PAIRS_TEST,
        config.tasks_per_scene,
    )?);
    let ds = Dataset {
        config: config.clone(),
        train,
        test,
        clips: generate_clips(config.clips, s, streams::CLIPS)?,
        heldout_clips: generate_clips(config.heldout_clips, s, streams::HELDOUT_CLIPS)?,
    };
    Ok((ds, train_rep, test_rep))
}
