//! On-disk dataset: `manifest.json` plus `data.bin` of little-endian `f32`
//! blobs in record order, each with a CRC32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptTokens;
use crate::tensor::Tensor;

use super::corpus::{DataConfig, Dataset};
use super::edit::{EditPairSample, EditTask};
use super::render::VideoClip;
use super::scene::SceneSpec;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOBS: &str = "data.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub offset: u64,
    pub len: u64,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub split: Split,
    pub src_prompt: PromptTokens,
    pub edit_prompt: PromptTokens,
    pub scene: SceneSpec,
    pub task: EditTask,
    pub src_image: BlobRef,
    pub edit_image: BlobRef,
    pub edit_mask: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub split: Split,
    pub caption: PromptTokens,
    pub scene: SceneSpec,
    pub motion: Vec<(i32, i32)>,
    pub frames: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: DataConfig,
    pub pairs: Vec<PairRecord>,
    pub clips: Vec<ClipRecord>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor) -> BlobRef {
        let raw = t.to_le_bytes();
        let r = BlobRef {
            offset: self.bytes.len() as u64,
            len: raw.len() as u64,
            shape: t.shape().to_vec(),
            crc32: crc32fast::hash(&raw),
        };
        self.bytes.extend_from_slice(&raw);
        r
    }
}

/// Builds the manifest and blob bytes without touching the filesystem.
pub fn encode(ds: &Dataset) -> (Manifest, Vec<u8>) {
    let mut w = BlobWriter::default();
    let mut pairs = Vec::with_capacity(ds.train.len() + ds.test.len());
    for (split, set) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for s in set {
            pairs.push(PairRecord {
                split,
                src_prompt: s.src_prompt.clone(),
                edit_prompt: s.edit_prompt.clone(),
                scene: s.scene.clone(),
                task: s.task,
                src_image: w.push(&s.src_image),
                edit_image: w.push(&s.edit_image),
                edit_mask: w.push(&s.edit_mask),
            });
        }
    }
    let mut clips = Vec::with_capacity(ds.clips.len() + ds.heldout_clips.len());
    for (split, set) in [(Split::Train, &ds.clips), (Split::Heldout, &ds.heldout_clips)] {
        for c in set {
            clips.push(ClipRecord {
                split,
                caption: c.caption.clone(),
                scene: c.scene.clone(),
                motion: c.motion.clone(),
                frames: w.push(&c.frames),
            });
        }
    }
    let m = Manifest {
        version: FORMAT_VERSION,
        config: ds.config.clone(),
        pairs,
        clips,
    };
    (m, w.bytes)
}

fn read_blob(name: &str, r: &BlobRef, bytes: &[u8]) -> Result<Tensor> {
    let start = usize::try_from(r.offset).map_err(|_| Error::CorruptManifest(format!("{name}: offset overflow")))?;
    let len = usize::try_from(r.len).map_err(|_| Error::CorruptManifest(format!("{name}: length overflow")))?;
    let want = r.shape.iter().product::<usize>() * 4;
    if len != want {
        return Err(Error::CorruptManifest(format!(
            "{name}: {len} bytes cannot hold shape {:?}",
            r.shape
        )));
    }
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::TruncatedBlob {
            name: name.to_string(),
            needed: start.saturating_add(len),
            available: bytes.len(),
        })?;
    let raw = &bytes[start..end];
    let actual = crc32fast::hash(raw);
    if actual != r.crc32 {
        return Err(Error::ChecksumMismatch {
            name: name.to_string(),
            expected: r.crc32,
            actual,
        });
    }
    Tensor::from_le_bytes(r.shape.clone(), raw)
}

/// Inverse of [`encode`]; verifies every blob.
pub fn decode(m: &Manifest, bytes: &[u8]) -> Result<Dataset> {
    if m.version != FORMAT_VERSION {
        return Err(Error::CorruptManifest(format!("unsupported version {}", m.version)));
    }
    let mut ds = Dataset {
        config: m.config.clone(),
        train: Vec::new(),
        test: Vec::new(),
        clips: Vec::new(),
        heldout_clips: Vec::new(),
    };
    for (i, p) in m.pairs.iter().enumerate() {
        let s = EditPairSample {
            src_image: read_blob(&format!("pairs[{i}].src_image"), &p.src_image, bytes)?,
            edit_image: read_blob(&format!("pairs[{i}].edit_image"), &p.edit_image, bytes)?,
            edit_mask: read_blob(&format!("pairs[{i}].edit_mask"), &p.edit_mask, bytes)?,
            src_prompt: p.src_prompt.clone(),
            edit_prompt: p.edit_prompt.clone(),
            scene: p.scene.clone(),
            task: p.task,
        };
        match p.split {
            Split::Train => ds.train.push(s),
            Split::Test => ds.test.push(s),
            Split::Heldout => return Err(Error::CorruptManifest(format!("pairs[{i}] has split heldout"))),
        }
    }
    for (i, c) in m.clips.iter().enumerate() {
        let clip = VideoClip {
            frames: read_blob(&format!("clips[{i}].frames"), &c.frames, bytes)?,
            caption: c.caption.clone(),
            scene: c.scene.clone(),
            motion: c.motion.clone(),
        };
        match c.split {
            Split::Train => ds.clips.push(clip),
            Split::Heldout => ds.heldout_clips.push(clip),
            Split::Test => return Err(Error::CorruptManifest(format!("clips[{i}] has split test"))),
        }
    }
    Ok(ds)
}

/// Writes `path` via a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn manifest_json(m: &Manifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)? + "\n")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (m, bytes) = encode(ds);
    write_atomic(&dir.join(BLOBS), &bytes)?;
    write_atomic(&dir.join(MANIFEST), manifest_json(&m)?.as_bytes())?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let path = dir.join(BLOBS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&m, &bytes)
}
