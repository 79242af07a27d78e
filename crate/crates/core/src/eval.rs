//! Pixel metrics for edit fidelity, background preservation and temporal
//! consistency, a brute-force self-audit, and report/image output.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::render::static_video;
use crate::data::EditPairSample;
use crate::error::{Error, Result};
use crate::flow::{decode_pixels, encode_pixels, euler_sample, EditField, SamplerConfig};
use crate::model::Model;
use crate::prompt::PromptTokens;
use crate::rng::{item_stream, stream, streams};
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;
/// Frame counts of the temporal-consistency probe.
pub const TEMPORAL_FRAMES: [usize; 3] = [2, 4, 8];
/// Minimum samples recomputed by the self-audit.
pub const AUDIT_SAMPLES: usize = 5;
/// Samples denoised together.
const CHUNK: usize = 10;

/// Settings of `sample`, `eval` and the evaluation half of `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub sampler_steps: usize,
    /// Held-out pairs to score; `None` scores all of them.
    #[serde(default)]
    pub pairs: Option<usize>,
    /// Static videos per frame count in the temporal probe; 0 skips it.
    pub temporal_videos: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sampler_steps: SamplerConfig::default().steps,
            pairs: None,
            temporal_videos: 8,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> Result<SamplerConfig> {
        let s = SamplerConfig {
            steps: self.sampler_steps,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Everything `eval` reports for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullEval {
    pub images: ImageEval,
    pub temporal: Vec<TemporalEval>,
    pub audit: AuditReport,
}

/// The evaluated slice of `pairs`.
pub fn eval_pairs<'a>(pairs: &'a [EditPairSample], cfg: &EvalConfig) -> Result<&'a [EditPairSample]> {
    let pairs = &pairs[..cfg.pairs.unwrap_or(pairs.len()).min(pairs.len())];
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to evaluate".into()));
    }
    Ok(pairs)
}

/// Scores `model` against the zero-init `baseline` on `pairs`.
pub fn evaluate(model: &Model, baseline: &Model, pairs: &[EditPairSample], cfg: &EvalConfig) -> Result<FullEval> {
    let pairs = eval_pairs(pairs, cfg)?;
    let base = edit_images(baseline, pairs, &cfg.sampler()?, cfg.seed)?;
    evaluate_against(model, pairs, &base, cfg)
}

/// [`evaluate`] with the baseline outputs for `eval_pairs(pairs)` precomputed.
pub fn evaluate_against(
    model: &Model,
    pairs: &[EditPairSample],
    baseline: &[Tensor],
    cfg: &EvalConfig,
) -> Result<FullEval> {
    let sampler = cfg.sampler()?;
    let pairs = eval_pairs(pairs, cfg)?;
    let outputs = edit_images(model, pairs, &sampler, cfg.seed)?;
    let images = score_images(pairs, &outputs, baseline)?;
    let audit = self_audit(pairs, &outputs, &images, cfg.seed)?;
    if !audit.passed {
        return Err(Error::Domain(format!(
            "metric self-audit failed on samples {:?} (max error {:e})",
            audit.checked, audit.max_abs_error
        )));
    }
    let temporal = if cfg.temporal_videos > 0 {
        let n = cfg.temporal_videos.min(pairs.len());
        eval_temporal(model, &pairs[..n], &TEMPORAL_FRAMES, &sampler, cfg.seed)?
    } else {
        Vec::new()
    };
    Ok(FullEval {
        images,
        temporal,
        audit,
    })
}

/// PSNR in dB, or `Exact` when the compared pixels are identical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Exact,
    Db(f64),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Exact
        } else {
            Psnr::Db(10.0 * (1.0 / mse).log10())
        }
    }

    /// `f64::INFINITY` for `Exact`.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Exact => f.write_str("exact"),
            Psnr::Db(v) => write!(f, "{v:.3}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Exact => s.serialize_str("exact"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Db(v)),
            Raw::Text(s) if s == "exact" => Ok(Psnr::Exact),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("unknown psnr value {s:?}"))),
        }
    }
}

fn check_image(op: &'static str, out: &Tensor, other: &Tensor, mask: &Tensor) -> Result<()> {
    out.expect_same_shape(other, op)?;
    if out.rank() != 3 || mask.rank() != 3 || mask.shape()[0] != 1 || mask.shape()[1..] != out.shape()[1..] {
        return Err(Error::shape(
            op,
            format!("image {:?} with mask {:?}", out.shape(), mask.shape()),
        ));
    }
    Ok(())
}

/// Squared-error sum and pixel count over channels where `keep(mask)`.
fn masked_sq(out: &Tensor, other: &Tensor, mask: &Tensor, keep: impl Fn(f32) -> bool) -> (f64, usize) {
    let plane = mask.len();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (&a, &b)) in out.data().iter().zip(other.data()).enumerate() {
        if keep(mask.data()[i % plane]) {
            let d = a as f64 - b as f64;
            sum += d * d;
            n += 1;
        }
    }
    (sum, n)
}

/// MSE to the ground truth inside the edit mask; `None` for an empty mask.
pub fn edit_region_mse(output: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    check_image("edit_region_mse", output, truth, mask)?;
    let (s, n) = masked_sq(output, truth, mask, |m| m != 0.0);
    Ok((n > 0).then(|| s / n as f64))
}

/// MSE to the source outside the edit mask; `None` when the mask is full.
pub fn preservation_mse(output: &Tensor, source: &Tensor, mask: &Tensor) -> Result<Option<f64>> {
    check_image("preservation", output, source, mask)?;
    let (s, n) = masked_sq(output, source, mask, |m| m == 0.0);
    Ok((n > 0).then(|| s / n as f64))
}

pub fn preservation_psnr(output: &Tensor, source: &Tensor, mask: &Tensor) -> Result<Option<Psnr>> {
    Ok(preservation_mse(output, source, mask)?.map(Psnr::from_mse))
}

/// Mean MSE between adjacent frames of `[F, C, H, W]`.
pub fn temporal_consistency(video: &Tensor) -> Result<f64> {
    if video.rank() != 4 || video.shape()[0] < 2 {
        return Err(Error::shape(
            "temporal_consistency",
            format!("{:?} is not [F>=2, C, H, W]", video.shape()),
        ));
    }
    let f = video.shape()[0];
    let frame = video.len() / f;
    let d = video.data();
    let mut total = 0.0f64;
    for k in 0..f - 1 {
        let (a, b) = (&d[k * frame..(k + 1) * frame], &d[(k + 1) * frame..(k + 2) * frame]);
        let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        total += s / frame as f64;
    }
    Ok(total / (f - 1) as f64)
}

/// Edits `sources` (`[F, C, S, S]` each, in `[0, 1]`); sample `i` starts from
/// noise keyed by `(seed, i)`.
pub fn edit_videos(
    model: &Model,
    sources: &[Tensor],
    src_prompts: &[PromptTokens],
    edit_prompts: &[PromptTokens],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Tensor>> {
    sampler.validate()?;
    if sources.len() != src_prompts.len() || sources.len() != edit_prompts.len() {
        return Err(Error::shape(
            "edit_videos",
            format!(
                "{} sources, {} / {} prompts",
                sources.len(),
                src_prompts.len(),
                edit_prompts.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(sources.len());
    for start in (0..sources.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(sources.len());
        let enc: Vec<Tensor> = sources[start..end].iter().map(encode_pixels).collect();
        let noise: Vec<Tensor> = (start..end)
            .map(|i| {
                Tensor::randn(
                    sources[i].shape().to_vec(),
                    1.0,
                    &mut item_stream(seed, streams::SAMPLER, i as u64),
                )
            })
            .collect();
        let source = Tensor::stack(&enc.iter().collect::<Vec<_>>())?;
        let x0 = Tensor::stack(&noise.iter().collect::<Vec<_>>())?;
        let field = EditField {
            model,
            source: &source,
            src_prompts: &src_prompts[start..end],
            edit_prompts: &edit_prompts[start..end],
        };
        let x1 = decode_pixels(&euler_sample(&field, &x0, sampler)?);
        for j in 0..end - start {
            let v = x1.narrow(0, j, 1)?;
            out.push(v.reshape(v.shape()[1..].to_vec())?);
        }
    }
    Ok(out)
}

/// Single-frame edits of `pairs`, as `[3, S, S]` images.
pub fn edit_images(model: &Model, pairs: &[EditPairSample], sampler: &SamplerConfig, seed: u64) -> Result<Vec<Tensor>> {
    let sources: Vec<Tensor> = pairs
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend_from_slice(p.src_image.shape());
            p.src_image.reshape(s)
        })
        .collect::<Result<_>>()?;
    let src: Vec<PromptTokens> = pairs.iter().map(|p| p.src_prompt.clone()).collect();
    let edit: Vec<PromptTokens> = pairs.iter().map(|p| p.edit_prompt.clone()).collect();
    edit_videos(model, &sources, &src, &edit, sampler, seed)?
        .into_iter()
        .map(|v| v.reshape(v.shape()[1..].to_vec()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub task: String,
    pub edit_region_mse: Option<f64>,
    pub preservation_mse: Option<f64>,
    pub preservation_psnr: Option<Psnr>,
    pub baseline_edit_region_mse: Option<f64>,
    pub baseline_preservation_psnr: Option<Psnr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub samples: usize,
    pub edit_region_mse: Option<f64>,
    pub baseline_edit_region_mse: Option<f64>,
    /// Baseline minus model; positive means the model is closer to the truth.
    pub edit_region_mse_delta: Option<f64>,
    /// From the pooled outside-mask MSE.
    pub preservation_psnr: Option<Psnr>,
    pub baseline_preservation_psnr: Option<Psnr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub aggregate: GroupMetrics,
    pub per_task: BTreeMap<String, GroupMetrics>,
    pub per_sample: Vec<SampleMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn group(samples: &[&SampleMetrics], base_pres: &[Option<f64>]) -> GroupMetrics {
    let e = mean(samples.iter().filter_map(|s| s.edit_region_mse));
    let b = mean(samples.iter().filter_map(|s| s.baseline_edit_region_mse));
    let paired = mean(
        samples
            .iter()
            .filter_map(|s| Some(s.baseline_edit_region_mse? - s.edit_region_mse?)),
    );
    GroupMetrics {
        samples: samples.len(),
        edit_region_mse: e,
        baseline_edit_region_mse: b,
        edit_region_mse_delta: paired,
        preservation_psnr: mean(samples.iter().filter_map(|s| s.preservation_mse)).map(Psnr::from_mse),
        baseline_preservation_psnr: mean(base_pres.iter().flatten().copied()).map(Psnr::from_mse),
    }
}

/// Scores `outputs` against `pairs`, with `baseline` outputs scored alongside.
pub fn score_images(pairs: &[EditPairSample], outputs: &[Tensor], baseline: &[Tensor]) -> Result<ImageEval> {
    if outputs.len() != pairs.len() || baseline.len() != pairs.len() {
        return Err(Error::shape("score_images", "outputs and pairs differ in length"));
    }
    let mut per_sample = Vec::with_capacity(pairs.len());
    let mut base_pres = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let pm = preservation_mse(&outputs[i], &p.src_image, &p.edit_mask)?;
        let bm = preservation_mse(&baseline[i], &p.src_image, &p.edit_mask)?;
        base_pres.push(bm);
        per_sample.push(SampleMetrics {
            index: i,
            task: p.task.kind().as_str().to_string(),
            edit_region_mse: edit_region_mse(&outputs[i], &p.edit_image, &p.edit_mask)?,
            preservation_mse: pm,
            preservation_psnr: pm.map(Psnr::from_mse),
            baseline_edit_region_mse: edit_region_mse(&baseline[i], &p.edit_image, &p.edit_mask)?,
            baseline_preservation_psnr: bm.map(Psnr::from_mse),
        });
    }
    let all: Vec<&SampleMetrics> = per_sample.iter().collect();
    let aggregate = group(&all, &base_pres);
    let mut per_task = BTreeMap::new();
    for kind in crate::data::TaskKind::ALL {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].task.kind() == kind).collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<&SampleMetrics> = idx.iter().map(|&i| &per_sample[i]).collect();
        let b: Vec<Option<f64>> = idx.iter().map(|&i| base_pres[i]).collect();
        per_task.insert(kind.as_str().to_string(), group(&s, &b));
    }
    Ok(ImageEval {
        aggregate,
        per_task,
        per_sample,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEval {
    pub frames: usize,
    pub videos: usize,
    pub temporal_consistency: f64,
}

/// Edits static videos built from the scenes of `pairs` at each frame count.
pub fn eval_temporal(
    model: &Model,
    pairs: &[EditPairSample],
    frame_counts: &[usize],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<TemporalEval>> {
    let src: Vec<PromptTokens> = pairs.iter().map(|p| p.src_prompt.clone()).collect();
    let edit: Vec<PromptTokens> = pairs.iter().map(|p| p.edit_prompt.clone()).collect();
    frame_counts
        .iter()
        .map(|&f| {
            let videos: Vec<Tensor> = pairs
                .iter()
                .map(|p| Ok(static_video(&p.scene, f)?.frames))
                .collect::<Result<_>>()?;
            let outs = edit_videos(model, &videos, &src, &edit, sampler, seed)?;
            let tc = mean(
                outs.iter()
                    .map(temporal_consistency)
                    .collect::<Result<Vec<_>>>()?
                    .into_iter(),
            )
            .ok_or_else(|| Error::Config("no videos for the temporal probe".into()))?;
            Ok(TemporalEval {
                frames: f,
                videos: outs.len(),
                temporal_consistency: tc,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: Vec<usize>,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Recomputes the metrics of at least [`AUDIT_SAMPLES`] randomly chosen
/// samples pixel by pixel and compares them with `eval`.
pub fn self_audit(pairs: &[EditPairSample], outputs: &[Tensor], eval: &ImageEval, seed: u64) -> Result<AuditReport> {
    let n = pairs.len();
    let k = AUDIT_SAMPLES.min(n);
    let mut checked: Vec<usize> = sample(&mut stream(seed, streams::AUDIT), n, k).into_vec();
    checked.sort_unstable();
    let mut worst = 0.0f64;
    let mut agree = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            let e = (a - b).abs() / a.abs().max(1e-12);
            worst = worst.max(e);
            e <= 1e-9
        }
        _ => false,
    };
    let mut passed = true;
    for &i in &checked {
        let p = &pairs[i];
        let (c, h, w) = (p.src_image.shape()[0], p.src_image.shape()[1], p.src_image.shape()[2]);
        let (mut ein, mut nin, mut eout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let inside = p.edit_mask.data()[y * w + x] != 0.0;
                for ch in 0..c {
                    let k = (ch * h + y) * w + x;
                    let o = outputs[i].data()[k] as f64;
                    if inside {
                        ein += (o - p.edit_image.data()[k] as f64).powi(2);
                        nin += 1;
                    } else {
                        eout += (o - p.src_image.data()[k] as f64).powi(2);
                        nout += 1;
                    }
                }
            }
        }
        let s = &eval.per_sample[i];
        passed &= agree((nin > 0).then(|| ein / nin as f64), s.edit_region_mse);
        passed &= agree((nout > 0).then(|| eout / nout as f64), s.preservation_mse);
    }
    Ok(AuditReport {
        checked,
        max_abs_error: worst,
        passed,
    })
}

/// `report.json` contents. Only `timestamp` varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub command: String,
    pub config_digest: String,
    pub checkpoint_digest: Option<String>,
    pub metrics: serde_json::Value,
    pub per_sample: Vec<serde_json::Value>,
    pub timestamp: String,
}

impl Report {
    pub fn new(command: &str, config_digest: String, checkpoint_digest: Option<String>) -> Self {
        Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            config_digest,
            checkpoint_digest,
            metrics: serde_json::Value::Object(Default::default()),
            per_sample: Vec::new(),
            timestamp: now_timestamp(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without the timestamp, for byte comparison of reruns.
    pub fn stable_json(&self) -> Result<String> {
        Report {
            timestamp: String::new(),
            ..self.clone()
        }
        .to_json()
    }
}

/// Seconds since the Unix epoch.
pub fn now_timestamp() -> String {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}.{:03}", d.as_secs(), d.subsec_millis())
}

/// SHA-256 of any serializable value's JSON.
pub fn json_digest<S: Serialize>(v: &S) -> Result<String> {
    Ok(crate::params::sha256_hex(serde_json::to_string(v)?.as_bytes()))
}

/// Binary P6 bytes of a `[3, H, W]` image in `[0, 1]`.
pub fn ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape("ppm", format!("{:?} is not [3, H, W]", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Images `[3, H, W]` tiled left to right, rows top to bottom.
pub fn image_grid(rows: &[Vec<&Tensor>]) -> Result<Tensor> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::shape("image_grid", "no images"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut g = Tensor::zeros([3, gh, gw]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::shape(
                    "image_grid",
                    format!("{:?} vs {:?}", img.shape(), first.shape()),
                ));
            }
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        g.data_mut()[(ch * gh + r * h + y) * gw + c * w + x] = img.data()[(ch * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(g)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = ppm_bytes(img)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Per-sample metrics as CSV rows.
pub fn per_sample_csv(samples: &[SampleMetrics]) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        index: usize,
        task: &'a str,
        edit_region_mse: Option<f64>,
        preservation_psnr: Option<String>,
        baseline_edit_region_mse: Option<f64>,
        baseline_preservation_psnr: Option<String>,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(Row {
            index: s.index,
            task: &s.task,
            edit_region_mse: s.edit_region_mse,
            preservation_psnr: s.preservation_psnr.map(|p| p.to_string()),
            baseline_edit_region_mse: s.baseline_edit_region_mse,
            baseline_preservation_psnr: s.baseline_preservation_psnr.map(|p| p.to_string()),
        })
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
}
