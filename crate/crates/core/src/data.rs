//! Samples, annotations, on-disk dataset layout and batching.
//!
//! A dataset directory holds
//!
//! ```text
//! annotations.jsonl     one record per query
//! embeddings.imgf       token embedding table [vocab × d_q]
//! vocab.json            optional word → row map for `query_text` records
//! visual/<video>.imgf   [T × d_v]
//! audio/<video>.imgf    [T × d_a], optional
//! ```
//!
//! Feature files use the IMGF container: magic `IMGF`, `u16` version, `u32`
//! rows, `u32` cols, then `rows × cols` little-endian `f32` in row-major order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ImgError, Result};

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";
pub const IMGF_VERSION: u16 = 1;
const IMGF_HEADER: usize = 4 + 2 + 4 + 4;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.imgf";
pub const VOCAB_FILE: &str = "vocab.json";
pub const VISUAL_DIR: &str = "visual";
pub const AUDIO_DIR: &str = "audio";

/// Ground-truth moment in seconds and in frame indices of a `T`-frame sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentAnnotation {
    pub start_sec: f64,
    pub end_sec: f64,
    pub duration_sec: f64,
    pub start_idx: usize,
    pub end_idx: usize,
}

impl MomentAnnotation {
    /// Frame index of `sec` is `round(sec / duration · (T − 1))`.
    pub fn from_seconds(start: f64, end: f64, duration: f64, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(ImgError::Validation("moment over an empty sequence".into()));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(ImgError::Validation(format!("duration must be > 0, got {duration}")));
        }
        if !(start.is_finite() && end.is_finite() && 0.0 <= start && start <= end && end <= duration) {
            return Err(ImgError::Validation(format!(
                "moment [{start}, {end}] does not satisfy 0 <= start <= end <= duration ({duration})"
            )));
        }
        let idx = |sec: f64| ((sec / duration * (t - 1) as f64).round() as usize).min(t - 1);
        Ok(Self {
            start_sec: start,
            end_sec: end,
            duration_sec: duration,
            start_idx: idx(start),
            end_idx: idx(end),
        })
    }
}

/// Which modality carries the planted signal in a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Audio,
    Visual,
    Both,
    Neither,
}

impl Carrier {
    pub const ALL: [Carrier; 4] = [Carrier::Audio, Carrier::Visual, Carrier::Both, Carrier::Neither];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub duration: f64,
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_token_ids: Option<Vec<usize>>,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier: Option<Carrier>,
}

/// One query with its features. Every row is a valid frame / token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    pub visual: Array2<f32>,
    pub audio: Option<Array2<f32>>,
    pub query: Array2<f32>,
    /// Embedding-table row of each query token, parallel to `query` rows.
    pub token_ids: Vec<usize>,
    pub annotation: MomentAnnotation,
    pub split: Split,
    pub carrier: Option<Carrier>,
}

impl FeatureBundle {
    pub fn frames(&self) -> usize {
        self.visual.nrows()
    }
}

pub fn write_features(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(IMGF_HEADER + 4 * m.len());
    buf.extend_from_slice(IMGF_MAGIC);
    buf.extend_from_slice(&IMGF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| ImgError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ImgError::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> ImgError {
    ImgError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Read an IMGF matrix without resampling.
pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| ImgError::io(path, e))?;
    if bytes.len() < IMGF_HEADER {
        return Err(format_err(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != IMGF_MAGIC {
        return Err(format_err(path, "bad magic bytes"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != IMGF_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, format!("empty matrix {rows}x{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(path, "header size overflow"))?;
    let payload = &bytes[IMGF_HEADER..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload is {} bytes, header announces {expected}", payload.len()),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(ImgError::Validation(format!(
            "{}: NaN at row {}, column {}",
            path.display(),
            i / cols,
            i % cols
        )));
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| format_err(path, e.to_string()))
}

/// Row indices `round(i·(T−1)/(max−1))` keeping the first and last rows.
pub fn downsample_indices(t: usize, max_frames: usize) -> Vec<usize> {
    if t <= max_frames {
        return (0..t).collect();
    }
    if max_frames == 1 {
        return vec![0];
    }
    (0..max_frames)
        .map(|i| ((i * (t - 1)) as f64 / (max_frames - 1) as f64).round() as usize)
        .collect()
}

/// Read an IMGF matrix, uniformly downsampling to at most `max_frames` rows.
pub fn load_features(path: &Path, max_frames: usize) -> Result<Array2<f32>> {
    let m = read_features(path)?;
    if m.nrows() <= max_frames {
        return Ok(m);
    }
    Ok(m.select(Axis(0), &downsample_indices(m.nrows(), max_frames)))
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<AnnotationRecord> {
    let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| ImgError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: e.to_string(),
    })?;
    let invalid = |msg: String| ImgError::Validation(format!("{}:{line_no} ({}): {msg}", path.display(), rec.video_id));
    if !(rec.duration.is_finite() && rec.duration > 0.0) {
        return Err(invalid(format!("duration must be > 0, got {}", rec.duration)));
    }
    if !(rec.start.is_finite() && rec.end.is_finite() && rec.start >= 0.0) {
        return Err(invalid(format!("start {} / end {} must be finite and >= 0", rec.start, rec.end)));
    }
    if rec.start > rec.end {
        return Err(invalid(format!("start {} after end {}", rec.start, rec.end)));
    }
    if rec.end > rec.duration {
        return Err(invalid(format!("end {} exceeds duration {}", rec.end, rec.duration)));
    }
    match (&rec.query_text, &rec.query_token_ids) {
        (None, None) => return Err(invalid("needs query_text or query_token_ids".into())),
        (_, Some(ids)) if ids.is_empty() => return Err(invalid("query_token_ids is empty".into())),
        (Some(text), None) if text.split_whitespace().next().is_none() => {
            return Err(invalid("query_text is empty".into()))
        }
        _ => {}
    }
    Ok(rec)
}

/// Parse and validate line-delimited annotation records. Blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| ImgError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ImgError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(path, i + 1, &line)?);
    }
    if out.is_empty() {
        log::warn!("{}: no annotation records", path.display());
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| ImgError::io(path, e))
}

/// Options controlling which files [`Dataset::load`] touches.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub max_frames: usize,
    pub max_tokens: usize,
    /// When false, audio feature files are never opened.
    pub read_audio: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<FeatureBundle>,
}

fn feature_path(dir: &Path, sub: &str, video_id: &str) -> PathBuf {
    dir.join(sub).join(format!("{video_id}.imgf"))
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| {
        w.trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase()
    })
}

impl Dataset {
    pub fn load(dir: &Path, opts: LoadOptions) -> Result<Self> {
        let records = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let embeddings = read_features(&dir.join(EMBEDDINGS_FILE))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab: Option<HashMap<String, usize>> = if vocab_path.exists() {
            let text = fs::read_to_string(&vocab_path).map_err(|e| ImgError::io(&vocab_path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        let mut visual_cache: HashMap<String, Array2<f32>> = HashMap::new();
        let mut audio_cache: HashMap<String, Option<Array2<f32>>> = HashMap::new();
        let mut samples = Vec::with_capacity(records.len());
        for (n, rec) in records.into_iter().enumerate() {
            let ids: Vec<usize> = match (&rec.query_token_ids, &rec.query_text) {
                (Some(ids), _) => ids.clone(),
                (None, Some(text)) => {
                    let vocab = vocab.as_ref().ok_or_else(|| {
                        ImgError::Validation(format!("record {} uses query_text but {VOCAB_FILE} is missing", n + 1))
                    })?;
                    tokenize(text)
                        .map(|w| {
                            vocab.get(&w).copied().ok_or_else(|| {
                                ImgError::Validation(format!("record {}: word {w:?} not in vocabulary", n + 1))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                (None, None) => unreachable!("validated in parse_record"),
            };
            if let Some(&bad) = ids.iter().find(|&&i| i >= embeddings.nrows()) {
                return Err(ImgError::Validation(format!(
                    "record {}: token id {bad} outside embedding table of {} rows",
                    n + 1,
                    embeddings.nrows()
                )));
            }
            let ids = ids[..ids.len().min(opts.max_tokens)].to_vec();
            let query = embeddings.select(Axis(0), &ids);

            if !visual_cache.contains_key(&rec.video_id) {
                let m = load_features(&feature_path(dir, VISUAL_DIR, &rec.video_id), opts.max_frames)?;
                visual_cache.insert(rec.video_id.clone(), m);
            }
            let visual = visual_cache[&rec.video_id].clone();
            let audio = if opts.read_audio {
                if !audio_cache.contains_key(&rec.video_id) {
                    let path = feature_path(dir, AUDIO_DIR, &rec.video_id);
                    let m = if path.exists() {
                        let a = load_features(&path, opts.max_frames)?;
                        if a.nrows() != visual.nrows() {
                            return Err(ImgError::Validation(format!(
                                "{}: {} audio rows vs {} visual rows",
                                rec.video_id,
                                a.nrows(),
                                visual.nrows()
                            )));
                        }
                        Some(a)
                    } else {
                        None
                    };
                    audio_cache.insert(rec.video_id.clone(), m);
                }
                audio_cache[&rec.video_id].clone()
            } else {
                None
            };
            let annotation = MomentAnnotation::from_seconds(rec.start, rec.end, rec.duration, visual.nrows())?;
            samples.push(FeatureBundle {
                video_id: rec.video_id,
                visual,
                audio,
                query,
                token_ids: ids,
                annotation,
                split: rec.split,
                carrier: rec.carrier,
            });
        }
        Ok(Self { samples })
    }

    /// Write every sample under `dir` together with the embedding table its
    /// token ids index into.
    pub fn save(&self, dir: &Path, embeddings: &Array2<f32>) -> Result<()> {
        for sub in [VISUAL_DIR, AUDIO_DIR] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| ImgError::io(&p, e))?;
        }
        write_features(&dir.join(EMBEDDINGS_FILE), embeddings)?;
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            if let Some(&bad) = s.token_ids.iter().find(|&&i| i >= embeddings.nrows()) {
                return Err(ImgError::InvalidInput(format!(
                    "{}: token id {bad} outside embedding table of {} rows",
                    s.video_id,
                    embeddings.nrows()
                )));
            }
            write_features(&feature_path(dir, VISUAL_DIR, &s.video_id), &s.visual)?;
            if let Some(a) = &s.audio {
                write_features(&feature_path(dir, AUDIO_DIR, &s.video_id), a)?;
            }
            records.push(AnnotationRecord {
                video_id: s.video_id.clone(),
                duration: s.annotation.duration_sec,
                start: s.annotation.start_sec,
                end: s.annotation.end_sec,
                query_text: None,
                query_token_ids: Some(s.token_ids.clone()),
                split: s.split,
                carrier: s.carrier,
            });
        }
        write_annotations(&dir.join(ANNOTATIONS_FILE), &records)
    }

    pub fn split(&self, split: Split) -> Vec<&FeatureBundle> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn carrier_counts(&self) -> BTreeMap<Carrier, usize> {
        let mut m = BTreeMap::new();
        for c in self.samples.iter().filter_map(|s| s.carrier) {
            *m.entry(c).or_insert(0) += 1;
        }
        m
    }
}

/// A padded mini-batch. Masks are 1.0 at valid positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub visual: Tensor,
    pub audio: Option<Tensor>,
    pub query: Tensor,
    /// `[B, N]` token ids, zero at padded positions.
    pub token_ids: Tensor,
    pub frame_mask: Tensor,
    pub token_mask: Tensor,
    pub frame_keep: Vec<Vec<bool>>,
    pub start_idx: Vec<usize>,
    pub end_idx: Vec<usize>,
    pub annotations: Vec<MomentAnnotation>,
}

fn pad_stack(mats: &[&Array2<f32>], rows: usize, dtype: DType) -> Result<Tensor> {
    let cols = mats[0].ncols();
    if let Some(m) = mats.iter().find(|m| m.ncols() != cols) {
        return Err(ImgError::InvalidInput(format!(
            "feature width {} differs from {cols} within a batch",
            m.ncols()
        )));
    }
    let mut data = vec![0f32; mats.len() * rows * cols];
    for (b, m) in mats.iter().enumerate() {
        for (r, row) in m.outer_iter().enumerate() {
            let off = (b * rows + r) * cols;
            data[off..off + cols].iter_mut().zip(row.iter()).for_each(|(d, v)| *d = *v);
        }
    }
    Ok(Tensor::from_vec(data, (mats.len(), rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

fn keep_mask(lens: &[usize], rows: usize, dtype: DType) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let keep: Vec<Vec<bool>> = lens.iter().map(|&l| (0..rows).map(|t| t < l).collect()).collect();
    let flat: Vec<f32> = keep.iter().flatten().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    Ok((Tensor::from_vec(flat, (lens.len(), rows), &Device::Cpu)?.to_dtype(dtype)?, keep))
}

impl Batch {
    /// Pad to the batch's longest sequence. With `with_audio`, every sample
    /// must carry audio features; without it audio is left out entirely.
    pub fn new(samples: &[&FeatureBundle], dtype: DType, with_audio: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(ImgError::InvalidInput("empty batch".into()));
        }
        let t = samples.iter().map(|s| s.frames()).max().expect("nonempty");
        let n = samples.iter().map(|s| s.query.nrows()).max().expect("nonempty");
        let visual: Vec<&Array2<f32>> = samples.iter().map(|s| &s.visual).collect();
        let audio = if with_audio {
            let mats = samples
                .iter()
                .map(|s| {
                    s.audio
                        .as_ref()
                        .ok_or_else(|| ImgError::InvalidInput(format!("sample {} has no audio features", s.video_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(pad_stack(&mats, t, dtype)?)
        } else {
            None
        };
        let query: Vec<&Array2<f32>> = samples.iter().map(|s| &s.query).collect();
        let (frame_mask, frame_keep) = keep_mask(&samples.iter().map(|s| s.frames()).collect::<Vec<_>>(), t, dtype)?;
        if let Some(s) = samples.iter().find(|s| s.token_ids.len() != s.query.nrows()) {
            return Err(ImgError::InvalidInput(format!(
                "sample {} has {} token ids for {} query rows",
                s.video_id,
                s.token_ids.len(),
                s.query.nrows()
            )));
        }
        let mut ids = vec![0u32; samples.len() * n];
        for (b, s) in samples.iter().enumerate() {
            for (k, &id) in s.token_ids.iter().enumerate() {
                ids[b * n + k] = u32::try_from(id)
                    .map_err(|_| ImgError::InvalidInput(format!("token id {id} does not fit in 32 bits")))?;
            }
        }
        let (token_mask, _) = keep_mask(&samples.iter().map(|s| s.query.nrows()).collect::<Vec<_>>(), n, dtype)?;
        Ok(Self {
            visual: pad_stack(&visual, t, dtype)?,
            audio,
            query: pad_stack(&query, n, dtype)?,
            token_ids: Tensor::from_vec(ids, (samples.len(), n), &Device::Cpu)?,
            frame_mask,
            token_mask,
            frame_keep,
            start_idx: samples.iter().map(|s| s.annotation.start_idx).collect(),
            end_idx: samples.iter().map(|s| s.annotation.end_idx).collect(),
            annotations: samples.iter().map(|s| s.annotation).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.start_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_idx.is_empty()
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.start_idx.iter().copied().zip(self.end_idx.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn imgf_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.imgf");
        let m = array![[1.0f32, -2.5, 3.25], [0.0, 1e-20, f32::MAX]];
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"IMGF");
        assert_eq!(bytes.len(), 14 + 24);
    }

    #[test]
    fn imgf_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.imgf");
        let mut header = b"IMGF".to_vec();
        header.extend_from_slice(&1u16.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&3u32.to_le_bytes());
        fs::write(&p, &header).unwrap();
        assert!(matches!(read_features(&p), Err(ImgError::Format { .. })));

        fs::write(&p, b"NOPE\x01\x00").unwrap();
        assert!(matches!(read_features(&p), Err(ImgError::Format { .. })));

        let mut short = b"IMGF".to_vec();
        short.extend_from_slice(&1u16.to_le_bytes());
        short.extend_from_slice(&2u32.to_le_bytes());
        short.extend_from_slice(&2u32.to_le_bytes());
        short.extend_from_slice(&1f32.to_le_bytes());
        fs::write(&p, &short).unwrap();
        assert!(matches!(read_features(&p), Err(ImgError::Format { .. })));

        write_features(&p, &array![[1.0f32, f32::NAN]]).unwrap();
        assert!(matches!(read_features(&p), Err(ImgError::Validation(_))));
    }

    #[test]
    fn downsample_keeps_endpoints() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.imgf");
        let m = Array2::from_shape_fn((200, 2), |(r, c)| (r * 10 + c) as f32);
        write_features(&p, &m).unwrap();
        let d = load_features(&p, 128).unwrap();
        assert_eq!(d.nrows(), 128);
        assert_eq!(d.row(0), m.row(0));
        assert_eq!(d.row(127), m.row(199));
        let idx = downsample_indices(200, 128);
        for (i, &k) in idx.iter().enumerate() {
            assert_eq!(k, (i as f64 * 199.0 / 127.0).round() as usize);
        }
        assert_eq!(load_features(&p, 300).unwrap().nrows(), 200);
    }

    fn write_lines(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempdir().unwrap();
        let p = dir.path().join(ANNOTATIONS_FILE);
        fs::write(&p, lines.join("\n")).unwrap();
        (dir, p)
    }

    #[test]
    fn annotations_parse() {
        let (_d, p) = write_lines(&[
            r#"{"video_id": "a", "duration": 10, "start": 1, "end": 4, "query_text": "a person opens a door"}"#,
            r#"{"video_id": "b", "duration": 8, "start": 0, "end": 8, "query_token_ids": [1, 2], "split": "test", "carrier": "audio"}"#,
        ]);
        let recs = load_annotations(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].split, Split::Test);
        assert_eq!(recs[1].carrier, Some(Carrier::Audio));
    }

    #[test]
    fn annotations_validation_and_parse_errors() {
        let (_d, p) = write_lines(&[
            r#"{"video_id": "a", "duration": 10, "start": 1, "end": 4, "query_token_ids": [0]}"#,
            r#"{"video_id": "late", "duration": 10, "start": 1, "end": 12, "query_token_ids": [0]}"#,
        ]);
        let err = load_annotations(&p).unwrap_err();
        assert!(matches!(&err, ImgError::Validation(m) if m.contains("late") && m.contains(":2")), "{err}");

        let (_d, p) = write_lines(&[r#"{"video_id": "a", "duration": 10, "start": 5, "end": 4, "query_token_ids": [0]}"#]);
        assert!(load_annotations(&p).unwrap_err().is_validation());

        let (_d, p) = write_lines(&["", r#"{"video_id": "a", "duration": "x"}"#]);
        assert!(matches!(load_annotations(&p), Err(ImgError::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_annotation_file() {
        let (_d, p) = write_lines(&[]);
        assert!(load_annotations(&p).unwrap().is_empty());
    }

    #[test]
    fn moment_indices() {
        let m = MomentAnnotation::from_seconds(4.0, 12.0, 16.0, 9).unwrap();
        assert_eq!((m.start_idx, m.end_idx), (2, 6));
        assert!(MomentAnnotation::from_seconds(5.0, 4.0, 16.0, 9).is_err());
        assert!(MomentAnnotation::from_seconds(1.0, 17.0, 16.0, 9).is_err());
    }

    #[test]
    fn text_queries_use_vocab_and_audio_is_optional() {
        let dir = tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(VISUAL_DIR)).unwrap();
        write_features(&root.join(EMBEDDINGS_FILE), &array![[0.0f32, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        fs::write(root.join(VOCAB_FILE), r#"{"open": 1, "door": 2}"#).unwrap();
        write_features(&root.join(VISUAL_DIR).join("v.imgf"), &Array2::zeros((5, 3))).unwrap();
        fs::write(
            root.join(ANNOTATIONS_FILE),
            r#"{"video_id": "v", "duration": 4, "start": 1, "end": 2, "query_text": "Open door."}"#,
        )
        .unwrap();
        let opts = LoadOptions {
            max_frames: 8,
            max_tokens: 8,
            read_audio: true,
        };
        let ds = Dataset::load(root, opts).unwrap();
        assert_eq!(ds.samples[0].query, array![[1.0f32, 1.0], [2.0, 2.0]]);
        assert_eq!(ds.samples[0].token_ids, vec![1, 2]);
        assert!(ds.samples[0].audio.is_none());
        assert_eq!((ds.samples[0].annotation.start_idx, ds.samples[0].annotation.end_idx), (1, 2));
    }

    #[test]
    fn batch_pads_and_masks() {
        let a = MomentAnnotation::from_seconds(0.0, 1.0, 2.0, 3).unwrap();
        let mk = |t: usize, n: usize| FeatureBundle {
            video_id: format!("v{t}"),
            visual: Array2::ones((t, 2)),
            audio: Some(Array2::ones((t, 4))),
            query: Array2::ones((n, 3)),
            token_ids: (1..=n).collect(),
            annotation: a,
            split: Split::Train,
            carrier: None,
        };
        let (x, y) = (mk(3, 1), mk(5, 2));
        let b = Batch::new(&[&x, &y], DType::F32, true).unwrap();
        assert_eq!(b.visual.dims(), &[2, 5, 2]);
        assert_eq!(b.audio.as_ref().unwrap().dims(), &[2, 5, 4]);
        assert_eq!(b.query.dims(), &[2, 2, 3]);
        assert_eq!(b.frame_keep[0], vec![true, true, true, false, false]);
        let tm: Vec<Vec<f32>> = b.token_mask.to_vec2().unwrap();
        assert_eq!(tm, vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        let ids: Vec<Vec<u32>> = b.token_ids.to_vec2().unwrap();
        assert_eq!(ids, vec![vec![1, 0], vec![1, 2]]);
        let v: Vec<Vec<Vec<f32>>> = b.visual.to_vec3().unwrap();
        assert_eq!(v[0][4], vec![0.0, 0.0]);

        let mut z = mk(3, 1);
        z.audio = None;
        assert!(matches!(Batch::new(&[&x, &z], DType::F32, true), Err(ImgError::InvalidInput(_))));
        assert!(Batch::new(&[&x, &z], DType::F32, false).unwrap().audio.is_none());
    }
}
