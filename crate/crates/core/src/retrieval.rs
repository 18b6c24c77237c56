//! Corpus indexing, ranked retrieval and mAP evaluation.
//!
//! Feature store layout (little-endian): magic `CSF1`, version `u32` (= 1),
//! embedding dim `u32`, video count `u64`; then per video: id length `u16`,
//! UTF-8 id, clip count `u32`, and `clip_count·dim` 32-bit floats.
//!
//! Annotation files are UTF-8 JSON of the form
//! `{"queries": {"<query id>": {"<video id>": "ND" | "DS" | "CS" | "IS"}}}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, read_file, write_atomic, ByteReader};
use crate::clip::{ClipTensor, Frames};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::similarity::{chamfer, topk_cs, ClipMatrix, DEFAULT_K};

pub const STORE_MAGIC: &[u8; 4] = b"CSF1";
pub const STORE_VERSION: u32 = 1;
pub const CLIP_FRAMES: usize = 8;

/// Half-open frame range `[start, end)` of one clip before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipWindow {
    pub start: usize,
    pub end: usize,
}

impl ClipWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Consecutive non-overlapping windows of `clip_len` frames. A shorter
/// trailing remainder becomes its own window, padded later by repeating its
/// last frame.
pub fn clip_boundaries(frame_count: usize, clip_len: usize) -> Result<Vec<ClipWindow>> {
    if frame_count == 0 {
        return Err(Error::EmptyVideo);
    }
    if clip_len == 0 {
        return Err(Error::Contract("clip length must be positive".into()));
    }
    Ok((0..frame_count)
        .step_by(clip_len)
        .map(|start| ClipWindow {
            start,
            end: (start + clip_len).min(frame_count),
        })
        .collect())
}

/// Cuts a video into padded clips of exactly `clip_len` frames.
pub fn split_video(video: &Frames, clip_len: usize) -> Result<Vec<ClipTensor>> {
    clip_boundaries(video.len(), clip_len)?
        .into_iter()
        .map(|w| {
            let idx: Vec<usize> = (0..clip_len).map(|i| (w.start + i).min(w.end - 1)).collect();
            Ok(ClipTensor::new(video.select(&idx)?))
        })
        .collect()
}

/// Encodes every clip of a video into a [`ClipMatrix`].
pub fn embed_video(encoder: &Encoder, params: &ParamStore<f32>, video: &Frames) -> Result<ClipMatrix> {
    let clips = split_video(video, encoder.config().frames)?;
    let rows = encoder.encode_clips(params, &clips)?;
    ClipMatrix::from_rows(&rows)
}

/// In-memory corpus: video id → clip matrix, iterated in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusIndex {
    videos: BTreeMap<String, ClipMatrix>,
}

impl CorpusIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, clips: ClipMatrix) -> Result<()> {
        let id = id.into();
        if let Some(dim) = self.dim() {
            if clips.dim() != dim {
                return Err(Error::shape("corpus_insert", &[dim], &[clips.dim()]));
            }
        }
        if self.videos.contains_key(&id) {
            return Err(Error::Integrity(format!("duplicate video id `{id}`")));
        }
        self.videos.insert(id, clips);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ClipMatrix> {
        self.videos.get(id)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.videos.values().next().map(ClipMatrix::dim)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ClipMatrix)> {
        self.videos.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total stored clip vectors.
    pub fn vector_count(&self) -> usize {
        self.videos.values().map(ClipMatrix::rows).sum()
    }

    /// Encodes `videos` in parallel and indexes them.
    pub fn build(encoder: &Encoder, params: &ParamStore<f32>, videos: &[(String, Frames)]) -> Result<Self> {
        let embedded: Vec<Result<ClipMatrix>> = videos
            .par_iter()
            .map(|(_, frames)| embed_video(encoder, params, frames))
            .collect();
        let mut index = Self::new();
        for ((id, _), clips) in videos.iter().zip(embedded) {
            index.insert(id.clone(), clips?)?;
        }
        Ok(index)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dim = self
            .dim()
            .ok_or_else(|| Error::Contract("cannot write an empty feature store".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.videos.len() as u64).to_le_bytes());
        for (id, clips) in &self.videos {
            let len = u16::try_from(id.len()).map_err(|_| Error::Contract(format!("video id too long: {id}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(clips.rows() as u32).to_le_bytes());
            put_f32s(&mut out, clips.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::format(at, format!("unsupported store version {version}")));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::format(8, "zero embedding dim"));
        }
        let count = r.u64("video count")?;
        let mut index = Self::new();
        for _ in 0..count {
            let at = r.offset();
            let id_len = r.u16("id length")? as usize;
            let id = r.utf8(id_len, "video id")?;
            let clips = r.u32("clip count")? as usize;
            if clips == 0 {
                return Err(Error::format(at, format!("video `{id}` has no clips")));
            }
            let data = r.f32s(clips * dim, "clip embeddings")?;
            let matrix = ClipMatrix::new(clips, dim, data)
                .map_err(|e| Error::Integrity(format!("video `{id}`: {e}")))?;
            if index.videos.contains_key(&id) {
                return Err(Error::format(at, format!("duplicate video id `{id}`")));
            }
            index.videos.insert(id, matrix);
        }
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after last video"));
        }
        Ok(index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// How two videos are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scoring {
    TopK(usize),
    Chamfer,
}

impl Default for Scoring {
    fn default() -> Self {
        Scoring::TopK(DEFAULT_K)
    }
}

impl Scoring {
    pub fn score(&self, query: &ClipMatrix, candidate: &ClipMatrix) -> Result<f64> {
        match *self {
            Scoring::TopK(k) => topk_cs(query, candidate, k),
            Scoring::Chamfer => chamfer(query, candidate),
        }
    }
}

/// Candidates by descending score, ties by ascending id; never contains the query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

pub fn rank_query(index: &CorpusIndex, query: &str, k: usize) -> Result<RankedList> {
    rank_query_with(index, query, Scoring::TopK(k))
}

pub fn rank_query_with(index: &CorpusIndex, query: &str, scoring: Scoring) -> Result<RankedList> {
    let q = index.get(query).ok_or_else(|| Error::Lookup(query.to_string()))?;
    let candidates: Vec<(&String, &ClipMatrix)> = index.videos.iter().filter(|(id, _)| id.as_str() != query).collect();
    let scores: Vec<Result<f64>> = candidates.par_iter().map(|(_, c)| scoring.score(q, c)).collect();
    let mut entries = Vec::with_capacity(candidates.len());
    for ((id, _), s) in candidates.into_iter().zip(scores) {
        entries.push((id.clone(), s?));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList {
        query: query.to_string(),
        entries,
    })
}

/// `(1/|R|) · Σ precision@r` over the ranks `r` of relevant hits.
/// Relevant ids missing from the ranking count as never retrieved.
pub fn average_precision<'a>(ranked: impl IntoIterator<Item = &'a str>, relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::UndefinedMetric("average precision with no relevant items".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, id) in ranked.into_iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / relevant.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    ND,
    DS,
    CS,
    IS,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Dsvr,
    Csvr,
    Isvr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Dsvr, Task::Csvr, Task::Isvr];

    pub fn labels(self) -> &'static [Label] {
        match self {
            Task::Dsvr => &[Label::ND, Label::DS],
            Task::Csvr => &[Label::ND, Label::DS, Label::CS],
            Task::Isvr => &[Label::ND, Label::DS, Label::CS, Label::IS],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Dsvr => "dsvr",
            Task::Csvr => "csvr",
            Task::Isvr => "isvr",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsvr" => Ok(Task::Dsvr),
            "csvr" => Ok(Task::Csvr),
            "isvr" => Ok(Task::Isvr),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub queries: BTreeMap<String, BTreeMap<String, Label>>,
}

impl AnnotationSet {
    pub fn relevant(&self, query: &str, task: Task) -> BTreeSet<String> {
        self.queries
            .get(query)
            .map(|labels| {
                labels
                    .iter()
                    .filter(|(_, l)| task.labels().contains(l))
                    .map(|(id, _)| id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(0, "annotation file is not UTF-8"))?;
        Self::from_json(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Every query id must be present in the corpus.
    pub fn check_against(&self, index: &CorpusIndex) -> Result<()> {
        for q in self.queries.keys() {
            if index.get(q).is_none() {
                return Err(Error::Lookup(q.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub per_query: Vec<(String, f64)>,
    pub mean_ap: f64,
    /// Queries dropped because the task leaves them with no relevant videos.
    pub skipped: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,query_id,ap\n");
        for (q, ap) in &self.per_query {
            let _ = writeln!(out, "{},{},{:.6}", self.task.name(), q, ap);
        }
        let _ = writeln!(out, "{},mAP,{:.6}", self.task.name(), self.mean_ap);
        out
    }
}

pub fn evaluate(index: &CorpusIndex, annotations: &AnnotationSet, task: Task, scoring: Scoring) -> Result<EvalReport> {
    annotations.check_against(index)?;
    let results: Vec<Result<Option<(String, f64)>>> = annotations
        .queries
        .keys()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|q| {
            let relevant = annotations.relevant(q, task);
            if relevant.is_empty() {
                return Ok(None);
            }
            let ranked = rank_query_with(index, q, scoring)?;
            Ok(Some(((*q).clone(), average_precision(ranked.ids(), &relevant)?)))
        })
        .collect();
    let mut per_query = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(x) => per_query.push(x),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{}: {skipped} queries have no relevant videos and were skipped", task.name());
    }
    if per_query.is_empty() {
        return Err(Error::UndefinedMetric(format!("no evaluable queries for {}", task.name())));
    }
    let mean_ap = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        task,
        per_query,
        mean_ap,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    #[test]
    fn boundaries() {
        assert_eq!(clip_boundaries(16, 8).unwrap().len(), 2);
        let w = clip_boundaries(12, 8).unwrap();
        assert_eq!(w, vec![ClipWindow { start: 0, end: 8 }, ClipWindow { start: 8, end: 12 }]);
        assert_eq!(clip_boundaries(1, 8).unwrap(), vec![ClipWindow { start: 0, end: 1 }]);
        assert!(matches!(clip_boundaries(0, 8), Err(Error::EmptyVideo)));
    }

    #[test]
    fn padding_repeats_last_frame() {
        let v = Frames::new(12, 1, 1, (0..36).map(|i| i as f32 / 36.0).collect()).unwrap();
        let clips = split_video(&v, 8).unwrap();
        assert_eq!(clips.len(), 2);
        let second = clips[1].frames();
        assert_eq!(second.frame(0), v.frame(8));
        for t in 3..8 {
            assert_eq!(second.frame(t), v.frame(11));
        }
        let one = Frames::new(1, 1, 1, vec![0.2, 0.3, 0.4]).unwrap();
        let clips = split_video(&one, 8).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].frames().data(), [0.2f32, 0.3, 0.4].repeat(8).as_slice());
    }

    #[test]
    fn ap_examples() {
        let rel = set(&["a", "b"]);
        assert_eq!(average_precision(["a", "b", "c"], &rel).unwrap(), 1.0);
        let ap = average_precision(["a", "x", "b"], &rel).unwrap();
        assert!((ap - 0.83333).abs() < 1e-5);
        assert_eq!(average_precision(["x", "y"], &set(&["z"])).unwrap(), 0.0);
        assert!(matches!(average_precision(["x"], &set(&[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ranking_ties_by_id() {
        let mut idx = CorpusIndex::new();
        idx.insert("q", ClipMatrix::from_rows(&[unit(3, 0)]).unwrap()).unwrap();
        idx.insert("b", ClipMatrix::from_rows(&[unit(3, 1)]).unwrap()).unwrap();
        idx.insert("a", ClipMatrix::from_rows(&[unit(3, 1)]).unwrap()).unwrap();
        idx.insert("dup", ClipMatrix::from_rows(&[unit(3, 0)]).unwrap()).unwrap();
        let r = rank_query(&idx, "q", 3).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["dup", "a", "b"]);
        assert!((r.entries[0].1 - 1.0).abs() < 1e-6);
        assert!(matches!(rank_query(&idx, "nope", 3), Err(Error::Lookup(_))));
    }

    #[test]
    fn task_label_sets() {
        let mut ann = AnnotationSet::default();
        ann.queries.insert(
            "q".into(),
            [("a".to_string(), Label::ND), ("b".into(), Label::CS), ("c".into(), Label::IS)].into(),
        );
        assert_eq!(ann.relevant("q", Task::Dsvr), set(&["a"]));
        assert_eq!(ann.relevant("q", Task::Csvr), set(&["a", "b"]));
        assert_eq!(ann.relevant("q", Task::Isvr), set(&["a", "b", "c"]));
    }

    #[test]
    fn annotation_json_schema() {
        let text = r#"{"queries": {"q1": {"v1": "ND", "v2": "IS"}}}"#;
        let ann = AnnotationSet::from_json(text).unwrap();
        assert_eq!(ann.queries["q1"]["v2"], Label::IS);
        assert!(AnnotationSet::from_json(r#"{"queries": {"q": {"v": "XX"}}}"#).is_err());
        assert!(AnnotationSet::from_json(r#"{"queries": {}, "extra": 1}"#).is_err());
    }

    #[test]
    fn empty_store_rejected() {
        assert!(matches!(CorpusIndex::new().encode(), Err(Error::Contract(_))));
    }

    #[test]
    fn store_rejects_non_unit_rows() {
        let mut idx = CorpusIndex::new();
        idx.insert("v", ClipMatrix::from_rows(&[unit(2, 0)]).unwrap()).unwrap();
        let mut bytes = idx.encode().unwrap();
        let n = bytes.len();
        bytes[n - 8..n - 4].copy_from_slice(&2.0f32.to_le_bytes());
        assert!(matches!(CorpusIndex::decode(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn evaluate_skips_queries_without_relevant() {
        let mut idx = CorpusIndex::new();
        for (id, hot) in [("q1", 0), ("d1", 0), ("q2", 1), ("x", 2)] {
            idx.insert(id, ClipMatrix::from_rows(&[unit(3, hot)]).unwrap()).unwrap();
        }
        let mut ann = AnnotationSet::default();
        ann.queries.insert("q1".into(), [("d1".to_string(), Label::ND)].into());
        ann.queries.insert("q2".into(), [("x".to_string(), Label::IS)].into());
        let r = evaluate(&idx, &ann, Task::Dsvr, Scoring::default()).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.mean_ap, 1.0);
        assert!(r.to_csv().ends_with("dsvr,mAP,1.000000\n"));
    }
}
