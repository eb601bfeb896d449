//! In-memory corpus and its on-disk form.
//!
//! A corpus directory holds `manifest.toml` (dimensions, ids, durations,
//! moments in seconds) and two MDFF tensors: `video.mdff` with shape
//! `[samples, frames, d_video]` and `query.mdff` with shape
//! `[samples, tokens, d_text]`, both 32-bit floats. Rows past a sample's
//! `video_len` / `query_len` are padding.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::annotations::{MomentAnnotation, Partition};
use super::mdff::{read_tensor, write_tensor, Tensor};
use crate::condition::{FrameFeatures, QueryFeatures};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const VIDEO_FILE: &str = "video.mdff";
pub const QUERY_FILE: &str = "query.mdff";
const FORMAT: &str = "momentdiff-corpus";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub annotation: MomentAnnotation,
    pub video_len: usize,
    pub query_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub video: Array3<f32>,
    pub query: Array3<f32>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn new(video: Array3<f32>, query: Array3<f32>, samples: Vec<Sample>) -> Result<Self> {
        let c = Corpus { video, query, samples };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if self.video.dim().0 != n || self.query.dim().0 != n {
            return Err(Error::Shape(format!(
                "{n} samples but feature tensors hold {} videos and {} queries",
                self.video.dim().0,
                self.query.dim().0
            )));
        }
        for s in &self.samples {
            if s.video_len == 0 || s.video_len > self.n_frames() {
                return Err(Error::Shape(format!(
                    "query {}: video length {} outside [1, {}]",
                    s.annotation.query_id,
                    s.video_len,
                    self.n_frames()
                )));
            }
            if s.query_len == 0 || s.query_len > self.n_tokens() {
                return Err(Error::Shape(format!(
                    "query {}: query length {} outside [1, {}]",
                    s.annotation.query_id,
                    s.query_len,
                    self.n_tokens()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.video.dim().1
    }

    pub fn d_video(&self) -> usize {
        self.video.dim().2
    }

    pub fn n_tokens(&self) -> usize {
        self.query.dim().1
    }

    pub fn d_text(&self) -> usize {
        self.query.dim().2
    }

    pub fn frame_features(&self, i: usize) -> FrameFeatures {
        let s = &self.samples[i];
        let values: Array2<f64> = self.video.slice(s![i, .., ..]).mapv(f64::from);
        let mask = (0..self.n_frames()).map(|f| f < s.video_len).collect();
        FrameFeatures { values, mask }
    }

    pub fn query_features(&self, i: usize) -> QueryFeatures {
        let s = &self.samples[i];
        let values: Array2<f64> = self.query.slice(s![i, .., ..]).mapv(f64::from);
        let mask = (0..self.n_tokens()).map(|t| t < s.query_len).collect();
        QueryFeatures { values, mask }
    }

    pub fn annotations(&self) -> Vec<MomentAnnotation> {
        self.samples.iter().map(|s| s.annotation.clone()).collect()
    }

    pub fn indices_in(&self, partition: Partition) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].annotation.partition == Some(partition))
            .collect()
    }

    /// Samples whose query id is listed, in the listed order.
    pub fn select_queries(&self, query_ids: &[String]) -> Result<Corpus> {
        let index: std::collections::HashMap<&str, usize> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.annotation.query_id.as_str(), i))
            .collect();
        let picked = query_ids
            .iter()
            .map(|q| {
                index
                    .get(q.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("query {q} not in corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.subset(&picked))
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            video: self.video.select(ndarray::Axis(0), indices),
            query: self.query.select(ndarray::Axis(0), indices),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    n_frames: usize,
    d_video: usize,
    n_tokens: usize,
    d_text: usize,
    video_file: String,
    query_file: String,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    video_id: String,
    query_id: String,
    duration_s: f64,
    video_len: usize,
    query_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<Partition>,
    gt_s: Vec<[f64; 2]>,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        n_frames: corpus.n_frames(),
        d_video: corpus.d_video(),
        n_tokens: corpus.n_tokens(),
        d_text: corpus.d_text(),
        video_file: VIDEO_FILE.into(),
        query_file: QUERY_FILE.into(),
        samples: corpus
            .samples
            .iter()
            .map(|s| ManifestSample {
                video_id: s.annotation.video_id.clone(),
                query_id: s.annotation.query_id.clone(),
                duration_s: s.annotation.duration_s,
                video_len: s.video_len,
                query_len: s.query_len,
                partition: s.annotation.partition,
                gt_s: s.annotation.raw_gt_s.iter().map(|&(a, b)| [a, b]).collect(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(dir.join(MANIFEST_FILE), e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_tensor(&dir.join(VIDEO_FILE), &Tensor::from_array3_f32(&corpus.video))?;
    write_tensor(&dir.join(QUERY_FILE), &Tensor::from_array3_f32(&corpus.query))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::parse(
            &path,
            format!("unsupported corpus format {} v{}", manifest.format, manifest.version),
        ));
    }
    let video = read_tensor(&dir.join(&manifest.video_file))?.into_array3_f32()?;
    let query = read_tensor(&dir.join(&manifest.query_file))?.into_array3_f32()?;
    let n = manifest.samples.len();
    if video.dim() != (n, manifest.n_frames, manifest.d_video) || query.dim() != (n, manifest.n_tokens, manifest.d_text) {
        return Err(Error::Shape(format!(
            "feature tensors {:?} / {:?} disagree with the manifest",
            video.dim(),
            query.dim()
        )));
    }
    let samples = manifest
        .samples
        .into_iter()
        .map(|m| {
            let raw = m.gt_s.iter().map(|&[a, b]| (a, b)).collect();
            let annotation = MomentAnnotation::new(m.video_id, m.query_id, m.duration_s, raw)?.with_partition(m.partition);
            Ok(Sample {
                annotation,
                video_len: m.video_len,
                query_len: m.query_len,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(video, query, samples)
}
