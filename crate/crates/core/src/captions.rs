//! Caption curation over precomputed embeddings: best-of-K selection per
//! ten-second segment, similarity threshold, keyword filter, subsampling of
//! long non-music/non-speech audio, and max-similarity lookups.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::cosine;
use crate::rng::Rng;

pub const DEFAULT_THRESHOLD: f64 = 0.45;
pub const HISTOGRAM_BINS: usize = 100;
const UNIT_TOL: f64 = 1e-6;
const BIN_EPS: f64 = 1e-9;
pub const TOY_EMBED_DIM: usize = 64;

/// Default blocklist for low-quality audio captions.
pub const DEFAULT_BLOCKLIST: &[&str] = &[
    "ambiguous", "artifact", "background noise", "broken up", "buzzing", "choppy", "clipping",
    "compromised", "crackling", "deficient", "distant", "distorted", "dropout", "echo", "faint",
    "faulty", "feedback", "flawed", "fluctuating", "fuzzy", "garbled", "gibberish", "glitch",
    "hissing", "imprecise", "inadequate", "inaudible", "incoherent", "indistinct", "inferior",
    "insufficient", "interference", "irregular", "irrelevant", "lacking", "low quality",
    "low volume", "low-quality", "mediocre", "misheard", "misinterpretation", "muffled", "murmur",
    "noise", "noisy", "off-mic", "overlapping speech", "overmodulated", "poor", "popping",
    "reverberation", "scrambled", "second-rate", "sibilance", "skipped", "skipping", "static",
    "suboptimal", "substandard", "uncertain", "unclear", "undermodulated", "unintelligible",
    "unknown sounds", "unreliable", "unsatisfactory", "unspecific", "vague",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Music,
    Speech,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRecord {
    pub id: String,
    pub duration: f64,
    pub category: Category,
    /// One unit vector per full segment.
    pub segments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub text: String,
    /// Filled in by the embedder when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vec: Option<Vec<f64>>,
}

/// All candidates for one segment of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCandidates {
    pub record_id: String,
    pub segment: usize,
    pub captions: Vec<CaptionCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub threshold: f64,
    /// Only the first `candidates_per_segment` candidates are scored.
    pub candidates_per_segment: usize,
    pub keyword_blocklist: Vec<String>,
    pub segment_length: f64,
    /// Keep every k-th segment of `other` audio.
    pub subsample_keep_every: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            candidates_per_segment: 10,
            keyword_blocklist: DEFAULT_BLOCKLIST.iter().map(|s| s.to_string()).collect(),
            segment_length: 10.0,
            subsample_keep_every: 1,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} is outside [-1, 1]", self.threshold)));
        }
        if self.candidates_per_segment == 0 || self.subsample_keep_every == 0 {
            return Err(Error::Config(
                "candidates_per_segment and subsample_keep_every must be positive".into(),
            ));
        }
        if !(self.segment_length > 0.0) {
            return Err(Error::Config(format!("segment_length must be positive, got {}", self.segment_length)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedCaption {
    pub record_id: String,
    pub segment: usize,
    pub caption: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub accepted: usize,
    pub rejected_threshold: usize,
    pub rejected_keyword: usize,
    /// Best-candidate similarities of accepted and threshold-rejected
    /// segments, bins of width 0.01 over [0, 1].
    pub histogram: Vec<usize>,
    /// Audio duration covered by accepted captions.
    pub total_hours: f64,
}

impl Default for DatasetSummary {
    fn default() -> Self {
        Self {
            accepted: 0,
            rejected_threshold: 0,
            rejected_keyword: 0,
            histogram: vec![0; HISTOGRAM_BINS],
            total_hours: 0.0,
        }
    }
}

impl DatasetSummary {
    pub fn total(&self) -> usize {
        self.accepted + self.rejected_threshold + self.rejected_keyword
    }

    // from the count, so the value does not depend on merge order
    fn hours_for(&self, cfg: &FilterConfig) -> f64 {
        self.accepted as f64 * cfg.segment_length / 3600.0
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_low,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{:.2},{c}\n", i as f64 / HISTOGRAM_BINS as f64));
        }
        out
    }

    fn merge(&mut self, other: &DatasetSummary) {
        self.accepted += other.accepted;
        self.rejected_threshold += other.rejected_threshold;
        self.rejected_keyword += other.rejected_keyword;
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
    }
}

/// Histogram bin of a similarity; values outside [0, 1] go to the end bins.
pub fn histogram_bin(sim: f64) -> usize {
    let b = (sim * HISTOGRAM_BINS as f64 + BIN_EPS).floor();
    b.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
}

/// Number of full segments; a trailing partial segment is dropped.
pub fn segment_count(duration: f64, segment_length: f64) -> Result<usize> {
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::Domain { what: "duration", value: duration });
    }
    if !(segment_length > 0.0) {
        return Err(Error::Domain { what: "segment_length", value: segment_length });
    }
    Ok((duration / segment_length + BIN_EPS).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Accepted { index: usize, similarity: f64 },
    BelowThreshold { index: usize, similarity: f64 },
}

impl Selection {
    pub fn index(&self) -> usize {
        match *self {
            Selection::Accepted { index, .. } | Selection::BelowThreshold { index, .. } => index,
        }
    }

    pub fn similarity(&self) -> f64 {
        match *self {
            Selection::Accepted { similarity, .. } | Selection::BelowThreshold { similarity, .. } => similarity,
        }
    }
}

/// Picks the highest-similarity candidate (lowest index on ties) and
/// accepts it iff its similarity reaches `threshold`.
pub fn best_caption(candidates: &[&[f64]], audio: &[f64], threshold: f64) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("caption candidates"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != audio.len() {
            return Err(Error::shape("best_caption", &[c.len()], &[audio.len()]));
        }
        let s = cosine(c, audio);
        if s > best.1 {
            best = (i, s);
        }
    }
    let (index, similarity) = best;
    Ok(if similarity >= threshold {
        Selection::Accepted { index, similarity }
    } else {
        Selection::BelowThreshold { index, similarity }
    })
}

/// Case-insensitive substring match against the blocklist. Returns the
/// entry occurring earliest in the text (list order on ties).
pub fn keyword_filter<'a>(text: &str, blocklist: &'a [String]) -> Option<&'a str> {
    let lower = text.to_lowercase();
    blocklist
        .iter()
        .filter(|k| !k.is_empty())
        .filter_map(|k| lower.find(&k.to_lowercase()).map(|pos| (pos, k)))
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, k)| k.as_str())
}

/// Music and speech keep every segment; other audio keeps every k-th,
/// starting at 0.
pub fn subsample_segments(category: Category, n_segments: usize, keep_every: usize) -> Vec<usize> {
    match category {
        Category::Music | Category::Speech => (0..n_segments).collect(),
        Category::Other => (0..n_segments).step_by(keep_every.max(1)).collect(),
    }
}

/// Highest cosine similarity to `query` and the id achieving it (first on ties).
pub fn max_sim<'a>(dataset: &'a [(String, Vec<f64>)], query: &[f64]) -> Result<(f64, &'a str)> {
    let mut best: Option<(f64, &str)> = None;
    for (id, v) in dataset {
        if v.len() != query.len() {
            return Err(Error::shape("max_sim", &[v.len()], &[query.len()]));
        }
        let s = cosine(v, query);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, id));
        }
    }
    best.ok_or(Error::Empty("dataset"))
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("{what} has norm {n}, expected a unit vector")));
    }
    Ok(())
}

impl AudioRecord {
    pub fn validate(&self, segment_length: f64) -> Result<()> {
        let expect = segment_count(self.duration, segment_length)?;
        if self.segments.len() != expect {
            return Err(Error::Contract(format!(
                "record {} of {} s has {} segment embeddings, expected {expect}",
                self.id,
                self.duration,
                self.segments.len()
            )));
        }
        for (i, s) in self.segments.iter().enumerate() {
            check_unit(s, &format!("record {} segment {i}", self.id))?;
        }
        Ok(())
    }
}

/// Text embedder used when a candidate arrives without a vector.
pub trait Embedder: Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl<F: Fn(&str) -> Result<Vec<f64>> + Sync> Embedder for F {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self(text)
    }
}

/// Deterministic stand-in text embedder: hashed character trigrams,
/// 64 buckets, L2-normalized.
pub fn toy_embedder(text: &str) -> Result<Vec<f64>> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    if chars.iter().all(|c| c.is_whitespace()) {
        return Err(Error::Empty("caption text"));
    }
    let padded: Vec<char> = std::iter::once(' ').chain(chars).chain(std::iter::once(' ')).collect();
    let mut v = vec![0.0; TOY_EMBED_DIM];
    for w in padded.windows(3) {
        let mut h = FnvHasher::default();
        let s: String = w.iter().collect();
        h.write(s.as_bytes());
        v[(h.finish() % TOY_EMBED_DIM as u64) as usize] += 1.0;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn process_record(
    record: &AudioRecord,
    candidates: &BTreeMap<usize, &SegmentCandidates>,
    cfg: &FilterConfig,
    embedder: &dyn Embedder,
) -> Result<(Vec<AcceptedCaption>, DatasetSummary)> {
    record.validate(cfg.segment_length)?;
    let provider = |message: String| Error::Provider {
        record: record.id.clone(),
        message,
    };
    let mut accepted = Vec::new();
    let mut summary = DatasetSummary::default();
    for seg in subsample_segments(record.category, record.segments.len(), cfg.subsample_keep_every) {
        let Some(cands) = candidates.get(&seg) else { continue };
        let cands = &cands.captions[..cands.captions.len().min(cfg.candidates_per_segment)];
        if cands.is_empty() {
            continue;
        }
        let vecs: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| match &c.vec {
                Some(v) => {
                    check_unit(v, &format!("caption {:?} of record {}", c.text, record.id))?;
                    Ok(v.clone())
                }
                None => embedder.embed(&c.text).map_err(|e| provider(e.to_string())),
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let sel = best_caption(&refs, &record.segments[seg], cfg.threshold)?;
        match sel {
            Selection::BelowThreshold { similarity, .. } => {
                summary.rejected_threshold += 1;
                summary.histogram[histogram_bin(similarity)] += 1;
            }
            Selection::Accepted { index, similarity } => {
                let text = &cands[index].text;
                if keyword_filter(text, &cfg.keyword_blocklist).is_some() {
                    summary.rejected_keyword += 1;
                } else {
                    summary.accepted += 1;
                    summary.histogram[histogram_bin(similarity)] += 1;
                    accepted.push(AcceptedCaption {
                        record_id: record.id.clone(),
                        segment: seg,
                        caption: text.clone(),
                        similarity,
                    });
                }
            }
        }
    }
    Ok((accepted, summary))
}

/// Runs selection, thresholding, keyword filtering and subsampling over all
/// records. Output is ordered by `(record id, segment)`.
pub fn build_dataset(
    records: &[AudioRecord],
    candidates: &[SegmentCandidates],
    cfg: &FilterConfig,
    embedder: &dyn Embedder,
) -> Result<(Vec<AcceptedCaption>, DatasetSummary)> {
    cfg.validate()?;
    let mut by_record: BTreeMap<&str, BTreeMap<usize, &SegmentCandidates>> = BTreeMap::new();
    for c in candidates {
        if by_record
            .entry(&c.record_id)
            .or_default()
            .insert(c.segment, c)
            .is_some()
        {
            return Err(Error::Contract(format!(
                "duplicate candidates for record {} segment {}",
                c.record_id, c.segment
            )));
        }
    }
    let mut order: Vec<&AudioRecord> = records.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    for w in order.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Contract(format!("duplicate record id {}", w[0].id)));
        }
    }
    let empty = BTreeMap::new();
    let parts = order
        .par_iter()
        .map(|r| process_record(r, by_record.get(r.id.as_str()).unwrap_or(&empty), cfg, embedder))
        .collect::<Result<Vec<_>>>()?;
    let mut accepted = Vec::new();
    let mut summary = DatasetSummary::default();
    for (a, s) in parts {
        accepted.extend(a);
        summary.merge(&s);
    }
    summary.total_hours = summary.hours_for(cfg);
    Ok((accepted, summary))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(source, i + 1, e.to_string())))
        .collect()
}

pub fn parse_records(text: &str, source: &str) -> Result<Vec<AudioRecord>> {
    parse_jsonl(text, source)
}

pub fn parse_candidates(text: &str, source: &str) -> Result<Vec<SegmentCandidates>> {
    parse_jsonl(text, source)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<AudioRecord>> {
    parse_records(&read_text(path)?, &path.display().to_string())
}

pub fn read_candidates(path: &Path) -> Result<Vec<SegmentCandidates>> {
    parse_candidates(&read_text(path)?, &path.display().to_string())
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// A synthetic corpus whose best-candidate similarities are known exactly.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub records: Vec<AudioRecord>,
    pub candidates: Vec<SegmentCandidates>,
    /// Planted best similarity per `(record id, segment)`.
    pub planted: Vec<(String, usize, f64, bool)>,
}

impl PlantedCorpus {
    /// Counts the plant implies for `cfg` (keyword flags are planted with
    /// words from the default blocklist).
    pub fn expected_summary(&self, cfg: &FilterConfig) -> DatasetSummary {
        let mut s = DatasetSummary::default();
        for (_, _, sim, flagged) in &self.planted {
            if *sim < cfg.threshold {
                s.rejected_threshold += 1;
                s.histogram[histogram_bin(*sim)] += 1;
            } else if *flagged {
                s.rejected_keyword += 1;
            } else {
                s.accepted += 1;
                s.histogram[histogram_bin(*sim)] += 1;
            }
        }
        s.total_hours = s.hours_for(cfg);
        s
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `n_records` music/speech records of 1–4 segments with `dim`-dimensional
/// embeddings. Each segment gets three candidates: the best at a planted
/// similarity at a bin center, two decoys strictly below it. About one in
/// six best captions contains a blocklisted word.
pub fn planted_corpus(n_records: usize, dim: usize, seed: u64) -> PlantedCorpus {
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();
    let mut candidates = Vec::new();
    let mut planted = Vec::new();
    for r in 0..n_records {
        let id = format!("rec{r:04}");
        let n_seg = 1 + rng.below(4);
        let category = if rng.bernoulli(0.5) { Category::Music } else { Category::Speech };
        let mut segments = Vec::new();
        for s in 0..n_seg {
            let e = unit((0..dim).map(|_| rng.normal()).collect());
            // orthonormal direction to e
            let raw: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let proj: f64 = raw.iter().zip(&e).map(|(a, b)| a * b).sum();
            let u = unit(raw.iter().zip(&e).map(|(a, b)| a - proj * b).collect());
            let at = |sim: f64| -> Vec<f64> {
                let c = (1.0 - sim * sim).sqrt();
                e.iter().zip(&u).map(|(a, b)| sim * a + c * b).collect()
            };
            let bin = 10 + rng.below(85);
            let sim = (bin as f64 + 0.5) / HISTOGRAM_BINS as f64;
            let flagged = rng.below(6) == 0;
            let text = if flagged {
                format!("a noisy recording, take {r}-{s}")
            } else {
                format!("a clear recording, take {r}-{s}")
            };
            let best_slot = rng.below(3);
            let mut caps = Vec::new();
            for slot in 0..3 {
                if slot == best_slot {
                    caps.push(CaptionCandidate { text: text.clone(), vec: Some(at(sim)) });
                } else {
                    let lower = sim - 0.05 - 0.05 * rng.uniform();
                    caps.push(CaptionCandidate {
                        text: format!("decoy {slot} for {r}-{s}"),
                        vec: Some(at(lower)),
                    });
                }
            }
            segments.push(e);
            candidates.push(SegmentCandidates { record_id: id.clone(), segment: s, captions: caps });
            planted.push((id.clone(), s, sim, flagged));
        }
        records.push(AudioRecord {
            id,
            duration: n_seg as f64 * 10.0 + 9.0 * rng.uniform(),
            category,
            segments,
        });
    }
    PlantedCorpus { records, candidates, planted }
}
