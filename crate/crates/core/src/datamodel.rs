//! Videos, boundaries, caption triples and model configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GebcError, Result};

/// The three captions attached to one boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionTriple {
    pub subject: String,
    pub before: String,
    pub after: String,
}

impl CaptionTriple {
    pub fn get(&self, kind: CaptionKind) -> &str {
        match kind {
            CaptionKind::Subject => &self.subject,
            CaptionKind::Before => &self.before,
            CaptionKind::After => &self.after,
        }
    }
}

/// Which caption a model is trained to produce. Each kind gets its own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionKind {
    Subject,
    Before,
    After,
}

impl CaptionKind {
    pub const ALL: [CaptionKind; 3] = [CaptionKind::Subject, CaptionKind::Before, CaptionKind::After];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionKind::Subject => "subject",
            CaptionKind::Before => "before",
            CaptionKind::After => "after",
        }
    }
}

impl fmt::Display for CaptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionKind {
    type Err = GebcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(CaptionKind::Subject),
            "before" => Ok(CaptionKind::Before),
            "after" => Ok(CaptionKind::After),
            other => Err(GebcError::invalid(format!(
                "unknown caption kind `{other}` (expected subject, before or after)"
            ))),
        }
    }
}

/// One annotated video. Boundaries are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_frames: usize,
    pub duration: f64,
    pub boundaries: Vec<f64>,
    pub captions: Vec<CaptionTriple>,
}

impl VideoRecord {
    pub fn num_boundaries(&self) -> usize {
        self.boundaries.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: String| {
            Err(GebcError::Invariant {
                video_id: self.video_id.clone(),
                rule,
            })
        };
        if self.video_id.is_empty() {
            return fail("empty video_id".into());
        }
        if self.num_frames == 0 {
            return fail("num_frames must be at least 1".into());
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return fail(format!("duration {} must be finite and positive", self.duration));
        }
        if self.boundaries.is_empty() {
            return fail("at least one boundary is required".into());
        }
        for (i, &t) in self.boundaries.iter().enumerate() {
            if !(t.is_finite() && t > 0.0 && t < self.duration) {
                return fail(format!(
                    "boundary {i} at {t} is not strictly inside (0, {})",
                    self.duration
                ));
            }
            if i > 0 && t <= self.boundaries[i - 1] {
                return fail(format!(
                    "boundaries not strictly increasing: {} then {t} at index {i}",
                    self.boundaries[i - 1]
                ));
            }
        }
        if self.captions.len() != self.boundaries.len() {
            return fail(format!(
                "{} caption triples for {} boundaries",
                self.captions.len(),
                self.boundaries.len()
            ));
        }
        for (i, c) in self.captions.iter().enumerate() {
            for kind in CaptionKind::ALL {
                if c.get(kind).trim().is_empty() {
                    return fail(format!("empty {kind} caption at boundary {i}"));
                }
            }
        }
        Ok(())
    }
}

/// Validates records and sorts them by `video_id`; ids must be unique.
pub fn validate_records(mut records: Vec<VideoRecord>) -> Result<Vec<VideoRecord>> {
    let mut seen = BTreeSet::new();
    for r in &records {
        r.validate()?;
        if !seen.insert(r.video_id.clone()) {
            return Err(GebcError::Invariant {
                video_id: r.video_id.clone(),
                rule: "duplicate video_id".into(),
            });
        }
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(records)
}

pub fn parse_annotations(text: &str, context: &str) -> Result<Vec<VideoRecord>> {
    let records: Vec<VideoRecord> = serde_json::from_str(text).map_err(|e| GebcError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    validate_records(records)
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| GebcError::io(path, e))?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn annotations_to_json(records: &[VideoRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

pub fn save_annotations(path: &Path, records: &[VideoRecord]) -> Result<()> {
    crate::io::write_atomic(path, annotations_to_json(records).as_bytes())
}

/// One supervision target for a caption kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionPair {
    pub video_id: String,
    pub boundary_index: usize,
    pub target: String,
}

pub fn split_by_kind(records: &[VideoRecord], kind: CaptionKind) -> Vec<SupervisionPair> {
    records
        .iter()
        .flat_map(|r| {
            r.captions.iter().enumerate().map(move |(i, c)| SupervisionPair {
                video_id: r.video_id.clone(),
                boundary_index: i,
                target: c.get(kind).to_string(),
            })
        })
        .collect()
}

/// Architecture and data-shape settings for one captioning model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub frame_decoder_layers: usize,
    pub region_decoder_layers: usize,
    pub attention_heads: usize,
    pub sampling_points: usize,
    pub target_length: usize,
    pub max_regions: usize,
    pub max_caption_len: usize,
    /// Frame sampling stride per feature block, in block order.
    pub strides: Vec<usize>,
    /// Concatenated frame feature width; inferred from data when unset.
    pub input_dim: Option<usize>,
    /// Region feature width; inferred from data when unset.
    pub region_dim: Option<usize>,
    /// Set from the vocabulary at training time when unset.
    pub vocab_size: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 512,
            ffn_dim: 2048,
            encoder_layers: 2,
            frame_decoder_layers: 2,
            region_decoder_layers: 1,
            attention_heads: 8,
            sampling_points: 4,
            target_length: 100,
            max_regions: 50,
            max_caption_len: 30,
            strides: vec![8, 16],
            input_dim: None,
            region_dim: None,
            vocab_size: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("frame_decoder_layers", self.frame_decoder_layers),
            ("region_decoder_layers", self.region_decoder_layers),
            ("attention_heads", self.attention_heads),
            ("sampling_points", self.sampling_points),
            ("target_length", self.target_length),
            ("max_regions", self.max_regions),
            ("max_caption_len", self.max_caption_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(GebcError::Config {
                    key: format!("model.{key}"),
                    message: "must be positive".into(),
                });
            }
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(GebcError::Config {
                key: "model.hidden_dim".into(),
                message: format!(
                    "{} is not divisible by attention_heads {}",
                    self.hidden_dim, self.attention_heads
                ),
            });
        }
        if self.hidden_dim % 2 != 0 {
            return Err(GebcError::Config {
                key: "model.hidden_dim".into(),
                message: "must be even for the box position encoding".into(),
            });
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(GebcError::Config {
                key: "model.strides".into(),
                message: "one positive stride per feature block is required".into(),
            });
        }
        for (key, v) in [
            ("input_dim", self.input_dim),
            ("region_dim", self.region_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == Some(0) {
                return Err(GebcError::Config {
                    key: format!("model.{key}"),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.attention_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triple(s: &str) -> CaptionTriple {
        CaptionTriple {
            subject: format!("the {s}"),
            before: format!("the {s} sits"),
            after: format!("the {s} runs"),
        }
    }

    fn record(id: &str, boundaries: Vec<f64>, n_caps: usize) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            num_frames: 64,
            duration: 8.0,
            boundaries,
            captions: (0..n_caps).map(|i| triple(&format!("dog{i}"))).collect(),
        }
    }

    #[test]
    fn minimal_file_loads() {
        let json = r#"[{"video_id": "v1", "num_frames": 64, "duration": 8.0,
            "boundaries": [2.0, 4.0],
            "captions": [{"subject": "a", "before": "b", "after": "c"},
                         {"subject": "d", "before": "e", "after": "f"}]}]"#;
        let recs = parse_annotations(json, "inline").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].num_boundaries(), 2);
    }

    #[test]
    fn descending_boundaries_rejected() {
        let err = validate_records(vec![record("v", vec![4.0, 2.0], 2)]).unwrap_err();
        match err {
            GebcError::Invariant { video_id, rule } => {
                assert_eq!(video_id, "v");
                assert!(rule.contains("increasing"), "{rule}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn caption_count_mismatch_rejected() {
        let err = validate_records(vec![record("v", vec![2.0], 2)]).unwrap_err();
        assert!(matches!(err, GebcError::Invariant { .. }));
        assert!(err.to_string().contains("2 caption triples for 1 boundaries"));
    }

    #[test]
    fn boundary_on_video_edge_rejected() {
        assert!(validate_records(vec![record("v", vec![0.0, 2.0], 2)]).is_err());
        assert!(validate_records(vec![record("v", vec![2.0, 8.0], 2)]).is_err());
    }

    #[test]
    fn parse_error_reports_position() {
        let err = parse_annotations("[{\"video_id\": 3}]", "ann.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ann.json") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn records_sorted_by_id() {
        let recs = validate_records(vec![
            record("b", vec![2.0], 1),
            record("a", vec![2.0], 1),
        ])
        .unwrap();
        assert_eq!(recs[0].video_id, "a");
    }

    #[test]
    fn split_counts() {
        let recs = vec![record("v", vec![2.0, 4.0], 2)];
        let pairs = split_by_kind(&recs, CaptionKind::Subject);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].target, "the dog1");
        assert!(split_by_kind(&[], CaptionKind::After).is_empty());

        let recs = vec![
            record("a", vec![2.0], 1),
            record("b", vec![2.0, 4.0], 2),
            record("c", vec![2.0, 4.0, 6.0], 3),
        ];
        for kind in CaptionKind::ALL {
            assert_eq!(split_by_kind(&recs, kind).len(), 6);
        }
    }

    #[test]
    fn default_config_matches_reported_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.hidden_dim, 512);
        assert_eq!(c.target_length, 100);
        assert_eq!(c.max_regions, 50);
        assert_eq!(c.max_caption_len, 30);
        assert_eq!(c.strides, vec![8, 16]);
        assert_eq!(c.region_decoder_layers, 1);
        assert_eq!((c.encoder_layers, c.frame_decoder_layers), (2, 2));
        c.validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig {
            hidden_dim: 30,
            attention_heads: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(GebcError::Config { .. })));
    }

    fn arb_record(index: usize) -> impl Strategy<Value = VideoRecord> {
        (
            proptest::collection::vec(0.01f64..10.0, 2..7),
            1usize..5000,
            proptest::collection::vec(("\\PC{0,8}[a-z]\\PC{0,4}", "[a-z]\\PC{0,12}", "\\PC{0,12}[a-z]"), 6),
        )
            .prop_map(move |(gaps, num_frames, texts)| {
                let mut t = 0.0;
                let mut stops: Vec<f64> = gaps
                    .iter()
                    .map(|g| {
                        t += g;
                        t
                    })
                    .collect();
                let duration = stops.pop().unwrap();
                VideoRecord {
                    video_id: format!("vid_{index:03}"),
                    num_frames,
                    duration,
                    captions: texts
                        .into_iter()
                        .take(stops.len())
                        .map(|(subject, before, after)| CaptionTriple { subject, before, after })
                        .collect(),
                    boundaries: stops,
                }
            })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(records in (1usize..5).prop_flat_map(|n| {
            (0..n).map(arb_record).collect::<Vec<_>>()
        })) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("annotations.json");
            save_annotations(&path, &records).unwrap();
            prop_assert_eq!(load_annotations(&path).unwrap(), records.clone());
            let counts: Vec<usize> = CaptionKind::ALL.iter().map(|&k| split_by_kind(&records, k).len()).collect();
            prop_assert!(counts.iter().all(|&c| c == counts[0]));
        }
    }
}
