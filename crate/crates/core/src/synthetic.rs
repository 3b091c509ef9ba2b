//! Seeded toy datasets whose captions are a function of the features.
//!
//! Every video has one subject; each clip between boundaries shows one
//! action. Frame features in a clip are the sum of a subject prototype and
//! an action prototype plus Gaussian noise; each clip's region set contains
//! one confident row carrying a region-space subject prototype. Captions are
//! `the <subject>`, `the <subject> is <before>`, `the <subject> is <after>`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_annotations, validate_records, CaptionTriple, VideoRecord};
use crate::error::{GebcError, Result};
use crate::features::{Detections, FeatureFile};
use crate::model::{feature_path, ANNOTATIONS_FILE, FEATURES_DIR};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub min_boundaries: usize,
    pub max_boundaries: usize,
    pub subjects: Vec<String>,
    pub actions: Vec<String>,
    /// Width of each raw frame feature block.
    pub frame_dims: Vec<usize>,
    pub region_dim: usize,
    pub min_clip_frames: usize,
    pub max_clip_frames: usize,
    pub fps: f64,
    pub noise: f64,
    pub distractors_per_clip: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        SyntheticSpec {
            seed: 0,
            num_videos: 20,
            min_boundaries: 2,
            max_boundaries: 4,
            subjects: s(&[
                "man in red",
                "woman in blue",
                "boy with ball",
                "girl with kite",
                "dog on grass",
                "cat on sofa",
                "chef in kitchen",
                "player on field",
            ]),
            actions: s(&["running", "jumping", "sitting", "walking", "dancing", "swimming"]),
            frame_dims: vec![12, 12],
            region_dim: 8,
            min_clip_frames: 6,
            max_clip_frames: 12,
            fps: 2.0,
            noise: 0.05,
            distractors_per_clip: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| GebcError::Parse {
            context: "synthetic spec".into(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GebcError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            GebcError::Parse { message, .. } => GebcError::Parse {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: &str| {
            Err(GebcError::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.num_videos == 0 {
            return err("num_videos", "must be positive");
        }
        if self.min_boundaries == 0 || self.min_boundaries > self.max_boundaries {
            return err("min_boundaries", "need 1 <= min_boundaries <= max_boundaries");
        }
        if self.subjects.is_empty() {
            return err("subjects", "need at least one subject");
        }
        if self.actions.len() < 2 {
            return err("actions", "need at least two actions");
        }
        if self.frame_dims.is_empty() || self.frame_dims.contains(&0) {
            return err("frame_dims", "need at least one positive block width");
        }
        if self.region_dim == 0 {
            return err("region_dim", "must be positive");
        }
        if self.min_clip_frames == 0 || self.min_clip_frames > self.max_clip_frames {
            return err("min_clip_frames", "need 1 <= min_clip_frames <= max_clip_frames");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return err("fps", "must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise", "must be non-negative");
        }
        for (key, words) in [("subjects", &self.subjects), ("actions", &self.actions)] {
            let mut seen = std::collections::BTreeSet::new();
            for w in words.iter() {
                if crate::caption::tokenize(w).join(" ") != *w {
                    return err(key, "entries must be lowercase words separated by single spaces");
                }
                if !seen.insert(w) {
                    return err(key, "entries must be distinct");
                }
            }
        }
        Ok(())
    }
}

/// Class prototypes used by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `subject[s][k]` is a row of width `frame_dims[k]`.
    pub subject: Vec<Vec<Vec<f64>>>,
    pub action: Vec<Vec<Vec<f64>>>,
    /// Region-space subject prototypes, width `region_dim`.
    pub region_subject: Vec<Vec<f64>>,
}

/// Ground-truth classes of one generated video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLabels {
    pub subject: usize,
    /// One action per clip.
    pub actions: Vec<usize>,
    /// First frame of each clip, plus the total frame count at the end.
    pub clip_starts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<VideoRecord>,
    pub features: Vec<FeatureFile>,
    pub labels: Vec<VideoLabels>,
    pub prototypes: Prototypes,
}

fn gaussian_row(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..width).map(|_| n.sample(rng)).collect()
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blocks = |rng: &mut ChaCha8Rng| spec.frame_dims.iter().map(|&w| gaussian_row(rng, w)).collect();
    let prototypes = Prototypes {
        subject: (0..spec.subjects.len()).map(|_| blocks(&mut rng)).collect(),
        action: (0..spec.actions.len()).map(|_| blocks(&mut rng)).collect(),
        region_subject: (0..spec.subjects.len())
            .map(|_| gaussian_row(&mut rng, spec.region_dim))
            .collect(),
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| GebcError::invalid(e.to_string()))?;
    let draw_noise = |rng: &mut ChaCha8Rng| if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };

    let mut records = Vec::with_capacity(spec.num_videos);
    let mut features = Vec::with_capacity(spec.num_videos);
    let mut labels = Vec::with_capacity(spec.num_videos);
    for vid in 0..spec.num_videos {
        let n = rng.gen_range(spec.min_boundaries..=spec.max_boundaries);
        let subject = rng.gen_range(0..spec.subjects.len());
        let mut actions = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let a = loop {
                let a = rng.gen_range(0..spec.actions.len());
                if j == 0 || a != actions[j - 1] {
                    break a;
                }
            };
            actions.push(a);
        }
        let mut clip_starts = vec![0usize];
        for _ in 0..=n {
            let len = rng.gen_range(spec.min_clip_frames..=spec.max_clip_frames);
            clip_starts.push(clip_starts.last().unwrap() + len);
        }
        let total = *clip_starts.last().unwrap();

        let mut frame_blocks = Vec::with_capacity(spec.frame_dims.len());
        for (k, &w) in spec.frame_dims.iter().enumerate() {
            let mut m = Mat::zeros(total, w);
            for j in 0..=n {
                for t in clip_starts[j]..clip_starts[j + 1] {
                    let row = m.row_mut(t);
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = prototypes.subject[subject][k][c] + prototypes.action[actions[j]][k][c] + draw_noise(&mut rng);
                    }
                }
            }
            frame_blocks.push(m.map(|v| v as f32 as f64));
        }

        let mut clips = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            let rows = 1 + spec.distractors_per_clip;
            let mut feats = Mat::zeros(rows, spec.region_dim);
            let mut confidence = Vec::with_capacity(rows);
            // the confident subject row sits at a random position
            let pos = rng.gen_range(0..rows);
            for r in 0..rows {
                if r == pos {
                    for (c, v) in feats.row_mut(r).iter_mut().enumerate() {
                        *v = prototypes.region_subject[subject][c] + draw_noise(&mut rng);
                    }
                    confidence.push(rng.gen_range(0.9..1.0));
                } else {
                    let row = gaussian_row(&mut rng, spec.region_dim);
                    feats.row_mut(r).copy_from_slice(&row);
                    confidence.push(rng.gen_range(0.05..0.5));
                }
            }
            // values are kept at the f32 precision of the feature files
            let confidence = confidence.into_iter().map(|c: f64| c as f32 as f64).collect();
            clips.push(Detections {
                features: feats.map(|v| v as f32 as f64),
                confidence,
            });
        }

        let subj = &spec.subjects[subject];
        let captions = (0..n)
            .map(|i| CaptionTriple {
                subject: format!("the {subj}"),
                before: format!("the {subj} is {}", spec.actions[actions[i]]),
                after: format!("the {subj} is {}", spec.actions[actions[i + 1]]),
            })
            .collect();
        records.push(VideoRecord {
            video_id: format!("syn_{vid:04}"),
            num_frames: total,
            duration: total as f64 / spec.fps,
            boundaries: clip_starts[1..=n].iter().map(|&f| f as f64 / spec.fps).collect(),
            captions,
        });
        features.push(FeatureFile {
            frame_blocks,
            pre_strided: false,
            clips,
            region_dim: spec.region_dim,
        });
        labels.push(VideoLabels {
            subject,
            actions,
            clip_starts,
        });
    }
    let records = validate_records(records)?;
    Ok(SyntheticDataset {
        records,
        features,
        labels,
        prototypes,
    })
}

/// Writes `annotations.json` and `features/<video_id>.safetensors`.
pub fn write_dataset(ds: &SyntheticDataset, out_dir: &Path) -> Result<()> {
    let feat_dir = out_dir.join(FEATURES_DIR);
    std::fs::create_dir_all(&feat_dir).map_err(|e| GebcError::io(&feat_dir, e))?;
    for (r, f) in ds.records.iter().zip(&ds.features) {
        f.save(&feature_path(out_dir, &r.video_id))?;
    }
    save_annotations(&out_dir.join(ANNOTATIONS_FILE), &ds.records)
}

pub fn generate(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    let ds = generate_dataset(spec)?;
    write_dataset(&ds, out_dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::tokenize;
    use crate::datamodel::{load_annotations, split_by_kind, CaptionKind};

    fn nearest(x: &[f64], candidates: &[Vec<f64>]) -> usize {
        let d = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..candidates.len())
            .min_by(|&a, &b| d(&candidates[a]).total_cmp(&d(&candidates[b])))
            .unwrap()
    }

    #[test]
    fn nearest_prototype_recovers_labels_without_noise() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let ns = spec.subjects.len();
        let na = spec.actions.len();
        // all (subject, action) sums over every block
        let combos: Vec<Vec<f64>> = (0..ns * na)
            .map(|i| {
                let (s, a) = (i / na, i % na);
                (0..spec.frame_dims.len())
                    .flat_map(|k| {
                        ds.prototypes.subject[s][k]
                            .iter()
                            .zip(&ds.prototypes.action[a][k])
                            .map(|(x, y)| x + y)
                            .collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        let mut checked = 0;
        for ((rec, file), lab) in ds.records.iter().zip(&ds.features).zip(&ds.labels) {
            for j in 0..=rec.num_boundaries() {
                let (a, b) = (lab.clip_starts[j], lab.clip_starts[j + 1]);
                let mean: Vec<f64> = file
                    .frame_blocks
                    .iter()
                    .flat_map(|m| {
                        (0..m.cols())
                            .map(|c| (a..b).map(|t| m.get(t, c)).sum::<f64>() / (b - a) as f64)
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let guess = nearest(&mean, &combos);
                assert_eq!((guess / na, guess % na), (lab.subject, lab.actions[j]));
                // within a span features equal the prototype sum up to f32 rounding
                assert!(mean.iter().zip(&combos[guess]).all(|(x, y)| (x - y).abs() < 1e-6));
                checked += 1;
            }
            // the confident region row identifies the subject
            let top = file.clips[0]
                .confidence
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.total_cmp(y.1))
                .unwrap()
                .0;
            let row = file.clips[0].features.row(top).to_vec();
            assert_eq!(nearest(&row, &ds.prototypes.region_subject), lab.subject);
        }
        assert!(checked > 0);
    }

    #[test]
    fn triple_count_and_templates() {
        let ds = generate_dataset(&SyntheticSpec::default()).unwrap();
        let total: usize = ds.records.iter().map(VideoRecord::num_boundaries).sum();
        assert!((40..=80).contains(&total), "{total}");
        for (r, lab) in ds.records.iter().zip(&ds.labels) {
            assert!((2..=4).contains(&r.num_boundaries()));
            for c in &r.captions {
                assert!(c.before.starts_with(&c.subject));
                assert!(tokenize(&c.subject).len() >= 4);
                assert_ne!(c.before, c.after);
            }
            assert_eq!(r.num_frames, *lab.clip_starts.last().unwrap());
        }
        assert_eq!(split_by_kind(&ds.records, CaptionKind::Subject).len(), total);
    }

    #[test]
    fn files_round_trip_and_are_reproducible() {
        let spec = SyntheticSpec {
            num_videos: 3,
            ..SyntheticSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ds = generate(&spec, d1.path()).unwrap();
        generate(&spec, d2.path()).unwrap();
        let ann = std::fs::read(d1.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(ann, std::fs::read(d2.path().join(ANNOTATIONS_FILE)).unwrap());
        assert_eq!(load_annotations(&d1.path().join(ANNOTATIONS_FILE)).unwrap(), ds.records);
        for r in &ds.records {
            let a = std::fs::read(feature_path(d1.path(), &r.video_id)).unwrap();
            let b = std::fs::read(feature_path(d2.path(), &r.video_id)).unwrap();
            assert_eq!(a, b);
            FeatureFile::load(&feature_path(d1.path(), &r.video_id)).unwrap();
        }
    }

    #[test]
    fn spec_parsing() {
        let s = SyntheticSpec::from_toml_str("seed = 5\nnum_videos = 3\nnoise = 0.0\n").unwrap();
        assert_eq!((s.seed, s.num_videos, s.noise), (5, 3, 0.0));
        assert_eq!(s.actions.len(), 6);
        assert!(SyntheticSpec::from_toml_str("sed = 5").is_err());
        assert!(SyntheticSpec::from_toml_str("min_boundaries = 5").is_err());
        assert!(SyntheticSpec::from_toml_str("actions = [\"Run\", \"walk\"]").is_err());
    }
}
