//! Frame and region feature preparation.
//!
//! Raw frame features arrive as one matrix per extractor block. Each block is
//! stride-sampled (unless the file is flagged pre-strided), resized along time
//! to a fixed length by endpoint-aligned linear interpolation, and the blocks
//! are concatenated along the feature axis. Region detections are kept per
//! inter-boundary clip, top-`N_o` by confidence, zero padded.
//!
//! Feature files use the safetensors container; see `docs/feature-format.md`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::datamodel::{ModelConfig, VideoRecord};
use crate::error::{GebcError, Result};
use crate::tensor::Mat;

pub const FEATURE_FORMAT: &str = "gebc-features";
pub const FEATURE_FORMAT_VERSION: &str = "1";

/// `0, m, 2m, ...` strictly below `num_frames`.
pub fn sample_frame_indices(num_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if num_frames == 0 {
        return Err(GebcError::invalid("cannot sample frames from an empty video"));
    }
    if stride == 0 {
        return Err(GebcError::invalid("frame stride must be positive"));
    }
    Ok((0..num_frames).step_by(stride).collect())
}

/// Linear interpolation along rows with endpoint alignment: output row `j`
/// reads source position `j·(S−1)/(L−1)`.
pub fn temporal_resize(block: &Mat, target: usize) -> Result<Mat> {
    let src_len = block.rows();
    if src_len == 0 {
        return Err(GebcError::invalid("cannot resize an empty feature block"));
    }
    if target == 0 {
        return Err(GebcError::invalid("target length must be positive"));
    }
    let mut out = Mat::zeros(target, block.cols());
    for j in 0..target {
        let pos = if target == 1 || src_len == 1 {
            0.0
        } else {
            (j * (src_len - 1)) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        let f = pos - lo as f64;
        let (a, b) = (block.row(lo), block.row(hi));
        for (o, (x, y)) in out.row_mut(j).iter_mut().zip(a.iter().zip(b)) {
            *o = if f == 0.0 { *x } else { (1.0 - f) * x + f * y };
        }
    }
    Ok(out)
}

/// Feature-axis concatenation in block order.
pub fn concat_blocks(blocks: &[Mat]) -> Result<Mat> {
    let first = blocks
        .first()
        .ok_or_else(|| GebcError::invalid("no feature blocks to concatenate"))?;
    if let Some((i, b)) = blocks
        .iter()
        .enumerate()
        .find(|(_, b)| b.rows() != first.rows())
    {
        return Err(GebcError::shape(format!(
            "feature block {i} has {} rows, block 0 has {}",
            b.rows(),
            first.rows()
        )));
    }
    let refs: Vec<&Mat> = blocks.iter().collect();
    Mat::concat_cols(&refs)
}

/// Frame index nearest to the centre of each clip `(0,t¹), (t¹,t²), …, (tᴺ,duration)`.
pub fn clip_center_frames(boundaries: &[f64], duration: f64, num_frames: usize) -> Vec<usize> {
    let last = num_frames.saturating_sub(1);
    clip_spans(boundaries, duration)
        .into_iter()
        .map(|(s, e)| {
            let center = 0.5 * (s + e);
            let idx = (center / duration * last as f64).round();
            (idx.max(0.0) as usize).min(last)
        })
        .collect()
}

/// Clip intervals between consecutive boundaries, including both video ends.
pub fn clip_spans(boundaries: &[f64], duration: f64) -> Vec<(f64, f64)> {
    let mut edges = Vec::with_capacity(boundaries.len() + 2);
    edges.push(0.0);
    edges.extend_from_slice(boundaries);
    edges.push(duration);
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Raw detections for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    /// `count × d_r`
    pub features: Mat,
    pub confidence: Vec<f64>,
}

/// Padded region slots for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionClip {
    pub features: Mat,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Keeps the `max_regions` most confident detections (stable on ties) and
/// zero-pads the rest.
pub fn select_regions(det: &Detections, max_regions: usize) -> Result<RegionClip> {
    let count = det.features.rows();
    if det.confidence.len() != count {
        return Err(GebcError::shape(format!(
            "{count} detections but {} confidences",
            det.confidence.len()
        )));
    }
    if let Some(c) = det
        .confidence
        .iter()
        .find(|c| !(0.0..=1.0).contains(*c))
    {
        return Err(GebcError::invalid(format!("confidence {c} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| det.confidence[b].total_cmp(&det.confidence[a]));
    order.truncate(max_regions);

    let dim = det.features.cols();
    let mut features = Mat::zeros(max_regions, dim);
    let mut confidence = vec![0.0; max_regions];
    let mut valid = vec![false; max_regions];
    for (slot, &src) in order.iter().enumerate() {
        features.row_mut(slot).copy_from_slice(det.features.row(src));
        confidence[slot] = det.confidence[src];
        valid[slot] = true;
    }
    Ok(RegionClip {
        features,
        confidence,
        valid,
    })
}

/// Region tensor for all `N+1` clips of a video, flattened clip-major to
/// `((N+1)·N_o) × d_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub features: Mat,
    pub confidence: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub source_frame: Vec<usize>,
    pub max_regions: usize,
}

impl RegionFeatures {
    pub fn num_clips(&self) -> usize {
        self.source_frame.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn clip_of_token(&self, token: usize) -> usize {
        token / self.max_regions
    }

    pub fn from_clips(clips: Vec<RegionClip>, source_frame: Vec<usize>, max_regions: usize) -> Result<Self> {
        let refs: Vec<&Mat> = clips.iter().map(|c| &c.features).collect();
        let features = Mat::concat_rows(&refs)?;
        Ok(RegionFeatures {
            features,
            confidence: clips.iter().flat_map(|c| c.confidence.iter().copied()).collect(),
            valid_mask: clips.iter().flat_map(|c| c.valid.iter().copied()).collect(),
            source_frame,
            max_regions,
        })
    }
}

/// Frame features before and after resizing.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// Stride-sampled blocks, `S_b × d_b` each.
    pub sampled_blocks: Vec<Mat>,
    /// `L × Σ d_b`
    pub resized: Mat,
    pub block_dims: Vec<usize>,
}

pub fn build_frame_features(
    raw_blocks: &[Mat],
    strides: &[usize],
    pre_strided: bool,
    target_length: usize,
) -> Result<FrameFeatures> {
    if raw_blocks.len() != strides.len() {
        return Err(GebcError::shape(format!(
            "{} frame blocks but {} strides configured",
            raw_blocks.len(),
            strides.len()
        )));
    }
    let mut sampled_blocks = Vec::with_capacity(raw_blocks.len());
    for (block, &stride) in raw_blocks.iter().zip(strides) {
        let sampled = if pre_strided {
            block.clone()
        } else {
            let idx = sample_frame_indices(block.rows(), stride)?;
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| block.row(i).to_vec()).collect();
            Mat::from_rows(&rows)?
        };
        sampled_blocks.push(sampled);
    }
    let resized: Vec<Mat> = sampled_blocks
        .iter()
        .map(|b| temporal_resize(b, target_length))
        .collect::<Result<_>>()?;
    Ok(FrameFeatures {
        block_dims: resized.iter().map(Mat::cols).collect(),
        resized: concat_blocks(&resized)?,
        sampled_blocks,
    })
}

/// Contents of one per-video feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub frame_blocks: Vec<Mat>,
    pub pre_strided: bool,
    pub clips: Vec<Detections>,
    pub region_dim: usize,
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, b) in self.frame_blocks.iter().enumerate() {
            owned.push((format!("frame_block_{k}"), vec![b.rows(), b.cols()], f32_bytes(b.data())));
        }
        for (j, c) in self.clips.iter().enumerate() {
            owned.push((
                format!("regions_{j}"),
                vec![c.features.rows(), self.region_dim],
                f32_bytes(c.features.data()),
            ));
            owned.push((
                format!("region_conf_{j}"),
                vec![c.confidence.len()],
                f32_bytes(&c.confidence),
            ));
        }
        let views: Vec<(String, TensorView)> = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| GebcError::invalid(format!("tensor {name}: {e}")))
            })
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FEATURE_FORMAT.to_string());
        meta.insert("version".to_string(), FEATURE_FORMAT_VERSION.to_string());
        meta.insert("pre_strided".to_string(), self.pre_strided.to_string());
        meta.insert("num_frame_blocks".to_string(), self.frame_blocks.len().to_string());
        meta.insert("num_clips".to_string(), self.clips.len().to_string());
        meta.insert("region_dim".to_string(), self.region_dim.to_string());
        crate::io::serialize_safetensors(views, meta)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| GebcError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(format!("bad container: {e}")))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| corrupt("missing metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| corrupt(format!("missing metadata key `{k}`")))
        };
        if field("format")? != FEATURE_FORMAT {
            return Err(corrupt("not a gebc feature file".into()));
        }
        let version = field("version")?;
        if version != FEATURE_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported feature format version {version}")));
        }
        let parse_usize = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| corrupt(format!("metadata `{k}` is not an integer")))
        };
        let pre_strided = match field("pre_strided")?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(corrupt(format!("pre_strided = `{other}`"))),
        };
        let num_blocks = parse_usize("num_frame_blocks")?;
        let num_clips = parse_usize("num_clips")?;
        let region_dim = parse_usize("region_dim")?;

        let read = |name: &str, rank: usize| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = st
                .tensor(name)
                .map_err(|_| corrupt(format!("missing tensor `{name}`")))?;
            if t.dtype() != Dtype::F32 {
                return Err(corrupt(format!("tensor `{name}` is not float32")));
            }
            if t.shape().len() != rank {
                return Err(corrupt(format!("tensor `{name}` has rank {}", t.shape().len())));
            }
            let values: Vec<f64> = t
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("tensor `{name}` contains NaN or Inf")));
            }
            Ok((t.shape().to_vec(), values))
        };

        let mut frame_blocks = Vec::with_capacity(num_blocks);
        for k in 0..num_blocks {
            let (shape, values) = read(&format!("frame_block_{k}"), 2)?;
            frame_blocks.push(Mat::from_vec(shape[0], shape[1], values)?);
        }
        let mut clips = Vec::with_capacity(num_clips);
        for j in 0..num_clips {
            let (shape, values) = read(&format!("regions_{j}"), 2)?;
            if shape[1] != region_dim {
                return Err(corrupt(format!("regions_{j} width {} != {region_dim}", shape[1])));
            }
            let (cshape, confidence) = read(&format!("region_conf_{j}"), 1)?;
            if cshape[0] != shape[0] {
                return Err(corrupt(format!("region_conf_{j} length mismatch")));
            }
            clips.push(Detections {
                features: Mat::from_vec(shape[0], shape[1], values)?,
                confidence,
            });
        }
        Ok(FeatureFile {
            frame_blocks,
            pre_strided,
            clips,
            region_dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GebcError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Fixed-shape model inputs for one video.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub record: VideoRecord,
    pub frames: FrameFeatures,
    pub regions: RegionFeatures,
}

impl PreparedVideo {
    pub fn new(record: VideoRecord, file: &FeatureFile, config: &ModelConfig) -> Result<Self> {
        let n = record.num_boundaries();
        if file.clips.len() != n + 1 {
            return Err(GebcError::Invariant {
                video_id: record.video_id.clone(),
                rule: format!(
                    "feature file has {} region clips, expected {} (boundaries + 1)",
                    file.clips.len(),
                    n + 1
                ),
            });
        }
        let frames = build_frame_features(
            &file.frame_blocks,
            &config.strides,
            file.pre_strided,
            config.target_length,
        )?;
        let clips = file
            .clips
            .iter()
            .map(|d| select_regions(d, config.max_regions))
            .collect::<Result<Vec<_>>>()?;
        let source = clip_center_frames(&record.boundaries, record.duration, record.num_frames);
        let regions = RegionFeatures::from_clips(clips, source, config.max_regions)?;
        Ok(PreparedVideo {
            record,
            frames,
            regions,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.frames.resized.cols()
    }

    pub fn region_dim(&self) -> usize {
        self.regions.features.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Mat {
        Mat::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn stride_sampling() {
        assert_eq!(sample_frame_indices(32, 8).unwrap(), vec![0, 8, 16, 24]);
        assert_eq!(sample_frame_indices(8, 8).unwrap(), vec![0]);
        assert!(sample_frame_indices(0, 8).is_err());
        assert!(sample_frame_indices(8, 0).is_err());
    }

    #[test]
    fn resize_examples() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.25]]).unwrap();
        assert_eq!(temporal_resize(&m, 3).unwrap(), m);

        let r = temporal_resize(&column(&[0.0, 1.0]), 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);

        let c = temporal_resize(&column(&[2.5; 7]), 4).unwrap();
        assert!(c.data().iter().all(|&v| v == 2.5));

        let single = temporal_resize(&column(&[4.0]), 5).unwrap();
        assert!(single.data().iter().all(|&v| v == 4.0));
        assert!(temporal_resize(&Mat::zeros(0, 3), 4).is_err());
    }

    #[test]
    fn concat_dims() {
        let a = Mat::zeros(100, 512);
        let b = Mat::zeros(100, 768);
        assert_eq!(concat_blocks(&[a.clone(), b]).unwrap().shape(), (100, 1280));
        assert_eq!(concat_blocks(&[a.clone()]).unwrap(), a);
        assert!(concat_blocks(&[Mat::zeros(100, 4), Mat::zeros(99, 4)]).is_err());
    }

    #[test]
    fn concat_keeps_block_order() {
        let a = Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Mat::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = concat_blocks(&[a, b]).unwrap();
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
    }

    #[test]
    fn center_frames() {
        assert_eq!(clip_center_frames(&[4.0], 10.0, 11), vec![2, 7]);
        assert_eq!(clip_center_frames(&[5.0], 10.0, 2), vec![0, 1]);
        assert_eq!(clip_center_frames(&[1.0, 2.0, 3.0], 4.0, 9).len(), 4);
    }

    fn dets(conf: &[f64]) -> Detections {
        let rows: Vec<Vec<f64>> = (0..conf.len()).map(|i| vec![i as f64 + 1.0, 1.0]).collect();
        Detections {
            features: if rows.is_empty() { Mat::zeros(0, 2) } else { Mat::from_rows(&rows).unwrap() },
            confidence: conf.to_vec(),
        }
    }

    #[test]
    fn regions_zero_padded() {
        let out = select_regions(&dets(&[0.9, 0.2, 0.5]), 50).unwrap();
        assert_eq!(out.features.rows(), 50);
        assert_eq!(out.valid.iter().filter(|v| **v).count(), 3);
        for r in 3..50 {
            assert!(out.features.row(r).iter().all(|&v| v == 0.0));
            assert!(!out.valid[r]);
        }
        assert_eq!(out.confidence[..3], [0.9, 0.5, 0.2]);
    }

    #[test]
    fn regions_top_k_by_confidence() {
        let conf: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 / 60.0).collect();
        let out = select_regions(&dets(&conf), 50).unwrap();
        let kept_min = out.confidence.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let dropped_max = sorted[50];
        assert!(kept_min >= dropped_max);
        assert!(out.valid.iter().all(|v| *v));
    }

    #[test]
    fn regions_tie_break_by_index() {
        let mut conf = vec![0.1; 12];
        conf[4] = 0.8;
        conf[9] = 0.8;
        let out = select_regions(&dets(&conf), 1).unwrap();
        assert_eq!(out.features.row(0)[0], 5.0);
    }

    #[test]
    fn regions_reject_bad_confidence() {
        assert!(select_regions(&dets(&[1.5]), 4).is_err());
        assert!(select_regions(&dets(&[-0.1]), 4).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let file = FeatureFile {
            frame_blocks: vec![
                Mat::from_rows(&[vec![0.5, 1.0], vec![1.5, -2.0], vec![0.25, 0.0]]).unwrap(),
                Mat::from_rows(&[vec![3.0], vec![4.0]]).unwrap(),
            ],
            pre_strided: true,
            clips: vec![dets(&[0.75, 0.5]), dets(&[])],
            region_dim: 2,
        };
        let bytes = file.to_bytes().unwrap();
        let back = FeatureFile::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn corrupt_feature_file_named() {
        let err = FeatureFile::from_bytes(b"garbage", Path::new("videos/v7.safetensors")).unwrap_err();
        assert!(err.to_string().contains("v7.safetensors"));
    }

    proptest! {
        #[test]
        fn resize_stays_within_column_bounds(
            values in proptest::collection::vec(-100.0f64..100.0, 1..20),
            target in 1usize..40,
        ) {
            let out = temporal_resize(&column(&values), target).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.rows(), target);
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            if values.len() >= 2 && target >= 2 {
                prop_assert_eq!(out.data()[0], values[0]);
                prop_assert_eq!(out.data()[target - 1], values[values.len() - 1]);
            }
        }

        #[test]
        fn select_regions_shape(
            conf in proptest::collection::vec(0.0f64..=1.0, 0..80),
            max_regions in 1usize..60,
        ) {
            let out = select_regions(&dets(&conf), max_regions).unwrap();
            prop_assert_eq!(out.features.rows(), max_regions);
            prop_assert_eq!(out.valid.iter().filter(|v| **v).count(), conf.len().min(max_regions));
            let valid_conf: Vec<f64> = out.confidence.iter().zip(&out.valid).filter(|(_, v)| **v).map(|(c, _)| *c).collect();
            prop_assert!(valid_conf.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn sample_count_is_ceiling(t in 1usize..500, m in 1usize..40) {
            prop_assert_eq!(sample_frame_indices(t, m).unwrap().len(), t.div_ceil(m));
        }
    }
}
