//! Full captioning model, dataset loading and checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use crate::autograd::{Graph, ParamSet, Var};
use crate::caption::{CaptionHead, TokenSequence, Vocabulary};
use crate::datamodel::{load_annotations, CaptionKind, ModelConfig, VideoRecord};
use crate::error::{GebcError, Result};
use crate::features::{FeatureFile, PreparedVideo};
use crate::network::{EventNetwork, NetworkOutput};
use crate::tensor::Mat;

pub const CHECKPOINT_FORMAT: &str = "gebc-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEATURES_DIR: &str = "features";

/// Path of the feature file for `video_id` inside a dataset directory.
pub fn feature_path(data_dir: &Path, video_id: &str) -> PathBuf {
    data_dir.join(FEATURES_DIR).join(format!("{video_id}.safetensors"))
}

/// Loads `annotations.json` and every referenced feature file. Missing
/// feature widths in `config` are filled in from the first video.
pub fn load_dataset(data_dir: &Path, config: &mut ModelConfig) -> Result<Vec<PreparedVideo>> {
    let records = load_annotations(&data_dir.join(ANNOTATIONS_FILE))?;
    let mut files = Vec::with_capacity(records.len());
    for r in &records {
        files.push(FeatureFile::load(&feature_path(data_dir, &r.video_id))?);
    }
    prepare_videos(records, &files, config)
}

pub fn prepare_videos(
    records: Vec<VideoRecord>,
    files: &[FeatureFile],
    config: &mut ModelConfig,
) -> Result<Vec<PreparedVideo>> {
    let mut videos = Vec::with_capacity(records.len());
    for (r, f) in records.into_iter().zip(files) {
        let v = PreparedVideo::new(r, f, config)?;
        let input_dim = *config.input_dim.get_or_insert(v.input_dim());
        let region_dim = *config.region_dim.get_or_insert(v.region_dim());
        if v.input_dim() != input_dim || v.region_dim() != region_dim {
            return Err(GebcError::Invariant {
                video_id: v.record.video_id.clone(),
                rule: format!(
                    "feature widths ({}, {}) differ from ({input_dim}, {region_dim})",
                    v.input_dim(),
                    v.region_dim()
                ),
            });
        }
        videos.push(v);
    }
    Ok(videos)
}

/// Event network plus caption head for one caption kind.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    /// Fully resolved: feature widths and vocabulary size are set.
    pub config: ModelConfig,
    pub network: EventNetwork,
    pub head: CaptionHead,
}

fn resolved(key: &str, v: Option<usize>) -> Result<usize> {
    v.filter(|&x| x > 0).ok_or_else(|| GebcError::Config {
        key: format!("model.{key}"),
        message: "must be set to a positive value before building a model".into(),
    })
}

impl CaptionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let input_dim = resolved("input_dim", config.input_dim)?;
        let region_dim = resolved("region_dim", config.region_dim)?;
        let vocab_size = resolved("vocab_size", config.vocab_size)?;
        let network = EventNetwork::new(&config, input_dim, region_dim);
        let head = CaptionHead::new(
            config.hidden_dim,
            config.attention_heads,
            config.sampling_points,
            vocab_size,
            config.max_caption_len,
        );
        Ok(CaptionModel { config, network, head })
    }

    /// Fresh parameters drawn from `ChaCha8Rng::seed_from_u64(config.seed)`.
    pub fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut ps = ParamSet::new();
        self.network.init(&mut ps, &mut rng);
        self.head.init(&mut ps, &mut rng);
        ps
    }

    pub fn events(&self, g: &mut Graph, video: &PreparedVideo, kind: CaptionKind) -> Result<NetworkOutput> {
        self.network.forward(g, video, kind)
    }

    /// Summed token NLL of the reference captions and the token count.
    pub fn xe_terms(
        &self,
        g: &mut Graph,
        video: &PreparedVideo,
        kind: CaptionKind,
        targets: &[TokenSequence],
    ) -> Result<(Var, usize)> {
        let out = self.events(g, video, kind)?;
        let (nll, count, _) = self
            .head
            .teacher_forced(g, out.events, out.encoded, &out.reference_points, targets)?;
        Ok((nll, count))
    }

    /// Greedy captions for every boundary of `video`.
    pub fn greedy(&self, params: &ParamSet, video: &PreparedVideo, kind: CaptionKind) -> Result<Vec<TokenSequence>> {
        let mut g = Graph::with_params(params);
        let out = self.events(&mut g, video, kind)?;
        self.head
            .greedy_decode(&mut g, out.events, out.encoded, &out.reference_points)
    }
}

/// Reference token sequences for `kind`, truncated for training.
pub fn training_targets(video: &PreparedVideo, kind: CaptionKind, vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    video
        .record
        .captions
        .iter()
        .map(|c| TokenSequence::for_training(vocab.encode(c.get(kind)), max_len))
        .collect()
}

/// Parameters plus everything needed to rebuild and validate the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: CaptionKind,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let owned: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(name, m)| {
                let bytes = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), vec![m.rows(), m.cols()], bytes)
            })
            .collect();
        let views: Vec<(String, TensorView)> = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| GebcError::invalid(format!("tensor {name}: {e}")))
            })
            .collect::<Result<_>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        meta.insert("kind".to_string(), self.kind.to_string());
        meta.insert("vocab".to_string(), self.vocab.to_file_string());
        meta.insert("vocab_hash".to_string(), self.vocab.hash());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        crate::io::serialize_safetensors(views, meta)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| GebcError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
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
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(corrupt("not a gebc checkpoint".into()));
        }
        let version = field("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_str(&field("config")?).map_err(|e| corrupt(format!("config: {e}")))?;
        let kind: CaptionKind = field("kind")?.parse().map_err(|e: GebcError| corrupt(e.to_string()))?;
        let vocab = Vocabulary::from_file_string(&field("vocab")?).map_err(|e| corrupt(e.to_string()))?;
        if vocab.hash() != field("vocab_hash")? {
            return Err(corrupt("vocabulary does not match its recorded hash".into()));
        }
        if config.vocab_size != Some(vocab.len()) {
            return Err(corrupt(format!(
                "config vocab_size {:?} does not match vocabulary of {} ids",
                config.vocab_size,
                vocab.len()
            )));
        }
        let epoch = field("epoch")?
            .parse()
            .map_err(|_| corrupt("epoch is not an integer".into()))?;

        let model = CaptionModel::new(config.clone()).map_err(|e| corrupt(e.to_string()))?;
        let expected = model.init_params();
        let mut params = ParamSet::new();
        for (name, like) in expected.iter() {
            let t = st
                .tensor(name)
                .map_err(|_| corrupt(format!("missing parameter `{name}`")))?;
            if t.dtype() != Dtype::F64 || t.shape() != [like.rows(), like.cols()] {
                return Err(corrupt(format!(
                    "parameter `{name}` has {:?} {:?}, expected F64 {:?}",
                    t.dtype(),
                    t.shape(),
                    like.shape()
                )));
            }
            let values: Vec<f64> = t
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name.clone(), Mat::from_vec(like.rows(), like.cols(), values)?);
        }
        if st.len() != expected.len() {
            return Err(corrupt(format!(
                "{} tensors stored, model has {} parameters",
                st.len(),
                expected.len()
            )));
        }
        if !params.is_finite() {
            return Err(corrupt("parameters contain NaN or Inf".into()));
        }
        Ok(Checkpoint {
            config,
            kind,
            vocab,
            epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GebcError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn model(&self) -> Result<CaptionModel> {
        CaptionModel::new(self.config.clone())
    }
}

/// `<kind>_epoch<e>.ckpt`
pub fn checkpoint_name(kind: CaptionKind, epoch: usize) -> String {
    format!("{kind}_epoch{epoch}.ckpt")
}
