//! Transformer stack producing one feature vector per boundary.
//!
//! Frame features are projected and refined by a deformable self-attention
//! encoder. Event proposals first attend to the region tokens of the clips
//! their time box overlaps, then a context decoder lets every event attend to
//! the encoded frames (deformable cross-attention around the box centre) and
//! to every other event. All layers are pre-norm residual blocks, so zeroed
//! branch outputs make a layer the identity.

use rand::Rng;

use crate::autograd::{Graph, ParamSet, Var};
use crate::datamodel::{CaptionKind, ModelConfig};
use crate::error::{GebcError, Result};
use crate::features::{clip_spans, PreparedVideo, RegionFeatures};
use crate::nn::{DeformableAttention, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::proposals::{make_time_boxes, sinusoid, ProposalEmbedder, TimeBox};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: DeformableAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        EncoderLayer {
            attn_norm: LayerNorm::new(&format!("{prefix}.attn_norm"), d),
            attn: DeformableAttention::new(
                &format!("{prefix}.attn"),
                d,
                cfg.attention_heads,
                cfg.sampling_points,
            ),
            ffn_norm: LayerNorm::new(&format!("{prefix}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_dim),
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.attn_norm.init(ps);
        self.attn.init(ps, rng);
        self.ffn_norm.init(ps);
        self.ffn.init(ps, rng);
    }

    fn forward(&self, g: &mut Graph, x: Var, pos: Var, refs: &[f64]) -> Var {
        let h = self.attn_norm.forward(g, x);
        let q = g.add(h, pos);
        let a = self.attn.forward(g, q, refs, h);
        let x = g.add(x, a);
        let h = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

/// Input projection plus deformable self-attention layers over `L` frames.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    pub input_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    dim: usize,
}

impl FrameEncoder {
    fn new(cfg: &ModelConfig, input_dim: usize) -> Self {
        FrameEncoder {
            input_proj: Linear::new("encoder.input_proj", input_dim, cfg.hidden_dim),
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(&format!("encoder.layer{i}"), cfg))
                .collect(),
            dim: cfg.hidden_dim,
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.input_proj.init(ps, rng);
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    pub fn project(&self, g: &mut Graph, frames: &Mat) -> Var {
        let x = g.input(frames.clone());
        self.input_proj.forward(g, x)
    }

    /// Encodes already-projected `L × d` frame features.
    pub fn encode_frames(&self, g: &mut Graph, projected: Var) -> Var {
        let len = g.value(projected).rows();
        let refs = frame_reference_points(len);
        let mut pos = Mat::zeros(len, self.dim);
        for j in 0..len {
            pos.row_mut(j).copy_from_slice(&sinusoid(j as f64, self.dim));
        }
        let pos = g.input(pos);
        let mut x = projected;
        for layer in &self.layers {
            x = layer.forward(g, x, pos, &refs);
        }
        x
    }
}

/// Normalized own-position reference point of each frame, `j/(L−1)`.
pub fn frame_reference_points(len: usize) -> Vec<f64> {
    if len <= 1 {
        return vec![0.0; len];
    }
    (0..len).map(|j| j as f64 / (len - 1) as f64).collect()
}

#[derive(Clone, Debug)]
pub struct RegionDecoderLayer {
    pub query_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl RegionDecoderLayer {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        RegionDecoderLayer {
            query_norm: LayerNorm::new(&format!("{prefix}.query_norm"), d),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), d, cfg.attention_heads),
            ffn_norm: LayerNorm::new(&format!("{prefix}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_dim),
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.query_norm.init(ps);
        self.attn.init(ps, rng);
        self.ffn_norm.init(ps);
        self.ffn.init(ps, rng);
    }

    /// Rows whose mask row is entirely `false` are returned unchanged.
    pub fn forward(&self, g: &mut Graph, x: Var, tokens: Var, mask: &[bool]) -> Var {
        let n = g.value(x).rows();
        let width = g.value(tokens).rows();
        let has_token: Vec<bool> = (0..n)
            .map(|r| mask[r * width..(r + 1) * width].iter().any(|&m| m))
            .collect();
        if !has_token.iter().any(|&t| t) {
            return x;
        }
        let h = self.query_norm.forward(g, x);
        let (a, _) = self.attn.forward(g, h, tokens, Some(mask));
        let y = g.add(x, a);
        let h = self.ffn_norm.forward(g, y);
        let f = self.ffn.forward(g, h);
        let y = g.add(y, f);
        g.select_rows(y, x, has_token)
    }
}

/// Proposal-to-region cross-attention restricted to overlapping clips.
#[derive(Clone, Debug)]
pub struct RegionDecoder {
    pub region_proj: Linear,
    pub layers: Vec<RegionDecoderLayer>,
}

impl RegionDecoder {
    fn new(cfg: &ModelConfig, region_dim: usize) -> Self {
        RegionDecoder {
            region_proj: Linear::new("region_decoder.region_proj", region_dim, cfg.hidden_dim),
            layers: (0..cfg.region_decoder_layers)
                .map(|i| RegionDecoderLayer::new(&format!("region_decoder.layer{i}"), cfg))
                .collect(),
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.region_proj.init(ps, rng);
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    pub fn decode_regions(
        &self,
        g: &mut Graph,
        proposals: Var,
        boxes: &[TimeBox],
        regions: &RegionFeatures,
        clips: &[(f64, f64)],
    ) -> Var {
        let mask = region_attention_mask(boxes, regions, clips);
        let raw = g.input(regions.features.clone());
        let tokens = self.region_proj.forward(g, raw);
        let mut x = proposals;
        for layer in &self.layers {
            x = layer.forward(g, x, tokens, &mask);
        }
        x
    }
}

/// `N × ((N+1)·N_o)` mask: a token is visible to a proposal when it is a real
/// (non-padding) detection and its clip overlaps the proposal's box.
pub fn region_attention_mask(boxes: &[TimeBox], regions: &RegionFeatures, clips: &[(f64, f64)]) -> Vec<bool> {
    let width = regions.num_tokens();
    let mut mask = vec![false; boxes.len() * width];
    for (r, b) in boxes.iter().enumerate() {
        for t in 0..width {
            let (s, e) = clips[regions.clip_of_token(t)];
            mask[r * width + t] = regions.valid_mask[t] && b.overlaps(s, e);
        }
    }
    mask
}

#[derive(Clone, Debug)]
pub struct ContextDecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: DeformableAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl ContextDecoderLayer {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        ContextDecoderLayer {
            self_norm: LayerNorm::new(&format!("{prefix}.self_norm"), d),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), d, cfg.attention_heads),
            cross_norm: LayerNorm::new(&format!("{prefix}.cross_norm"), d),
            cross_attn: DeformableAttention::new(
                &format!("{prefix}.cross_attn"),
                d,
                cfg.attention_heads,
                cfg.sampling_points,
            ),
            ffn_norm: LayerNorm::new(&format!("{prefix}.ffn_norm"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_dim),
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.self_norm.init(ps);
        self.self_attn.init(ps, rng);
        self.cross_norm.init(ps);
        self.cross_attn.init(ps, rng);
        self.ffn_norm.init(ps);
        self.ffn.init(ps, rng);
    }

    fn forward(&self, g: &mut Graph, x: Var, encoded: Var, refs: &[f64]) -> Var {
        let h = self.self_norm.forward(g, x);
        let (a, _) = self.self_attn.forward(g, h, h, None);
        let x = g.add(x, a);
        let h = self.cross_norm.forward(g, x);
        let c = self.cross_attn.forward(g, h, refs, encoded);
        let x = g.add(x, c);
        let h = self.ffn_norm.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct ContextDecoder {
    pub layers: Vec<ContextDecoderLayer>,
}

impl ContextDecoder {
    fn new(cfg: &ModelConfig) -> Self {
        ContextDecoder {
            layers: (0..cfg.frame_decoder_layers)
                .map(|i| ContextDecoderLayer::new(&format!("context_decoder.layer{i}"), cfg))
                .collect(),
        }
    }

    fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(ps, rng);
        }
    }

    pub fn decode_context(&self, g: &mut Graph, events: Var, encoded: Var, refs: &[f64]) -> Var {
        let mut x = events;
        for layer in &self.layers {
            x = layer.forward(g, x, encoded, refs);
        }
        x
    }
}

/// Which stage produced a set of event embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    RegionDecoder,
    ContextDecoder,
}

/// Result of [`EventNetwork::forward`].
pub struct NetworkOutput {
    /// `N × d`, row `i` for boundary `i`.
    pub events: Var,
    pub source: EmbeddingSource,
    /// `L × d`
    pub encoded: Var,
    pub boxes: Vec<TimeBox>,
    pub reference_points: Vec<f64>,
}

/// Encoder, proposal embedding and both decoders.
#[derive(Clone, Debug)]
pub struct EventNetwork {
    pub encoder: FrameEncoder,
    pub proposals: ProposalEmbedder,
    pub region_decoder: RegionDecoder,
    pub context_decoder: ContextDecoder,
    pub hidden_dim: usize,
}

impl EventNetwork {
    pub fn new(cfg: &ModelConfig, input_dim: usize, region_dim: usize) -> Self {
        EventNetwork {
            encoder: FrameEncoder::new(cfg, input_dim),
            proposals: ProposalEmbedder::new("proposal", cfg.hidden_dim),
            region_decoder: RegionDecoder::new(cfg, region_dim),
            context_decoder: ContextDecoder::new(cfg),
            hidden_dim: cfg.hidden_dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.encoder.init(ps, rng);
        self.proposals.init(ps, rng);
        self.region_decoder.init(ps, rng);
        self.context_decoder.init(ps, rng);
    }

    /// Encodes the video once and decodes every boundary in parallel.
    pub fn forward(&self, g: &mut Graph, video: &PreparedVideo, kind: CaptionKind) -> Result<NetworkOutput> {
        let rec = &video.record;
        let projected = self.encoder.project(g, &video.frames.resized);
        let encoded = self.encoder.encode_frames(g, projected);
        self.decode(g, encoded, &rec.boundaries, rec.duration, &video.regions, kind)
    }

    /// Everything after frame encoding, for a given boundary layout.
    pub fn decode(
        &self,
        g: &mut Graph,
        encoded: Var,
        boundaries: &[f64],
        duration: f64,
        regions: &RegionFeatures,
        kind: CaptionKind,
    ) -> Result<NetworkOutput> {
        let boxes = make_time_boxes(boundaries, duration, kind)?;
        let refs: Vec<f64> = boxes.iter().map(TimeBox::reference_point).collect();
        let clips = clip_spans(boundaries, duration);
        if regions.num_clips() != clips.len() {
            return Err(GebcError::shape(format!(
                "{} region clips for {} boundaries",
                regions.num_clips(),
                boundaries.len()
            )));
        }
        let proposals = self.proposals.forward(g, &boxes)?;
        let region_out = self
            .region_decoder
            .decode_regions(g, proposals, &boxes, regions, &clips);
        let events = self.context_decoder.decode_context(g, region_out, encoded, &refs);
        if !g.value(events).is_finite() {
            return Err(GebcError::NonFinite {
                context: "event embeddings".into(),
            });
        }
        Ok(NetworkOutput {
            events,
            source: EmbeddingSource::ContextDecoder,
            encoded,
            boxes,
            reference_points: refs,
        })
    }
}
