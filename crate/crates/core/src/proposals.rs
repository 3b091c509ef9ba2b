//! Event proposals built from boundary time boxes.
//!
//! For boundary `i` the box is `(t[i−1], t[i+1])` for the subject caption,
//! `(t[i−1], t[i])` for "before" and `(t[i], t[i+1])` for "after", with the
//! video start and end standing in for the missing neighbours of the first
//! and last boundary. Boxes are normalized by the duration, mapped through an
//! inverse sigmoid, position-encoded, layer-normalized and projected.

use rand::Rng;

use crate::autograd::{Graph, ParamSet, Var};
use crate::datamodel::CaptionKind;
use crate::error::{GebcError, Result};
use crate::nn::Linear;
use crate::tensor::Mat;

pub const INVERSE_SIGMOID_EPS: f64 = 1e-5;
const ENCODING_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeBox {
    pub start: f64,
    pub end: f64,
    pub normalized: (f64, f64),
    pub logit: (f64, f64),
}

impl TimeBox {
    pub fn new(start: f64, end: f64, duration: f64) -> Result<Self> {
        if !(0.0 <= start && start < end && end <= duration) {
            return Err(GebcError::invalid(format!(
                "degenerate time box ({start}, {end}) in video of length {duration}"
            )));
        }
        let normalized = (start / duration, end / duration);
        Ok(TimeBox {
            start,
            end,
            normalized,
            logit: (
                inverse_sigmoid(normalized.0, INVERSE_SIGMOID_EPS)?,
                inverse_sigmoid(normalized.1, INVERSE_SIGMOID_EPS)?,
            ),
        })
    }

    /// Normalized box centre.
    pub fn reference_point(&self) -> f64 {
        0.5 * (self.normalized.0 + self.normalized.1)
    }

    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        start < self.end && self.start < end
    }
}

pub fn make_time_boxes(boundaries: &[f64], duration: f64, kind: CaptionKind) -> Result<Vec<TimeBox>> {
    let n = boundaries.len();
    let at = |j: isize| -> f64 {
        if j < 0 {
            0.0
        } else if j as usize >= n {
            duration
        } else {
            boundaries[j as usize]
        }
    };
    (0..n as isize)
        .map(|i| {
            let (s, e) = match kind {
                CaptionKind::Subject => (at(i - 1), at(i + 1)),
                CaptionKind::Before => (at(i - 1), at(i)),
                CaptionKind::After => (at(i), at(i + 1)),
            };
            TimeBox::new(s, e, duration)
        })
        .collect()
}

/// `log(x'/(1−x'))` with `x' = clamp(x, eps, 1−eps)`.
pub fn inverse_sigmoid(x: f64, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(GebcError::invalid(format!("inverse_sigmoid input {x} outside [0, 1]")));
    }
    let x = x.clamp(eps, 1.0 - eps);
    Ok((x / (1.0 - x)).ln())
}

/// Sinusoidal encoding of a scalar into `width` values; entry `i` uses
/// wavelength `10000^(2⌊i/2⌋/width)`, sine on even and cosine on odd slots.
pub fn sinusoid(x: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let tau = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            if i % 2 == 0 {
                (x / tau).sin()
            } else {
                (x / tau).cos()
            }
        })
        .collect()
}

/// Pre-projection proposal features: both logit coordinates encoded with
/// `dim/2` sinusoids each, concatenated, then normalized per row.
pub fn box_position_features(logit_boxes: &[(f64, f64)], dim: usize) -> Result<Mat> {
    if dim == 0 || dim % 2 != 0 {
        return Err(GebcError::invalid(format!("proposal width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Mat::zeros(logit_boxes.len(), dim);
    for (r, &(a, b)) in logit_boxes.iter().enumerate() {
        if !(a.is_finite() && b.is_finite()) {
            return Err(GebcError::NonFinite {
                context: format!("logit box {r}"),
            });
        }
        let row = out.row_mut(r);
        row[..half].copy_from_slice(&sinusoid(a, half));
        row[half..].copy_from_slice(&sinusoid(b, half));
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + ENCODING_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Learned projection of encoded boxes to the model width.
#[derive(Clone, Debug)]
pub struct ProposalEmbedder {
    pub projection: Linear,
    pub dim: usize,
}

impl ProposalEmbedder {
    pub fn new(prefix: &str, dim: usize) -> Self {
        ProposalEmbedder {
            projection: Linear::new(&format!("{prefix}.proj"), dim, dim),
            dim,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        self.projection.init(ps, rng);
    }

    pub fn forward(&self, g: &mut Graph, boxes: &[TimeBox]) -> Result<Var> {
        let logits: Vec<(f64, f64)> = boxes.iter().map(|b| b.logit).collect();
        let enc = g.input(box_position_features(&logits, self.dim)?);
        Ok(self.projection.forward(g, enc))
    }
}

/// `N` proposals for one caption kind.
#[derive(Clone, Debug)]
pub struct ProposalBatch {
    /// `N × d`
    pub embeddings: Mat,
    pub boxes: Vec<TimeBox>,
    pub reference_points: Vec<f64>,
    pub kind: CaptionKind,
}

pub fn embed_proposals(
    boxes: Vec<TimeBox>,
    kind: CaptionKind,
    embedder: &ProposalEmbedder,
    params: &ParamSet,
) -> Result<ProposalBatch> {
    let mut g = Graph::with_params(params);
    let e = embedder.forward(&mut g, &boxes)?;
    Ok(ProposalBatch {
        embeddings: g.value(e).clone(),
        reference_points: boxes.iter().map(TimeBox::reference_point).collect(),
        boxes,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spans(boxes: &[TimeBox]) -> Vec<(f64, f64)> {
        boxes.iter().map(|b| (b.start, b.end)).collect()
    }

    #[test]
    fn boxes_per_kind() {
        let b = [2.0, 4.0, 6.0];
        let sub = make_time_boxes(&b, 8.0, CaptionKind::Subject).unwrap();
        assert_eq!(spans(&sub), vec![(0.0, 4.0), (2.0, 6.0), (4.0, 8.0)]);
        let bef = make_time_boxes(&b, 8.0, CaptionKind::Before).unwrap();
        assert_eq!(spans(&bef), vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)]);
        let aft = make_time_boxes(&[5.0], 10.0, CaptionKind::After).unwrap();
        assert_eq!(spans(&aft), vec![(5.0, 10.0)]);
    }

    #[test]
    fn inverse_sigmoid_values() {
        assert_eq!(inverse_sigmoid(0.5, INVERSE_SIGMOID_EPS).unwrap(), 0.0);
        let low = inverse_sigmoid(0.0, 1e-5).unwrap();
        assert!((low - (1e-5f64 / (1.0 - 1e-5)).ln()).abs() < 1e-15);
        assert!((low + 11.5129).abs() < 1e-4);
        assert!(inverse_sigmoid(1.2, 1e-5).is_err());
        assert!(inverse_sigmoid(-0.01, 1e-5).is_err());
    }

    #[test]
    fn encoding_is_normalized() {
        let boxes = make_time_boxes(&[1.0, 3.5, 7.0], 9.0, CaptionKind::Subject).unwrap();
        let logits: Vec<_> = boxes.iter().map(|b| b.logit).collect();
        let enc = box_position_features(&logits, 16).unwrap();
        for r in 0..enc.rows() {
            let row = enc.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
        }
        assert!(box_position_features(&logits, 15).is_err());
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let emb = ProposalEmbedder::new("proposal", 512);
        let mut ps = ParamSet::new();
        emb.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(3));
        let boxes = make_time_boxes(&[2.0, 2.0 + 1e-9, 6.0], 8.0, CaptionKind::After).unwrap();
        let batch = embed_proposals(boxes, CaptionKind::After, &emb, &ps).unwrap();
        assert_eq!(batch.embeddings.shape(), (3, 512));

        let same = vec![TimeBox::new(1.0, 3.0, 8.0).unwrap(); 2];
        let batch = embed_proposals(same, CaptionKind::Before, &emb, &ps).unwrap();
        assert_eq!(batch.embeddings.row(0), batch.embeddings.row(1));
        assert_eq!(batch.reference_points, vec![0.25, 0.25]);
    }

    proptest! {
        #[test]
        fn round_trip_through_sigmoid(x in INVERSE_SIGMOID_EPS..(1.0 - INVERSE_SIGMOID_EPS)) {
            let y = inverse_sigmoid(x, INVERSE_SIGMOID_EPS).unwrap();
            prop_assert!((sigmoid(y) - x).abs() < 1e-9);
        }

        #[test]
        fn box_containment(mut gaps in proptest::collection::vec(0.1f64..5.0, 2..8)) {
            let tail = gaps.pop().unwrap();
            let mut t = 0.0;
            let boundaries: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
            let duration = t + tail;
            let sub = make_time_boxes(&boundaries, duration, CaptionKind::Subject).unwrap();
            let bef = make_time_boxes(&boundaries, duration, CaptionKind::Before).unwrap();
            let aft = make_time_boxes(&boundaries, duration, CaptionKind::After).unwrap();
            for (i, &ti) in boundaries.iter().enumerate() {
                prop_assert!(sub[i].start < ti && ti < sub[i].end);
                prop_assert_eq!(bef[i].end, ti);
                prop_assert_eq!(aft[i].start, ti);
                let rp = sub[i].reference_point();
                prop_assert!((rp - (sub[i].normalized.0 + sub[i].normalized.1) / 2.0).abs() < 1e-15);
            }
        }

        #[test]
        fn boxes_shift_with_boundaries(shift in 0.0f64..10.0) {
            // Shifting boundaries and both virtual endpoints by the same amount
            // shifts every interior box endpoint by that amount.
            let b = [2.0, 4.0, 6.0];
            let base = make_time_boxes(&b, 8.0, CaptionKind::Subject).unwrap();
            let shifted: Vec<f64> = b.iter().map(|t| t + shift).collect();
            let moved = make_time_boxes(&shifted, 8.0 + shift, CaptionKind::Subject).unwrap();
            for (x, y) in base.iter().zip(&moved).skip(1) {
                prop_assert!((y.start - x.start - shift).abs() < 1e-12);
            }
            for (x, y) in base.iter().zip(&moved) {
                prop_assert!((y.end - x.end - shift).abs() < 1e-12);
            }
        }
    }
}
