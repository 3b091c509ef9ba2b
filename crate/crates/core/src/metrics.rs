//! Caption metrics: CIDEr-D and ROUGE-L, plus per-kind aggregation.
//!
//! CIDEr-D follows the usual consensus definition: n-gram counts for
//! `n = 1..=4` are weighted by `log(|corpus|) − log(max(1, df))`, candidate
//! weights are clipped to the reference weights, each order contributes a
//! cosine similarity times a Gaussian length penalty, and the score is
//! `10 ·` the mean over orders and references. Document frequencies count
//! reference *sets*, one per scored item.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::caption::tokenize;
use crate::datamodel::{CaptionKind, VideoRecord};
use crate::error::{GebcError, Result};

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

pub type NGram = Vec<String>;

/// N-gram counts of one sentence, per order.
pub fn ngram_counts(tokens: &[String], n_max: usize) -> Vec<BTreeMap<NGram, usize>> {
    (1..=n_max)
        .map(|n| {
            let mut counts = BTreeMap::new();
            if tokens.len() >= n {
                for w in tokens.windows(n) {
                    *counts.entry(w.to_vec()).or_insert(0) += 1;
                }
            }
            counts
        })
        .collect()
}

/// Document frequencies over a reference corpus.
#[derive(Clone, Debug)]
pub struct NGramStats {
    pub n_max: usize,
    pub document_frequency: BTreeMap<NGram, usize>,
    pub corpus_size: usize,
}

impl NGramStats {
    /// `reference_sets[i]` holds all references for item `i`.
    pub fn from_references(reference_sets: &[Vec<Vec<String>>], n_max: usize) -> Self {
        let mut document_frequency = BTreeMap::new();
        for refs in reference_sets {
            let mut seen: BTreeSet<NGram> = BTreeSet::new();
            for r in refs {
                for order in ngram_counts(r, n_max) {
                    seen.extend(order.into_keys());
                }
            }
            for g in seen {
                *document_frequency.entry(g).or_insert(0) += 1;
            }
        }
        NGramStats {
            n_max,
            document_frequency,
            corpus_size: reference_sets.len(),
        }
    }

    fn idf(&self, gram: &NGram) -> f64 {
        let df = self.document_frequency.get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.corpus_size.max(1) as f64).ln() - df.ln()
    }
}

struct TfIdf {
    vec: Vec<BTreeMap<NGram, f64>>,
    norm: Vec<f64>,
    len: usize,
}

fn tfidf(tokens: &[String], stats: &NGramStats) -> TfIdf {
    let mut vec = Vec::with_capacity(stats.n_max);
    let mut norm = Vec::with_capacity(stats.n_max);
    for order in ngram_counts(tokens, stats.n_max) {
        let weighted: BTreeMap<NGram, f64> = order
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * stats.idf(&g);
                (g, w)
            })
            .collect();
        norm.push(weighted.values().map(|w| w * w).sum::<f64>().sqrt());
        vec.push(weighted);
    }
    TfIdf {
        vec,
        norm,
        len: tokens.len(),
    }
}

/// CIDEr-D of one tokenized candidate against its references, in `[0, 10]`.
pub fn cider_d(candidate: &[String], references: &[Vec<String>], stats: &NGramStats, sigma: f64) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(candidate, stats);
    let mut total = 0.0;
    for r in references {
        let rf = tfidf(r, stats);
        let delta = hyp.len as f64 - rf.len as f64;
        let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        let mut per_order = 0.0;
        for n in 0..stats.n_max {
            let mut dot = 0.0;
            for (g, &w) in &hyp.vec[n] {
                if let Some(&wr) = rf.vec[n].get(g) {
                    dot += w.min(wr) * wr;
                }
            }
            if hyp.norm[n] != 0.0 && rf.norm[n] != 0.0 {
                dot /= hyp.norm[n] * rf.norm[n];
            }
            per_order += dot * penalty;
        }
        total += per_order / stats.n_max as f64;
    }
    10.0 * total / references.len() as f64
}

/// Scorer bound to the reference corpus it computes IDF from.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    pub stats: NGramStats,
    pub sigma: f64,
}

impl CiderScorer {
    pub fn new(reference_sets: &[Vec<Vec<String>>]) -> Self {
        CiderScorer {
            stats: NGramStats::from_references(reference_sets, CIDER_N),
            sigma: CIDER_SIGMA,
        }
    }

    pub fn from_texts(reference_sets: &[Vec<String>]) -> Self {
        let tokenized: Vec<Vec<Vec<String>>> = reference_sets
            .iter()
            .map(|refs| refs.iter().map(|r| tokenize(r)).collect())
            .collect();
        Self::new(&tokenized)
    }

    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        cider_d(candidate, references, &self.stats, self.sigma)
    }
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, maximized over references, in `[0, 1]`.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>], beta: f64) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            let b2 = beta * beta;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindScores {
    pub cider: f64,
    pub rouge_l: f64,
}

/// Per-kind mean scores and, when all three kinds are present, their average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub kinds: BTreeMap<CaptionKind, KindScores>,
    pub average: Option<KindScores>,
    /// Multiplier applied to every number in the report.
    pub scale: f64,
}

impl ScoreReport {
    pub fn scaled(&self, scale: f64) -> ScoreReport {
        let f = scale / self.scale;
        let s = |k: &KindScores| KindScores {
            cider: k.cider * f,
            rouge_l: k.rouge_l * f,
        };
        ScoreReport {
            kinds: self.kinds.iter().map(|(k, v)| (*k, s(v))).collect(),
            average: self.average.as_ref().map(s),
            scale,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("metric    average   subject    before     after\n");
        let cell = |k: Option<&KindScores>, pick: fn(&KindScores) -> f64| {
            k.map_or_else(|| format!("{:>10}", "-"), |s| format!("{:>10.2}", pick(s)))
        };
        for (name, pick) in [
            ("CIDEr", (|k: &KindScores| k.cider) as fn(&KindScores) -> f64),
            ("ROUGE_L", |k: &KindScores| k.rouge_l),
        ] {
            out.push_str(&format!("{name:<8}"));
            out.push_str(&cell(self.average.as_ref(), pick));
            for kind in CaptionKind::ALL {
                out.push_str(&cell(self.kinds.get(&kind), pick));
            }
            out.push('\n');
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean per kind, then the plain mean of the three kind means.
pub fn aggregate(per_kind: &BTreeMap<CaptionKind, (Vec<f64>, Vec<f64>)>) -> Result<ScoreReport> {
    let mut kinds = BTreeMap::new();
    for kind in CaptionKind::ALL {
        let (cider, rouge) = per_kind
            .get(&kind)
            .filter(|(c, r)| !c.is_empty() && !r.is_empty())
            .ok_or_else(|| GebcError::invalid(format!("no scores for caption kind `{kind}`")))?;
        kinds.insert(
            kind,
            KindScores {
                cider: mean(cider),
                rouge_l: mean(rouge),
            },
        );
    }
    let average = average_of(&kinds);
    Ok(ScoreReport {
        kinds,
        average,
        scale: 1.0,
    })
}

fn average_of(kinds: &BTreeMap<CaptionKind, KindScores>) -> Option<KindScores> {
    if kinds.len() != CaptionKind::ALL.len() {
        return None;
    }
    Some(KindScores {
        cider: kinds.values().map(|k| k.cider).sum::<f64>() / 3.0,
        rouge_l: kinds.values().map(|k| k.rouge_l).sum::<f64>() / 3.0,
    })
}

/// One generated caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: String,
    pub boundary_index: usize,
    pub kind: CaptionKind,
    pub caption: String,
}

pub fn parse_predictions(text: &str, context: &str) -> Result<Vec<Prediction>> {
    serde_json::from_str(text).map_err(|e| GebcError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| GebcError::io(path, e))?;
    parse_predictions(&text, &path.display().to_string())
}

pub fn predictions_to_json(preds: &[Prediction]) -> String {
    let mut s = serde_json::to_string_pretty(preds).expect("predictions serialize");
    s.push('\n');
    s
}

/// Scores predictions against annotations. IDF comes from the references of
/// the evaluated kind. Every predicted boundary must exist and every
/// annotated boundary of a predicted kind must be predicted exactly once.
pub fn score_predictions(
    predictions: &[Prediction],
    records: &[VideoRecord],
    kind_filter: Option<CaptionKind>,
) -> Result<ScoreReport> {
    if predictions.is_empty() {
        return Err(GebcError::invalid("prediction list is empty"));
    }
    let by_id: HashMap<&str, &VideoRecord> = records.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut grouped: BTreeMap<CaptionKind, BTreeMap<(String, usize), &str>> = BTreeMap::new();
    let mut offenders = Vec::new();
    for p in predictions {
        if kind_filter.is_some_and(|k| k != p.kind) {
            continue;
        }
        let known = by_id
            .get(p.video_id.as_str())
            .is_some_and(|r| p.boundary_index < r.num_boundaries());
        if !known {
            offenders.push(format!("{}#{} ({}): not in annotations", p.video_id, p.boundary_index, p.kind));
            continue;
        }
        let slot = grouped.entry(p.kind).or_default();
        if slot
            .insert((p.video_id.clone(), p.boundary_index), p.caption.as_str())
            .is_some()
        {
            offenders.push(format!("{}#{} ({}): duplicate prediction", p.video_id, p.boundary_index, p.kind));
        }
    }
    for (kind, preds) in &grouped {
        for r in records {
            for i in 0..r.num_boundaries() {
                if !preds.contains_key(&(r.video_id.clone(), i)) {
                    offenders.push(format!("{}#{i} ({kind}): missing prediction", r.video_id));
                }
            }
        }
    }
    if !offenders.is_empty() {
        return Err(GebcError::Unmatched(offenders.join("; ")));
    }
    if grouped.is_empty() {
        return Err(GebcError::invalid("no predictions match the requested kind"));
    }

    let mut kinds = BTreeMap::new();
    for (kind, preds) in &grouped {
        let refs: Vec<Vec<Vec<String>>> = records
            .iter()
            .flat_map(|r| r.captions.iter().map(|c| vec![tokenize(c.get(*kind))]))
            .collect();
        let scorer = CiderScorer::new(&refs);
        let mut cider = Vec::with_capacity(refs.len());
        let mut rouge = Vec::with_capacity(refs.len());
        let mut idx = 0;
        for r in records {
            for i in 0..r.num_boundaries() {
                let cand = tokenize(preds[&(r.video_id.clone(), i)]);
                cider.push(scorer.score(&cand, &refs[idx]));
                rouge.push(rouge_l(&cand, &refs[idx], ROUGE_BETA));
                idx += 1;
            }
        }
        kinds.insert(
            *kind,
            KindScores {
                cider: mean(&cider),
                rouge_l: mean(&rouge),
            },
        );
    }
    let average = average_of(&kinds);
    Ok(ScoreReport {
        kinds,
        average,
        scale: 1.0,
    })
}
