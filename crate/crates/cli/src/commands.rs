use std::path::{Path, PathBuf};

use gebc::datamodel::{load_annotations, CaptionKind};
use gebc::metrics::{load_predictions, predictions_to_json, score_predictions};
use gebc::caption::Vocabulary;
use gebc::io::write_atomic;
use gebc::model::{load_dataset, Checkpoint};
use gebc::synthetic::{generate, SyntheticSpec};
use gebc::training::{predict_captions, train, VOCAB_FILE};
use gebc::{GebcError, Result};

use crate::config::RunConfig;

/// Value of `GEBC_NUM_WORKERS`, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var("GEBC_NUM_WORKERS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(GebcError::Config {
                key: "GEBC_NUM_WORKERS".into(),
                message: format!("expected a positive integer, got `{v}`"),
            }),
        },
    }
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| GebcError::invalid(format!("thread pool: {e}")))
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

pub fn cmd_generate(spec_path: &Path, out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticSpec::load(spec_path).map_err(|e| match e {
        GebcError::Io { path, source } => GebcError::Config {
            key: path.display().to_string(),
            message: format!("cannot read spec: {source}"),
        },
        GebcError::Parse { context, message } => GebcError::Config { key: context, message },
        other => other,
    })?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if dir_is_nonempty(out) && !force {
        return Err(GebcError::Config {
            key: "--out".into(),
            message: format!("{} exists and is not empty; pass --force to overwrite", out.display()),
        });
    }
    let ds = generate(&spec, out)?;
    let boundaries: usize = ds.records.iter().map(|r| r.num_boundaries()).sum();
    eprintln!(
        "wrote {} videos ({boundaries} boundaries) to {}",
        ds.records.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    data: &Path,
    kind: CaptionKind,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let workers = workers_from_env()?;
    eprintln!("effective config ({}):\n{}", cfg.summary(), cfg.to_toml());
    let mut model_cfg = cfg.model.clone();
    let videos = load_dataset(data, &mut model_cfg)?;
    eprintln!("training {kind} model on {} videos", videos.len());
    std::fs::create_dir_all(out).map_err(|e| GebcError::io(out, e))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let outcome = train(model_cfg, cfg.train.clone(), videos, kind, out, workers)?;
    for e in &outcome.epochs {
        eprintln!(
            "epoch {} ({:?}) mean loss {:.6} lr {:.3e}{}",
            e.epoch,
            e.phase,
            e.mean_loss,
            e.lr,
            if e.clipped_steps > 0 {
                format!(" ({} clipped steps)", e.clipped_steps)
            } else {
                String::new()
            }
        );
    }
    if let Some(last) = outcome.checkpoints.last() {
        eprintln!("last checkpoint: {}", last.display());
    }
    Ok(())
}

pub fn cmd_predict(ckpt: &Path, data: &Path, kind: CaptionKind, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.kind != kind {
        return Err(GebcError::Config {
            key: "--kind".into(),
            message: format!("checkpoint {} was trained for `{}`, not `{kind}`", ckpt.display(), ck.kind),
        });
    }
    let vocab_path = ckpt.with_file_name(VOCAB_FILE);
    if vocab_path.exists() {
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| GebcError::io(&vocab_path, e))?;
        let vocab = Vocabulary::from_file_string(&text)?;
        if vocab.hash() != ck.vocab.hash() {
            return Err(GebcError::Config {
                key: vocab_path.display().to_string(),
                message: "vocabulary does not match the checkpoint's vocabulary hash".into(),
            });
        }
    }
    let model = ck.model()?;
    let mut cfg = ck.config.clone();
    let videos = load_dataset(data, &mut cfg)?;
    if cfg != ck.config {
        return Err(GebcError::Config {
            key: "model".into(),
            message: "dataset feature widths do not match the checkpoint".into(),
        });
    }
    let pool = pool(workers_from_env()?)?;
    let preds = pool.install(|| predict_captions(&model, &ck.params, &ck.vocab, &videos, kind))?;
    write_atomic(out, predictions_to_json(&preds).as_bytes())?;
    eprintln!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

pub fn default_report_path(pred: &Path) -> PathBuf {
    let stem = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    pred.with_file_name(format!("{stem}.scores.json"))
}

pub fn cmd_evaluate(
    pred: &Path,
    ann: &Path,
    kind: Option<CaptionKind>,
    percent: bool,
    report: Option<&Path>,
) -> Result<()> {
    let preds = load_predictions(pred)?;
    let records = load_annotations(ann)?;
    let mut rep = score_predictions(&preds, &records, kind)?;
    if percent {
        rep = rep.scaled(100.0);
    }
    print!("{}", rep.to_table());
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| default_report_path(pred));
    let mut json = serde_json::to_string_pretty(&rep).expect("report serializes");
    json.push('\n');
    write_atomic(&path, json.as_bytes())?;
    eprintln!("report written to {}", path.display());
    Ok(())
}
