//! Versioned CSV and JSON reports.
//!
//! Every CSV file starts with two comment lines, `# schema: <name>` and
//! `# config: <json>`, followed by a header row. Floats are written in
//! shortest round-trip form, so parsing a value gives back the same bits.
//! Absent values are empty cells.

use std::fs;
use std::path::Path;

use nexp_core::analysis::MapComparison;
use nexp_core::coupling::FilterId;
use nexp_core::prune::PruneRun;
use nexp_core::scoring::{ScoreKind, ScoreMap};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::{Error, Result};

pub const SCORES_SCHEMA: &str = "nexp.scores.v1";
pub const TRAJECTORY_SCHEMA: &str = "nexp.trajectory.v1";
pub const HYBRID_SWEEP_SCHEMA: &str = "nexp.hybrid_sweep.v1";
pub const PAI_SWEEP_SCHEMA: &str = "nexp.pai_sweep.v1";
pub const SIMILARITY_SCHEMA: &str = "nexp.similarity.v1";
pub const TRAIN_LOG_SCHEMA: &str = "nexp.train_log.v1";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes a CSV with the schema and config comment lines.
pub fn write_csv(
    path: &Path,
    schema: &str,
    config: &serde_json::Value,
    extra: &[(&str, String)],
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = format!("# schema: {schema}\n# config: {config}\n");
    for (k, v) in extra {
        out += &format!("# {k}: {v}\n");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(path, out).map_err(Error::io(path))
}

/// A parsed CSV report: the comment lines by key, the header and the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvReport {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    }
}

pub fn read_csv(path: &Path) -> Result<CsvReport> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l[1..].trim().split_once(": "))
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .collect();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(CsvReport { meta, header, rows })
}

#[derive(Serialize, Deserialize)]
struct MapMeta {
    kind: ScoreKind,
    samples: usize,
}

pub fn write_score_csv(path: &Path, map: &ScoreMap, config: &serde_json::Value) -> Result<()> {
    let meta = serde_json::to_string(&MapMeta { kind: map.kind, samples: map.samples })
        .map_err(Error::json(path))?;
    let rows: Vec<Vec<String>> = map
        .entries()
        .map(|e| {
            vec![e.layer.to_string(), e.filter.to_string(), e.score.to_string(), map.provenance.clone()]
        })
        .collect();
    write_csv(path, SCORES_SCHEMA, config, &[("map", meta)], &["layer", "filter", "score", "provenance"], &rows)
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

pub fn read_score_csv(path: &Path) -> Result<ScoreMap> {
    let rep = read_csv(path)?;
    if rep.meta("schema") != Some(SCORES_SCHEMA) {
        return Err(Error::Format(format!("{}: not a score map", path.display())));
    }
    let meta: MapMeta = serde_json::from_str(rep.meta("map").unwrap_or_default())
        .map_err(Error::json(path))?;
    let (l, f, s, p) = (rep.column("layer")?, rep.column("filter")?, rep.column("score")?, rep.column("provenance")?);
    let mut map = ScoreMap::new(meta.kind, "", meta.samples);
    for row in &rep.rows {
        let id = FilterId::new(parse(&row[l], "layer")?, parse(&row[f], "filter")?);
        map.scores.insert(id, parse(&row[s], "score")?);
        map.provenance.clone_from(&row[p]);
    }
    Ok(map)
}

/// Reads a score map from `.json` or `.csv`, chosen by extension.
pub fn read_score_map(path: &Path) -> Result<ScoreMap> {
    if path.extension().is_some_and(|e| e == "csv") {
        return read_score_csv(path);
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(path))?;
    let map = v.get("map").cloned().unwrap_or(v);
    serde_json::from_value(map).map_err(Error::json(path))
}

/// JSON score map with the resolved config alongside.
pub fn write_score_json(path: &Path, map: &ScoreMap, config: &serde_json::Value) -> Result<()> {
    write_json(path, &serde_json::json!({ "schema": SCORES_SCHEMA, "config": config, "map": map }))
}

/// Step 0 is the unpruned network; `baseline` is its accuracy, if known.
pub fn write_trajectory_csv(
    path: &Path,
    run: &PruneRun,
    baseline: Option<f64>,
    config: &serde_json::Value,
) -> Result<()> {
    let mut rows = vec![vec!["0".into(), "1".into(), "1".into(), "100".into(), "100".into(), opt(baseline)]];
    for s in &run.steps {
        let r = &s.report;
        rows.push(vec![
            s.step.to_string(),
            r.ratio_flops.to_string(),
            r.ratio_params.to_string(),
            r.msp.to_string(),
            r.psp.to_string(),
            opt(s.accuracy),
        ]);
    }
    let shortfall = match &run.shortfall {
        Some(s) => serde_json::to_string(s).map_err(Error::json(path))?,
        None => "none".into(),
    };
    write_csv(
        path,
        TRAJECTORY_SCHEMA,
        config,
        &[("shortfall", shortfall)],
        &["step", "ratio_flops", "ratio_params", "msp", "psp", "accuracy"],
        &rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub tau: f64,
    pub alpha: f64,
    pub ratio_params: Option<f64>,
    pub ratio_flops: Option<f64>,
    pub accuracy: Option<f64>,
    pub delta_accuracy: Option<f64>,
    /// `ok`, `shortfall` or `failed: <reason>`.
    pub status: String,
}

pub fn write_hybrid_sweep_csv(
    path: &Path,
    cells: &[SweepCell],
    config: &serde_json::Value,
    extra: &[(&str, String)],
) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.tau.to_string(),
                c.alpha.to_string(),
                opt(c.ratio_params),
                opt(c.ratio_flops),
                opt(c.accuracy),
                opt(c.delta_accuracy),
                c.status.clone(),
            ]
        })
        .collect();
    write_csv(
        path,
        HYBRID_SWEEP_SCHEMA,
        config,
        extra,
        &["tau", "alpha", "ratio_params", "ratio_flops", "accuracy", "delta_accuracy", "status"],
        &rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaiCell {
    pub exponent: f64,
    pub target_ratio: f64,
    pub ratio_params: f64,
    pub ratio_flops: f64,
    pub accuracy: Option<f64>,
    /// Narrowest conv after pruning.
    pub min_width: usize,
    pub status: String,
}

pub fn write_pai_csv(path: &Path, cells: &[PaiCell], config: &serde_json::Value) -> Result<()> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.exponent.to_string(),
                c.target_ratio.to_string(),
                c.ratio_params.to_string(),
                c.ratio_flops.to_string(),
                opt(c.accuracy),
                c.min_width.to_string(),
                c.status.clone(),
            ]
        })
        .collect();
    write_csv(
        path,
        PAI_SWEEP_SCHEMA,
        config,
        &[],
        &["r", "target_ratio", "ratio_params", "ratio_flops", "accuracy", "min_width", "status"],
        &rows,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub comparison: String,
    pub metric: String,
    pub scope: String,
    pub value: Option<f64>,
}

pub fn similarity_rows(comparison: &str, scope: &str, m: &MapComparison) -> Vec<SimilarityRow> {
    [
        ("euclidean", Some(m.euclidean)),
        ("cosine", m.cosine),
        ("pearson", m.pearson),
        ("ssim", Some(m.ssim)),
    ]
    .into_iter()
    .map(|(metric, value)| SimilarityRow {
        comparison: comparison.into(),
        metric: metric.into(),
        scope: scope.into(),
        value,
    })
    .collect()
}

pub fn write_similarity_csv(path: &Path, rows: &[SimilarityRow], config: &serde_json::Value) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.comparison.clone(), r.metric.clone(), r.scope.clone(), opt(r.value)])
        .collect();
    write_csv(path, SIMILARITY_SCHEMA, config, &[], &["comparison", "metric", "scope", "value"], &rows)
}

pub fn write_train_log_csv(
    path: &Path,
    log: &nexp_core::train::TrainLog,
    config: &serde_json::Value,
) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .loss
        .iter()
        .zip(&log.accuracy)
        .enumerate()
        .map(|(e, (l, a))| vec![(e + 1).to_string(), l.to_string(), a.to_string()])
        .collect();
    write_csv(path, TRAIN_LOG_SCHEMA, config, &[], &["epoch", "loss", "train_accuracy"], &rows)
}
