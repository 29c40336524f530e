//! Run analysis: layer-weight distributions of a checkpoint and the
//! direction-normalized Spearman correlation matrix between task scores.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::TensorData;
use crate::error::{Error, Result};
use crate::upstream::softmax_weights;

// --- rank correlation -----------------------------------------------------------

/// 1-based ranks with average ranks for ties.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation with average ranks for ties. Tie-free inputs
/// use the exact 1 - 6*sum(d^2)/(n(n^2-1)) form.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Analysis("spearman needs equal-length lists".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Analysis(format!("spearman needs at least 3 points, got {n}")));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Analysis("spearman input is constant (all ranks tied)".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let tie_free = |r: &[f64]| r.iter().all(|&v| v.fract() == 0.0 || (v * 2.0).fract() == 0.0);
    let no_ties = {
        let mut sx = rx.clone();
        sx.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sy = ry.clone();
        sy.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sx.windows(2).all(|w| w[0] != w[1]) && sy.windows(2).all(|w| w[0] != w[1])
    };
    let _ = tie_free;
    if no_ties {
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        Ok(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)))
    } else {
        pearson(&rx, &ry)
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx <= 0.0 || dy <= 0.0 {
        return Err(Error::Analysis("pearson over constant ranks".into()));
    }
    Ok(num / (dx.sqrt() * dy.sqrt()))
}

// --- score tables ------------------------------------------------------------------

/// One scored column: a task/metric pair over all models.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreColumn {
    pub task: String,
    pub metric: String,
    pub higher_is_better: bool,
    pub values: Vec<f64>,
}

impl ScoreColumn {
    pub fn label(&self) -> String {
        format!("{}:{}", self.task, self.metric)
    }
}

/// Rows = models, columns = (task, metric, direction).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskScoreTable {
    pub models: Vec<String>,
    pub columns: Vec<ScoreColumn>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    model: String,
    task: String,
    metric: String,
    value: f64,
    higher_is_better: bool,
}

impl TaskScoreTable {
    /// Reads the scores.csv schema: model, task, metric, value,
    /// higher_is_better. Every model must score every (task, metric) pair.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::Analysis(format!("{}: {e}", path.display())))?;
        let mut cells: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
        let mut directions: BTreeMap<(String, String), bool> = BTreeMap::new();
        let mut models: Vec<String> = Vec::new();
        for row in rdr.deserialize() {
            let row: CsvRow = row.map_err(|e| Error::Analysis(format!("csv: {e}")))?;
            if !models.contains(&row.model) {
                models.push(row.model.clone());
            }
            let key = (row.task.clone(), row.metric.clone());
            if let Some(&dir) = directions.get(&key) {
                if dir != row.higher_is_better {
                    return Err(Error::Analysis(format!(
                        "column {}:{} has conflicting directions",
                        row.task, row.metric
                    )));
                }
            } else {
                directions.insert(key.clone(), row.higher_is_better);
            }
            cells.entry(key).or_default().insert(row.model, row.value);
        }
        let mut columns = Vec::new();
        for ((task, metric), by_model) in cells {
            let mut values = Vec::with_capacity(models.len());
            for m in &models {
                let v = by_model.get(m).ok_or_else(|| {
                    Error::Analysis(format!("model {m:?} missing a value for {task}:{metric}"))
                })?;
                values.push(*v);
            }
            let higher_is_better = directions[&(task.clone(), metric.clone())];
            columns.push(ScoreColumn { task, metric, higher_is_better, values });
        }
        Ok(Self { models, columns })
    }
}

/// Symmetric rank-correlation matrix between score columns.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Spearman correlations between all column pairs after converting every
/// column to higher-is-better (lower-is-better columns are negated before
/// ranking). Diagonal is exactly 1.
pub fn correlation_matrix(table: &TaskScoreTable) -> Result<CorrMatrix> {
    if table.models.len() < 3 {
        return Err(Error::Analysis(format!(
            "need at least 3 models for rank correlation, got {}",
            table.models.len()
        )));
    }
    for col in &table.columns {
        if col.values.len() != table.models.len() {
            return Err(Error::Analysis(format!("column {} is ragged", col.label())));
        }
    }
    let normalized: Vec<Vec<f64>> = table
        .columns
        .iter()
        .map(|c| {
            if c.higher_is_better {
                c.values.clone()
            } else {
                c.values.iter().map(|&v| -v).collect()
            }
        })
        .collect();
    let k = table.columns.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let rho = spearman(&normalized[i], &normalized[j])?;
            values[i][j] = rho;
            values[j][i] = rho;
        }
    }
    Ok(CorrMatrix { labels: table.columns.iter().map(|c| c.label()).collect(), values })
}

// --- layer weight export --------------------------------------------------------------

/// A named softmax-normalized layer-weight distribution.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightStream {
    pub stream: String,
    pub weights: Vec<f64>,
}

const STREAMS: [(&str, &str); 3] = [
    ("extractor", "encoder.layer_weights.extractor"),
    ("spkenc_key", "encoder.mhfa.layer_weights.key"),
    ("spkenc_value", "encoder.mhfa.layer_weights.value"),
];

/// Softmax-normalized layer weights of the three streams from checkpoint
/// tensors. The value stream is what the speaker encoder consumes.
pub fn layer_weight_distributions(
    tensors: &BTreeMap<String, TensorData<f32>>,
) -> Result<Vec<WeightStream>> {
    STREAMS
        .iter()
        .map(|(stream, tensor_name)| {
            let t = tensors.get(*tensor_name).ok_or_else(|| {
                Error::Analysis(format!("checkpoint has no layer weights for stream {stream}"))
            })?;
            let logits: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
            Ok(WeightStream { stream: stream.to_string(), weights: softmax_weights(&logits) })
        })
        .collect()
}

/// CSV view: stream,layer,weight
pub fn weights_to_csv(streams: &[WeightStream]) -> String {
    let mut out = String::from("stream,layer,weight\n");
    for s in streams {
        for (l, w) in s.weights.iter().enumerate() {
            out.push_str(&format!("{},{l},{w}\n", s.stream));
        }
    }
    out
}

/// Static grouped-bar SVG of the weight distributions.
pub fn weights_to_svg(streams: &[WeightStream]) -> String {
    let layers = streams.first().map(|s| s.weights.len()).unwrap_or(0);
    let colors = ["#4878cf", "#d65f5f", "#6acc65"];
    let (w, h, margin) = (640.0, 320.0, 48.0);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let max_w = streams
        .iter()
        .flat_map(|s| s.weights.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let group_w = plot_w / layers.max(1) as f64;
    let bar_w = group_w / (streams.len() as f64 + 1.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - margin,
        w - margin,
        h - margin
    ));
    for (si, s) in streams.iter().enumerate() {
        for (l, &wv) in s.weights.iter().enumerate() {
            let bh = plot_h * wv / max_w;
            let x = margin + l as f64 * group_w + si as f64 * bar_w;
            let y = h - margin - bh;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{bh:.1}\" \
                 fill=\"{}\"><title>{} layer {l}: {wv:.4}</title></rect>\n",
                colors[si % colors.len()],
                s.stream
            ));
        }
    }
    for l in 0..layers {
        let x = margin + l as f64 * group_w + group_w / 2.0 - bar_w / 2.0;
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{l}</text>\n",
            h - margin + 16.0
        ));
    }
    for (si, s) in streams.iter().enumerate() {
        let x = margin + si as f64 * 140.0;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"12\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"22\" font-size=\"12\">{}</text>\n",
            colors[si % colors.len()],
            x + 16.0,
            s.stream
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_identities() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap(), 1.0);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&x, &rev).unwrap(), -1.0);
    }

    #[test]
    fn spearman_hand_rank_example() {
        // x=[1,2,3,4], y=[1,3,2,4]: d^2 sum = 2 -> 1 - 12/60 = 0.8
        let v = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(v, 0.8);
    }

    #[test]
    fn spearman_errors() {
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_is_invariant_under_monotone_transforms() {
        let x = [0.3, 1.7, 0.9, 2.4, 1.1];
        let y = [10.0, 3.0, 8.0, 1.0, 5.0];
        let base = spearman(&x, &y).unwrap();
        let fx: Vec<f64> = x.iter().map(|&v| (v * 2.0).exp()).collect();
        let gy: Vec<f64> = y.iter().map(|&v| v.powi(3) + 7.0).collect();
        assert!((spearman(&fx, &gy).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_handle_ties() {
        let r = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    fn benchmark_table() -> TaskScoreTable {
        // Seven public upstream models scored on seven tasks.
        let models = ["data2vec-base", "hubert-base", "wavlm-base", "wavlm-base-plus",
            "data2vec-large", "hubert-large", "wavlm-large"];
        let cols: Vec<(&str, &str, bool, Vec<f64>)> = vec![
            ("tse", "si_sdri", true, vec![9.43, 9.62, 10.03, 11.04, 9.55, 9.03, 10.47]),
            ("pse", "si_sdri", true, vec![10.36, 10.36, 11.01, 10.96, 10.37, 9.76, 11.34]),
            ("pvad", "map", true, vec![0.945, 0.928, 0.951, 0.942, 0.954, 0.954, 0.966]),
            ("tsasr", "wer", false, vec![40.51, 41.75, 29.13, 29.09, 35.84, 31.88, 22.62]),
            ("sep", "si_sdri", true, vec![9.95, 10.01, 10.80, 11.41, 10.81, 10.95, 11.87]),
            ("asr", "wer", false, vec![4.94, 6.42, 6.21, 5.59, 3.36, 3.62, 3.44]),
            ("sv", "eer", false, vec![3.51, 3.06, 2.71, 2.03, 2.59, 2.94, 2.30]),
        ];
        TaskScoreTable {
            models: models.iter().map(|s| s.to_string()).collect(),
            columns: cols
                .into_iter()
                .map(|(t, m, hib, values)| ScoreColumn {
                    task: t.into(),
                    metric: m.into(),
                    higher_is_better: hib,
                    values,
                })
                .collect(),
        }
    }

    #[test]
    fn benchmark_tse_sep_correlation_is_exactly_half() {
        let table = benchmark_table();
        let matrix = correlation_matrix(&table).unwrap();
        assert_eq!(matrix.get("tse:si_sdri", "sep:si_sdri"), Some(0.5));
        // symmetric with unit diagonal
        for i in 0..matrix.labels.len() {
            assert_eq!(matrix.values[i][i], 1.0);
            for j in 0..matrix.labels.len() {
                assert_eq!(matrix.values[i][j], matrix.values[j][i]);
            }
        }
    }

    #[test]
    fn direction_normalization_cancels_negation() {
        let mut table = benchmark_table();
        let base = correlation_matrix(&table).unwrap();
        // negate a lower-is-better column and flip its flag
        let idx = table.columns.iter().position(|c| !c.higher_is_better).unwrap();
        for v in table.columns[idx].values.iter_mut() {
            *v = -*v;
        }
        table.columns[idx].higher_is_better = true;
        let flipped = correlation_matrix(&table).unwrap();
        assert_eq!(base.values, flipped.values);
    }

    #[test]
    fn matrix_invariant_to_model_permutation() {
        let table = benchmark_table();
        let base = correlation_matrix(&table).unwrap();
        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        let permuted = TaskScoreTable {
            models: perm.iter().map(|&i| table.models[i].clone()).collect(),
            columns: table
                .columns
                .iter()
                .map(|c| ScoreColumn {
                    task: c.task.clone(),
                    metric: c.metric.clone(),
                    higher_is_better: c.higher_is_better,
                    values: perm.iter().map(|&i| c.values[i]).collect(),
                })
                .collect(),
        };
        let p = correlation_matrix(&permuted).unwrap();
        assert_eq!(base.values, p.values);
    }

    #[test]
    fn identical_columns_correlate_perfectly() {
        let table = TaskScoreTable {
            models: vec!["a".into(), "b".into(), "c".into()],
            columns: vec![
                ScoreColumn {
                    task: "x".into(),
                    metric: "m".into(),
                    higher_is_better: true,
                    values: vec![1.0, 2.0, 3.0],
                },
                ScoreColumn {
                    task: "y".into(),
                    metric: "m".into(),
                    higher_is_better: true,
                    values: vec![1.0, 2.0, 3.0],
                },
            ],
        };
        let m = correlation_matrix(&table).unwrap();
        assert_eq!(m.values[0][1], 1.0);
    }

    #[test]
    fn layer_weights_uniform_at_zero_logits() {
        let mut tensors = BTreeMap::new();
        for (_, name) in STREAMS {
            tensors.insert(name.to_string(), TensorData::vector(vec![0.0f32; 5]));
        }
        let streams = layer_weight_distributions(&tensors).unwrap();
        assert_eq!(streams.len(), 3);
        for s in &streams {
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for &w in &s.weights {
                assert!((w - 0.2).abs() < 1e-9);
            }
        }
        let csv = weights_to_csv(&streams);
        assert!(csv.starts_with("stream,layer,weight\n"));
        assert_eq!(csv.lines().count(), 16);
        let svg = weights_to_svg(&streams);
        assert!(svg.contains("<svg") && svg.contains("extractor"));
    }

    #[test]
    fn missing_stream_is_named() {
        let tensors = BTreeMap::new();
        let err = layer_weight_distributions(&tensors).unwrap_err();
        assert!(err.to_string().contains("extractor"), "{err}");
    }

    #[test]
    fn csv_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let mut text = String::from("model,task,metric,value,higher_is_better\n");
        let table = benchmark_table();
        for (mi, m) in table.models.iter().enumerate() {
            for c in &table.columns {
                text.push_str(&format!(
                    "{m},{},{},{},{}\n",
                    c.task, c.metric, c.values[mi], c.higher_is_better
                ));
            }
        }
        std::fs::write(&path, &text).unwrap();
        let loaded = TaskScoreTable::from_csv(&path).unwrap();
        let matrix = correlation_matrix(&loaded).unwrap();
        assert_eq!(matrix.get("tse:si_sdri", "sep:si_sdri"), Some(0.5));

        // a missing cell is rejected
        let mut broken = text.clone();
        broken.push_str("extra-model,tse,si_sdri,1.0,true\n");
        std::fs::write(&path, &broken).unwrap();
        assert!(TaskScoreTable::from_csv(&path).is_err());
    }
}
