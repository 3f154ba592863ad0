//! Pruning run summaries and their JSON/CSV/table forms.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::{count_flops, ModelGraph};
use crate::pipeline::PruneMethod;
use crate::tensor::Tensor;
use crate::train::accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    /// Conv unit index.
    pub layer: usize,
    pub original_filters: usize,
    pub kept_filters: usize,
    /// Percent of this layer's filters removed.
    pub prune_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub runs: usize,
    pub batch: usize,
    /// Median milliseconds per batch.
    pub before_ms: f64,
    pub after_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: PruneMethod,
    pub seed: u64,
    pub bound: Option<f64>,
    pub layers: Vec<LayerReport>,
    pub filters_before: usize,
    pub filters_after: usize,
    /// Percent of prunable filters removed.
    pub filter_prune_ratio: f64,
    pub params_before: usize,
    pub params_after: usize,
    /// Percent of parameters removed.
    pub prune_ratio: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub saved_flops: f64,
    pub val_acc_before: f64,
    pub val_acc_after: f64,
    pub val_drop: f64,
    pub test_acc_before: Option<f64>,
    pub test_acc_after: Option<f64>,
    pub test_drop: Option<f64>,
    pub timing: Option<TimingReport>,
}

fn percent_removed(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - after / before)
    }
}

impl PruneReport {
    /// Compares `before` and `after` on the given layers and data.
    pub fn from_models(
        method: PruneMethod,
        seed: u64,
        bound: Option<f64>,
        before: &ModelGraph,
        after: &ModelGraph,
        layers: &[usize],
        val: &LabeledImageSet,
        test: Option<&LabeledImageSet>,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(layers.len());
        for &l in layers {
            let original = before.conv_spec(before.conv_unit(l)?).out_channels;
            let kept = after.conv_spec(after.conv_unit(l)?).out_channels;
            rows.push(LayerReport {
                layer: l,
                original_filters: original,
                kept_filters: kept,
                prune_ratio: percent_removed(original as f64, kept as f64),
            });
        }
        let fb = count_flops(before, before.input_shape())?;
        let fa = count_flops(after, after.input_shape())?;
        let filters_before = before.prunable_filter_count();
        let filters_after = after.prunable_filter_count();
        let val_acc_before = accuracy(before, val)?;
        let val_acc_after = accuracy(after, val)?;
        let (test_acc_before, test_acc_after) = match test {
            Some(t) => (Some(accuracy(before, t)?), Some(accuracy(after, t)?)),
            None => (None, None),
        };
        Ok(Self {
            method,
            seed,
            bound,
            layers: rows,
            filters_before,
            filters_after,
            filter_prune_ratio: percent_removed(filters_before as f64, filters_after as f64),
            params_before: before.num_params(),
            params_after: after.num_params(),
            prune_ratio: percent_removed(before.num_params() as f64, after.num_params() as f64),
            flops_before: fb.total_flops,
            flops_after: fa.total_flops,
            saved_flops: percent_removed(fb.total_flops as f64, fa.total_flops as f64),
            val_acc_before,
            val_acc_after,
            val_drop: val_acc_before - val_acc_after,
            test_acc_before,
            test_acc_after,
            test_drop: test_acc_before.zip(test_acc_after).map(|(b, a)| b - a),
            timing: None,
        })
    }

    /// `(layer, kept filters)` per pruned layer.
    pub fn keep_counts(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.layer, l.kept_filters)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::DataFormat(format!("{} is not a valid prune report: {e}", path.display())))
    }

    /// Per-layer `layer,original_filters,kept_filters,prune_ratio` rows.
    pub fn write_layer_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    run: &'a str,
    method: PruneMethod,
    seed: u64,
    bound: Option<f64>,
    filter_prune_ratio: f64,
    prune_ratio: f64,
    saved_flops: f64,
    params_before: usize,
    params_after: usize,
    flops_before: u64,
    flops_after: u64,
    val_acc_before: f64,
    val_acc_after: f64,
    val_drop: f64,
    test_acc_before: Option<f64>,
    test_acc_after: Option<f64>,
    test_drop: Option<f64>,
    kept: String,
    time_before_ms: Option<f64>,
    time_after_ms: Option<f64>,
}

fn kept_summary(r: &PruneReport) -> String {
    r.layers.iter().map(|l| format!("{}/{}", l.kept_filters, l.original_filters)).collect::<Vec<_>>().join(" ")
}

/// One CSV row per `(label, report)`.
pub fn write_summary_csv<W: std::io::Write>(runs: &[(String, PruneReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (label, r) in runs {
        w.serialize(SummaryRow {
            run: label,
            method: r.method,
            seed: r.seed,
            bound: r.bound,
            filter_prune_ratio: r.filter_prune_ratio,
            prune_ratio: r.prune_ratio,
            saved_flops: r.saved_flops,
            params_before: r.params_before,
            params_after: r.params_after,
            flops_before: r.flops_before,
            flops_after: r.flops_after,
            val_acc_before: r.val_acc_before,
            val_acc_after: r.val_acc_after,
            val_drop: r.val_drop,
            test_acc_before: r.test_acc_before,
            test_acc_after: r.test_acc_after,
            test_drop: r.test_drop,
            kept: kept_summary(r),
            time_before_ms: r.timing.as_ref().map(|t| t.before_ms),
            time_after_ms: r.timing.as_ref().map(|t| t.after_ms),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table, one row per run.
pub fn comparison_table(runs: &[(String, PruneReport)]) -> String {
    let header = [
        "run",
        "method",
        "prune ratio (%)",
        "saved FLOPs (%)",
        "params",
        "val acc",
        "val drop",
        "test acc",
        "test drop",
        "kept per layer",
    ];
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(label, r)| {
            vec![
                label.clone(),
                r.method.to_string(),
                format!("{:.2}", r.prune_ratio),
                format!("{:.2}", r.saved_flops),
                format!("{} -> {}", r.params_before, r.params_after),
                format!("{:.2} -> {:.2}", r.val_acc_before, r.val_acc_after),
                format!("{:.2}", r.val_drop),
                match (r.test_acc_before, r.test_acc_after) {
                    (Some(b), Some(a)) => format!("{b:.2} -> {a:.2}"),
                    _ => "-".into(),
                },
                opt(r.test_drop),
                kept_summary(r),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    line(&mut out, &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for row in &rows {
        line(&mut out, row);
    }
    out
}

/// Median wall-clock milliseconds of `runs` forward passes over `images`
/// after `warmup` untimed passes, on a single thread.
pub fn median_inference_ms(model: &ModelGraph, images: &Tensor, warmup: usize, runs: usize) -> Result<f64> {
    if runs == 0 {
        return Err(Error::InvalidArgument("timing needs at least one run".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot start timing thread: {e}")))?;
    pool.install(|| {
        for _ in 0..warmup {
            model.logits(images)?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            std::hint::black_box(model.logits(images)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let mid = times.len() / 2;
        Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
    })
}
