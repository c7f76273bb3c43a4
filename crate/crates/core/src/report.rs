//! Output persistence: per-run metric CSVs, aggregate summaries, MI curves
//! and confidence histograms as standalone SVG files, plus a records.json
//! that `plot` can re-emit from. Everything written here is a pure function
//! of the records, so re-emission is byte-identical.

use std::path::{Path, PathBuf};

use crate::error::{CgrlError, Result};
use crate::experiment::{AblationTable, ExperimentResult, RunRecord, SweepTable};
use crate::graph::write_text;
use crate::metrics::confidence_histogram;

fn fnum(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// Multi-series line chart.
pub fn svg_line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (x0, x1) = axis_range(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)));
    let (y0, y1) = axis_range(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| H - MARGIN_B - (y - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MARGIN_B
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let xv = x0 + frac * (x1 - x0);
        let yv = y0 + frac * (y1 - y0);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            sx(xv),
            H - MARGIN_B + 16.0,
            fnum(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            sy(yv) + 3.0,
            fnum(yv)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>\n",
        (MARGIN_T + H - MARGIN_B) / 2.0,
        (MARGIN_T + H - MARGIN_B) / 2.0
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            W - MARGIN_R - 150.0,
            MARGIN_T + 14.0 * (i as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Equal-width density histogram over [0, 1].
pub fn svg_histogram(title: &str, xlabel: &str, densities: &[f64]) -> String {
    let bins = densities.len();
    let (_, dmax) = axis_range(densities.iter().copied().chain([0.0]));
    let sx = |x: f64| MARGIN_L + x * (W - MARGIN_L - MARGIN_R);
    let sy = |y: f64| H - MARGIN_B - y / dmax * (H - MARGIN_T - MARGIN_B);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - MARGIN_B,
        W - MARGIN_R,
        H - MARGIN_B
    ));
    for (i, &d) in densities.iter().enumerate() {
        let x_lo = i as f64 / bins as f64;
        let x_hi = (i + 1) as f64 / bins as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" stroke=\"black\" stroke-width=\"0.5\"/>\n",
            sx(x_lo),
            sy(d),
            sx(x_hi) - sx(x_lo),
            (H - MARGIN_B) - sy(d),
            PALETTE[0]
        ));
    }
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            sx(frac),
            H - MARGIN_B + 16.0,
            fnum(frac)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{xlabel}</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 10.0
    ));
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

fn run_csv(record: &RunRecord) -> String {
    let mut out = String::from(
        "epoch,sup,rec,intra,inter,total,val_acc,ood_val_acc,mi_id_val,mi_ood_val\n",
    );
    for e in &record.per_epoch {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            fnum(e.sup),
            fnum(e.rec),
            fnum(e.intra),
            fnum(e.inter),
            fnum(e.total),
            fnum(e.val_acc),
            fnum(e.ood_val_acc),
            fnum(e.mi_id_val),
            fnum(e.mi_ood_val)
        ));
    }
    out
}

fn aggregate_csv(result: &ExperimentResult) -> String {
    let a = &result.aggregate;
    let mut out = String::from("metric,mean,std\n");
    for (d, (m, s)) in a.ood_mean.iter().zip(&a.ood_std).enumerate() {
        out.push_str(&format!("ood_domain{}_acc,{},{}\n", d + 4, fnum(*m), fnum(*s)));
    }
    out.push_str(&format!(
        "ood_overall_acc,{},{}\n",
        fnum(a.ood_overall_mean),
        fnum(a.ood_overall_std)
    ));
    out.push_str(&format!(
        "best_val_acc,{},{}\n",
        fnum(a.best_val_mean),
        fnum(a.best_val_std)
    ));
    out.push_str(&format!(
        "id_test_acc,{},{}\n",
        fnum(a.id_test_mean),
        fnum(a.id_test_std)
    ));
    out.push_str(&format!(
        "conf_saturation,{},\n",
        fnum(a.conf_saturation_mean)
    ));
    out
}

fn summary_text(result: &ExperimentResult) -> String {
    let a = &result.aggregate;
    let mut out = String::new();
    out.push_str(&format!(
        "model {} | hash {} | runs {} used / {} failed\n",
        result.config.model.name(),
        result.config.hash(),
        a.runs_used,
        a.runs_failed
    ));
    out.push_str(&result.config.canonical_text());
    out.push_str(&format!(
        "best-val acc: {:.4} +/- {:.4}\nid-test acc: {:.4} +/- {:.4}\n",
        a.best_val_mean, a.best_val_std, a.id_test_mean, a.id_test_std
    ));
    for (d, (m, s)) in a.ood_mean.iter().zip(&a.ood_std).enumerate() {
        out.push_str(&format!("ood domain {} acc: {:.4} +/- {:.4}\n", d + 4, m, s));
    }
    out.push_str(&format!(
        "ood overall acc: {:.4} +/- {:.4}\n",
        a.ood_overall_mean, a.ood_overall_std
    ));
    out.push_str(&format!(
        "train confidence saturation: {:.4}\nper-run OOD MI stability: {}\n",
        a.conf_saturation_mean,
        a.mi_stability_ood
            .iter()
            .map(|s| format!("{s:.5}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    out
}

/// Write every artifact for one experiment; returns the paths written.
pub fn emit_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CgrlError::io(out_dir.display().to_string(), e))?;
    let hash = result.config.hash();
    let mut written = Vec::new();
    let emit = |name: String, text: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        write_text(&path, &text)?;
        Ok(path)
    };

    for record in &result.records {
        written.push(emit(
            format!("metrics_{hash}_seed{}.csv", record.seed),
            run_csv(record),
        )?);
        let mi_series = vec![
            (
                "ID-val MI".to_string(),
                record
                    .per_epoch
                    .iter()
                    .map(|e| (e.epoch as f64, e.mi_id_val))
                    .collect(),
            ),
            (
                "OOD-val MI".to_string(),
                record
                    .per_epoch
                    .iter()
                    .map(|e| (e.epoch as f64, e.mi_ood_val))
                    .collect(),
            ),
        ];
        written.push(emit(
            format!("mi_{hash}_seed{}.svg", record.seed),
            svg_line_chart(
                &format!("MI vs epochs ({}, seed {})", result.config.model.name(), record.seed),
                "epoch",
                "mutual information (nats)",
                &mi_series,
            ),
        )?);
        if !record.train_confidences.is_empty() {
            let hist = confidence_histogram(&record.train_confidences, 20)?;
            written.push(emit(
                format!("confidence_{hash}_seed{}.svg", record.seed),
                svg_histogram(
                    &format!(
                        "train confidence ({}, seed {})",
                        result.config.model.name(),
                        record.seed
                    ),
                    "max softmax confidence",
                    &hist,
                ),
            )?);
        }
    }
    written.push(emit(format!("aggregate_{hash}.csv"), aggregate_csv(result))?);
    written.push(emit(format!("summary_{hash}.txt"), summary_text(result))?);
    written.push(emit(
        format!("records_{hash}.json"),
        serde_json::to_string_pretty(result)
            .map_err(|e| CgrlError::invalid("emit_outputs", e.to_string()))? + "\n",
    )?);
    Ok(written)
}

/// Reload a persisted experiment for re-plotting.
pub fn load_records(path: &Path) -> Result<ExperimentResult> {
    let text = crate::graph::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CgrlError::invalid("load_records", e.to_string()))
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from(
        "variant,losses,ood_overall_mean,ood_overall_std,ood4_mean,ood5_mean,ood6_mean,best_val_mean\n",
    );
    for (name, result) in &table.rows {
        let a = &result.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name,
            result.config.losses.render().replace(',', "+"),
            fnum(a.ood_overall_mean),
            fnum(a.ood_overall_std),
            fnum(a.ood_mean.first().copied().unwrap_or(f64::NAN)),
            fnum(a.ood_mean.get(1).copied().unwrap_or(f64::NAN)),
            fnum(a.ood_mean.get(2).copied().unwrap_or(f64::NAN)),
            fnum(a.best_val_mean),
        ));
    }
    out
}

pub fn ablation_text(table: &AblationTable) -> String {
    let mut out = String::from(
        "variant      losses                ood overall        per-domain (4, 5, 6)\n",
    );
    for (name, result) in &table.rows {
        let a = &result.aggregate;
        out.push_str(&format!(
            "{:<12} {:<21} {:.4} +/- {:.4}   {}\n",
            name,
            result.config.losses.render(),
            a.ood_overall_mean,
            a.ood_overall_std,
            a.ood_mean
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    out
}

pub fn emit_ablation(table: &AblationTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CgrlError::io(out_dir.display().to_string(), e))?;
    let base_hash = table
        .rows
        .first()
        .map(|(_, r)| r.config.hash())
        .unwrap_or_default();
    let csv_path = out_dir.join(format!("ablation_{base_hash}.csv"));
    write_text(&csv_path, &ablation_csv(table))?;
    let txt_path = out_dir.join(format!("ablation_{base_hash}.txt"));
    write_text(&txt_path, &ablation_text(table))?;
    let mut written = vec![csv_path, txt_path];
    for (_, result) in &table.rows {
        written.extend(emit_outputs(result, out_dir)?);
    }
    Ok(written)
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = format!(
        "{},ood_overall_mean,ood_overall_std,best_val_mean,best_val_std\n",
        table.axis.name()
    );
    for (value, result) in &table.rows {
        let a = &result.aggregate;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            value,
            fnum(a.ood_overall_mean),
            fnum(a.ood_overall_std),
            fnum(a.best_val_mean),
            fnum(a.best_val_std)
        ));
    }
    out
}

pub fn emit_sweep(table: &SweepTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CgrlError::io(out_dir.display().to_string(), e))?;
    let axis = table.axis.name();
    let csv_path = out_dir.join(format!("sweep_{axis}.csv"));
    write_text(&csv_path, &sweep_csv(table))?;
    let pts: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|(v, r)| (*v, r.aggregate.ood_overall_mean))
        .collect();
    let chart = svg_line_chart(
        &format!("sensitivity to {axis}"),
        axis,
        "mean OOD accuracy",
        &[("ood accuracy".to_string(), pts)],
    );
    let svg_path = out_dir.join(format!("sweep_{axis}.svg"));
    write_text(&svg_path, &chart)?;
    Ok(vec![csv_path, svg_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::encoder::ModelKind;
    use crate::experiment::run_experiment;
    use crate::shift::{assemble_benchmark, SbmSpec, ShiftSpec};

    fn small_result() -> ExperimentResult {
        let sbm = SbmSpec {
            classes: 3,
            per_class: 10,
            p_in: 0.3,
            p_out: 0.03,
            dim: 8,
            delta: 1.2,
            noise: 0.4,
            seed: 5,
        };
        let bundle = assemble_benchmark::<f64>(&sbm, &ShiftSpec::default()).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelKind::CgrlGcn;
        cfg.epochs = 2;
        cfg.runs = 1;
        cfg.pairs_per_epoch = 32;
        run_experiment(&cfg, &bundle, 0, 1).unwrap()
    }

    #[test]
    fn emit_writes_expected_files_and_is_reproducible() {
        let result = small_result();
        let dir = std::env::temp_dir().join("cgrl_report_test");
        let _ = std::fs::remove_dir_all(&dir);
        let written = emit_outputs(&result, &dir).unwrap();
        // one run: metrics csv, mi svg, confidence svg, aggregate, summary, json
        assert!(written.len() >= 3);
        let before: Vec<(PathBuf, Vec<u8>)> = written
            .iter()
            .map(|p| (p.clone(), std::fs::read(p).unwrap()))
            .collect();
        let rewritten = emit_outputs(&result, &dir).unwrap();
        assert_eq!(written, rewritten);
        for (path, bytes) in before {
            assert_eq!(std::fs::read(&path).unwrap(), bytes, "{path:?} changed");
        }
    }

    #[test]
    fn records_round_trip_through_json() {
        let result = small_result();
        let dir = std::env::temp_dir().join("cgrl_report_json");
        let _ = std::fs::remove_dir_all(&dir);
        let written = emit_outputs(&result, &dir).unwrap();
        let json = written
            .iter()
            .find(|p| p.extension().is_some_and(|e| e == "json"))
            .unwrap();
        let loaded = load_records(json).unwrap();
        assert_eq!(
            serde_json::to_string(&loaded.records).unwrap(),
            serde_json::to_string(&result.records).unwrap()
        );
    }

    #[test]
    fn svg_is_well_formed() {
        let chart = svg_line_chart(
            "t",
            "x",
            "y",
            &[("a".into(), vec![(0.0, 1.0), (1.0, 2.0), (2.0, 0.5)])],
        );
        assert!(chart.starts_with("<svg"));
        assert!(chart.trim_end().ends_with("</svg>"));
        assert!(chart.contains("polyline"));

        let hist = svg_histogram("h", "conf", &[0.5, 1.5, 3.0, 5.0]);
        assert!(hist.contains("rect") && hist.trim_end().ends_with("</svg>"));
    }
}
