//! `report`: summary tables and plot-ready series from a run directory.
//!
//! Reads only files written by the other subcommands. Series are
//! tab-separated with a header row, under `<run-dir>/series/`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use camib_core::experiment::{AblationReport, Summary, SweepReport};
use camib_core::intervention::LossBreakdown;
use camib_core::metrics::MetricsReport;
use camib_core::train::TrainedModel;
use serde::de::DeserializeOwned;

use crate::{write_text, CliError, CliResult, TrainReport};

pub fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("step,total,caus,iv_align,unif,intv,ib\n");
    for (i, h) in history.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{},{}", h.total, h.caus, h.iv_align, h.unif, h.intv, h.ib);
    }
    s
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

pub fn metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = format!("{:<9} {:>7}", "split", "n");
    let names = MetricsReport::default().entries().map(|(n, _)| n);
    for n in names {
        let _ = write!(s, " {n:>14}");
    }
    s.push('\n');
    for (name, m) in rows {
        let _ = write!(s, "{name:<9} {:>7}", m.samples);
        for (_, v) in m.entries() {
            let _ = write!(s, " {:>14}", fmt(v));
        }
        s.push('\n');
    }
    s
}

fn read<T: DeserializeOwned>(path: &Path) -> CliResult<Option<T>> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn summary_cell(m: &std::collections::BTreeMap<String, Summary>, key: &str) -> (String, String) {
    m.get(key)
        .map_or(("nan".into(), "nan".into()), |s| (s.mean.to_string(), s.std.to_string()))
}

pub fn run(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("run directory {} not found", dir.display())));
    }
    let series = dir.join("series");
    let mut out = String::new();
    let mut found = false;

    if let Some(data) = read::<serde_json::Value>(&dir.join("data_summary.json"))? {
        found = true;
        let mut tsv = String::from("split\tsamples\trho\tagreement\n");
        let _ = writeln!(out, "# data");
        for s in data["splits"].as_array().into_iter().flatten() {
            let _ = writeln!(tsv, "{}\t{}\t{}\t{}", s["name"].as_str().unwrap_or("?"), s["samples"], s["rho"], s["agreement"]);
            let _ = writeln!(
                out,
                "{:<9} n={} rho={} agreement={:.4}",
                s["name"].as_str().unwrap_or("?"),
                s["samples"],
                s["rho"],
                s["agreement"].as_f64().unwrap_or(f64::NAN)
            );
        }
        for key in ["shortcut_probe", "causal_probe"] {
            let p = &data[key];
            let _ = writeln!(
                out,
                "{key}: id {:.4} ood {:.4}",
                p["id_accuracy"].as_f64().unwrap_or(f64::NAN),
                p["ood_accuracy"].as_f64().unwrap_or(f64::NAN)
            );
        }
        out.push('\n');
        write_text(&series.join("splits.tsv"), &tsv)?;
    }

    if let Some(rep) = read::<TrainReport>(&dir.join("report.json"))? {
        found = true;
        let _ = writeln!(out, "# train ({} steps, final loss {:.6})", rep.steps, rep.final_loss.total);
        out.push_str(&metrics_table(&[("val", &rep.val), ("test_id", &rep.test_id), ("test_ood", &rep.test_ood)]));
        out.push('\n');
        let mut tsv = String::from("split\tmetric\tvalue\n");
        for (name, m) in [("val", &rep.val), ("test_id", &rep.test_id), ("test_ood", &rep.test_ood)] {
            for (k, v) in m.entries() {
                if let Some(v) = v {
                    let _ = writeln!(tsv, "{name}\t{k}\t{v}");
                }
            }
        }
        write_text(&series.join("metrics.tsv"), &tsv)?;
    }

    let model_path = dir.join("model.json");
    if model_path.exists() {
        found = true;
        let model = TrainedModel::load(&model_path)?;
        let tsv = history_csv(&model.history).replace(',', "\t");
        write_text(&series.join("loss.tsv"), &tsv)?;
    }

    if let Some(rep) = read::<AblationReport>(&dir.join("ablation.json"))? {
        found = true;
        out.push_str(&rep.to_text());
        out.push('\n');
        let mut tsv = String::from("variant\tseeds\tid_mean\tid_std\tood_mean\tood_std\n");
        for v in &rep.variants {
            let (im, is) = summary_cell(&v.test_id, &rep.headline);
            let (om, os) = summary_cell(&v.test_ood, &rep.headline);
            let _ = writeln!(tsv, "{}\t{}\t{im}\t{is}\t{om}\t{os}", v.variant, v.seeds.len());
        }
        write_text(&series.join("ablation.tsv"), &tsv)?;
    }

    if let Some(rep) = read::<SweepReport>(&dir.join("sweep.json"))? {
        found = true;
        out.push_str(&rep.to_text());
        out.push('\n');
        let headline = if rep.selection_metric == "mae" {
            "acc2_incl_zero"
        } else {
            "accuracy"
        };
        let mut tsv = format!("lambda1\tlambda2\tbeta\tval_{}\tid_mean\tood_mean\n", rep.selection_metric);
        for r in &rep.rows {
            let (val, _) = summary_cell(&r.val, &rep.selection_metric);
            let (id, _) = summary_cell(&r.test_id, headline);
            let (ood, _) = summary_cell(&r.test_ood, headline);
            let _ = writeln!(tsv, "{}\t{}\t{}\t{val}\t{id}\t{ood}", r.lambda1, r.lambda2, r.beta);
        }
        write_text(&series.join("sweep.tsv"), &tsv)?;
    }

    if !found {
        return Err(CliError::usage(format!("nothing to report in {}", dir.display())));
    }
    write_text(&dir.join("summary.txt"), &out)?;
    print!("{out}");
    Ok(())
}
