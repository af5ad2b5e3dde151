//! Aggregated result tables and static SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::abx::{AbxReport, Task};
use crate::pipeline::{ExperimentReport, TestMask, TrainMode};
use crate::structure::ParallelismReport;

/// One evaluated condition, possibly with only some analyses present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultSet {
    pub abx: Vec<(TrainMode, TestMask, AbxReport)>,
    pub parallelism: Vec<(TrainMode, TestMask, ParallelismReport)>,
}

impl ResultSet {
    pub fn from_experiment(r: &ExperimentReport) -> Self {
        let mut out = ResultSet::default();
        for c in &r.conditions {
            out.abx.push((c.mode, c.test_mask, c.within.clone()));
            out.abx.push((c.mode, c.test_mask, c.across.clone()));
            out.parallelism.push((c.mode, c.test_mask, c.parallelism.clone()));
        }
        out
    }

    pub fn extend(&mut self, other: ResultSet) {
        self.abx.extend(other.abx);
        self.parallelism.extend(other.parallelism);
    }

    /// Error rates laid out as training regime by task and test input.
    pub fn table_csv(&self) -> String {
        let row_of = |m: TrainMode| match m {
            TrainMode::Raw => "raw",
            TrainMode::MonoA | TrainMode::MonoV | TrainMode::MonoAv => "mono",
            TrainMode::Multi => "multi",
        };
        let masks = [TestMask::A, TestMask::V, TestMask::Av];
        let mut cells: BTreeMap<(&str, Task, TestMask), f64> = BTreeMap::new();
        for (mode, mask, r) in &self.abx {
            cells.insert((row_of(*mode), r.task, *mask), r.overall_error);
        }
        let mut out = String::from("model");
        for task in [Task::Within, Task::Across] {
            for m in masks {
                let _ = write!(out, ",{}_{}", task.short().to_lowercase(), m.name());
            }
        }
        out.push('\n');
        for row in ["raw", "mono", "multi"] {
            if !cells.keys().any(|k| k.0 == row) {
                continue;
            }
            out.push_str(row);
            for task in [Task::Within, Task::Across] {
                for m in masks {
                    match cells.get(&(row, task, m)) {
                        Some(e) => {
                            let _ = write!(out, ",{:.2}", 100.0 * e);
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Within-speaker accuracy per phonological feature, one series per condition.
    pub fn feature_chart(&self) -> String {
        let mut features: Vec<String> = Vec::new();
        let mut series = Vec::new();
        for (mode, mask, r) in self.abx.iter().filter(|(_, _, r)| r.task == Task::Within) {
            for f in &r.per_feature {
                if !features.contains(&f.feature) {
                    features.push(f.feature.clone());
                }
            }
            let values: BTreeMap<&str, f64> = r.per_feature.iter().map(|f| (f.feature.as_str(), f.accuracy)).collect();
            series.push((format!("{}/{}", mode.name(), mask.name()), values.into_iter().map(|(k, v)| (k.to_string(), v)).collect()));
        }
        bar_chart("Within-speaker ABX accuracy by feature", &features, &series, 0.5, 1.0)
    }

    pub fn parallelism_chart(&self) -> String {
        let mut features: Vec<String> = Vec::new();
        let mut series = Vec::new();
        for (mode, mask, r) in &self.parallelism {
            for f in &r.features {
                if !features.contains(&f.feature) {
                    features.push(f.feature.clone());
                }
            }
            series.push((
                format!("{}/{}", mode.name(), mask.name()),
                r.features.iter().map(|f| (f.feature.clone(), f.score)).collect(),
            ));
        }
        bar_chart("Parallelism by feature", &features, &series, 0.0, 1.0)
    }
}

const PALETTE: [&str; 9] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[(String, BTreeMap<String, f64>)], y_min: f64, y_max: f64) -> String {
    let (left, top, plot_h, group_w, legend_h) = (50.0, 30.0, 240.0, 24.0 + 14.0 * series.len() as f64, 16.0 * series.len() as f64);
    let width = left + group_w * categories.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 60.0 + legend_h;
    let y = |v: f64| top + plot_h * (1.0 - ((v - y_min) / (y_max - y_min)).clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, escape(title));
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            y(v),
            y(v),
            left - 4.0,
            y(v) + 4.0
        );
    }
    for (c, cat) in categories.iter().enumerate() {
        let gx = left + group_w * c as f64 + 12.0;
        for (k, (_, values)) in series.iter().enumerate() {
            if let Some(&v) = values.get(cat) {
                let x = gx + 14.0 * k as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="12" height="{:.1}" fill="{}"/>"#,
                    y(v),
                    top + plot_h - y(v),
                    PALETTE[k % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + 7.0 * series.len() as f64,
            top + plot_h + 16.0,
            escape(cat)
        );
    }
    for (k, (name, _)) in series.iter().enumerate() {
        let ly = top + plot_h + 36.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 9.0,
            PALETTE[k % PALETTE.len()],
            left + 14.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
