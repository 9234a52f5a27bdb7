//! Aggregation of metric records into a tasks × shots table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fm3_core::pipeline::EpisodeMode;

use crate::runner::EpisodeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    F1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub std: f64,
    pub n: usize,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Cell {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Cell { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub metric: Metric,
    /// Row labels in order of first appearance.
    pub rows: Vec<String>,
    pub shots: Vec<usize>,
    pub cells: BTreeMap<(String, usize), Cell>,
}

fn row_label(r: &EpisodeRecord) -> String {
    match r.mode {
        EpisodeMode::Full => r.task.clone(),
        EpisodeMode::RawBaseline => format!("{} (raw)", r.task),
    }
}

pub fn aggregate(records: &[EpisodeRecord], metric: Metric) -> Table {
    let mut rows: Vec<String> = Vec::new();
    let mut values: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let label = row_label(r);
        if !rows.contains(&label) {
            rows.push(label.clone());
        }
        let v = match metric {
            Metric::Accuracy => r.accuracy,
            Metric::F1 => r.f1,
        };
        values.entry((label, r.k)).or_default().push(v);
    }
    let mut shots: Vec<usize> = values.keys().map(|(_, k)| *k).collect();
    shots.sort_unstable();
    shots.dedup();
    let cells = values.into_iter().map(|(key, v)| (key, Cell::from_values(&v))).collect();
    Table { metric, rows, shots, cells }
}

impl Table {
    /// Percentages, `mean ± std` per cell.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(String::len).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}", "task");
        for k in &self.shots {
            let _ = write!(out, " | {:>13}", format!("k={k}"));
        }
        out.push('\n');
        out += &"-".repeat(width + self.shots.len() * 16);
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{row:<width$}");
            for k in &self.shots {
                match self.cells.get(&(row.clone(), *k)) {
                    Some(c) => {
                        let _ = write!(out, " | {:>13}", format!("{:.1} ± {:.1}", 100.0 * c.mean, 100.0 * c.std));
                    }
                    None => {
                        let _ = write!(out, " | {:>13}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,k,mean,std,n\n");
        for row in &self.rows {
            for k in &self.shots {
                if let Some(c) = self.cells.get(&(row.clone(), *k)) {
                    let _ = writeln!(out, "{row},{k},{},{},{}", c.mean, c.std, c.n);
                }
            }
        }
        out
    }

    /// Line chart of mean metric against shot index, one polyline per row.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
        let n = self.shots.len().max(2) - 1;
        let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
        let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        let _ = writeln!(
            out,
            "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            H - PAD,
            W - PAD,
            H - PAD
        );
        let _ = writeln!(out, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
        for (i, k) in self.shots.iter().enumerate() {
            let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">k={k}</text>", x(i), H - PAD + 18.0);
        }
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>", PAD - 6.0, y(t) + 4.0);
        }
        for (r, row) in self.rows.iter().enumerate() {
            let color = colors[r % colors.len()];
            let points: Vec<String> = self
                .shots
                .iter()
                .enumerate()
                .filter_map(|(i, k)| self.cells.get(&(row.clone(), *k)).map(|c| format!("{:.1},{:.1}", x(i), y(c.mean))))
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                points.join(" ")
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{row}</text>",
                W - PAD - 150.0,
                PAD + 14.0 * r as f64
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Protocol;

    fn record(task: &str, k: usize, episode: usize, accuracy: f64) -> EpisodeRecord {
        EpisodeRecord {
            task: task.into(),
            task_id: 0,
            k,
            episode,
            seed: 0,
            protocol: Protocol::Joint,
            mode: EpisodeMode::Full,
            accuracy,
            f1: accuracy / 2.0,
            n_eval: 10,
            support: 2 * k,
            contrastive_steps: 0,
            skipped: None,
            chance_flag: false,
        }
    }

    #[test]
    fn cells_hold_mean_and_sample_std() {
        let records =
            vec![record("b", 4, 0, 0.5), record("b", 4, 1, 0.7), record("a", 16, 0, 0.9), record("b", 16, 0, 0.8)];
        let t = aggregate(&records, Metric::Accuracy);
        assert_eq!(t.rows, vec!["b".to_string(), "a".to_string()]);
        assert_eq!(t.shots, vec![4, 16]);
        let c = t.cells[&("b".to_string(), 4)];
        assert!((c.mean - 0.6).abs() < 1e-12);
        assert!((c.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.cells[&("a".to_string(), 16)].std, 0.0);
        assert!(t.render().contains("60.0 ± 14.1"));
        assert!(t.render().lines().nth(3).unwrap().contains('-'));
        assert_eq!(t.to_csv().lines().count(), 4);
        let f1 = aggregate(&records, Metric::F1);
        assert!((f1.cells[&("b".to_string(), 4)].mean - 0.3).abs() < 1e-12);
        assert!(t.to_svg().matches("<polyline").count() == 2);
    }
}
