//! Aggregation of student runs into CSV tables and SVG curves.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Arch;
use crate::trainer::{mean_std, LabelMode};

/// Outcome of one student training run, as written by `d3m train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Free-form experiment tag, e.g. `d3m` or `baseline`.
    pub label: String,
    pub mode: LabelMode,
    pub teacher_arch: Option<Arch>,
    pub student_arch: Arch,
    pub ipc: usize,
    pub grid: (usize, usize),
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// `account(artifact).total` of the artifact the student was trained on.
    pub bytes: usize,
    pub artifact_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mode: String,
    pub teacher_arch: String,
    pub student_arch: String,
    pub ipc: usize,
    pub grid: String,
    pub bytes: usize,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

pub fn grid_name(g: (usize, usize)) -> String {
    format!("{}x{}", g.0, g.1)
}

fn arch_name(a: Option<Arch>) -> String {
    a.map(|a| a.name().to_string()).unwrap_or_else(|| "-".into())
}

/// Groups runs that differ only by seed.
pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, &str, String, String, usize, (usize, usize), usize), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((
                r.label.clone(),
                r.mode.name(),
                arch_name(r.teacher_arch),
                r.student_arch.name().to_string(),
                r.ipc,
                r.grid,
                r.bytes,
            ))
            .or_default()
            .push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|((label, mode, teacher, student, ipc, grid, bytes), accs)| {
            let (m, s) = mean_std(&accs);
            SummaryRow {
                label,
                mode: mode.to_string(),
                teacher_arch: teacher,
                student_arch: student,
                ipc,
                grid: grid_name(grid),
                bytes,
                runs: accs.len(),
                mean_accuracy: m,
                std_accuracy: s,
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Other(e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub cells: usize,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// One row per grid over all runs, ordered by cell count.
pub fn ablation_table(runs: &[RunRecord]) -> Vec<AblationRow> {
    let mut by_grid: BTreeMap<(usize, (usize, usize)), Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_grid.entry((r.grid.0 * r.grid.1, r.grid)).or_default().push(r.accuracy);
    }
    by_grid
        .into_iter()
        .map(|((cells, grid), accs)| {
            let (m, s) = mean_std(&accs);
            AblationRow {
                grid: grid_name(grid),
                cells,
                runs: accs.len(),
                mean_accuracy: m,
                std_accuracy: s,
            }
        })
        .collect()
}

/// True when the finest grid beats every coarser grid strictly.
pub fn largest_grid_dominates(rows: &[AblationRow]) -> bool {
    match rows.split_last() {
        Some((last, rest)) if !rest.is_empty() => rest.iter().all(|r| last.mean_accuracy > r.mean_accuracy),
        _ => false,
    }
}

/// Mean accuracy indexed by `[teacher][student]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossMatrix {
    pub teachers: Vec<Arch>,
    pub students: Vec<Arch>,
    pub cells: Vec<Vec<Option<(f64, f64)>>>,
}

pub fn cross_arch_matrix(runs: &[RunRecord]) -> CrossMatrix {
    let mut groups: BTreeMap<(Arch, Arch), Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Some(t) = r.teacher_arch {
            groups.entry((t, r.student_arch)).or_default().push(r.accuracy);
        }
    }
    let mut teachers: Vec<Arch> = groups.keys().map(|k| k.0).collect();
    let mut students: Vec<Arch> = groups.keys().map(|k| k.1).collect();
    teachers.dedup();
    students.sort();
    students.dedup();
    let cells = teachers
        .iter()
        .map(|t| students.iter().map(|s| groups.get(&(*t, *s)).map(|a| mean_std(a))).collect())
        .collect();
    CrossMatrix {
        teachers,
        students,
        cells,
    }
}

pub fn write_cross_csv(path: &Path, m: &CrossMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["teacher \\ student".to_string()];
    head.extend(m.students.iter().map(|s| s.name().to_string()));
    w.write_record(&head).map_err(csv_err)?;
    for (t, row) in m.teachers.iter().zip(&m.cells) {
        let mut rec = vec![t.name().to_string()];
        rec.extend(row.iter().map(|c| match c {
            Some((mean, std)) => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std),
            None => "-".into(),
        }));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const SERIES_COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Mean accuracy against artifact bytes, one line per
/// `(label, mode, student)` series, with +-1 std whiskers.
pub fn plot_accuracy_vs_bytes(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry(format!("{} / {} / {}", r.label, r.mode, r.student_arch))
            .or_default()
            .push((r.bytes as f64, r.mean_accuracy, r.std_accuracy));
    }
    let xmax = rows.iter().map(|r| r.bytes as f64).fold(1.0, f64::max) * 1.1;
    let xmin = rows.iter().map(|r| r.bytes as f64).fold(xmax, f64::min) * 0.9;
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("accuracy vs. distilled size", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d((xmin..xmax).log_scale(), 0.0f64..1.0)?;
        chart
            .configure_mesh()
            .x_desc("artifact bytes")
            .y_desc("top-1 accuracy")
            .draw()?;
        for (i, (name, mut pts)) in series.into_iter().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(pts.iter().map(|p| Circle::new((p.0, p.1), 3, color.filled())))?;
            chart.draw_series(
                pts.iter()
                    .map(|p| PathElement::new(vec![(p.0, (p.1 - p.2).max(0.0)), (p.0, (p.1 + p.2).min(1.0))], color)),
            )?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Other(format!("plot {}: {e}", path.display())))
}

/// Reads every `*.json` run record under `dir`.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Writes `results.csv`, `accuracy_vs_bytes.svg`, `ablation.csv` and
/// `cross_arch.csv` into `out`.
pub fn write_report(runs: &[RunRecord], out: &Path) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() {
        return Err(Error::Other("no completed runs to report".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = summarize(runs);
    write_csv(&out.join("results.csv"), &rows)?;
    plot_accuracy_vs_bytes(&out.join("accuracy_vs_bytes.svg"), &rows)?;
    write_csv(&out.join("ablation.csv"), &ablation_table(runs))?;
    write_cross_csv(&out.join("cross_arch.csv"), &cross_arch_matrix(runs))?;
    Ok(rows)
}
