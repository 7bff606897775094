//! Result tables assembled from metrics files, values copied unchanged.

use std::path::Path;

use ideolens::trainer::MetricsReport;

use crate::error::{CliError, CliResult};

/// The run directory name for `…/<run>/metrics.json`, else the file stem.
pub fn row_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn cells(r: &MetricsReport) -> Vec<f64> {
    std::iter::once(r.overall_accuracy).chain(r.recalls()).chain(std::iter::once(r.macro_f1)).collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Markdown table: overall accuracy, per-class recall, macro F1. With more
/// than one row a `mean ± std` row follows.
pub fn render(rows: &[(String, MetricsReport)], decimals: usize) -> CliResult<String> {
    let Some((_, first)) = rows.first() else {
        return Err(CliError::Config("nothing to report".into()));
    };
    if let Some((name, _)) = rows.iter().find(|(_, r)| r.classes != first.classes) {
        return Err(CliError::Core(ideolens::Error::Incompatible(format!("{name} has classes that differ from {:?}", first.classes))));
    }
    let mut header = vec!["Model".to_string(), "Overall Acc.".to_string()];
    header.extend(first.classes.iter().cloned());
    header.push("Macro F1".into());
    let mut lines = vec![format!("| {} |", header.join(" | ")), format!("|{}", "---|".repeat(header.len()))];
    let table: Vec<Vec<f64>> = rows.iter().map(|(_, r)| cells(r)).collect();
    for ((name, _), values) in rows.iter().zip(&table) {
        let v: Vec<String> = values.iter().map(|x| format!("{x:.decimals$}")).collect();
        lines.push(format!("| {name} | {} |", v.join(" | ")));
    }
    if rows.len() > 1 {
        let v: Vec<String> = (0..table[0].len())
            .map(|c| {
                let (m, s) = mean_std(&table.iter().map(|r| r[c]).collect::<Vec<_>>());
                format!("{m:.decimals$} ± {s:.decimals$}")
            })
            .collect();
        lines.push(format!("| mean ± std | {} |", v.join(" | ")));
    }
    Ok(lines.join("\n") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(confusion: Vec<Vec<u64>>) -> MetricsReport {
        MetricsReport::from_confusion(vec!["Left".into(), "Right".into()], confusion).unwrap()
    }

    #[test]
    fn single_row_copies_values() {
        let r = report(vec![vec![3, 1], vec![0, 4]]);
        let text = render(&[("run".into(), r)], 4).unwrap();
        assert_eq!(text.lines().next().unwrap(), "| Model | Overall Acc. | Left | Right | Macro F1 |");
        assert!(text.contains("| run | 0.8750 | 0.7500 | 1.0000 |"), "{text}");
        assert!(!text.contains("mean"));
    }

    #[test]
    fn several_rows_add_mean_and_sample_std() {
        let a = report(vec![vec![1, 0], vec![0, 1]]);
        let b = report(vec![vec![1, 1], vec![1, 1]]);
        let text = render(&[("a".into(), a), ("b".into(), b)], 3).unwrap();
        // accuracies 1.0 and 0.5: mean 0.75, sample std sqrt(0.125)
        assert!(text.contains("| mean ± std | 0.750 ± 0.354 |"), "{text}");
    }

    #[test]
    fn mismatched_classes_are_rejected() {
        let a = report(vec![vec![1, 0], vec![0, 1]]);
        let b = MetricsReport::from_confusion(vec!["x".into()], vec![vec![1]]).unwrap();
        assert!(render(&[("a".into(), a), ("b".into(), b)], 2).is_err());
    }

    #[test]
    fn row_names() {
        assert_eq!(row_name(Path::new("runs/seed3/metrics.json")), "seed3");
        assert_eq!(row_name(Path::new("results/text_only.json")), "text_only");
    }
}
