use std::path::PathBuf;

use anyhow::{anyhow, Result};

pub const EVAL_HEADER: &str = "method,bits,top1,samples";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub method: String,
    pub bits: u32,
    pub top1: f64,
    pub samples: usize,
    pub run: String,
}

pub fn parse_eval_csv(text: &str, run: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EVAL_HEADER) {
        return Err(anyhow!("expected header {EVAL_HEADER:?}"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(anyhow!("malformed row {l:?}"));
            }
            Ok(Row { method: f[0].into(), bits: f[1].parse()?, top1: f[2].parse()?, samples: f[3].parse()?, run: run.into() })
        })
        .collect()
}

/// Reads `eval.csv` from each run directory. Unreadable runs are reported
/// and skipped.
pub fn collect(runs: &[PathBuf]) -> (Vec<Row>, Vec<String>) {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for dir in runs {
        let path = dir.join("eval.csv");
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        match std::fs::read_to_string(&path).map_err(anyhow::Error::from).and_then(|t| parse_eval_csv(&t, &name)) {
            Ok(r) => rows.extend(r),
            Err(e) => warnings.push(format!("{}: {e}", path.display())),
        }
    }
    rows.sort_by(|a, b| (&a.method, a.bits, &a.run).cmp(&(&b.method, b.bits, &b.run)));
    (rows, warnings)
}

pub fn table_csv(rows: &[Row]) -> String {
    let mut out = String::from("method,bits,top1,samples,run\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.method, r.bits, r.top1, r.samples, r.run));
    }
    out
}

/// Per method: points in bit order (duplicates averaged) and whether
/// accuracy never drops as bits grow.
pub fn curves(rows: &[Row]) -> Vec<(String, Vec<(u32, f64)>, bool)> {
    let mut out: Vec<(String, Vec<(u32, f64)>, bool)> = Vec::new();
    for r in rows {
        if out.last().is_none_or(|(m, _, _)| *m != r.method) {
            out.push((r.method.clone(), Vec::new(), true));
        }
        out.last_mut().unwrap().1.push((r.bits, r.top1));
    }
    for (_, pts, flag) in &mut out {
        let mut merged: Vec<(u32, f64, usize)> = Vec::new();
        for &(b, a) in pts.iter() {
            match merged.last_mut() {
                Some(m) if m.0 == b => {
                    m.1 += a;
                    m.2 += 1;
                }
                _ => merged.push((b, a, 1)),
            }
        }
        *pts = merged.into_iter().map(|(b, s, n)| (b, s / n as f64)).collect();
        *flag = pts.windows(2).all(|w| w[1].1 >= w[0].1);
    }
    out
}

pub fn curves_csv(curves: &[(String, Vec<(u32, f64)>, bool)]) -> String {
    let mut out = String::from("method,points,non_decreasing\n");
    for (m, pts, flag) in curves {
        out.push_str(&format!("{m},{},{flag}\n", pts.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, bits: u32, top1: f64) -> Row {
        Row { method: method.into(), bits, top1, samples: 10, run: format!("{method}{bits}") }
    }

    #[test]
    fn single_run_one_row() {
        let rows = parse_eval_csv("method,bits,top1,samples\ncqformer,2,0.5,10\n", "r").unwrap();
        assert_eq!(rows, vec![Row { method: "cqformer".into(), bits: 2, top1: 0.5, samples: 10, run: "r".into() }]);
        assert_eq!(table_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn six_rows_sorted_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        for (i, (m, b, a)) in [("octree", 3, 0.7), ("cqformer", 2, 0.8), ("octree", 1, 0.5), ("cqformer", 1, 0.9), ("octree", 2, 0.6), ("cqformer", 3, 0.95)]
            .into_iter()
            .enumerate()
        {
            let d = dir.path().join(format!("run{i}"));
            std::fs::create_dir(&d).unwrap();
            std::fs::write(d.join("eval.csv"), format!("{EVAL_HEADER}\n{m},{b},{a},10\n")).unwrap();
            runs.push(d);
        }
        runs.push(dir.path().join("missing"));
        let (rows, warnings) = collect(&runs);
        assert_eq!(warnings.len(), 1);
        let keys: Vec<(&str, u32)> = rows.iter().map(|r| (r.method.as_str(), r.bits)).collect();
        assert_eq!(keys, [("cqformer", 1), ("cqformer", 2), ("cqformer", 3), ("octree", 1), ("octree", 2), ("octree", 3)]);
        let c = curves(&rows);
        assert_eq!(c[0].2, false);
        assert_eq!(c[1].2, true);
        assert_eq!(curves_csv(&c), "method,points,non_decreasing\ncqformer,3,false\noctree,3,true\n");
    }

    #[test]
    fn duplicate_bits_are_averaged() {
        let c = curves(&[row("m", 1, 0.4), row("m", 1, 0.6), row("m", 2, 0.7)]);
        assert_eq!(c[0].1, vec![(1, 0.5), (2, 0.7)]);
        assert!(c[0].2);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(parse_eval_csv("a,b\n", "r").is_err());
        assert!(parse_eval_csv("method,bits,top1,samples\nx,1\n", "r").is_err());
    }
}
