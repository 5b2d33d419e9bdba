//! Per-method aggregation across seeds in the two comparison layouts.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::RunRecord;
use crate::error::{Error, Result};
use crate::train::Method;

/// Canonical row order: NORMAL, FTT, FTT_FT, SD, then ESD by decreasing r.
pub fn method_order(a: Method, b: Method) -> Ordering {
    fn rank(m: Method) -> (u8, f64) {
        match m {
            Method::Normal => (0, 0.0),
            Method::Ftt => (1, 0.0),
            Method::FttFt => (2, 0.0),
            Method::Sd => (3, 0.0),
            Method::Esd(r) => (4, -r),
        }
    }
    let (ra, rb) = (rank(a), rank(b));
    ra.0.cmp(&rb.0).then(ra.1.total_cmp(&rb.1))
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| method_order(a.method, b.method).then(a.seed.cmp(&b.seed)));
}

/// Mean with min and max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    /// Order-independent: values are sorted before summing.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len().max(1) as f64;
        Self {
            mean: v.iter().sum::<f64>() / n,
            min: v.first().copied().unwrap_or(f64::NAN),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }

    fn scaled(self, k: f64) -> Self {
        Self { mean: self.mean * k, min: self.min * k, max: self.max * k }
    }

    fn cell(self, n: usize, digits: usize) -> String {
        if n > 1 {
            format!("{:.d$} [{:.d$}, {:.d$}]", self.mean, self.min, self.max, d = digits)
        } else {
            format!("{:.d$}", self.mean, d = digits)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub n_seeds: usize,
    pub gflops: Spread,
    pub params_millions: Spread,
    pub miou: Spread,
    pub var: Spread,
    pub hp_acc: Spread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub rows: Vec<TableRow>,
}

/// Groups records by method and aggregates each metric across seeds.
pub fn emit_table(records: &[RunRecord]) -> Result<Tables> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to tabulate".into()));
    }
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods.sort_by(|a, b| method_order(*a, *b));
    let rows = methods
        .into_iter()
        .map(|m| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.method == m).collect();
            let col = |f: &dyn Fn(&RunRecord) -> f64| Spread::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            TableRow {
                method: m,
                n_seeds: group.len(),
                gflops: col(&|r| r.gflops()),
                params_millions: col(&|r| r.params_millions()),
                miou: col(&|r| r.report.miou),
                var: col(&|r| r.report.var),
                hp_acc: col(&|r| r.report.hp_acc),
            }
        })
        .collect();
    Ok(Tables { rows })
}

impl Tables {
    /// Compute-oriented layout: cost next to accuracy.
    pub fn compute_text(&self) -> String {
        let mut s = String::from("| Method | GFLOPs | Param(M) | mIOU(%) | HP-Acc(%) |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.method,
                r.gflops.cell(r.n_seeds, 4),
                r.params_millions.cell(r.n_seeds, 4),
                r.miou.scaled(100.0).cell(r.n_seeds, 1),
                r.hp_acc.scaled(100.0).cell(r.n_seeds, 1)
            ));
        }
        s
    }

    /// Robustness-oriented layout: accuracy, variance and HP-Acc.
    pub fn robustness_text(&self) -> String {
        let mut s = String::from("| Method | mIOU(%) | Var(1e-3) | HP-Acc(%) |\n|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                r.method,
                r.miou.scaled(100.0).cell(r.n_seeds, 1),
                r.var.scaled(1000.0).cell(r.n_seeds, 2),
                r.hp_acc.scaled(100.0).cell(r.n_seeds, 1)
            ));
        }
        s
    }

    fn csv(&self, columns: &[(&str, fn(&TableRow) -> Spread)]) -> String {
        let mut s = String::from("method,r,n_seeds");
        for (name, _) in columns {
            s.push_str(&format!(",{name}_mean,{name}_min,{name}_max"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}", r.method, r.method.ratio().map_or(String::new(), |v| v.to_string()), r.n_seeds));
            for (_, f) in columns {
                let v = f(r);
                s.push_str(&format!(",{},{},{}", v.mean, v.min, v.max));
            }
            s.push('\n');
        }
        s
    }

    pub fn compute_csv(&self) -> String {
        self.csv(&[
            ("gflops", |r| r.gflops),
            ("params_m", |r| r.params_millions),
            ("miou", |r| r.miou),
            ("hp_acc", |r| r.hp_acc),
        ])
    }

    pub fn robustness_csv(&self) -> String {
        self.csv(&[("miou", |r| r.miou), ("var", |r| r.var), ("hp_acc", |r| r.hp_acc)])
    }

    /// Writes `compute.{md,csv}` and `robustness.{md,csv}`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("compute.md", self.compute_text()),
            ("compute.csv", self.compute_csv()),
            ("robustness.md", self.robustness_text()),
            ("robustness.csv", self.robustness_csv()),
        ];
        let mut out = Vec::new();
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}
