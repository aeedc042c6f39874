//! Continual-learning metrics over a success matrix, and structure
//! diagnostics of the fusion layer.
//!
//! `R[i][j]` is the success rate of task `i` after stage `j`. A task's row is
//! defined from the stage that introduced it onwards; earlier cells are
//! absent and excluded from every sum.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::{Instruction, Observation, Policy};

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessMatrix {
    cells: Vec<Vec<Option<f64>>>,
    first: Vec<usize>,
}

/// Label of stage `j` in files and tables.
pub fn stage_label(j: usize) -> String {
    if j == 0 {
        "base".into()
    } else {
        format!("step{j}")
    }
}

impl SuccessMatrix {
    /// Validates shape, value range and that each row is defined from its
    /// first stage through the last stage.
    pub fn new(cells: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let stages = cells.first().map_or(0, Vec::len);
        if cells.is_empty() || stages == 0 {
            return Err(Error::Format("success matrix is empty".into()));
        }
        let mut first = Vec::with_capacity(cells.len());
        for (i, row) in cells.iter().enumerate() {
            if row.len() != stages {
                return Err(Error::Format(format!("row {i} has {} cells, expected {stages}", row.len())));
            }
            let Some(s) = row.iter().position(Option::is_some) else {
                return Err(Error::Format(format!("row {i} has no defined cell")));
            };
            if row[s..].iter().any(Option::is_none) {
                return Err(Error::Format(format!("row {i} has a gap after stage {s}")));
            }
            if let Some(v) = row.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Format(format!("row {i} has value {v} outside [0, 1]")));
            }
            first.push(s);
        }
        Ok(Self { cells, first })
    }

    /// Square upper-triangular matrix with one task per stage.
    pub fn upper_triangular(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cells = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| (0..n).map(|j| if j >= i { r.get(j).copied() } else { None }).collect())
            .collect();
        Self::new(cells)
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn stages(&self) -> usize {
        self.cells[0].len()
    }

    pub fn get(&self, task: usize, stage: usize) -> Option<f64> {
        self.cells[task][stage]
    }

    /// Stage that introduced `task`.
    pub fn first_stage(&self, task: usize) -> usize {
        self.first[task]
    }

    fn row_values(&self, task: usize) -> impl Iterator<Item = f64> + '_ {
        self.cells[task].iter().flatten().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for j in 0..self.stages() {
            out.push(',');
            out.push_str(&stage_label(j));
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "T{i}");
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    let _ = write!(out, "{v:.6}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let width = reader
            .headers()
            .map_err(|e| Error::Format(e.to_string()))?
            .len();
        if width < 2 {
            return Err(Error::Format("R.csv needs a task column and at least one stage".into()));
        }
        let mut cells = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Format(e.to_string()))?;
            let row = record
                .iter()
                .skip(1)
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::Format(format!("row {i}: `{c}` is not a number")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(row);
        }
        Self::new(cells)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean over tasks of each task's mean success from its first stage on.
pub fn auc(r: &SuccessMatrix) -> f64 {
    mean((0..r.tasks()).map(|i| mean(r.row_values(i)).unwrap_or(0.0))).unwrap_or(0.0)
}

/// Mean success of each task right after the stage that introduced it.
pub fn fwt(r: &SuccessMatrix) -> f64 {
    mean((0..r.tasks()).map(|i| r.cells[i][r.first[i]].unwrap_or(0.0))).unwrap_or(0.0)
}

/// Mean over tasks with later stages of the average drop from the
/// just-learned value.
pub fn nbt(r: &SuccessMatrix) -> f64 {
    let per_task = (0..r.tasks()).filter_map(|i| {
        let s = r.first[i];
        let just = r.cells[i][s]?;
        mean(r.cells[i][s + 1..].iter().flatten().map(|v| just - v))
    });
    mean(per_task).unwrap_or(0.0)
}

/// Mean success over all tasks after the final stage.
pub fn faa(r: &SuccessMatrix) -> f64 {
    let last = r.stages() - 1;
    mean((0..r.tasks()).filter_map(|i| r.cells[i][last])).unwrap_or(0.0)
}

/// Mean over stages of the average success on every task seen so far.
pub fn aa(r: &SuccessMatrix) -> f64 {
    aa_from_stage_averages(&per_stage_all(r))
}

pub fn aa_from_stage_averages(stage_averages: &[f64]) -> f64 {
    mean(stage_averages.iter().copied()).unwrap_or(0.0)
}

/// Per-stage average over all tasks seen so far.
pub fn per_stage_all(r: &SuccessMatrix) -> Vec<f64> {
    (0..r.stages())
        .map(|j| mean((0..r.tasks()).filter_map(|i| r.cells[i][j])).unwrap_or(0.0))
        .collect()
}

/// Per-stage average over tasks introduced at earlier stages; absent at the
/// base stage.
pub fn per_stage_old(r: &SuccessMatrix) -> Vec<Option<f64>> {
    (0..r.stages())
        .map(|j| mean((0..r.tasks()).filter(|&i| r.first[i] < j).filter_map(|i| r.cells[i][j])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub fwt: f64,
    pub nbt: f64,
    pub faa: f64,
    pub aa: f64,
    pub per_stage_all: Vec<f64>,
    pub per_stage_old: Vec<Option<f64>>,
}

impl Metrics {
    pub fn compute(r: &SuccessMatrix) -> Self {
        Self {
            auc: auc(r),
            fwt: fwt(r),
            nbt: nbt(r),
            faa: faa(r),
            aa: aa(r),
            per_stage_all: per_stage_all(r),
            per_stage_old: per_stage_old(r),
        }
    }

    /// Text table with one row per stage (Old and All averages) and the
    /// aggregate metrics, in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>7} {:>7}", "stage", "Old", "All");
        for (j, all) in self.per_stage_all.iter().enumerate() {
            let old = self.per_stage_old[j].map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(out, "{:<8} {:>7} {:>7.1}", stage_label(j), old, 100.0 * all);
        }
        let _ = writeln!(
            out,
            "AUC {:.1}  FWT {:.1}  NBT {:.1}  FAA {:.1}  AA {:.1}",
            100.0 * self.auc,
            100.0 * self.fwt,
            100.0 * self.nbt,
            100.0 * self.faa,
            100.0 * self.aa
        );
        out
    }
}

/// Shannon entropy (nats) of a distribution; zero-mass entries contribute 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mean entropy of the fusion attention over patches across the probes.
pub fn attention_diffusion(policy: &Policy, probes: &[(Observation, Instruction)]) -> Result<f64> {
    let latents = encode_probes(policy, probes)?;
    Ok(mean(latents.iter().map(|l| entropy(&l.attn))).unwrap_or(0.0))
}

fn encode_probes(policy: &Policy, probes: &[(Observation, Instruction)]) -> Result<Vec<crate::policy::LatentPair>> {
    if probes.is_empty() {
        return Err(Error::contract("empty probe set"));
    }
    let items: Vec<(&Observation, &Instruction)> = probes.iter().map(|(o, i)| (o, i)).collect();
    policy.encode_many(&items)
}

/// Pairwise cosine similarity of `z_fused` over the probes.
pub fn representation_similarity(policy: &Policy, probes: &[(Observation, Instruction)]) -> Result<Vec<Vec<f64>>> {
    let latents = encode_probes(policy, probes)?;
    let z: Vec<&[f64]> = latents.iter().map(|l| l.z_fused.as_slice()).collect();
    Ok(cosine_matrix(&z))
}

pub fn cosine_matrix(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    rows.iter()
        .enumerate()
        .map(|(a, ra)| {
            rows.iter()
                .enumerate()
                .map(|(b, rb)| ra.iter().zip(*rb).map(|(x, y)| x * y).sum::<f64>() / (norms[a] * norms[b]))
                .collect()
        })
        .collect()
}

/// Frobenius distance between two similarity matrices of the same size.
pub fn similarity_drift(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape("similarity_drift", "matrix sizes differ"));
    }
    Ok(a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)))
        .sum::<f64>()
        .sqrt())
}
