//! Similarity metrics, group-difference matrices, domain block tables and
//! the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fncgen_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, DomainPartition, SubjectRecord};
use crate::error::{contract_err, Error, Result};
use crate::generator::Generator;
use crate::types::{ClassLabel, DiffMatrix, FncMatrix};

/// Variances or norms below this make a similarity undefined.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Off-diagonal upper triangle, row-major (i < j).
pub fn triangle(fnc: &FncMatrix) -> Vec<f64> {
    triangle_of(fnc.values(), fnc.order())
}

pub fn triangle_of(values: &[f64], n: usize) -> Vec<f64> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| values[i * n + j])).collect()
}

/// A similarity value; degenerate inputs report 0 with the flag set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

impl Similarity {
    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }

    fn of(value: f64) -> Self {
        Self {
            value: value.clamp(-1.0, 1.0),
            degenerate: false,
        }
    }
}

fn check_lengths(a: &[f64], b: &[f64], min: usize, op: &str) -> Result<()> {
    if a.len() != b.len() {
        return contract_err(format!("{op}: lengths {} and {} differ", a.len(), b.len()));
    }
    if a.len() < min {
        return contract_err(format!("{op}: needs at least {min} entries, got {}", a.len()));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Similarity> {
    check_lengths(a, b, 2, "pearson")?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va / n < DEGENERATE_EPS || vb / n < DEGENERATE_EPS {
        return Ok(Similarity::degenerate());
    }
    // sqrt(x·x) == x in IEEE arithmetic, so identical inputs give exactly 1.
    Ok(Similarity::of(cov / (va * vb).sqrt()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<Similarity> {
    check_lengths(a, b, 1, "cosine")?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na.sqrt() <= DEGENERATE_EPS || nb.sqrt() <= DEGENERATE_EPS {
        return Ok(Similarity::degenerate());
    }
    Ok(Similarity::of(dot / (na * nb).sqrt()))
}

/// Mean over HC minus mean over SZ.
pub fn group_difference(fncs: &[&FncMatrix], labels: &[ClassLabel]) -> Result<DiffMatrix> {
    let Some(first) = fncs.first() else {
        return contract_err("group difference of an empty set");
    };
    if fncs.len() != labels.len() {
        return contract_err(format!("{} matrices for {} labels", fncs.len(), labels.len()));
    }
    let n = first.order();
    let mut sums = [vec![0.0; n * n], vec![0.0; n * n]];
    let mut counts = [0usize; 2];
    for (f, c) in fncs.iter().zip(labels) {
        if f.order() != n {
            return contract_err(format!("matrix orders {} and {n} differ", f.order()));
        }
        counts[c.index()] += 1;
        sums[c.index()].iter_mut().zip(f.values()).for_each(|(s, v)| *s += v);
    }
    for c in ClassLabel::ALL {
        if counts[c.index()] == 0 {
            return contract_err(format!("group difference needs both classes; no {c} subjects"));
        }
    }
    for k in 0..2 {
        let inv = 1.0 / counts[k] as f64;
        sums[k].iter_mut().for_each(|s| *s *= inv);
    }
    DiffMatrix::between(&sums[0], &sums[1], n)
}

/// Entries of the (P, Q) sub-block; the upper triangle when P == Q.
pub fn block_entries(m: &DiffMatrix, p: (usize, usize), q: (usize, usize)) -> Vec<f64> {
    let mut out = Vec::new();
    for i in p.0..p.0 + p.1 {
        for j in q.0..q.0 + q.1 {
            if p != q || j > i {
                out.push(m.get(i, j));
            }
        }
    }
    out
}

pub fn block_key(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}|{b}")
    } else {
        format!("{b}|{a}")
    }
}

/// Pearson similarity per unordered domain pair, keyed "P|Q" with P ≤ Q.
pub fn block_similarity(gen: &DiffMatrix, real: &DiffMatrix, part: &DomainPartition) -> Result<BTreeMap<String, Similarity>> {
    if gen.n != real.n {
        return contract_err(format!("matrix orders {} and {} differ", gen.n, real.n));
    }
    part.validate(gen.n)?;
    let mut table = BTreeMap::new();
    for (a, pa) in part.blocks.iter().enumerate() {
        for pb in &part.blocks[a..] {
            let (p, q) = ((pa.start, pa.len), (pb.start, pb.len));
            let (x, y) = (block_entries(gen, p, q), block_entries(real, p, q));
            let sim = if x.len() < 2 { Similarity::degenerate() } else { pearson(&x, &y)? };
            table.insert(block_key(&pa.name, &pb.name), sim);
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub class: ClassLabel,
    pub pearson: Similarity,
    pub cosine: Similarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: Option<usize>,
    pub n_subjects: usize,
    pub subjects: Vec<SubjectMetrics>,
    pub mean_subject_pearson: f64,
    pub mean_subject_cosine: f64,
    pub group_diff_pearson: Similarity,
    pub group_diff_cosine: Similarity,
    pub block_table: BTreeMap<String, Similarity>,
    pub generated_group_diff: DiffMatrix,
    pub real_group_diff: DiffMatrix,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn summary(&self) -> String {
        format!(
            "subjects={} group_diff_pearson={:.4} group_diff_cosine={:.4} subject_pearson={:.4} subject_cosine={:.4}",
            self.n_subjects,
            self.group_diff_pearson.value,
            self.group_diff_cosine.value,
            self.mean_subject_pearson,
            self.mean_subject_cosine
        )
    }
}

/// Scores generated against real matrices for the given subjects, which are
/// processed in id order. `generated[i]` belongs to `subjects[i]`.
pub fn evaluate_outputs(subjects: &[&SubjectRecord], generated: &[FncMatrix], part: &DomainPartition) -> Result<EvalReport> {
    if subjects.is_empty() {
        return contract_err("evaluation split is empty");
    }
    if subjects.len() != generated.len() {
        return contract_err(format!("{} outputs for {} subjects", generated.len(), subjects.len()));
    }
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.sort_by(|&a, &b| subjects[a].id.cmp(&subjects[b].id));
    let mut rows = Vec::with_capacity(order.len());
    for &i in &order {
        let (s, g) = (subjects[i], &generated[i]);
        if g.order() != s.fnc.order() {
            return contract_err(format!("generated order {} for subject {} of order {}", g.order(), s.id, s.fnc.order()));
        }
        let (ty, tg) = (triangle(&s.fnc), triangle(g));
        rows.push(SubjectMetrics {
            id: s.id.clone(),
            class: s.class,
            pearson: pearson(&tg, &ty)?,
            cosine: cosine(&tg, &ty)?,
        });
    }
    let labels: Vec<ClassLabel> = order.iter().map(|&i| subjects[i].class).collect();
    let real: Vec<&FncMatrix> = order.iter().map(|&i| &subjects[i].fnc).collect();
    let gen: Vec<&FncMatrix> = order.iter().map(|&i| &generated[i]).collect();
    let real_diff = group_difference(&real, &labels)?;
    let gen_diff = group_difference(&gen, &labels)?;
    let n = real_diff.n;
    let (tg, tr) = (triangle_of(&gen_diff.values, n), triangle_of(&real_diff.values, n));
    let count = rows.len() as f64;
    Ok(EvalReport {
        fold: None,
        n_subjects: rows.len(),
        mean_subject_pearson: rows.iter().map(|r| r.pearson.value).sum::<f64>() / count,
        mean_subject_cosine: rows.iter().map(|r| r.cosine.value).sum::<f64>() / count,
        subjects: rows,
        group_diff_pearson: pearson(&tg, &tr)?,
        group_diff_cosine: cosine(&tg, &tr)?,
        block_table: block_similarity(&gen_diff, &real_diff, part)?,
        generated_group_diff: gen_diff,
        real_group_diff: real_diff,
        config: serde_json::Value::Null,
        seeds: BTreeMap::new(),
    })
}

/// Evaluates any subject → matrix model.
pub fn evaluate_with(
    subjects: &[&SubjectRecord],
    part: &DomainPartition,
    mut model: impl FnMut(&SubjectRecord) -> Result<FncMatrix>,
) -> Result<EvalReport> {
    let generated = subjects.iter().map(|s| model(s)).collect::<Result<Vec<_>>>()?;
    evaluate_outputs(subjects, &generated, part)
}

pub const EVAL_BATCH: usize = 16;

/// Generates every subject conditioned on its true class, in batches.
pub fn generate_all(gen: &Generator, subjects: &[&SubjectRecord]) -> Result<Vec<FncMatrix>> {
    let mut out = Vec::with_capacity(subjects.len());
    for chunk in subjects.chunks(EVAL_BATCH) {
        let patches: Vec<Tensor> = chunk.iter().map(|s| gen.patches(&s.volume)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = patches.iter().collect();
        let classes: Vec<ClassLabel> = chunk.iter().map(|s| s.class).collect();
        out.extend(gen.generate_patches(&refs, &classes)?);
    }
    Ok(out)
}

pub fn evaluate(gen: &Generator, subjects: &[&SubjectRecord], part: &DomainPartition) -> Result<EvalReport> {
    if subjects.is_empty() {
        return contract_err("evaluation split is empty");
    }
    evaluate_outputs(subjects, &generate_all(gen, subjects)?, part)
}

/// Formats with 9 significant digits in plain decimal notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn matrix_csv(values: &[f64], n: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(n) {
        let cells: Vec<String> = row.iter().map(|&v| format_sig9(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn write_matrix_csv(path: &Path, values: &[f64], n: usize) -> Result<()> {
    if values.len() != n * n {
        return contract_err(format!("matrix of order {n} needs {} values", n * n));
    }
    fs::write(path, matrix_csv(values, n)).map_err(|e| Error::io(path, e))
}
