//! Distribution statistics, diversity clustering and oracle-based reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sampling::GenerationResult;
use crate::token_space::TokenId;
use crate::toyworld::{oracle_fold, oracle_inverse_fold, self_consistency, ToyWorld};

/// Normalized token counts over all positions of all sequences.
pub fn residue_frequencies<S: AsRef<[TokenId]>>(seqs: &[S], vocab_size: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; vocab_size];
    let mut n = 0u64;
    for s in seqs {
        for &t in s.as_ref() {
            let t = t as usize;
            if t >= vocab_size {
                return Err(Error::arg(format!("token {t} is not a real token for V={vocab_size}")));
            }
            counts[t] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::arg("no tokens to count"));
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Mean over positions of the Euclidean distance between aligned tokens.
pub fn mean_position_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let len = a.len() / dim;
    let mut acc = 0.0;
    for i in 0..len {
        let d2: f64 = (0..dim).map(|k| (a[i * dim + k] - b[i * dim + k]).powi(2)).sum();
        acc += d2.sqrt();
    }
    acc / len as f64
}

/// Greedy leader clustering in input order; returns the number of leaders.
pub fn cluster_count<S: AsRef<[f64]>>(structs: &[S], dim: usize, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::arg("threshold must be > 0"));
    }
    if dim == 0 {
        return Err(Error::arg("dim must be >= 1"));
    }
    let Some(first) = structs.first() else { return Ok(0) };
    let n = first.as_ref().len();
    if n == 0 || n % dim != 0 {
        return Err(Error::arg("tracks must be non-empty [len, dim] arrays"));
    }
    if structs.iter().any(|s| s.as_ref().len() != n) {
        return Err(Error::arg("cluster_count needs tracks of equal length"));
    }
    let mut leaders: Vec<&[f64]> = Vec::new();
    for s in structs {
        let s = s.as_ref();
        if !leaders.iter().any(|l| mean_position_distance(l, s, dim) <= threshold) {
            leaders.push(s);
        }
    }
    Ok(leaders.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub token_frequencies: Vec<f64>,
    pub mean_self_consistency: f64,
    pub median_self_consistency: f64,
    /// `(threshold, clusters)`; samples are clustered within equal-length groups.
    pub cluster_counts: Vec<(f64, usize)>,
    /// Pooled RMS over positions of the continuous track against the
    /// oracle's expectation for the generated discrete track.
    pub fold_rms: f64,
    /// Agreement of the generated discrete track with the oracle decoding
    /// of the generated continuous track.
    pub invfold_accuracy: f64,
}

pub fn eval_suite(world: &ToyWorld, samples: &[GenerationResult], thresholds: &[f64]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("no samples to evaluate"));
    }
    let dim = world.dim;
    let seqs: Vec<&[TokenId]> = samples.iter().map(|s| s.seq.as_slice()).collect();
    let token_frequencies = residue_frequencies(&seqs, world.vocab_size)?;
    let mut sc = Vec::with_capacity(samples.len());
    let (mut sq, mut positions, mut agree) = (0.0, 0usize, 0usize);
    for s in samples {
        if s.dim != dim || s.struct_tokens.len() != s.seq.len() * dim {
            return Err(Error::arg("sample does not match the world's dimension"));
        }
        let z = s.struct_f64();
        sc.push(self_consistency(world, &s.seq, &z)?);
        let mean = oracle_fold(world, &s.seq);
        sq += mean.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        positions += s.len();
        let decoded = oracle_inverse_fold(world, &z)?;
        agree += decoded.iter().zip(&s.seq).filter(|(a, b)| a == b).count();
    }
    let mean_sc = sc.iter().sum::<f64>() / sc.len() as f64;
    let mut sorted = sc.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_sc = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };

    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.len()).or_default().push(s.struct_f64());
    }
    let mut cluster_counts = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let mut total = 0;
        for g in groups.values() {
            total += cluster_count(g, dim, th)?;
        }
        cluster_counts.push((th, total));
    }
    Ok(EvalReport {
        n_samples: samples.len(),
        token_frequencies,
        mean_self_consistency: mean_sc,
        median_self_consistency: median_sc,
        cluster_counts,
        fold_rms: (sq / positions as f64).sqrt(),
        invfold_accuracy: agree as f64 / positions as f64,
    })
}

impl EvalReport {
    /// `key = value` lines; floats use the shortest exact representation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        writeln!(s, "n_samples = {}", self.n_samples).unwrap();
        writeln!(s, "token_frequencies = {}", list(&self.token_frequencies)).unwrap();
        writeln!(s, "mean_self_consistency = {:?}", self.mean_self_consistency).unwrap();
        writeln!(s, "median_self_consistency = {:?}", self.median_self_consistency).unwrap();
        for (th, n) in &self.cluster_counts {
            writeln!(s, "cluster_count@{th:?} = {n}").unwrap();
        }
        writeln!(s, "fold_rms = {:?}", self.fold_rms).unwrap();
        writeln!(s, "invfold_accuracy = {:?}", self.invfold_accuracy).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |k: &str| Error::format("eval report", format!("bad value for {k}"));
        let num = |k: &str, v: &str| v.parse::<f64>().map_err(|_| bad(k));
        let mut r = EvalReport {
            n_samples: 0,
            token_frequencies: Vec::new(),
            mean_self_consistency: f64::NAN,
            median_self_consistency: f64::NAN,
            cluster_counts: Vec::new(),
            fold_rms: f64::NAN,
            invfold_accuracy: f64::NAN,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format("eval report", format!("malformed line {line:?}")))?;
            match k {
                "n_samples" => r.n_samples = v.parse().map_err(|_| bad(k))?,
                "token_frequencies" => {
                    r.token_frequencies = v.split(',').map(|x| num(k, x)).collect::<Result<_>>()?;
                }
                "mean_self_consistency" => r.mean_self_consistency = num(k, v)?,
                "median_self_consistency" => r.median_self_consistency = num(k, v)?,
                "fold_rms" => r.fold_rms = num(k, v)?,
                "invfold_accuracy" => r.invfold_accuracy = num(k, v)?,
                _ => match k.strip_prefix("cluster_count@") {
                    Some(th) => r.cluster_counts.push((num(k, th)?, v.parse().map_err(|_| bad(k))?)),
                    None => return Err(Error::format("eval report", format!("unknown key {k}"))),
                },
            }
        }
        Ok(r)
    }
}
