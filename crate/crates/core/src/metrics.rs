//! Diversity and accuracy metrics over sampled futures.
//!
//! Every future is a `T × D` tensor compared as one flattened vector.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{PseudoGtSet, SampleWindow};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::generator::Generator;

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_shapes(op: &'static str, samples: &[Tensor], gt: &Tensor) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Contract(format!("{op} needs at least one sample")));
    }
    if let Some(s) = samples.iter().find(|s| s.shape() != gt.shape()) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", s.shape(), gt.shape())));
    }
    Ok(())
}

/// Mean L2 distance over all unordered sample pairs.
pub fn apd(samples: &[Tensor]) -> Result<f64> {
    let all: Vec<usize> = match samples.first() {
        Some(s) => (0..s.cols()).collect(),
        None => Vec::new(),
    };
    apd_columns(samples, &all)
}

/// [`apd`] restricted to the given coordinate columns of every frame.
pub fn apd_columns(samples: &[Tensor], columns: &[usize]) -> Result<f64> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::Contract(format!("APD needs K ≥ 2 samples, got {k}")));
    }
    if samples.iter().any(|s| s.shape() != samples[0].shape()) {
        return Err(Error::dim("apd", "samples differ in shape"));
    }
    let picked: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            (0..s.rows())
                .flat_map(|r| columns.iter().map(move |&c| s.get(r, c)))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += l2(&picked[i], &picked[j]);
        }
    }
    Ok(total * 2.0 / (k * (k - 1)) as f64)
}

/// Best-of-K full-sequence L2 error divided by the frame count `T`.
pub fn ade(samples: &[Tensor], gt: &Tensor) -> Result<f64> {
    check_shapes("ade", samples, gt)?;
    let best = samples
        .iter()
        .map(|s| l2(s.data(), gt.data()))
        .fold(f64::INFINITY, f64::min);
    Ok(best / gt.rows() as f64)
}

/// Best-of-K L2 error of the final frame.
pub fn fde(samples: &[Tensor], gt: &Tensor) -> Result<f64> {
    check_shapes("fde", samples, gt)?;
    let last = gt.rows() - 1;
    Ok(samples
        .iter()
        .map(|s| l2(s.row(last), gt.row(last)))
        .fold(f64::INFINITY, f64::min))
}

/// Mean of [`ade`] against each pseudo ground truth; `None` when there are none.
pub fn mmade(samples: &[Tensor], pseudo_gts: &[Tensor]) -> Result<Option<f64>> {
    multimodal(samples, pseudo_gts, ade)
}

/// Mean of [`fde`] against each pseudo ground truth; `None` when there are none.
pub fn mmfde(samples: &[Tensor], pseudo_gts: &[Tensor]) -> Result<Option<f64>> {
    multimodal(samples, pseudo_gts, fde)
}

fn multimodal(
    samples: &[Tensor],
    pseudo_gts: &[Tensor],
    metric: fn(&[Tensor], &Tensor) -> Result<f64>,
) -> Result<Option<f64>> {
    if pseudo_gts.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in pseudo_gts {
        total += metric(samples, p)?;
    }
    Ok(Some(total / pseudo_gts.len() as f64))
}

/// The last observed pose repeated for `t` frames.
pub fn zero_velocity_baseline(x: &Tensor, t: usize) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::Contract("zero-velocity baseline needs a non-empty past".into()));
    }
    let last = x.row(x.rows() - 1);
    Ok(Tensor::matrix(t, x.cols(), last.repeat(t)))
}

/// Samples, ground truth and pseudo ground truths of one test sequence.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub samples: Vec<Tensor>,
    pub gt: Tensor,
    pub pseudo_gts: Vec<Tensor>,
}

/// Metrics averaged over test sequences, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub apd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
    /// APD over each named coordinate subset.
    pub part_apd: Vec<(String, f64)>,
    pub samples: usize,
    pub sequences: usize,
    /// Sequences without pseudo ground truth, left out of MMADE and MMFDE.
    pub skipped_multimodal: usize,
}

/// Scores every case and averages over them.
pub fn evaluate(cases: &[EvalCase], parts: &[(String, Vec<usize>)]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sequence".into()));
    }
    let k = cases[0].samples.len();
    if cases.iter().any(|c| c.samples.len() != k) {
        return Err(Error::Contract("every sequence needs the same sample count".into()));
    }
    let n = cases.len() as f64;
    let (mut apd_sum, mut ade_sum, mut fde_sum) = (0.0, 0.0, 0.0);
    let (mut mmade_sum, mut mmfde_sum, mut multimodal) = (0.0, 0.0, 0usize);
    let mut part_sums = vec![0.0; parts.len()];
    for case in cases {
        apd_sum += apd(&case.samples)?;
        ade_sum += ade(&case.samples, &case.gt)?;
        fde_sum += fde(&case.samples, &case.gt)?;
        if let (Some(a), Some(f)) = (
            mmade(&case.samples, &case.pseudo_gts)?,
            mmfde(&case.samples, &case.pseudo_gts)?,
        ) {
            mmade_sum += a;
            mmfde_sum += f;
            multimodal += 1;
        }
        for (sum, (_, cols)) in part_sums.iter_mut().zip(parts) {
            *sum += apd_columns(&case.samples, cols)?;
        }
    }
    let mm = multimodal.max(1) as f64;
    Ok(EvalReport {
        apd: apd_sum / n,
        ade: ade_sum / n,
        fde: fde_sum / n,
        mmade: mmade_sum / mm,
        mmfde: mmfde_sum / mm,
        part_apd: parts
            .iter()
            .zip(part_sums)
            .map(|((name, _), s)| (name.clone(), s / n))
            .collect(),
        samples: k,
        sequences: cases.len(),
        skipped_multimodal: cases.len() - multimodal,
    })
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["apd", "ade", "fde", "mmade", "mmfde"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend(self.part_apd.iter().map(|(n, _)| format!("apd_{n}")));
        cols.extend(["samples", "sequences", "skipped_multimodal"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = [self.apd, self.ade, self.fde, self.mmade, self.mmfde]
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect();
        cols.extend(self.part_apd.iter().map(|(_, v)| format!("{v:.9}")));
        cols.extend([self.samples, self.sequences, self.skipped_multimodal].map(|v| v.to_string()));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} sequences, {} samples each (meters)",
            self.sequences, self.samples
        )?;
        for (name, v) in [
            ("APD", self.apd),
            ("ADE", self.ade),
            ("FDE", self.fde),
            ("MMADE", self.mmade),
            ("MMFDE", self.mmfde),
        ] {
            writeln!(f, "  {name:<12} {v:>10.4}")?;
        }
        for (name, v) in &self.part_apd {
            writeln!(f, "  APD {name:<8} {v:>10.4}")?;
        }
        if self.skipped_multimodal > 0 {
            writeln!(
                f,
                "  {} sequences had no pseudo ground truth",
                self.skipped_multimodal
            )?;
        }
        Ok(())
    }
}

/// Named coordinate columns of every part of the model's partition.
pub fn part_columns(model: &Generator) -> Vec<(String, Vec<usize>)> {
    (0..model.partition().len())
        .map(|i| (format!("part{}", i + 1), model.partition().coords(i)))
        .collect()
}

/// Test cases for `windows`: `k` independent root-to-leaf samples per window
/// (seeded by `seed` and the window index) with pseudo ground truths from
/// `pseudo`.
pub fn model_cases(
    model: &Generator,
    windows: &[SampleWindow],
    pseudo: &PseudoGtSet,
    k: usize,
    seed: u64,
) -> Result<Vec<EvalCase>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let set = model.controllable_sample(&w.past, &[], k, seed.wrapping_add(i as u64))?;
            Ok(EvalCase {
                samples: set.futures(),
                gt: w.future.clone(),
                pseudo_gts: pseudo.of(i).iter().map(|&j| windows[j].future.clone()).collect(),
            })
        })
        .collect()
}

/// Zero-velocity cases: `k` copies of the baseline per window.
pub fn baseline_cases(windows: &[SampleWindow], pseudo: &PseudoGtSet, k: usize) -> Result<Vec<EvalCase>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let b = zero_velocity_baseline(&w.past, w.future.rows())?;
            Ok(EvalCase {
                samples: vec![b; k],
                gt: w.future.clone(),
                pseudo_gts: pseudo.of(i).iter().map(|&j| windows[j].future.clone()).collect(),
            })
        })
        .collect()
}
