use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::Skeleton;

/// Joint trajectories of one recording: `F × 3J` coordinates in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    fps: f64,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self> {
        if !frames.is_matrix() || frames.rows() == 0 || frames.cols() % 3 != 0 {
            return Err(Error::Data(format!(
                "motion needs F ≥ 1 frames of 3·J coordinates, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Data("motion contains non-finite coordinates".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        self.frames.row(f)
    }

    /// Subtracts the root (joint 0) position from every joint of every frame.
    pub fn root_center(&mut self) {
        for f in 0..self.frames.rows() {
            let row = self.frames.row_mut(f);
            let root = [row[0], row[1], row[2]];
            for xyz in row.chunks_exact_mut(3) {
                for (v, r) in xyz.iter_mut().zip(root) {
                    *v -= r;
                }
            }
        }
    }
}

/// Length of every child→parent segment of a `3J` pose, in limb order.
pub fn limb_lengths(pose: &[f64], skeleton: &Skeleton) -> Vec<f64> {
    debug_assert_eq!(pose.len(), skeleton.dim());
    skeleton
        .limbs()
        .into_iter()
        .map(|(c, p)| {
            (0..3)
                .map(|k| (pose[3 * c + k] - pose[3 * p + k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn load_motion_file(path: impl AsRef<Path>) -> Result<(Skeleton, MotionSequence)> {
    read_motion(fs::File::open(path)?)
}

pub fn save_motion_file(
    path: impl AsRef<Path>,
    skeleton: &Skeleton,
    seq: &MotionSequence,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_motion(&mut out, skeleton, seq)?;
    out.flush()?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parses the text motion format, converting to meters and root-centering.
pub fn read_motion(reader: impl Read) -> Result<(Skeleton, MotionSequence)> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(parse_err(0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (ln, header) = next("header")?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("MOTION") || tokens.next() != Some("v1") {
        return Err(parse_err(ln, "header must start with `MOTION v1`"));
    }
    let (mut joints, mut fps, mut scale) = (None, None, None);
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(ln, format!("malformed header field `{tok}`")))?;
        match key {
            "joints" => {
                joints = Some(value.parse::<usize>().map_err(|_| {
                    parse_err(ln, format!("joint count `{value}` is not an integer"))
                })?)
            }
            "fps" => {
                fps = Some(
                    value
                        .parse::<f64>()
                        .map_err(|_| parse_err(ln, format!("fps `{value}` is not a number")))?,
                )
            }
            "unit" => {
                scale = Some(match value {
                    "m" => 1.0,
                    "mm" => 1e-3,
                    _ => return Err(parse_err(ln, format!("unknown unit `{value}`"))),
                })
            }
            _ => return Err(parse_err(ln, format!("unknown header field `{key}`"))),
        }
    }
    let (Some(j), Some(fps), Some(scale)) = (joints, fps, scale) else {
        return Err(parse_err(ln, "header needs joints=, fps= and unit="));
    };
    if j == 0 || !(fps.is_finite() && fps > 0.0) {
        return Err(parse_err(ln, "joints and fps must be positive"));
    }

    let (ln, names_line) = next("joint names")?;
    let names: Vec<String> = names_line.split_whitespace().map(String::from).collect();
    if names.len() != j {
        return Err(parse_err(
            ln,
            format!("expected {j} joint names, found {}", names.len()),
        ));
    }

    let (ln, parents_line) = next("parent indices")?;
    let parents = parents_line
        .split_whitespace()
        .map(|t| t.parse::<i64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| parse_err(ln, format!("bad parent index: {e}")))?;
    if parents.len() != j {
        return Err(parse_err(
            ln,
            format!("expected {j} parent indices, found {}", parents.len()),
        ));
    }
    let (skeleton, order) =
        Skeleton::from_parents(names, &parents).map_err(|e| parse_err(ln, e.to_string()))?;

    let mut data = Vec::new();
    let mut count = 0;
    for (i, line) in lines {
        let ln = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(ln, format!("bad coordinate: {e}")))?;
        if raw.len() != 3 * j {
            return Err(parse_err(
                ln,
                format!("expected {} coordinates, found {}", 3 * j, raw.len()),
            ));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(ln, "non-finite coordinate"));
        }
        for &old in &order {
            data.extend(raw[3 * old..3 * old + 3].iter().map(|v| v * scale));
        }
        count += 1;
    }
    if count == 0 {
        return Err(parse_err(3, "file has no frames"));
    }
    let mut seq = MotionSequence::new(Tensor::matrix(count, 3 * j, data), fps)?;
    seq.root_center();
    Ok((skeleton, seq))
}

/// Writes the text motion format in meters with 9 significant digits.
pub fn write_motion(mut w: impl Write, skeleton: &Skeleton, seq: &MotionSequence) -> Result<()> {
    if seq.dim() != skeleton.dim() {
        return Err(Error::dim(
            "write_motion",
            format!("{} coordinates for {} joints", seq.dim(), skeleton.joint_count()),
        ));
    }
    writeln!(
        w,
        "MOTION v1 joints={} fps={} unit=m",
        skeleton.joint_count(),
        seq.fps()
    )?;
    writeln!(w, "{}", skeleton.names().join(" "))?;
    let parents: Vec<String> = skeleton
        .parent_indices()
        .iter()
        .map(i64::to_string)
        .collect();
    writeln!(w, "{}", parents.join(" "))?;
    let mut line = String::new();
    for f in 0..seq.frame_count() {
        line.clear();
        for (k, v) in seq.frame(f).iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            // Normalize -0 so the file text is a fixed point of load/save.
            let v = if *v == 0.0 { 0.0 } else { *v };
            line.push_str(&format!("{v:.8e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
