//! Plot-ready copies of sampled motions: flat CSV, JSON, or one SVG stick
//! figure sheet per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use clap::ValueEnum;
use divmotion::data::load_motion_file;
use divmotion::skeleton::Skeleton;
use serde::{Deserialize, Serialize};

use crate::commands::is_sample_file;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

/// The axis the orthographic camera looks along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum View {
    X,
    Y,
    Z,
}

impl View {
    /// Coordinate indices drawn as the horizontal and (upward) vertical axis.
    fn plane(self) -> (usize, usize) {
        match self {
            View::X => (2, 1),
            View::Y => (0, 2),
            View::Z => (0, 1),
        }
    }
}

/// Every sampled sequence of a `sample` output directory, in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseExport {
    pub joints: Vec<String>,
    pub parents: Vec<i64>,
    pub fps: f64,
    /// `samples[s][f]` holds the `3J` coordinates of frame `f` of sample `s`.
    pub samples: Vec<Vec<Vec<f64>>>,
}

pub fn load_samples(dir: &Path) -> Result<(Skeleton, PoseExport)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| {
            format!(
                "cannot read sample directory {}; run `divmotion sample` first",
                dir.display()
            )
        })?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| is_sample_file(p));
    files.sort();
    ensure!(
        !files.is_empty(),
        "{} holds no sample_*.motion files; run `divmotion sample` first",
        dir.display()
    );
    let mut skeleton: Option<Skeleton> = None;
    let mut fps = 0.0;
    let mut samples = Vec::with_capacity(files.len());
    for f in &files {
        let (skel, seq) =
            load_motion_file(f).with_context(|| format!("cannot load {}", f.display()))?;
        match &skeleton {
            Some(s) => ensure!(*s == skel, "{} uses a different skeleton", f.display()),
            None => skeleton = Some(skel),
        }
        fps = seq.fps();
        samples.push(
            (0..seq.frame_count())
                .map(|i| seq.frame(i).to_vec())
                .collect(),
        );
    }
    let skeleton = skeleton.expect("at least one file");
    let export = PoseExport {
        joints: skeleton.names().to_vec(),
        parents: skeleton.parent_indices(),
        fps,
        samples,
    };
    Ok((skeleton, export))
}

/// One row per frame and sample: `sample,frame,<joint>_x,<joint>_y,<joint>_z,...`.
pub fn to_csv(e: &PoseExport) -> String {
    let mut out = String::from("sample,frame");
    for j in &e.joints {
        let _ = write!(out, ",{j}_x,{j}_y,{j}_z");
    }
    out.push('\n');
    for (s, frames) in e.samples.iter().enumerate() {
        for (f, pose) in frames.iter().enumerate() {
            let _ = write!(out, "{s},{f}");
            for v in pose {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
    }
    out
}

const CELL: f64 = 240.0;
const PX_PER_METER: f64 = 100.0;

/// Stick figures of every sample at frame `f`, laid out on a grid; each pose
/// is one `<g>` holding a line per limb.
pub fn frame_svg(e: &PoseExport, skel: &Skeleton, f: usize, view: View) -> String {
    let n = e.samples.len();
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (u, v) = view.plane();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        cols as f64 * CELL,
        rows as f64 * CELL,
        cols as f64 * CELL,
        rows as f64 * CELL
    );
    for (s, frames) in e.samples.iter().enumerate() {
        let pose = &frames[f.min(frames.len() - 1)];
        let (cx, cy) = (
            (s % cols) as f64 * CELL + CELL / 2.0,
            (s / cols) as f64 * CELL + CELL / 2.0,
        );
        let px = |j: usize| {
            (
                cx + PX_PER_METER * pose[3 * j + u],
                cy - PX_PER_METER * pose[3 * j + v],
            )
        };
        let _ = writeln!(
            out,
            r#"<g class="pose" data-sample="{s}" stroke="black" stroke-width="2">"#
        );
        for (child, parent) in skel.limbs() {
            let (x1, y1) = px(parent);
            let (x2, y2) = px(child);
            let _ = writeln!(
                out,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the export files into `dest` and returns their paths.
pub fn export(dir: &Path, dest: &Path, format: Format, view: View) -> Result<Vec<PathBuf>> {
    let (skel, e) = load_samples(dir)?;
    fs::create_dir_all(dest)?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            let p = dest.join("poses.csv");
            fs::write(&p, to_csv(&e))?;
            written.push(p);
        }
        Format::Json => {
            let p = dest.join("poses.json");
            fs::write(&p, serde_json::to_string(&e)?)?;
            let back: PoseExport = serde_json::from_str(&fs::read_to_string(&p)?)?;
            ensure!(
                back == e,
                "written JSON export does not parse back to the same poses"
            );
            written.push(p);
        }
        Format::Svg => {
            let frames = e.samples.iter().map(Vec::len).max().unwrap_or(0);
            for f in 0..frames {
                let p = dest.join(format!("frame_{f:04}.svg"));
                fs::write(&p, frame_svg(&e, &skel, f, view))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
