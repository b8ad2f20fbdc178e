//! The pipeline verbs. Each reads its upstream artifacts, writes and re-validates
//! its outputs, then records a manifest beside them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use divmotion::data::{
    load_motion_file, mine_pseudo_gt, save_motion_file, synth_generate, MotionSequence,
    PseudoGtSet, SampleWindow, SYNTH_FPS,
};
use divmotion::diff::Tensor;
use divmotion::generator::{Generator, LatentCode, PartitionSpec, PredictionSet};
use divmotion::kinematics::{
    angle_loss, default_angle_specs, load_angle_table, mine_ranges, save_angle_table,
};
use divmotion::metrics::{
    baseline_cases, evaluate, model_cases, part_columns, EvalCase, EvalReport,
};
use divmotion::prior::{gaussian_nll, limb_direction_rows, load_prior, save_prior, train_prior};
use divmotion::skeleton::Skeleton;
use divmotion::training::{train, windows_of, CHECKPOINT_FILE, GENERATOR_FILE, METRICS_FILE};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{sha256_file, FileRef, Recorder};
use crate::workspace::{require, SplitManifest, Workspace, SPLITS};

/// Everything a verb needs besides its own arguments.
pub struct RunContext {
    pub ws: Workspace,
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
}

impl RunContext {
    fn recorder(&self, command: &str, seed: u64) -> Result<Recorder> {
        let mut rec = Recorder::new(
            command,
            self.config_path.as_deref(),
            self.cfg.to_toml()?,
            seed,
        );
        if let Some(p) = &self.config_path {
            rec.input(p);
        }
        Ok(rec)
    }
}

fn stack_rows(parts: impl IntoIterator<Item = Tensor>, cols: usize) -> Tensor {
    let mut data = Vec::new();
    for t in parts {
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(data.len() / cols, cols, data)
}

/// Every `stride`-th frame of every sequence, stacked.
fn frames_of(seqs: &[MotionSequence], stride: usize) -> Tensor {
    let cols = seqs[0].dim();
    stack_rows(
        seqs.iter().flat_map(|s| {
            (0..s.frame_count())
                .step_by(stride)
                .map(|f| Tensor::matrix(1, s.dim(), s.frame(f).to_vec()))
        }),
        cols,
    )
}

pub fn synth(ctx: &RunContext) -> Result<()> {
    let s = &ctx.cfg.synth;
    ensure!(
        s.train > 0 && s.val > 0 && s.test > 0,
        "[synth] needs at least one sequence in every split"
    );
    ensure!(s.length >= 2, "[synth] length must be at least 2 frames");
    let mut rec = ctx.recorder("synth", s.seed)?;
    let skeleton = s.skeleton.skeleton();
    let seqs = synth_generate(s.seed, s.train + s.val + s.test, s.length, s.skeleton);
    let data = ctx.ws.data_dir();
    let mut splits = BTreeMap::new();
    let mut next = seqs.iter();
    for (split, n) in SPLITS.iter().zip([s.train, s.val, s.test]) {
        fs::create_dir_all(data.join(split))?;
        let mut refs = Vec::with_capacity(n);
        for i in 0..n {
            let rel = format!("{split}/seq_{i:03}.motion");
            let path = data.join(&rel);
            let seq = next.next().expect("one sequence per split slot");
            save_motion_file(&path, &skeleton, seq)?;
            let (back_skel, back) = load_motion_file(&path)
                .with_context(|| format!("written file {} does not reload", path.display()))?;
            ensure!(
                back_skel == skeleton && back.frame_count() == s.length,
                "written file {} reloads with a different shape",
                path.display()
            );
            refs.push(FileRef {
                path: rel,
                sha256: sha256_file(&path)?,
            });
            rec.output(path);
        }
        splits.insert(split.to_string(), refs);
    }
    let manifest = SplitManifest {
        skeleton: s.skeleton,
        seed: s.seed,
        length: s.length,
        fps: SYNTH_FPS,
        splits,
    };
    let split_path = ctx.ws.split_manifest();
    fs::write(&split_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    rec.output(&split_path);
    rec.finish(
        &data.join("manifest.json"),
        json!({"train": s.train, "val": s.val, "test": s.test, "length": s.length}),
    )?;
    println!(
        "wrote {} train / {} val / {} test sequences of {} frames to {}",
        s.train,
        s.val,
        s.test,
        s.length,
        data.display()
    );
    Ok(())
}

fn record_split(rec: &mut Recorder, paths: Vec<PathBuf>) {
    for p in paths {
        rec.input(p);
    }
}

pub fn train_prior_cmd(ctx: &RunContext) -> Result<()> {
    let p = &ctx.cfg.prior;
    ensure!(p.frame_stride > 0, "[prior] frame_stride must be positive");
    let mut rec = ctx.recorder("train-prior", p.seed)?;
    let (skel, train_seqs, train_paths) = ctx.ws.load_split("train")?;
    let (_, val_seqs, val_paths) = ctx.ws.load_split("val")?;
    let (_, test_seqs, test_paths) = ctx.ws.load_split("test")?;
    record_split(&mut rec, train_paths);
    record_split(&mut rec, val_paths);
    record_split(&mut rec, test_paths);

    let dirs =
        |seqs: &[MotionSequence]| limb_direction_rows(&frames_of(seqs, p.frame_stride), &skel);
    let (train_x, val_x, test_x) = (dirs(&train_seqs)?, dirs(&val_seqs)?, dirs(&test_seqs)?);
    info!(
        "prior: {} training poses, {} validation poses, dimension {}",
        train_x.rows(),
        val_x.rows(),
        train_x.cols()
    );
    let (flow, curve) = train_prior(&train_x, &val_x, &p.prior_config(), p.seed)?;

    let path = ctx.ws.prior();
    save_prior(&path, &flow, &skel)?;
    let reloaded = load_prior(&path, &skel).context("written prior does not reload")?;
    ensure!(
        reloaded == flow,
        "written prior reloads with different parameters"
    );
    rec.output(&path);
    let mut log = String::from("epoch,train_nll,val_nll\n");
    for e in &curve {
        log.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            e.epoch, e.train_nll, e.val_nll
        ));
    }
    fs::write(ctx.ws.prior_log(), log)?;
    rec.output(ctx.ws.prior_log());

    let flow_nll = flow.mean_nll(&test_x)?;
    let gauss = gaussian_nll(&test_x);
    let gain = (gauss - flow_nll) / gauss.abs();
    rec.finish(
        &ctx.ws.root().join("prior.manifest.json"),
        json!({"test_nll": flow_nll, "gaussian_nll": gauss, "relative_gain": gain}),
    )?;
    println!(
        "held-out NLL {flow_nll:.4} vs standard Gaussian {gauss:.4} ({:.1}% lower)",
        100.0 * gain
    );
    Ok(())
}

pub fn mine_angles(ctx: &RunContext) -> Result<()> {
    let margin = ctx.cfg.angles.margin;
    let mut rec = ctx.recorder("mine-angles", 0)?;
    let (skel, seqs, paths) = ctx.ws.load_split("train")?;
    record_split(&mut rec, paths);
    let poses = frames_of(&seqs, 1);
    let table = mine_ranges(&poses, &default_angle_specs(&skel), &skel, margin)?;
    let path = ctx.ws.angles();
    save_angle_table(&path, &table, &skel)?;
    let reloaded = load_angle_table(&path, &skel).context("written angle table does not reload")?;
    let violating = (0..poses.rows())
        .filter(|&f| angle_loss(poses.row(f), &reloaded) > 0.0)
        .count();
    ensure!(
        violating == 0,
        "{violating} mining frames violate the written angle table"
    );
    rec.output(&path);
    rec.finish(
        &ctx.ws.root().join("angles.manifest.json"),
        json!({"angles": table.len(), "frames": poses.rows(), "margin": margin}),
    )?;
    println!(
        "mined {} angle ranges from {} frames into {}",
        table.len(),
        poses.rows(),
        path.display()
    );
    Ok(())
}

pub fn train_cmd(ctx: &RunContext, name: &str) -> Result<()> {
    let cfg = &ctx.cfg.train;
    let mut rec = ctx.recorder("train", cfg.seed)?;
    let (skel, train_seqs, train_paths) = ctx.ws.load_split("train")?;
    let (_, val_seqs, val_paths) = ctx.ws.load_split("val")?;
    record_split(&mut rec, train_paths);
    record_split(&mut rec, val_paths);
    let prior_path = require(&ctx.ws.prior(), "train-prior")?;
    let angles_path = require(&ctx.ws.angles(), "mine-angles")?;
    let flow = load_prior(&prior_path, &skel)?;
    let table = load_angle_table(&angles_path, &skel)?;
    rec.checkpoint(prior_path);
    rec.checkpoint(angles_path);

    let dir = ctx.ws.model_dir(name);
    fs::create_dir_all(&dir)?;
    // A stale checkpoint from an earlier run must not be mistaken for this one.
    let stale = dir.join(CHECKPOINT_FILE);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    let config_path = dir.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?)?;
    let outcome = train(
        cfg,
        &skel,
        &train_seqs,
        &val_seqs,
        &flow,
        &table,
        Some(&dir),
    )?;

    let gen_path = dir.join(GENERATOR_FILE);
    let reloaded = Generator::load(&gen_path, &skel, Some((cfg.h, cfg.t, cfg.m)))
        .context("written generator does not reload")?;
    ensure!(
        reloaded.store().flat_values() == outcome.model.store().flat_values(),
        "written generator reloads with different parameters"
    );
    for f in [
        gen_path,
        dir.join(METRICS_FILE),
        config_path,
        dir.join(CHECKPOINT_FILE),
    ] {
        if f.exists() {
            rec.output(f);
        }
    }
    let last = outcome.log.last();
    let summary = json!({
        "epochs": outcome.log.len(),
        "final_loss": last.map(|e| e.total),
        "val_apd": last.and_then(|e| e.val_apd),
        "val_ade": last.and_then(|e| e.val_ade),
    });
    rec.finish(&dir.join("manifest.json"), summary)?;
    println!(
        "trained `{name}` for {} epochs into {}",
        outcome.log.len(),
        dir.display()
    );
    if let Some(e) = last {
        println!(
            "final loss {:.4}; validation APD {:?}, ADE {:?}",
            e.total, e.val_apd, e.val_ade
        );
    }
    Ok(())
}

fn load_model(
    ctx: &RunContext,
    name: &str,
    skel: &Skeleton,
    rec: &mut Recorder,
) -> Result<Generator> {
    let path = require(&ctx.ws.model_dir(name).join(GENERATOR_FILE), "train")?;
    let model = Generator::load(&path, skel, None)
        .with_context(|| format!("cannot load {}", path.display()))?;
    rec.checkpoint(path);
    Ok(model)
}

/// Latent codes of every sampled path, as written by `sample`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentsFile {
    pub mode: String,
    pub seed: u64,
    pub k: usize,
    pub frozen_parts: usize,
    pub input: String,
    pub start: usize,
    /// Per output file, the latent of every part along its path.
    pub paths: Vec<Vec<LatentCode>>,
}

pub struct SampleArgs {
    pub model: String,
    pub name: Option<String>,
    pub input: Option<PathBuf>,
    pub start: usize,
    pub k: Option<usize>,
    pub freeze_parts: Option<usize>,
    pub latents: Option<PathBuf>,
    pub path: usize,
}

pub fn sample(ctx: &RunContext, args: &SampleArgs) -> Result<()> {
    let seed = ctx.cfg.eval.seed;
    let mut rec = ctx.recorder("sample", seed)?;
    let (skel, seq, input) = match &args.input {
        Some(p) => {
            let (skel, seq) =
                load_motion_file(p).with_context(|| format!("cannot load {}", p.display()))?;
            (skel, seq, p.clone())
        }
        None => {
            let (skel, mut seqs, paths) = ctx.ws.load_split("test")?;
            (skel, seqs.swap_remove(0), paths[0].clone())
        }
    };
    rec.input(&input);
    let model = load_model(ctx, &args.model, &skel, &mut rec)?;
    let h = model.basis().past_len();
    ensure!(
        args.start + h <= seq.frame_count(),
        "{} has {} frames; the model observes {h} starting at frame {}",
        input.display(),
        seq.frame_count(),
        args.start
    );
    let x = seq.frames().slice_rows(args.start, args.start + h);
    let k = args.k.unwrap_or(ctx.cfg.train.k);
    ensure!(k > 0, "-k must be positive");

    let (set, mode) = match args.freeze_parts {
        None => {
            ensure!(
                args.latents.is_none(),
                "--latents only applies with --freeze-parts"
            );
            (model.sample_tree(&x, k, seed)?, "tree")
        }
        Some(jc) => {
            let frozen = if jc == 0 {
                Vec::new()
            } else {
                let Some(lp) = &args.latents else {
                    bail!("--freeze-parts {jc} needs --latents <file> from an earlier `divmotion sample`");
                };
                let file: LatentsFile = serde_json::from_str(
                    &fs::read_to_string(lp)
                        .with_context(|| format!("cannot read {}", lp.display()))?,
                )
                .with_context(|| format!("malformed latents file {}", lp.display()))?;
                rec.input(lp);
                let Some(path) = file.paths.get(args.path) else {
                    bail!(
                        "{} has {} paths, asked for path {}",
                        lp.display(),
                        file.paths.len(),
                        args.path
                    );
                };
                ensure!(
                    jc <= path.len(),
                    "{} stores {} latents per path, cannot freeze {jc}",
                    lp.display(),
                    path.len()
                );
                path[..jc].to_vec()
            };
            (
                model.controllable_sample(&x, &frozen, k, seed)?,
                "controllable",
            )
        }
    };

    let dir = ctx
        .ws
        .samples_dir(args.name.as_deref().unwrap_or(&args.model));
    fs::create_dir_all(&dir)?;
    for entry in fs::read_dir(&dir)? {
        let p = entry?.path();
        if is_sample_file(&p) {
            fs::remove_file(p)?;
        }
    }
    write_samples(&dir, &skel, &set, seq.fps(), &mut rec)?;
    let latents = LatentsFile {
        mode: mode.to_string(),
        seed,
        k,
        frozen_parts: args.freeze_parts.unwrap_or(0),
        input: input.display().to_string(),
        start: args.start,
        paths: (0..set.len())
            .map(|i| set.path_latents(i).into_iter().cloned().collect())
            .collect(),
    };
    let latents_path = dir.join("latents.json");
    fs::write(&latents_path, serde_json::to_string(&latents)?)?;
    rec.output(&latents_path);
    rec.finish(
        &dir.join("manifest.json"),
        json!({"mode": mode, "k": k, "files": set.len()}),
    )?;
    println!("wrote {} sampled motions to {}", set.len(), dir.display());
    Ok(())
}

pub fn is_sample_file(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".motion"))
}

fn write_samples(
    dir: &Path,
    skel: &Skeleton,
    set: &PredictionSet,
    fps: f64,
    rec: &mut Recorder,
) -> Result<()> {
    for (i, s) in set.sequences.iter().enumerate() {
        let path = dir.join(format!("sample_{i:04}.motion"));
        save_motion_file(&path, skel, &MotionSequence::new(s.clone(), fps)?)?;
        let (_, back) = load_motion_file(&path)
            .with_context(|| format!("written sample {} does not reload", path.display()))?;
        ensure!(
            back.frame_count() == s.rows(),
            "written sample {} is truncated",
            path.display()
        );
        rec.output(path);
    }
    Ok(())
}

/// Sampled futures of every evaluated test window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionDump {
    pub method: String,
    pub skeleton: String,
    pub h: usize,
    pub t: usize,
    pub windows: Vec<DumpWindow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpWindow {
    /// Index into the test split.
    pub source: usize,
    pub start: usize,
    /// `T × D` futures.
    pub samples: Vec<Tensor>,
}

pub enum EvalMethod {
    Model(String),
    ZeroVelocity,
    Predictions(PathBuf),
}

fn test_window(
    seqs: &[MotionSequence],
    source: usize,
    start: usize,
    h: usize,
    t: usize,
) -> Result<SampleWindow> {
    let Some(seq) = seqs.get(source) else {
        bail!(
            "prediction dump refers to test sequence {source}, the split has {}",
            seqs.len()
        );
    };
    ensure!(
        start + h + t <= seq.frame_count(),
        "prediction dump window {source}@{start} runs past the end of its sequence"
    );
    Ok(SampleWindow {
        source,
        start,
        past: seq.frames().slice_rows(start, start + h),
        future: seq.frames().slice_rows(start + h, start + h + t),
    })
}

fn with_pseudo(
    cases: Vec<EvalCase>,
    windows: &[SampleWindow],
    pseudo: &PseudoGtSet,
) -> Vec<EvalCase> {
    cases
        .into_iter()
        .enumerate()
        .map(|(i, c)| EvalCase {
            pseudo_gts: pseudo
                .of(i)
                .iter()
                .map(|&j| windows[j].future.clone())
                .collect(),
            ..c
        })
        .collect()
}

pub fn eval(ctx: &RunContext, method: &EvalMethod, dump: Option<&Path>) -> Result<()> {
    let ev = &ctx.cfg.eval;
    let cfg = &ctx.cfg.train;
    let mut rec = ctx.recorder("eval", ev.seed)?;
    let (skel, test, paths) = ctx.ws.load_split("test")?;
    record_split(&mut rec, paths);
    let samples = ev.samples;
    ensure!(samples >= 2, "[eval] samples must be at least 2 for APD");
    let stride_for = |t: usize| {
        if ev.window_stride == 0 {
            t
        } else {
            ev.window_stride
        }
    };

    let (label, cases, windows, parts) = match method {
        EvalMethod::Model(name) => {
            let model = load_model(ctx, name, &skel, &mut rec)?;
            let (h, t) = (model.basis().past_len(), model.basis().future_len());
            let windows = windows_of(&test, h, t, stride_for(t))?;
            ensure!(!windows.is_empty(), "no test sequence has {} frames", h + t);
            let pseudo = mine_pseudo_gt(&windows, cfg.pseudo_gt_threshold)?;
            let cases = model_cases(&model, &windows, &pseudo, samples, ev.seed)?;
            (name.clone(), cases, windows, part_columns(&model))
        }
        EvalMethod::ZeroVelocity => {
            let windows = windows_of(&test, cfg.h, cfg.t, stride_for(cfg.t))?;
            ensure!(
                !windows.is_empty(),
                "no test sequence has {} frames",
                cfg.h + cfg.t
            );
            let pseudo = mine_pseudo_gt(&windows, cfg.pseudo_gt_threshold)?;
            let cases = baseline_cases(&windows, &pseudo, samples)?;
            (
                "zero-velocity".to_string(),
                cases,
                windows,
                config_parts(ctx, &skel)?,
            )
        }
        EvalMethod::Predictions(path) => {
            let d: PredictionDump = serde_json::from_str(
                &fs::read_to_string(path)
                    .with_context(|| format!("cannot read {}", path.display()))?,
            )
            .with_context(|| format!("malformed prediction dump {}", path.display()))?;
            rec.input(path);
            ensure!(
                d.skeleton == skel.fingerprint(),
                "prediction dump uses a different skeleton than the test split"
            );
            ensure!(!d.windows.is_empty(), "prediction dump has no windows");
            let windows = d
                .windows
                .iter()
                .map(|w| test_window(&test, w.source, w.start, d.h, d.t))
                .collect::<Result<Vec<_>>>()?;
            let pseudo = mine_pseudo_gt(&windows, cfg.pseudo_gt_threshold)?;
            let cases = d
                .windows
                .into_iter()
                .zip(&windows)
                .map(|(dw, w)| EvalCase {
                    samples: dw.samples,
                    gt: w.future.clone(),
                    pseudo_gts: Vec::new(),
                })
                .collect();
            let cases = with_pseudo(cases, &windows, &pseudo);
            (d.method, cases, windows, config_parts(ctx, &skel)?)
        }
    };

    let report = evaluate(&cases, &parts)?;
    let mut rows = vec![(label.clone(), report.clone())];
    if let EvalMethod::Model(_) = method {
        let pseudo = mine_pseudo_gt(&windows, cfg.pseudo_gt_threshold)?;
        let base = evaluate(&baseline_cases(&windows, &pseudo, samples)?, &parts)?;
        rows.push(("zero-velocity".to_string(), base));
    }

    let dir = ctx.ws.eval_dir();
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join(format!("{label}.csv"));
    fs::write(&csv_path, eval_csv(&rows))?;
    rec.output(&csv_path);
    if let Some(dump_path) = dump {
        let dump = PredictionDump {
            method: label.clone(),
            skeleton: skel.fingerprint(),
            h: windows[0].past.rows(),
            t: windows[0].future.rows(),
            windows: cases
                .iter()
                .zip(&windows)
                .map(|(c, w)| DumpWindow {
                    source: w.source,
                    start: w.start,
                    samples: c.samples.clone(),
                })
                .collect(),
        };
        if let Some(parent) = dump_path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(dump_path, serde_json::to_string(&dump)?)?;
        rec.output(dump_path);
    }
    let summary = serde_json::to_value(
        rows.iter()
            .map(|(name, r)| (name.clone(), r.clone()))
            .collect::<BTreeMap<_, _>>(),
    )?;
    rec.finish(&dir.join(format!("{label}.manifest.json")), summary)?;
    for (name, r) in &rows {
        println!("{name}: {r}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn config_parts(ctx: &RunContext, skel: &Skeleton) -> Result<Vec<(String, Vec<usize>)>> {
    let partition = PartitionSpec::preset(ctx.cfg.train.partition, skel)?;
    Ok((0..partition.len())
        .map(|i| (format!("part{}", i + 1), partition.coords(i)))
        .collect())
}

pub fn eval_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    if let Some((_, first)) = rows.first() {
        out.push_str(&format!("method,{}\n", first.csv_header()));
    }
    for (name, r) in rows {
        out.push_str(&format!("{name},{}\n", r.csv_row()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parses a CSV written by `eval` into `(method, column → value)` rows.
    pub fn read_eval_csv(text: &str) -> Result<Vec<(String, BTreeMap<String, f64>)>> {
        let mut lines = text.lines();
        let Some(header) = lines.next() else {
            bail!("empty evaluation CSV");
        };
        let cols: Vec<&str> = header.split(',').collect();
        lines
            .map(|line| {
                let cells: Vec<&str> = line.split(',').collect();
                ensure!(
                    cells.len() == cols.len(),
                    "ragged evaluation CSV row `{line}`"
                );
                let values = cols[1..]
                    .iter()
                    .zip(&cells[1..])
                    .map(|(c, v)| Ok((c.to_string(), v.parse::<f64>()?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok((cells[0].to_string(), values))
            })
            .collect()
    }

    #[test]
    fn eval_csv_round_trips() {
        let r = EvalReport {
            apd: 1.5,
            ade: 0.25,
            fde: 0.5,
            mmade: 0.75,
            mmfde: 1.0,
            part_apd: vec![("part1".into(), 0.0), ("part2".into(), 2.0)],
            samples: 4,
            sequences: 3,
            skipped_multimodal: 0,
        };
        let text = eval_csv(&[("model".into(), r.clone()), ("zero-velocity".into(), r)]);
        let rows = read_eval_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].0, "zero-velocity");
        assert_eq!(rows[0].1["apd"], 1.5);
        assert_eq!(rows[0].1["apd_part2"], 2.0);
        assert_eq!(rows[0].1["samples"], 4.0);
    }

    #[test]
    fn sample_file_pattern() {
        assert!(is_sample_file(Path::new("x/sample_0001.motion")));
        assert!(!is_sample_file(Path::new("x/latents.json")));
        assert!(!is_sample_file(Path::new("x/seq_000.motion")));
    }

    #[test]
    fn strided_frames_stack_in_order() {
        let seq = |v: f64| {
            MotionSequence::new(
                Tensor::matrix(3, 3, (0..9).map(|i| v + i as f64).collect()),
                10.0,
            )
            .unwrap()
        };
        let f = frames_of(&[seq(0.0), seq(100.0)], 2);
        assert_eq!(f.rows(), 4);
        assert_eq!(f.row(1), &[6.0, 7.0, 8.0]);
        assert_eq!(f.row(2), &[100.0, 101.0, 102.0]);
    }
}
