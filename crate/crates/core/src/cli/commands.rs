use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::{CliError, QuerySet, Session};
use crate::dataio::{
    flow_oracle, parse_pose_file, read_flow, read_frame, synth_sequence, write_flow, write_pgm,
    write_pose_file, FlowField, Frame, ImageFormat,
};
use crate::evaluation::{
    emit_axes_csv, emit_distance_profile, emit_xz_svg, kitti_errors, table1_report, table1_tsv, ReportRow,
    KITTI_LENGTHS,
};
use crate::geometry::Trajectory;
use crate::mapping::{self, select_keyframes, MapModel, MapSample};
use crate::odometry::{self, integrate, VoModel, VoSample};
use crate::relocalization::{self, load_map, query, save_map, search, EmbeddingMap, OracleFlow};

fn require<'a>(key: &str, path: &'a Path) -> Result<&'a Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::missing(key, path))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn out_file(s: &Session, name: &str) -> PathBuf {
    s.cfg.paths.out.join(name)
}

fn frame_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}.pgm"))
}

fn flow_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("{id:06}.flo"))
}

fn load_poses(s: &Session) -> Result<Trajectory, CliError> {
    let path = require("paths.poses", &s.cfg.paths.poses)?;
    Ok(parse_pose_file(BufReader::new(File::open(path)?))?)
}

fn load_frames(s: &Session, traj: &Trajectory, ids: &[u64]) -> Result<Vec<Frame>, CliError> {
    let dir = require("paths.sequence", &s.cfg.paths.sequence)?;
    ids.par_iter()
        .map(|&id| {
            let path = frame_path(dir, id);
            let file = File::open(require("paths.sequence", &path)?)?;
            let mut frame = read_frame(&mut BufReader::new(file), ImageFormat::Pnm, id)?;
            frame.pose = traj.pose_of(id).copied();
            Ok(frame)
        })
        .collect()
}

/// Flow from each pose-file frame to the next, in order.
fn load_flows(s: &Session, traj: &Trajectory) -> Result<Vec<FlowField>, CliError> {
    let dir = require("paths.flow", &s.cfg.paths.flow)?;
    let entries = traj.entries();
    entries[..entries.len().saturating_sub(1)]
        .par_iter()
        .map(|(id, _)| {
            let path = flow_path(dir, *id);
            let file = File::open(require("paths.flow", &path)?)?;
            Ok(read_flow(&mut BufReader::new(file))?)
        })
        .collect()
}

fn load_vo(s: &Session) -> Result<VoModel, CliError> {
    let path = require("paths.vo_checkpoint", &s.cfg.paths.vo_checkpoint)?;
    let mut model = VoModel::new(s.cfg.vo.clone(), s.cfg.seed)?;
    model.load(&mut BufReader::new(File::open(path)?))?;
    Ok(model)
}

fn load_map_model(s: &Session) -> Result<MapModel, CliError> {
    let path = require("paths.map_checkpoint", &s.cfg.paths.map_checkpoint)?;
    let mut model = MapModel::new(s.cfg.map.clone(), s.cfg.seed)?;
    model.load(&mut BufReader::new(File::open(path)?))?;
    Ok(model)
}

fn load_embedding_map(s: &Session, model: &MapModel) -> Result<EmbeddingMap, CliError> {
    let path = require("paths.map_file", &s.cfg.paths.map_file)?;
    Ok(load_map(&mut BufReader::new(File::open(path)?), Some(&model.fingerprint()))?)
}

fn keyframe_ids(s: &Session, traj: &Trajectory) -> Result<Vec<u64>, CliError> {
    Ok(select_keyframes(traj, s.cfg.keyframes)?)
}

/// Reads a `key=value` results file written by another subcommand.
fn read_results(key: &str, path: &Path) -> Result<std::collections::BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(require(key, path)?)?;
    super::parse_pairs(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.join("; "))))
}

pub fn synth(s: &Session) -> Result<(), CliError> {
    let (frames, traj) = s.timed("render", || Ok(synth_sequence(&s.cfg.world, s.cfg.seed)?))?;
    let dir = &s.cfg.paths.sequence;
    fs::create_dir_all(dir)?;
    frames.par_iter().try_for_each(|f| -> Result<(), CliError> {
        let mut w = create(&frame_path(dir, f.frame_id))?;
        write_pgm(&f.image, &mut w)?;
        w.flush()?;
        Ok(())
    })?;
    let mut w = create(&s.cfg.paths.poses)?;
    write_pose_file(&traj, &mut w)?;
    w.flush()?;
    s.say(format!("wrote {} frames to {}", frames.len(), dir.display()));
    Ok(())
}

pub fn flow_precompute(s: &Session) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let dir = &s.cfg.paths.flow;
    fs::create_dir_all(dir)?;
    let entries = traj.entries();
    s.timed("flow", || {
        entries
            .par_windows(2)
            .try_for_each(|w| -> Result<(), CliError> {
                let field = flow_oracle(&s.cfg.world, &w[0].1, &w[1].1)?;
                let mut out = create(&flow_path(dir, w[0].0))?;
                write_flow(&field, &mut out)?;
                out.flush()?;
                Ok(())
            })
    })?;
    s.say(format!("wrote {} flow fields to {}", entries.len().saturating_sub(1), dir.display()));
    Ok(())
}

pub fn train_vo(s: &Session) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let flows = load_flows(s, &traj)?;
    let samples: Vec<VoSample> = flows
        .into_iter()
        .zip(traj.relatives())
        .map(|(flow, gt)| VoSample { flow, gt })
        .collect();
    let mut model = VoModel::new(s.cfg.vo.clone(), s.cfg.seed)?;
    let mut log = String::from("stage,epoch,loss,step_loss,comp_loss,lr,faults\n");
    let t0 = Instant::now();
    let report = odometry::train_vo_with(&mut model, &[samples], &s.cfg.plan, s.cfg.seed, &mut |e| {
        log.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.stage, e.epoch, e.loss, e.step_loss, e.comp_loss, e.lr, e.faults
        ));
        s.say(format!(
            "stage {} epoch {:>2}: loss {:.6} (step {:.6}, comp {:.6}) lr {:.3e}",
            e.stage, e.epoch, e.loss, e.step_loss, e.comp_loss, e.lr
        ));
    })?;
    s.record("train", t0.elapsed().as_secs_f64())?;
    fs::write(out_file(s, "vo_train_log.csv"), log)?;
    let mut w = create(&s.cfg.paths.vo_checkpoint)?;
    model.save(&mut w)?;
    w.flush()?;
    s.say(format!(
        "{} optimizer steps, {} skipped; checkpoint {}",
        report.steps,
        report.faults,
        s.cfg.paths.vo_checkpoint.display()
    ));
    Ok(())
}

pub fn infer_vo(s: &Session) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let model = load_vo(s)?;
    let flows = load_flows(s, &traj)?;
    let t0 = Instant::now();
    let deltas = model.predict_batch(&flows)?;
    let elapsed = t0.elapsed().as_secs_f64();
    s.record("predict", elapsed)?;
    s.record("per_frame", elapsed / deltas.len().max(1) as f64)?;
    let integrated = integrate(&deltas, *traj.first());
    let entries = traj
        .frame_ids()
        .zip(integrated.poses().copied())
        .collect();
    let est = Trajectory::new(entries).map_err(|e| CliError::Data(e.to_string()))?;
    let mut w = create(&s.cfg.paths.predictions)?;
    write_pose_file(&est, &mut w)?;
    w.flush()?;
    s.say(format!("wrote {} poses to {}", est.len(), s.cfg.paths.predictions.display()));
    Ok(())
}

pub fn train_map(s: &Session) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let ids = keyframe_ids(s, &traj)?;
    let frames = load_frames(s, &traj, &ids)?;
    let samples: Vec<MapSample> = frames
        .into_iter()
        .map(|f| MapSample {
            position: *f.pose.expect("pose from trajectory").translation(),
            image: f.image,
        })
        .collect();
    let mut model = MapModel::new(s.cfg.map.clone(), s.cfg.seed)?;
    let mut log = String::from("epoch,loss,recon,kl,edl,lr,faults\n");
    let t0 = Instant::now();
    mapping::train_map_with(&mut model, &samples, &s.cfg.map_train, &mut |e| {
        log.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.loss, e.recon, e.kl, e.edl, e.lr, e.faults
        ));
        s.say(format!(
            "epoch {:>2}: loss {:.6} (recon {:.6}, kl {:.6}, edl {:.6}) lr {:.3e}",
            e.epoch, e.loss, e.recon, e.kl, e.edl, e.lr
        ));
    })?;
    s.record("train", t0.elapsed().as_secs_f64())?;
    fs::write(out_file(s, "map_train_log.csv"), log)?;
    let mut w = create(&s.cfg.paths.map_checkpoint)?;
    model.save(&mut w)?;
    w.flush()?;
    s.say(format!("trained on {} keyframes", samples.len()));
    Ok(())
}

pub fn build_map(s: &Session) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let model = load_map_model(s)?;
    let ids = keyframe_ids(s, &traj)?;
    let frames = load_frames(s, &traj, &ids)?;
    let map = s.timed("embed", || Ok(relocalization::build_map(&model, &frames)?))?;
    let mut w = create(&s.cfg.paths.map_file)?;
    save_map(&map, &mut w)?;
    w.flush()?;
    s.say(format!("map of {} keyframes, D = {}", map.len(), map.dim()));
    Ok(())
}

pub fn relocalize(s: &Session, single: Option<u64>) -> Result<(), CliError> {
    let traj = load_poses(s)?;
    let model = load_map_model(s)?;
    let map = load_embedding_map(s, &model)?;
    let vo = if s.cfg.reloc.refine { Some(load_vo(s)?) } else { None };
    let keyframes: std::collections::BTreeSet<u64> = map.records().iter().map(|r| r.frame_id).collect();
    let ids: Vec<u64> = match single {
        Some(id) => vec![id],
        None => traj
            .frame_ids()
            .filter(|id| match s.cfg.reloc.queries {
                QuerySet::HeldOut => !keyframes.contains(id),
                QuerySet::Keyframes => keyframes.contains(id),
                QuerySet::All => true,
            })
            .collect(),
    };
    if ids.is_empty() {
        return Err(CliError::Data("no query frames selected".into()));
    }
    let frames = load_frames(s, &traj, &ids)?;
    let oracle = OracleFlow {
        world: &s.cfg.world,
        poses: &traj,
    };
    let mut csv = String::from("query_id,best_id,best_distance,truth_id,correct,below_mean_minus_std,candidates,refined_error_m\n");
    let (mut correct, mut separated) = (0usize, 0usize);
    let mut refined_errors = Vec::new();
    let t0 = Instant::now();
    for f in &frames {
        let mut r = query(&map, &model, &f.image, s.cfg.reloc.metric, s.cfg.reloc.candidates)?;
        let n = r.profile.len() as f64;
        let mean = r.profile.iter().sum::<f64>() / n;
        let std = (r.profile.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let below = r.best_distance < mean - std;
        let truth = f.pose.map(|p| {
            let dists: Vec<f64> = map
                .records()
                .iter()
                .map(|k| (k.pose.translation() - p.translation()).norm())
                .collect();
            map.records()[relocalization::argmin(&dists).expect("non-empty map")].frame_id
        });
        let hit = truth == Some(r.best_id);
        let refined_error = match (&vo, f.pose) {
            (Some(vo), Some(p)) => {
                let refined = search(&map, vo, &oracle, &mut r, f.frame_id)?;
                Some((refined.pose.translation() - p.translation()).norm())
            }
            _ => None,
        };
        correct += hit as usize;
        separated += below as usize;
        refined_errors.extend(refined_error);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.frame_id,
            // The embedding match, before any refinement reorders candidates.
            map.records()[relocalization::argmin(&r.profile).expect("non-empty")].frame_id,
            r.profile.iter().copied().fold(f64::INFINITY, f64::min),
            truth.map(|t| t.to_string()).unwrap_or_default(),
            hit as u8,
            below as u8,
            r.candidates.len(),
            refined_error.map(|e| e.to_string()).unwrap_or_default(),
        ));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    s.record("query", elapsed)?;
    s.record("per_query", elapsed / frames.len() as f64)?;
    let q = frames.len() as f64;
    let mut summary = format!(
        "queries={}\ntop1_accuracy={}\nfig6_rate={}\n",
        frames.len(),
        correct as f64 / q,
        separated as f64 / q
    );
    if !refined_errors.is_empty() {
        refined_errors.sort_by(f64::total_cmp);
        let n = refined_errors.len();
        summary.push_str(&format!(
            "mean_refined_error_m={}\nmedian_refined_error_m={}\n",
            refined_errors.iter().sum::<f64>() / n as f64,
            refined_errors[n / 2]
        ));
    }
    fs::write(out_file(s, "reloc.csv"), csv)?;
    fs::write(out_file(s, "reloc_summary.txt"), &summary)?;
    s.say(summary.trim_end());
    Ok(())
}

fn load_predictions(s: &Session) -> Result<Trajectory, CliError> {
    let path = require("paths.predictions", &s.cfg.paths.predictions)?;
    Ok(parse_pose_file(BufReader::new(File::open(path)?))?)
}

fn is_standard(lengths: &[f64]) -> bool {
    lengths == KITTI_LENGTHS
}

pub fn eval(s: &Session) -> Result<(), CliError> {
    let gt = load_poses(s)?;
    let est = load_predictions(s)?;
    let lengths = &s.cfg.eval_lengths;
    let r = kitti_errors(&gt, &est, lengths)?;
    if !is_standard(lengths) {
        s.say("note: path lengths differ from the official 100-800 m protocol");
    }
    if r.is_empty() {
        s.say("warning: trajectory is shorter than every evaluation length");
    }
    let joined: Vec<String> = lengths.iter().map(|l| l.to_string()).collect();
    let text = format!(
        "translation_pct={}\nrotation_deg_per_m={}\nsubsequences={}\nlengths={}\n",
        r.translation_error,
        r.rotation_error,
        r.subsequences,
        joined.join(",")
    );
    fs::write(out_file(s, "eval.txt"), &text)?;
    let mut csv = String::from("length,translation_pct,rotation_deg_per_m,subsequences\n");
    for l in &r.per_length {
        csv.push_str(&format!("{},{},{},{}\n", l.length, l.translation, l.rotation, l.subsequences));
    }
    fs::write(out_file(s, "eval_lengths.csv"), csv)?;
    s.say(text.trim_end());
    Ok(())
}

pub fn plot(s: &Session) -> Result<(), CliError> {
    let gt = load_poses(s)?;
    let est = load_predictions(s)?;
    let mut w = create(&out_file(s, "traj_axes.csv"))?;
    emit_axes_csv(&gt, &est, &mut w)?;
    w.flush()?;
    let mut w = create(&out_file(s, "traj_xz.svg"))?;
    emit_xz_svg(&gt, &est, &mut w)?;
    w.flush()?;
    if !(s.cfg.paths.map_file.exists() && s.cfg.paths.map_checkpoint.exists()) {
        s.say("no map yet; skipping the distance profile");
        return Ok(());
    }
    let model = load_map_model(s)?;
    let map = load_embedding_map(s, &model)?;
    let id = s.cfg.plot_query.unwrap_or(map.records()[0].frame_id);
    let frame = load_frames(s, &gt, &[id])?.remove(0);
    let r = query(&map, &model, &frame.image, s.cfg.reloc.metric, s.cfg.reloc.candidates)?;
    let ids: Vec<u64> = map.records().iter().map(|k| k.frame_id).collect();
    let mut curve = create(&out_file(s, "profile_curve.csv"))?;
    let mut hist = create(&out_file(s, "profile_hist.csv"))?;
    emit_distance_profile(&ids, &r.profile, s.cfg.plot_bins, &mut curve, &mut hist)?;
    curve.flush()?;
    hist.flush()?;
    s.say(format!("distance profile of frame {id}: nearest keyframe {} at {}", r.best_id, r.best_distance));
    Ok(())
}

pub fn report(s: &Session) -> Result<(), CliError> {
    let eval_path = out_file(s, "eval.txt");
    let results = read_results("eval output", &eval_path)?;
    let number = |k: &str| -> Result<f64, CliError> {
        results
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: missing {k}", eval_path.display())))
    };
    let runtime = fs::read_to_string(out_file(s, "timings.csv")).ok().and_then(|t| {
        t.lines()
            .filter_map(|l| l.strip_prefix("infer-vo,per_frame,"))
            .next_back()
            .and_then(|v| v.parse().ok())
    });
    let measured = [ReportRow::new(
        &s.cfg.report_method,
        Some(number("translation_pct")?),
        Some(number("rotation_deg_per_m")?),
        runtime,
        &s.cfg.report_environment,
    )];
    let lengths = results.get("lengths").cloned().unwrap_or_default();
    let standard: Vec<String> = KITTI_LENGTHS.iter().map(|l| l.to_string()).collect();
    let note = (lengths != standard.join(",")).then(|| format!("measured rows use path lengths {lengths} m"));
    let mut w = create(&out_file(s, "table1.txt"))?;
    table1_report(&measured, note.as_deref(), &mut w)?;
    w.flush()?;
    fs::write(out_file(s, "table1.tsv"), table1_tsv(&measured))?;
    if !s.quiet {
        print!("{}", fs::read_to_string(out_file(s, "table1.txt"))?);
    }
    Ok(())
}
