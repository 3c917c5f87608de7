//! Flat `key = value` run configuration with dotted keys. Every problem is
//! collected before reporting; unknown keys only produce warnings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataio::{SyntheticWorld, TrajectorySpec};
use crate::evaluation::KITTI_LENGTHS;
use crate::mapping::{KeyframePolicy, MapConfig, MapTrainConfig};
use crate::odometry::{CurriculumPlan, Stage, VoConfig};
use crate::relocalization::{CandidatePolicy, Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub out: PathBuf,
    /// Directory of `NNNNNN.pgm` frames.
    pub sequence: PathBuf,
    pub poses: PathBuf,
    /// Directory of `NNNNNN.flo` fields, frame `N` to the next frame.
    pub flow: PathBuf,
    pub vo_checkpoint: PathBuf,
    pub map_checkpoint: PathBuf,
    pub map_file: PathBuf,
    pub predictions: PathBuf,
}

/// Which frames `relocalize` queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySet {
    HeldOut,
    Keyframes,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocSettings {
    pub metric: Metric,
    pub candidates: CandidatePolicy,
    /// Run the odometry refinement over the candidates.
    pub refine: bool,
    pub queries: QuerySet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub world: SyntheticWorld,
    pub vo: VoConfig,
    pub plan: CurriculumPlan,
    pub map: MapConfig,
    pub map_train: MapTrainConfig,
    pub keyframes: KeyframePolicy,
    pub reloc: RelocSettings,
    pub eval_lengths: Vec<f64>,
    pub plot_bins: usize,
    /// Frame used for the distance-profile figure; the first keyframe when unset.
    pub plot_query: Option<u64>,
    pub report_method: String,
    pub report_environment: String,
    /// Hex SHA-256 of the resolved settings.
    pub hash: String,
    pub warnings: Vec<String>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, Vec<String>> {
    let (pairs, errors) = parse_lenient(text);
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(errors)
    }
}

/// Keeps every well-formed pair alongside the errors for the rest.
fn parse_lenient(text: &str) -> (BTreeMap<String, String>, Vec<String>) {
    let mut pairs = BTreeMap::new();
    let mut errors = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`", idx + 1));
            continue;
        };
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() {
            errors.push(format!("line {}: empty key", idx + 1));
        } else if pairs.insert(k.to_string(), v.to_string()).is_some() {
            errors.push(format!("{k}: set more than once"));
        }
    }
    (pairs, errors)
}

struct Reader {
    raw: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.raw.get(key).cloned()
    }

    fn get<T: FromStr + Display + Clone>(&mut self, key: &str, default: T, expect: &str) -> T {
        let value = match self.raw(key) {
            None => default,
            Some(s) => match s.parse() {
                Ok(v) => v,
                Err(_) => {
                    self.errors.push(format!("{key}: expected {expect}, got {s:?}"));
                    default
                }
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        value
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        let v = self.get(key, default, "a positive integer");
        self.require(key, v > 0, "must be positive");
        v
    }

    fn real(&mut self, key: &str, default: f64) -> f64 {
        let v = self.get(key, default, "a number");
        self.require(key, v.is_finite(), "must be finite");
        v
    }

    fn non_negative(&mut self, key: &str, default: f64) -> f64 {
        let v = self.real(key, default);
        self.require(key, v >= 0.0, "must be non-negative");
        v
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        let v = self.real(key, default);
        self.require(key, v > 0.0, "must be positive");
        v
    }

    fn flag(&mut self, key: &str, default: bool) -> bool {
        self.get(key, default, "true or false")
    }

    fn choice(&mut self, key: &str, default: &str, options: &[&str]) -> String {
        let v: String = self.get(key, default.to_string(), "a word");
        if !options.contains(&v.as_str()) {
            self.errors.push(format!("{key}: expected one of {}, got {v:?}", options.join(", ")));
            return default.to_string();
        }
        v
    }

    fn path(&mut self, key: &str, default: PathBuf) -> PathBuf {
        let p = self.raw(key).map(PathBuf::from).unwrap_or(default);
        self.resolved.insert(key.to_string(), p.display().to_string());
        p
    }

    fn require(&mut self, key: &str, ok: bool, reason: &str) {
        if !ok {
            self.errors.push(format!("{key}: {reason}"));
        }
    }

    fn lengths(&mut self, key: &str) -> Vec<f64> {
        let default = KITTI_LENGTHS.map(|l| l.to_string()).join(",");
        let text: String = self.get(key, default.clone(), "comma-separated lengths");
        let parsed: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if !v.is_empty() && v.iter().all(|l| l.is_finite() && *l > 0.0) => v,
            _ => {
                self.errors.push(format!("{key}: expected positive comma-separated lengths, got {text:?}"));
                KITTI_LENGTHS.to_vec()
            }
        }
    }
}

/// Resolves a configuration. `seed` and `out` come from the command line and
/// take precedence over the file.
pub fn validate_config(text: &str, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig, Vec<String>> {
    let (raw, errors) = parse_lenient(text);
    let mut r = Reader {
        raw,
        used: BTreeSet::new(),
        resolved: BTreeMap::new(),
        errors,
    };

    let seed = match (seed, r.raw("seed")) {
        (Some(s), _) => s,
        (None, Some(s)) => s.parse().unwrap_or_else(|_| {
            r.errors.push(format!("seed: expected a non-negative integer, got {s:?}"));
            0
        }),
        (None, None) => {
            r.errors.push("seed: missing (set `seed` in the config or pass --seed)".into());
            0
        }
    };
    r.resolved.insert("seed".into(), seed.to_string());

    let out = match out {
        Some(p) => {
            r.used.insert("paths.out".into());
            p.to_path_buf()
        }
        None => r.path("paths.out", PathBuf::from("atdn-out")),
    };
    r.resolved.insert("paths.out".into(), out.display().to_string());
    let data = out.join("data");
    let paths = Paths {
        sequence: r.path("paths.sequence", data.join("images")),
        poses: r.path("paths.poses", data.join("poses.txt")),
        flow: r.path("paths.flow", out.join("flow")),
        vo_checkpoint: r.path("paths.vo_checkpoint", out.join("vo.ckpt")),
        map_checkpoint: r.path("paths.map_checkpoint", out.join("map_model.ckpt")),
        map_file: r.path("paths.map_file", out.join("map.bin")),
        predictions: r.path("paths.predictions", out.join("pred_poses.txt")),
        out,
    };

    let wd = SyntheticWorld::default();
    let kind = r.choice(
        "synth.trajectory",
        "ellipse",
        &["ellipse", "circle", "straight", "stationary"],
    );
    let trajectory = match kind.as_str() {
        "circle" => TrajectorySpec::Circle {
            radius: r.positive("synth.radius", 20.0),
        },
        "straight" => TrajectorySpec::Straight {
            speed: r.positive("synth.speed", 0.25),
        },
        "stationary" => TrajectorySpec::Stationary,
        _ => TrajectorySpec::Ellipse {
            semi_x: r.positive("synth.semi_x", 25.0),
            semi_z: r.positive("synth.semi_z", 15.0),
        },
    };
    let world = SyntheticWorld {
        plane_depth: r.positive("synth.plane_depth", wd.plane_depth),
        focal: r.positive("synth.focal", wd.focal),
        principal: [
            r.real("synth.cx", wd.principal[0]),
            r.real("synth.cy", wd.principal[1]),
        ],
        width: r.count("synth.width", wd.width),
        height: r.count("synth.height", wd.height),
        frames: r.count("synth.frames", 500),
        trajectory,
        texture_cell: r.positive("synth.texture_cell", 2.0),
    };
    if let Err(e) = world.validate() {
        r.errors.push(format!("synth: {e}"));
    }

    let vd = VoConfig::default();
    let vo_levels = r.count("vo.levels", vd.channels.len());
    let vo_channels = (1..=vo_levels)
        .map(|i| r.count(&format!("vo.channels{i}"), vd.channels.get(i - 1).copied().unwrap_or(32)))
        .collect();
    let vo = VoConfig {
        input_size: r.count("vo.input_size", vd.input_size),
        flow_scale: r.positive("vo.flow_scale", vd.flow_scale),
        channels: vo_channels,
        hidden: r.count("vo.hidden", vd.hidden),
        trans_scale: r.positive("vo.trans_scale", vd.trans_scale),
        rot_scale: r.positive("vo.rot_scale", vd.rot_scale),
    };
    if let Err(e) = vo.validate() {
        r.errors.push(format!("vo: {e}"));
    }

    let pd = CurriculumPlan::default();
    let n_stages = r.count("vo.stages", pd.stages.len());
    let mut stages = Vec::with_capacity(n_stages);
    for i in 1..=n_stages {
        let d = pd.stages.get(i - 1).copied().unwrap_or(*pd.stages.last().expect("default stages"));
        let key = |f: &str| format!("vo.stage{i}.{f}");
        let alpha = r.non_negative(&key("alpha"), d.alpha);
        r.require(&key("alpha"), alpha <= 1.0, "must be at most 1");
        let epochs = r.count(&key("epochs"), d.epochs);
        let window = r.count(&key("window"), d.window);
        r.require(&key("window"), window >= 2, "must be at least 2");
        stages.push(Stage { alpha, epochs, window });
    }
    let plan = CurriculumPlan {
        stages,
        lr_max: r.non_negative("vo.lr_max", pd.lr_max),
        lr_min: r.non_negative("vo.lr_min", pd.lr_min),
        kappa: r.non_negative("vo.kappa", pd.kappa),
        weight_decay: r.non_negative("vo.weight_decay", pd.weight_decay),
        clip_len: r.count("vo.clip_len", pd.clip_len),
        clip_stride: r.count("vo.clip_stride", pd.clip_stride),
        max_faults: r.get("vo.max_faults", pd.max_faults, "a non-negative integer"),
    };
    r.require("vo.lr_min", plan.lr_min <= plan.lr_max, "must not exceed vo.lr_max");
    if let Err(e) = plan.validate() {
        r.errors.push(format!("vo: {e}"));
    }

    let md = MapConfig::default();
    let levels = r.count("map.levels", md.channels.len());
    let channels = (1..=levels)
        .map(|i| r.count(&format!("map.channels{i}"), md.channels.get(i - 1).copied().unwrap_or(32)))
        .collect();
    let map = MapConfig {
        image_size: r.count("map.image_size", md.image_size),
        channels,
        embedding_dim: r.count("map.embedding_dim", md.embedding_dim),
        variational: r.flag("map.variational", md.variational),
        unet: r.flag("map.unet", md.unet),
    };
    if let Err(e) = map.validate() {
        r.errors.push(format!("map: {e}"));
    }
    let td = MapTrainConfig::default();
    let map_train = MapTrainConfig {
        epochs: r.count("map.epochs", td.epochs),
        batch: r.count("map.batch", td.batch),
        lr_max: r.non_negative("map.lr_max", td.lr_max),
        lr_min: r.non_negative("map.lr_min", td.lr_min),
        beta_kl: r.non_negative("map.beta_kl", td.beta_kl),
        lambda_edl: r.non_negative("map.lambda_edl", td.lambda_edl),
        edl_only: r.flag("map.edl_only", td.edl_only),
        triple_stride: r.count("map.triple_stride", td.triple_stride),
        window_stride: r.count("map.window_stride", td.window_stride),
        seed,
        max_faults: r.get("map.max_faults", td.max_faults, "a non-negative integer"),
    };
    r.require("map.lr_min", map_train.lr_min <= map_train.lr_max, "must not exceed map.lr_max");
    if let Err(e) = map_train.validate() {
        r.errors.push(format!("map: {e}"));
    }

    let keyframes = match r.choice("keyframes.policy", "stride", &["stride", "motion"]).as_str() {
        "motion" => KeyframePolicy::Motion {
            distance: r.positive("keyframes.distance", 0.75),
            angle: r.positive("keyframes.angle", 0.2),
        },
        _ => KeyframePolicy::Stride(r.count("keyframes.stride", 3)),
    };

    let metric = match r.choice("reloc.metric", "l2", &["l2", "l1"]).as_str() {
        "l1" => Metric::L1,
        _ => Metric::L2,
    };
    let candidates = match r.choice("reloc.candidates", "zscore", &["zscore", "bottom"]).as_str() {
        "bottom" => {
            let q = r.positive("reloc.q", 0.05);
            r.require("reloc.q", q <= 1.0, "must be at most 1");
            CandidatePolicy::Bottom(q)
        }
        _ => CandidatePolicy::ZScore(r.non_negative("reloc.k", 2.0)),
    };
    let queries = match r.choice("reloc.queries", "heldout", &["heldout", "keyframes", "all"]).as_str() {
        "keyframes" => QuerySet::Keyframes,
        "all" => QuerySet::All,
        _ => QuerySet::HeldOut,
    };
    let reloc = RelocSettings {
        metric,
        candidates,
        refine: r.flag("reloc.refine", true),
        queries,
    };

    let eval_lengths = r.lengths("eval.lengths");
    let plot_bins = r.count("plot.bins", crate::evaluation::DEFAULT_BINS);
    let plot_query = r.raw("plot.query").map(|s| {
        s.parse().unwrap_or_else(|_| {
            r.errors.push(format!("plot.query: expected a frame id, got {s:?}"));
            0
        })
    });
    if let Some(q) = plot_query {
        r.resolved.insert("plot.query".into(), q.to_string());
    }
    let report_method: String = r.get("report.method", "Ours (synthetic)".to_string(), "a name");
    let report_environment: String = r.get("report.environment", "CPU".to_string(), "a description");

    let warnings = r
        .raw
        .keys()
        .filter(|k| !r.used.contains(*k))
        .map(|k| format!("{k}: unknown key ignored"))
        .collect();
    if !r.errors.is_empty() {
        return Err(r.errors);
    }
    let mut hasher = Sha256::new();
    for (k, v) in &r.resolved {
        hasher.update(format!("{k}={v}\n"));
    }
    let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(RunConfig {
        seed,
        paths,
        world,
        vo,
        plan,
        map,
        map_train,
        keyframes,
        reloc,
        eval_lengths,
        plot_bins,
        plot_query,
        report_method,
        report_environment,
        hash,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = validate_config("seed = 3\n", None, None).unwrap();
        let stages: Vec<_> = c.plan.stages.iter().map(|s| (s.alpha, s.epochs)).collect();
        assert_eq!(stages, vec![(1.0, 5), (0.7, 5), (0.3, 10), (0.3, 10)]);
        assert_eq!((c.map_train.epochs, c.map_train.batch), (10, 8));
        assert_eq!(c.seed, 3);
        assert!(c.warnings.is_empty());
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn reports_every_error() {
        let errs = validate_config("seed = 1\nmap.batch = -3\nvo.stage2.alpha = 2\nvo.lr_max = x\n", None, None)
            .unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("map.batch")), "{errs:?}");
        assert!(errs.iter().any(|e| e.starts_with("vo.stage2.alpha")));
        assert!(errs.iter().any(|e| e.starts_with("vo.lr_max")));
    }

    #[test]
    fn unknown_keys_warn() {
        let c = validate_config("seed = 1\nfuture.knob = 4 # later\n", None, None).unwrap();
        assert_eq!(c.warnings, vec!["future.knob: unknown key ignored".to_string()]);
    }

    #[test]
    fn seed_is_mandatory_and_overridable() {
        assert!(validate_config("", None, None).unwrap_err()[0].starts_with("seed"));
        let a = validate_config("seed = 1", Some(9), None).unwrap();
        let b = validate_config("", Some(9), None).unwrap();
        assert_eq!((a.seed, &a.hash), (9, &b.hash));
        let c = validate_config("", Some(10), None).unwrap();
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn stage_keys_and_paths() {
        let c = validate_config(
            "seed=1\nvo.stages = 2\nvo.stage2.window = 6\nvo.clip_len = 6\n",
            None,
            Some(Path::new("/tmp/x")),
        )
        .unwrap();
        assert_eq!(c.plan.stages.len(), 2);
        assert_eq!(c.plan.stages[1].window, 6);
        assert_eq!(c.paths.poses, PathBuf::from("/tmp/x/data/poses.txt"));
    }

    #[test]
    fn malformed_lines() {
        let errs = parse_pairs("a = 1\nnonsense\na = 2\n").unwrap_err();
        assert_eq!(errs.len(), 2);
    }
}
