//! Run configuration: a flat UTF-8 text file with one `key = value` per line.
//!
//! ```text
//! # desk-scale homogeneous backbone
//! seed = 0
//! kind = homogeneous
//! image_size = 32
//! patch_size = 4
//! stage_depths = 2
//! stage_channels = 32
//! stage_heads = 2
//! window = 4
//! graft.policy = none
//! graft.0.1 = B:1,M:4,down:avgpool,up:wbilinear
//! task.classes = 4
//! optim.kind = adamw
//! optim.steps = 500
//! precision = train32
//! output.dir = runs/desk
//! ```
//!
//! Lists are comma separated. Missing keys fall back to the defaults of
//! [`RunConfig::default`]; an absent `window` is chosen to tile every stage.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use graft::{BackboneSpec, BlockIndex, DownKind, GraftConfig, StructureKind, UpKind};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// 64-bit everywhere; runs are bit-reproducible.
    Verify64,
    Train32,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "verify64" => Ok(Self::Verify64),
            "train32" => Ok(Self::Train32),
            _ => Err(format!("unknown precision {s:?} (verify64|train32)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Verify64 => "verify64",
            Self::Train32 => "train32",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    AdamW,
    Sgd,
}

impl FromStr for OptimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adamw" => Ok(Self::AdamW),
            "sgd" => Ok(Self::Sgd),
            _ => Err(format!("unknown optimizer {s:?} (adamw|sgd)")),
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdamW => "adamw",
            Self::Sgd => "sgd",
        })
    }
}

/// Planted-patch classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Training samples scored at each evaluation (a fixed prefix).
    pub eval_size: usize,
    /// `K`, a perfect square.
    pub classes: usize,
    /// Half-width of the additive uniform noise.
    pub noise: f64,
    /// Side of the planted square in pixels.
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: BackboneSpec,
    pub seed: u64,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub precision: Precision,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = BackboneSpec::homogeneous(32, 4, 2, 32, 2, 4, 4).with_default_grafts();
        Self {
            spec,
            seed: 0,
            task: TaskConfig { train_size: 1024, test_size: 512, eval_size: 256, classes: 4, noise: 0.5, patch: 8 },
            optim: OptimConfig {
                kind: OptimKind::AdamW,
                lr: 1e-3,
                steps: 500,
                batch: 16,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                eval_every: 50,
            },
            precision: Precision::Train32,
            output_dir: PathBuf::from("graft-out"),
        }
    }
}

impl RunConfig {
    /// Same run without any graft branch.
    pub fn plain(&self) -> Self {
        Self { spec: self.spec.without_grafts(), ..self.clone() }
    }

    /// Renders the config back into the file format; parsing the result
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        out.push_str(&spec_text(&self.spec));
        let t = &self.task;
        let o = &self.optim;
        let _ = writeln!(out, "task.train_size = {}", t.train_size);
        let _ = writeln!(out, "task.test_size = {}", t.test_size);
        let _ = writeln!(out, "task.eval_size = {}", t.eval_size);
        let _ = writeln!(out, "task.classes = {}", t.classes);
        let _ = writeln!(out, "task.noise = {}", t.noise);
        let _ = writeln!(out, "task.patch = {}", t.patch);
        let _ = writeln!(out, "optim.kind = {}", o.kind);
        let _ = writeln!(out, "optim.lr = {}", o.lr);
        let _ = writeln!(out, "optim.steps = {}", o.steps);
        let _ = writeln!(out, "optim.batch = {}", o.batch);
        let _ = writeln!(out, "optim.weight_decay = {}", o.weight_decay);
        let _ = writeln!(out, "optim.beta1 = {}", o.beta1);
        let _ = writeln!(out, "optim.beta2 = {}", o.beta2);
        let _ = writeln!(out, "optim.eps = {}", o.eps);
        let _ = writeln!(out, "optim.eval_every = {}", o.eval_every);
        let _ = writeln!(out, "precision = {}", self.precision);
        let _ = writeln!(out, "output.dir = {}", self.output_dir.display());
        out
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Backbone keys of the config format, with every graft listed explicitly.
pub fn spec_text(spec: &BackboneSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kind = {}", spec.kind);
    let _ = writeln!(out, "image_size = {}", spec.image_size);
    let _ = writeln!(out, "patch_size = {}", spec.patch_size);
    let _ = writeln!(out, "in_channels = {}", spec.in_channels);
    let _ = writeln!(out, "stage_depths = {}", join(&spec.stage_depths));
    let _ = writeln!(out, "stage_channels = {}", join(&spec.stage_channels));
    let _ = writeln!(out, "stage_heads = {}", join(&spec.stage_heads));
    let _ = writeln!(out, "window = {}", spec.window);
    let _ = writeln!(out, "mlp_ratio = {}", spec.mlp_ratio);
    let _ = writeln!(out, "num_classes = {}", spec.num_classes);
    let _ = writeln!(out, "graft.policy = none");
    for (idx, g) in &spec.grafts {
        let _ = writeln!(out, "graft.{}.{} = {}", idx.stage, idx.depth, graft_text(g));
    }
    out
}

pub fn graft_text(g: &GraftConfig) -> String {
    let mut s = format!("B:{},M:{},down:{},up:{}", g.scales, g.window, g.down, g.up);
    if g.ratio_h != 2 || g.ratio_w != 2 {
        let _ = write!(s, ",r:{}x{}", g.ratio_h, g.ratio_w);
    }
    s
}

/// Window side used when the config does not name one: 7 when it tiles
/// every stage, otherwise the largest side up to half the first grid that does.
pub fn default_window(resolutions: &[usize]) -> usize {
    let tiles = |m: usize| resolutions.iter().all(|&r| r % m == 0);
    if tiles(7) {
        return 7;
    }
    let first = resolutions.first().copied().unwrap_or(1);
    (1..=(first / 2).max(1)).rev().find(|&m| tiles(m)).unwrap_or(1)
}

struct Entry {
    value: String,
    line: usize,
}

struct Parser<'a> {
    origin: &'a str,
    entries: HashMap<String, Entry>,
    grafts: Vec<(BlockIndex, String, usize)>,
}

impl Parser<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> HarnessError {
        HarnessError::Parse { path: self.origin.to_string(), line, msg: msg.into() }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|err| self.err(e.line, format!("{key}: cannot parse {:?}: {err}", e.value))),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| self.err(e.line, format!("{key}: expected comma-separated integers, got {:?}", e.value))),
        }
    }
}

fn parse_graft(value: &str, default_window: usize) -> Result<GraftConfig, String> {
    let mut cfg = GraftConfig::new(0, default_window);
    let mut seen_b = false;
    for part in value.split(',') {
        let (k, v) = part.split_once(':').ok_or_else(|| format!("expected key:value, got {part:?}"))?;
        let (k, v) = (k.trim(), v.trim());
        let int = |v: &str| v.parse::<usize>().map_err(|_| format!("{k}: expected an integer, got {v:?}"));
        match k {
            "B" => {
                cfg.scales = int(v)?;
                seen_b = true;
            }
            "M" => cfg.window = int(v)?,
            "down" => cfg.down = DownKind::from_str(v).map_err(|e| e.to_string())?,
            "up" => cfg.up = UpKind::from_str(v).map_err(|e| e.to_string())?,
            "r" => {
                let (h, w) = v.split_once('x').unwrap_or((v, v));
                cfg.ratio_h = int(h)?;
                cfg.ratio_w = int(w)?;
            }
            _ => return Err(format!("unknown graft field {k:?} (B, M, down, up, r)")),
        }
    }
    if !seen_b {
        return Err("graft needs B:<scales>".into());
    }
    Ok(cfg)
}

/// Parses config text. `origin` names the source in error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let mut p = Parser { origin, entries: HashMap::new(), grafts: Vec::new() };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| p.err(line, format!("expected `key = value`, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(p.err(line, format!("empty key or value in {content:?}")));
        }
        if let Some(rest) = key.strip_prefix("graft.").filter(|r| *r != "policy") {
            let idx = rest
                .split_once('.')
                .and_then(|(s, d)| Some(BlockIndex::new(s.parse().ok()?, d.parse().ok()?)))
                .ok_or_else(|| p.err(line, format!("graft key must be graft.<stage>.<depth>, got {key:?}")))?;
            if let Some((_, _, first)) = p.grafts.iter().find(|(b, _, _)| *b == idx) {
                return Err(p.err(line, format!("{key} already set on line {first}")));
            }
            p.grafts.push((idx, value.to_string(), line));
            continue;
        }
        if let Some(prev) = p.entries.get(key) {
            return Err(p.err(line, format!("{key} already set on line {}", prev.line)));
        }
        p.entries.insert(key.to_string(), Entry { value: value.to_string(), line });
    }

    let d = RunConfig::default();
    let seed = p.take("seed")?.unwrap_or(d.seed);
    let kind: StructureKind = p.take("kind")?.unwrap_or(StructureKind::Homogeneous);
    let image_size = p.take("image_size")?.unwrap_or(d.spec.image_size);
    let patch_size = p.take("patch_size")?.unwrap_or(d.spec.patch_size);
    let in_channels = p.take("in_channels")?.unwrap_or(3);
    let mlp_ratio = p.take("mlp_ratio")?.unwrap_or(4);
    let stage_depths = p.take_list("stage_depths")?.unwrap_or_else(|| d.spec.stage_depths.clone());
    let stage_channels = p.take_list("stage_channels")?.unwrap_or_else(|| d.spec.stage_channels.clone());
    let stage_heads = p.take_list("stage_heads")?.unwrap_or_else(|| d.spec.stage_heads.clone());
    let window: Option<usize> = p.take("window")?;
    let num_classes: Option<usize> = p.take("num_classes")?;
    let policy_line = p.entries.get("graft.policy").map(|e| e.line);
    let policy: String = p.take("graft.policy")?.unwrap_or_else(|| "default".into());

    let task = TaskConfig {
        train_size: p.take("task.train_size")?.unwrap_or(d.task.train_size),
        test_size: p.take("task.test_size")?.unwrap_or(d.task.test_size),
        eval_size: p.take("task.eval_size")?.unwrap_or(d.task.eval_size),
        classes: p.take("task.classes")?.unwrap_or(d.task.classes),
        noise: p.take("task.noise")?.unwrap_or(d.task.noise),
        patch: p.take("task.patch")?.unwrap_or(0),
    };
    let optim = OptimConfig {
        kind: p.take("optim.kind")?.unwrap_or(d.optim.kind),
        lr: p.take("optim.lr")?.unwrap_or(d.optim.lr),
        steps: p.take("optim.steps")?.unwrap_or(d.optim.steps),
        batch: p.take("optim.batch")?.unwrap_or(d.optim.batch),
        weight_decay: p.take("optim.weight_decay")?.unwrap_or(d.optim.weight_decay),
        beta1: p.take("optim.beta1")?.unwrap_or(d.optim.beta1),
        beta2: p.take("optim.beta2")?.unwrap_or(d.optim.beta2),
        eps: p.take("optim.eps")?.unwrap_or(d.optim.eps),
        eval_every: p.take("optim.eval_every")?.unwrap_or(d.optim.eval_every),
    };
    let precision = p.take("precision")?.unwrap_or(d.precision);
    let output_dir: PathBuf = p.take::<String>("output.dir")?.map(PathBuf::from).unwrap_or(d.output_dir);

    if let Some((key, e)) = p.entries.iter().min_by_key(|(_, e)| e.line) {
        return Err(p.err(e.line, format!("unknown key {key:?}")));
    }

    let num_classes = match num_classes {
        Some(n) if n != task.classes => {
            return Err(HarnessError::Invalid(format!(
                "num_classes = {n} disagrees with task.classes = {}",
                task.classes
            )))
        }
        _ => task.classes,
    };
    let mut spec = match kind {
        StructureKind::Homogeneous => BackboneSpec::homogeneous(image_size, patch_size, 1, 1, 1, 1, num_classes),
        StructureKind::Pyramid => BackboneSpec::pyramid(image_size, patch_size, vec![], vec![], vec![], 1, num_classes),
    };
    spec.in_channels = in_channels;
    spec.mlp_ratio = mlp_ratio;
    spec.stage_depths = stage_depths;
    spec.stage_channels = stage_channels;
    spec.stage_heads = stage_heads;
    spec.window = match window {
        Some(m) => m,
        None if patch_size > 0 && image_size % patch_size == 0 => {
            let res: Vec<usize> = (0..spec.num_stages()).map(|s| spec.stage_resolution(s)).collect();
            default_window(&res)
        }
        None => 1,
    };
    spec.validate().map_err(invalid)?;

    spec = match policy.as_str() {
        "default" => spec.with_default_grafts(),
        "none" => spec,
        other => {
            return Err(p.err(policy_line.unwrap_or(0), format!("unknown graft.policy {other:?} (default|none)")))
        }
    };
    for (idx, value, line) in &p.grafts {
        let cfg = parse_graft(value, spec.window).map_err(|m| p.err(*line, format!("graft.{}.{}: {m}", idx.stage, idx.depth)))?;
        let mut single = spec.without_grafts();
        single.grafts = BTreeMap::from([(*idx, cfg)]);
        single.validate().map_err(|e| p.err(*line, model_message(e)))?;
        spec.grafts.insert(*idx, cfg);
    }
    spec.validate().map_err(invalid)?;

    let mut cfg = RunConfig { spec, seed, task, optim, precision, output_dir };
    if cfg.task.patch == 0 {
        cfg.task.patch = default_patch(cfg.spec.image_size, cfg.task.classes);
    }
    validate_run(&cfg)?;
    Ok(cfg)
}

fn model_message(e: graft::Error) -> String {
    match e {
        graft::Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn invalid(e: graft::Error) -> HarnessError {
    HarnessError::Invalid(model_message(e))
}

/// Half a grid cell, at least one pixel.
pub fn default_patch(image_size: usize, classes: usize) -> usize {
    let side = (classes as f64).sqrt().round().max(1.0) as usize;
    (image_size / side / 2).max(1)
}

/// Checks the task and optimizer sections against the backbone.
pub fn validate_run(cfg: &RunConfig) -> Result<()> {
    let bad = |m: String| Err(HarnessError::Invalid(m));
    let t = &cfg.task;
    let side = (t.classes as f64).sqrt().round() as usize;
    if t.classes == 0 || side * side != t.classes {
        return bad(format!("task.classes = {} is not a perfect square", t.classes));
    }
    if cfg.spec.image_size % side != 0 {
        return bad(format!("image size {} does not split into a {side}x{side} cell grid", cfg.spec.image_size));
    }
    let cell = cfg.spec.image_size / side;
    if t.patch == 0 || t.patch > cell {
        return bad(format!("task.patch = {} does not fit a {cell}-pixel grid cell", t.patch));
    }
    if cfg.spec.num_classes != t.classes {
        return bad(format!("num_classes = {} disagrees with task.classes = {}", cfg.spec.num_classes, t.classes));
    }
    if t.train_size == 0 || t.test_size == 0 {
        return bad("task.train_size and task.test_size must be positive".into());
    }
    if t.eval_size == 0 || t.eval_size > t.train_size {
        return bad(format!("task.eval_size = {} must lie in 1..={}", t.eval_size, t.train_size));
    }
    if !(t.noise >= 0.0 && t.noise.is_finite()) {
        return bad(format!("task.noise = {} must be finite and non-negative", t.noise));
    }
    let o = &cfg.optim;
    if o.batch == 0 || o.batch > t.train_size {
        return bad(format!("optim.batch = {} must lie in 1..={}", o.batch, t.train_size));
    }
    if o.eval_every == 0 {
        return bad("optim.eval_every must be positive".into());
    }
    if !(o.lr.is_finite() && o.lr >= 0.0 && o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
        return bad("optim.lr and optim.weight_decay must be finite and non-negative".into());
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
        return bad("optim.beta1 and optim.beta2 must lie in [0, 1) and optim.eps must be positive".into());
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}

/// Seed precedence: command-line flag, then `GRAFT_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| HarnessError::Invalid(format!("GRAFT_SEED={v:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, "test.cfg")
    }

    #[test]
    fn empty_config_is_the_default_run() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.spec.window, 4);
        assert_eq!(cfg.spec.grafts.len(), 1);
        assert_eq!(cfg.spec.grafts[&BlockIndex::new(0, 1)], GraftConfig::new(1, 4));
    }

    #[test]
    fn defaults_pick_deepest_branch_that_fits() {
        let cfg = parse("image_size = 64\npatch_size = 2\nstage_channels = 16\nstage_heads = 2\nwindow = 4").unwrap();
        assert_eq!(cfg.spec.grafts[&BlockIndex::new(0, 1)].scales, 3);
        let pyr = parse(
            "kind = pyramid\nimage_size = 224\nstage_depths = 2,2,6,2\nstage_channels = 96,192,384,768\nstage_heads = 3,6,12,24\ntask.classes = 4",
        )
        .unwrap();
        assert_eq!(pyr.spec.window, 7);
        assert_eq!(pyr.spec.grafts[&BlockIndex::new(0, 1)].scales, 3);
        assert_eq!(pyr.spec.grafts[&BlockIndex::new(1, 0)].scales, 2);
        assert_eq!(pyr.spec.grafts[&BlockIndex::new(2, 0)].scales, 1);
        assert!(!pyr.spec.grafts.contains_key(&BlockIndex::new(3, 0)));
    }

    #[test]
    fn text_round_trips() {
        let cfg = parse(
            "seed = 9\ngraft.policy = none\ngraft.0.1 = B:1,M:2,down:crossattn,up:nearest\ntask.noise = 0.25\noptim.kind = sgd\nprecision = verify64\noutput.dir = out/x",
        )
        .unwrap();
        assert_eq!(parse(&cfg.to_text()).unwrap(), cfg);
        let d = RunConfig::default();
        assert_eq!(parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn graft_at_first_block_is_rejected_with_its_line() {
        let err = parse("seed = 1\n\ngraft.0.0 = B:1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("no graft at first layer"), "{msg}");
        assert!(msg.starts_with("test.cfg:3:"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn window_mismatch_names_both_numbers() {
        let msg = parse("window = 3").unwrap_err().to_string();
        assert!(msg.contains("M=3") && msg.contains("8x8"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("seed = 1\nbogus = 2", 2, "unknown key"),
            ("seed = x", 1, "seed"),
            ("seed 1", 1, "key = value"),
            ("seed = 1\nseed = 2", 2, "line 1"),
            ("\n\ngraft.0.1 = M:2", 3, "B:"),
            ("graft.0.1 = B:1,up:cubic", 1, "upsampling"),
            ("graft.x = B:1", 1, "graft.<stage>"),
            ("graft.policy = all", 1, "policy"),
            ("stage_depths = 2,a", 1, "integers"),
            ("kind = conv", 1, "kind"),
        ];
        for (text, line, needle) in cases {
            match parse(text) {
                Err(HarnessError::Parse { line: l, msg, .. }) => {
                    assert_eq!(l, line, "{text:?}: {msg}");
                    assert!(msg.contains(needle), "{text:?}: {msg}");
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors() {
        for (text, needle) in [
            ("task.classes = 3", "perfect square"),
            ("task.patch = 17", "does not fit"),
            ("num_classes = 10", "disagrees"),
            ("optim.batch = 0", "optim.batch"),
            ("task.eval_size = 5000", "eval_size"),
            ("stage_heads = 3", "heads"),
            ("graft.policy = none\ngraft.0.1 = B:2", "graft at stage 0 block 1"),
        ] {
            let err = parse(text).unwrap_err();
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
            assert_eq!(err.prefix(), "config-error");
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse("# header\n\n  seed = 5   # trailing\n").unwrap();
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn default_window_rule() {
        assert_eq!(default_window(&[56, 28, 14, 7]), 7);
        assert_eq!(default_window(&[8]), 4);
        assert_eq!(default_window(&[16, 8, 4]), 4);
        assert_eq!(default_window(&[6]), 3);
        assert_eq!(default_window(&[1]), 1);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(" 2 "), 3).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, 3).unwrap(), 3);
        assert!(resolve_seed(None, Some("-1"), 3).is_err());
    }
}
