//! Verification batteries runnable against any config's backbone.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use graft::attention::{global_msa, l_msa, window_partition, window_reverse, AttentionParams, WindowGrid};
use graft::cost::{count_flops, count_params, enumerate_params, plain_block_macs, verify_complexity_claim};
use graft::gradcheck::check_model_gradients;
use graft::graft::{graft_forward, DownKind, GraftConfig, GraftParams, UpKind};
use graft::params::ParamBuilder;
use graft::reference::{self, Map};
use graft::tensor::max_relative_error;
use graft::{BackboneSpec, Model, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-5;
pub const ORACLE_FLOOR: f64 = 1e-12;
pub const ORACLE_TOL: f64 = 1e-10;
/// MACs of one plain `56×56`, `C=96`, `M=7` block.
pub const GOLDEN_BLOCK_MACS: u64 = 376_320_000;
pub const MAX_GRAFT_RATIO: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Invariants,
    Cost,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Invariants, Suite::Cost, Suite::Oracle];
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Self::Grad),
            "invariants" => Ok(Self::Invariants),
            "cost" => Ok(Self::Cost),
            "oracle" => Ok(Self::Oracle),
            _ => Err(HarnessError::Invalid(format!("unknown suite {s:?} (grad|invariants|cost|oracle)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grad => "grad",
            Self::Invariants => "invariants",
            Self::Cost => "cost",
            Self::Oracle => "oracle",
        })
    }
}

/// One measured quantity and the bound it must satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub measured: f64,
    pub limit: f64,
    pub pass: bool,
}

impl CheckRow {
    /// Passes when `measured <= limit`.
    pub fn at_most(check: impl Into<String>, measured: f64, limit: f64) -> Self {
        Self { check: check.into(), measured, limit, pass: measured <= limit }
    }

    pub fn exact(check: impl Into<String>, measured: f64, expected: f64) -> Self {
        Self { check: check.into(), measured, limit: expected, pass: measured == expected }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }

    /// `suite,check,measured,limit,result` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,check,measured,limit,result\n");
        for r in &self.rows {
            let verdict = if r.pass { "pass" } else { "fail" };
            let _ = writeln!(out, "{},{},{:e},{:e},{verdict}", self.suite, r.check, r.measured, r.limit);
        }
        out
    }
}

pub fn run_suite(suite: Suite, cfg: &RunConfig) -> Result<SuiteReport> {
    let rows = match suite {
        Suite::Grad => grad_rows(&cfg.spec, cfg.seed, 3)?,
        Suite::Invariants => invariant_rows(&cfg.spec, cfg.seed)?,
        Suite::Cost => cost_rows(&cfg.spec)?,
        Suite::Oracle => oracle_rows(&cfg.spec, cfg.seed)?,
    };
    Ok(SuiteReport { suite, rows })
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Moves every parameter off its initial value by `U(-scale, scale)`, so
/// zero biases and unit gains take generic values.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = stream(seed, 7);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn images(spec: &BackboneSpec, rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    uniform(rng, &[n, spec.image_size, spec.image_size, spec.in_channels], 1.0)
}

/// Central differences against autodiff for every parameter tensor, worst
/// case over `seeds` perturbed copies of the model.
pub fn grad_rows(spec: &BackboneSpec, seed: u64, seeds: u64) -> Result<Vec<CheckRow>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for s in seed..seed + seeds {
        let (model, mut store) = Model::init::<f64>(spec, s)?;
        perturb(&mut store, s, 0.5);
        let mut rng = stream(s, 8);
        let x = images(spec, &mut rng, 2);
        let w = uniform(&mut rng, &[2, spec.num_classes], 1.0);
        let report = check_model_gradients(&model, &store, &x, &w, GRAD_STEP, GRAD_FLOOR)?;
        for g in report.groups {
            match worst.iter_mut().find(|(n, _)| *n == g.name) {
                Some(e) => e.1 = e.1.max(g.max_error),
                None => worst.push((g.name, g.max_error)),
            }
        }
    }
    Ok(worst.into_iter().map(|(n, e)| CheckRow::at_most(format!("grad {n}"), e, GRAD_TOL)).collect())
}

fn bit_mismatches(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count() as f64
}

/// Every valid ratio-2 branch with up to three levels at windows 1, 2 and
/// 4, in all nine down/up combinations, on a `16×16` map.
pub fn shape_grid() -> Vec<GraftConfig> {
    let downs = [DownKind::AvgPool, DownKind::LinearProj, DownKind::CrossAttn];
    let ups = [UpKind::LearnableWBilinear, UpKind::Nearest, UpKind::CrossAttn];
    let mut out = Vec::new();
    for scales in 1..=3 {
        for window in [1, 2, 4] {
            for d in downs {
                for u in ups {
                    let cfg = GraftConfig::new(scales, window).with_kinds(d, u);
                    if cfg.level_extents(16, 16).is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
    }
    out
}

fn graft_output_shape(cfg: GraftConfig, res: usize, c: usize, heads: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut store = ParamStore::<f64>::new();
    let gp = GraftParams::init(&mut ParamBuilder::new(&mut store, seed), cfg, (res, res), c, heads)?;
    let x = uniform(&mut stream(seed, 9), &[1, res, res, c], 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = graft_forward(&p, tape.constant(x.clone()), &gp)?;
    Ok((x.shape().to_vec(), y.shape()))
}

pub fn invariant_rows(spec: &BackboneSpec, seed: u64) -> Result<Vec<CheckRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut rng = stream(seed, 10);
    for s in 0..spec.num_stages() {
        let (res, c, heads) = (spec.stage_resolution(s), spec.stage_channels[s], spec.stage_heads[s]);
        let x = uniform(&mut rng, &[2, res, res, c], 1.0);
        let tape = Tape::new();
        let grid = WindowGrid::new(res, res, spec.window)?;
        let back = window_reverse(window_partition(tape.constant(x.clone()), spec.window)?, &grid)?.value();
        rows.push(CheckRow::exact(format!("stage {s} window partition/reverse bit mismatches"), bit_mismatches(&x, &back), 0.0));

        let mut store = ParamStore::<f64>::new();
        let ap = AttentionParams::init(&mut ParamBuilder::new(&mut store, seed), "attn", c, heads, None)?;
        perturb(&mut store, seed, 0.5);
        let p = store.bind(&tape);
        let local = l_msa(&p, tape.constant(x.clone()), &ap, res)?.value();
        let global = global_msa(&p, tape.constant(x.clone()), &ap)?.value();
        rows.push(CheckRow::exact(format!("stage {s} l_msa(M=res) vs global bit mismatches"), bit_mismatches(&local, &global), 0.0));
    }

    let mismatches = if spec.grafts.is_empty() {
        0.0
    } else {
        let (mut grafted, gs) = Model::init::<f64>(spec, seed)?;
        grafted.graft_scale = 0.0;
        let (plain, ps) = Model::init::<f64>(&spec.without_grafts(), seed)?;
        let x = images(spec, &mut rng, 2);
        let t1 = Tape::new();
        let a = grafted.forward(&gs.bind(&t1), t1.constant(x.clone()))?.value();
        let t2 = Tape::new();
        let b = plain.forward(&ps.bind(&t2), t2.constant(x))?.value();
        bit_mismatches(&a, &b)
    };
    rows.push(CheckRow::exact("zero-scaled grafts vs ungrafted logits bit mismatches", mismatches, 0.0));

    for (idx, cfg) in &spec.grafts {
        let res = spec.stage_resolution(idx.stage);
        let (i, o) = graft_output_shape(*cfg, res, spec.stage_channels[idx.stage], spec.stage_heads[idx.stage], seed)?;
        rows.push(CheckRow::exact(format!("graft {}.{} preserves shape", idx.stage, idx.depth), f64::from(u8::from(i != o)), 0.0));
    }
    let grid = shape_grid();
    let mut bad = 0;
    for (k, cfg) in grid.iter().enumerate() {
        let (i, o) = graft_output_shape(*cfg, 16, 8, 2, seed + k as u64)?;
        bad += usize::from(i != o);
    }
    rows.push(CheckRow::exact(format!("graft shape grid ({} configs) failures", grid.len()), bad as f64, 0.0));
    Ok(rows)
}

/// Swin-T-like pyramid with the default branch policy.
pub fn reference_pyramid() -> BackboneSpec {
    BackboneSpec::pyramid(224, 4, vec![2, 2, 6, 2], vec![96, 192, 384, 768], vec![3, 6, 12, 24], 7, 1000)
        .with_default_grafts()
}

/// Twelve-block `C=192` homogeneous backbone under `7×7` windows with the
/// default branch policy.
pub fn reference_homogeneous() -> BackboneSpec {
    BackboneSpec::homogeneous(224, 4, 12, 192, 3, 7, 1000).with_default_grafts()
}

pub fn complexity_row(label: &str, spec: &BackboneSpec, resolutions: &[usize]) -> Result<CheckRow> {
    let report = verify_complexity_claim(spec, resolutions)?;
    let max = report.max_ratio();
    Ok(CheckRow {
        check: format!("{label} grafted/plain MAC ratio over {resolutions:?} (non-increasing: {})", report.non_increasing()),
        measured: max,
        limit: MAX_GRAFT_RATIO,
        pass: max <= MAX_GRAFT_RATIO && report.non_increasing(),
    })
}

fn ffn_params(store: &ParamStore<f32>) -> usize {
    store.iter().filter(|(n, _)| n.contains(".fc1.") || n.contains(".fc2.")).map(|(_, t)| t.len()).sum()
}

pub fn cost_rows(spec: &BackboneSpec) -> Result<Vec<CheckRow>> {
    let mut rows = vec![CheckRow::exact(
        "plain block MACs at 56x56 C=96 M=7",
        plain_block_macs(56, 56, 96, 7) as f64,
        GOLDEN_BLOCK_MACS as f64,
    )];
    let probe = BackboneSpec::homogeneous(56 * 4, 4, 1, 96, 3, 7, 1);
    let block = count_flops(&probe)?.record("stages.0.blocks.0").map_or(0, |r| r.macs);
    rows.push(CheckRow::exact("counted MACs of that block", block as f64, GOLDEN_BLOCK_MACS as f64));

    let report = count_params(spec)?;
    let (_, store) = Model::init::<f32>(spec, 0)?;
    rows.push(CheckRow::exact("counted vs live parameters", report.total_params() as f64, store.numel() as f64));
    let (_, orphans) = enumerate_params(&report, &store);
    rows.push(CheckRow::exact("live tensors without a cost record", orphans.len() as f64, 0.0));
    let (_, plain) = Model::init::<f32>(&spec.without_grafts(), 0)?;
    rows.push(CheckRow::exact("FFN parameters grafted vs plain", ffn_params(&store) as f64, ffn_params(&plain) as f64));

    let g = spec.grid();
    rows.push(complexity_row("config", spec, &[g, 2 * g, 4 * g, 8 * g])?);
    let fixed = [56, 112, 224, 448];
    rows.push(complexity_row("reference homogeneous", &reference_homogeneous(), &fixed)?);
    rows.push(complexity_row("reference pyramid", &reference_pyramid(), &fixed)?);
    Ok(rows)
}

fn oracle_compare(fast: &Tensor<f64>, slow: &[Map]) -> Result<f64> {
    Ok(max_relative_error(fast, &Map::batch_into(slow)?, ORACLE_FLOOR))
}

pub fn oracle_rows(spec: &BackboneSpec, seed: u64) -> Result<Vec<CheckRow>> {
    let (model, mut store) = Model::init::<f64>(spec, seed)?;
    perturb(&mut store, seed, 0.5);
    let mut rng = stream(seed, 11);
    let mut rows = Vec::new();

    let x = images(spec, &mut rng, 2);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let fast = model.forward(&p, tape.constant(x.clone()))?.value();
    let slow: Vec<f64> = Map::batch_from(&x)?.iter().flat_map(|img| reference::model_forward(&store, &model, img)).collect();
    let slow = Tensor::from_vec(fast.shape().to_vec(), slow)?;
    rows.push(CheckRow::at_most("model logits vs loops", max_relative_error(&fast, &slow, ORACLE_FLOOR), ORACLE_TOL));

    for (s, stage) in model.stages.iter().enumerate() {
        let res = spec.stage_resolution(s);
        let c = spec.stage_channels[s];
        let first = &stage.blocks[0];
        let x = uniform(&mut rng, &[2, res, res, c], 1.0);
        let maps = Map::batch_from(&x)?;
        let local = l_msa(&p, tape.constant(x.clone()), &first.attn, spec.window)?.value();
        let slow: Vec<Map> = maps.iter().map(|m| reference::l_msa(&store, &first.attn, m, spec.window)).collect();
        rows.push(CheckRow::at_most(format!("stage {s} l_msa vs loops"), oracle_compare(&local, &slow)?, ORACLE_TOL));
        if !spec.uses_relative_bias() {
            let global = global_msa(&p, tape.constant(x.clone()), &first.attn)?.value();
            let slow: Vec<Map> = maps.iter().map(|m| reference::global_msa(&store, &first.attn, m)).collect();
            rows.push(CheckRow::at_most(format!("stage {s} global_msa vs loops"), oracle_compare(&global, &slow)?, ORACLE_TOL));
        }
        for (d, block) in stage.blocks.iter().enumerate() {
            if let Some(gp) = &block.graft {
                let y = graft_forward(&p, tape.constant(x.clone()), gp)?.value();
                let slow: Vec<Map> = maps.iter().map(|m| reference::graft_forward(&store, gp, m)).collect();
                rows.push(CheckRow::at_most(format!("graft {s}.{d} vs loops"), oracle_compare(&y, &slow)?, ORACLE_TOL));
            }
        }
    }
    Ok(rows)
}
