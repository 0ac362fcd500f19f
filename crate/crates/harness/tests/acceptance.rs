//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use graft::attention::{global_msa, l_msa, window_partition, window_reverse, AttentionParams, WindowGrid};
use graft::cost::{count_params, enumerate_params, plain_block_macs, verify_complexity_claim};
use graft::graft::{downsample, graft_forward, w_bilinear_upsample, DownKind, GraftConfig, GraftParams, UpKind, UpParams};
use graft::params::ParamBuilder;
use graft::reference::{self, Map};
use graft::tensor::max_relative_error;
use graft::{BackboneSpec, BlockIndex, Model, ParamStore, Tape, Tensor};
use graft_harness::suites::{
    grad_rows, perturb, reference_homogeneous, reference_pyramid, shape_grid, GOLDEN_BLOCK_MACS, GRAD_TOL,
    MAX_GRAFT_RATIO, ORACLE_FLOOR, ORACLE_TOL,
};
use graft_harness::train::write_outcome;
use graft_harness::{parse_config, train, train_paired, Checkpoint, Precision, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.cfg");
const DESK_SEEDS: u64 = 5;
const DESK_FLOOR_PP: f64 = -0.5;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn against(fast: &Tensor<f64>, slow: &[Map]) -> f64 {
    Map::batch_into(slow).map_or(f64::INFINITY, |s| max_relative_error(fast, &s, ORACLE_FLOOR))
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut spec = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 2, 4);
    spec.grafts.insert(BlockIndex::new(0, 1), GraftConfig::new(2, 2));
    let rows = grad_rows(&spec, 0, 3).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = rows.iter().max_by(|a, b| a.measured.total_cmp(&b.measured)).ok_or("no parameter groups")?;
    let pass = rows.iter().all(|r| r.pass) && elapsed < Duration::from_secs(60);
    Ok((
        pass,
        format!(
            "{} groups x 3 seeds, worst {:.2e} ({}) <= {GRAD_TOL:e}, {:.1}s < 60s",
            rows.len(),
            worst.measured,
            worst.check,
            elapsed.as_secs_f64()
        ),
    ))
}

fn graft_fixture(seed: u64, cfg: GraftConfig, level0: usize, c: usize, heads: usize) -> Result<(ParamStore<f64>, GraftParams), String> {
    let mut store = ParamStore::new();
    let gp = GraftParams::init(&mut ParamBuilder::new(&mut store, seed), cfg, (level0, level0), c, heads).map_err(err)?;
    perturb(&mut store, seed ^ 0x5eed, 0.5);
    Ok((store, gp))
}

fn oracle_equivalence() -> Outcome {
    let mut worst = [0.0f64; 5];
    let mut counts = [0usize; 5];
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let m = [2, 3, 4][seed as usize % 3];
        let heads = [1, 2, 3][seed as usize % 3];
        let c = heads * 2;
        let mut store = ParamStore::new();
        let rel = (seed % 2 == 0).then_some((m, m));
        let ap = AttentionParams::init(&mut ParamBuilder::new(&mut store, seed), "a", c, heads, rel).map_err(err)?;
        perturb(&mut store, seed + 100, 0.5);
        let x = uniform(&mut r, &[2, 2 * m, m * (1 + seed as usize % 2), c], 1.0);
        let maps = Map::batch_from(&x).map_err(err)?;
        let tape = Tape::new();
        let p = store.bind(&tape);
        let fast = l_msa(&p, tape.constant(x.clone()), &ap, m).map_err(err)?.value();
        let slow: Vec<Map> = maps.iter().map(|mp| reference::l_msa(&store, &ap, mp, m)).collect();
        worst[0] = worst[0].max(against(&fast, &slow));
        counts[0] += 1;

        let mut gstore = ParamStore::new();
        let gap = AttentionParams::init(&mut ParamBuilder::new(&mut gstore, seed), "g", c, heads, None).map_err(err)?;
        perturb(&mut gstore, seed + 200, 0.5);
        let gp = gstore.bind(&tape);
        let fast = global_msa(&gp, tape.constant(x.clone()), &gap).map_err(err)?.value();
        let slow: Vec<Map> = maps.iter().map(|mp| reference::global_msa(&gstore, &gap, mp)).collect();
        worst[1] = worst[1].max(against(&fast, &slow));
        counts[1] += 1;

        let wm = [1, 2, 3, 4][seed as usize % 4];
        let cfg = GraftConfig::new(1, wm);
        let (store, gp) = graft_fixture(seed, cfg, 4 * wm, 4, 2)?;
        let UpParams::WBilinear { norm, mix, pos_emb } = &gp.up[0] else {
            return Err("default branch is not W-Bilinear".into());
        };
        let z = uniform(&mut r, &[2, 2 * wm, 2 * wm, 4], 2.0);
        let p = store.bind(&tape);
        let fast = w_bilinear_upsample(&p, tape.constant(z.clone()), norm, mix, *pos_emb, &cfg).map_err(err)?.value();
        let slow: Vec<Map> = Map::batch_from(&z)
            .map_err(err)?
            .iter()
            .map(|mp| reference::w_bilinear_upsample(&store, norm, mix, *pos_emb, &cfg, mp))
            .collect();
        worst[2] = worst[2].max(against(&fast, &slow));
        counts[2] += 1;

        let cfg = GraftConfig::new(1, 2);
        let (store, gp) = graft_fixture(seed + 50, cfg, 8, 4, 2)?;
        let x = uniform(&mut r, &[2, 8, 8, 4], 2.0);
        let p = store.bind(&tape);
        let fast = downsample(&p, tape.constant(x.clone()), &gp.down[0], &cfg).map_err(err)?.value();
        let slow: Vec<Map> =
            Map::batch_from(&x).map_err(err)?.iter().map(|mp| reference::downsample(&store, &gp.down[0], &cfg, mp)).collect();
        worst[3] = worst[3].max(against(&fast, &slow));
        counts[3] += 1;
    }
    let downs = [DownKind::AvgPool, DownKind::LinearProj, DownKind::CrossAttn];
    let ups = [UpKind::LearnableWBilinear, UpKind::Nearest, UpKind::CrossAttn];
    let mut seed = 1000;
    for scales in 1..=3usize {
        for down in downs {
            for up in ups {
                seed += 1;
                let level0 = 2 << scales;
                let cfg = GraftConfig::new(scales, 2).with_kinds(down, up);
                let (store, gp) = graft_fixture(seed, cfg, level0, 4, 2)?;
                let x = uniform(&mut rng(seed), &[1, level0, level0, 4], 1.0);
                let tape = Tape::new();
                let p = store.bind(&tape);
                let fast = graft_forward(&p, tape.constant(x.clone()), &gp).map_err(err)?.value();
                let slow: Vec<Map> =
                    Map::batch_from(&x).map_err(err)?.iter().map(|mp| reference::graft_forward(&store, &gp, mp)).collect();
                worst[4] = worst[4].max(against(&fast, &slow));
                counts[4] += 1;
            }
        }
    }
    let names = ["l_msa", "global_msa", "w_bilinear_upsample", "downsample(avgpool)", "graft_forward(B<=3)"];
    let detail: Vec<String> = names.iter().zip(worst).zip(counts).map(|((n, w), k)| format!("{n} {w:.1e} (n={k})")).collect();
    let pass = worst.iter().all(|&w| w <= ORACLE_TOL) && counts.iter().all(|&k| k >= 10);
    Ok((pass, format!("{} <= {ORACLE_TOL:e}", detail.join(", "))))
}

fn structural_identities() -> Outcome {
    let mut r = rng(7);
    let mut a_bad = 0;
    for (h, w, m) in [(8, 8, 4), (12, 6, 3), (7, 7, 7), (6, 10, 2), (5, 5, 1)] {
        let x = uniform(&mut r, &[2, h, w, 3], 1.0);
        let tape = Tape::new();
        let grid = WindowGrid::new(h, w, m).map_err(err)?;
        let back = window_reverse(window_partition(tape.constant(x.clone()), m).map_err(err)?, &grid).map_err(err)?.value();
        a_bad += usize::from(bits(&back) != bits(&x));
    }

    let mut b_bad = 0;
    for (seed, (res, c, heads)) in [(8, 8, 2), (6, 6, 3), (4, 4, 1)].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let ap = AttentionParams::init(&mut ParamBuilder::new(&mut store, seed as u64), "a", c, heads, None).map_err(err)?;
        perturb(&mut store, seed as u64, 0.5);
        let x = uniform(&mut r, &[2, res, res, c], 1.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let local = l_msa(&p, tape.constant(x.clone()), &ap, res).map_err(err)?.value();
        let global = global_msa(&p, tape.constant(x), &ap).map_err(err)?.value();
        b_bad += usize::from(bits(&local) != bits(&global));
    }

    let mut c_bad = 0;
    let specs = [
        BackboneSpec::homogeneous(32, 4, 3, 16, 2, 4, 4).with_default_grafts(),
        BackboneSpec::pyramid(32, 2, vec![2, 2], vec![8, 16], vec![2, 4], 4, 3).with_default_grafts(),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let (mut grafted, gs) = Model::init::<f64>(spec, i as u64).map_err(err)?;
        grafted.graft_scale = 0.0;
        let (plain, ps) = Model::init::<f64>(&spec.without_grafts(), i as u64).map_err(err)?;
        let x = uniform(&mut r, &[2, spec.image_size, spec.image_size, 3], 1.0);
        let t1 = Tape::new();
        let a = grafted.forward(&gs.bind(&t1), t1.constant(x.clone())).map_err(err)?.value();
        let t2 = Tape::new();
        let b = plain.forward(&ps.bind(&t2), t2.constant(x)).map_err(err)?.value();
        c_bad += usize::from(grafted.graft_count() == 0 || bits(&a) != bits(&b));
    }

    let grid = shape_grid();
    let mut d_bad = 0;
    for (k, cfg) in grid.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let gp = GraftParams::init(&mut ParamBuilder::new(&mut store, k as u64), *cfg, (16, 16), 8, 2).map_err(err)?;
        let x = uniform(&mut r, &[1, 16, 16, 8], 1.0);
        let tape = Tape::new();
        let y = graft_forward(&store.bind(&tape), tape.constant(x.clone()), &gp).map_err(err)?;
        d_bad += usize::from(y.shape() != x.shape());
    }
    let pass = a_bad + b_bad + c_bad + d_bad == 0 && grid.len() >= 50;
    Ok((
        pass,
        format!(
            "(a) roundtrip 5 grids, {a_bad} differ; (b) l_msa(M=res)==global 3 cases, {b_bad} differ; \
             (c) zero-scaled grafts 2 models, {c_bad} differ; (d) shape grid {} configs, {d_bad} fail",
            grid.len()
        ),
    ))
}

fn complexity() -> Outcome {
    let golden = plain_block_macs(56, 56, 96, 7);
    let probe = BackboneSpec::homogeneous(224, 4, 1, 96, 3, 7, 1);
    let counted = graft::cost::count_flops(&probe).map_err(err)?.record("stages.0.blocks.0").map_or(0, |r| r.macs);
    let resolutions = [56, 112, 224, 448];
    let mut pass = golden == GOLDEN_BLOCK_MACS && counted == GOLDEN_BLOCK_MACS;
    let mut detail = vec![format!("block MACs formula {golden}, counted {counted}, expected {GOLDEN_BLOCK_MACS}")];
    for (label, spec) in [("homogeneous", reference_homogeneous()), ("pyramid", reference_pyramid())] {
        let report = verify_complexity_claim(&spec, &resolutions).map_err(err)?;
        let ratios: Vec<String> = report.points.iter().map(|p| format!("{:.4}", p.ratio)).collect();
        pass &= report.max_ratio() <= MAX_GRAFT_RATIO && report.non_increasing();
        detail.push(format!(
            "{label} ratios [{}] over {resolutions:?} (max <= {MAX_GRAFT_RATIO}, non-increasing {})",
            ratios.join(", "),
            report.non_increasing()
        ));
    }
    Ok((pass, detail.join("; ")))
}

fn ffn_params(store: &ParamStore<f32>) -> usize {
    store.iter().filter(|(n, _)| n.contains(".fc1.") || n.contains(".fc2.")).map(|(_, t)| t.len()).sum()
}

fn parameter_accounting() -> Outcome {
    let mut lin = BackboneSpec::homogeneous(32, 4, 3, 16, 2, 4, 4);
    lin.grafts.insert(BlockIndex::new(0, 2), GraftConfig::new(1, 4).with_kinds(DownKind::LinearProj, UpKind::CrossAttn));
    let mut cross = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 2, 3);
    cross.grafts.insert(BlockIndex::new(0, 1), GraftConfig::new(2, 2).with_kinds(DownKind::CrossAttn, UpKind::Nearest));
    let specs = [
        BackboneSpec::homogeneous(32, 4, 2, 8, 2, 4, 4),
        BackboneSpec::homogeneous(32, 4, 4, 16, 4, 2, 10).with_default_grafts(),
        BackboneSpec::pyramid(64, 4, vec![2, 2, 2], vec![8, 16, 32], vec![1, 2, 4], 2, 5).with_default_grafts(),
        BackboneSpec::pyramid(32, 2, vec![1, 3], vec![4, 12], vec![2, 3], 4, 2).with_default_grafts(),
        BackboneSpec::pyramid(128, 4, vec![2, 2, 2, 2], vec![16, 32, 64, 128], vec![1, 2, 4, 8], 4, 10).with_default_grafts(),
        lin,
        cross,
    ];
    let mut mismatches = 0;
    let mut ffn_growth = 0i64;
    let mut grafted_specs = 0;
    for (i, spec) in specs.iter().enumerate() {
        let report = count_params(spec).map_err(err)?;
        let (_, store) = Model::init::<f32>(spec, i as u64).map_err(err)?;
        let (per_record, orphans) = enumerate_params(&report, &store);
        let records_agree = report.records.iter().zip(&per_record).all(|(r, (_, n))| r.params == *n);
        mismatches += usize::from(report.total_params() != store.numel() as u64 || !orphans.is_empty() || !records_agree);
        if !spec.grafts.is_empty() {
            grafted_specs += 1;
            let (_, plain) = Model::init::<f32>(&spec.without_grafts(), i as u64).map_err(err)?;
            ffn_growth += ffn_params(&store) as i64 - ffn_params(&plain) as i64;
        }
    }
    Ok((
        mismatches == 0 && ffn_growth == 0 && specs.len() >= 5,
        format!(
            "{} specs, {mismatches} count/enumeration mismatches; FFN parameter change from grafting over {grafted_specs} grafted specs: {ffn_growth}",
            specs.len()
        ),
    ))
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let base = parse_config(DESK, "configs/desk.cfg").map_err(err)?;
    let mut grafted = Vec::new();
    let mut plain = Vec::new();
    let mut trace_gap = Vec::new();
    for seed in 0..DESK_SEEDS {
        let paired = train_paired(&RunConfig { seed, ..base.clone() }).map_err(err)?;
        grafted.push(paired.grafted.last().test_acc);
        plain.push(paired.plain.last().test_acc);
        let mean = |rows: &[graft_harness::MetricRow]| rows.iter().map(|r| r.test_acc).sum::<f64>() / rows.len() as f64;
        trace_gap.push(mean(&paired.grafted.rows) - mean(&paired.plain.rows));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap_pp = 100.0 * (avg(&grafted) - avg(&plain));
    let elapsed = start.elapsed();
    let pass = gap_pp >= DESK_FLOOR_PP && elapsed < Duration::from_secs(600);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{:.3}", a)).collect::<Vec<_>>().join(",");
    Ok((
        pass,
        format!(
            "test acc grafted [{}] mean {:.4}, plain [{}] mean {:.4}, gap {gap_pp:+.2}pp >= {DESK_FLOOR_PP}pp; \
             trace-mean gap {:+.2}pp; {} steps x {DESK_SEEDS} seeds in {:.0}s < 600s",
            fmt(&grafted),
            avg(&grafted),
            fmt(&plain),
            avg(&plain),
            100.0 * avg(&trace_gap),
            base.optim.steps,
            elapsed.as_secs_f64()
        ),
    ))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism_and_serialization() -> Outcome {
    let mut cfg = parse_config(DESK, "configs/desk.cfg").map_err(err)?;
    cfg.precision = Precision::Verify64;
    cfg.optim.steps = 60;
    cfg.optim.eval_every = 20;
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        write_outcome(d.path(), &train(&cfg).map_err(err)?).map_err(err)?;
    }
    let metrics_same = read(&dirs[0].path().join("metrics.csv"))? == read(&dirs[1].path().join("metrics.csv"))?;
    let ckpt_path = dirs[0].path().join("checkpoint.bin");
    let ckpt_bytes = read(&ckpt_path)?;
    let ckpt_same = ckpt_bytes == read(&dirs[1].path().join("checkpoint.bin"))?;

    let loaded = Checkpoint::load(&ckpt_path).map_err(err)?;
    let resaved = loaded.to_bytes() == ckpt_bytes;
    let (_, mut store) = Model::init::<f32>(&cfg.spec, 12345).map_err(err)?;
    loaded.restore(&mut store).map_err(err)?;
    let restored = Checkpoint::from_store(&cfg.spec, &store).to_bytes() == ckpt_bytes;
    Ok((
        metrics_same && ckpt_same && resaved && restored,
        format!(
            "verify64 x2: metrics identical {metrics_same}, checkpoints identical {ckpt_same} ({} bytes); \
             load->save identical {resaved}; restore->save identical {restored}",
            ckpt_bytes.len()
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("structural identities", structural_identities),
        ("complexity", complexity),
        ("parameter accounting", parameter_accounting),
        ("desk-scale trend", desk_trend),
        ("determinism & serialization", determinism_and_serialization),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let (pass, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
