//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Everything here is a function of a [`BackboneSpec`] alone. One MAC counts
//! as one FLOP. A plain window-attention block on an `H×W×C` map with window
//! `M` and FFN ratio 4 costs
//!
//! ```text
//! 12·H·W·C² + 2·M²·H·W·C
//! ```
//!
//! (`4HWC²` for the four projections, `8HWC²` for the FFN, `2M²HWC` for the
//! two attention products). Normalisation, activations, softmax, pooling and
//! interpolation are tallied separately as unit-cost element operations.
//!
//! ```
//! use graft::cost::plain_block_macs;
//! assert_eq!(plain_block_macs(56, 56, 96, 7), 376_320_000);
//! ```

use std::fmt;

use crate::attention::RelativeBias;
use crate::backbone::{BackboneSpec, BlockIndex, StructureKind};
use crate::error::Result;
use crate::graft::{DownKind, GraftConfig, UpKind};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostGroup {
    Backbone,
    Graft,
    Head,
}

impl fmt::Display for CostGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Backbone => "backbone",
            Self::Graft => "graft",
            Self::Head => "head",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRecord {
    /// Parameter-name prefix owned by this record, e.g. `stages.0.blocks.1`.
    pub name: String,
    pub group: CostGroup,
    pub params: u64,
    pub macs: u64,
    /// Unit-cost element operations (LN, GELU, softmax, pooling, ...).
    pub elementwise: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub records: Vec<CostRecord>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.records.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.records.iter().map(|r| r.macs).sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.records.iter().map(|r| r.elementwise).sum()
    }

    pub fn group_params(&self, group: CostGroup) -> u64 {
        self.records.iter().filter(|r| r.group == group).map(|r| r.params).sum()
    }

    pub fn group_macs(&self, group: CostGroup) -> u64 {
        self.records.iter().filter(|r| r.group == group).map(|r| r.macs).sum()
    }

    pub fn record(&self, name: &str) -> Option<&CostRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Aligned, human-readable table.
    pub fn to_text(&self) -> String {
        let width = self.records.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!(
            "{:<width$}  {:<8}  {:>12}  {:>16}  {:>14}\n",
            "block", "group", "params", "macs", "elementwise"
        );
        for r in &self.records {
            out += &format!(
                "{:<width$}  {:<8}  {:>12}  {:>16}  {:>14}\n",
                r.name, r.group, r.params, r.macs, r.elementwise
            );
        }
        out += &format!(
            "{:<width$}  {:<8}  {:>12}  {:>16}  {:>14}\n",
            "total",
            "",
            self.total_params(),
            self.total_macs(),
            self.total_elementwise()
        );
        out
    }

    /// `name,group,params,macs,elementwise` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,group,params,macs,elementwise\n");
        for r in &self.records {
            out += &format!("{},{},{},{},{}\n", r.name, r.group, r.params, r.macs, r.elementwise);
        }
        out
    }
}

/// MACs of a plain window-attention block with FFN ratio 4.
pub fn plain_block_macs(h: u64, w: u64, c: u64, m: u64) -> u64 {
    12 * h * w * c * c + 2 * m * m * h * w * c
}

#[derive(Default)]
struct Tally {
    params: u64,
    macs: u64,
    elementwise: u64,
}

impl Tally {
    fn linear(&mut self, tokens: u64, fan_in: u64, fan_out: u64) {
        self.params += fan_in * fan_out + fan_out;
        self.macs += tokens * fan_in * fan_out;
    }

    fn norm(&mut self, tokens: u64, width: u64) {
        self.params += 2 * width;
        self.elementwise += tokens * width;
    }

    /// Projections plus score and value products; `keys` is the number of
    /// keys each query sees.
    fn attention(&mut self, queries: u64, kv_tokens: u64, keys: u64, c: u64, heads: u64, rel: Option<u64>) {
        self.linear(queries, c, c);
        self.linear(kv_tokens, c, c);
        self.linear(kv_tokens, c, c);
        self.linear(queries, c, c);
        self.macs += 2 * queries * keys * c;
        self.elementwise += heads * queries * keys;
        if let Some(m) = rel {
            let m = m as usize;
            self.params += (RelativeBias::table_rows(m, m) as u64) * heads;
            self.elementwise += heads * queries * keys;
        }
    }

    fn into_record(self, name: String, group: CostGroup) -> CostRecord {
        CostRecord { name, group, params: self.params, macs: self.macs, elementwise: self.elementwise }
    }
}

fn block_tally(spec: &BackboneSpec, idx: BlockIndex) -> Tally {
    let s = idx.stage;
    let res = spec.stage_resolution(s) as u64;
    let t = res * res;
    let c = spec.stage_channels[s] as u64;
    let heads = spec.stage_heads[s] as u64;
    let m = spec.window as u64;
    let hidden = spec.mlp_ratio as u64 * c;
    let mut k = Tally::default();
    k.norm(t, c);
    k.attention(t, t, m * m, c, heads, spec.uses_relative_bias().then_some(m));
    if spec.shift_for(s, idx.depth) > 0 {
        k.elementwise += heads * t * m * m;
    }
    k.norm(t, c);
    k.linear(t, c, hidden);
    k.elementwise += t * hidden;
    k.linear(t, hidden, c);
    k.elementwise += 2 * t * c;
    k
}

fn graft_tally(cfg: &GraftConfig, res: u64, c: u64, heads: u64) -> Result<Tally> {
    let extents = cfg.level_extents(res as usize, res as usize)?;
    let tokens: Vec<u64> = extents.iter().map(|&(h, w)| (h * w) as u64).collect();
    let m = cfg.window as u64;
    let rr = (cfg.ratio_h * cfg.ratio_w) as u64;
    let mut k = Tally::default();
    for b in 1..=cfg.scales {
        let (fine, coarse) = (tokens[b - 1], tokens[b]);
        match cfg.down {
            DownKind::AvgPool => {
                k.norm(fine, c);
                k.elementwise += 2 * fine * c;
            }
            DownKind::LinearProj => {
                k.norm(coarse, rr * c);
                k.linear(coarse, rr * c, c);
            }
            DownKind::CrossAttn => {
                k.norm(fine, c);
                k.elementwise += fine * c;
                k.attention(coarse, fine, fine, c, heads, None);
            }
        }
        k.norm(coarse, c);
        k.attention(coarse, coarse, m * m, c, heads, Some(m));
        k.elementwise += coarse * c * if b < cfg.scales { 2 } else { 1 };
        match cfg.up {
            UpKind::LearnableWBilinear => {
                k.norm(coarse, c);
                k.linear(coarse, c, c);
                k.params += coarse * c;
                k.elementwise += 3 * coarse * c + fine * c;
            }
            UpKind::Nearest => k.elementwise += fine * c,
            UpKind::CrossAttn => {
                k.norm(coarse, c);
                k.norm(fine, c);
                k.attention(fine, coarse, coarse, c, heads, None);
            }
        }
    }
    Ok(k)
}

fn build(spec: &BackboneSpec) -> Result<CostReport> {
    spec.validate()?;
    let mut records = Vec::new();
    let g = spec.grid() as u64;
    let c0 = spec.stage_channels[0] as u64;
    let patch_dim = (spec.patch_size * spec.patch_size * spec.in_channels) as u64;
    let mut embed = Tally::default();
    embed.linear(g * g, patch_dim, c0);
    match spec.kind {
        StructureKind::Homogeneous => {
            embed.params += g * g * c0;
            embed.elementwise += g * g * c0;
        }
        StructureKind::Pyramid => embed.norm(g * g, c0),
    }
    records.push(embed.into_record("embed".into(), CostGroup::Backbone));
    for s in 0..spec.num_stages() {
        let res = spec.stage_resolution(s) as u64;
        let c = spec.stage_channels[s] as u64;
        if s > 0 {
            let prev = spec.stage_channels[s - 1] as u64;
            let mut k = Tally::default();
            k.norm(res * res, 4 * prev);
            k.linear(res * res, 4 * prev, c);
            records.push(k.into_record(format!("stages.{s}.merge"), CostGroup::Backbone));
        }
        for d in 0..spec.stage_depths[s] {
            let idx = BlockIndex::new(s, d);
            let name = format!("stages.{s}.blocks.{d}");
            let mut k = block_tally(spec, idx);
            if let Some(cfg) = spec.grafts.get(&idx) {
                k.elementwise += res * res * c;
                let heads = spec.stage_heads[s] as u64;
                records.push(k.into_record(name.clone(), CostGroup::Backbone));
                records.push(graft_tally(cfg, res, c, heads)?.into_record(format!("{name}.graft"), CostGroup::Graft));
            } else {
                records.push(k.into_record(name, CostGroup::Backbone));
            }
        }
    }
    let last = spec.num_stages() - 1;
    let (res, c) = (spec.stage_resolution(last) as u64, spec.stage_channels[last] as u64);
    let mut head = Tally::default();
    head.norm(res * res, c);
    head.elementwise += res * res * c;
    head.linear(1, c, spec.num_classes as u64);
    records.push(head.into_record("head".into(), CostGroup::Head));
    Ok(CostReport { records })
}

/// Per-block parameter counts (the same report as [`count_flops`]; both
/// columns are always filled).
pub fn count_params(spec: &BackboneSpec) -> Result<CostReport> {
    build(spec)
}

/// Per-block MAC and element-operation counts for one image.
pub fn count_flops(spec: &BackboneSpec) -> Result<CostReport> {
    build(spec)
}

/// Counts a live store by assigning every tensor to the record whose name is
/// its longest dotted prefix. Returns `(record name, count)` in report order
/// plus any tensors no record claims.
pub fn enumerate_params<T: Real>(report: &CostReport, store: &ParamStore<T>) -> (Vec<(String, u64)>, Vec<String>) {
    let mut counts: Vec<(String, u64)> = report.records.iter().map(|r| (r.name.clone(), 0)).collect();
    let mut orphans = Vec::new();
    for (name, tensor) in store.iter() {
        let owner = counts
            .iter()
            .enumerate()
            .filter(|(_, (prefix, _))| name.len() > prefix.len() && name.starts_with(prefix.as_str()) && name.as_bytes()[prefix.len()] == b'.')
            .max_by_key(|(_, (prefix, _))| prefix.len())
            .map(|(i, _)| i);
        match owner {
            Some(i) => counts[i].1 += tensor.len() as u64,
            None => orphans.push(name.to_string()),
        }
    }
    (counts, orphans)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityPoint {
    /// Level-0 token-grid side.
    pub resolution: usize,
    pub plain_macs: u64,
    pub grafted_macs: u64,
    /// Grafted over plain MACs of the backbone and branches; the head is
    /// resolution-independent and excluded.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub points: Vec<ComplexityPoint>,
}

impl ComplexityReport {
    pub fn max_ratio(&self) -> f64 {
        self.points.iter().map(|p| p.ratio).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Ratio at the largest tested resolution.
    pub fn limiting_overhead(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.ratio)
    }

    /// True when no ratio exceeds the one at the previous resolution.
    pub fn non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].ratio <= w[0].ratio)
    }
}

/// Rescales `spec` so its token grid is `resolution` (graft configs kept
/// as they are) and compares against the same backbone without grafts.
pub fn verify_complexity_claim(spec: &BackboneSpec, resolutions: &[usize]) -> Result<ComplexityReport> {
    let mut points = Vec::new();
    for &resolution in resolutions {
        let mut grafted = spec.clone();
        grafted.image_size = resolution * spec.patch_size;
        let plain = grafted.without_grafts();
        let body = |r: &CostReport| r.group_macs(CostGroup::Backbone) + r.group_macs(CostGroup::Graft);
        let plain_macs = body(&count_flops(&plain)?);
        let grafted_macs = body(&count_flops(&grafted)?);
        points.push(ComplexityPoint {
            resolution,
            plain_macs,
            grafted_macs,
            ratio: grafted_macs as f64 / plain_macs as f64,
        });
    }
    Ok(ComplexityReport { points })
}
