//! Slow, loop-based reference implementations in `f64`.
//!
//! These share parameter layouts with the tape versions but nothing else:
//! no gathers, no batched matmuls, no window partitioning. Attention is
//! computed query by query with explicit key lists, shifted windows by
//! coordinate arithmetic, and interpolation by evaluating the bilinear
//! weights at each output pixel. Tests compare the two paths.

use crate::attention::{AttentionParams, MASK_LOGIT};
use crate::backbone::{BlockParams, Model, PatchEmbed, PatchMerging};
use crate::error::{Error, Result};
use crate::graft::{DownParams, GraftConfig, GraftParams, LevelParams, UpParams};
use crate::params::{Linear, Norm, ParamId, ParamStore};
use crate::tensor::{Tensor, LN_EPS};

/// One `H×W×C` feature map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }

    /// Splits an `[N, H, W, C]` tensor into per-image maps.
    pub fn batch_from(t: &Tensor<f64>) -> Result<Vec<Map>> {
        let [n, h, w, c] = t.shape()[..] else {
            return Err(Error::Shape(format!("expected [N,H,W,C], got {:?}", t.shape())));
        };
        Ok((0..n)
            .map(|b| Map { h, w, c, data: t.data()[b * h * w * c..(b + 1) * h * w * c].to_vec() })
            .collect())
    }

    pub fn batch_into(maps: &[Map]) -> Result<Tensor<f64>> {
        let first = maps.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let data = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
        Tensor::from_vec(vec![maps.len(), first.h, first.w, first.c], data)
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    fn plus(&self, other: &Map) -> Self {
        assert_eq!((self.h, self.w, self.c), (other.h, other.w, other.c), "map extents differ");
        Self { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(), ..self.clone() }
    }
}

fn param(store: &ParamStore<f64>, id: ParamId) -> &[f64] {
    store.get(id).data()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn layer_norm_vec(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + LN_EPS).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) / denom * g + b).collect()
}

pub fn layer_norm(store: &ParamStore<f64>, norm: &Norm, x: &Map) -> Map {
    let (gamma, beta) = (param(store, norm.gamma), param(store, norm.beta));
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let v = layer_norm_vec(x.at(y, xx), gamma, beta);
            out.at_mut(y, xx).copy_from_slice(&v);
        }
    }
    out
}

pub fn linear_vec(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = param(store, lin.weight);
    (0..lin.fan_out)
        .map(|o| {
            let mut acc = lin.bias.map_or(0.0, |b| param(store, b)[o]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w[i * lin.fan_out + o];
            }
            acc
        })
        .collect()
}

pub fn linear(store: &ParamStore<f64>, lin: &Linear, x: &Map) -> Map {
    let mut out = Map::zeros(x.h, x.w, lin.fan_out);
    for y in 0..x.h {
        for xx in 0..x.w {
            let v = linear_vec(store, lin, x.at(y, xx));
            out.at_mut(y, xx).copy_from_slice(&v);
        }
    }
    out
}

/// Multi-head attention for one query against an explicit key list.
/// `extra(head, key_index)` is added to each scaled logit.
fn attend_one(
    ap: &AttentionParams,
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    extra: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let d = ap.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; ap.dim];
    for head in 0..ap.heads {
        let range = head * d..(head + 1) * d;
        let logits: Vec<f64> = keys
            .iter()
            .enumerate()
            .map(|(j, k)| {
                let dot: f64 = q[range.clone()].iter().zip(&k[range.clone()]).map(|(a, b)| a * b).sum();
                dot * scale + extra(head, j)
            })
            .collect();
        let probs = softmax(&logits);
        for (j, pj) in probs.iter().enumerate() {
            for ch in range.clone() {
                out[ch] += pj * values[j][ch];
            }
        }
    }
    out
}

fn region(v: usize, extent: usize, window: usize, shift: usize) -> usize {
    if v < extent - window {
        0
    } else if v < extent - shift {
        1
    } else {
        2
    }
}

/// Window attention with an optional cyclic shift, one query at a time.
/// Token `(y, x)` sits at `((y − s) mod H, (x − s) mod W)` in the shifted
/// frame and attends to every token sharing its `M×M` window there.
pub fn window_attention(
    store: &ParamStore<f64>,
    ap: &AttentionParams,
    x: &Map,
    win_h: usize,
    win_w: usize,
    shift: usize,
) -> Map {
    let q = linear(store, &ap.q, x);
    let k = linear(store, &ap.k, x);
    let v = linear(store, &ap.v, x);
    let (h, w) = (x.h, x.w);
    let mut out = Map::zeros(h, w, x.c);
    for y in 0..h {
        for xx in 0..w {
            let (sy, sx) = ((y + h - shift) % h, (xx + w - shift) % w);
            let (wy, wx) = (sy / win_h * win_h, sx / win_w * win_w);
            let mut members = Vec::new();
            for ky in wy..wy + win_h {
                for kx in wx..wx + win_w {
                    members.push((ky, kx));
                }
            }
            let orig = |(a, b): (usize, usize)| ((a + shift) % h, (b + shift) % w);
            let keys: Vec<Vec<f64>> = members.iter().map(|&m| k.at(orig(m).0, orig(m).1).to_vec()).collect();
            let values: Vec<Vec<f64>> = members.iter().map(|&m| v.at(orig(m).0, orig(m).1).to_vec()).collect();
            let label = |(a, b): (usize, usize)| (region(a, h, win_h, shift), region(b, w, win_w, shift));
            let extra = |head: usize, j: usize| {
                let (ky, kx) = members[j];
                let mut e = 0.0;
                if let Some(rb) = &ap.rel_bias {
                    let dy = sy - wy + win_h - 1 - (ky - wy);
                    let dx = sx - wx + win_w - 1 - (kx - wx);
                    e += param(store, rb.table)[(dy * (2 * win_w - 1) + dx) * rb.heads + head];
                }
                if shift > 0 && label((sy, sx)) != label((ky, kx)) {
                    e += MASK_LOGIT;
                }
                e
            };
            let mixed = attend_one(ap, q.at(y, xx), &keys, &values, extra);
            let o = linear_vec(store, &ap.o, &mixed);
            out.at_mut(y, xx).copy_from_slice(&o);
        }
    }
    out
}

pub fn l_msa(store: &ParamStore<f64>, ap: &AttentionParams, x: &Map, window: usize) -> Map {
    window_attention(store, ap, x, window, window, 0)
}

/// Every token attends to every token.
pub fn global_msa(store: &ParamStore<f64>, ap: &AttentionParams, x: &Map) -> Map {
    cross_attention(store, ap, x, x)
}

pub fn cross_attention(store: &ParamStore<f64>, ap: &AttentionParams, query: &Map, context: &Map) -> Map {
    let q = linear(store, &ap.q, query);
    let k = linear(store, &ap.k, context);
    let v = linear(store, &ap.v, context);
    let keys: Vec<Vec<f64>> = (0..context.h).flat_map(|y| (0..context.w).map(move |x| (y, x))).map(|(y, x)| k.at(y, x).to_vec()).collect();
    let values: Vec<Vec<f64>> = (0..context.h).flat_map(|y| (0..context.w).map(move |x| (y, x))).map(|(y, x)| v.at(y, x).to_vec()).collect();
    let mut out = Map::zeros(query.h, query.w, query.c);
    for y in 0..query.h {
        for x in 0..query.w {
            let mixed = attend_one(ap, q.at(y, x), &keys, &values, |_, _| 0.0);
            out.at_mut(y, x).copy_from_slice(&linear_vec(store, &ap.o, &mixed));
        }
    }
    out
}

pub fn avg_pool(x: &Map, rh: usize, rw: usize) -> Map {
    let mut out = Map::zeros(x.h / rh, x.w / rw, x.c);
    for oy in 0..out.h {
        for ox in 0..out.w {
            for ch in 0..x.c {
                let mut acc = 0.0;
                for dy in 0..rh {
                    for dx in 0..rw {
                        acc += x.at(oy * rh + dy, ox * rw + dx)[ch];
                    }
                }
                out.at_mut(oy, ox)[ch] = acc / (rh * rw) as f64;
            }
        }
    }
    out
}

pub fn concat_blocks(x: &Map, rh: usize, rw: usize) -> Map {
    let mut out = Map::zeros(x.h / rh, x.w / rw, rh * rw * x.c);
    for oy in 0..out.h {
        for ox in 0..out.w {
            let mut v = Vec::with_capacity(out.c);
            for dy in 0..rh {
                for dx in 0..rw {
                    v.extend_from_slice(x.at(oy * rh + dy, ox * rw + dx));
                }
            }
            out.at_mut(oy, ox).copy_from_slice(&v);
        }
    }
    out
}

pub fn downsample(store: &ParamStore<f64>, step: &DownParams, cfg: &GraftConfig, x: &Map) -> Map {
    let (rh, rw) = (cfg.ratio_h, cfg.ratio_w);
    match step {
        DownParams::AvgPool { norm } => avg_pool(&layer_norm(store, norm, x).map_values(gelu), rh, rw),
        DownParams::LinearProj { norm, proj } => {
            linear(store, proj, &layer_norm(store, norm, &concat_blocks(x, rh, rw)))
        }
        DownParams::CrossAttn { norm, attn } => {
            let normed = layer_norm(store, norm, x);
            cross_attention(store, attn, &avg_pool(&normed, rh, rw), &normed)
        }
    }
}

/// Source coordinate and neighbour pair for output index `u` along an axis
/// upsampled by `ratio` inside windows of `window` source cells.
fn source_coord(u: usize, window: usize, ratio: usize) -> (usize, usize, f64) {
    let span = window * ratio;
    let (win, local) = (u / span, u % span);
    let mut pos = (local as f64 + 0.5) / ratio as f64 - 0.5;
    pos = pos.max(0.0).min((window - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = if lo + 1 < window { lo + 1 } else { lo };
    (win * window + lo, win * window + hi, pos - lo as f64)
}

/// Bilinear upsampling where each output pixel reads only the source
/// window it falls in.
pub fn window_bilinear(z: &Map, window: usize, rh: usize, rw: usize) -> Map {
    let mut out = Map::zeros(z.h * rh, z.w * rw, z.c);
    for y in 0..out.h {
        let (y0, y1, fy) = source_coord(y, window, rh);
        for x in 0..out.w {
            let (x0, x1, fx) = source_coord(x, window, rw);
            for ch in 0..z.c {
                out.at_mut(y, x)[ch] = (1.0 - fy) * (1.0 - fx) * z.at(y0, x0)[ch]
                    + (1.0 - fy) * fx * z.at(y0, x1)[ch]
                    + fy * (1.0 - fx) * z.at(y1, x0)[ch]
                    + fy * fx * z.at(y1, x1)[ch];
            }
        }
    }
    out
}

pub fn w_bilinear_upsample(
    store: &ParamStore<f64>,
    norm: &Norm,
    mix: &Linear,
    pos_emb: ParamId,
    cfg: &GraftConfig,
    z: &Map,
) -> Map {
    let mixed = linear(store, mix, &layer_norm(store, norm, z).map_values(gelu));
    let emb = param(store, pos_emb);
    let mut weighted = mixed.clone();
    for (i, v) in weighted.data.iter_mut().enumerate() {
        *v *= sigmoid(emb[i]);
    }
    window_bilinear(&weighted, cfg.window, cfg.ratio_h, cfg.ratio_w)
}

pub fn nearest_upsample(z: &Map, rh: usize, rw: usize) -> Map {
    let mut out = Map::zeros(z.h * rh, z.w * rw, z.c);
    for y in 0..out.h {
        for x in 0..out.w {
            out.at_mut(y, x).copy_from_slice(z.at(y / rh, x / rw));
        }
    }
    out
}

pub fn upsample(store: &ParamStore<f64>, step: &UpParams, cfg: &GraftConfig, z: &Map, fine: &Map) -> Map {
    match step {
        UpParams::WBilinear { norm, mix, pos_emb } => w_bilinear_upsample(store, norm, mix, *pos_emb, cfg, z),
        UpParams::Nearest => nearest_upsample(z, cfg.ratio_h, cfg.ratio_w),
        UpParams::CrossAttn { coarse_norm, fine_norm, attn } => cross_attention(
            store,
            attn,
            &layer_norm(store, fine_norm, fine),
            &layer_norm(store, coarse_norm, z),
        ),
    }
}

pub fn graft_block(store: &ParamStore<f64>, level: &LevelParams, window: usize, x: &Map, z_bar: Option<&Map>) -> Map {
    let mut inner = l_msa(store, &level.attn, &layer_norm(store, &level.norm, x), window);
    if let Some(z) = z_bar {
        inner = inner.plus(z);
    }
    x.plus(&inner)
}

/// The branch with its recursion written out level by level.
pub fn graft_forward(store: &ParamStore<f64>, gp: &GraftParams, x0: &Map) -> Map {
    let cfg = &gp.config;
    let levels = cfg.scales;
    let mut xs = vec![x0.clone()];
    for b in 1..=levels {
        let next = downsample(store, &gp.down[b - 1], cfg, &xs[b - 1]);
        xs.push(next);
    }
    let mut z = graft_block(store, &gp.levels[levels - 1], cfg.window, &xs[levels], None);
    let mut b = levels;
    while b > 1 {
        let z_bar = upsample(store, &gp.up[b - 1], cfg, &z, &xs[b - 1]);
        z = graft_block(store, &gp.levels[b - 2], cfg.window, &xs[b - 1], Some(&z_bar));
        b -= 1;
    }
    upsample(store, &gp.up[0], cfg, &z, &xs[0])
}

pub fn patch_embed(store: &ParamStore<f64>, embed: &PatchEmbed, image: &Map) -> Map {
    let ps = embed.patch;
    let mut x = linear(store, &embed.proj, &concat_blocks(image, ps, ps));
    if let Some(pos) = embed.pos_emb {
        let emb = param(store, pos);
        for (v, e) in x.data.iter_mut().zip(emb) {
            *v += e;
        }
    }
    if let Some(norm) = &embed.norm {
        x = layer_norm(store, norm, &x);
    }
    x
}

pub fn patch_merging(store: &ParamStore<f64>, m: &PatchMerging, x: &Map) -> Map {
    linear(store, &m.proj, &layer_norm(store, &m.norm, &concat_blocks(x, 2, 2)))
}

pub fn block_forward(store: &ParamStore<f64>, block: &BlockParams, x: &Map, graft_scale: f64) -> Map {
    let normed = layer_norm(store, &block.norm1, x);
    let mut fused = window_attention(store, &block.attn, &normed, block.window, block.window, block.shift);
    if let Some(g) = &block.graft {
        let z = graft_forward(store, g, x).map_values(|v| v * graft_scale);
        fused = fused.plus(&z);
    }
    let y = x.plus(&fused);
    let hidden = linear(store, &block.fc1, &layer_norm(store, &block.norm2, &y)).map_values(gelu);
    y.plus(&linear(store, &block.fc2, &hidden))
}

/// Logits for one image.
pub fn model_forward(store: &ParamStore<f64>, model: &Model, image: &Map) -> Vec<f64> {
    let mut x = patch_embed(store, &model.embed, image);
    for stage in &model.stages {
        if let Some(m) = &stage.merge {
            x = patch_merging(store, m, &x);
        }
        for block in &stage.blocks {
            x = block_forward(store, block, &x, model.graft_scale);
        }
    }
    let normed = layer_norm(store, &model.final_norm, &x);
    let tokens = (normed.h * normed.w) as f64;
    let pooled: Vec<f64> = (0..normed.c)
        .map(|ch| {
            let mut acc = 0.0;
            for y in 0..normed.h {
                for xx in 0..normed.w {
                    acc += normed.at(y, xx)[ch];
                }
            }
            acc / tokens
        })
        .collect();
    linear_vec(store, &model.head, &pooled)
}
