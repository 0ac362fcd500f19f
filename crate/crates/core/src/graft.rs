//! The grafted multi-scale branch.
//!
//! A branch takes the level-0 map `X⁰` from the backbone and builds coarser
//! levels `X¹ … Xᴮ` with the left-right (downsampling) pathway. The coarsest
//! level runs L-MSA on its own; every finer level `b ≥ 1` adds the upsampled
//! result of the level below it:
//!
//! ```text
//! Xᵇ⁺¹ = ρ(GELU(LN(Xᵇ)))                          downsample
//! Zᵇ   = Xᵇ + [L-MSA(LN(Xᵇ)) + Z̄ᵇ⁺¹]               graft_block
//! Z̄ᵇ   = Φ(sigmoid(P) ⊙ Linear(GELU(LN(Zᵇ))))     w_bilinear_upsample
//! ```
//!
//! where `Φ` interpolates inside each L-MSA window separately. The branch
//! returns `Z̄¹`, at the level-0 resolution, to be added into the backbone.

use std::fmt;
use std::str::FromStr;

use crate::attention::{cross_attention, l_msa, AttentionParams};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Norm, ParamBuilder, ParamId};
use crate::tensor::{Real, Var};

/// Largest number of horizontal scales chosen by default.
pub const DEFAULT_MAX_SCALES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DownKind {
    /// LayerNorm, GELU, block-mean pooling.
    AvgPool,
    /// Concatenate each `r_h×r_w` block of tokens, LayerNorm, linear back to `C`.
    LinearProj,
    /// Pooled map attends to the full-resolution map.
    CrossAttn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpKind {
    /// Channel mixing, anti-aliasing weights, per-window bilinear interpolation.
    LearnableWBilinear,
    Nearest,
    /// Finer-level positions attend to the coarse map.
    CrossAttn,
}

impl FromStr for DownKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avgpool" => Ok(Self::AvgPool),
            "linear" => Ok(Self::LinearProj),
            "crossattn" => Ok(Self::CrossAttn),
            _ => Err(Error::Config(format!("unknown downsampling kind {s:?} (avgpool|linear|crossattn)"))),
        }
    }
}

impl fmt::Display for DownKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AvgPool => "avgpool",
            Self::LinearProj => "linear",
            Self::CrossAttn => "crossattn",
        })
    }
}

impl FromStr for UpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wbilinear" => Ok(Self::LearnableWBilinear),
            "nearest" => Ok(Self::Nearest),
            "crossattn" => Ok(Self::CrossAttn),
            _ => Err(Error::Config(format!("unknown upsampling kind {s:?} (wbilinear|nearest|crossattn)"))),
        }
    }
}

impl fmt::Display for UpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LearnableWBilinear => "wbilinear",
            Self::Nearest => "nearest",
            Self::CrossAttn => "crossattn",
        })
    }
}

/// Shape and variant selection for one graft branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GraftConfig {
    /// Number of coarse levels `B` beyond level 0.
    pub scales: usize,
    pub ratio_h: usize,
    pub ratio_w: usize,
    /// Window side `M` for L-MSA and W-Bilinear inside the branch.
    pub window: usize,
    pub down: DownKind,
    pub up: UpKind,
}

impl GraftConfig {
    /// Ratio-2 branch with average pooling and learnable W-Bilinear.
    pub fn new(scales: usize, window: usize) -> Self {
        Self { scales, ratio_h: 2, ratio_w: 2, window, down: DownKind::AvgPool, up: UpKind::LearnableWBilinear }
    }

    pub fn with_kinds(mut self, down: DownKind, up: UpKind) -> Self {
        self.down = down;
        self.up = up;
        self
    }

    /// Extents of levels `0..=B` for a level-0 map of `h0×w0`.
    ///
    /// Every coarse level must divide exactly and tile into `M×M` windows;
    /// a coarsest level smaller than `M` is rejected rather than shrinking
    /// the window.
    pub fn level_extents(&self, h0: usize, w0: usize) -> Result<Vec<(usize, usize)>> {
        if self.scales == 0 {
            return Err(Error::Config("a graft needs at least one coarse scale (B >= 1)".into()));
        }
        if self.ratio_h == 0 || self.ratio_w == 0 || self.window == 0 {
            return Err(Error::Config("graft ratios and window must be positive".into()));
        }
        let mut extents = vec![(h0, w0)];
        let (mut h, mut w) = (h0, w0);
        for b in 1..=self.scales {
            if h % self.ratio_h != 0 || w % self.ratio_w != 0 {
                return Err(Error::Config(format!(
                    "level {} extent {h}x{w} is not divisible by ratio {}x{}",
                    b - 1,
                    self.ratio_h,
                    self.ratio_w
                )));
            }
            h /= self.ratio_h;
            w /= self.ratio_w;
            if h < self.window || w < self.window {
                return Err(Error::Config(format!(
                    "level {b} extent {h}x{w} is smaller than window M={}",
                    self.window
                )));
            }
            if h % self.window != 0 || w % self.window != 0 {
                return Err(Error::Config(format!(
                    "window M={} does not tile level {b} extent {h}x{w}",
                    self.window
                )));
            }
            extents.push((h, w));
        }
        Ok(extents)
    }

    /// The deepest valid ratio-2 branch with at most [`DEFAULT_MAX_SCALES`]
    /// levels, or `None` if not even one coarse level fits.
    pub fn default_for(h0: usize, w0: usize, window: usize) -> Option<Self> {
        (1..=DEFAULT_MAX_SCALES)
            .rev()
            .map(|b| Self::new(b, window))
            .find(|cfg| cfg.level_extents(h0, w0).is_ok())
    }
}

#[derive(Clone, Debug)]
pub enum DownParams {
    AvgPool { norm: Norm },
    LinearProj { norm: Norm, proj: Linear },
    CrossAttn { norm: Norm, attn: AttentionParams },
}

/// Pre-norm and L-MSA applied at one coarse level.
#[derive(Clone, Debug)]
pub struct LevelParams {
    pub norm: Norm,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug)]
pub enum UpParams {
    WBilinear {
        norm: Norm,
        mix: Linear,
        /// `[H_src, W_src, C]`; the anti-aliasing weights are its sigmoid.
        pos_emb: ParamId,
    },
    Nearest,
    CrossAttn {
        coarse_norm: Norm,
        fine_norm: Norm,
        attn: AttentionParams,
    },
}

/// All parameters of one branch. `down[b-1]` maps level `b-1 → b`,
/// `levels[b-1]` is level `b`, `up[b-1]` maps level `b → b-1`.
#[derive(Clone, Debug)]
pub struct GraftParams {
    pub config: GraftConfig,
    pub extents: Vec<(usize, usize)>,
    pub channels: usize,
    pub heads: usize,
    pub down: Vec<DownParams>,
    pub levels: Vec<LevelParams>,
    pub up: Vec<UpParams>,
}

impl GraftParams {
    pub fn init<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        config: GraftConfig,
        level0: (usize, usize),
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        let extents = config.level_extents(level0.0, level0.1)?;
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels are not divisible by {heads} heads")));
        }
        let c = channels;
        let m = config.window;
        let rr = config.ratio_h * config.ratio_w;
        let mut down = Vec::new();
        let mut levels = Vec::new();
        let mut up = Vec::new();
        for lvl in 1..=config.scales {
            let mut s = b.scoped(&format!("down{lvl}"));
            down.push(match config.down {
                DownKind::AvgPool => DownParams::AvgPool { norm: s.layer_norm("norm", c)? },
                DownKind::LinearProj => DownParams::LinearProj {
                    norm: s.layer_norm("norm", rr * c)?,
                    proj: s.linear("proj", rr * c, c, true)?,
                },
                DownKind::CrossAttn => DownParams::CrossAttn {
                    norm: s.layer_norm("norm", c)?,
                    attn: AttentionParams::init(&mut s, "attn", c, heads, None)?,
                },
            });
            let mut s = b.scoped(&format!("level{lvl}"));
            levels.push(LevelParams {
                norm: s.layer_norm("norm", c)?,
                attn: AttentionParams::init(&mut s, "attn", c, heads, Some((m, m)))?,
            });
            let mut s = b.scoped(&format!("up{lvl}"));
            let (hs, ws) = extents[lvl];
            up.push(match config.up {
                UpKind::LearnableWBilinear => UpParams::WBilinear {
                    norm: s.layer_norm("norm", c)?,
                    mix: s.linear("mix", c, c, true)?,
                    pos_emb: s.zeros("pos_emb", &[hs, ws, c])?,
                },
                UpKind::Nearest => UpParams::Nearest,
                UpKind::CrossAttn => UpParams::CrossAttn {
                    coarse_norm: s.layer_norm("coarse_norm", c)?,
                    fine_norm: s.layer_norm("fine_norm", c)?,
                    attn: AttentionParams::init(&mut s, "attn", c, heads, None)?,
                },
            });
        }
        Ok(Self { config, extents, channels, heads, down, levels, up })
    }
}

fn dims4<T: Real>(x: Var<'_, T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::Shape(format!("expected an [N,H,W,C] feature map, got {s:?}"))),
    }
}

/// Moves a map one level coarser.
pub fn downsample<'t, T: Real>(
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    step: &DownParams,
    cfg: &GraftConfig,
) -> Result<Var<'t, T>> {
    let (n, h, w, c) = dims4(x)?;
    let (rh, rw) = (cfg.ratio_h, cfg.ratio_w);
    if h % rh != 0 || w % rw != 0 {
        return Err(Error::Config(format!("cannot downsample {h}x{w} by {rh}x{rw}")));
    }
    let (oh, ow) = (h / rh, w / rw);
    match step {
        DownParams::AvgPool { norm } => norm.forward(p, x)?.gelu().adaptive_avg_pool(oh, ow),
        DownParams::LinearProj { norm, proj } => {
            let merged = concat_blocks(x, rh, rw)?;
            proj.forward(p, norm.forward(p, merged)?)
        }
        DownParams::CrossAttn { norm, attn } => {
            let h_norm = norm.forward(p, x)?;
            let query = h_norm.adaptive_avg_pool(oh, ow)?;
            debug_assert_eq!(query.shape(), vec![n, oh, ow, c]);
            cross_attention(p, query, h_norm, attn)
        }
    }
}

/// `[N, H, W, C] → [N, H/rh, W/rw, rh·rw·C]`, each output token holding its
/// block's tokens in row-major order.
pub fn concat_blocks<T: Real>(x: Var<'_, T>, rh: usize, rw: usize) -> Result<Var<'_, T>> {
    let (n, h, w, c) = dims4(x)?;
    if h % rh != 0 || w % rw != 0 {
        return Err(Error::Config(format!("cannot merge {rh}x{rw} blocks of a {h}x{w} map")));
    }
    let (oh, ow) = (h / rh, w / rw);
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..rh {
                    for dx in 0..rw {
                        let base = ((b * h + oy * rh + dy) * w + ox * rw + dx) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    x.gather(index.into(), &[n, oh, ow, rh * rw * c])
}

/// Learnable W-Bilinear: channel mixing `Linear(GELU(LN(z)))`, multiplication
/// by `sigmoid(pos_emb)`, then bilinear interpolation inside each `M×M`
/// source window.
pub fn w_bilinear_upsample<'t, T: Real>(
    p: &Bound<'t, T>,
    z: Var<'t, T>,
    norm: &Norm,
    mix: &Linear,
    pos_emb: ParamId,
    cfg: &GraftConfig,
) -> Result<Var<'t, T>> {
    let (_, h, w, c) = dims4(z)?;
    let emb = p.get(pos_emb);
    if emb.shape() != [h, w, c] {
        return Err(Error::Dimension { op: "w_bilinear_upsample", lhs: z.shape(), rhs: emb.shape() });
    }
    let mixed = mix.forward(p, norm.forward(p, z)?.gelu())?;
    let weighted = mixed.mul(emb.sigmoid())?;
    weighted.window_bilinear((cfg.window, cfg.window), (cfg.ratio_h, cfg.ratio_w))
}

/// Replicates every cell into an `rh×rw` block.
pub fn nearest_upsample<T: Real>(z: Var<'_, T>, rh: usize, rw: usize) -> Result<Var<'_, T>> {
    let (n, h, w, c) = dims4(z)?;
    let (oh, ow) = (h * rh, w * rw);
    let mut index = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let base = ((b * h + y / rh) * w + x / rw) * c;
                index.extend(base..base + c);
            }
        }
    }
    z.gather(index.into(), &[n, oh, ow, c])
}

/// Finer-level positions (`fine`, the query) attend over the coarse map.
pub fn crossattn_upsample<'t, T: Real>(
    p: &Bound<'t, T>,
    coarse: Var<'t, T>,
    fine: Var<'t, T>,
    coarse_norm: &Norm,
    fine_norm: &Norm,
    attn: &AttentionParams,
) -> Result<Var<'t, T>> {
    let kv = coarse_norm.forward(p, coarse)?;
    let q = fine_norm.forward(p, fine)?;
    cross_attention(p, q, kv, attn)
}

/// Moves `z` one level finer; `fine` is the branch input at the target level.
pub fn upsample<'t, T: Real>(
    p: &Bound<'t, T>,
    z: Var<'t, T>,
    fine: Var<'t, T>,
    step: &UpParams,
    cfg: &GraftConfig,
) -> Result<Var<'t, T>> {
    let out = match step {
        UpParams::WBilinear { norm, mix, pos_emb } => w_bilinear_upsample(p, z, norm, mix, *pos_emb, cfg)?,
        UpParams::Nearest => nearest_upsample(z, cfg.ratio_h, cfg.ratio_w)?,
        UpParams::CrossAttn { coarse_norm, fine_norm, attn } => {
            crossattn_upsample(p, z, fine, coarse_norm, fine_norm, attn)?
        }
    };
    if out.shape() != fine.shape() {
        return Err(Error::Dimension { op: "upsample", lhs: out.shape(), rhs: fine.shape() });
    }
    Ok(out)
}

/// `x + [L-MSA(LN(x)) + z̄]`, with `z̄` the upsampled result of the next
/// coarser level (absent at the coarsest level).
pub fn graft_block<'t, T: Real>(
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    z_bar: Option<Var<'t, T>>,
    level: &LevelParams,
    window: usize,
) -> Result<Var<'t, T>> {
    let attn = l_msa(p, level.norm.forward(p, x)?, &level.attn, window)?;
    let inner = match z_bar {
        Some(z) => {
            if z.shape() != x.shape() {
                return Err(Error::Dimension { op: "graft_block", lhs: x.shape(), rhs: z.shape() });
            }
            attn.add(z)?
        }
        None => attn,
    };
    x.add(inner)
}

/// Runs the whole branch on `x0` and returns a map of the same shape.
pub fn graft_forward<'t, T: Real>(p: &Bound<'t, T>, x0: Var<'t, T>, gp: &GraftParams) -> Result<Var<'t, T>> {
    let (_, h, w, c) = dims4(x0)?;
    if (h, w) != gp.extents[0] || c != gp.channels {
        return Err(Error::Dimension {
            op: "graft_forward",
            lhs: x0.shape(),
            rhs: vec![gp.extents[0].0, gp.extents[0].1, gp.channels],
        });
    }
    let cfg = &gp.config;
    let mut xs = vec![x0];
    for step in &gp.down {
        let next = downsample(p, *xs.last().expect("level 0 present"), step, cfg)?;
        xs.push(next);
    }
    let levels = cfg.scales;
    let mut z = graft_block(p, xs[levels], None, &gp.levels[levels - 1], cfg.window)?;
    for lvl in (1..levels).rev() {
        let z_bar = upsample(p, z, xs[lvl], &gp.up[lvl], cfg)?;
        z = graft_block(p, xs[lvl], Some(z_bar), &gp.levels[lvl - 1], cfg.window)?;
    }
    upsample(p, z, xs[0], &gp.up[0], cfg)
}
