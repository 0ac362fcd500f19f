//! Toy backbones with graft attachment points.
//!
//! Two structures are supported. `Homogeneous` is DeiT-like: one stage at
//! constant `H/p × W/p` resolution, absolute position embeddings, and
//! unshifted window attention in place of global attention. `Pyramid` is
//! Swin-like: patch merging between stages halves the resolution, windows
//! shift on every other block and attention carries a relative position bias.
//!
//! A grafted block branches off its input and merges before the FFN:
//!
//! ```text
//! Y = X + [L-MSA(LN(X)) + Z̄]
//! X' = Y + MLP(LN(Y))
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{window_attention, AttentionParams, WindowGrid};
use crate::error::{Error, Result};
use crate::graft::{concat_blocks, graft_forward, GraftConfig, GraftParams};
use crate::params::{Bound, Linear, Norm, ParamBuilder, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureKind {
    Homogeneous,
    Pyramid,
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Self::Homogeneous),
            "pyramid" => Ok(Self::Pyramid),
            _ => Err(Error::Config(format!("unknown backbone kind {s:?} (homogeneous|pyramid)"))),
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Homogeneous => "homogeneous",
            Self::Pyramid => "pyramid",
        })
    }
}

/// Zero-based `(stage, block-within-stage)` position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockIndex {
    pub stage: usize,
    pub depth: usize,
}

impl BlockIndex {
    pub fn new(stage: usize, depth: usize) -> Self {
        Self { stage, depth }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub kind: StructureKind,
    /// Square input images of `image_size × image_size × in_channels`.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub grafts: BTreeMap<BlockIndex, GraftConfig>,
}

impl BackboneSpec {
    pub fn homogeneous(
        image_size: usize,
        patch_size: usize,
        depth: usize,
        channels: usize,
        heads: usize,
        window: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            kind: StructureKind::Homogeneous,
            image_size,
            patch_size,
            in_channels: 3,
            stage_depths: vec![depth],
            stage_channels: vec![channels],
            stage_heads: vec![heads],
            window,
            mlp_ratio: 4,
            num_classes,
            grafts: BTreeMap::new(),
        }
    }

    pub fn pyramid(
        image_size: usize,
        patch_size: usize,
        depths: Vec<usize>,
        channels: Vec<usize>,
        heads: Vec<usize>,
        window: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            kind: StructureKind::Pyramid,
            image_size,
            patch_size,
            in_channels: 3,
            stage_depths: depths,
            stage_channels: channels,
            stage_heads: heads,
            window,
            mlp_ratio: 4,
            num_classes,
            grafts: BTreeMap::new(),
        }
    }

    /// Token-grid side after patch embedding.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    /// Token-grid side inside stage `s` (zero-based).
    pub fn stage_resolution(&self, s: usize) -> usize {
        match self.kind {
            StructureKind::Homogeneous => self.grid(),
            StructureKind::Pyramid => self.grid() >> s,
        }
    }

    /// Cyclic shift applied by block `(s, d)`: half a window on odd pyramid
    /// blocks whose map is larger than one window, otherwise none.
    pub fn shift_for(&self, s: usize, d: usize) -> usize {
        let res = self.stage_resolution(s);
        if self.kind == StructureKind::Pyramid && d % 2 == 1 && res > self.window {
            self.window / 2
        } else {
            0
        }
    }

    pub fn uses_relative_bias(&self) -> bool {
        self.kind == StructureKind::Pyramid
    }

    pub fn windows_per_block(&self, s: usize) -> usize {
        let r = self.stage_resolution(s) / self.window;
        r * r
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockIndex> + '_ {
        self.stage_depths
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| (0..n).map(move |d| BlockIndex::new(s, d)))
    }

    pub fn without_grafts(&self) -> Self {
        Self { grafts: BTreeMap::new(), ..self.clone() }
    }

    /// Attaches a branch to every eligible block: all blocks after the first
    /// for homogeneous backbones; the first three stages for pyramids. Each
    /// branch is the deepest valid ratio-2 branch (at most three scales);
    /// stages where no coarse level fits the window are skipped.
    pub fn with_default_grafts(mut self) -> Self {
        self.grafts.clear();
        let max_stage = match self.kind {
            StructureKind::Homogeneous => 1,
            StructureKind::Pyramid => 3,
        };
        let blocks: Vec<BlockIndex> = self.blocks().collect();
        for idx in blocks {
            if idx.stage >= max_stage || (idx.stage == 0 && idx.depth == 0) {
                continue;
            }
            let res = self.stage_resolution(idx.stage);
            if let Some(cfg) = GraftConfig::default_for(res, res, self.window) {
                self.grafts.insert(idx, cfg);
            }
        }
        self
    }

    /// Grafts every block except the first with the same branch config.
    pub fn with_grafts_everywhere(mut self, cfg: GraftConfig) -> Self {
        let blocks: Vec<BlockIndex> = self.blocks().collect();
        self.grafts = blocks.into_iter().filter(|b| *b != BlockIndex::new(0, 0)).map(|b| (b, cfg)).collect();
        self
    }

    /// Homogeneous backbones run unshifted `M×M` window attention instead of
    /// global attention; `M` equal to the token grid recovers the global
    /// model.
    pub fn deit_window_substitution(mut self, window: usize) -> Result<Self> {
        if self.kind != StructureKind::Homogeneous {
            return Err(Error::Config("window substitution applies to homogeneous backbones".into()));
        }
        self.window = window;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return cfg(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return cfg("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        let stages = self.num_stages();
        if stages == 0 || self.stage_channels.len() != stages || self.stage_heads.len() != stages {
            return cfg(format!(
                "stage lists disagree: {} depths, {} channel widths, {} head counts",
                stages,
                self.stage_channels.len(),
                self.stage_heads.len()
            ));
        }
        if self.kind == StructureKind::Homogeneous && stages != 1 {
            return cfg(format!("a homogeneous backbone has exactly one stage, got {stages}"));
        }
        if self.window == 0 {
            return cfg("window size must be positive".into());
        }
        for s in 0..stages {
            let (c, h) = (self.stage_channels[s], self.stage_heads[s]);
            if self.stage_depths[s] == 0 {
                return cfg(format!("stage {s} has no blocks"));
            }
            if h == 0 || c % h != 0 {
                return cfg(format!("stage {s}: {c} channels are not divisible by {h} heads"));
            }
            if s > 0 {
                if c <= self.stage_channels[s - 1] {
                    return cfg(format!(
                        "pyramid channels must grow between stages: stage {} has {}, stage {s} has {c}",
                        s - 1,
                        self.stage_channels[s - 1]
                    ));
                }
                let prev = self.stage_resolution(s - 1);
                if prev % 2 != 0 {
                    return cfg(format!("stage {} resolution {prev} cannot be halved", s - 1));
                }
            }
            let res = self.stage_resolution(s);
            if res == 0 || res % self.window != 0 {
                return cfg(format!(
                    "window M={} does not divide the {res}x{res} token grid of stage {s}",
                    self.window
                ));
            }
        }
        for (idx, g) in &self.grafts {
            if idx.stage >= stages || idx.depth >= self.stage_depths[idx.stage] {
                return cfg(format!("graft at stage {} block {} does not exist", idx.stage, idx.depth));
            }
            if idx.stage == 0 && idx.depth == 0 {
                return cfg("no graft at first layer: its input has not been encoded yet".into());
            }
            let res = self.stage_resolution(idx.stage);
            g.level_extents(res, res).map_err(|e| {
                Error::Config(format!("graft at stage {} block {}: {e}", idx.stage, idx.depth))
            })?;
            if self.stage_channels[idx.stage] % self.stage_heads[idx.stage] != 0 {
                return cfg("graft heads must divide channels".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    /// Absolute position embedding `[g, g, C]` (homogeneous only).
    pub pos_emb: Option<ParamId>,
    /// Post-embedding LayerNorm (pyramid only).
    pub norm: Option<Norm>,
    pub patch: usize,
}

#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: Norm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub graft: Option<GraftParams>,
    pub resolution: usize,
    pub window: usize,
    pub shift: usize,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<BlockParams>,
}

/// Parameter layout of a backbone plus head; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: BackboneSpec,
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub final_norm: Norm,
    pub head: Linear,
    /// Multiplier on every graft output before fusion; 1 in normal use.
    pub graft_scale: f64,
}

impl Model {
    /// Validates `spec` and draws fresh parameters from `seed`.
    pub fn init<T: Real>(spec: &BackboneSpec, seed: u64) -> Result<(Self, ParamStore<T>)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        let g = spec.grid();
        let c0 = spec.stage_channels[0];
        let embed = {
            let mut s = b.scoped("embed");
            let patch_dim = spec.patch_size * spec.patch_size * spec.in_channels;
            let proj = s.linear("proj", patch_dim, c0, true)?;
            let (pos_emb, norm) = match spec.kind {
                StructureKind::Homogeneous => (Some(s.trunc_normal("pos_emb", &[g, g, c0], INIT_STD)?), None),
                StructureKind::Pyramid => (None, Some(s.layer_norm("norm", c0)?)),
            };
            PatchEmbed { proj, pos_emb, norm, patch: spec.patch_size }
        };
        let mut stages = Vec::new();
        for si in 0..spec.num_stages() {
            let c = spec.stage_channels[si];
            let heads = spec.stage_heads[si];
            let res = spec.stage_resolution(si);
            let mut ss = b.scoped(&format!("stages.{si}"));
            let merge = if si > 0 {
                let prev = spec.stage_channels[si - 1];
                let mut ms = ss.scoped("merge");
                Some(PatchMerging { norm: ms.layer_norm("norm", 4 * prev)?, proj: ms.linear("proj", 4 * prev, c, true)? })
            } else {
                None
            };
            let mut blocks = Vec::new();
            for d in 0..spec.stage_depths[si] {
                let mut bs = ss.scoped(&format!("blocks.{d}"));
                let rel = spec.uses_relative_bias().then_some((spec.window, spec.window));
                let hidden = spec.mlp_ratio * c;
                let norm1 = bs.layer_norm("norm1", c)?;
                let attn = AttentionParams::init(&mut bs, "attn", c, heads, rel)?;
                let norm2 = bs.layer_norm("norm2", c)?;
                let fc1 = bs.linear("fc1", c, hidden, true)?;
                let fc2 = bs.linear("fc2", hidden, c, true)?;
                let graft = match spec.grafts.get(&BlockIndex::new(si, d)) {
                    Some(cfg) => {
                        let mut gs = bs.scoped("graft");
                        Some(GraftParams::init(&mut gs, *cfg, (res, res), c, heads)?)
                    }
                    None => None,
                };
                blocks.push(BlockParams {
                    norm1,
                    attn,
                    norm2,
                    fc1,
                    fc2,
                    graft,
                    resolution: res,
                    window: spec.window,
                    shift: spec.shift_for(si, d),
                });
            }
            stages.push(Stage { merge, blocks });
        }
        let c_last = *spec.stage_channels.last().expect("validated non-empty");
        let mut hs = b.scoped("head");
        let final_norm = hs.layer_norm("norm", c_last)?;
        let head = hs.linear("fc", c_last, spec.num_classes, true)?;
        let model = Model { spec: spec.clone(), embed, stages, final_norm, head, graft_scale: 1.0 };
        Ok((model, store))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockParams> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn graft_count(&self) -> usize {
        self.blocks().filter(|b| b.graft.is_some()).count()
    }

    /// Images `[N, H, W, C_in]` to logits `[N, num_classes]`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = patch_embed(p, images, &self.embed, self.spec.in_channels)?;
        let scale = T::lit(self.graft_scale);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = patch_merging(p, x, m)?;
            }
            for block in &stage.blocks {
                x = block_forward(p, x, block, scale)?;
            }
        }
        let shape = x.shape();
        let tokens = x.reshape(&[shape[0], shape[1] * shape[2], shape[3]])?;
        let pooled = self.final_norm.forward(p, tokens)?.mean_axis(1)?;
        self.head.forward(p, pooled)
    }
}

/// Non-overlapping patches, flattened row-major (patch row, patch column,
/// input channel), projected to `C`.
pub fn patch_embed<'t, T: Real>(
    p: &Bound<'t, T>,
    images: Var<'t, T>,
    embed: &PatchEmbed,
    in_channels: usize,
) -> Result<Var<'t, T>> {
    let shape = images.shape();
    let [_, h, w, cin] = shape[..] else {
        return Err(Error::Shape(format!("images must be [N,H,W,C], got {shape:?}")));
    };
    let ps = embed.patch;
    if cin != in_channels || h % ps != 0 || w % ps != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w}x{cin} does not split into {ps}x{ps}x{in_channels} patches"
        )));
    }
    let x = embed.proj.forward(p, concat_blocks(images, ps, ps)?)?;
    match (&embed.pos_emb, &embed.norm) {
        (Some(pos), _) => x.add(p.get(*pos)),
        (None, Some(norm)) => norm.forward(p, x),
        (None, None) => Ok(x),
    }
}

/// 2×2 token concatenation, LayerNorm, linear to the next stage width.
pub fn patch_merging<'t, T: Real>(p: &Bound<'t, T>, x: Var<'t, T>, m: &PatchMerging) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(Error::Config(format!("patch merging needs even extents, got {shape:?}")));
    }
    m.proj.forward(p, m.norm.forward(p, concat_blocks(x, 2, 2)?)?)
}

/// One transformer block with optional graft fused before the shared FFN.
/// `graft_scale` multiplies the branch output (1 leaves it unchanged).
pub fn block_forward<'t, T: Real>(
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    block: &BlockParams,
    graft_scale: T,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != block.resolution || shape[2] != block.resolution {
        return Err(Error::Dimension {
            op: "block_forward",
            lhs: shape,
            rhs: vec![block.resolution, block.resolution, block.attn.dim],
        });
    }
    let grid = WindowGrid::new(block.resolution, block.resolution, block.window)?;
    let attn = window_attention(p, block.norm1.forward(p, x)?, &block.attn, &grid, block.shift)?;
    let fused = match &block.graft {
        Some(g) => {
            let mut z = graft_forward(p, x, g)?;
            if graft_scale != T::one() {
                z = z.scale(graft_scale);
            }
            attn.add(z)?
        }
        None => attn,
    };
    let y = x.add(fused)?;
    let hidden = block.fc1.forward(p, block.norm2.forward(p, y)?)?.gelu();
    y.add(block.fc2.forward(p, hidden)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use crate::testutil::{bits, perturb, random};

    fn logits(model: &Model, store: &ParamStore<f64>, images: &Tensor<f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        (*model.forward(&p, tape.constant(images.clone())).unwrap().value()).clone()
    }

    fn swin_t_like() -> BackboneSpec {
        BackboneSpec::pyramid(224, 4, vec![2, 2, 6, 2], vec![96, 192, 384, 768], vec![3, 6, 12, 24], 7, 1000)
    }

    #[test]
    fn twelve_block_homogeneous_gets_eleven_grafts() {
        let spec = BackboneSpec::homogeneous(224, 4, 12, 192, 3, 7, 1000).with_default_grafts();
        assert_eq!(spec.grafts.len(), 11);
        assert!(!spec.grafts.contains_key(&BlockIndex::new(0, 0)));
        assert!(spec.grafts.values().all(|g| g.scales == 3));
        spec.validate().unwrap();
    }

    #[test]
    fn pyramid_defaults_skip_the_last_stage() {
        let spec = swin_t_like().with_default_grafts();
        let stages: Vec<usize> = (0..4).map(|s| spec.grafts.keys().filter(|b| b.stage == s).count()).collect();
        assert_eq!(stages, vec![1, 2, 6, 0]);
        assert_eq!(spec.grafts[&BlockIndex::new(0, 1)].scales, 3);
        assert_eq!(spec.grafts[&BlockIndex::new(1, 0)].scales, 2);
        assert_eq!(spec.grafts[&BlockIndex::new(2, 0)].scales, 1);
    }

    #[test]
    fn stage_resolutions_halve() {
        let spec = swin_t_like();
        let res: Vec<usize> = (0..4).map(|s| spec.stage_resolution(s)).collect();
        assert_eq!(res, vec![56, 28, 14, 7]);
        assert_eq!(spec.shift_for(0, 1), 3);
        assert_eq!(spec.shift_for(0, 0), 0);
        assert_eq!(spec.shift_for(3, 1), 0, "one window covers the 7x7 stage");
    }

    #[test]
    fn validation_messages() {
        let mut spec = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 4, 4);
        spec.grafts.insert(BlockIndex::new(0, 0), GraftConfig::new(1, 4));
        assert!(spec.validate().unwrap_err().to_string().contains("no graft at first layer"));

        let spec = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 3, 4);
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("M=3") && msg.contains("8x8"), "{msg}");

        let spec = BackboneSpec::pyramid(32, 4, vec![1, 1], vec![16, 16], vec![2, 2], 2, 4);
        assert!(spec.validate().unwrap_err().to_string().contains("grow"));

        let spec = BackboneSpec::homogeneous(30, 4, 1, 8, 2, 2, 4);
        assert!(spec.validate().is_err());

        let mut spec = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 4, 4);
        spec.grafts.insert(BlockIndex::new(0, 1), GraftConfig::new(2, 4));
        assert!(spec.validate().unwrap_err().to_string().contains("smaller than window"));
    }

    #[test]
    fn logits_have_class_shape() {
        for spec in [
            BackboneSpec::homogeneous(16, 4, 3, 8, 2, 2, 5).with_default_grafts(),
            BackboneSpec::pyramid(32, 4, vec![2, 1], vec![8, 16], vec![2, 2], 2, 7).with_default_grafts(),
        ] {
            let (model, store) = Model::init::<f64>(&spec, 1).unwrap();
            let y = logits(&model, &store, &random(2, &[3, spec.image_size, spec.image_size, 3]));
            assert_eq!(y.shape(), &[3, spec.num_classes]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn zero_scaled_grafts_are_transparent() {
        for spec in [
            BackboneSpec::homogeneous(32, 4, 3, 8, 2, 2, 4).with_default_grafts(),
            BackboneSpec::pyramid(32, 2, vec![2, 2], vec![8, 16], vec![2, 4], 4, 4).with_default_grafts(),
        ] {
            assert!(!spec.grafts.is_empty());
            let (mut grafted, mut store) = Model::init::<f64>(&spec, 5).unwrap();
            let (plain, mut plain_store) = Model::init::<f64>(&spec.without_grafts(), 5).unwrap();
            perturb(&mut store, 6, 0.1);
            for (name, t) in store.iter() {
                if let Some(id) = plain_store.id(name) {
                    plain_store.set(id, t.clone()).unwrap();
                }
            }
            let images = random(7, &[2, spec.image_size, spec.image_size, 3]);
            grafted.graft_scale = 0.0;
            let a = logits(&grafted, &store, &images);
            let b = logits(&plain, &plain_store, &images);
            assert_eq!(bits(&a), bits(&b));
            grafted.graft_scale = 1.0;
            assert_ne!(bits(&logits(&grafted, &store, &images)), bits(&b));
        }
    }

    #[test]
    fn grafted_and_plain_share_backbone_draws() {
        let spec = BackboneSpec::homogeneous(32, 4, 2, 8, 2, 2, 4).with_default_grafts();
        let (_, grafted) = Model::init::<f64>(&spec, 3).unwrap();
        let (_, plain) = Model::init::<f64>(&spec.without_grafts(), 3).unwrap();
        for (name, t) in plain.iter() {
            assert_eq!(grafted.get(grafted.id(name).unwrap()), t, "{name}");
        }
        assert!(grafted.len() > plain.len());
    }

    #[test]
    fn one_ffn_per_block_regardless_of_grafts() {
        let spec = BackboneSpec::homogeneous(32, 4, 3, 8, 2, 2, 4);
        let (_, grafted) = Model::init::<f64>(&spec.clone().with_default_grafts(), 0).unwrap();
        let (_, plain) = Model::init::<f64>(&spec, 0).unwrap();
        let ffn = |s: &ParamStore<f64>| -> Vec<String> {
            s.iter().filter(|(n, _)| n.contains(".fc")).map(|(n, _)| n.to_string()).collect()
        };
        assert_eq!(ffn(&grafted), ffn(&plain));
        assert_eq!(ffn(&plain).iter().filter(|n| n.ends_with("fc1.weight")).count(), 3);
    }

    #[test]
    fn patch_embed_examples() {
        let spec = BackboneSpec::homogeneous(32, 4, 1, 8, 2, 2, 4);
        let (model, store) = Model::init::<f64>(&spec, 0).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zero = tape.constant(Tensor::zeros(&[1, 32, 32, 3]));
        let projected = model.embed.proj.forward(&p, concat_blocks(zero, 4, 4).unwrap()).unwrap().value();
        assert_eq!(projected.shape(), &[1, 8, 8, 8]);
        assert!(projected.data().iter().all(|&v| v == 0.0));
        let embedded = patch_embed(&p, zero, &model.embed, 3).unwrap().value();
        assert_eq!(embedded.data(), store.get(model.embed.pos_emb.unwrap()).data());
        assert!(patch_embed(&p, tape.constant(Tensor::zeros(&[1, 30, 30, 3])), &model.embed, 3).is_err());
    }

    #[test]
    fn patch_merging_examples() {
        let spec = BackboneSpec::pyramid(16, 2, vec![1, 1], vec![2, 4], vec![1, 1], 2, 3);
        let (model, store) = Model::init::<f64>(&spec, 0).unwrap();
        let merge = model.stages[1].merge.as_ref().unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zero = patch_merging(&p, tape.constant(Tensor::zeros(&[1, 4, 4, 2])), merge).unwrap().value();
        assert_eq!(zero.shape(), &[1, 2, 2, 4]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(patch_merging(&p, tape.constant(Tensor::zeros(&[1, 3, 4, 2])), merge).is_err());
    }

    #[test]
    fn full_grid_window_is_global_attention() {
        let spec = BackboneSpec::homogeneous(28 * 4, 4, 1, 8, 2, 7, 4);
        assert_eq!(spec.windows_per_block(0), 16);
        let global = spec.clone().deit_window_substitution(28).unwrap();
        assert_eq!(global.windows_per_block(0), 1);
        assert!(swin_t_like().deit_window_substitution(7).is_err());

        let small = BackboneSpec::homogeneous(16, 4, 2, 8, 2, 2, 4);
        let (model, mut store) = Model::init::<f64>(&small, 1).unwrap();
        perturb(&mut store, 2, 0.3);
        let full = small.clone().deit_window_substitution(4).unwrap();
        let (global_model, _) = Model::init::<f64>(&full, 1).unwrap();
        let images = random(3, &[1, 16, 16, 3]);
        let windowed = logits(&model, &store, &images);
        let global = logits(&global_model, &store, &images);
        assert!(windowed.data().iter().zip(global.data()).any(|(a, b)| (a - b).abs() > 1e-6));

        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(random(4, &[1, 4, 4, 8]));
        let ap = &global_model.stages[0].blocks[0].attn;
        let via_grid = window_attention(&p, x, ap, &WindowGrid::new(4, 4, 4).unwrap(), 0).unwrap().value();
        let via_global = crate::attention::global_msa(&p, x, ap).unwrap().value();
        assert_eq!(bits(&via_grid), bits(&via_global));
    }

    #[test]
    fn permuting_head_outputs_permutes_logits() {
        let spec = BackboneSpec::homogeneous(16, 4, 1, 8, 2, 2, 3);
        let (model, mut store) = Model::init::<f64>(&spec, 8).unwrap();
        perturb(&mut store, 9, 0.5);
        let images = random(10, &[2, 16, 16, 3]);
        let before = logits(&model, &store, &images);
        let perm = [2usize, 0, 1];
        let w = store.get(model.head.weight).clone();
        let b = store.get(model.head.bias.unwrap()).clone();
        let pw = Tensor::from_fn(w.shape(), |i| w.data()[(i / 3) * 3 + perm[i % 3]]);
        let pb = Tensor::from_fn(b.shape(), |i| b.data()[perm[i]]);
        store.set(model.head.weight, pw).unwrap();
        store.set(model.head.bias.unwrap(), pb).unwrap();
        let after = logits(&model, &store, &images);
        for n in 0..2 {
            for k in 0..3 {
                assert_eq!(after.data()[n * 3 + k], before.data()[n * 3 + perm[k]]);
            }
        }
    }

    #[test]
    fn single_precision_forward_tracks_double() {
        let spec = BackboneSpec::homogeneous(16, 4, 2, 8, 2, 2, 3).with_default_grafts();
        let (model, store) = Model::init::<f64>(&spec, 11).unwrap();
        let images = random(12, &[1, 16, 16, 3]);
        let wide = logits(&model, &store, &images);
        let narrow_store = store.cast::<f32>();
        let tape = Tape::<f32>::new();
        let p = narrow_store.bind(&tape);
        let narrow = model.forward(&p, tape.constant(images.cast())).unwrap().value();
        for (a, b) in wide.data().iter().zip(narrow.data()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
