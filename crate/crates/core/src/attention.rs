//! Window partitioning and local multi-head self-attention (L-MSA).
//!
//! Global attention is the single-window case: a window that spans the whole
//! map. Feature maps are `[N, H, W, C]`; windows are `[N·nWin, M·M, C]` with
//! windows ordered row-major over the grid and tokens row-major inside each
//! window.

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamBuilder, ParamId, INIT_STD};
use crate::tensor::{Real, Tensor, Var};

/// Additive logit used to block attention across shifted-window regions.
pub const MASK_LOGIT: f64 = -100.0;

/// Tiling of an `H×W` map into non-overlapping `win_h×win_w` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
}

impl WindowGrid {
    /// Square `M×M` windows.
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        Self::rect(height, width, window, window)
    }

    pub fn rect(height: usize, width: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 || height % win_h != 0 || width % win_w != 0 {
            return Err(Error::Config(format!(
                "window {win_h}x{win_w} does not tile a {height}x{width} map (H={height}, W={width}, M={win_h})"
            )));
        }
        Ok(Self { height, width, win_h, win_w })
    }

    pub fn rows(&self) -> usize {
        self.height / self.win_h
    }

    pub fn cols(&self) -> usize {
        self.width / self.win_w
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn tokens(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Map position of token `t` in window `win`.
    pub fn position(&self, win: usize, t: usize) -> (usize, usize) {
        let (wr, wc) = (win / self.cols(), win % self.cols());
        (wr * self.win_h + t / self.win_w, wc * self.win_w + t % self.win_w)
    }

    /// For every element of the partitioned `[n·nWin, T, c]` layout, the flat
    /// index of its source in the `[n, H, W, c]` map.
    pub fn partition_index(&self, n: usize, c: usize) -> Vec<usize> {
        let mut index = Vec::with_capacity(n * self.height * self.width * c);
        for b in 0..n {
            for win in 0..self.count() {
                for t in 0..self.tokens() {
                    let (y, x) = self.position(win, t);
                    let base = ((b * self.height + y) * self.width + x) * c;
                    index.extend(base..base + c);
                }
            }
        }
        index
    }
}

fn dims4<T: Real>(x: Var<'_, T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::Shape(format!("{op} expects [N,H,W,C], got {s:?}"))),
    }
}

fn partition<'t, T: Real>(x: Var<'t, T>, grid: &WindowGrid) -> Result<Var<'t, T>> {
    let (n, _, _, c) = dims4(x, "window_partition")?;
    let index = grid.partition_index(n, c);
    x.gather(index.into(), &[n * grid.count(), grid.tokens(), c])
}

/// Splits `[N, H, W, C]` into `[N·nWin, M·M, C]`.
pub fn window_partition<'t, T: Real>(x: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    let (_, h, w, _) = dims4(x, "window_partition")?;
    partition(x, &WindowGrid::new(h, w, window)?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t, T: Real>(windows: Var<'t, T>, grid: &WindowGrid) -> Result<Var<'t, T>> {
    let shape = windows.shape();
    let [nw, t, c] = shape[..] else {
        return Err(Error::Shape(format!("window_reverse expects [N*nWin, T, C], got {shape:?}")));
    };
    if t != grid.tokens() || nw % grid.count() != 0 {
        return Err(Error::Dimension {
            op: "window_reverse",
            lhs: shape.clone(),
            rhs: vec![grid.height, grid.width, grid.win_h, grid.win_w],
        });
    }
    let n = nw / grid.count();
    let fwd = grid.partition_index(n, c);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    windows.gather(inv.into(), &[n, grid.height, grid.width, c])
}

/// Cyclic shift: output `(y, x)` reads input `((y + dy) mod H, (x + dx) mod W)`.
fn roll<'t, T: Real>(x: Var<'t, T>, dy: usize, dx: usize) -> Result<Var<'t, T>> {
    let (n, h, w, c) = dims4(x, "roll")?;
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + (y + dy) % h) * w + (xx + dx) % w) * c;
                index.extend(base..base + c);
            }
        }
    }
    x.gather(index.into(), &[n, h, w, c])
}

/// Learnable relative position bias table, `[(2·win_h−1)·(2·win_w−1), heads]`.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub win_h: usize,
    pub win_w: usize,
    pub heads: usize,
}

impl RelativeBias {
    pub fn table_rows(win_h: usize, win_w: usize) -> usize {
        (2 * win_h - 1) * (2 * win_w - 1)
    }

    /// Table row for the offset between tokens `t1` and `t2` of one window.
    pub fn offset_index(&self, t1: usize, t2: usize) -> usize {
        let (y1, x1) = (t1 / self.win_w, t1 % self.win_w);
        let (y2, x2) = (t2 / self.win_w, t2 % self.win_w);
        (y1 + self.win_h - 1 - y2) * (2 * self.win_w - 1) + (x1 + self.win_w - 1 - x2)
    }

    /// Expands the table to `[heads, T, T]`.
    fn expand<'t, T: Real>(&self, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let t = self.win_h * self.win_w;
        let mut index = Vec::with_capacity(self.heads * t * t);
        for h in 0..self.heads {
            for t1 in 0..t {
                for t2 in 0..t {
                    index.push(self.offset_index(t1, t2) * self.heads + h);
                }
            }
        }
        p.get(self.table).gather(index.into(), &[self.heads, t, t])
    }
}

/// Projections for multi-head attention, all `C×C` with bias.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
    pub rel_bias: Option<RelativeBias>,
}

impl AttentionParams {
    /// `rel_window` enables a relative position bias for windows of that size.
    pub fn init<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        rel_window: Option<(usize, usize)>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels are not divisible by {heads} heads")));
        }
        let mut s = b.scoped(name);
        let q = s.linear("q", dim, dim, true)?;
        let k = s.linear("k", dim, dim, true)?;
        let v = s.linear("v", dim, dim, true)?;
        let o = s.linear("o", dim, dim, true)?;
        let rel_bias = match rel_window {
            Some((win_h, win_w)) => {
                let rows = RelativeBias::table_rows(win_h, win_w);
                let table = s.trunc_normal("rel_bias", &[rows, heads], INIT_STD)?;
                Some(RelativeBias { table, win_h, win_w, heads })
            }
            None => None,
        };
        Ok(Self { q, k, v, o, heads, dim, rel_bias })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn num_params(&self) -> usize {
        let bias = self.rel_bias.as_ref().map_or(0, |r| RelativeBias::table_rows(r.win_h, r.win_w) * r.heads);
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params() + bias
    }
}

fn split_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [b, t, c] = shape[..] else { unreachable!("token batches are rank 3") };
    let d = c / heads;
    let mut index = Vec::with_capacity(b * t * c);
    for bb in 0..b {
        for h in 0..heads {
            for tt in 0..t {
                let base = (bb * t + tt) * c + h * d;
                index.extend(base..base + d);
            }
        }
    }
    x.gather(index.into(), &[b, heads, t, d])
}

fn merge_heads<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [b, heads, t, d] = shape[..] else { unreachable!("head batches are rank 4") };
    let mut index = Vec::with_capacity(b * t * heads * d);
    for bb in 0..b {
        for tt in 0..t {
            for h in 0..heads {
                let base = ((bb * heads + h) * t + tt) * d;
                index.extend(base..base + d);
            }
        }
    }
    x.gather(index.into(), &[b, t, heads * d])
}

/// Multi-head scaled dot-product attention over token batches
/// `q_tokens: [B, Tq, C]`, `kv_tokens: [B, Tk, C]`.
///
/// `mask`, when given, is `[nWin, heads, Tq, Tk]` and is added to the logits
/// of batch entry `b` at window `b mod nWin`.
fn attend<'t, T: Real>(
    p: &Bound<'t, T>,
    q_tokens: Var<'t, T>,
    kv_tokens: Var<'t, T>,
    ap: &AttentionParams,
    bias: Option<Var<'t, T>>,
    mask: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let qs = q_tokens.shape();
    let c = qs[2];
    if c != ap.dim {
        return Err(Error::Dimension { op: "attention", lhs: qs, rhs: vec![ap.dim] });
    }
    let q = split_heads(ap.q.forward(p, q_tokens)?, ap.heads)?;
    let k = split_heads(ap.k.forward(p, kv_tokens)?, ap.heads)?;
    let v = split_heads(ap.v.forward(p, kv_tokens)?, ap.heads)?;
    let scale = T::one() / T::lit(ap.head_dim() as f64).sqrt();
    let mut logits = q.matmul(k.transpose_last2()?)?.scale(scale);
    if let Some(bias) = bias {
        logits = logits.add(bias)?;
    }
    if let Some(mask) = mask {
        let ls = logits.shape();
        let nwin = mask.shape()[0];
        let grouped = logits.reshape(&[ls[0] / nwin, nwin, ls[1], ls[2], ls[3]])?;
        logits = grouped.add(mask)?.reshape(&ls)?;
    }
    let out = merge_heads(logits.softmax()?.matmul(v)?)?;
    ap.o.forward(p, out)
}

/// Swin-style region mask for a map cyclically shifted by `shift`.
fn shift_mask<T: Real>(grid: &WindowGrid, heads: usize, shift: usize) -> Tensor<T> {
    let region = |v: usize, extent: usize, win: usize| -> usize {
        if v < extent - win {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let t = grid.tokens();
    let labels: Vec<Vec<usize>> = (0..grid.count())
        .map(|win| {
            (0..t)
                .map(|tok| {
                    let (y, x) = grid.position(win, tok);
                    region(y, grid.height, grid.win_h) * 3 + region(x, grid.width, grid.win_w)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(grid.count() * heads * t * t);
    for lab in &labels {
        for _ in 0..heads {
            for &a in lab {
                for &b in lab {
                    data.push(if a == b { T::zero() } else { T::lit(MASK_LOGIT) });
                }
            }
        }
    }
    Tensor::from_vec(vec![grid.count(), heads, t, t], data).expect("mask shape")
}

/// Window attention on an `[N, H, W, C]` map with optional cyclic shift.
pub fn window_attention<'t, T: Real>(
    p: &Bound<'t, T>,
    x: Var<'t, T>,
    ap: &AttentionParams,
    grid: &WindowGrid,
    shift: usize,
) -> Result<Var<'t, T>> {
    let (_, h, w, c) = dims4(x, "l_msa")?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::Dimension { op: "l_msa", lhs: x.shape(), rhs: vec![grid.height, grid.width] });
    }
    if c % ap.heads != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible by {} heads", ap.heads)));
    }
    if shift >= grid.win_h.min(grid.win_w) && shift != 0 {
        return Err(Error::Config(format!("shift {shift} must be smaller than the window")));
    }
    let bias = match &ap.rel_bias {
        Some(rb) => {
            if (rb.win_h, rb.win_w) != (grid.win_h, grid.win_w) {
                return Err(Error::Config(format!(
                    "relative bias built for {}x{} windows used with {}x{}",
                    rb.win_h, rb.win_w, grid.win_h, grid.win_w
                )));
            }
            Some(rb.expand(p)?)
        }
        None => None,
    };
    let shifted = if shift > 0 { roll(x, shift, shift)? } else { x };
    let tokens = partition(shifted, grid)?;
    let mask = if shift > 0 {
        Some(p.tape().constant(shift_mask(grid, ap.heads, shift)))
    } else {
        None
    };
    let out = attend(p, tokens, tokens, ap, bias, mask)?;
    let merged = window_reverse(out, grid)?;
    if shift > 0 {
        roll(merged, h - shift, w - shift)
    } else {
        Ok(merged)
    }
}

/// Local multi-head self-attention inside non-overlapping `M×M` windows.
/// No residual and no norm; callers compose those around it.
pub fn l_msa<'t, T: Real>(p: &Bound<'t, T>, x: Var<'t, T>, ap: &AttentionParams, window: usize) -> Result<Var<'t, T>> {
    let (_, h, w, _) = dims4(x, "l_msa")?;
    window_attention(p, x, ap, &WindowGrid::new(h, w, window)?, 0)
}

/// Global self-attention: L-MSA with one window covering the whole map.
pub fn global_msa<'t, T: Real>(p: &Bound<'t, T>, x: Var<'t, T>, ap: &AttentionParams) -> Result<Var<'t, T>> {
    let (_, h, w, _) = dims4(x, "global_msa")?;
    window_attention(p, x, ap, &WindowGrid::rect(h, w, h, w)?, 0)
}

/// Cross-attention from every position of `query` (`[N, Hq, Wq, C]`) to
/// every position of `context` (`[N, Hk, Wk, C]`). Output has the query's shape.
pub fn cross_attention<'t, T: Real>(
    p: &Bound<'t, T>,
    query: Var<'t, T>,
    context: Var<'t, T>,
    ap: &AttentionParams,
) -> Result<Var<'t, T>> {
    let (n, hq, wq, c) = dims4(query, "cross_attention")?;
    let (nk, hk, wk, ck) = dims4(context, "cross_attention")?;
    if n != nk || c != ck {
        return Err(Error::Dimension { op: "cross_attention", lhs: query.shape(), rhs: context.shape() });
    }
    let q_tokens = query.reshape(&[n, hq * wq, c])?;
    let kv_tokens = context.reshape(&[n, hk * wk, c])?;
    attend(p, q_tokens, kv_tokens, ap, None, None)?.reshape(&[n, hq, wq, c])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use crate::testutil::{bits, perturb, random};

    fn params(seed: u64, c: usize, heads: usize, rel: Option<(usize, usize)>) -> (ParamStore<f64>, AttentionParams) {
        let mut store = ParamStore::new();
        let ap = AttentionParams::init(&mut ParamBuilder::new(&mut store, seed), "attn", c, heads, rel).unwrap();
        perturb(&mut store, seed + 1, 0.3);
        (store, ap)
    }

    fn run(store: &ParamStore<f64>, f: impl for<'t> Fn(&Bound<'t, f64>) -> Var<'t, f64>) -> Tensor<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        (*f(&p).value()).clone()
    }

    #[test]
    fn partition_layout() {
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let tape = Tape::new();
        let w = window_partition(tape.constant(x.clone()), 2).unwrap().value();
        assert_eq!(w.shape(), &[4, 4, 1]);
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        let whole = window_partition(tape.constant(x.clone()), 4).unwrap().value();
        assert_eq!(whole.shape(), &[1, 16, 1]);
        assert_eq!(whole.data(), x.data());
    }

    #[test]
    fn partition_errors_name_extents() {
        let err = WindowGrid::new(6, 8, 4).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains('6') && msg.contains('8') && msg.contains('4'), "{msg}");
        let tape = Tape::new();
        let bad = tape.constant(random(1, &[3, 5, 2]));
        assert!(window_reverse(bad, &WindowGrid::new(4, 4, 2).unwrap()).is_err());
    }

    #[test]
    fn roundtrips_are_exact() {
        for seed in 0..10 {
            let x = random(seed, &[2, 8, 8, 3]);
            let grid = WindowGrid::new(8, 8, 4).unwrap();
            let tape = Tape::new();
            let w = window_partition(tape.constant(x.clone()), 4).unwrap();
            assert_eq!(bits(&window_reverse(w, &grid).unwrap().value()), bits(&x));
            let again = window_partition(window_reverse(w, &grid).unwrap(), 4).unwrap();
            assert_eq!(bits(&again.value()), bits(&w.value()));
        }
    }

    #[test]
    fn one_token_windows_reduce_to_value_projection() {
        let (store, ap) = params(3, 4, 2, None);
        let x = random(4, &[1, 3, 3, 4]);
        let got = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, 1).unwrap());
        let want = run(&store, |p| {
            let v = ap.v.forward(p, p.tape().constant(x.clone())).unwrap();
            ap.o.forward(p, v).unwrap()
        });
        assert!(max_abs_diff(&got, &want) < 1e-14);
        let global = run(&store, |p| global_msa(p, p.tape().constant(random(5, &[1, 1, 1, 4])), &ap).unwrap());
        let direct = run(&store, |p| {
            let v = ap.v.forward(p, p.tape().constant(random(5, &[1, 1, 1, 4]))).unwrap();
            ap.o.forward(p, v).unwrap()
        });
        assert!(max_abs_diff(&global, &direct) < 1e-14);
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let (store, ap) = params(6, 4, 2, None);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| [0.3, -0.2, 0.9, 0.1][i % 4]);
        let y = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, 2).unwrap());
        for pos in 1..16 {
            assert_eq!(&y.data()[pos * 4..pos * 4 + 4], &y.data()[..4]);
        }
    }

    #[test]
    fn full_window_equals_global_bitwise() {
        for seed in 0..5 {
            let (store, ap) = params(seed, 6, 3, None);
            let x = random(seed + 9, &[2, 4, 4, 6]);
            let local = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, 4).unwrap());
            let global = run(&store, |p| global_msa(p, p.tape().constant(x.clone()), &ap).unwrap());
            assert_eq!(bits(&local), bits(&global));
        }
    }

    #[test]
    fn windowing_binds_below_full_resolution() {
        let (store, ap) = params(2, 4, 2, None);
        let x = random(3, &[1, 4, 4, 4]);
        let local = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, 2).unwrap());
        let global = run(&store, |p| global_msa(p, p.tape().constant(x.clone()), &ap).unwrap());
        assert!(max_abs_diff(&local, &global) > 1e-3);
    }

    #[test]
    fn relative_bias_covers_each_offset_once() {
        for (wh, ww) in [(2, 2), (3, 2), (4, 4), (1, 3)] {
            let (_, ap) = params(0, 2, 1, Some((wh, ww)));
            let rb = ap.rel_bias.unwrap();
            let t = wh * ww;
            let mut seen = vec![0usize; RelativeBias::table_rows(wh, ww)];
            for t1 in 0..t {
                for t2 in 0..t {
                    seen[rb.offset_index(t1, t2)] += 1;
                }
            }
            // row for offset (dy, dx) is hit once per token pair with that offset
            for (row, &count) in seen.iter().enumerate() {
                let dy = (row / (2 * ww - 1)) as isize - (wh as isize - 1);
                let dx = (row % (2 * ww - 1)) as isize - (ww as isize - 1);
                let expect = (wh as isize - dy.abs()) * (ww as isize - dx.abs());
                assert_eq!(count as isize, expect, "offset ({dy},{dx})");
            }
        }
    }

    #[test]
    fn shift_must_fit_the_window() {
        let (store, ap) = params(1, 4, 2, Some((2, 2)));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let grid = WindowGrid::new(4, 4, 2).unwrap();
        let x = tape.constant(random(1, &[1, 4, 4, 4]));
        assert!(window_attention(&p, x, &ap, &grid, 2).is_err());
        let wrong = WindowGrid::new(4, 4, 4).unwrap();
        assert!(window_attention(&p, x, &ap, &wrong, 0).is_err());
    }

    fn window_cells(m: usize, wy: usize, wx: usize) -> impl Iterator<Item = (usize, usize)> {
        (wy * m..(wy + 1) * m).flat_map(move |y| (wx * m..(wx + 1) * m).map(move |x| (y, x)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn window_locality(seed in any::<u64>(), wy in 0usize..3, wx in 0usize..2, rel in any::<bool>()) {
            let (m, h, w, c) = (2, 6, 4, 4);
            let (store, ap) = params(seed, c, 2, rel.then_some((m, m)));
            let x = random(seed ^ 1, &[1, h, w, c]);
            let mut zeroed = x.clone();
            for (y, xx) in window_cells(m, wy, wx) {
                for ch in 0..c {
                    zeroed.data_mut()[(y * w + xx) * c + ch] = 0.0;
                }
            }
            let a = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, m).unwrap());
            let b = run(&store, |p| l_msa(p, p.tape().constant(zeroed.clone()), &ap, m).unwrap());
            let inside: Vec<(usize, usize)> = window_cells(m, wy, wx).collect();
            for y in 0..h {
                for xx in 0..w {
                    let i = (y * w + xx) * c;
                    if !inside.contains(&(y, xx)) {
                        prop_assert_eq!(bits(&Tensor::from_vec(vec![c], a.data()[i..i + c].to_vec()).unwrap()),
                                        bits(&Tensor::from_vec(vec![c], b.data()[i..i + c].to_vec()).unwrap()));
                    }
                }
            }
        }

        #[test]
        fn windows_permute_equivariantly(seed in any::<u64>(), rel in any::<bool>()) {
            let (m, c) = (2, 4);
            let (store, ap) = params(seed, c, 2, rel.then_some((m, m)));
            let x = random(seed ^ 2, &[1, 4, 4, c]);
            // swap window (0,0) with (1,1) and (0,1) with (1,0)
            let perm = |wy: usize, wx: usize| (1 - wy, 1 - wx);
            let mut permuted = x.clone();
            for wy in 0..2 {
                for wx in 0..2 {
                    let (ty, tx) = perm(wy, wx);
                    for dy in 0..m {
                        for dx in 0..m {
                            let src = ((wy * m + dy) * 4 + wx * m + dx) * c;
                            let dst = ((ty * m + dy) * 4 + tx * m + dx) * c;
                            permuted.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                        }
                    }
                }
            }
            let a = run(&store, |p| l_msa(p, p.tape().constant(x.clone()), &ap, m).unwrap());
            let b = run(&store, |p| l_msa(p, p.tape().constant(permuted.clone()), &ap, m).unwrap());
            for wy in 0..2 {
                for wx in 0..2 {
                    let (ty, tx) = perm(wy, wx);
                    for dy in 0..m {
                        for dx in 0..m {
                            let src = ((wy * m + dy) * 4 + wx * m + dx) * c;
                            let dst = ((ty * m + dy) * 4 + tx * m + dx) * c;
                            for ch in 0..c {
                                prop_assert_eq!(a.data()[src + ch].to_bits(), b.data()[dst + ch].to_bits());
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn partition_roundtrip_any_grid(seed in any::<u64>(), m in 1usize..4, rows in 1usize..4, cols in 1usize..4, c in 1usize..4) {
            let x = random(seed, &[1, rows * m, cols * m, c]);
            let grid = WindowGrid::new(rows * m, cols * m, m).unwrap();
            let tape = Tape::new();
            let back = window_reverse(window_partition(tape.constant(x.clone()), m).unwrap(), &grid).unwrap();
            prop_assert_eq!(bits(&back.value()), bits(&x));
        }
    }
}
