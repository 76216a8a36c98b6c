//! Global BEV cross-attention with a depth-modulated LiDAR query.

use alloc::vec::Vec;

use crate::depth::{encode_scalar, DepthEncoding, GridSpec, DEFAULT_FREQUENCY_BASE};
use crate::error::{bail, Result};
use crate::geometry::BevFeatureMap;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::tape::{attention_probs, AttentionScope, Tape, Var};
use crate::tensor::Tensor;

/// How the depth encoding is combined with the query tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbedMode {
    #[default]
    Multiply,
    Sum,
    /// Channel concat followed by a learned `2C → C` map.
    Concat,
}

impl EmbedMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::Multiply => "multiply",
            EmbedMode::Sum => "sum",
            EmbedMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiply" | "mul" => Ok(EmbedMode::Multiply),
            "sum" | "add" => Ok(EmbedMode::Sum),
            "concat" | "cat" => Ok(EmbedMode::Concat),
            _ => bail!(Config, "unknown embed mode {s:?}"),
        }
    }
}

/// Sinusoidal 2D position code: the first half of the channels encodes the
/// grid x coordinate, the second half grid y.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding2D {
    channels: Tensor,
}

impl PositionalEncoding2D {
    pub fn new(grid: &GridSpec, channels: usize) -> Result<Self> {
        check_pos_channels(channels)?;
        let mut data = alloc::vec![0.0; grid.cells() * channels];
        for x in 0..grid.width {
            for y in 0..grid.height {
                let cell = grid.index(x, y);
                encode_position(x as f64, y as f64, &mut data[cell * channels..(cell + 1) * channels]);
            }
        }
        Ok(Self {
            channels: Tensor::new(&[grid.width, grid.height, channels], data)?,
        })
    }

    /// `[W, H, C]`.
    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    /// `[W·H, C]`.
    pub fn tokens(&self) -> Tensor {
        let c = self.channels.last_dim();
        self.channels
            .reshape(&[self.channels.numel() / c, c])
            .expect("token count matches")
    }
}

fn check_pos_channels(channels: usize) -> Result<()> {
    if channels == 0 || channels % 4 != 0 {
        bail!(Config, "positional encoding needs channels divisible by 4, got {channels}");
    }
    Ok(())
}

/// Encodes continuous grid coordinates into `out` (length divisible by 4).
pub fn encode_position(gx: f64, gy: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    let (a, b) = out.split_at_mut(half);
    encode_scalar(gx, half, DEFAULT_FREQUENCY_BASE, a);
    encode_scalar(gy, half, DEFAULT_FREQUENCY_BASE, b);
}

/// `[len, C]` position codes for continuous grid coordinates.
pub fn encode_positions(coords: &[(f64, f64)], channels: usize) -> Result<Tensor> {
    check_pos_channels(channels)?;
    let mut data = alloc::vec![0.0; coords.len() * channels];
    for (i, &(gx, gy)) in coords.iter().enumerate() {
        encode_position(gx, gy, &mut data[i * channels..(i + 1) * channels]);
    }
    Tensor::new(&[coords.len(), channels], data)
}

/// Multi-head cross-attention with learned Q/K/V/O projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            bail!(Config, "{channels} channels are not divisible by {heads} heads");
        }
        let mut lin = |leaf: &str| Linear::new(store, init, &alloc::format!("{name}.{leaf}"), channels, channels, true);
        Ok(Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query: Var,
        key: Var,
        value: Var,
        scope: AttentionScope,
    ) -> Result<Var> {
        let q = self.q.forward(tape, bound, query)?;
        let k = self.k.forward(tape, bound, key)?;
        let v = self.v.forward(tape, bound, value)?;
        let a = tape.attention(q, k, v, self.heads, scope)?;
        self.o.forward(tape, bound, a)
    }

    /// Per-head `[n, m]` attention matrices for raw query/key tokens.
    pub fn probabilities(
        &self,
        store: &ParamStore,
        query: &Tensor,
        key: &Tensor,
        scope: AttentionScope,
    ) -> Result<Vec<Tensor>> {
        let q = apply_linear(store, &self.q, query)?;
        let k = apply_linear(store, &self.k, key)?;
        attention_probs(&q, &k, self.heads, scope)
    }

    /// Sets every projection to the identity.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        for l in [self.q, self.k, self.v, self.o] {
            l.set_identity(store)?;
        }
        Ok(())
    }
}

fn apply_linear(store: &ParamStore, l: &Linear, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(store.get(l.weight).clone());
    let b = l.bias.map(|b| tape.constant(store.get(b).clone()));
    let y = tape.linear(xv, w, b)?;
    Ok(tape.value(y).clone())
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ffn {
    pub first: Linear,
    pub second: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, inp: usize, hidden: usize, out: usize) -> Self {
        Self {
            first: Linear::new(store, init, &alloc::format!("{name}.0"), inp, hidden, true),
            second: Linear::new(store, init, &alloc::format!("{name}.1"), hidden, out, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, bound, x)?;
        let h = tape.gelu(h)?;
        self.second.forward(tape, bound, h)
    }
}

/// Combines `(V + P)` with a depth encoding.
pub fn embed_depth(
    tape: &mut Tape,
    bound: &Bound,
    mode: EmbedMode,
    concat: Option<&Linear>,
    x: Var,
    depth: Var,
) -> Result<Var> {
    match mode {
        EmbedMode::Multiply => tape.mul(x, depth),
        EmbedMode::Sum => tape.add(x, depth),
        EmbedMode::Concat => {
            let Some(l) = concat else {
                bail!(Usage, "concat embedding needs its projection layer");
            };
            let cat = tape.concat_last(x, depth)?;
            l.forward(tape, bound, cat)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgfConfig {
    pub channels: usize,
    pub heads: usize,
    pub embed: EmbedMode,
    pub ffn_hidden: usize,
}

impl DgfConfig {
    /// `C_ff = 2C`.
    pub fn new(channels: usize, heads: usize, embed: EmbedMode) -> Self {
        Self {
            channels,
            heads,
            embed,
            ffn_hidden: 2 * channels,
        }
    }
}

/// Depth-guided global fusion block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgfBlock {
    pub config: DgfConfig,
    pub attn: CrossAttention,
    pub concat: Option<Linear>,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl DgfBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: DgfConfig) -> Result<Self> {
        let c = config.channels;
        check_pos_channels(c)?;
        let attn = CrossAttention::new(store, init, &alloc::format!("{name}.attn"), c, config.heads)?;
        let concat = (config.embed == EmbedMode::Concat)
            .then(|| Linear::new(store, init, &alloc::format!("{name}.embed"), 2 * c, c, true));
        Ok(Self {
            config,
            attn,
            concat,
            norm1: LayerNorm::new(store, &alloc::format!("{name}.norm1"), c),
            norm2: LayerNorm::new(store, &alloc::format!("{name}.norm2"), c),
            ffn: Ffn::new(store, init, &alloc::format!("{name}.ffn"), c, config.ffn_hidden, c),
        })
    }

    /// Query tokens: `embed(V + P, D)`, or `V + P` when `depth` is absent.
    pub fn query(&self, tape: &mut Tape, bound: &Bound, v: Var, pos: Var, depth: Option<Var>) -> Result<Var> {
        let vp = tape.add(v, pos)?;
        match depth {
            Some(d) => embed_depth(tape, bound, self.config.embed, self.concat.as_ref(), vp, d),
            None => Ok(vp),
        }
    }

    /// Cross-attention of LiDAR queries over image tokens; all inputs `[n, C]`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        v: Var,
        i: Var,
        pos: Var,
        depth: Option<Var>,
    ) -> Result<Var> {
        let q = self.query(tape, bound, v, pos, depth)?;
        let k = tape.add(i, pos)?;
        self.attn.forward(tape, bound, q, k, i, AttentionScope::Full)
    }

    /// `r = LN(v̂ + v)`, `out = LN(FFN(r) + r)`.
    pub fn fuse(&self, tape: &mut Tape, bound: &Bound, v_hat: Var, v: Var) -> Result<Var> {
        let s = tape.add(v_hat, v)?;
        let r = self.norm1.forward(tape, bound, s)?;
        let f = self.ffn.forward(tape, bound, r)?;
        let s2 = tape.add(f, r)?;
        self.norm2.forward(tape, bound, s2)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        v: Var,
        i: Var,
        pos: Var,
        depth: Option<Var>,
    ) -> Result<Var> {
        let v_hat = self.attend(tape, bound, v, i, pos, depth)?;
        self.fuse(tape, bound, v_hat, v)
    }

    /// Per-head `[n, n]` attention matrices.
    pub fn attention_weights(
        &self,
        store: &ParamStore,
        v: &Tensor,
        i: &Tensor,
        pos: &Tensor,
        depth: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = store.bind_constants(&mut tape);
        let (vv, iv, pv) = (tape.constant(v.clone()), tape.constant(i.clone()), tape.constant(pos.clone()));
        let dv = depth.map(|d| tape.constant(d.clone()));
        let q = self.query(&mut tape, &bound, vv, pv, dv)?;
        let k = tape.add(iv, pv)?;
        let (q, k) = (tape.value(q).clone(), tape.value(k).clone());
        self.attn.probabilities(store, &q, &k, AttentionScope::Full)
    }
}

fn check_maps(maps: &[(&BevFeatureMap, &str)], grid: &GridSpec, channels: usize) -> Result<()> {
    for (m, name) in maps {
        if m.grid() != grid || m.channels() != channels {
            bail!(
                Dimension,
                "{name}: {}x{}x{} does not match {}x{}x{channels}",
                m.grid().width,
                m.grid().height,
                m.channels(),
                grid.width,
                grid.height
            );
        }
    }
    Ok(())
}

/// Evaluates the attention half of the block on BEV maps without keeping gradients.
pub fn dgf_attend(
    block: &DgfBlock,
    store: &ParamStore,
    v_bev: &BevFeatureMap,
    i_bev: &BevFeatureMap,
    pos: &PositionalEncoding2D,
    depth: Option<&DepthEncoding>,
) -> Result<BevFeatureMap> {
    let grid = *v_bev.grid();
    let c = block.config.channels;
    check_maps(&[(v_bev, "lidar BEV"), (i_bev, "image BEV")], &grid, c)?;
    if pos.channels().shape() != [grid.width, grid.height, c] {
        bail!(Dimension, "positional encoding {:?} does not match the grid", pos.channels().shape());
    }
    if let Some(d) = depth {
        if d.channels().shape() != [grid.width, grid.height, c] {
            bail!(Dimension, "depth encoding {:?} does not match the grid", d.channels().shape());
        }
    }
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let v = tape.constant(v_bev.tokens());
    let i = tape.constant(i_bev.tokens());
    let p = tape.constant(pos.tokens());
    let d = depth.map(|d| tape.constant(d.tokens()));
    let out = block.attend(&mut tape, &bound, v, i, p, d)?;
    BevFeatureMap::from_tokens(grid, tape.value(out))
}

/// Residual, norm and FFN aggregation of `v̂` with the LiDAR map.
pub fn dgf_fuse(
    block: &DgfBlock,
    store: &ParamStore,
    v_hat: &BevFeatureMap,
    v_bev: &BevFeatureMap,
) -> Result<BevFeatureMap> {
    let grid = *v_bev.grid();
    check_maps(&[(v_hat, "attended BEV"), (v_bev, "lidar BEV")], &grid, block.config.channels)?;
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let vh = tape.constant(v_hat.tokens());
    let v = tape.constant(v_bev.tokens());
    let out = block.fuse(&mut tape, &bound, vh, v)?;
    BevFeatureMap::from_tokens(grid, tape.value(out))
}

/// Mean co-located attention mass: for each query cell, the head-averaged
/// probability assigned to keys within `radius` cells (Chebyshev) of itself.
pub fn local_attention_mass(probs: &[Tensor], grid: &GridSpec, radius: usize) -> Result<Vec<f64>> {
    let n = grid.cells();
    if probs.is_empty() || probs.iter().any(|p| p.shape() != [n, n]) {
        bail!(Dimension, "attention matrices must be [{n}, {n}]");
    }
    let r = radius as i64;
    let mut out = alloc::vec![0.0; n];
    for (q, o) in out.iter_mut().enumerate() {
        let (qx, qy) = grid.coords(q);
        let mut mass = 0.0;
        for dx in -r..=r {
            for dy in -r..=r {
                let (kx, ky) = (qx as i64 + dx, qy as i64 + dy);
                if grid.contains(kx, ky) {
                    let k = grid.index(kx as usize, ky as usize);
                    mass += probs.iter().map(|p| p.data()[q * n + k]).sum::<f64>();
                }
            }
        }
        *o = mass / probs.len() as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_codes_are_distinct_and_bounded() {
        let grid = GridSpec::centered(12, 12, 0.6).unwrap();
        let p = PositionalEncoding2D::new(&grid, 8).unwrap();
        let t = p.tokens();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        for a in 0..t.rows() {
            for b in a + 1..t.rows() {
                let diff: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-6, "cells {a} and {b} collide");
            }
        }
    }

    #[test]
    fn embed_mode_round_trip() {
        for m in [EmbedMode::Multiply, EmbedMode::Sum, EmbedMode::Concat] {
            assert_eq!(EmbedMode::parse(m.name()).unwrap(), m);
        }
        assert!(EmbedMode::parse("divide").is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let cfg = DgfConfig::new(8, 3, EmbedMode::Multiply);
        assert_eq!(DgfBlock::new(&mut store, &mut init, "dgf", cfg).unwrap_err().kind(), "config");
    }
}
