//! Independent reference implementations and oracle checks shared by the
//! integration tests.
#![allow(dead_code)]

use depthfusion_core::depth::GridSpec;
use depthfusion_core::dgf::{CrossAttention, DgfBlock, DgfConfig, EmbedMode, PositionalEncoding2D};
use depthfusion_core::dlf::{DlfBlock, DlfConfig};
use depthfusion_core::geometry::{lift_splat, roi_align, voxelize, Box3D, CameraModel, DepthBins, PointCloud, Rect, VoxelConfig};
use depthfusion_core::nn::{Init, Linear, ParamStore};
use depthfusion_core::{AttentionScope, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(r: &Rows) -> Tensor {
    Tensor::new(&[r.len(), r[0].len()], r.concat()).unwrap()
}

pub fn linear_ref(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    let w = store.get(l.weight);
    let b = l.bias.map(|b| store.get(b).data().to_vec());
    x.iter()
        .map(|row| {
            (0..l.out)
                .map(|j| {
                    let mut acc = b.as_ref().map_or(0.0, |b| b[j]);
                    for (i, &v) in row.iter().enumerate() {
                        acc += v * w.data()[i * l.out + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Plain multi-head cross-attention with the block's projections.
pub fn attention_ref(store: &ParamStore, a: &CrossAttention, q: &Rows, k: &Rows, v: &Rows, diagonal: bool) -> Rows {
    let (q, k, v) = (linear_ref(store, &a.q, q), linear_ref(store, &a.k, k), linear_ref(store, &a.v, v));
    let c = q[0].len();
    let dh = c / a.heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..a.heads {
            let sl = h * dh..(h + 1) * dh;
            let keys: Vec<usize> = if diagonal { vec![i] } else { (0..k.len()).collect() };
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| qi[sl.clone()].iter().zip(&k[j][sl.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for (pj, &j) in p.iter().zip(&keys) {
                for ch in sl.clone() {
                    out[i][ch] += pj * v[j][ch];
                }
            }
        }
    }
    linear_ref(store, &a.o, &out)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn mul(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect()).collect()
}

pub fn layer_norm_ref(x: &Rows, gain: &[f64], bias: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + bias[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn randn(init: &mut Init, r: usize, c: usize) -> Tensor {
    init.normal(&[r, c], 1.0)
}

pub fn dgf_setup(w: usize, h: usize, c: usize, heads: usize, embed: EmbedMode) -> (GridSpec, ParamStore, DgfBlock, Init) {
    let grid = GridSpec::centered(w, h, 2.0).unwrap();
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let block = DgfBlock::new(&mut store, &mut init, "dgf", DgfConfig::new(c, heads, embed)).unwrap();
    (grid, store, block, init)
}

pub fn run_attend(store: &ParamStore, block: &DgfBlock, v: &Tensor, i: &Tensor, p: &Tensor, d: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let (vv, iv, pv) = (tape.constant(v.clone()), tape.constant(i.clone()), tape.constant(p.clone()));
    let dv = d.map(|d| tape.constant(d.clone()));
    let out = block.attend(&mut tape, &bound, vv, iv, pv, dv).unwrap();
    tape.value(out).clone()
}

pub fn dlf_setup(c: usize, scope: AttentionScope, embed: EmbedMode) -> (ParamStore, DlfBlock, Init) {
    let mut store = ParamStore::new();
    let mut init = Init::new(9);
    let mut cfg = DlfConfig::new(c, 2, embed);
    cfg.scope = scope;
    let block = DlfBlock::new(&mut store, &mut init, "dlf", cfg).unwrap();
    (store, block, init)
}

pub fn run_dlf(store: &ParamStore, block: &DlfBlock, f: &Tensor, v: &Tensor, i: &Tensor, p: &Tensor, d: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let vars = [f, v, i, p].map(|t| tape.constant(t.clone()));
    let dv = d.map(|d| tape.constant(d.clone()));
    let out = block.forward(&mut tape, &bound, vars[0], vars[1], vars[2], vars[3], dv).unwrap();
    tape.value(out).clone()
}

pub fn dlf_ref(store: &ParamStore, block: &DlfBlock, q: &Rows, f: &Rows, v: &Rows, i: &Rows, diagonal: bool) -> Rows {
    let o1 = attention_ref(store, &block.image_branch, q, i, i, diagonal);
    let o2 = attention_ref(store, &block.voxel_branch, q, v, v, diagonal);
    let cat: Rows = add(&o1, f).iter().zip(&add(&o2, f)).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
    let h: Rows = linear_ref(store, &block.ffn.first, &cat).iter().map(|x| x.iter().map(|&y| gelu(y)).collect()).collect();
    linear_ref(store, &block.ffn.second, &h)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Bilinear value of channel `ch` at continuous image coordinate `(x, y)`
/// (pixel centres at `k + 0.5`, coordinates clamped to the centre lattice),
/// evaluated as a sum of tent functions over every pixel.
pub fn tent_sample(feat: &Tensor, x: f64, y: f64, ch: usize) -> f64 {
    let s = feat.shape();
    let (rows, cols, c) = (s[0], s[1], s[2]);
    let u = (x - 0.5).clamp(0.0, (cols - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (rows - 1) as f64);
    let mut acc = 0.0;
    for r in 0..rows {
        let wy = (1.0 - (v - r as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for k in 0..cols {
            let wx = (1.0 - (u - k as f64).abs()).max(0.0);
            acc += wy * wx * feat.data()[(r * cols + k) * c + ch];
        }
    }
    acc
}

/// Bin averages from `n×n` regular interior samples per bin.
pub fn dense_oracle(feat: &Tensor, rect: &Rect, out: (usize, usize), n: usize) -> Vec<f64> {
    let c = feat.shape()[2];
    let bh = rect.height() / out.0 as f64;
    let bw = rect.width() / out.1 as f64;
    let mut res = vec![0.0; out.0 * out.1 * c];
    for i in 0..out.0 {
        for j in 0..out.1 {
            for ch in 0..c {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let y = rect.y0 + bh * (i as f64 + (a as f64 + 0.5) / n as f64);
                        let x = rect.x0 + bw * (j as f64 + (b as f64 + 0.5) / n as f64);
                        acc += tent_sample(feat, x, y, ch);
                    }
                }
                res[(i * out.1 + j) * c + ch] = acc / (n * n) as f64;
            }
        }
    }
    res
}

pub fn random_rect(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Rect {
    let x0 = rng.random_range(0.0..cols as f64 - 2.0);
    let y0 = rng.random_range(0.0..rows as f64 - 2.0);
    Rect {
        x0,
        y0,
        x1: rng.random_range(x0 + 0.5..cols as f64),
        y1: rng.random_range(y0 + 0.5..rows as f64),
    }
}

pub fn voxel_cfg() -> VoxelConfig {
    VoxelConfig::new([0.5, 0.5, 0.5], [[-6.0, 6.0], [-6.0, 6.0], [-1.0, 3.0]]).unwrap()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            [
                rng.random_range(-7.0..7.0),
                rng.random_range(-7.0..7.0),
                rng.random_range(-1.5..3.5),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    CameraModel::looking(
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.5],
        rng.random_range(-3.1..3.1),
        rng.random_range(3.0..8.0),
        (6, 10),
    )
    .unwrap()
}

/// Max error of 64-sample RoI align against the 64×64 dense oracle over `cases` random rectangles.
pub fn roi_align_oracle_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let feat = random_tensor(&mut rng, &[9, 11, 2]);
        let rect = random_rect(&mut rng, 9, 11);
        let got = roi_align(&feat, &rect, (3, 3), 64).unwrap();
        let want = dense_oracle(&feat, &rect, (3, 3), 64);
        worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    worst
}

/// Random oriented boxes whose gathered voxel set differs from a direct
/// point-in-box loop over voxel centres.
pub fn voxel_box_mismatches(seed: u64, boxes: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = voxel_cfg();
    let (grid, _) = voxelize(&random_cloud(&mut rng, 3000), &cfg);
    let mut bad = 0;
    for _ in 0..boxes {
        let b = Box3D::new(
            [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0)],
            [rng.random_range(0.5..4.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.5)],
            rng.random_range(-3.2..3.2),
            1.0,
            0,
        )
        .unwrap();
        let (s, c) = b.yaw.sin_cos();
        let want: Vec<usize> = grid
            .voxels()
            .iter()
            .enumerate()
            .filter(|(_, v)| {
                let p = cfg.center(v.index);
                let (dx, dy, dz) = (p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]);
                let lx = dx * c + dy * s;
                let ly = -dx * s + dy * c;
                lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0 && dz.abs() <= b.size[2] / 2.0
            })
            .map(|(i, _)| i)
            .collect();
        if grid.voxels_in_box(&b) != want {
            bad += 1;
        }
    }
    bad
}

/// Max gap between total splatted BEV mass and `Σ prob·feature` over the
/// (pixel, bin) pairs that land inside the grid, over `cases` random scenes.
pub fn lift_splat_conservation_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::centered(16, 16, 2.0).unwrap();
    let bins = DepthBins::uniform(6, 1.0, 25.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let views = rng.random_range(1..3);
        let cams: Vec<CameraModel> = (0..views).map(|_| random_camera(&mut rng)).collect();
        let (rows, cols, c) = (3, 5, 2);
        let feats: Vec<Tensor> = (0..views).map(|_| random_tensor(&mut rng, &[rows, cols, c])).collect();
        let probs: Vec<Tensor> = (0..views)
            .map(|_| {
                let mut t = Tensor::from_fn(&[rows, cols, bins.len()], |_| rng.random_range(0.0..1.0)).unwrap();
                for row in t.data_mut().chunks_mut(bins.len()) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                t
            })
            .collect();
        let bev = lift_splat(&feats, &probs, &cams, &bins, &grid).unwrap();
        let mut want = [0.0; 2];
        for v in 0..views {
            let (ir, ic) = cams[v].image_size();
            for r in 0..rows {
                for k in 0..cols {
                    let u = (k as f64 + 0.5) * ic as f64 / cols as f64;
                    let w = (r as f64 + 0.5) * ir as f64 / rows as f64;
                    for (b, &d) in bins.centers().iter().enumerate() {
                        let p = cams[v].unproject(u, w, d);
                        if grid.cell_of(p[0], p[1]).is_some() {
                            let pr = probs[v].get(&[r, k, b]).unwrap();
                            for (ch, acc) in want.iter_mut().enumerate() {
                                *acc += pr * feats[v].get(&[r, k, ch]).unwrap();
                            }
                        }
                    }
                }
            }
        }
        for (ch, acc) in want.iter().enumerate() {
            let got: f64 = (0..grid.cells()).map(|i| bev.features().data()[i * c + ch]).sum();
            worst = worst.max((got - acc).abs());
        }
    }
    worst
}

/// Global block with `D ≡ 1` (multiply) against plain cross-attention of
/// `(V + P)` over `(I + P)`.
pub fn dgf_neutral_error() -> f64 {
    let (grid, store, block, mut init) = dgf_setup(4, 5, 8, 2, EmbedMode::Multiply);
    let n = grid.cells();
    let (v, i) = (randn(&mut init, n, 8), randn(&mut init, n, 8));
    let p = PositionalEncoding2D::new(&grid, 8).unwrap().tokens();
    let got = run_attend(&store, &block, &v, &i, &p, Some(&Tensor::ones(&[n, 8])));
    let (vr, ir, pr) = (rows(&v), rows(&i), rows(&p));
    let want = attention_ref(&store, &block.attn, &add(&vr, &pr), &add(&ir, &pr), &ir, false);
    max_diff(&rows(&got), &want)
}

/// Local block with `D_inst ≡ 1` against unmodulated dual attention, for
/// both attention scopes.
pub fn dlf_neutral_error() -> f64 {
    let mut worst = 0.0f64;
    for scope in [AttentionScope::Diagonal, AttentionScope::Full] {
        let (store, block, mut init) = dlf_setup(8, scope, EmbedMode::Multiply);
        let t = 5;
        let (f, v, i) = (randn(&mut init, t, 8), randn(&mut init, t, 8), randn(&mut init, t, 8));
        let p = randn(&mut init, t, 8);
        let got = run_dlf(&store, &block, &f, &v, &i, &p, Some(&Tensor::ones(&[t, 8])));
        let q = add(&rows(&f), &rows(&p));
        let want = dlf_ref(&store, &block, &q, &rows(&f), &rows(&v), &rows(&i), scope == AttentionScope::Diagonal);
        worst = worst.max(max_diff(&rows(&got), &want));
    }
    worst
}
