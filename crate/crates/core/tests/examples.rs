use depthfusion_core::depth::{
    encode_scalar, instance_depth, sinusoidal_encode, DepthMatrix, GridSpec, DEFAULT_FREQUENCY_BASE,
};
use depthfusion_core::geometry::Box3D;
use depthfusion_core::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
use depthfusion_core::nn::Init;
use depthfusion_core::{Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eval1(x: &Tensor, f: impl Fn(&mut Tape, depthfusion_core::Var) -> depthfusion_core::Result<depthfusion_core::Var>) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v).unwrap();
    tape.value(out).clone()
}

fn matmul(a: &Tensor, b: &Tensor) -> depthfusion_core::Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

#[test]
fn identity_times_matrix() {
    let a = Init::new(1).normal(&[3, 4], 1.0);
    assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
}

#[test]
fn small_product_by_hand() {
    let c = matmul(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t(&[2, 1], &[0.0, 1.0])).unwrap();
    assert_eq!(c, t(&[2, 1], &[2.0, 4.0]));
}

#[test]
fn random_product_matches_triple_loop() {
    let mut init = Init::new(2);
    let (a, b) = (init.normal(&[5, 7], 1.0), init.normal(&[7, 3], 1.0));
    let c = matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..7 {
                s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            }
            assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_product_is_dimension_error() {
    let e = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    assert_eq!(e.kind(), "dimension");
}

#[test]
fn softmax_examples() {
    let u = eval1(&t(&[3], &[0.0, 0.0, 0.0]), |tp, v| tp.softmax_last(v));
    assert!(u.data().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    let big = eval1(&t(&[2], &[1000.0, 1000.0]), |tp, v| tp.softmax_last(v));
    assert_eq!(big.data(), &[0.5, 0.5]);
    let l = eval1(&t(&[2], &[0.0, 2f64.ln()]), |tp, v| tp.softmax_last(v));
    assert!((l.data()[0] - 1.0 / 3.0).abs() < 1e-15 && (l.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_of_empty_axis_is_dimension_error() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[2, 0]));
    assert_eq!(tape.softmax_last(v).unwrap_err().kind(), "dimension");
}

fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> depthfusion_core::Result<Tensor> {
    let mut tape = Tape::new();
    let c = x.last_dim();
    let xv = tape.constant(x.clone());
    let g = tape.constant(t(&[c], gain));
    let b = tape.constant(t(&[c], bias));
    let y = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(y).clone())
}

#[test]
fn layer_norm_examples() {
    let z = layer_norm(&t(&[1, 3], &[4.0, 4.0, 4.0]), &[1.0; 3], &[0.0; 3]).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let y = layer_norm(&t(&[2], &[1.0, 3.0]), &[1.0; 2], &[0.0; 2]).unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] + s).abs() < 1e-15 && (y.data()[1] - s).abs() < 1e-15);
    assert!((y.data()[1] - 1.0).abs() < 1e-5);
    let x = Init::new(3).normal(&[4, 5], 2.0);
    let b = [0.1, -0.2, 0.3, 0.0, 7.0];
    let c = layer_norm(&x, &[0.0; 5], &b).unwrap();
    for r in 0..4 {
        assert_eq!(c.row(r), &b);
    }
}

#[test]
fn layer_norm_needs_two_channels() {
    assert_eq!(layer_norm(&t(&[3, 1], &[1.0, 2.0, 3.0]), &[1.0], &[0.0]).unwrap_err().kind(), "dimension");
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> depthfusion_core::Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, Some(bv))?;
    Ok(tape.value(y).clone())
}

#[test]
fn linear_examples() {
    let mut init = Init::new(4);
    let x = init.normal(&[3, 4], 1.0);
    assert_eq!(linear(&x, &Tensor::eye(4), &Tensor::zeros(&[4])).unwrap(), x);
    let (w, b) = (init.normal(&[4, 2], 1.0), init.normal(&[2], 1.0));
    let y0 = linear(&Tensor::zeros(&[3, 4]), &w, &b).unwrap();
    for r in 0..3 {
        assert_eq!(y0.row(r), b.data());
    }
    let y = linear(&x, &w, &b).unwrap();
    let mm = matmul(&x, &w).unwrap();
    for r in 0..3 {
        for c in 0..2 {
            assert!((y.data()[r * 2 + c] - (mm.data()[r * 2 + c] + b.data()[c])).abs() < 1e-12);
        }
    }
    assert_eq!(linear(&x, &Tensor::zeros(&[3, 2]), &b).unwrap_err().kind(), "dimension");
}

#[test]
fn linear_applies_per_position_on_higher_rank() {
    let mut init = Init::new(5);
    let x = init.normal(&[2, 3, 4], 1.0);
    let (w, b) = (init.normal(&[4, 5], 1.0), init.normal(&[5], 1.0));
    let y = linear(&x, &w, &b).unwrap();
    assert_eq!(y.shape(), &[2, 3, 5]);
    let flat = linear(&x.reshape(&[6, 4]).unwrap(), &w, &b).unwrap();
    assert_eq!(y.data(), flat.data());
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Init::new(6).normal(&[3, 4], 1.0);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().iter().all(|&d| d == 1.0));
    assert_eq!(g.get(s).unwrap(), &[1.0]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let x = Init::new(7).normal(&[5], 1.0);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(v).unwrap(), x.data());
}

#[test]
fn backward_of_non_scalar_is_usage_error() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::ones(&[2]));
    assert_eq!(tape.backward(v).unwrap_err().kind(), "usage");
}

#[test]
fn backward_skips_constants() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let v = tape.param(Tensor::ones(&[2]));
    let p = tape.mul(c, v).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(v).unwrap(), &[1.0, 1.0]);
}

#[test]
fn finite_differences_of_sum_are_ones() {
    let x = Init::new(8).normal(&[2, 3], 1.0);
    let g = finite_diff_grad(|x| Ok(x.sum()), &x, DEFAULT_STEP).unwrap();
    assert!(g.data().iter().all(|d| (d - 1.0).abs() < 1e-9));
}

#[test]
fn dgf_mse_backward_agrees_with_finite_differences() {
    use depthfusion_core::dgf::{DgfBlock, DgfConfig, EmbedMode, PositionalEncoding2D};
    use depthfusion_core::nn::ParamStore;
    let grid = GridSpec::centered(3, 3, 1.0).unwrap();
    let mut store = ParamStore::new();
    let mut init = Init::new(9);
    let block = DgfBlock::new(&mut store, &mut init, "dgf", DgfConfig::new(4, 2, EmbedMode::Multiply)).unwrap();
    let p = PositionalEncoding2D::new(&grid, 4).unwrap().tokens();
    let d = sinusoidal_encode(&DepthMatrix::build(&grid), 4, DEFAULT_FREQUENCY_BASE).unwrap().tokens();
    let i = init.normal(&[9, 4], 1.0);
    let target = init.normal(&[9, 4], 1.0);
    let v = init.normal(&[9, 4], 1.0);
    let mse = |tape: &mut Tape, vv| {
        let bound = store.bind_constants(tape);
        let iv = tape.constant(i.clone());
        let pv = tape.constant(p.clone());
        let dv = tape.constant(d.clone());
        let tv = tape.constant(target.clone());
        let out = block.forward(tape, &bound, vv, iv, pv, Some(dv)).unwrap();
        let diff = tape.sub(out, tv).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        tape.mean(sq).unwrap()
    };
    let mut tape = Tape::new();
    let vv = tape.param(v.clone());
    let loss = mse(&mut tape, vv);
    let analytic = tape.backward(loss).unwrap().get(vv).unwrap().to_vec();
    let numeric = finite_diff_grad(
        |x| {
            let mut tape = Tape::new();
            let vv = tape.constant(x.clone());
            let l = mse(&mut tape, vv);
            Ok(tape.value(l).data()[0])
        },
        &v,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(max_relative_error(&analytic, numeric.data()) < 1e-4);
}

#[test]
fn full_size_grid_corner_depth() {
    let m = DepthMatrix::build(&GridSpec::paper());
    let want = 0.6 * (90.0f64 * 90.0 * 2.0).sqrt();
    assert!((m.get(0, 0).unwrap() - want).abs() < 1e-12);
    assert!((want - 76.368).abs() < 1e-3);
}

#[test]
fn full_lookup_equals_matrix_bitwise() {
    let grid = GridSpec::centered(17, 12, 0.6).unwrap();
    let m = DepthMatrix::build(&grid);
    let cells: Vec<(usize, usize)> = (0..grid.cells()).map(|k| grid.coords(k)).collect();
    let got = m.lookup(&cells).unwrap();
    assert_eq!(got.len(), m.values().len());
    for (a, b) in got.iter().zip(m.values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn random_lookups_match_direct_distance() {
    use rand::{Rng, SeedableRng};
    let grid = GridSpec::paper();
    let m = DepthMatrix::build(&grid);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let cells: Vec<(usize, usize)> = (0..50).map(|_| (rng.random_range(0..180), rng.random_range(0..180))).collect();
    let got = m.lookup(&cells).unwrap();
    for (&(x, y), d) in cells.iter().zip(got) {
        let dx = x as f64 - 90.0;
        let dy = y as f64 - 90.0;
        assert!((d - 0.6 * (dx * dx + dy * dy).sqrt()).abs() < 1e-12);
    }
}

#[test]
fn depth_matrix_is_symmetric_about_centred_ego() {
    let grid = GridSpec::centered(9, 9, 0.5).unwrap();
    let m = DepthMatrix::build(&grid);
    for x in 0..9 {
        for y in 0..9 {
            let d = m.get(x, y).unwrap();
            assert_eq!(d, m.get(8 - x, y).unwrap());
            assert_eq!(d, m.get(x, 8 - y).unwrap());
            assert_eq!(d, m.get(y, x).unwrap());
        }
    }
}

#[test]
fn sinusoid_channels_follow_geometric_schedule() {
    let c = 8;
    let mut out = vec![0.0; c];
    encode_scalar(12.5, c, DEFAULT_FREQUENCY_BASE, &mut out);
    for i in 0..c / 2 {
        let w = 12.5 / DEFAULT_FREQUENCY_BASE.powf(2.0 * i as f64 / c as f64);
        assert!((out[2 * i] - w.sin()).abs() < 1e-12);
        assert!((out[2 * i + 1] - w.cos()).abs() < 1e-12);
    }
}

#[test]
fn equal_depths_encode_identically() {
    let grid = GridSpec::centered(7, 7, 1.0).unwrap();
    let enc = sinusoidal_encode(&DepthMatrix::build(&grid), 6, DEFAULT_FREQUENCY_BASE).unwrap().tokens();
    // Cells (1, 3) and (3, 1) are both two cells from the ego cell (3, 3).
    assert_eq!(enc.row(grid.index(1, 3)), enc.row(grid.index(3, 1)));
    let ego = enc.row(grid.index(3, 3));
    assert_eq!(ego, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn encoding_is_injective_over_full_size_grid_depths() {
    let m = DepthMatrix::build(&GridSpec::paper());
    let mut depths: Vec<f64> = m.values().to_vec();
    depths.sort_by(f64::total_cmp);
    depths.dedup();
    let c = 128;
    let mut codes: Vec<Vec<f64>> = depths
        .iter()
        .map(|&d| {
            let mut out = vec![0.0; c];
            encode_scalar(d, c, DEFAULT_FREQUENCY_BASE, &mut out);
            out
        })
        .collect();
    // Lowest frequency is slower than one radian over the whole grid, so its sine alone
    // separates depths; confirm by checking full codes are pairwise distinct after sorting.
    codes.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    for w in codes.windows(2) {
        assert_ne!(w[0], w[1]);
    }
    assert_eq!(codes.len(), depths.len());
}

#[test]
fn instance_depth_examples() {
    let grid = GridSpec::paper();
    let m = DepthMatrix::build(&grid);
    let at = |x: f64, y: f64| Box3D::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.3, 1.0, 0).unwrap();
    assert_eq!(instance_depth(&m, &at(0.0, 0.0)).unwrap(), 0.0);
    assert_eq!(instance_depth(&m, &at(0.1, -0.2)).unwrap(), 0.0);
    let d = instance_depth(&m, &at(30.0, 0.0)).unwrap();
    assert!((d - 30.0).abs() <= 0.6);
    assert_eq!(instance_depth(&m, &at(30.1, 0.1)).unwrap(), d);
    assert_eq!(instance_depth(&m, &at(80.0, 0.0)).unwrap_err().kind(), "bounds");
}
