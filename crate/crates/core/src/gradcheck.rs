//! Central finite differences, the reference route for gradient audits.

use alloc::string::String;
use alloc::vec::Vec;

use crate::depth::{encode_depths, GridSpec, DEFAULT_FREQUENCY_BASE};
use crate::dgf::{encode_positions, DgfBlock, DgfConfig, EmbedMode, PositionalEncoding2D};
use crate::dlf::{DlfBlock, DlfConfig};
use crate::error::{bail, Result};
use crate::math;
use crate::nn::{Bound, Init, ParamStore};
use crate::tape::{AttentionScope, RowEntry, Tape, Var, NO_TARGET};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Elementwise `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        bail!(Usage, "finite difference step must be positive, got {h}");
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            bail!(Numeric, "objective is non-finite near flat index {i}");
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// `max_i |a_i − b_i| / max(1, |a_i|, |b_i|)`: relative error with an absolute floor
/// so near-zero components are not judged by noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / 1f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}


/// Relative-error bound used by [`audit`].
pub const AUDIT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub name: String,
    pub max_relative_error: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error < AUDIT_TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + 'a;

/// Reduces a non-scalar output with fixed, uneven weights so every element
/// contributes a distinct amount to the objective.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |j| 1.0 + 0.5 * math::sin(1.7 * j as f64 + 0.3))?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn objective(store: &ParamStore, inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &bound, &vars)?;
    let loss = project(&mut tape, out)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares tape gradients with central differences for every input and
/// every parameter in `store`.
pub fn check_case(name: &str, store: &ParamStore, inputs: &[Tensor], build: &Build) -> Result<AuditEntry> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &bound, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let analytic = |v: Var, n: usize| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; n]);

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (idx, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut moved = inputs.to_vec();
                moved[idx] = probe.clone();
                objective(store, &moved, build)
            },
            x,
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic(vars[idx], x.numel()), numeric.data()));
        checked += x.numel();
    }
    for (pi, id) in store.ids().enumerate() {
        let x = store.get(id);
        let numeric = finite_diff_grad(
            |probe| {
                let mut moved = store.clone();
                moved.set(id, probe.clone())?;
                objective(&moved, inputs, build)
            },
            x,
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic(bound.vars()[pi], x.numel()), numeric.data()));
        checked += x.numel();
    }
    Ok(AuditEntry {
        name: String::from(name),
        max_relative_error: worst,
        checked,
    })
}

/// Gradient audit of every differentiable tape op plus the composed global and
/// local fusion blocks, with inputs drawn from `seed`.
pub fn audit(seed: u64) -> Result<Vec<AuditEntry>> {
    let mut init = Init::new(seed);
    let mut r = |shape: &[usize]| init.normal(shape, 1.0);
    let none = ParamStore::new();
    let mut out = Vec::new();

    out.push(check_case("matmul", &none, &[r(&[3, 4]), r(&[4, 5])], &|t, _, v| t.matmul(v[0], v[1]))?);
    out.push(check_case("linear", &none, &[r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], &|t, _, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?);
    out.push(check_case("add", &none, &[r(&[3, 4]), r(&[3, 4])], &|t, _, v| t.add(v[0], v[1]))?);
    out.push(check_case("sub", &none, &[r(&[3, 4]), r(&[3, 4])], &|t, _, v| t.sub(v[0], v[1]))?);
    out.push(check_case("mul", &none, &[r(&[3, 4]), r(&[3, 4])], &|t, _, v| t.mul(v[0], v[1]))?);
    out.push(check_case("scale", &none, &[r(&[3, 4])], &|t, _, v| t.scale(v[0], -1.7))?);
    out.push(check_case("gelu", &none, &[r(&[4, 4])], &|t, _, v| t.gelu(v[0]))?);
    out.push(check_case("reshape", &none, &[r(&[3, 4])], &|t, _, v| t.reshape(v[0], &[2, 6]))?);
    out.push(check_case("concat_last", &none, &[r(&[3, 2]), r(&[3, 5])], &|t, _, v| {
        t.concat_last(v[0], v[1])
    })?);
    out.push(check_case("slice_last", &none, &[r(&[3, 6])], &|t, _, v| t.slice_last(v[0], 2, 3))?);
    out.push(check_case("softmax_last", &none, &[r(&[3, 5])], &|t, _, v| t.softmax_last(v[0]))?);
    out.push(check_case("layer_norm", &none, &[r(&[4, 6]), r(&[6]), r(&[6])], &|t, _, v| {
        t.layer_norm(v[0], v[1], v[2])
    })?);
    out.push(check_case("sum", &none, &[r(&[3, 4])], &|t, _, v| t.sum(v[0]))?);
    out.push(check_case("mean", &none, &[r(&[3, 4])], &|t, _, v| t.mean(v[0]))?);
    let entries = alloc::vec![
        RowEntry::new(0, 2, 0.5),
        RowEntry::new(3, 0, 1.0),
        RowEntry::new(3, 1, -0.25),
        RowEntry::new(1, 2, 2.0),
    ];
    out.push(check_case("scatter_rows", &none, &[r(&[3, 4])], &|t, _, v| {
        t.scatter_rows(None, v[0], entries.clone(), 5)
    })?);
    out.push(check_case("scatter_rows_base", &none, &[r(&[5, 4]), r(&[3, 4])], &|t, _, v| {
        t.scatter_rows(Some(v[0]), v[1], entries.clone(), 5)
    })?);
    let targets = alloc::vec![0, 2, NO_TARGET, 1, 1, 3, 4, NO_TARGET, 0, 4, 2, 3];
    out.push(check_case("splat", &none, &[r(&[4, 3]), r(&[4, 3])], &|t, _, v| {
        let p = t.softmax_last(v[1])?;
        t.splat(v[0], p, targets.clone(), 5)
    })?);
    let groups = alloc::vec![alloc::vec![0, 2], alloc::vec![], alloc::vec![1, 3, 4], alloc::vec![4]];
    out.push(check_case("segment_max", &none, &[r(&[5, 3]), r(&[3])], &|t, _, v| {
        t.segment_max(v[0], &groups, Some(v[1]))
    })?);
    out.push(check_case("select_rows", &none, &[r(&[4, 3]), r(&[3])], &|t, _, v| {
        t.select_rows(v[0], alloc::vec![false, true, false, true], v[1])
    })?);
    out.push(check_case("attention_full", &none, &[r(&[5, 4]), r(&[6, 4]), r(&[6, 4])], &|t, _, v| {
        t.attention(v[0], v[1], v[2], 2, AttentionScope::Full)
    })?);
    out.push(check_case("attention_diagonal", &none, &[r(&[5, 4]), r(&[5, 4]), r(&[5, 4])], &|t, _, v| {
        t.attention(v[0], v[1], v[2], 2, AttentionScope::Diagonal)
    })?);
    let cls_t: Vec<f64> = (0..12).map(|j| if j % 5 == 0 { 1.0 } else { 0.0 }).collect();
    out.push(check_case("focal_loss", &none, &[r(&[4, 3])], &|t, _, v| {
        t.focal_loss(v[0], cls_t.clone(), 0.25, 2.0, 2.0)
    })?);
    let reg_t: Vec<f64> = (0..12).map(|j| math::sin(j as f64)).collect();
    let mask: Vec<bool> = (0..4).map(|j| j != 2).collect();
    out.push(check_case("smooth_l1", &none, &[r(&[4, 3])], &|t, _, v| {
        t.smooth_l1(v[0], reg_t.clone(), mask.clone(), 1.0, 3.0)
    })?);

    out.push(audit_dgf(seed)?);
    for scope in [AttentionScope::Diagonal, AttentionScope::Full] {
        out.push(audit_dlf(seed, scope)?);
    }
    Ok(out)
}

/// Perturbs every parameter so no layer sits at its identity initialisation.
fn jitter(store: &mut ParamStore, init: &mut Init) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id);
        let noise = init.normal(t.shape(), 0.3);
        let moved = Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
        store.set(id, moved)?;
    }
    Ok(())
}

fn audit_dgf(seed: u64) -> Result<AuditEntry> {
    let grid = GridSpec::centered(4, 4, 1.5)?;
    let c = 8;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed ^ 0xd6f);
    let block = DgfBlock::new(&mut store, &mut init, "dgf", DgfConfig::new(c, 2, EmbedMode::Multiply))?;
    jitter(&mut store, &mut init)?;
    let n = grid.cells();
    let pos = PositionalEncoding2D::new(&grid, c)?.tokens();
    let depths: Vec<f64> = (0..n).map(|j| {
        let (x, y) = grid.coords(j);
        let (px, py) = grid.cell_center(x, y);
        math::hypot(px, py)
    }).collect();
    let depth = encode_depths(&depths, c, DEFAULT_FREQUENCY_BASE)?;
    let inputs = [init.normal(&[n, c], 1.0), init.normal(&[n, c], 1.0)];
    check_case("dgf_block", &store, &inputs, &|t, b, v| {
        let p = t.constant(pos.clone());
        let d = t.constant(depth.clone());
        block.forward(t, b, v[0], v[1], p, Some(d))
    })
}

fn audit_dlf(seed: u64, scope: AttentionScope) -> Result<AuditEntry> {
    let c = 8;
    let inst = 5;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed ^ 0xd1f);
    let mut cfg = DlfConfig::new(c, 2, EmbedMode::Multiply);
    cfg.scope = scope;
    let block = DlfBlock::new(&mut store, &mut init, "dlf", cfg)?;
    jitter(&mut store, &mut init)?;
    let centers: Vec<(f64, f64)> = (0..inst).map(|j| (1.5 * j as f64, 4.0 - j as f64)).collect();
    let depths: Vec<f64> = (0..inst).map(|j| 3.0 + 7.0 * j as f64).collect();
    let pos = encode_positions(&centers, c)?;
    let depth = encode_depths(&depths, c, DEFAULT_FREQUENCY_BASE)?;
    let inputs = [
        init.normal(&[inst, c], 1.0),
        init.normal(&[inst, c], 1.0),
        init.normal(&[inst, c], 1.0),
    ];
    let name = match scope {
        AttentionScope::Diagonal => "dlf_block_per_instance",
        AttentionScope::Full => "dlf_block_cross_instance",
    };
    check_case(name, &store, &inputs, &|t, b, v| {
        let p = t.constant(pos.clone());
        let d = t.constant(depth.clone());
        block.forward(t, b, v[0], v[1], v[2], p, Some(d))
    })
}
