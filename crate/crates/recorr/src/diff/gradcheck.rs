//! Central finite-difference audit of the tape's analytic gradients.
//!
//! The harness rebuilds the forward pass from scratch for every probe,
//! so it checks the recorded graph against nothing but the arithmetic
//! itself. Double precision with h = 1e-4 keeps truncation and roundoff
//! both far below the 1e-4 acceptance threshold.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::vol::Volume;

use super::params::ParamStore;
use super::{NodeId, Tape};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

/// Builds a scalar loss from pre-registered input nodes. Must be a pure
/// function of (store, inputs) so perturbed re-evaluations are valid.
pub type BuildFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[NodeId]) -> Result<NodeId> + 'a;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    /// Worst relative error over all probed entries.
    pub max_rel: f64,
    pub probes: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel < REL_TOL
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

fn forward_loss(
    store: &ParamStore<f64>,
    inputs: &[Volume<f64>],
    build: &BuildFn,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let loss = build(&mut tape, store, &ids)?;
    tape.scalar_value(loss)
}

/// Checks analytic gradients of every parameter entry and every input
/// volume against central differences, probing up to `samples` entries
/// of each tensor.
pub fn fd_check(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Volume<f64>],
    build: &BuildFn,
    samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Analytic pass.
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let loss = build(&mut tape, &work, &ids)?;
    let adjoints = tape.backward(loss, &mut work)?;

    let mut max_rel = 0.0f64;
    let mut probes = 0usize;

    // Parameter entries.
    let names: Vec<String> = work.names().map(|s| s.to_string()).collect();
    for pname in &names {
        let len = work.get(pname)?.values.len();
        let picks = sample_indices(&mut rng, len, samples);
        for idx in picks {
            let analytic = work.get(pname)?.grad[idx];
            let mut plus = store.clone();
            plus.get_mut(pname)?.values[idx] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(pname)?.values[idx] -= FD_STEP;
            let fd = (forward_loss(&plus, inputs, build)? - forward_loss(&minus, inputs, build)?)
                / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic, fd));
            probes += 1;
        }
    }

    // Input entries.
    for (which, input) in inputs.iter().enumerate() {
        let adj = adjoints.get(ids[which]);
        let picks = sample_indices(&mut rng, input.data.len(), samples);
        for idx in picks {
            let analytic = adj.map(|a| a.data[idx]).unwrap_or(0.0);
            let mut mod_inputs: Vec<Volume<f64>> = inputs.to_vec();
            mod_inputs[which].data[idx] += FD_STEP;
            let f_plus = forward_loss(store, &mod_inputs, build)?;
            mod_inputs[which].data[idx] -= 2.0 * FD_STEP;
            let f_minus = forward_loss(store, &mod_inputs, build)?;
            let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic, fd));
            probes += 1;
        }
    }

    Ok(CheckReport {
        name: name.to_string(),
        max_rel,
        probes,
    })
}

fn sample_indices<R: Rng>(rng: &mut R, len: usize, samples: usize) -> Vec<usize> {
    if len <= samples {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, samples).into_vec()
    }
}

/// Random volume with entries in (-1, 1), kept away from activation and
/// interpolation kinks (no entry within 1e-2 of 0).
pub fn smooth_random_volume(channels: usize, dims: [usize; 3], seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Volume::zeros(channels, dims);
    for e in v.data.iter_mut() {
        let mut x: f64 = rng.gen_range(-1.0..1.0);
        if x.abs() < 1e-2 {
            x += if x >= 0.0 { 2e-2 } else { -2e-2 };
        }
        *e = x;
    }
    v
}

/// Random 3-channel field whose coordinates stay clear of the integer
/// lattice, so finite differences never straddle an interpolation kink.
pub fn off_lattice_field(dims: [usize; 3], max_mag: f64, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Volume::zeros(3, dims);
    for e in v.data.iter_mut() {
        // Fractional parts land in [0.2, 0.8].
        let whole = rng.gen_range(-max_mag..max_mag).trunc();
        *e = whole + rng.gen_range(0.2..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    v
}

/// Per-op audit covering the whole differentiable op set on small random
/// shapes. Returns one report per op family.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    use super::kernels::ConvShape;
    let mut out = Vec::new();
    let dims = [4, 4, 4];

    // conv3d stride 1 with bias, then through a nonlinearity into mse.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.init_conv(
            "w",
            ConvShape {
                c_out: 3,
                c_in: 2,
                k: [3, 3, 3],
            },
            true,
            &mut rng,
        )?;
        let inputs = vec![
            smooth_random_volume(2, dims, seed + 1),
            smooth_random_volume(3, dims, seed + 2),
        ];
        out.push(fd_check(
            "conv3d_s1",
            &store,
            &inputs,
            &|t, s, ids| {
                let c = t.conv3d(s, ids[0], "w", Some("w.b"), 1)?;
                let a = t.tanh(c);
                t.mse(a, ids[1])
            },
            12,
            seed + 3,
        )?);
    }

    // conv3d stride 2.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        store.init_conv(
            "w",
            ConvShape {
                c_out: 2,
                c_in: 2,
                k: [3, 3, 3],
            },
            true,
            &mut rng,
        )?;
        let inputs = vec![
            smooth_random_volume(2, [4, 6, 4], seed + 11),
            smooth_random_volume(2, [2, 3, 2], seed + 12),
        ];
        out.push(fd_check(
            "conv3d_s2",
            &store,
            &inputs,
            &|t, s, ids| {
                let c = t.conv3d(s, ids[0], "w", Some("w.b"), 2)?;
                t.mse(c, ids[1])
            },
            12,
            seed + 13,
        )?);
    }

    // Separable 1x1x5 / 1x5x1 / 5x1x1 chain.
    {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
        for (name, k) in [("wx", [1, 1, 5]), ("wy", [1, 5, 1]), ("wz", [5, 1, 1])] {
            store.init_conv(
                name,
                ConvShape {
                    c_out: 2,
                    c_in: 2,
                    k,
                },
                true,
                &mut rng,
            )?;
        }
        let inputs = vec![
            smooth_random_volume(2, dims, seed + 21),
            smooth_random_volume(2, dims, seed + 22),
        ];
        out.push(fd_check(
            "separable_conv_chain",
            &store,
            &inputs,
            &|t, s, ids| {
                let a = t.conv3d(s, ids[0], "wx", Some("wx.b"), 1)?;
                let a = t.conv3d(s, a, "wy", Some("wy.b"), 1)?;
                let a = t.conv3d(s, a, "wz", Some("wz.b"), 1)?;
                t.mse(a, ids[1])
            },
            10,
            seed + 23,
        )?);
    }

    // Pointwise activations and arithmetic.
    {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(2, dims, seed + 30),
            smooth_random_volume(2, dims, seed + 31),
            smooth_random_volume(2, dims, seed + 32),
        ];
        out.push(fd_check(
            "pointwise_ops",
            &store,
            &inputs,
            &|t, _, ids| {
                let lr = t.leaky_relu(ids[0], 0.2);
                let sg = t.sigmoid(ids[1]);
                let th = t.tanh(ids[2]);
                let m = t.mul(lr, sg)?;
                let s = t.sub(m, th)?;
                let a = t.affine(s, 1.7, -0.3);
                let sum = t.add(a, m)?;
                Ok(t.sum_all_squared(sum))
            },
            14,
            seed + 33,
        )?);
    }

    // Concat + slice round trip feeding two different losses.
    {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(2, dims, seed + 40),
            smooth_random_volume(3, dims, seed + 41),
            smooth_random_volume(4, dims, seed + 42),
        ];
        out.push(fd_check(
            "concat_slice",
            &store,
            &inputs,
            &|t, _, ids| {
                let cat = t.concat(&[ids[0], ids[1]])?;
                let left = t.slice_channels(cat, 0, 2)?;
                let right = t.slice_channels(cat, 2, 3)?;
                let l1 = t.sum_all_squared(left);
                let l2 = t.sum_all_squared(right);
                let both = t.add(l1, l2)?;
                let l3 = t.sum_all_squared(ids[2]);
                t.add(both, l3)
            },
            14,
            seed + 43,
        )?);
    }

    // Trilinear upsampling.
    {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(2, [3, 4, 3], seed + 50),
            smooth_random_volume(2, [6, 8, 6], seed + 51),
        ];
        out.push(fd_check(
            "upsample2",
            &store,
            &inputs,
            &|t, _, ids| {
                let up = t.upsample2(ids[0]);
                t.mse(up, ids[1])
            },
            16,
            seed + 52,
        )?);
    }

    // Warp w.r.t. image and field.
    {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(2, [5, 5, 5], seed + 60),
            off_lattice_field([5, 5, 5], 1.4, seed + 61),
            smooth_random_volume(2, [5, 5, 5], seed + 62),
        ];
        out.push(fd_check(
            "warp",
            &store,
            &inputs,
            &|t, _, ids| {
                let w = t.warp(ids[0], ids[1])?;
                t.mse(w, ids[2])
            },
            16,
            seed + 63,
        )?);
    }

    // Correlation w.r.t. both feature maps, r in {1, 3}.
    for (r, tag) in [(1usize, "correlation_r1"), (3, "correlation_r3")] {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(3, dims, seed + 70 + r as u64),
            smooth_random_volume(3, dims, seed + 80 + r as u64),
            smooth_random_volume(r * r * r, dims, seed + 90 + r as u64),
        ];
        out.push(fd_check(
            tag,
            &store,
            &inputs,
            &move |t, _, ids| {
                let c = t.correlation(ids[0], ids[1], r)?;
                t.mse(c, ids[2])
            },
            12,
            seed + 95,
        )?);
    }

    // NCC loss at two window sizes (heavy clipping at 9 on a 6-cube).
    for (win, tag) in [(5usize, "ncc_w5"), (9, "ncc_w9")] {
        let store = ParamStore::<f64>::new();
        let inputs = vec![
            smooth_random_volume(1, [6, 6, 6], seed + 100 + win as u64),
            smooth_random_volume(1, [6, 6, 6], seed + 110 + win as u64),
        ];
        out.push(fd_check(
            tag,
            &store,
            &inputs,
            &move |t, _, ids| t.ncc_loss(ids[0], ids[1], win, 1e-5),
            18,
            seed + 115,
        )?);
    }

    // Displacement-gradient penalty.
    {
        let store = ParamStore::<f64>::new();
        let inputs = vec![smooth_random_volume(3, [4, 5, 4], seed + 120)];
        out.push(fd_check(
            "grad_l2",
            &store,
            &inputs,
            &|t, _, ids| t.grad_l2(ids[0]),
            20,
            seed + 121,
        )?);
    }

    // Soft Dice on values in (0, 1).
    {
        let store = ParamStore::<f64>::new();
        let mut a = smooth_random_volume(3, dims, seed + 130);
        let mut b = smooth_random_volume(3, dims, seed + 131);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = 0.5 + 0.45 * *v;
        }
        let inputs = vec![a, b];
        out.push(fd_check(
            "dice_loss",
            &store,
            &inputs,
            &|t, _, ids| t.dice_loss(ids[0], ids[1], 1.0),
            16,
            seed + 132,
        )?);
    }

    // MSE itself plus parameter leaves.
    {
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "p",
            vec![6],
            (0..6).map(|i| 0.3 * i as f64 - 0.8).collect(),
        )?;
        let inputs = vec![smooth_random_volume(1, [1, 1, 6], seed + 140)];
        out.push(fd_check(
            "param_leaf_mse",
            &store,
            &inputs,
            &|t, s, ids| {
                let p = t.param(s, "p")?;
                t.mse(p, ids[0])
            },
            6,
            seed + 141,
        )?);
    }

    Ok(out)
}

impl<T: crate::vol::Scalar> Tape<T> {
    /// Sum of squares, a handy scalar reduction for audits; gradient is
    /// exercised through `mul` + `sum_all`.
    pub fn sum_all_squared(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x).expect("same node is shape-compatible");
        self.sum_all(sq)
    }
}
