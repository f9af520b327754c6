//! Finite-difference gradient checks over every differentiable operation,
//! attention kernel, block and the full network loss.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    linear_attention, reduced_self_attention, softmax_attention, AttentionParams,
};
use crate::blocks::*;
use crate::error::Result;
use crate::gradcheck::{check_with_step, uniform, GradCheckReport};
use crate::loss::combined_loss;
use crate::network::{Net, NetConfig, Toggles};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tape::{Padding, PoolKind, Tape, Var};
use crate::tensor::{LabelMap, Tensor};

/// Fewest compared (non-negligible) elements a case should reach.
pub const MIN_CHECKED: usize = 20;

type Build = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

/// One gradient check: double-precision inputs and the function of them.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
}

fn case(
    name: &str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        inputs: inputs.iter().map(Tensor::cast).collect(),
        build: Box::new(build),
    }
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -2.0, 2.0, rng)
}

/// Parameters of a block built by `init`, redrawn away from the small init
/// scale, followed by `extra` inputs.
fn block_case<P: 'static>(
    name: &str,
    seed: u64,
    init: impl FnOnce(&mut ParamBuilder<'_>) -> Result<P>,
    extra: Vec<Tensor>,
    run: impl Fn(&mut Tape<'_, f64>, &Bound, &P, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init(&mut ParamBuilder::new(&mut store, &mut rng))?;
    let mut inputs = Vec::new();
    for (name, t) in store.iter() {
        inputs.push(if name.ends_with("gamma") {
            uniform(t.shape(), 0.6, 1.4, &mut rng)
        } else {
            uniform(t.shape(), -0.6, 0.6, &mut rng)
        });
    }
    let n = inputs.len();
    inputs.extend(extra);
    Ok(case(name, inputs, move |tape, v| {
        run(tape, &Bound::from_vars(v[..n].to_vec()), &params, &v[n..])
    }))
}

/// Every case, with inputs drawn from `seed`.
pub fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let hw = (4, 4);
    let mut out = vec![
        case(
            "matmul",
            vec![rand(&[5, 4], r), rand(&[4, 3], r)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case("add", vec![rand(&[4, 5], r), rand(&[4, 5], r)], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub", vec![rand(&[4, 5], r), rand(&[4, 5], r)], |t, v| {
            t.sub(v[0], v[1])
        }),
        case("mul", vec![rand(&[4, 5], r), rand(&[4, 5], r)], |t, v| {
            t.mul(v[0], v[1])
        }),
        case(
            "div",
            vec![rand(&[4, 5], r), uniform(&[4, 5], 0.5, 2.0, r)],
            |t, v| t.div(v[0], v[1]),
        ),
        case("scale", vec![rand(&[4, 5], r)], |t, v| {
            Ok(t.scale(v[0], -1.7))
        }),
        case("add_scalar", vec![rand(&[4, 5], r)], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            t.mul(y, v[0])
        }),
        case("add_row", vec![rand(&[4, 5], r), rand(&[5], r)], |t, v| {
            t.add_row(v[0], v[1])
        }),
        case("mul_row", vec![rand(&[4, 5], r), rand(&[5], r)], |t, v| {
            t.mul_row(v[0], v[1])
        }),
        case(
            "add_col",
            vec![rand(&[3, 2, 2], r), rand(&[3], r)],
            |t, v| t.add_col(v[0], v[1]),
        ),
        case(
            "mul_col",
            vec![rand(&[3, 2, 2], r), rand(&[3], r)],
            |t, v| t.mul_col(v[0], v[1]),
        ),
        case("silu", vec![rand(&[6, 5], r)], |t, v| Ok(t.silu(v[0]))),
        case("gelu", vec![rand(&[6, 5], r)], |t, v| Ok(t.gelu(v[0]))),
        case(
            "sigmoid",
            vec![rand(&[6, 5], r)],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        case("relu", vec![rand(&[6, 5], r)], |t, v| Ok(t.relu(v[0]))),
        case(
            "softmax",
            vec![rand(&[5, 6], r)],
            |t, v| Ok(t.softmax(v[0])),
        ),
        case(
            "layer_norm",
            vec![rand(&[5, 6], r), rand(&[6], r), rand(&[6], r)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "conv2d",
            vec![rand(&[2, 5, 5], r), rand(&[3, 2, 3, 3], r)],
            |t, v| t.conv2d(v[0], v[1], 1, Padding::Same),
        ),
        case(
            "conv2d_stride2",
            vec![rand(&[2, 6, 6], r), rand(&[3, 2, 2, 2], r)],
            |t, v| t.conv2d(v[0], v[1], 2, Padding::Same),
        ),
        case(
            "depthwise_conv2d",
            vec![rand(&[3, 5, 5], r), rand(&[3, 3, 3], r)],
            |t, v| t.depthwise_conv2d(v[0], v[1]),
        ),
        case("global_avg_pool", vec![rand(&[6, 3, 3], r)], |t, v| {
            t.global_pool(v[0], PoolKind::Avg)
        }),
        case("global_max_pool", vec![rand(&[24, 2, 2], r)], |t, v| {
            t.global_pool(v[0], PoolKind::Max)
        }),
        case("reshape_permute", vec![rand(&[2, 3, 4], r)], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            let y = t.reshape(y, &[4, 6])?;
            let w = t.mul(y, y)?;
            t.add(w, y)
        }),
        case(
            "concat_split",
            vec![rand(&[3, 4], r), rand(&[2, 4], r)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                let c2 = t.mul(c, c)?;
                let parts = t.split(c2, 1, &[1, 3])?;
                let a = t.sum_rows(parts[1])?;
                let b = t.scale(parts[0], 2.0);
                let a = t.reshape(a, &[3, 1])?;
                t.concat(&[a, b], 0)
            },
        ),
        case("sum_mean", vec![rand(&[4, 5], r)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            let m = t.mean(v[0]);
            t.concat(&[s, m], 0)
        }),
    ];

    let tokens = |n: usize, c: usize, r: &mut ChaCha8Rng| rand(&[n, c], r);
    out.push(block_case(
        "linear_attention",
        seed,
        |b| Ok(AttentionParams::init(b, 6, 3)),
        vec![tokens(16, 6, r)],
        |t, p, a, x| linear_attention(t, p, x[0], a),
    )?);
    out.push(block_case(
        "softmax_attention",
        seed,
        |b| Ok(AttentionParams::init(b, 6, 3)),
        vec![tokens(16, 6, r)],
        |t, p, a, x| Ok(softmax_attention(t, p, x[0], a)?.out),
    )?);
    out.push(block_case(
        "reduced_self_attention",
        seed,
        |b| Ok(AttentionParams::init_reduced(b, 6, 3, 2)),
        vec![rand(&[6, 4, 4], r)],
        |t, p, a, x| Ok(reduced_self_attention(t, p, x[0], a)?.out),
    )?);
    out.push(block_case(
        "lrla",
        seed,
        |b| LamBlockParams::init(b, 6, 3, 3),
        vec![tokens(16, 6, r)],
        move |t, p, l, x| Ok(lrla_forward(t, p, x[0], l, hw)?.out),
    )?);
    for depth in 1..=3 {
        let name = alloc::format!("frn_depth{depth}");
        out.push(block_case(
            &name,
            seed,
            |b| FrnParams::init(b, 6, depth),
            vec![tokens(16, 6, r)],
            move |t, p, f, x| frn_forward(t, p, x[0], f, hw),
        )?);
    }
    out.push(block_case(
        "lam_block",
        seed,
        |b| LamBlockParams::init(b, 6, 3, 3),
        vec![tokens(16, 6, r)],
        move |t, p, l, x| Ok(lam_block_forward(t, p, x[0], l, hw)?.out),
    )?);
    out.push(block_case(
        "rt_block",
        seed,
        |b| RtBlockParams::init(b, 6, 3, 2, 3),
        vec![tokens(16, 6, r)],
        move |t, p, l, x| Ok(rt_block_forward(t, p, x[0], l, hw)?.out),
    )?);
    let feats = vec![
        rand(&[2, 8, 8], r),
        rand(&[4, 4, 4], r),
        rand(&[8, 2, 2], r),
        rand(&[16, 1, 1], r),
    ];
    out.push(block_case(
        "phfa",
        seed,
        |b| Ok(PhfaParams::init(b, &[2, 4, 8, 16])),
        feats,
        |t, p, ph, x| {
            let outs = phfa_forward(t, p, x, ph)?.features;
            let flat: Vec<Var> = outs
                .iter()
                .map(|&o| {
                    let n = t.value(o).len();
                    t.reshape(o, &[n, 1])
                })
                .collect::<Result<_>>()?;
            t.concat(&flat, 0)
        },
    )?);
    out.push(block_case(
        "patch_embed",
        seed,
        |b| Ok(PatchEmbed::init(b, 1, 4)),
        vec![rand(&[1, 32, 32], r)],
        |t, p, pe, x| patch_embed(t, p, x[0], pe),
    )?);
    out.push(block_case(
        "patch_merge",
        seed,
        |b| Ok(PatchMerge::init(b, 4)),
        vec![tokens(16, 4, r)],
        move |t, p, pm, x| patch_merge(t, p, x[0], pm, hw),
    )?);
    out.push(block_case(
        "patch_expand",
        seed,
        |b| Ok(PatchExpand::init(b, 8)),
        vec![tokens(16, 8, r)],
        move |t, p, pe, x| patch_expand(t, p, x[0], pe, hw),
    )?);
    out.push(block_case(
        "conv_block",
        seed,
        |b| Ok(ConvBlockParams::init(b, 4)),
        vec![tokens(16, 4, r)],
        move |t, p, cb, x| conv_block_forward(t, p, x[0], cb, hw),
    )?);
    out.push(network_case(seed, Toggles::ALL)?);
    out.push(network_case(seed, Toggles::NONE)?);
    Ok(out)
}

/// Full network plus combined loss on a reduced-width configuration.
fn network_case(seed: u64, toggles: Toggles) -> Result<Case> {
    let config = NetConfig {
        stage_channels: [4, 8, 16, 32],
        toggles,
        seed,
        ..NetConfig::default()
    };
    let mut store = ParamStore::new();
    let net = Net::build(&config, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = uniform(&[1, 1, 32, 32], -1.0, 1.0, &mut rng);
    let labels = vec![LabelMap::new(
        32,
        32,
        (0..1024).map(|_| rng.gen_range(0..4)).collect(),
    )?];
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(image);
    let name = alloc::format!("network_loss[{}]", toggles.label());
    Ok(case(&name, inputs, move |t, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let logits = net.forward(t, &p, v[n])?;
        combined_loss(t, logits, &labels, 0.5)
    }))
}

/// Run every case, resampling with more draws until [`MIN_CHECKED`]
/// elements were compared (or the sample budget reaches 16x).
pub fn run(cases: &mut [Case], samples: usize, seed: u64, step: f64) -> Result<Vec<CaseResult>> {
    let mut results = Vec::with_capacity(cases.len());
    for c in cases.iter_mut() {
        let mut n = samples;
        let report = loop {
            let rep = check_with_step(&mut c.inputs, n, seed, step, &c.build)?;
            if rep.checked >= MIN_CHECKED || n >= 16 * samples {
                break rep;
            }
            n *= 2;
        };
        results.push(CaseResult {
            name: c.name.clone(),
            report,
        });
    }
    Ok(results)
}
