//! Finite-difference checks over every differentiable operation and layer.

use alignmamba::align::{cosine_cost, mmd_loss, mmd_loss_unbiased, ot_loss, BandwidthRule};
use alignmamba::data::{Label, ModalitySpec, MultimodalSample};
use alignmamba::model::{AlignMamba, ModelConfig};
use alignmamba::moe::{MoEMambaLayer, Routing};
use alignmamba::params::ParamStore;
use alignmamba::ssm::{MambaConfig, MambaLayer};
use alignmamba::tensor::{causal_conv1d, routed_linear, selective_scan, sq_dist, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    cosine_cost_naive, entropic_ot, gradcheck, gradcheck_against, layer_gradcheck, random_tensor,
    rows,
};

pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.err < self.tol
    }
}

pub const OP_TOL: f64 = 1e-5;
/// The OT loss holds its plan fixed; its tape gradient is the gradient of
/// the regularized optimum up to the solver's tolerance.
pub const OT_TOL: f64 = 1e-3;
pub const MODEL_TOL: f64 = 1e-4;

/// Values in `[lo, hi]` with random sign, keeping clear of kinks at 0.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn run_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut case = |name: &'static str, err: f64, tol: f64| out.push(GradCase { name, err, tol });
    let r = &mut rng;

    let a = random_tensor(r, &[3, 4], -1.5, 1.5);
    let b = random_tensor(r, &[3, 4], -1.5, 1.5);
    let pos = random_tensor(r, &[3, 4], 0.3, 2.0);
    let row = random_tensor(r, &[1, 4], -1.0, 1.0);
    let col = random_tensor(r, &[3, 1], -1.0, 1.0);

    case(
        "add",
        gradcheck(&[a.clone(), b.clone()], |t| t[0].add(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "add_broadcast_row",
        gradcheck(&[a.clone(), row.clone()], |t| t[0].add(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "mul_broadcast_col",
        gradcheck(&[a.clone(), col.clone()], |t| t[0].mul(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "sub",
        gradcheck(&[a.clone(), b.clone()], |t| t[0].sub(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "mul",
        gradcheck(&[a.clone(), b.clone()], |t| t[0].mul(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "div",
        gradcheck(&[a.clone(), pos.clone()], |t| t[0].div(&t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "exp",
        gradcheck(&[a.clone()], |t| t[0].exp().unwrap()),
        OP_TOL,
    );
    case(
        "log",
        gradcheck(&[pos.clone()], |t| t[0].log().unwrap()),
        OP_TOL,
    );
    case(
        "softplus",
        gradcheck(&[a.clone()], |t| t[0].softplus().unwrap()),
        OP_TOL,
    );
    case(
        "silu",
        gradcheck(&[a.clone()], |t| t[0].silu().unwrap()),
        OP_TOL,
    );
    case(
        "sigmoid",
        gradcheck(&[a.clone()], |t| t[0].sigmoid().unwrap()),
        OP_TOL,
    );
    case(
        "tanh",
        gradcheck(&[a.clone()], |t| t[0].tanh().unwrap()),
        OP_TOL,
    );
    case(
        "neg",
        gradcheck(&[a.clone()], |t| t[0].neg().unwrap()),
        OP_TOL,
    );
    let signed = away_from_zero(r, &[3, 4], 0.2, 1.5);
    case(
        "abs",
        gradcheck(&[signed.clone()], |t| t[0].abs().unwrap()),
        OP_TOL,
    );
    case(
        "sqrt",
        gradcheck(&[pos.clone()], |t| t[0].sqrt().unwrap()),
        OP_TOL,
    );
    case(
        "square",
        gradcheck(&[a.clone()], |t| t[0].square().unwrap()),
        OP_TOL,
    );
    case(
        "scale",
        gradcheck(&[a.clone()], |t| t[0].scale(-2.5).unwrap()),
        OP_TOL,
    );
    case(
        "add_scalar",
        gradcheck(&[a.clone()], |t| t[0].add_scalar(0.7).unwrap()),
        OP_TOL,
    );
    case(
        "clamp_min",
        gradcheck(&[signed.clone()], |t| t[0].clamp_min(0.0).unwrap()),
        OP_TOL,
    );
    case(
        "sum_axis0",
        gradcheck(&[a.clone()], |t| t[0].sum(&[0]).unwrap()),
        OP_TOL,
    );
    case(
        "mean_axis1",
        gradcheck(&[a.clone()], |t| t[0].mean(&[1]).unwrap()),
        OP_TOL,
    );
    case(
        "sum_all",
        gradcheck(&[a.clone()], |t| t[0].sum_all().unwrap()),
        OP_TOL,
    );
    case(
        "mean_all",
        gradcheck(&[a.clone()], |t| t[0].mean_all().unwrap()),
        OP_TOL,
    );
    case(
        "sum_all_sorted",
        gradcheck(&[a.clone()], |t| t[0].sum_all_sorted().unwrap()),
        OP_TOL,
    );
    case(
        "softmax",
        gradcheck(&[a.clone()], |t| t[0].softmax(1).unwrap()),
        OP_TOL,
    );
    case(
        "log_softmax",
        gradcheck(&[a.clone()], |t| t[0].log_softmax(1).unwrap()),
        OP_TOL,
    );
    case(
        "concat",
        gradcheck(&[a.clone(), row.clone()], |t| {
            Tensor::concat(&[t[0].clone(), t[1].clone()], 0).unwrap()
        }),
        OP_TOL,
    );
    case(
        "slice",
        gradcheck(&[a.clone()], |t| t[0].slice(&[1..3, 0..3]).unwrap()),
        OP_TOL,
    );
    case(
        "rows",
        gradcheck(&[a.clone()], |t| t[0].rows(0..2).unwrap()),
        OP_TOL,
    );
    case(
        "cols",
        gradcheck(&[a.clone()], |t| t[0].cols(1..4).unwrap()),
        OP_TOL,
    );
    case(
        "reshape",
        gradcheck(&[a.clone()], |t| t[0].reshape(&[2, 6]).unwrap()),
        OP_TOL,
    );
    case(
        "transpose",
        gradcheck(&[a.clone()], |t| t[0].transpose().unwrap()),
        OP_TOL,
    );
    case(
        "pick",
        gradcheck(&[a.clone()], |t| t[0].pick(&[3, 0, 2]).unwrap()),
        OP_TOL,
    );
    let m = random_tensor(r, &[4, 5], -1.0, 1.0);
    case(
        "matmul",
        gradcheck(&[a.clone(), m], |t| t[0].matmul(&t[1]).unwrap()),
        OP_TOL,
    );

    let x = random_tensor(r, &[6, 3], -1.0, 1.0);
    let w = random_tensor(r, &[4, 3], -1.0, 1.0);
    let bias = random_tensor(r, &[1, 3], -1.0, 1.0);
    case(
        "causal_conv1d",
        gradcheck(&[x.clone(), w, bias], |t| {
            causal_conv1d(&t[0], &t[1], &t[2]).unwrap()
        }),
        OP_TOL,
    );

    let u = random_tensor(r, &[5, 3], -1.0, 1.0);
    let delta = random_tensor(r, &[5, 3], 0.05, 0.8);
    let aa = random_tensor(r, &[3, 4], -2.0, -0.2);
    let bb = random_tensor(r, &[5, 4], -1.0, 1.0);
    let cc = random_tensor(r, &[5, 4], -1.0, 1.0);
    case(
        "selective_scan",
        gradcheck(&[u, delta, aa, bb, cc], |t| {
            selective_scan(&t[0], &t[1], &t[2], &t[3], &t[4]).unwrap()
        }),
        OP_TOL,
    );

    let w0 = random_tensor(r, &[3, 2], -1.0, 1.0);
    let w1 = random_tensor(r, &[3, 2], -1.0, 1.0);
    let b0 = random_tensor(r, &[1, 2], -1.0, 1.0);
    let b1 = random_tensor(r, &[1, 2], -1.0, 1.0);
    case(
        "routed_linear",
        gradcheck(&[x.clone(), w0, w1, b0, b1], |t| {
            routed_linear(&t[0], &[0, 1, 1, 0, 1, 0], &[&t[1], &t[2]], &[&t[3], &t[4]]).unwrap()
        }),
        OP_TOL,
    );

    let y = random_tensor(r, &[4, 3], -1.0, 1.0);
    case(
        "sq_dist",
        gradcheck(&[x.clone(), y.clone()], |t| sq_dist(&t[0], &t[1]).unwrap()),
        OP_TOL,
    );
    case(
        "cosine_cost",
        gradcheck(&[x.clone(), y.clone()], |t| {
            cosine_cost(&t[0], &t[1]).unwrap()
        }),
        OP_TOL,
    );
    case(
        "mmd_loss",
        gradcheck(&[x.clone(), y.clone()], |t| {
            mmd_loss(&t[0], &t[1], BandwidthRule::InverseDim).unwrap()
        }),
        OP_TOL,
    );
    case(
        "mmd_loss_unbiased",
        gradcheck(&[x.clone(), y.clone()], |t| {
            mmd_loss_unbiased(&t[0], &t[1], BandwidthRule::Fixed(0.8)).unwrap()
        }),
        OP_TOL,
    );
    case(
        "ot_loss",
        gradcheck_against(
            &[x.clone(), y.clone()],
            |t| ot_loss(&t[0], &t[1], 0.5).unwrap(),
            |t| {
                let c = cosine_cost_naive(&rows(&t[0]), &rows(&t[1]));
                Tensor::scalar(entropic_ot(&c, t[0].shape()[0], t[1].shape()[0], 0.5))
            },
        ),
        OT_TOL,
    );

    let cfg = MambaConfig {
        d_state: 3,
        ..MambaConfig::default()
    };
    let mut store = ParamStore::new();
    let layer = MambaLayer::new(&mut store, r, "m", 4, &cfg);
    let xs = random_tensor(r, &[5, 4], -1.0, 1.0);
    case(
        "mamba_layer",
        layer_gradcheck(&store, &xs, 1e-4, |p, x| layer.forward(p, x).unwrap()),
        OP_TOL,
    );

    let mut store = ParamStore::new();
    let moe = MoEMambaLayer::new(&mut store, r, "f", 4, 2, &cfg, Routing::Deterministic);
    let ids = [0, 0, 1, 1, 0];
    case(
        "moe_mamba_layer",
        layer_gradcheck(&store, &xs, 1e-4, |p, x| moe.forward(p, x, &ids).unwrap()),
        OP_TOL,
    );

    let mut store = ParamStore::new();
    let learn = MoEMambaLayer::new(&mut store, r, "g", 4, 2, &cfg, Routing::Learnable);
    case(
        "moe_mamba_layer_learnable",
        layer_gradcheck(&store, &xs, 1e-4, |p, x| learn.forward(p, x, &ids).unwrap()),
        OP_TOL,
    );

    // whole model at toy size, dropout off
    let modalities = vec![ModalitySpec::new("a", 2, 3), ModalitySpec::new("b", 3, 3)];
    let mut mc = ModelConfig {
        modalities: modalities.clone(),
        d_model: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    mc.mamba.d_state = 2;
    mc.align.lambda_ot = 0.0;
    let model = AlignMamba::new(mc, seed).unwrap();
    let sample = MultimodalSample {
        features: modalities
            .iter()
            .map(|m| random_tensor(r, &[m.len, m.d_in], -1.0, 1.0))
            .collect(),
        label: Label::Class(1),
    };
    let unused = Tensor::zeros(&[1, 1]);
    case(
        "model_total_loss_without_ot",
        layer_gradcheck(&model.store, &unused, 1e-3, |p, _| {
            let f = model.forward(p, &sample, None).unwrap();
            model.total_loss(&f, sample.label).unwrap()
        }),
        MODEL_TOL,
    );
    out
}
