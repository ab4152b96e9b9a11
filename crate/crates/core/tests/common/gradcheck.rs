//! Finite-difference checks of every layer and of the full model, shared
//! by the gradients suite and the acceptance harness. Each check returns the
//! worst relative error per probed quantity.

use super::*;
use rand::RngExt;
use ranf::bundle::Direction;
use ranf::dsp::Itd;
use ranf::nn::{
    gelu, gelu_backward, lora_select, Blstm, Conv1d, Deconv1d, Grads, LayerNorm, Linear, LoraFc, LoraPair, PRelu,
    ParamRole, ParamStore, Rff, Tensor,
};
use ranf::ranf_model::{OutputGrad, RanfConfig, RanfInput, RanfModel, RanfOutput, RetrievedEntry};
use ranf::retrieval::HrtfFeatures;
use ranf::training::{sample_loss, sample_loss_grad};

const PER_PARAM: usize = 8;

/// Named worst relative errors of one check.
pub type Report = Vec<(String, f64)>;

pub fn linear() -> Report {
    let mut out = Report::new();
    let mut r = rng(1);
    let mut ps = ParamStore::<f64>::new();
    let fc = Linear::new(&mut ps, "fc", 5, 3, true, &mut r).unwrap();
    let x = random_tensor(4, 5, 1.0, &mut r);
    let w = random_tensor(4, 3, 1.0, &mut r);
    let mut g = Grads::new(&ps);
    let gx = fc.backward(&ps, &x, &w, &mut g, true).unwrap();
    let ids = all_ids(&ps);
    out.push(("fc params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 2, |p| weighted_sum(&fc.forward(p, &x), &w)).0));
    out.push(("linear input".to_string(), check_input(&x, &gx, |x| weighted_sum(&fc.forward(&ps, x), &w))));
    out
}

pub fn lora_fc() -> Report {
    let mut out = Report::new();
    let mut r = rng(3);
    let mut ps = ParamStore::<f64>::new();
    let layer = LoraFc::new(&mut ps, "l", 6, 4, &mut r).unwrap();
    let u = layer.add_u(&mut ps, "T", ParamRole::Target("T".into())).unwrap();
    let v = layer.add_v(&mut ps, "R", ParamRole::Retrieved("R".into()), 0.5, &mut r).unwrap();
    for x in ps.value_mut(u) {
        *x = r.random_range(-1.0..1.0);
    }
    let pair = LoraPair { u: Some(u), v: Some(v) };
    let x = random_tensor(3, 6, 1.0, &mut r);
    let w = random_tensor(3, 4, 1.0, &mut r);
    let (_, cache) = layer.forward(&ps, &x, pair);
    let mut g = Grads::new(&ps);
    let gx = layer.backward(&ps, &x, pair, &cache, &w, &mut g, true).unwrap();
    let ids = all_ids(&ps);
    let f = |p: &ParamStore<f64>, x: &Tensor<f64>| weighted_sum(&layer.forward(p, x, pair).0, &w);
    out.push(("lora params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 4, |p| f(p, &x)).0));
    out.push(("lora_fc input".to_string(), check_input(&x, &gx, |x| f(&ps, x))));
    out
}

pub fn conv1d() -> Report {
    let mut out = Report::new();
    let mut r = rng(5);
    let mut ps = ParamStore::<f64>::new();
    let conv = Conv1d::new(&mut ps, "c", 3, 4, 5, 2, 2, &mut r).unwrap();
    let x = random_tensor(11, 3, 1.0, &mut r);
    let (y, cache) = conv.forward(&ps, &x).unwrap();
    let w = random_tensor(y.rows(), 4, 1.0, &mut r);
    let mut g = Grads::new(&ps);
    let gx = conv.backward(&ps, &cache, &w, &mut g, true).unwrap();
    let ids = all_ids(&ps);
    let f = |p: &ParamStore<f64>, x: &Tensor<f64>| weighted_sum(&conv.forward(p, x).unwrap().0, &w);
    out.push(("conv params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 6, |p| f(p, &x)).0));
    out.push(("conv1d input".to_string(), check_input(&x, &gx, |x| f(&ps, x))));
    out
}

pub fn deconv1d_with_output_padding() -> Report {
    let mut out = Report::new();
    let mut r = rng(7);
    let mut ps = ParamStore::<f64>::new();
    let de = Deconv1d::new(&mut ps, "d", 4, 2, 5, 2, 2, 1, &mut r).unwrap();
    let x = random_tensor(5, 4, 1.0, &mut r);
    let (y, cache) = de.forward(&ps, &x).unwrap();
    assert_eq!(y.rows(), 10);
    let w = random_tensor(10, 2, 1.0, &mut r);
    let mut g = Grads::new(&ps);
    let gx = de.backward(&ps, &cache, &w, &mut g, true).unwrap();
    let ids = all_ids(&ps);
    let f = |p: &ParamStore<f64>, x: &Tensor<f64>| weighted_sum(&de.forward(p, x).unwrap().0, &w);
    out.push(("deconv params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 8, |p| f(p, &x)).0));
    out.push(("deconv1d_with_output_padding input".to_string(), check_input(&x, &gx, |x| f(&ps, x))));
    out
}

pub fn blstm() -> Report {
    let mut out = Report::new();
    let mut r = rng(9);
    let mut ps = ParamStore::<f64>::new();
    let net = Blstm::new(&mut ps, "b", 3, 4, &mut r).unwrap();
    let x = random_tensor(6, 3, 1.0, &mut r);
    let w = random_tensor(6, 8, 1.0, &mut r);
    let (_, cache) = net.forward(&ps, &x);
    let mut g = Grads::new(&ps);
    let gx = net.backward(&ps, &cache, &w, &mut g);
    let ids = all_ids(&ps);
    let f = |p: &ParamStore<f64>, x: &Tensor<f64>| weighted_sum(&net.forward(p, x).0, &w);
    out.push(("blstm params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 10, |p| f(p, &x)).0));
    out.push(("blstm input".to_string(), check_input(&x, &gx, |x| f(&ps, x))));
    out
}

pub fn prelu() -> Report {
    let mut out = Report::new();
    let mut r = rng(11);
    let mut ps = ParamStore::<f64>::new();
    let act = PRelu::new(&mut ps, "a").unwrap();
    // keep every coordinate away from the kink
    let x = random_tensor(4, 5, 1.0, &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let w = random_tensor(4, 5, 1.0, &mut r);
    let mut g = Grads::new(&ps);
    let gx = act.backward(&ps, &x, &w, &mut g);
    let ids = all_ids(&ps);
    out.push(("prelu slope".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 12, |p| weighted_sum(&act.forward(p, &x), &w)).0));
    out.push(("prelu input".to_string(), check_input(&x, &gx, |x| weighted_sum(&act.forward(&ps, x), &w))));
    out
}

pub fn gelu_activation() -> Report {
    let mut out = Report::new();
    let mut r = rng(13);
    let x = random_tensor(3, 7, 3.0, &mut r);
    let w = random_tensor(3, 7, 1.0, &mut r);
    let gx = gelu_backward(&x, &w);
    out.push(("gelu_activation input".to_string(), check_input(&x, &gx, |x| weighted_sum(&gelu(x), &w))));
    out
}

pub fn layer_norm() -> Report {
    let mut out = Report::new();
    let mut r = rng(15);
    let mut ps = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut ps, "ln", 6).unwrap();
    for id in all_ids(&ps) {
        for v in ps.value_mut(id) {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let x = random_tensor(4, 6, 2.0, &mut r);
    let w = random_tensor(4, 6, 1.0, &mut r);
    let (_, cache) = ln.forward(&ps, &x);
    let mut g = Grads::new(&ps);
    let gx = ln.backward(&ps, &cache, &w, &mut g);
    let ids = all_ids(&ps);
    let f = |p: &ParamStore<f64>, x: &Tensor<f64>| weighted_sum(&ln.forward(p, x).0, &w);
    out.push(("layer norm params".to_string(), check_params(&mut ps, &ids, &g, PER_PARAM, 16, |p| f(p, &x)).0));
    out.push(("layer_norm input".to_string(), check_input(&x, &gx, |x| f(&ps, x))));
    out
}

pub fn random_fourier_features() -> Report {
    let mut out = Report::new();
    let mut r = rng(17);
    let mut ps = ParamStore::<f64>::new();
    let rff = Rff::new(&mut ps, "rff", 4, 6, 1.0, &mut r).unwrap();
    let x = random_tensor(2, 4, 1.0, &mut r);
    let w = random_tensor(2, 12, 1.0, &mut r);
    let gx = rff.backward(&ps, &x, &w);
    out.push(("random_fourier_features input".to_string(), check_input(&x, &gx, |x| weighted_sum(&rff.forward(&ps, x), &w))));
    out
}

fn tiny_config(k: usize) -> RanfConfig {
    RanfConfig {
        channels: 8,
        blocks: 2,
        lstm_units: 3,
        post_layers: 2,
        k,
        tac_hidden: 4,
        hrir_length: 32,
        rff_features: 4,
        ..RanfConfig::default()
    }
}

/// Tiny model with a target and five retrieved subjects whose LoRA vectors
/// are all non-zero, so every path carries gradient.
fn tiny_model(k: usize, seed: u64) -> (RanfModel, ParamStore<f64>, Vec<String>) {
    let mut ps = ParamStore::<f64>::new();
    let model = RanfModel::new(tiny_config(k), &mut ps, seed).unwrap();
    model.add_target(&mut ps, "T", seed).unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("R{i}")).collect();
    for s in &ids {
        model.add_retrieved(&mut ps, s, seed).unwrap();
    }
    let mut r = rng(seed + 100);
    for id in ps.ids_where(|role| matches!(role, ParamRole::Target(_))) {
        for v in ps.value_mut(id) {
            *v = r.random_range(-0.3..0.3);
        }
    }
    (model, ps, ids)
}

pub fn tac_block_for_several_k() -> Report {
    let mut out = Report::new();
    for k in [1, 2, 5] {
        let (model, mut ps, ids) = tiny_model(k, 20 + k as u64);
        let tac = &model.blocks()[0].tac;
        let pairs: Vec<LoraPair> = ids[..k].iter().map(|s| lora_select(&ps, &tac.lora, Some("T"), s).unwrap()).collect();
        let mut r = rng(30 + k as u64);
        let xs: Vec<Tensor<f64>> = (0..k).map(|_| random_tensor(5, 8, 1.0, &mut r)).collect();
        let ws: Vec<Tensor<f64>> = (0..k).map(|_| random_tensor(5, 8, 1.0, &mut r)).collect();
        let loss = |p: &ParamStore<f64>, xs: &[Tensor<f64>]| -> f64 {
            let (ys, _) = tac.forward(p, xs, &pairs).unwrap();
            ys.iter().zip(&ws).map(|(y, w)| weighted_sum(y, w)).sum()
        };
        let (_, cache) = tac.forward(&ps, &xs, &pairs).unwrap();
        let mut g = Grads::new(&ps);
        let gxs = tac.backward(&ps, &cache, &ws, &mut g);
        // only the parameters this block touches
        let mut ids_used = vec![tac.fc_a.weight, tac.fc_b.weight, tac.lora.base.weight, tac.ln.gamma, tac.ln.beta];
        ids_used.extend(tac.fc_a.bias.into_iter().chain(tac.fc_b.bias).chain(tac.lora.base.bias));
        for p in &pairs {
            ids_used.extend(p.u.into_iter().chain(p.v));
        }
        ids_used.sort();
        ids_used.dedup();
        out.push((format!("tac K={k}"), check_params(&mut ps, &ids_used, &g, PER_PARAM, 40 + k as u64, |p| loss(p, &xs)).0));
        for i in 0..k {
            let err = check_input(&xs[i], &gxs[i], |x| {
                let mut probe = xs.clone();
                probe[i] = x.clone();
                loss(&ps, &probe)
            });
            out.push((format!("tac K={k} input {i}"), err));
        }
    }
    out
}

fn tiny_input<'a>(ids: &'a [String], dbs: &'a [Vec<f64>], itds: &[f64], k: usize) -> RanfInput<'a> {
    RanfInput {
        direction: Direction::new(0.7, 0.2).unwrap(),
        target: Some("T"),
        retrieved: (0..k)
            .map(|i| RetrievedEntry {
                subject: &ids[i],
                db: &dbs[i],
                itd: itds[i],
            })
            .collect(),
    }
}

pub fn full_model_for_several_k() -> Report {
    let mut out = Report::new();
    for k in [1, 2, 5] {
        let (model, mut ps, ids) = tiny_model(k, 50 + k as u64);
        let mut r = rng(60 + k as u64);
        let bins = model.config().bins();
        let dbs: Vec<Vec<f64>> = (0..k).map(|_| (0..2 * bins).map(|_| r.random_range(-30.0..5.0)).collect()).collect();
        let itds: Vec<f64> = (0..k).map(|_| r.random_range(-20.0..20.0)).collect();
        // outputs are O(20) dB; small weights keep the probe loss O(1) so
        // finite-difference round-off stays far below the tolerance
        let w_db: Vec<f64> = (0..2 * bins).map(|_| r.random_range(-0.05..0.05)).collect();
        let w_itd = 0.035;
        let input = tiny_input(&ids, &dbs, &itds, k);
        let loss = |p: &ParamStore<f64>| {
            let (out, _) = model.forward(p, &input).unwrap();
            out.db.iter().zip(&w_db).map(|(a, b)| a * b).sum::<f64>() + w_itd * out.itd
        };
        let (_, tape) = model.forward(&ps, &input).unwrap();
        let mut g = Grads::new(&ps);
        model
            .backward(&ps, &tape, &OutputGrad { db: w_db.clone(), itd: w_itd }, &mut g)
            .unwrap();
        let trainable = ps.ids_where(|role| *role != ParamRole::Frozen);
        out.push((format!("ranf K={k}"), check_params(&mut ps, &trainable, &g, 4, 70 + k as u64, loss).0));
        // frozen projections never receive a gradient
        for id in ps.ids_where(|role| *role == ParamRole::Frozen) {
            let leaked = if g.get(id).is_some() { f64::INFINITY } else { 0.0 };
            out.push((format!("frozen {}", ps.param(id).name), leaked));
        }
    }
    out
}

pub fn training_loss_gradient() -> Report {
    let mut out = Report::new();
    let mut r = rng(80);
    let truth = HrtfFeatures {
        db: (0..34).map(|_| r.random_range(-20.0..0.0)).collect(),
        itd: Itd(3.0),
    };
    for itd in [5.2, -1.4, 3.3] {
        let pred = RanfOutput {
            db: (0..34).map(|_| r.random_range(-20.0..0.0)).collect(),
            itd,
            delta: 0.0,
        };
        let (l, g) = sample_loss_grad(&pred, &truth, 20.8, 0.5).unwrap();
        assert_eq!(l, sample_loss(&pred, &truth, 20.8, 0.5));
        let x = Tensor::matrix(1, 35, pred.db.iter().copied().chain([pred.itd]).collect()).unwrap();
        let gx = Tensor::matrix(1, 35, g.db.iter().copied().chain([g.itd]).collect()).unwrap();
        let err = check_input(&x, &gx, |x| {
            let p = RanfOutput {
                db: x.data()[..34].to_vec(),
                itd: x.data()[34],
                delta: 0.0,
            };
            sample_loss(&p, &truth, 20.8, 0.5)
        });
        out.push((format!("loss at itd {itd}"), err));
    }
    out
}

/// Every check, by name.
pub const ALL: &[(&str, fn() -> Report)] = &[
    ("linear", linear),
    ("lora_fc", lora_fc),
    ("conv1d", conv1d),
    ("deconv1d", deconv1d_with_output_padding),
    ("blstm", blstm),
    ("prelu", prelu),
    ("gelu", gelu_activation),
    ("layer_norm", layer_norm),
    ("rff", random_fourier_features),
    ("tac", tac_block_for_several_k),
    ("ranf", full_model_for_several_k),
    ("loss", training_loss_gradient),
];

/// The worst entry of a report.
pub fn worst(report: &Report) -> (f64, &str) {
    report
        .iter()
        .fold((0.0, ""), |acc, (name, e)| if *e > acc.0 || e.is_nan() { (*e, name.as_str()) } else { acc })
}
