//! Finite-difference checks of the model's analytic gradients, both with
//! respect to the input features and with respect to every parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadmask_core::data::{make_targets, ActionSegment, VideoRecord};
use tadmask_core::encoder::Positional;
use tadmask_core::graph::{check_gradient, Graph, Mat, Var};
use tadmask_core::heads;
use tadmask_core::losses::{total_loss_graph, ClassLossConfig, LossSwitches, LossTargets, MaskLossConfig, ObjectiveConfig};
use tadmask_core::model::{ModelConfig, TadModel};
use tadmask_core::nn::Ctx;
use tadmask_core::params::ParamStore;
use tadmask_core::pretrain::{make_pretext_sample, pretext_forward_graph, pretrain_loss_graph, PretextLossWeights};
use tadmask_core::refine::RefineConfig;

const TOL: f64 = 1e-3;

fn random(shape: (usize, usize), seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = g.leaf(random(g.shape(y), seed));
    let p = g.mul(y, w);
    g.sum(p)
}

fn model(positional: Positional, t_len: usize, k: usize) -> TadModel {
    let mut cfg = ModelConfig::toy(k, t_len, 4);
    cfg.encoder.positional = positional;
    TadModel::new(cfg, 11).unwrap()
}

#[test]
fn embedding_gradient_wrt_features() {
    // 2d = 4 feature rows, T = 8 snippets
    let f = random((8, 4), 1);
    for positional in [Positional::None, Positional::Sinusoidal, Positional::Learned] {
        let m = model(positional, 8, 2);
        let c = check_gradient(&f, 1e-5, |g, x| {
            let e = m.embed_graph(g, x, &mut Ctx::eval());
            weighted_sum(g, e, 2)
        });
        assert!(c.relative_error() < TOL, "{positional:?}: {}", c.relative_error());
    }
}

#[test]
fn head_gradients_wrt_embedding() {
    let m = model(Positional::None, 6, 3);
    let e = random((6, m.config().encoder.embed_dim), 3);
    let hc = &m.config().heads;
    let c = check_gradient(&e, 1e-5, |g, v| {
        let logits = heads::class_logits_graph(g, m.params(), hc, v);
        let p = g.softmax_rows(logits);
        weighted_sum(g, p, 4)
    });
    assert!(c.relative_error() < TOL, "class head: {}", c.relative_error());
    let c = check_gradient(&e, 1e-5, |g, v| {
        let mask = m.mask_graph(g, v);
        weighted_sum(g, mask, 5)
    });
    assert!(c.relative_error() < TOL, "mask head: {}", c.relative_error());
}

/// Compares the tape's parameter gradients against central differences on a
/// few entries of every tensor.
fn check_param_gradients(store: &ParamStore, loss: impl Fn(&ParamStore) -> (f64, Vec<(String, Mat)>)) {
    let (_, analytic) = loss(store);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let mut checked = 0;
    for (name, grad) in analytic {
        let value = store.get(&name).unwrap();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for _ in 0..4 {
            let (i, j) = (rng.gen_range(0..value.nrows()), rng.gen_range(0..value.ncols()));
            let mut up = store.clone();
            up.get_mut(&name).unwrap()[[i, j]] += h;
            let mut down = store.clone();
            down.get_mut(&name).unwrap()[[i, j]] -= h;
            num.push((loss(&up).0 - loss(&down).0) / (2.0 * h));
            ana.push(grad[[i, j]]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(ana.iter().map(|v| v * v).sum::<f64>().sqrt());
        // entries with negligible gradient are dominated by rounding
        if scale > 1e-7 {
            assert!(diff / scale < TOL, "{name}: analytic {ana:?} numeric {num:?}");
            checked += 1;
        }
    }
    assert!(checked > 10, "too few tensors carried gradient ({checked})");
}

fn targets(t_len: usize, k: usize) -> LossTargets {
    let record = VideoRecord {
        id: "v".into(),
        duration: t_len as f64,
        segments: vec![
            ActionSegment { start: 1.0, end: 3.0, label: 1 },
            ActionSegment { start: 4.0, end: 6.0, label: 2 },
        ],
        feature_path: String::new(),
    };
    LossTargets::from_ground_truth(&make_targets(&record, t_len, k))
}

#[test]
fn total_loss_parameter_gradients() {
    let m = model(Positional::Sinusoidal, 8, 2);
    let f = random((8, 4), 6);
    let tg = targets(8, 2);
    let cfg = ObjectiveConfig {
        class: ClassLossConfig {
            tail_classes: [2].into(),
            epsilon: 0.3,
        },
        mask: MaskLossConfig::default(),
        refine: RefineConfig {
            mask_threshold: 0.5,
            class_threshold: 0.3,
            ..RefineConfig::default()
        },
        switches: LossSwitches::default(),
    };
    let cfg_model = m.config().clone();
    check_param_gradients(m.params(), |store| {
        let mm = TadModel::from_params(cfg_model.clone(), store.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(f.clone());
        let out = mm.forward(&mut g, x, &mut Ctx::eval());
        let (loss, _) = total_loss_graph(&mut g, &out, &f, &tg, &cfg);
        let grads = g.backward(loss);
        let named = g
            .params()
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|gr| (n.clone(), gr.clone())))
            .collect();
        (g.scalar(loss), named)
    });
}

#[test]
fn pretrain_loss_parameter_gradients() {
    let m = model(Positional::None, 8, 2);
    let f = random((4, 8), 7);
    let sample = make_pretext_sample(&f, &mut ChaCha8Rng::seed_from_u64(3), 0.25, 0.5);
    let cfg_model = m.config().clone();
    check_param_gradients(m.params(), |store| {
        let mm = TadModel::from_params(cfg_model.clone(), store.clone()).unwrap();
        let mut g = Graph::new();
        let out = pretext_forward_graph(&mut g, &mm, &sample, &mut Ctx::eval());
        let (loss, _) = pretrain_loss_graph(&mut g, &out, &sample, &PretextLossWeights::default(), &MaskLossConfig::default());
        let grads = g.backward(loss);
        let named = g
            .params()
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|gr| (n.clone(), gr.clone())))
            .collect();
        (g.scalar(loss), named)
    });
}
