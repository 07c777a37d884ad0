//! Finite-difference checks of every tape operation and every loss term,
//! ten seeds each. Shared by the gradient and acceptance test targets.

use std::rc::Rc;

use dynroute::autodiff::gradcheck::grad_check;
use dynroute::budget::{global_budget_loss_var, BoxAnnotation, ScaleEncoding};
use dynroute::config::{Detector, RunConfig};
use dynroute::cost::{compile_cost_table, network_cost_var};
use dynroute::head::{assign_targets, detection_loss, total_loss_var, PyramidGeometry, HeadConfig, LevelPrediction, LevelTargets, LossWeights};
use dynroute::similarity::{local_similarity_loss_var, route_matrix, SimilarityConfig};
use dynroute::supernet::SupernetSpec;
use dynroute::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;
const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// Result of one named check over all seeds.
#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub failure: Option<String>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in ±[0.1, 1), so piecewise ops stay away from their kinks.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn check<G, F>(out: &mut Vec<Outcome>, name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = gen(&mut rng);
        match grad_check(&f, &inputs, EPS, TOL) {
            Ok(r) if r.checked == 0 => failure = Some("nothing checked".to_string()),
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                if let Some(m) = r.failures.first() {
                    failure.get_or_insert(format!("seed {seed}: {m:?}"));
                }
            }
            Err(e) => failure = Some(format!("seed {seed}: {e}")),
        }
    }
    out.push(Outcome {
        name: name.to_string(),
        seeds: SEEDS,
        max_rel_error: worst,
        failure,
    });
}

pub fn elementwise_and_reductions(out: &mut Vec<Outcome>) {
    let pair = |r: &mut ChaCha8Rng| vec![signed(r, &[2, 3, 2, 2]), signed(r, &[2, 3, 2, 2])];
    let one = |r: &mut ChaCha8Rng| vec![signed(r, &[2, 3, 2, 2])];
    check(out, "add", pair, |t, v| t.add(v[0], v[1]));
    check(out, "sub", pair, |t, v| t.sub(v[0], v[1]));
    check(out, "mul", pair, |t, v| t.mul(v[0], v[1]));
    check(out, "scale", one, |t, v| Ok(t.scale(v[0], -1.7)));
    check(out, "add_scalar", one, |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check(out, "square", one, |t, v| Ok(t.square(v[0])));
    check(out, "relu", one, |t, v| Ok(t.relu(v[0])));
    check(out, "tanh", one, |t, v| Ok(t.tanh(v[0])));
    check(out, "exp", one, |t, v| Ok(t.exp(v[0])));
    // bounds at ±0.05 sit between the sampled magnitudes
    check(out, "clamp", one, |t, v| Ok(t.clamp(v[0], -0.05, 0.05)));
    check(out, "clamp(tanh) gate", one, |t, v| {
        let x = t.tanh(v[0]);
        Ok(t.clamp(x, 0.0, 1.0))
    });
    check(out, "sum", one, |t, v| Ok(t.sum(v[0])));
    check(out, "mean", one, |t, v| Ok(t.mean(v[0])));
    check(out, "max_over_vector", |r| vec![signed(r, &[7])], |t, v| t.max_over_vector(v[0]));
    check(out, "row_max", |r| vec![signed(r, &[4, 3])], |t, v| t.row_max(v[0]));
    check(out, "weighted_row_sum", |r| vec![signed(r, &[4, 3])], |t, v| t.weighted_row_sum(v[0], &[2.0, 0.0, 5.5]));
    check(out, "index", |r| vec![signed(r, &[5])], |t, v| t.index(v[0], 3));
    check(out, "row", |r| vec![signed(r, &[4, 3])], |t, v| t.row(v[0], 2));
    check(out, "concat_cols", |r| vec![signed(r, &[3, 2]), signed(r, &[3, 4])], |t, v| t.concat_cols(&[v[0], v[1]]));
    check(out, "cosine_similarity", |r| vec![signed(r, &[6]), signed(r, &[6])], |t, v| t.cosine_similarity(v[0], v[1]));
}

pub fn network_ops(out: &mut Vec<Outcome>) {
    let img = |r: &mut ChaCha8Rng| signed(r, &[2, 3, 4, 4]);
    check(out, "gate_scale", |r| vec![img(r), uniform(r, &[2, 3], 0.1, 1.0)], |t, v| t.gate_scale(v[0], v[1], 1));
    check(out, "bias_add", |r| vec![img(r), signed(r, &[3])], |t, v| t.bias_add(v[0], v[1]));
    for stride in [1, 2] {
        check(out, &format!("conv2d_1x1 stride {stride}"), |r| vec![img(r), signed(r, &[5, 3])], move |t, v| t.conv2d_1x1(v[0], v[1], stride));
        check(out, &format!("depthwise_conv3x3 stride {stride}"), |r| vec![img(r), signed(r, &[3, 9])], move |t, v| t.depthwise_conv3x3(v[0], v[1], stride));
        check(
            out,
            &format!("sepconv3x3 stride {stride}"),
            |r| vec![img(r), signed(r, &[3, 9]), signed(r, &[4, 3])],
            move |t, v| t.depthwise_separable_conv3x3(v[0], v[1], v[2], stride),
        );
    }
    check(out, "avg_pool_to 2x2", |r| vec![img(r)], |t, v| t.avg_pool_to(v[0], 2, 2));
    check(out, "avg_pool_to 1x1", |r| vec![img(r)], |t, v| t.avg_pool_to(v[0], 1, 1));
    check(out, "sample_norm", |r| vec![img(r)], |t, v| t.sample_norm(v[0], 1e-5));
    check(out, "global_avg_pool", |r| vec![img(r)], |t, v| t.global_avg_pool(v[0]));
    check(out, "fully_connected", |r| vec![signed(r, &[2, 4]), signed(r, &[3, 4]), signed(r, &[3])], |t, v| t.fully_connected(v[0], v[1], v[2]));
    check(out, "bilinear_upsample_2x", |r| vec![img(r)], |t, v| t.bilinear_upsample_2x(v[0]));
}

fn detection_fixture(rng: &mut ChaCha8Rng) -> (Vec<LevelTargets>, Vec<LevelTargets>) {
    // two samples, one 4×4 level, two classes
    let mut make = |n_pos: usize| {
        let mut cls = vec![None; 16];
        let mut boxes = vec![None; 16];
        for _ in 0..n_pos {
            let p = rng.random_range(0..16);
            cls[p] = Some(rng.random_range(0..2));
            boxes[p] = Some(std::array::from_fn(|_| rng.random_range(1.0..6.0)));
        }
        LevelTargets { cls, boxes }
    };
    (vec![make(3)], vec![make(0)])
}

pub fn loss_terms(out: &mut Vec<Outcome>) {
    let head = HeadConfig::default();

    check(
        out,
        "sigmoid_focal_loss",
        |r| vec![signed(r, &[2, 2, 3, 3])],
        |t, v| {
            let targets: Vec<Option<usize>> = (0..18).map(|i| [None, Some(0), Some(1)][i % 3]).collect();
            t.sigmoid_focal_loss(v[0], Rc::new(targets), 0.25, 2.0)
        },
    );
    check(
        out,
        "iou_loss",
        |r| vec![uniform(r, &[2, 4, 3, 3], 0.5, 4.0)],
        |t, v| {
            let targets: Vec<Option<[f64; 4]>> = (0..18).map(|i| (i % 2 == 0).then_some([1.0, 2.0 + i as f64 * 0.1, 3.0, 1.5])).collect();
            t.iou_loss(v[0], Rc::new(targets))
        },
    );

    // L_det over class logits and box distances, targets drawn per seed
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (a, b) = detection_fixture(&mut rng);
        let targets = vec![a, b];
        let inputs = vec![signed(&mut rng, &[2, 2, 4, 4]), uniform(&mut rng, &[2, 4, 4, 4], 0.5, 6.0)];
        let r = grad_check(
            |t, v| {
                let preds = [LevelPrediction { cls: v[0], reg: v[1], stride: 8 }];
                Ok(detection_loss(t, &preds, &targets, &head)?.total)
            },
            &inputs,
            EPS,
            TOL,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
        if let Some(m) = r.failures.first() {
            failure.get_or_insert(format!("seed {seed}: {m:?}"));
        }
    }
    out.push(Outcome {
        name: "L_det".into(),
        seeds: SEEDS,
        max_rel_error: worst,
        failure,
    });

    // C_net over per-node gates of the desk trellis
    let spec = SupernetSpec::default();
    let table = compile_cost_table(&spec, 64, 64).unwrap();
    let n = table.len();
    let gates = move |r: &mut ChaCha8Rng| (0..n).map(|_| uniform(r, &[2, 3], 0.0, 1.0)).collect::<Vec<_>>();
    check(out, "C_net", gates.clone(), |t, v| {
        let c = network_cost_var(t, v, &table)?;
        Ok(t.scale(c, 1.0 / table.total()))
    });

    // L_global on the C_net ratio
    check(out, "L_global", |r| vec![uniform(r, &[4], 0.0, 1.0)], |t, v| global_budget_loss_var(t, v[0], &[0.05, 0.0125, 0.025, 0.0375]));
    check(out, "L_global through C_net", gates, |t, v| {
        let c = network_cost_var(t, v, &table)?;
        let ratio = t.scale(c, 1.0 / table.total());
        global_budget_loss_var(t, ratio, &[0.05, 0.025])
    });

    // L_local on route vectors
    let sim = SimilarityConfig::default();
    let scales: Vec<ScaleEncoding> = [[1, 0, 0, 0], [1, 1, 1, 1], [1, 0, 0, 0], [0, 1, 1, 0]].iter().map(|b| ScaleEncoding::from_bits(b)).collect();
    check(out, "L_local", |r| vec![uniform(r, &[4, 9], 0.05, 1.0)], |t, v| local_similarity_loss_var(t, v[0], &scales, &sim));
    check(
        out,
        "L_local through route_matrix",
        |r| (0..3).map(|_| uniform(r, &[4, 3], 0.05, 1.0)).collect(),
        |t, v| {
            let routes = route_matrix(t, v)?;
            local_similarity_loss_var(t, routes, &scales, &sim)
        },
    );
    check(
        out,
        "total objective",
        |r| vec![uniform(r, &[1], 0.5, 2.0), uniform(r, &[1], 0.0, 0.3), uniform(r, &[1], 0.0, 0.3)],
        |t, v| {
            let (d, g, l) = (t.sum(v[0]), t.sum(v[1]), t.sum(v[2]));
            total_loss_var(t, d, Some(g), Some(l), &LossWeights { lambda_global: 0.7, lambda_local: 1.3 })
        },
    );
}

/// The whole training objective, differentiated with respect to sampled
/// parameters of a small detector.
pub fn full_objective_through_the_detector(out: &mut Vec<Outcome>) {
    let mut cfg = RunConfig::default();
    cfg.supernet.num_layers = 3;
    cfg.supernet.channels_per_scale = vec![2, 4, 8, 16];
    cfg.supernet.head_channels = 4;
    cfg.supernet.router_bias_init = 0.3;
    let weights = LossWeights { lambda_global: 1.0, lambda_local: 1.0 };
    let sim = SimilarityConfig::default();
    let scales = vec![ScaleEncoding::from_bits(&[1, 0, 0, 0]), ScaleEncoding::from_bits(&[1, 1, 1, 1])];
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for seed in 0..SEEDS {
        let (det, mut params) = Detector::build(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // distinct biases keep the three gates of a node apart, away from
        // the tie in the max over gates
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).ends_with("router.fc.b") {
                *params.get_mut(id) = uniform(&mut rng, &[3], 0.2, 1.2);
            }
        }
        let images = uniform(&mut rng, &[2, 1, 64, 64], 0.0, 1.0);
        let table = compile_cost_table(&cfg.supernet, 64, 64).unwrap();
        let geometry = PyramidGeometry::new(64, 64, cfg.supernet.pyramid_levels());
        let targets: Vec<_> = [(4.0, 4.0, 10.0, 9.0, 1), (20.0, 6.0, 40.0, 50.0, 0)]
            .into_iter()
            .map(|b| assign_targets(&[BoxAnnotation::from(b)], &geometry, &cfg.budget.intervals))
            .collect();

        let objective = |p: &dynroute::params::Params, track: bool| {
            let mut tape = if track { Tape::new() } else { Tape::inference() };
            let pv = p.load_into(&mut tape);
            let x = tape.constant(images.clone());
            let fwd = det.supernet.forward_train(&mut tape, &pv, x, None).unwrap();
            let preds = det.head.forward(&mut tape, &pv, &fwd.pyramid).unwrap();
            let l_det = detection_loss(&mut tape, &preds, &targets, &cfg.head).unwrap().total;
            let c = network_cost_var(&mut tape, &fwd.gates, &table).unwrap();
            let ratio = tape.scale(c, 1.0 / table.total());
            let g = global_budget_loss_var(&mut tape, ratio, &[0.0125, 0.05]).unwrap();
            let routes = route_matrix(&mut tape, &fwd.gates).unwrap();
            let l = local_similarity_loss_var(&mut tape, routes, &scales, &sim).unwrap();
            let total = total_loss_var(&mut tape, l_det, Some(g), Some(l), &weights).unwrap();
            (tape, pv, total)
        };

        let (tape, pv, total) = objective(&params, true);
        let grads = tape.backward(total).unwrap();
        let ids: Vec<_> = params.ids().collect();
        for _ in 0..12 {
            let id = ids[rng.random_range(0..ids.len())];
            let e = rng.random_range(0..params.get(id).numel());
            let analytic = grads.get_or_zeros(pv[id], params.get(id).shape()).data()[e];
            let mut probe = params.clone();
            let orig = probe.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + EPS;
            let (t1, _, l1) = objective(&probe, false);
            let plus = t1.value(l1).item();
            probe.get_mut(id).data_mut()[e] = orig - EPS;
            let (t2, _, l2) = objective(&probe, false);
            let minus = t2.value(l2).item();
            let numeric = (plus - minus) / (2.0 * EPS);
            let err = dynroute::autodiff::gradcheck::rel_error(analytic, numeric);
            if !(err < TOL) {
                failure.get_or_insert(format!("seed {seed} {}[{e}]: analytic {analytic} numeric {numeric}", params.name(id)));
            }
            worst = worst.max(err);
        }
    }
    out.push(Outcome {
        name: "full objective".into(),
        seeds: SEEDS,
        max_rel_error: worst,
        failure,
    });
}
