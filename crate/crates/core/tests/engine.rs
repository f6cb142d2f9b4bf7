use std::collections::BTreeMap;
use std::sync::OnceLock;

use cal_core::align::{AlignmentMap, MapSpec, Partition};
use cal_core::autodiff::Tensor;
use cal_core::das::{aggregate, cross_entropy, eval_iia, intervened_forward, train_das, DasConfig, HiddenCache};
use cal_core::mlp::{rows_of, strict_argmax, Mlp, MlpConfig};
use cal_core::rng;
use cal_core::tasks::{
    gen_base_dataset, gen_interchange_dataset, AlgorithmId, BaseSample, InterchangeSample, NodePolicy, TaskSpec,
};
use cal_core::Error;
use rand::Rng as _;

fn heq_dnn() -> &'static Mlp {
    static DNN: OnceLock<Mlp> = OnceLock::new();
    DNN.get_or_init(|| {
        let task = TaskSpec::heq();
        let cfg = MlpConfig::new(16, 16, 11);
        let mut dnn = Mlp::new(&cfg).unwrap();
        dnn.train(&gen_base_dataset(task, 65_536, 1), &gen_base_dataset(task, 4_000, 2), &cfg)
            .unwrap();
        dnn
    })
}

fn row(t: &Tensor, i: usize) -> Vec<f64> {
    t.row(i).to_vec()
}

fn one(x: &[f64]) -> Tensor {
    Tensor::new(vec![1, x.len()], x.to_vec()).unwrap()
}

fn scrambled(spec: &MapSpec, dim: usize, seed: u64) -> AlignmentMap {
    let mut map = AlignmentMap::new(spec, dim, seed).unwrap();
    let mut r = rng::stream(seed, "engine-scramble");
    for p in map.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    map
}

#[test]
fn splice_identity_at_every_layer() {
    let task = TaskSpec::heq();
    let data = gen_base_dataset(task, 256, 3);
    let x = Tensor::new(vec![256, 16], rows_of(data.iter().map(|s| s.x.as_slice()))).unwrap();
    for dnn in [heq_dnn().clone(), Mlp::new(&MlpConfig::new(16, 16, 5)).unwrap()] {
        let full = dnn.forward(&x).unwrap();
        for layer in 1..=3 {
            let h = dnn.forward_to_layer(&x, layer).unwrap();
            let spliced = dnn.forward_from_layer(&h, layer).unwrap();
            let err = full.data().iter().zip(spliced.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "layer {layer}: {err}");
        }
        for r in full.data().chunks_exact(2) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_out_of_range_is_rejected() {
    let dnn = heq_dnn();
    let x = Tensor::zeros(vec![1, 16]);
    assert!(dnn.forward_to_layer(&x, 0).is_err());
    assert!(dnn.forward_to_layer(&x, 4).is_err());
}

#[test]
fn empty_intervention_is_the_plain_forward() {
    let dnn = heq_dnn();
    let map = scrambled(&MapSpec::Revnet { layers: 3, hidden: 8 }, 16, 1);
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 4).unwrap();
    let x = TaskSpec::heq().sample_input(&mut rng::stream(4, "x"));
    let s = InterchangeSample::plain(x.clone(), 0);
    for layer in 1..=3 {
        let got = intervened_forward(dnn, &map, &p, &s, layer).unwrap();
        let want = dnn.forward(&one(&x)).unwrap();
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn full_layer_patch_with_identity_runs_the_source() {
    let dnn = heq_dnn();
    let p = Partition::new(16, vec![("x1==x2".into(), (0..16).collect())]).unwrap();
    let mut r = rng::stream(5, "x");
    let base = TaskSpec::heq().sample_input(&mut r);
    let src = TaskSpec::heq().sample_input(&mut r);
    let s = InterchangeSample {
        x_base: base,
        sources: BTreeMap::from([("x1==x2".to_string(), src.clone())]),
        y_gold: 0,
    };
    let got = intervened_forward(dnn, &AlignmentMap::identity(16), &p, &s, 2).unwrap();
    assert_eq!(got.data(), dnn.forward(&one(&src)).unwrap().data());
}

#[test]
fn self_patch_changes_nothing() {
    let dnn = heq_dnn();
    let map = scrambled(&MapSpec::Orthogonal, 16, 2);
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 8).unwrap();
    let x = TaskSpec::heq().sample_input(&mut rng::stream(6, "x"));
    let s = InterchangeSample {
        x_base: x.clone(),
        sources: BTreeMap::from([("x1==x2".to_string(), x.clone()), ("x3==x4".to_string(), x.clone())]),
        y_gold: 0,
    };
    let got = intervened_forward(dnn, &map, &p, &s, 1).unwrap();
    let want = dnn.forward(&one(&x)).unwrap();
    assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn missing_source_node_is_rejected() {
    let dnn = heq_dnn();
    let p = Partition::contiguous(16, &["x1==x2"], 4).unwrap();
    let x = vec![0.0; 16];
    let s = InterchangeSample {
        x_base: x.clone(),
        sources: BTreeMap::from([("x3==x4".to_string(), x)]),
        y_gold: 0,
    };
    assert!(matches!(
        intervened_forward(dnn, &AlignmentMap::identity(16), &p, &s, 1),
        Err(Error::Validation(_))
    ));
}

/// Straight-line recomputation of one intervened prediction.
fn oracle_prediction(dnn: &Mlp, map: &AlignmentMap, p: &Partition, s: &InterchangeSample, layer: usize) -> Option<usize> {
    let h = dnn.forward_to_layer(&one(&s.x_base), layer).unwrap();
    let mut z = row(&map.apply(&h).unwrap(), 0);
    for (node, cols) in p.nodes() {
        if let Some(src) = s.sources.get(node) {
            let zs = row(&map.apply(&dnn.forward_to_layer(&one(src), layer).unwrap()).unwrap(), 0);
            for &c in cols {
                z[c] = zs[c];
            }
        }
    }
    let h2 = map.invert(&one(&z)).unwrap();
    let probs = dnn.forward_from_layer(&h2, layer).unwrap();
    strict_argmax(probs.data())
}

#[test]
fn iia_matches_independent_oracle() {
    let dnn = heq_dnn();
    let task = TaskSpec::heq();
    let test = gen_interchange_dataset(task, AlgorithmId::BothEq, 100, 7, NodePolicy::NonEmptySubsets).unwrap();
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 6).unwrap();
    for spec in [MapSpec::Identity, MapSpec::Orthogonal, MapSpec::Revnet { layers: 4, hidden: 8 }] {
        let map = scrambled(&spec, 16, 3);
        for layer in 1..=3 {
            let hits = test
                .iter()
                .filter(|s| oracle_prediction(dnn, &map, &p, s, layer) == Some(s.y_gold))
                .count();
            let report = eval_iia(dnn, &map, &p, layer, &test, task, 0).unwrap();
            assert_eq!(report.n, 100);
            assert_eq!(report.iia, hits as f64 / 100.0, "{spec} layer {layer}");
        }
    }
}

#[test]
fn engine_loss_is_mean_negative_log_probability() {
    let dnn = heq_dnn();
    let test = gen_interchange_dataset(TaskSpec::heq(), AlgorithmId::BothEq, 50, 8, NodePolicy::NonEmptySubsets).unwrap();
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 8).unwrap();
    let map = scrambled(&MapSpec::Revnet { layers: 2, hidden: 8 }, 16, 4);
    let cache = HiddenCache::build(dnn, 2, &["x1==x2", "x3==x4"], &test).unwrap();
    let (loss, _) = cache.loss_and_iia(dnn, &map, &p).unwrap();
    let recomputed: f64 = test
        .iter()
        .map(|s| -intervened_forward(dnn, &map, &p, s, 2).unwrap().data()[s.y_gold].ln())
        .sum::<f64>()
        / test.len() as f64;
    assert!((loss - recomputed).abs() < 1e-12, "{loss} vs {recomputed}");
    assert!((cross_entropy(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn gold_equal_to_predictions_gives_perfect_iia() {
    let dnn = heq_dnn();
    let task = TaskSpec::heq();
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 8).unwrap();
    let map = scrambled(&MapSpec::Orthogonal, 16, 5);
    let mut test = gen_interchange_dataset(task, AlgorithmId::BothEq, 200, 9, NodePolicy::NonEmptySubsets).unwrap();
    test.retain_mut(|s| match oracle_prediction(dnn, &map, &p, s, 1) {
        Some(y) => {
            s.y_gold = y;
            true
        }
        None => false,
    });
    assert_eq!(eval_iia(dnn, &map, &p, 1, &test, task, 0).unwrap().iia, 1.0);
}

#[test]
fn intervention_blind_predictor_sits_at_chance() {
    let cfg = MlpConfig::new(16, 16, 0);
    let base = Mlp::new(&cfg).unwrap();
    let mut weights: Vec<Tensor> = base.weights().to_vec();
    let mut biases: Vec<Tensor> = base.biases().to_vec();
    weights[2] = Tensor::zeros(weights[2].shape().to_vec());
    biases[1] = Tensor::new(biases[1].shape().to_vec(), vec![1.0; 16]).unwrap();
    let mut out = vec![0.0; 32];
    for i in 0..16 {
        out[i * 2] = 1.0;
    }
    weights[3] = Tensor::new(weights[3].shape().to_vec(), out).unwrap();
    let dnn = Mlp::from_parts(weights, biases).unwrap();
    let task = TaskSpec::heq();
    let test = gen_interchange_dataset(task, AlgorithmId::BothEq, 10_000, 10, NodePolicy::NonEmptySubsets).unwrap();
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 8).unwrap();
    let iia = eval_iia(&dnn, &AlignmentMap::identity(16), &p, 1, &test, task, 0).unwrap().iia;
    assert!((iia - 0.5).abs() < 0.02, "{iia}");
}

fn small_das(seed: u64) -> (Mlp, AlignmentMap, cal_core::das::DasReport) {
    let dnn = heq_dnn().clone();
    let task = TaskSpec::heq();
    let train = gen_interchange_dataset(task, AlgorithmId::BothEq, 2_000, 12, NodePolicy::NonEmptySubsets).unwrap();
    let eval = gen_interchange_dataset(task, AlgorithmId::BothEq, 500, 13, NodePolicy::NonEmptySubsets).unwrap();
    let spec = MapSpec::Revnet { layers: 2, hidden: 8 };
    let mut cfg = DasConfig::new(1, AlgorithmId::BothEq, spec, 4, seed);
    cfg.batch = 100;
    cfg.max_epochs = 3;
    let p = cfg.partition(&dnn).unwrap();
    let mut map = AlignmentMap::new(&spec, 16, seed).unwrap();
    let report = train_das(&dnn, &mut map, &p, &train, &eval, &cfg).unwrap();
    (dnn, map, report)
}

#[test]
fn alignment_training_never_touches_the_network() {
    let before = heq_dnn().param_bits();
    let (after, _, report) = small_das(1);
    assert!(report.steps > 0);
    assert_eq!(before, after.param_bits());
}

#[test]
fn alignment_training_is_deterministic() {
    let (_, m1, r1) = small_das(2);
    let (_, m2, r2) = small_das(2);
    assert_eq!(r1, r2);
    let bits = |m: &AlignmentMap| m.params().iter().flat_map(|t| t.bits()).collect::<Vec<_>>();
    assert_eq!(bits(&m1), bits(&m2));
}

#[test]
fn trained_map_respects_null_interventions() {
    let (dnn, map, _) = small_das(3);
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 4).unwrap();
    let mut r = rng::stream(14, "x");
    for _ in 0..50 {
        let x = TaskSpec::heq().sample_input(&mut r);
        let s = InterchangeSample {
            x_base: x.clone(),
            sources: BTreeMap::from([("x1==x2".to_string(), x.clone())]),
            y_gold: 0,
        };
        let patched = intervened_forward(&dnn, &map, &p, &s, 1).unwrap();
        assert_eq!(strict_argmax(patched.data()), dnn.predict(&one(&x)).unwrap()[0]);
    }
}

#[test]
fn config_validation_rejects_bad_layers_and_sizes() {
    let dnn = heq_dnn();
    let ok = DasConfig::new(1, AlgorithmId::BothEq, MapSpec::Orthogonal, 8, 0);
    assert!(ok.validate(dnn).is_ok());
    let cases = [
        DasConfig { layer: 0, ..ok.clone() },
        DasConfig { layer: 4, ..ok.clone() },
        DasConfig { intervention_size: 9, ..ok.clone() },
        DasConfig { intervention_size: 0, ..ok.clone() },
        DasConfig { algorithm: AlgorithmId::AndOr, ..ok.clone() },
        DasConfig { batch: 0, ..ok.clone() },
    ];
    for c in cases {
        assert!(matches!(c.validate(dnn), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn aggregate_mean_never_exceeds_max() {
    let s = aggregate(&[0.7, 0.9, 0.8]).unwrap();
    assert!(s.mean <= s.max);
    assert_eq!(s.max, 0.9);
    assert!(aggregate(&[]).is_none());
}

#[test]
fn zero_intervention_training_equals_plain_training() {
    let task = TaskSpec::heq();
    let cfg = MlpConfig {
        max_epochs: 2,
        ..MlpConfig::new(16, 16, 21)
    };
    let train = gen_base_dataset(task, 4096, 22);
    let eval = gen_base_dataset(task, 512, 23);
    let mut plain = Mlp::new(&cfg).unwrap();
    let r1 = plain.train(&train, &eval, &cfg).unwrap();
    let as_interchange: Vec<InterchangeSample> =
        train.iter().map(|s| InterchangeSample::plain(s.x.clone(), s.y)).collect();
    let eval_i: Vec<InterchangeSample> = eval.iter().map(|s| InterchangeSample::plain(s.x.clone(), s.y)).collect();
    let mut cf = Mlp::new(&cfg).unwrap();
    let p = Partition::contiguous(16, &["x1==x2", "x3==x4"], 4).unwrap();
    let r2 = cf.train_with_interventions(&as_interchange, &eval_i, 1, &p, &cfg).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(plain.param_bits(), cf.param_bits());
}

#[test]
fn training_learns_flipped_labels_and_loss_falls() {
    let task = TaskSpec::heq();
    let cfg = MlpConfig::new(16, 16, 31);
    let flip = |d: Vec<BaseSample>| -> Vec<BaseSample> {
        d.into_iter().map(|s| BaseSample { x: s.x, y: 1 - s.y }).collect()
    };
    let train = flip(gen_base_dataset(task, 131_072, 32));
    let eval = flip(gen_base_dataset(task, 4_000, 33));
    let mut dnn = Mlp::new(&cfg).unwrap();
    let report = dnn.train(&train, &eval, &cfg).unwrap();
    assert!(report.epochs[1].loss < report.epochs[0].loss);
    let test = gen_base_dataset(task, 10_000, 34);
    let acc = dnn.accuracy(&test).unwrap();
    assert!(acc <= 0.02, "accuracy against the true labels: {acc}");
}

#[test]
fn overlapping_partitions_are_rejected() {
    assert!(matches!(
        Partition::new(16, vec![("a".into(), vec![0, 1]), ("b".into(), vec![1, 2])]),
        Err(Error::Validation(_))
    ));
}
