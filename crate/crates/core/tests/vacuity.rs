use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use cal_core::autodiff::Tensor;
use cal_core::causal::AlgIntervention;
use cal_core::mlp::{strict_argmax, Mlp, MlpConfig};
use cal_core::tasks::{gen_base_dataset, AlgorithmId, TaskSpec};
use cal_core::vacuity::{
    check_assumptions, construct_map, enumerate_interventions, mutation_test, sample_correct_inputs,
    verify_perfect_iia, FiniteWorld, Origin,
};
use cal_core::Error;

fn trained() -> &'static Mlp {
    static DNN: OnceLock<Mlp> = OnceLock::new();
    DNN.get_or_init(|| {
        let task = TaskSpec::heq();
        let cfg = MlpConfig::new(16, 16, 3);
        let mut dnn = Mlp::new(&cfg).unwrap();
        dnn.train(&gen_base_dataset(task, 65_536, 4), &gen_base_dataset(task, 4_000, 5), &cfg)
            .unwrap();
        dnn
    })
}

fn coords(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(n, c)| (n.to_string(), *c)).collect()
}

fn both_eq_world(n: usize, depth: usize) -> FiniteWorld {
    let xs = sample_correct_inputs(TaskSpec::heq(), trained(), n, 6).unwrap();
    FiniteWorld::new(
        xs,
        trained().clone(),
        AlgorithmId::BothEq.model(),
        1,
        coords(&[("x1==x2", 0), ("x3==x4", 1)]),
        depth,
    )
    .unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn one_node_four_inputs_gives_five_interventions() {
    let xs = sample_correct_inputs(TaskSpec::heq(), trained(), 4, 7).unwrap();
    let w = FiniteWorld::new(xs, trained().clone(), AlgorithmId::LeftEq.model(), 2, coords(&[("x1==x2", 3)]), 1).unwrap();
    assert_eq!(enumerate_interventions(&w).unwrap().count(), 5);
}

#[test]
fn two_node_count_matches_a_brute_force_recount() {
    let w = both_eq_world(4, 1);
    let e = enumerate_interventions(&w).unwrap();
    let mut brute = BTreeSet::new();
    for a in std::iter::once(None).chain((0..4).map(Some)) {
        for b in std::iter::once(None).chain((0..4).map(Some)) {
            brute.insert((a, b));
        }
    }
    let got: BTreeSet<(Option<usize>, Option<usize>)> = e
        .interventions
        .iter()
        .map(|iv| (iv[0].map(|s| e.settings[0][s].state), iv[1].map(|s| e.settings[1][s].state)))
        .collect();
    assert_eq!(got.len(), e.count(), "enumerated interventions are distinct");
    assert_eq!(got, brute);
}

#[test]
fn depth_zero_is_only_the_empty_intervention() {
    let w = both_eq_world(4, 0);
    let e = enumerate_interventions(&w).unwrap();
    assert_eq!(e.count(), 1);
    assert!(e.interventions[0].iter().all(Option::is_none));
    let map = construct_map(&w).unwrap();
    let r = verify_perfect_iia(&w, &map).unwrap();
    assert_eq!(r.iia, 1.0);
    assert_eq!(r.iia, r.dnn_plain_accuracy);
}

#[test]
fn deeper_enumeration_respects_the_budget() {
    let mut w = both_eq_world(8, 2);
    let e = enumerate_interventions(&w).unwrap();
    assert!(e.count() >= 81);
    w.budget = 10;
    assert!(matches!(enumerate_interventions(&w), Err(Error::Budget(_))));
}

#[test]
fn trained_network_meets_all_assumptions() {
    let report = check_assumptions(&both_eq_world(8, 1)).unwrap();
    assert!(report.injective() && report.surjective() && report.task_correct, "{report:?}");
}

#[test]
fn zero_network_fails_injectivity_and_is_refused() {
    let zero = Mlp::zeros(&MlpConfig::new(16, 16, 0)).unwrap();
    let xs = sample_correct_inputs(TaskSpec::heq(), trained(), 8, 8).unwrap();
    let w = FiniteWorld::new(xs, zero, AlgorithmId::BothEq.model(), 1, coords(&[("x1==x2", 0), ("x3==x4", 1)]), 1)
        .unwrap();
    let report = check_assumptions(&w).unwrap();
    assert!(!report.injective());
    assert!(matches!(construct_map(&w), Err(Error::Assumption { name: "injectivity", .. })));
}

#[test]
fn untrained_network_fails_the_task_check() {
    let random = Mlp::new(&MlpConfig::new(16, 16, 9)).unwrap();
    let xs: Vec<Vec<f64>> = gen_base_dataset(TaskSpec::heq(), 8, 10).into_iter().map(|s| s.x).collect();
    let w = FiniteWorld::new(xs, random, AlgorithmId::BothEq.model(), 1, coords(&[("x1==x2", 0), ("x3==x4", 1)]), 1)
        .unwrap();
    let report = check_assumptions(&w).unwrap();
    assert!(!report.task_correct, "accuracy {}", report.task_accuracy);
    assert!(matches!(construct_map(&w), Err(Error::Assumption { name: "task correctness", .. })));
}

#[test]
fn world_invariants_are_enforced() {
    let xs = sample_correct_inputs(TaskSpec::heq(), trained(), 4, 11).unwrap();
    let alg = AlgorithmId::BothEq.model();
    let make = |xs: Vec<Vec<f64>>, c| FiniteWorld::new(xs, trained().clone(), alg.clone(), 1, c, 1);
    assert!(make(xs[..1].to_vec(), coords(&[("x1==x2", 0), ("x3==x4", 1)])).is_err());
    assert!(make(xs.clone(), coords(&[("x1==x2", 2), ("x3==x4", 2)])).is_err());
    assert!(make(xs.clone(), coords(&[("x1==x2", 0)])).is_err());
    assert!(make(xs.clone(), coords(&[("x1==x2", 0), ("x3==x4", 16)])).is_err());
    // sixteen coordinates, two nodes: never short of an unused one here, so
    // check the rule on a width-2 network instead
    let tiny = Mlp::new(&MlpConfig {
        hidden_dims: vec![2, 2, 2],
        ..MlpConfig::new(16, 2, 0)
    })
    .unwrap();
    let w = FiniteWorld::new(xs, tiny, alg, 1, coords(&[("x1==x2", 0), ("x3==x4", 1)]), 1);
    assert!(matches!(w, Err(Error::Validation(_))));
}

#[test]
fn constructed_map_is_a_bijection_with_the_required_shape() {
    let w = both_eq_world(8, 1);
    let map = construct_map(&w).unwrap();
    assert_eq!(map.len(), map.inverse_len());
    for (hk, z) in map.forward_entries() {
        let h = map.invert(z).expect("image has a preimage");
        assert_eq!(&bits(h), hk);
        assert_eq!(map.apply(h).unwrap(), z.as_slice());
    }
    for (zk, (h, _)) in map.inverse_entries() {
        assert_eq!(&bits(map.apply(h).unwrap()), zk);
    }
    // fresh images avoid the clean states
    let clean: BTreeSet<Vec<u64>> = map.clean_states().iter().map(|s| bits(s)).collect();
    for (_, (h, origin)) in map.inverse_entries() {
        if let Origin::Fresh(_) = origin {
            assert!(!clean.contains(&bits(h)));
        }
    }
    // per-dimension injectivity on clean states
    for d in 0..16 {
        let column: BTreeSet<u64> = map.clean_states().iter().map(|s| map.apply(s).unwrap()[d].to_bits()).collect();
        assert_eq!(column.len(), 8, "dimension {d}");
    }
}

#[test]
fn clean_round_trip_and_node_decoding() {
    let w = both_eq_world(8, 1);
    let map = construct_map(&w).unwrap();
    for (k, x) in w.inputs().iter().enumerate() {
        let h = &map.clean_states()[k];
        let z = map.apply(h).unwrap();
        let back = map.invert(z).unwrap();
        let logits = w.dnn().logits_from_layer(&Tensor::new(vec![1, 16], back.to_vec()).unwrap(), 1).unwrap();
        assert_eq!(strict_argmax(logits.data()), Some(TaskSpec::heq().label(x)));
        for (i, (node, c)) in w.coords().iter().enumerate() {
            let want = w.alg().run_until(x, &AlgIntervention::new(), node).unwrap();
            let threshold = usize::from(z[*c] >= 0.5);
            assert_eq!(Some(threshold == 1), want.as_bool());
            assert!(map.decode_value(z, i, &w).unwrap().same(&want));
        }
    }
}

#[test]
fn perfect_iia_and_the_mutation_control() {
    let w = both_eq_world(8, 1);
    let map = construct_map(&w).unwrap();
    let report = verify_perfect_iia(&w, &map).unwrap();
    assert_eq!(report.iia, 1.0);
    assert_eq!(report.n, 8 * 81);
    let broken = mutation_test(&w, &map).unwrap();
    assert!(broken.iia < 1.0, "{}", broken.iia);
}

#[test]
fn vector_valued_nodes_are_supported() {
    let xs = sample_correct_inputs(TaskSpec::heq(), trained(), 6, 12).unwrap();
    let w = FiniteWorld::new(
        xs,
        trained().clone(),
        AlgorithmId::IdentityFirst.model(),
        2,
        coords(&[("v_x1", 5)]),
        1,
    )
    .unwrap();
    let map = construct_map(&w).unwrap();
    assert_eq!(verify_perfect_iia(&w, &map).unwrap().iia, 1.0);
}
