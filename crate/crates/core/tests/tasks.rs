use std::collections::BTreeMap;

use cal_core::causal::{vec_eq, AlgIntervention, CausalModel};
use cal_core::rng;
use cal_core::tasks::{
    algorithm_library, gen_base_dataset, gen_base_shard, gen_interchange_dataset, gold_label, AlgorithmId, NodePolicy,
    TaskKind, TaskSpec, SHARD_SIZE,
};

fn within(frac: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&frac)
}

#[test]
fn heq_equalities_hold_half_the_time() {
    let data = gen_base_dataset(TaskSpec::heq(), 10_000, 1);
    let eq12 = data.iter().filter(|s| vec_eq(&s.x[0..4], &s.x[4..8])).count() as f64 / 1e4;
    let eq34 = data.iter().filter(|s| vec_eq(&s.x[8..12], &s.x[12..16])).count() as f64 / 1e4;
    assert!(within(eq12, 0.47, 0.53) && within(eq34, 0.47, 0.53), "{eq12} {eq34}");
    assert!(data.iter().all(|s| s.x.iter().all(|v| (-0.5..0.5).contains(v))));
}

#[test]
fn dlaw_labels_are_balanced() {
    let data = gen_base_dataset(TaskSpec::dlaw(), 10_000, 2);
    let t = data.iter().filter(|s| s.y == 1).count() as f64 / 1e4;
    assert!(within(t, 0.47, 0.53), "{t}");
}

#[test]
fn generators_are_pure_functions_of_their_arguments() {
    let a = gen_base_dataset(TaskSpec::heq(), 20_000, 3);
    assert_eq!(a, gen_base_dataset(TaskSpec::heq(), 20_000, 3));
    assert_ne!(a, gen_base_dataset(TaskSpec::heq(), 20_000, 4));
    // shards line up with the full dataset, so shards can be produced separately
    assert_eq!(&a[SHARD_SIZE..2 * SHARD_SIZE], gen_base_shard(TaskSpec::heq(), SHARD_SIZE, 3, 1).as_slice());
    let i1 = gen_interchange_dataset(TaskSpec::dlaw(), AlgorithmId::AndOr, 3_000, 5, NodePolicy::AllSubsets).unwrap();
    let i2 = gen_interchange_dataset(TaskSpec::dlaw(), AlgorithmId::AndOr, 3_000, 5, NodePolicy::AllSubsets).unwrap();
    assert_eq!(i1, i2);
}

#[test]
fn every_algorithm_solves_its_task() {
    for (id, model) in algorithm_library() {
        let task = TaskSpec::of(id.task());
        let mut r = rng::stream(6, id.name());
        for _ in 0..10_000 {
            let x = task.sample_input(&mut r);
            assert_eq!(model.label(&x).unwrap(), task.label(&x), "{id}");
        }
    }
}

#[test]
fn distributive_law_algorithms_agree_without_interventions() {
    let (aoa, ao) = (AlgorithmId::AndOrAnd.model(), AlgorithmId::AndOr.model());
    let mut r = rng::stream(7, "dlaw");
    for _ in 0..10_000 {
        let x = TaskSpec::dlaw().sample_input(&mut r);
        assert_eq!(aoa.label(&x).unwrap(), ao.label(&x).unwrap());
    }
}

#[test]
fn two_node_policy_splits_in_thirds() {
    for alg in [AlgorithmId::BothEq, AlgorithmId::AndOrAnd, AlgorithmId::AndOr] {
        let task = TaskSpec::of(alg.task());
        let data = gen_interchange_dataset(task, alg, 30_000, 8, NodePolicy::NonEmptySubsets).unwrap();
        let nodes = alg.model().inner_nodes().into_iter().map(String::from).collect::<Vec<_>>();
        let mut counts = [0usize; 3];
        for s in &data {
            match (s.sources.contains_key(&nodes[0]), s.sources.contains_key(&nodes[1])) {
                (true, false) => counts[0] += 1,
                (false, true) => counts[1] += 1,
                (true, true) => counts[2] += 1,
                (false, false) => panic!("empty intervention under the non-empty policy"),
            }
        }
        for c in counts {
            let f = c as f64 / 30_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{alg}: {counts:?}");
        }
    }
}

#[test]
fn counterfactual_training_mixture_is_quartered() {
    let data =
        gen_interchange_dataset(TaskSpec::dlaw(), AlgorithmId::AndOrAnd, 20_000, 9, NodePolicy::AllSubsets).unwrap();
    let mut counts = BTreeMap::new();
    for s in &data {
        *counts.entry(s.sources.len() * 10 + usize::from(s.sources.contains_key("(x1==x2)&(x3==x4)"))).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 4);
    for c in counts.values() {
        assert!((*c as f64 / 20_000.0 - 0.25).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn single_node_algorithms_always_intervene_their_node() {
    for (alg, node) in [(AlgorithmId::LeftEq, "x1==x2"), (AlgorithmId::IdentityFirst, "v_x1")] {
        let data = gen_interchange_dataset(TaskSpec::heq(), alg, 1_000, 10, NodePolicy::NonEmptySubsets).unwrap();
        assert!(data.iter().all(|s| s.sources.len() == 1 && s.sources.contains_key(node)), "{alg}");
    }
}

#[test]
fn dlaw_interventions_change_the_output_half_the_time() {
    for alg in [AlgorithmId::AndOrAnd, AlgorithmId::AndOr] {
        let data = gen_interchange_dataset(TaskSpec::dlaw(), alg, 10_000, 11, NodePolicy::NonEmptySubsets).unwrap();
        let changed = data.iter().filter(|s| s.y_gold != TaskSpec::dlaw().label(&s.x_base)).count() as f64 / 1e4;
        assert!(within(changed, 0.47, 0.53), "{alg}: {changed}");
    }
}

/// Gold labels recomputed from the algorithm trace by hand.
fn recompute_gold(model: &CausalModel, s: &cal_core::tasks::InterchangeSample) -> usize {
    let mut iv = AlgIntervention::new();
    for (node, src) in &s.sources {
        let idx = model.index_of(node).unwrap();
        let trace = model.evaluate(src, &AlgIntervention::new()).unwrap().trace;
        iv.insert(node.clone(), trace.get(idx).clone());
    }
    model.evaluate(&s.x_base, &iv).unwrap().output.as_label().unwrap()
}

#[test]
fn stored_gold_labels_match_the_trace() {
    for alg in AlgorithmId::ALL {
        let model = alg.model();
        let task = TaskSpec::of(alg.task());
        for s in gen_interchange_dataset(task, alg, 2_000, 12, NodePolicy::NonEmptySubsets).unwrap() {
            assert_eq!(s.y_gold, recompute_gold(&model, &s), "{alg}");
            assert_eq!(s.y_gold, gold_label(&model, &s.x_base, &s.sources).unwrap());
        }
    }
}

#[test]
fn null_interventions_keep_the_task_label() {
    for alg in AlgorithmId::ALL {
        let model = alg.model();
        let task = TaskSpec::of(alg.task());
        let mut r = rng::stream(13, alg.name());
        for _ in 0..1_000 {
            let x = task.sample_input(&mut r);
            let trace = model.evaluate(&x, &AlgIntervention::new()).unwrap().trace;
            for (i, v) in trace.values().iter().enumerate() {
                if matches!(model.kind(i), cal_core::causal::NodeKind::Input) {
                    continue;
                }
                let iv = AlgIntervention::from([(model.id(i).to_string(), v.clone())]);
                assert_eq!(model.evaluate(&x, &iv).unwrap().output.as_label().unwrap(), task.label(&x));
            }
        }
    }
}

#[test]
fn evaluation_ignores_node_listing_order() {
    for alg in AlgorithmId::ALL {
        let spec = alg.spec();
        let mut reversed = spec.clone();
        reversed.nodes.reverse();
        let (a, b) = (CausalModel::from_spec(&spec).unwrap(), CausalModel::from_spec(&reversed).unwrap());
        let task = TaskSpec::of(alg.task());
        let mut r = rng::stream(14, alg.name());
        for _ in 0..500 {
            let x = task.sample_input(&mut r);
            let src = task.sample_input(&mut r);
            let node = a.inner_nodes()[0].to_string();
            let iv = AlgIntervention::from([(node.clone(), a.run_until(&src, &AlgIntervention::new(), &node).unwrap())]);
            assert!(a.evaluate(&x, &iv).unwrap().output.same(&b.evaluate(&x, &iv).unwrap().output));
        }
    }
}

#[test]
fn task_kinds_parse_and_print() {
    assert_eq!("heq".parse::<TaskKind>().unwrap(), TaskKind::Heq);
    assert_eq!(TaskKind::Dlaw.to_string(), "dlaw");
    assert!("and-or-xor".parse::<AlgorithmId>().is_err());
}
