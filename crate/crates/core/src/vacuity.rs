//! Lookup-table alignment maps on a finite input set.
//!
//! Given an explicit list of inputs, a network and an algorithm, this
//! module builds a bijection on one hidden layer under which every
//! input-restricted interchange intervention on the algorithm is realised
//! exactly by the network, then verifies that claim by brute force.
//!
//! Encoding of a clean state `h_k` (the `k`-th distinct hidden state):
//! the coordinate of node `v` holds `value_v + k·2⁻³⁰` (booleans as 0/1,
//! vector-valued nodes as 0), every other coordinate holds `k`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::causal::{AlgIntervention, CausalModel, NodeValue};
use crate::das::IiaReport;
use crate::error::{Error, Result};
use crate::mlp::{rows_of, strict_argmax, Mlp};
use crate::rng;
use crate::tasks::TaskSpec;

/// Tag spacing between consecutive clean states at a node coordinate.
pub const TAG_EPS: f64 = 1.0 / (1u64 << 30) as f64;
/// Default cap on the number of enumerated interventions.
pub const DEFAULT_BUDGET: usize = 1_000_000;

/// Restarts, steps and learning rate of the class-realising search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            steps: 2000,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FiniteWorld {
    xs: Vec<Vec<f64>>,
    dnn: Mlp,
    alg: CausalModel,
    layer: usize,
    /// Inner node ids in topological order, with their coordinate.
    coords: Vec<(String, usize)>,
    unused: usize,
    depth: usize,
    pub budget: usize,
    pub search: SearchConfig,
    pub seed: u64,
}

impl FiniteWorld {
    pub fn new(
        xs: Vec<Vec<f64>>,
        dnn: Mlp,
        alg: CausalModel,
        layer: usize,
        coords: BTreeMap<String, usize>,
        depth: usize,
    ) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Validation("a finite world needs at least two inputs".into()));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != dnn.input_dim() || x.len() != alg.input_dim()) {
            return Err(Error::Validation(format!("input of width {} does not fit network and algorithm", x.len())));
        }
        let dim = dnn.layer_dim(layer)?;
        let inner = alg.inner_nodes();
        let mut ordered = Vec::with_capacity(inner.len());
        let mut used = BTreeSet::new();
        for node in &inner {
            let c = *coords
                .get(*node)
                .ok_or_else(|| Error::Validation(format!("inner node {:?} has no coordinate", node)))?;
            if c >= dim || !used.insert(c) {
                return Err(Error::Validation(format!("coordinate {} is out of range or shared", c)));
            }
            ordered.push((String::from(*node), c));
        }
        if let Some(k) = coords.keys().find(|k| !inner.contains(&k.as_str())) {
            return Err(Error::Validation(format!("{:?} is not an inner node of {}", k, alg.name())));
        }
        let unused = (0..dim)
            .find(|c| !used.contains(c))
            .ok_or_else(|| Error::Validation("no unused coordinate is left at this layer".into()))?;
        Ok(Self {
            xs,
            dnn,
            alg,
            layer,
            coords: ordered,
            unused,
            depth,
            budget: DEFAULT_BUDGET,
            search: SearchConfig::default(),
            seed: 0,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn dnn(&self) -> &Mlp {
        &self.dnn
    }

    pub fn alg(&self) -> &CausalModel {
        &self.alg
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn coords(&self) -> &[(String, usize)] {
        &self.coords
    }

    fn hidden(&self, layer: usize) -> Result<Tensor> {
        let x = Tensor::new(vec![self.xs.len(), self.dnn.input_dim()], rows_of(self.xs.iter().map(Vec::as_slice)))?;
        self.dnn.forward_to_layer(&x, layer)
    }
}

/// Draw `n` inputs the network classifies correctly.
pub fn sample_correct_inputs(task: TaskSpec, dnn: &Mlp, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut r = rng::stream(seed, "vacuity-inputs");
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        if tries > 1000 * n.max(1) {
            return Err(Error::Construction("could not find inputs the network classifies correctly".into()));
        }
        let x = task.sample_input(&mut r);
        let pred = dnn.predict(&Tensor::new(vec![1, x.len()], x.clone())?)?;
        if pred[0] == Some(task.label(&x)) {
            out.push(x);
        }
    }
    Ok(out)
}

/// One possible value of a node under an input-restricted intervention:
/// the latent coordinate copied from clean state `state`, paired with the
/// algorithm value it stands for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub state: usize,
    pub value: NodeValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    /// Candidate settings per inner node (world order).
    pub settings: Vec<Vec<Setting>>,
    /// Every intervention: per node, an index into `settings` or `None`.
    pub interventions: Vec<Vec<Option<usize>>>,
}

impl Enumeration {
    pub fn count(&self) -> usize {
        self.interventions.len()
    }

    /// The algorithm-side intervention.
    pub fn alg_intervention(&self, world: &FiniteWorld, i: usize) -> AlgIntervention {
        let mut iv = AlgIntervention::new();
        for (k, choice) in self.interventions[i].iter().enumerate() {
            if let Some(s) = choice {
                iv.insert(world.coords[k].0.clone(), self.settings[k][*s].value.clone());
            }
        }
        iv
    }
}

fn setting_key(s: &Setting) -> (usize, Vec<u64>, u8) {
    match &s.value {
        NodeValue::Bool(b) => (s.state, vec![], u8::from(*b)),
        NodeValue::Vector(v) => (s.state, v.iter().map(|x| x.to_bits()).collect(), 2),
        NodeValue::Label(l) => (s.state, vec![*l as u64], 3),
    }
}

/// Input-restricted interventions up to `world.depth()`. Depth 1 draws node
/// values from clean runs on the inputs; each further level adds the
/// values nodes take under the previous level's interventions.
pub fn enumerate_interventions(world: &FiniteWorld) -> Result<Enumeration> {
    let nodes = world.coords.len();
    let mut settings: Vec<Vec<Setting>> = vec![Vec::new(); nodes];
    let mut enumeration = product(&settings, world.budget)?;
    if world.depth == 0 {
        return Ok(enumeration);
    }
    let none = AlgIntervention::new();
    for (k, (node, _)) in world.coords.iter().enumerate() {
        for (state, x) in world.xs.iter().enumerate() {
            settings[k].push(Setting {
                state,
                value: world.alg.run_until(x, &none, node)?,
            });
        }
    }
    enumeration = product(&settings, world.budget)?;
    for _ in 1..world.depth {
        let mut seen: Vec<BTreeSet<(usize, Vec<u64>, u8)>> =
            settings.iter().map(|s| s.iter().map(setting_key).collect()).collect();
        let mut grown = settings.clone();
        for i in 0..enumeration.count() {
            let iv = enumeration.alg_intervention(world, i);
            for (state, x) in world.xs.iter().enumerate() {
                for (k, (node, _)) in world.coords.iter().enumerate() {
                    if enumeration.interventions[i][k].is_some() {
                        continue;
                    }
                    let s = Setting {
                        state,
                        value: world.alg.run_until(x, &iv, node)?,
                    };
                    if seen[k].insert(setting_key(&s)) {
                        grown[k].push(s);
                    }
                }
            }
        }
        if grown.iter().zip(&settings).all(|(g, s)| g.len() == s.len()) {
            break;
        }
        settings = grown;
        enumeration = product(&settings, world.budget)?;
    }
    Ok(enumeration)
}

fn product(settings: &[Vec<Setting>], budget: usize) -> Result<Enumeration> {
    let mut total: usize = 1;
    for s in settings {
        total = total
            .checked_mul(s.len() + 1)
            .filter(|&t| t <= budget)
            .ok_or_else(|| Error::Budget(format!("more than {} interventions to enumerate", budget)))?;
    }
    let mut interventions = Vec::with_capacity(total);
    let mut cur = vec![None; settings.len()];
    fill(settings, 0, &mut cur, &mut interventions);
    Ok(Enumeration {
        settings: settings.to_vec(),
        interventions,
    })
}

fn fill(settings: &[Vec<Setting>], k: usize, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
    if k == settings.len() {
        out.push(cur.clone());
        return;
    }
    cur[k] = None;
    fill(settings, k + 1, cur, out);
    for i in 0..settings[k].len() {
        cur[k] = Some(i);
        fill(settings, k + 1, cur, out);
    }
    cur[k] = None;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Per hidden layer: all states of distinct inputs are distinct.
    pub injective_layers: Vec<bool>,
    /// Per class: a hidden state with that class as strict argmax was found.
    pub surjective_classes: Vec<bool>,
    /// Network prediction equals the algorithm's output on every input.
    pub task_correct: bool,
    pub task_accuracy: f64,
    /// The class-realising states found at the world's layer.
    pub class_states: Vec<Option<Vec<f64>>>,
}

impl AssumptionReport {
    pub fn injective(&self) -> bool {
        self.injective_layers.iter().all(|&b| b)
    }

    pub fn surjective(&self) -> bool {
        self.surjective_classes.iter().all(|&b| b)
    }

    pub fn passed(&self) -> bool {
        self.injective() && self.surjective() && self.task_correct
    }

    /// The first failed assumption as an error.
    pub fn require(&self) -> Result<()> {
        if let Some(l) = self.injective_layers.iter().position(|&b| !b) {
            return Err(Error::Assumption {
                name: "injectivity",
                detail: format!("two inputs share a hidden state at layer {}", l + 1),
            });
        }
        if let Some(c) = self.surjective_classes.iter().position(|&b| !b) {
            return Err(Error::Assumption {
                name: "strict surjectivity",
                detail: format!("no hidden state realises class {}", c),
            });
        }
        if !self.task_correct {
            return Err(Error::Assumption {
                name: "task correctness",
                detail: format!("network accuracy on the inputs is {}", self.task_accuracy),
            });
        }
        Ok(())
    }
}

/// Check injectivity at every layer, strict surjectivity at the world's
/// layer, and task correctness on the inputs.
pub fn check_assumptions(world: &FiniteWorld) -> Result<AssumptionReport> {
    let n = world.xs.len();
    let mut distinct_inputs = BTreeSet::new();
    for x in &world.xs {
        distinct_inputs.insert(bits(x));
    }
    let mut injective_layers = Vec::new();
    for layer in 1..=world.dnn.num_layers() {
        let h = world.hidden(layer)?;
        let d = h.cols();
        let states: BTreeSet<Vec<u64>> = h.data().chunks_exact(d).map(bits).collect();
        injective_layers.push(states.len() == distinct_inputs.len());
    }
    let mut class_states = Vec::with_capacity(world.dnn.num_classes());
    for class in 0..world.dnn.num_classes() {
        class_states.push(realize_class(world, class)?);
    }
    let x = Tensor::new(vec![n, world.dnn.input_dim()], rows_of(world.xs.iter().map(Vec::as_slice)))?;
    let pred = world.dnn.predict(&x)?;
    let mut hits = 0;
    for (p, x) in pred.iter().zip(&world.xs) {
        if *p == Some(world.alg.label(x)?) {
            hits += 1;
        }
    }
    Ok(AssumptionReport {
        injective_layers,
        surjective_classes: class_states.iter().map(Option::is_some).collect(),
        task_correct: hits == n,
        task_accuracy: hits as f64 / n as f64,
        class_states,
    })
}

/// Gradient ascent on the class margin from several random starts; returns
/// the start that ends with the largest margin, if any has `class` as its
/// strict argmax.
fn realize_class(world: &FiniteWorld, class: usize) -> Result<Option<Vec<f64>>> {
    let d = world.dnn.layer_dim(world.layer)?;
    let rows = world.search.restarts.max(1);
    let mut r = rng::stream(world.seed, &format!("vacuity-class-{}", class));
    let init: Vec<f64> = (0..rows * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut h = Tensor::new(vec![rows, d], init)?;
    let mut opt = Adam::new(AdamConfig {
        lr: world.search.lr,
        ..AdamConfig::default()
    });
    let targets = vec![class; rows];
    for _ in 0..world.search.steps {
        let mut tape = Tape::new();
        let hv = tape.param(&h);
        let vars = world.dnn.tape_vars(&mut tape, false);
        let logits = world.dnn.tape_logits_from_layer(&mut tape, &vars, hv, world.layer)?;
        let margin = tape.class_margin(logits, &targets)?;
        let loss = tape.scale(margin, -1.0);
        let grads = tape.backward(loss)?;
        grads.write_to(hv, &mut h)?;
        opt.step(&mut [&mut h])?;
    }
    let logits = world.dnn.logits_from_layer(&h, world.layer)?;
    let c = logits.cols();
    let mut best: Option<(f64, usize)> = None;
    for (i, row) in logits.data().chunks_exact(c).enumerate() {
        if strict_argmax(row) != Some(class) {
            continue;
        }
        let rival = (0..c).filter(|&j| j != class).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let m = row[class] - rival;
        if best.map_or(true, |(bm, _)| m > bm) {
            best = Some((m, i));
        }
    }
    Ok(best.map(|(_, i)| h.row(i).to_vec()))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Where an inverse-table image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// The clean hidden state with this index.
    Clean(usize),
    /// A fresh state realising this class, outside the clean set.
    Fresh(usize),
}

/// Bit-exact forward and inverse tables of a finite bijection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupMap {
    dim: usize,
    coords: Vec<(String, usize)>,
    unused: usize,
    /// Clean states in input order.
    clean: Vec<Vec<f64>>,
    forward: BTreeMap<Vec<u64>, Vec<f64>>,
    inverse: BTreeMap<Vec<u64>, (Vec<f64>, Origin)>,
}

impl LookupMap {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn inverse_len(&self) -> usize {
        self.inverse.len()
    }

    pub fn fresh_count(&self) -> usize {
        self.inverse.values().filter(|(_, o)| matches!(o, Origin::Fresh(_))).count()
    }

    pub fn apply(&self, h: &[f64]) -> Option<&[f64]> {
        self.forward.get(&bits(h)).map(Vec::as_slice)
    }

    pub fn invert(&self, z: &[f64]) -> Option<&[f64]> {
        self.inverse.get(&bits(z)).map(|(h, _)| h.as_slice())
    }

    pub fn forward_entries(&self) -> impl Iterator<Item = (&Vec<u64>, &Vec<f64>)> {
        self.forward.iter()
    }

    pub fn inverse_entries(&self) -> impl Iterator<Item = (&Vec<u64>, &(Vec<f64>, Origin))> {
        self.inverse.iter()
    }

    pub fn clean_states(&self) -> &[Vec<f64>] {
        &self.clean
    }

    /// Clean state index recorded in a latent vector's unused coordinate.
    pub fn decode_base(&self, z: &[f64]) -> Option<usize> {
        let k = z.get(self.unused)?;
        let i = *k as usize;
        (i as f64 == *k && i < self.clean.len()).then_some(i)
    }

    /// Clean state index whose tag sits at node coordinate `k` of `z`.
    pub fn decode_tag(&self, z: &[f64], k: usize) -> Option<usize> {
        let v = *z.get(self.coords.get(k)?.1)?;
        let frac = v - libm::floor(v);
        let i = libm::round(frac / TAG_EPS) as usize;
        (i < self.clean.len()).then_some(i)
    }

    /// Node value encoded at node coordinate `k` of `z`, resolved through
    /// the state its tag names.
    pub fn decode_value(&self, z: &[f64], k: usize, world: &FiniteWorld) -> Result<NodeValue> {
        let state = self
            .decode_tag(z, k)
            .ok_or_else(|| Error::Construction("latent value carries no valid tag".into()))?;
        world.alg.run_until(&world.xs[state], &AlgIntervention::new(), &self.coords[k].0)
    }

    /// Replace the image of one inverse-table key; returns the old image.
    pub fn corrupt_inverse(&mut self, key: &[u64], replacement: Vec<f64>) -> Option<Vec<f64>> {
        self.inverse.get_mut(key).map(|(h, _)| core::mem::replace(h, replacement))
    }
}

fn encode(value: &NodeValue) -> f64 {
    match value {
        NodeValue::Bool(true) => 1.0,
        NodeValue::Label(l) => *l as f64,
        _ => 0.0,
    }
}

/// Latent vector of clean state `k`.
fn clean_latent(world: &FiniteWorld, dim: usize, k: usize) -> Result<Vec<f64>> {
    let mut z = vec![k as f64; dim];
    for (node, c) in &world.coords {
        let v = world.alg.run_until(&world.xs[k], &AlgIntervention::new(), node)?;
        z[*c] = encode(&v) + k as f64 * TAG_EPS;
    }
    Ok(z)
}

/// Build the lookup map after checking the assumptions.
pub fn construct_map(world: &FiniteWorld) -> Result<LookupMap> {
    let report = check_assumptions(world)?;
    report.require()?;
    let enumeration = enumerate_interventions(world)?;
    construct_with(world, &report, &enumeration)
}

/// Build the lookup map from an existing assumption report and enumeration.
pub fn construct_with(world: &FiniteWorld, report: &AssumptionReport, enumeration: &Enumeration) -> Result<LookupMap> {
    report.require()?;
    let h = world.hidden(world.layer)?;
    let dim = h.cols();
    let clean: Vec<Vec<f64>> = h.data().chunks_exact(dim).map(<[f64]>::to_vec).collect();
    let clean_keys: BTreeSet<Vec<u64>> = clean.iter().map(|s| bits(s)).collect();
    let mut forward = BTreeMap::new();
    let mut inverse = BTreeMap::new();
    let mut latents = Vec::with_capacity(clean.len());
    for (k, s) in clean.iter().enumerate() {
        let z = clean_latent(world, dim, k)?;
        forward.insert(bits(s), z.clone());
        inverse.insert(bits(&z), (s.clone(), Origin::Clean(k)));
        latents.push(z);
    }
    let mut map = LookupMap {
        dim,
        coords: world.coords.clone(),
        unused: world.unused,
        clean,
        forward,
        inverse,
    };

    let mut fresh = FreshStates::new(world, report, clean_keys)?;
    for base in 0..world.xs.len() {
        for i in 0..enumeration.count() {
            let z = patched_latent(&latents[base], enumeration, i, &latents, &world.coords);
            let key = bits(&z);
            if map.inverse.contains_key(&key) {
                continue;
            }
            let mut iv = AlgIntervention::new();
            for k in 0..world.coords.len() {
                iv.insert(world.coords[k].0.clone(), map.decode_value(&z, k, world)?);
            }
            let base_idx = map
                .decode_base(&z)
                .ok_or_else(|| Error::Construction("latent vector names no base state".into()))?;
            let class = world
                .alg
                .evaluate(&world.xs[base_idx], &iv)?
                .output
                .as_label()
                .ok_or_else(|| Error::Construction("algorithm output is not a class".into()))?;
            let h = fresh.next(class)?;
            map.forward.insert(bits(&h), z.clone());
            map.inverse.insert(key, (h, Origin::Fresh(class)));
        }
    }
    Ok(map)
}

fn patched_latent(
    base: &[f64],
    enumeration: &Enumeration,
    i: usize,
    latents: &[Vec<f64>],
    coords: &[(String, usize)],
) -> Vec<f64> {
    let mut z = base.to_vec();
    for (k, choice) in enumeration.interventions[i].iter().enumerate() {
        if let Some(s) = choice {
            let state = enumeration.settings[k][*s].state;
            let c = coords[k].1;
            z[c] = latents[state][c];
        }
    }
    z
}

/// Supply of distinct hidden states realising each class, none of them
/// clean: small steps along a fixed random direction from the state the
/// class search found.
struct FreshStates<'a> {
    world: &'a FiniteWorld,
    anchors: Vec<Vec<f64>>,
    directions: Vec<Vec<f64>>,
    next_step: Vec<u64>,
    taken: BTreeSet<Vec<u64>>,
}

impl<'a> FreshStates<'a> {
    fn new(world: &'a FiniteWorld, report: &AssumptionReport, clean: BTreeSet<Vec<u64>>) -> Result<Self> {
        let mut anchors = Vec::new();
        let mut directions = Vec::new();
        let mut r = rng::stream(world.seed, "vacuity-fresh");
        for (class, s) in report.class_states.iter().enumerate() {
            let s = s
                .clone()
                .ok_or_else(|| Error::Construction(format!("no hidden state realises class {}", class)))?;
            let scale = 1e-9 * (1.0 + s.iter().map(|v| v.abs()).fold(0.0, f64::max));
            directions.push(s.iter().map(|_| scale * r.random_range(0.5..1.0)).collect());
            anchors.push(s);
        }
        Ok(Self {
            world,
            next_step: vec![1; anchors.len()],
            anchors,
            directions,
            taken: clean,
        })
    }

    fn next(&mut self, class: usize) -> Result<Vec<f64>> {
        for _ in 0..10_000 {
            let t = self.next_step[class] as f64;
            self.next_step[class] += 1;
            let h: Vec<f64> = self.anchors[class]
                .iter()
                .zip(&self.directions[class])
                .map(|(a, d)| a + t * d)
                .collect();
            let key = bits(&h);
            if self.taken.contains(&key) {
                continue;
            }
            let logits = self
                .world
                .dnn
                .logits_from_layer(&Tensor::new(vec![1, h.len()], h.clone())?, self.world.layer)?;
            if strict_argmax(logits.data()) != Some(class) {
                continue;
            }
            self.taken.insert(key);
            return Ok(h);
        }
        Err(Error::Construction(format!("ran out of fresh states realising class {}", class)))
    }
}

/// Every base input under every enumerated intervention: the fraction where
/// the network's strict argmax through the lookup map equals the
/// algorithm's counterfactual output.
pub fn verify_perfect_iia(world: &FiniteWorld, map: &LookupMap) -> Result<IiaReport> {
    let enumeration = enumerate_interventions(world)?;
    verify_with(world, map, &enumeration)
}

/// [`verify_perfect_iia`] over a given enumeration.
pub fn verify_with(world: &FiniteWorld, map: &LookupMap, enumeration: &Enumeration) -> Result<IiaReport> {
    let h = world.hidden(world.layer)?;
    let dim = h.cols();
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut node_counts: BTreeMap<String, usize> = world.coords.iter().map(|(n, _)| (n.clone(), 0)).collect();
    let mut plain_hits = 0usize;
    for (base, hb) in h.data().chunks_exact(dim).enumerate() {
        let x = &world.xs[base];
        let pred = world.dnn.predict(&Tensor::new(vec![1, x.len()], x.clone())?)?;
        if pred[0] == Some(world.alg.label(x)?) {
            plain_hits += 1;
        }
        let zb = map.apply(hb);
        for i in 0..enumeration.count() {
            total += 1;
            let gold = world
                .alg
                .evaluate(x, &enumeration.alg_intervention(world, i))?
                .output
                .as_label();
            let Some(zb) = zb else { continue };
            let mut z = zb.to_vec();
            for (k, choice) in enumeration.interventions[i].iter().enumerate() {
                if let Some(s) = choice {
                    *node_counts.get_mut(&world.coords[k].0).expect("known node") += 1;
                    let src = &map.clean[enumeration.settings[k][*s].state];
                    let Some(zs) = map.apply(src) else { continue };
                    let c = world.coords[k].1;
                    z[c] = zs[c];
                }
            }
            let Some(h2) = map.invert(&z) else { continue };
            let logits = world
                .dnn
                .logits_from_layer(&Tensor::new(vec![1, dim], h2.to_vec())?, world.layer)?;
            if gold.is_some() && strict_argmax(logits.data()) == gold {
                hits += 1;
            }
        }
    }
    Ok(IiaReport {
        iia: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        n: total,
        node_counts,
        dnn_plain_accuracy: plain_hits as f64 / world.xs.len() as f64,
        config_hash: String::new(),
        seed: world.seed,
    })
}

/// Sensitivity control: swap the image of one fresh inverse-table entry for
/// a clean state of a different class and report the resulting IIA.
pub fn mutation_test(world: &FiniteWorld, map: &LookupMap) -> Result<IiaReport> {
    let mut broken = map.clone();
    let (key, class) = map
        .inverse
        .iter()
        .find_map(|(k, (_, o))| match o {
            Origin::Fresh(c) => Some((k.clone(), *c)),
            Origin::Clean(_) => None,
        })
        .ok_or_else(|| Error::Construction("no intervention-only entry to corrupt".into()))?;
    let dim = map.dim;
    let replacement = map
        .clean
        .iter()
        .find(|s| {
            Tensor::new(vec![1, dim], s.to_vec())
                .and_then(|t| world.dnn.logits_from_layer(&t, world.layer))
                .map(|l| strict_argmax(l.data()) != Some(class))
                .unwrap_or(false)
        })
        .cloned()
        .ok_or_else(|| Error::Construction("no clean state of another class".into()))?;
    broken.corrupt_inverse(&key, replacement);
    verify_perfect_iia(world, &broken)
}
