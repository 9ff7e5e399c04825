use std::rc::Rc;
use std::time::Instant;

use autodiff::{attention_probs_into, gradcheck, Array, CsrMatrix, Graph};
use sta4clc::graphs::{build_multigraph, laplacian, Relation};
use sta4clc::model::toy::{toy_graph, toy_instance, ToyInstance, TOY_BLOCKS, TOY_WEEKS};
use sta4clc::model::{diffusion_loss, GraphTensors, LossTargets, Model, ModelConfig, ModelDims, PeriodBatch};

fn full() -> ModelConfig {
    ModelConfig { use_disaster_bias: true, use_diffusion_loss: true, use_multi_relation: true, ..Default::default() }
}

fn run(model: &Model, batch: &PeriodBatch) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, batch).unwrap();
    (g.value(out.delta).data().to_vec(), g.value(out.logits).data().to_vec())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn loss_check(toy: &ToyInstance) -> autodiff::GradCheckReport {
    let ToyInstance { model, batch, classes, delta_true, weights, .. } = toy;
    gradcheck(&model.params, 1e-6, 1e-4, |g, p| {
        let out = model.forward(g, p, batch).map_err(|e| autodiff::AdError::Invalid(e.to_string()))?;
        let targets = LossTargets { classes, delta_true, weights };
        let parts = model
            .total_loss(g, p, &out, targets, batch.graph.laplacian().clone())
            .map_err(|e| autodiff::AdError::Invalid(e.to_string()))?;
        Ok(parts.total)
    })
    .unwrap()
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let start = Instant::now();
    let toy = toy_instance(full(), 7).unwrap();
    assert_eq!(toy.batch.graph.n_relations(), 3);
    let report = loss_check(&toy);
    for name in ["decay.theta", "diffusion.a_plus", "diffusion.a_minus", "gat.r2.head1.u", "relation.w_a"] {
        assert!(report.get(name).is_some(), "{name} not checked");
    }
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
    // the decay rate must actually influence the loss
    assert!(report.get("decay.theta").unwrap().analytic != 0.0);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn shared_gat_gradients_match_finite_differences() {
    let toy = toy_instance(ModelConfig { share_gat: true, ..full() }, 11).unwrap();
    let report = loss_check(&toy);
    assert!(report.passed(), "{:#?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn zero_decay_matches_bias_off_bitwise() {
    let mut on = toy_instance(full(), 3).unwrap();
    on.batch.events = Rc::new(vec![Vec::new(); TOY_BLOCKS]);
    let off = Model { config: ModelConfig { use_disaster_bias: false, ..on.model.config.clone() }, ..on.model.clone() };
    let (d_on, l_on) = run(&on.model, &on.batch);
    let (d_off, l_off) = run(&off, &on.batch);
    assert_eq!(bits(&d_on), bits(&d_off));
    assert_eq!(bits(&l_on), bits(&l_off));
}

#[test]
fn bias_flag_dominates_events() {
    let toy = toy_instance(ModelConfig { use_disaster_bias: false, ..full() }, 5).unwrap();
    let mut empty = toy.batch.clone();
    empty.events = Rc::new(vec![Vec::new(); TOY_BLOCKS]);
    assert_eq!(bits(&run(&toy.model, &toy.batch).0), bits(&run(&toy.model, &empty).0));
}

#[test]
fn huge_bias_saturates_attention() {
    let (t, d) = (TOY_WEEKS, 4);
    let q: Vec<f64> = (0..t * d).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
    let k: Vec<f64> = (0..t * d).map(|i| ((i * 3) % 13) as f64 / 6.0 - 1.0).collect();
    let mut bias = vec![0.0; t];
    bias[5] = 1e6;
    let mut probs = vec![0.0; t * t];
    attention_probs_into(&q, &k, Some(&bias), t, d, 0.5, &mut probs);
    for row in probs.chunks(t) {
        assert!(row[5] > 0.999);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_relation_ignores_sector_content() {
    let toy = toy_instance(ModelConfig { use_multi_relation: false, ..full() }, 9).unwrap();
    let g = toy_graph();
    let other = build_multigraph(
        TOY_BLOCKS,
        g.relations[0].clone(),
        vec![Relation::new("sector_111", [(0, 5, 1e4), (1, 2, 3.0)]).unwrap()],
    )
    .unwrap();
    let mut batch = toy.batch.clone();
    batch.graph = Rc::new(GraphTensors::new(&other));
    assert_eq!(bits(&run(&toy.model, &toy.batch).0), bits(&run(&toy.model, &batch).0));
}

#[test]
fn softmaxes_are_normalised_and_masked() {
    let toy = toy_instance(full(), 13).unwrap();
    let mut g = Graph::new();
    let p = toy.model.params.bind(&mut g);
    let out = toy.model.forward(&mut g, &p, &toy.batch).unwrap();

    let alpha = g.value(out.relation_weights.unwrap()).clone();
    assert_eq!(alpha.shape(), [TOY_BLOCKS, 3]);
    for i in 0..TOY_BLOCKS {
        let row = alpha.row(i);
        assert!(row.iter().all(|&a| a >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // block 0 has no edge in the second sector relation
    assert_eq!(alpha.at2(0, 2), 0.0);

    for (r, heads) in out.neighbourhood_weights.iter().enumerate() {
        let recv = toy.batch.graph.receivers(r);
        for &head in heads {
            let mut sums = vec![0.0; TOY_BLOCKS];
            for (&i, w) in recv.iter().zip(g.value(head).data()) {
                sums[i] += w;
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12), "{sums:?}");
        }
    }
    assert!(g.value(out.delta).data().iter().all(|d| d.abs() < 1.0));
}

#[test]
fn single_relation_has_identity_aggregation() {
    let toy = toy_instance(ModelConfig { use_multi_relation: false, ..full() }, 2).unwrap();
    let mut g = Graph::new();
    let p = toy.model.params.bind(&mut g);
    let out = toy.model.forward(&mut g, &p, &toy.batch).unwrap();
    assert!(out.relation_weights.is_none());
    assert_eq!(out.neighbourhood_weights.len(), 1);
}

#[test]
fn isolated_node_attends_to_itself() {
    let graph = build_multigraph(1, Relation::new("adjacency", []).unwrap(), Vec::new()).unwrap();
    let model =
        Model::new(ModelConfig { hidden_dim: 4, attention_heads: 2, ..full() }, ModelDims { z_dim: 1, n_relations: 1 })
            .unwrap();
    let batch = PeriodBatch {
        x: Array::new(&[1, 5, 6], (0..30).map(|i| i as f64 / 30.0).collect()).unwrap(),
        z: Array::matrix(1, 1, vec![0.5]),
        events: Rc::new(vec![vec![(1, 2.0)]]),
        graph: Rc::new(GraphTensors::new(&graph)),
    };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch).unwrap();
    for &w in &out.neighbourhood_weights[0] {
        assert_eq!(g.value(w).data(), [1.0]);
    }
}

#[test]
fn zero_parameters_predict_no_change() {
    let mut toy = toy_instance(full(), 1).unwrap();
    for a in toy.model.params.arrays_mut() {
        a.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let p = toy.model.params.bind(&mut g);
    let out = toy.model.forward(&mut g, &p, &toy.batch).unwrap();
    assert!(g.value(out.delta).data().iter().all(|&d| d == 0.0));
    let ones = vec![1.0; TOY_BLOCKS];
    let targets = LossTargets { classes: &toy.classes, delta_true: &[0.0; TOY_BLOCKS], weights: &ones };
    let parts = toy.model.total_loss(&mut g, &p, &out, targets, toy.batch.graph.laplacian().clone()).unwrap();
    assert!((g.value(parts.cls).item() - 3f64.ln()).abs() < 1e-15);
    assert_eq!(g.value(parts.reg).item(), 0.0);
    assert_eq!(g.value(parts.diff.unwrap()).item(), 0.0);
}

#[test]
fn gated_diffusion_leaves_weighted_sum() {
    for config in [ModelConfig { use_diffusion_loss: false, ..full() }, ModelConfig { lambda_diff: 0.0, ..full() }] {
        let toy = toy_instance(config, 4).unwrap();
        let mut g = Graph::new();
        let p = toy.model.params.bind(&mut g);
        let out = toy.model.forward(&mut g, &p, &toy.batch).unwrap();
        let targets = LossTargets { classes: &toy.classes, delta_true: &toy.delta_true, weights: &toy.weights };
        let parts = toy.model.total_loss(&mut g, &p, &out, targets, toy.batch.graph.laplacian().clone()).unwrap();
        let (c, r) = (g.value(parts.cls).item(), g.value(parts.reg).item());
        assert_eq!(g.value(parts.total).item(), c + r);
    }
}

fn diff_value(delta: &[f64], lap: CsrMatrix, a_plus: f64, a_minus: f64, lambda: f64) -> f64 {
    let mut g = Graph::new();
    let d = g.constant(Array::vector(delta.to_vec()));
    let ap = g.param(Array::vector(vec![a_plus]));
    let am = g.param(Array::vector(vec![a_minus]));
    let l = diffusion_loss(&mut g, d, Rc::new(lap), ap, am, lambda).unwrap();
    g.value(l).item()
}

#[test]
fn diffusion_loss_examples() {
    let empty = Relation::new("adjacency", []).unwrap();
    assert_eq!(diff_value(&[0.0; 3], laplacian(&empty, 3), 0.1, 0.1, 0.05), 0.0);
    // isolated positive node
    let v = diff_value(&[0.4, 0.0], laplacian(&empty, 2), 0.3, 0.7, 0.05);
    assert!((v - 0.05 * 0.16).abs() < 1e-15);
    // zero coefficients reduce to side means of squares
    let rel = Relation::new("adjacency", [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 0.5)]).unwrap();
    let d = [0.2, -0.4, 0.6, -0.1];
    let v = diff_value(&d, laplacian(&rel, 4), 0.0, 0.0, 0.05);
    let expect = 0.05 * ((0.04 + 0.36) / 2.0 + (0.16 + 0.01) / 2.0);
    assert!((v - expect).abs() < 1e-15);
}

#[test]
fn forward_is_permutation_equivariant() {
    let toy = toy_instance(full(), 21).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2]; // new position k holds old block perm[k]
    let mut inv = [0usize; TOY_BLOCKS];
    for (k, &old) in perm.iter().enumerate() {
        inv[old] = k;
    }
    let g0 = toy_graph();
    let relabel =
        |r: &Relation| Relation::new(r.name.clone(), r.edges.iter().map(|&(i, j, w)| (inv[i], inv[j], w))).unwrap();
    let graph =
        build_multigraph(TOY_BLOCKS, relabel(&g0.relations[0]), g0.relations[1..].iter().map(relabel).collect())
            .unwrap();
    let rows = |a: &Array| {
        let w = a.len() / TOY_BLOCKS;
        Array::new(a.shape(), perm.iter().flat_map(|&old| a.data()[old * w..(old + 1) * w].to_vec()).collect()).unwrap()
    };
    let batch = PeriodBatch {
        x: rows(&toy.batch.x),
        z: rows(&toy.batch.z),
        events: Rc::new(perm.iter().map(|&old| toy.batch.events[old].clone()).collect()),
        graph: Rc::new(GraphTensors::new(&graph)),
    };
    let (base, _) = run(&toy.model, &toy.batch);
    let (permuted, _) = run(&toy.model, &batch);
    for (k, &old) in perm.iter().enumerate() {
        assert!((permuted[k] - base[old]).abs() < 1e-12);
    }
}

#[test]
fn non_finite_input_is_rejected() {
    let mut toy = toy_instance(full(), 1).unwrap();
    toy.batch.x.data_mut()[4] = f64::NAN;
    let mut g = Graph::new();
    let p = toy.model.params.bind(&mut g);
    let err = toy.model.forward(&mut g, &p, &toy.batch).unwrap_err();
    assert_eq!(err.kind(), sta4clc::ErrorKind::Numeric);
}
