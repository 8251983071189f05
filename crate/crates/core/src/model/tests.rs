use std::collections::BTreeMap;

use super::*;
use crate::rng::Rng;
use crate::scoring::{structured_units, Grouping, ScoreReport};
use crate::tape::Tape;
use crate::units::{MaskKind, SparsityMask, UnitId, UnitKind};

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        max_len: 12,
        hidden: 8,
        heads: 3,
        head_dim: 4,
        ffn: 10,
        layers: 3,
        classes: 3,
    }
}

fn model(seed: u64) -> ModelParams {
    ModelParams::init(&small(), &mut Rng::new(seed)).unwrap()
}

fn tokens(rng: &mut Rng) -> Vec<usize> {
    let n = 1 + rng.below(12);
    (0..n).map(|_| rng.below(20)).collect()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn all_ones_gates_are_neutral() {
    let p = model(1);
    let mut rng = Rng::new(2);
    let ones = GateSet::ones(&p);
    for _ in 0..10 {
        let t = tokens(&mut rng);
        let plain = encoder_forward(&t, &p, None).unwrap();
        let gated = encoder_forward(&t, &p, Some(&ones)).unwrap();
        assert_eq!(plain.data(), gated.data());
        assert_eq!(plain, encoder_forward(&t, &p, None).unwrap());
    }
}

#[test]
fn rejects_bad_inputs() {
    let p = model(1);
    assert!(matches!(encoder_forward(&[0, 20], &p, None), Err(Error::Input(_))));
    assert!(matches!(encoder_forward(&[], &p, None), Err(Error::Input(_))));
    assert!(matches!(encoder_forward(&[1; 13], &p, None), Err(Error::Input(_))));
    let mut g = GateSet::ones(&p);
    g.xi[0].pop();
    assert!(matches!(encoder_forward(&[1, 2], &p, Some(&g)), Err(Error::Contract(_))));
}

fn block_outputs(p: &ModelParams, t: &[usize], layer: usize, xi: f64, nu: f64) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, p, false);
    let x = tape.gather(vars.tok_emb, t).unwrap();
    let mut g = GateSet::ones(p);
    g.xi[layer][1] = xi;
    g.nu[layer][4] = nu;
    let gv = bind_gates(&mut tape, &g, p, false).unwrap();
    let lv = &vars.layers[layer];
    let m = mha_gated(&mut tape, x, lv, Some(&gv.xi[layer])).unwrap().unwrap();
    let f = ffn_gated(&mut tape, x, lv, Some(gv.nu[layer])).unwrap().unwrap();
    (tape.value(m).clone(), tape.value(f).clone())
}

#[test]
fn blocks_are_linear_in_each_gate() {
    let p = model(3);
    let t = [3, 7, 1, 9];
    let (m0, f0) = block_outputs(&p, &t, 1, 0.0, 0.0);
    let (m1, f1) = block_outputs(&p, &t, 1, 1.0, 1.0);
    let (m2, f2) = block_outputs(&p, &t, 1, 2.0, 2.0);
    for (a, b, c) in [(&m0, &m1, &m2), (&f0, &f1, &f2)] {
        for i in 0..a.numel() {
            let (y0, y1, y2) = (a.data()[i], b.data()[i], c.data()[i]);
            assert!((y2 - 2.0 * y1 + y0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gates_silence_blocks() {
    let p = model(3);
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &p, false);
    let x = tape.gather(vars.tok_emb, &[1, 2, 3]).unwrap();
    let mut g = GateSet::ones(&p);
    g.xi[0] = vec![0.0; 3];
    g.nu[0] = vec![0.0; 10];
    let gv = bind_gates(&mut tape, &g, &p, false).unwrap();
    let m = mha_gated(&mut tape, x, &vars.layers[0], Some(&gv.xi[0])).unwrap().unwrap();
    let f = ffn_gated(&mut tape, x, &vars.layers[0], Some(gv.nu[0])).unwrap().unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_head_cases() {
    let p = model(4);
    let head = &p.layers[0].heads[0];
    let run = |h: &HeadParams, t: &[usize]| {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &p, false);
        let x = tape.gather(vars.tok_emb, t).unwrap();
        let hv = HeadVars {
            wq: tape.constant(h.wq.clone()),
            wk: tape.constant(h.wk.clone()),
            wv: tape.constant(h.wv.clone()),
            wo: tape.constant(h.wo.clone()),
        };
        let o = attn_head(&mut tape, x, &hv).unwrap();
        let xv = crate::tensor::matmul(tape.value(x), &h.wv).unwrap();
        (tape.value(o).clone(), xv)
    };
    // One position: the only attention weight is 1.
    let (o, xv) = run(head, &[5]);
    assert!(max_diff(&o, &xv) < 1e-15);
    // Zero value projection.
    let silent = HeadParams {
        wv: Tensor::zeros(head.wv.shape()),
        ..head.clone()
    };
    let (o, _) = run(&silent, &[1, 2, 3]);
    assert!(o.data().iter().all(|&v| v == 0.0));
    // Zero queries give uniform weights, so each row is the mean of X·Wv.
    let flat = HeadParams {
        wq: Tensor::zeros(head.wq.shape()),
        ..head.clone()
    };
    let (o, xv) = run(&flat, &[1, 2, 3, 4]);
    for c in 0..xv.last_dim() {
        let mean = (0..4).map(|r| xv.row(r)[c]).sum::<f64>() / 4.0;
        for r in 0..4 {
            assert!((o.row(r)[c] - mean).abs() < 1e-14);
        }
    }
}

/// Recomputes the model without head `h` of layer `l` by hand, independently
/// of the gate and compaction code.
fn without_head(p: &ModelParams, l: usize, h: usize) -> ModelParams {
    let mut q = p.clone();
    q.layers[l].heads.remove(h);
    q
}

#[test]
fn gate_zero_equals_head_removal() {
    let p = model(5);
    let mut rng = Rng::new(6);
    for (l, h) in [(0, 0), (1, 2), (2, 1)] {
        let mut g = GateSet::ones(&p);
        g.xi[l][h] = 0.0;
        let removed = without_head(&p, l, h);
        for _ in 0..5 {
            let t = tokens(&mut rng);
            let a = encoder_forward(&t, &p, Some(&g)).unwrap();
            let b = encoder_forward(&t, &removed, None).unwrap();
            assert!(max_diff(&a, &b) <= 1e-10);
        }
    }
}

#[test]
fn neuron_gate_equals_column_deletion() {
    let p = model(7);
    let mut g = GateSet::ones(&p);
    g.nu[1][3] = 0.0;
    let mut q = p.clone();
    let keep: Vec<usize> = (0..10).filter(|&j| j != 3).collect();
    q.layers[1].w1 = q.layers[1].w1.select_columns(&keep).unwrap();
    q.layers[1].w2 = q.layers[1].w2.select_rows(&keep).unwrap();
    let mut rng = Rng::new(8);
    for _ in 0..5 {
        let t = tokens(&mut rng);
        let a = encoder_forward(&t, &p, Some(&g)).unwrap();
        let b = encoder_forward(&t, &q, None).unwrap();
        assert!(max_diff(&a, &b) <= 1e-10);
    }
}

#[test]
fn compaction_matches_masked_model() {
    let p = model(9);
    let units = structured_units(&p);
    let mut rng = Rng::new(10);
    for trial in 0..5 {
        let mut mask = SparsityMask::empty(MaskKind::Structured);
        for u in &units {
            if rng.uniform() < 0.4 + 0.1 * trial as f64 {
                mask.removed.insert(u.clone());
            }
        }
        let g = GateSet::masked(&p, &mask).unwrap();
        let c = compact(&p, &mask).unwrap();
        for (l, layer) in c.layers.iter().enumerate() {
            let heads = (0..3).filter(|&i| !mask.contains(&UnitId::head(l, i))).count();
            assert_eq!(layer.heads.len(), heads);
        }
        for _ in 0..20 {
            let t = tokens(&mut rng);
            let a = encoder_forward(&t, &p, Some(&g)).unwrap();
            let b = encoder_forward(&t, &c, None).unwrap();
            assert!(max_diff(&a, &b) <= 1e-10);
        }
    }
}

#[test]
fn compaction_edge_cases() {
    let p = model(11);
    assert_eq!(compact(&p, &SparsityMask::empty(MaskKind::Structured)).unwrap(), p);
    let mut one = SparsityMask::empty(MaskKind::Structured);
    one.removed.insert(UnitId::head(1, 0));
    assert_eq!(compact(&p, &one).unwrap().layers[1].heads.len(), 2);
    let mut dangling = SparsityMask::empty(MaskKind::Structured);
    dangling.removed.insert(UnitId::neuron(0, 10));
    assert!(matches!(compact(&p, &dangling), Err(Error::Mask(_))));
    dangling.removed = [UnitId::head(3, 0)].into();
    assert!(matches!(compact(&p, &dangling), Err(Error::Mask(_))));
    assert!(matches!(GateSet::masked(&p, &dangling), Err(Error::Mask(_))));
    // A layer stripped of every head and neuron still runs on the residual path.
    let mut all = SparsityMask::empty(MaskKind::Structured);
    all.removed.extend(structured_units(&p).into_iter().filter(|u| u.layer == 2));
    let c = compact(&p, &all).unwrap();
    let a = encoder_forward(&[1, 2, 3], &c, None).unwrap();
    let b = encoder_forward(&[1, 2, 3], &p, Some(&GateSet::masked(&p, &all).unwrap())).unwrap();
    assert!(max_diff(&a, &b) <= 1e-10);
}

#[test]
fn unstructured_masks_zero_weights() {
    let p = model(12);
    let mut m = SparsityMask::empty(MaskKind::Unstructured);
    m.removed.insert(UnitId::parameter(1, "heads.2.wk", 5));
    m.removed.insert(UnitId::parameter(0, "w2", 0));
    let q = apply_unstructured(&p, &m).unwrap();
    assert_eq!(q.layers[1].heads[2].wk.data()[5], 0.0);
    assert_eq!(q.layers[0].w2.data()[0], 0.0);
    assert_eq!(q.layers[0].w1, p.layers[0].w1);
    m.removed.insert(UnitId::parameter(0, "w9", 0));
    assert!(matches!(apply_unstructured(&p, &m), Err(Error::Mask(_))));
    assert!(apply_unstructured(&p, &SparsityMask::empty(MaskKind::Structured)).is_err());
}

#[test]
fn layer_dropping() {
    assert_eq!(drop_layer_indices(6, 2).unwrap(), vec![2, 5]);
    assert_eq!(drop_layer_indices(6, 3).unwrap(), vec![1, 3, 5]);
    assert_eq!(drop_layer_indices(6, 5).unwrap(), vec![1, 2, 3, 4, 5]);
    assert!(drop_layer_indices(6, 0).is_err());
    assert!(drop_layer_indices(6, 6).is_err());
    let p = model(13);
    assert!(init_student(&p, StudentInit::DropLayers { k: 3 }, None).is_err());
    let s = init_student(&p, StudentInit::DropLayers { k: 1 }, None).unwrap();
    assert_eq!(s.num_layers(), 1);
    assert_eq!(s.layers[0], p.layers[2]);
    assert_eq!(s.tok_emb, p.tok_emb);
    assert_eq!(s.cls_w, p.cls_w);
}

#[test]
fn parameter_pruning_student() {
    let p = model(14);
    assert!(matches!(
        init_student(&p, StudentInit::PruneParams { s: 0.7 }, None),
        Err(Error::Contract(_))
    ));
    assert!(init_student(&p, StudentInit::PruneParams { s: 1.0 }, None).is_err());
    let mut rng = Rng::new(15);
    let scores: BTreeMap<UnitId, f64> = structured_units(&p)
        .into_iter()
        .map(|u| (u, rng.uniform()))
        .collect();
    let report = ScoreReport::build(&scores, &scores, 1.0, Grouping::Global).unwrap();
    let s = init_student(&p, StudentInit::PruneParams { s: 0.7 }, Some(&report)).unwrap();
    let heads: usize = s.layers.iter().map(|l| l.heads.len()).sum();
    let neurons: usize = s.layers.iter().map(|l| l.ffn_width()).sum();
    // 9 heads and 30 neurons: round(6.3) = 6 and 21 removed.
    assert_eq!(heads, 3);
    assert_eq!(neurons, 9);
    let mask = crate::sparsify::rank_mask(&report, 0.7).unwrap();
    assert_eq!(mask.count(UnitKind::Head), 6);
}

#[test]
fn named_tensors_round_trip() {
    let p = model(16);
    let mut one = SparsityMask::empty(MaskKind::Structured);
    one.removed.insert(UnitId::head(1, 0));
    let c = compact(&p, &one).unwrap();
    let back = ModelParams::from_named(c.config.clone(), &c.named_tensors()).unwrap();
    assert_eq!(back, c);
}
