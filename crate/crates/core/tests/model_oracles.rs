mod common;

use common::*;
use horse_core::model::{collect_hooks, greedy_labels, supervised_loss, train_base_model, BaseTrainConfig, Reduction, Trainable};
use horse_core::{init_model, Instance};
use nalgebra::DMatrix;

fn batches(model: &horse_core::Model) -> (Vec<Instance>, Vec<Instance>, Vec<Instance>) {
    let edit = vec![inst(&[1, 2], &[3]), inst(&[4, 5, 6], &[7, 8]), inst(&[9], &[10])];
    let equiv = vec![inst(&[2, 2], &[3]), inst(&[11, 5, 6], &[7, 8])];
    let unrelated = greedy_labels(model, &[inst(&[12, 13], &[0]), inst(&[14], &[0])]).unwrap();
    (edit, equiv, unrelated)
}

#[test]
fn supervised_gradients_match_finite_differences() {
    let model = tiny_model(3);
    let (edit, equiv, unrelated) = batches(&model);
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let analytic = supervised_loss(&model, &edit, &equiv, &unrelated, reduction).unwrap();
        let mut worst = 0.0f64;
        for (k, &layer) in model.editable_layers().iter().enumerate() {
            let (rows, cols) = model.editable_matrix(layer).shape();
            for r in 0..rows {
                for c in 0..cols {
                    let f = |h: f64| {
                        let mut delta = DMatrix::zeros(rows, cols);
                        delta[(r, c)] = h;
                        let m = model.apply_delta(layer, &delta).unwrap();
                        supervised_loss(&m, &edit, &equiv, &unrelated, reduction).unwrap().loss
                    };
                    let numeric = central(f, 1e-5);
                    worst = worst.max(rel_err(analytic.editable_grads[k][(r, c)], numeric));
                }
            }
        }
        assert!(worst <= 1e-6, "{reduction:?}: worst relative error {worst:e}");
    }
}

#[test]
fn mean_loss_is_invariant_to_duplicating_the_edit_batch() {
    let model = tiny_model(4);
    let (edit, equiv, unrelated) = batches(&model);
    let once = supervised_loss(&model, &edit, &equiv, &unrelated, Reduction::Mean).unwrap().loss;
    let twice: Vec<Instance> = edit.iter().chain(&edit).cloned().collect();
    let dup = supervised_loss(&model, &twice, &equiv, &unrelated, Reduction::Mean).unwrap().loss;
    assert!((once - dup).abs() <= 1e-12 * once.abs());
}

#[test]
fn empty_edit_batch_is_rejected() {
    let model = tiny_model(4);
    assert!(supervised_loss(&model, &[], &[], &[], Reduction::Mean).is_err());
}

#[test]
fn perfectly_fit_model_has_near_zero_loss() {
    let cfg = tiny_config(5);
    let base = init_model(&cfg).unwrap();
    let (edit, equiv, _) = batches(&base);
    let probes = vec![inst(&[12, 13], &[0]), inst(&[14], &[0])];
    // Fit everything, including the unrelated probes' own continuations.
    let labelled = greedy_labels(&base, &probes).unwrap();
    let corpus: Vec<Instance> = edit.iter().chain(&equiv).chain(&labelled).cloned().collect();
    let train = BaseTrainConfig { steps: 3000, lr: 2e-2, stop_loss: Some(1e-7), target_accuracy: 1.0, trainable: Trainable::All };
    let (fit, report) = train_base_model(&cfg, &corpus, &train).unwrap();
    assert_eq!(report.accuracy, 1.0, "{report:?}");
    let unrelated = greedy_labels(&fit, &probes).unwrap();
    let loss = supervised_loss(&fit, &edit, &equiv, &unrelated, Reduction::Mean).unwrap().loss;
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn hooks_have_batch_columns_and_leave_model_untouched() {
    let model = tiny_model(6);
    let before = model.checksum();
    let (edit, equiv, unrelated) = batches(&model);
    let hooks = collect_hooks(&model, &edit[..1], &equiv, &unrelated).unwrap();
    assert_eq!(hooks.len(), model.editable_layers().len());
    for h in &hooks {
        assert_eq!(h.h.shape(), (12, 1));
        assert_eq!(h.g.shape(), (8, 1));
    }
    let hooks = collect_hooks(&model, &edit, &equiv, &unrelated).unwrap();
    assert!(hooks.iter().all(|h| h.h.ncols() == 3 && h.g.ncols() == 3));
    assert_eq!(model.checksum(), before);
}

#[test]
fn hook_inputs_equal_forward_activations_exactly() {
    let model = tiny_model(7);
    let (edit, equiv, unrelated) = batches(&model);
    let hooks = collect_hooks(&model, &edit, &equiv, &unrelated).unwrap();
    let acts = model.mlp_activations(&edit).unwrap();
    for hook in &hooks {
        for (i, e) in edit.iter().enumerate() {
            let col = acts[i][hook.layer].column(e.label_position());
            assert_eq!(hook.h.column(i), col, "layer {} instance {i}", hook.layer);
        }
    }
}

#[test]
fn hook_gradients_match_finite_differences() {
    let model = tiny_model(8);
    let (edit, equiv, unrelated) = batches(&model);
    let hooks = collect_hooks(&model, &edit, &equiv, &unrelated).unwrap();
    let d = model.config().d_model;
    let mut worst = 0.0f64;
    for hook in &hooks {
        for i in 0..edit.len() {
            for r in 0..d {
                let f = |h: f64| {
                    let mut delta = DMatrix::zeros(d, edit.len());
                    delta[(r, i)] = h;
                    model.perturbed_loss(hook.layer, &edit, &delta, false).unwrap().0
                };
                worst = worst.max(rel_err(hook.g[(r, i)], central(f, 1e-5)));
            }
        }
    }
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn base_training_is_deterministic_and_zero_steps_is_identity() {
    let cfg = tiny_config(9);
    let corpus = vec![inst(&[1, 2], &[3]), inst(&[4, 5], &[6])];
    let zero = BaseTrainConfig { steps: 0, ..Default::default() };
    let (m0, _) = train_base_model(&cfg, &corpus, &zero).unwrap();
    assert_eq!(m0.checksum(), init_model(&cfg).unwrap().checksum());
    let some = BaseTrainConfig { steps: 30, lr: 1e-2, stop_loss: None, target_accuracy: 0.5, ..Default::default() };
    let (a, ra) = train_base_model(&cfg, &corpus, &some).unwrap();
    let (b, rb) = train_base_model(&cfg, &corpus, &some).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(ra, rb);
    assert!(train_base_model(&cfg, &[], &some).is_err());
}

#[test]
fn base_training_reports_divergence() {
    let cfg = tiny_config(9);
    let corpus = vec![inst(&[1, 2], &[3])];
    let wild = BaseTrainConfig { steps: 5, lr: f64::INFINITY, stop_loss: None, target_accuracy: 0.5, ..Default::default() };
    match train_base_model(&cfg, &corpus, &wild) {
        Err(horse_core::EditError::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}
