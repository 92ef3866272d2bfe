//! End-to-end use of the public API on small problems.

use qent::boundgen::{certify, Certification};
use qent::cae::{builtin_spec, encode_batch, CaeModel};
use qent::linalg::{bell_phi_minus, is_ppt, min_pt_eigenvalue, realignment_ccnr, DensityMatrix};
use qent::pipeline::{evaluate, recompute_threshold, rotate_set, train, Label, Task, TrainConfig};
use qent::states::{horodecki_3x3, tiles_upb_state, Family, LabeledStateSet};

fn small_cfg(task: Task) -> TrainConfig {
    TrainConfig {
        n_samples: 96,
        epochs: 1,
        batch_size: 16,
        threshold_set_size: 16,
        learning_rate: 1e-3,
        seed: 21,
        ..TrainConfig::new(2, task)
    }
}

#[test]
fn train_evaluate_and_recompute_threshold() {
    let cfg = small_cfg(Task::Entanglement);
    let data = cfg.generate_training_set().unwrap();
    assert_eq!(data.label, Family::MixSep);
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.threshold.epsilon > 0.0);
    assert_eq!(
        recompute_threshold(&out.model, &out.threshold).unwrap(),
        out.threshold.epsilon
    );

    let sep = LabeledStateSet::generate(Family::MixSep, 2, 20, 5, 1).unwrap();
    let npt = LabeledStateSet::generate(Family::Npt, 2, 20, 1, 2).unwrap();
    let report = evaluate(
        &out.model,
        &out.threshold,
        &[sep.clone(), npt.clone()],
        None,
    )
    .unwrap();
    assert_eq!(report.samples.len(), 40);
    for s in &report.samples {
        let expected = if s.error < report.epsilon {
            Label::InClass
        } else {
            Label::OutOfClass
        };
        assert_eq!(s.label, expected);
    }
    let rotated = rotate_set(&sep, 3).unwrap();
    assert!(rotated
        .states
        .iter()
        .all(|r| is_ppt(r, 1e-10).unwrap().is_ppt));
    assert!(evaluate(&out.model, &out.threshold, &[rotated], Some((3, 4))).is_ok());
}

#[test]
fn discord_training_rejects_entanglement_data() {
    let cfg = small_cfg(Task::Discord);
    let wrong = LabeledStateSet::generate(Family::MixSep, 2, 96, 2, 0).unwrap();
    assert!(train(&cfg, &wrong).is_err());
}

#[test]
fn named_states_and_criteria() {
    let bell = bell_phi_minus();
    assert!((min_pt_eigenvalue(&bell).unwrap() + 0.5).abs() < 1e-12);
    assert!((realignment_ccnr(&bell).unwrap() - 2.0).abs() < 1e-10);
    for i in 1..10 {
        let rho = horodecki_3x3(i as f64 / 10.0).unwrap();
        assert!(min_pt_eigenvalue(&rho).unwrap() >= -1e-12);
    }
    let tiles = tiles_upb_state();
    assert!(min_pt_eigenvalue(&tiles).unwrap() >= -1e-12);
    // Realignment detects the Tiles state.
    assert!(realignment_ccnr(&tiles).unwrap() > 1.0);
}

#[test]
fn certification_of_reference_states() {
    let model = CaeModel::<f32>::new(builtin_spec(3).unwrap(), 0).unwrap();
    let thr = qent::pipeline::ThresholdRecord {
        d: 3,
        task: Task::Entanglement,
        epsilon: 1e-12,
        n_eps: 1,
        m_max: 2,
        calibration_seed: 0,
        epoch: 0,
    };
    let rep = certify(&tiles_upb_state(), &model, &thr, 5, 0).unwrap();
    assert_eq!(rep.verdict, Certification::CertifiedBoundEntangled);
    let mixed = DensityMatrix::maximally_mixed(3, 3);
    let rep = certify(&mixed, &model, &thr, 5, 0).unwrap();
    // The untrained model cannot reproduce I/9 to within 1e-12.
    assert_eq!(rep.verdict, Certification::Candidate);
}

#[test]
fn batch_encoding_checks_dimensions() {
    let a = DensityMatrix::maximally_mixed(2, 2);
    let b = DensityMatrix::maximally_mixed(3, 3);
    assert!(encode_batch::<f32>(&[a.clone(), a]).is_ok());
    assert!(encode_batch::<f32>(&[DensityMatrix::maximally_mixed(2, 2), b]).is_err());
}
