mod common;

use std::collections::BTreeSet;

use common::{protocol, small_model, toy_bank, toy_plan};
use fairpda::cohort::Fold;
use fairpda::evaluator::{Cohort, GapReduction, MetricsReport};
use fairpda::objectives::AlignMode;
use fairpda::trainer::{
    run_experiment, Ablations, FoldData, ProtocolMode, TrainProtocol, TrainState, Trainer,
};
use fairpda::Error;

fn trainer<'a>(bank: &'a fairpda::trainer::SegmentBank, p: TrainProtocol) -> Trainer<'a> {
    let data = FoldData::from_plan(bank, &toy_plan(bank), 0).unwrap();
    Trainer::new(p, small_model(), bank, data.train, data.adaptation).unwrap()
}

#[test]
fn task_loss_falls_over_training() {
    let bank = toy_bank(1);
    let t = trainer(&bank, protocol(70));
    assert!(t.total_steps() >= 200);
    let mut s = t.init_state().unwrap();
    t.run(&mut s, Some(200), None).unwrap();
    let (first, last) = s.history.task_trend(20).unwrap();
    assert!(last < 0.5 * first, "L_y {first:.3} -> {last:.3}");
    assert!(s.history.steps.iter().all(|l| l.l_d > 0.0 && l.l_fair > 0.0));
}

#[test]
fn training_is_deterministic() {
    let bank = toy_bank(2);
    let t = trainer(&bank, protocol(4));
    let run = || {
        let mut s = t.init_state().unwrap();
        t.run(&mut s, None, None).unwrap();
        (s.history, s.model.named_tensors())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let bank = toy_bank(3);
    let t = trainer(&bank, protocol(12));
    let mut straight = t.init_state().unwrap();
    t.run(&mut straight, None, None).unwrap();

    let mut first = t.init_state().unwrap();
    t.run(&mut first, Some(17), Some(tmp.path())).unwrap();
    let mut resumed = TrainState::load(&tmp.path().join("checkpoint.fpck")).unwrap();
    assert_eq!(resumed.step, 17);
    t.run(&mut resumed, None, None).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.model.named_tensors(), straight.model.named_tensors());
    assert_eq!(resumed.optim, straight.optim);
}

#[test]
fn no_fairness_leaves_gender_head_untouched() {
    let bank = toy_bank(4);
    let p = TrainProtocol {
        ablations: Ablations {
            no_fairness: true,
            ..Ablations::default()
        },
        ..protocol(3)
    };
    let t = trainer(&bank, p);
    let mut s = t.init_state().unwrap();
    let before = s.model.named_tensors();
    t.run(&mut s, None, None).unwrap();
    let after = s.model.named_tensors();
    let gender: Vec<&String> = before.keys().filter(|k| k.starts_with("gen.")).collect();
    assert!(!gender.is_empty());
    for k in gender {
        assert_eq!(before[k], after[k], "{k} moved");
        if let Some(sq) = s.optim.state().get(k.as_str()) {
            assert!(sq.data().iter().all(|&v| v == 0.0), "{k} saw a gradient");
        }
    }
    // The classifier did train.
    assert_ne!(before["cls.weight"], after["cls.weight"]);
    assert!(s.history.steps.iter().all(|l| l.l_fair == 0.0 && l.lambda_fair == 0.0));
}

#[test]
fn no_warmup_holds_lambda_at_max() {
    let bank = toy_bank(5);
    let base = TrainProtocol {
        lambda_d_max: 0.7,
        lambda_fair_max: 0.4,
        ..protocol(5)
    };
    let flat = trainer(
        &bank,
        TrainProtocol {
            ablations: Ablations {
                no_warmup: true,
                ..Ablations::default()
            },
            ..base.clone()
        },
    );
    for step in 0..flat.total_steps() {
        let l = flat.lambdas(step);
        assert_eq!((l.lambda_d, l.lambda_fair), (0.7, 0.4));
    }
    let ramp = trainer(&bank, base);
    assert_eq!(ramp.lambdas(0).lambda_d, 0.0);
    assert_eq!(ramp.lambdas(ramp.total_steps() - 1).lambda_d, 0.7);
}

#[test]
fn every_alignment_mode_and_protocol_trains() {
    let bank = toy_bank(6);
    for mode in [ProtocolMode::Uda, ProtocolMode::Dg] {
        for align in [AlignMode::None, AlignMode::Dann, AlignMode::Cdan, AlignMode::PartialCdan, AlignMode::Coral] {
            let t = trainer(
                &bank,
                TrainProtocol {
                    mode,
                    align_mode: align,
                    ..protocol(2)
                },
            );
            let mut s = t.init_state().unwrap();
            t.run(&mut s, None, None).unwrap();
            let aligned = s.history.steps.iter().any(|l| l.l_d > 0.0);
            assert_eq!(aligned, align != AlignMode::None, "{mode:?} {align:?}");
        }
    }
}

#[test]
fn experiment_covers_each_fold_once() {
    let tmp = tempfile::tempdir().unwrap();
    let bank = toy_bank(7);
    let plan = toy_plan(&bank);
    let out = run_experiment("toy", &protocol(2), &small_model(), &bank, &plan, GapReduction::Macro, Some(tmp.path())).unwrap();
    assert_eq!(out.histories.len(), 2);
    for (f, fold) in plan.folds.iter().enumerate() {
        assert!(tmp.path().join(format!("fold_{f}/checkpoint.fpck")).is_file());
        let internal: BTreeSet<&str> = out
            .report
            .predictions
            .iter()
            .filter(|p| p.fold == f && p.cohort == Cohort::Internal)
            .map(|p| p.patient_id.as_str())
            .collect();
        assert_eq!(internal, fold.test.iter().map(String::as_str).collect());
        let external = out.report.predictions.iter().filter(|p| p.fold == f && p.cohort == Cohort::External).count();
        assert_eq!(external, plan.uda_external_eval.len());
    }
    let json = serde_json::to_string(&out.report).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn leaky_plan_is_rejected() {
    let bank = toy_bank(8);
    let mut plan = toy_plan(&bank);
    let leaked = plan.folds[0].test[0].clone();
    plan.folds[0].train.push(leaked);
    assert!(matches!(FoldData::from_plan(&bank, &plan, 0), Err(Error::Integrity(_))));

    let mut plan = toy_plan(&bank);
    plan.uda_adaptation.push(plan.uda_external_eval[0].clone());
    assert!(matches!(FoldData::from_plan(&bank, &plan, 1), Err(Error::Integrity(_))));

    let mut plan = toy_plan(&bank);
    plan.folds.push(Fold {
        train: vec![],
        test: vec![],
    });
    assert!(FoldData::from_plan(&bank, &plan, 5).is_err());
}
