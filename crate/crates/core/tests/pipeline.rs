use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrm_core::attacks::{AdversaryBudget, Norm};
use rrm_core::bench::{emit_report, evaluate, read_report, ReportFormat};
use rrm_core::data::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use rrm_core::robustify::{robustify_dataset, RobustifyConfig};
use rrm_core::trainers::{presets, train, Method, TrainConfig};
use rrm_core::{par, Error};

fn small_task() -> (rrm_core::data::Dataset, rrm_core::data::Dataset) {
    let spec = SyntheticSpec { n: 256, d_nonrobust: 40, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train_set = generate_synthetic(&spec, &mut rng).unwrap();
    let test = generate_synthetic(&SyntheticSpec { n: 128, ..spec }, &mut rng).unwrap();
    (train_set, test)
}

fn cfg(method: Method) -> TrainConfig {
    TrainConfig { epochs: 4, ..presets::synthetic(method, 45) }
}

#[test]
fn teacher_student_round_trip() {
    let (train_set, test) = small_task();
    let (mut teacher, _) = train(&cfg(Method::Sat), &train_set, None).unwrap();
    teacher.freeze();
    let hash = teacher.param_hash();
    let (student, report) = train(&cfg(Method::Rrm), &train_set, Some(&teacher)).unwrap();
    assert_eq!(teacher.param_hash(), hash);
    assert_eq!(report.counters.train.forwards, 2 * 4 * 4);
    let budget = AdversaryBudget::new(Norm::Linf, 0.5, 5).with_box(None);
    let e = evaluate(&student, &test, Some(&budget), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(e.natural_acc > 0.8, "{e:?}");
    assert!(e.adv_acc.unwrap() <= e.natural_acc);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    emit_report(&report, &path, ReportFormat::Structured).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
}

#[test]
fn zero_budget_evaluation_equals_clean_accuracy() {
    let (train_set, test) = small_task();
    let (model, _) = train(&cfg(Method::Erm), &train_set, None).unwrap();
    let zero = AdversaryBudget::new(Norm::L2, 0.0, 3).with_box(None);
    let e = evaluate(&model, &test, Some(&zero), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(e.adv_acc, Some(e.natural_acc));
}

#[test]
fn thread_count_leaves_results_unchanged() {
    let (train_set, test) = small_task();
    let (mut teacher, _) = train(&cfg(Method::FastAt), &train_set, None).unwrap();
    teacher.freeze();
    let budget = AdversaryBudget::new(Norm::Linf, 0.5, 4).with_restarts(3).with_box(None);
    let robust_cfg = RobustifyConfig { steps: 10, ..Default::default() };
    let run = |threads| {
        par::with_threads(threads, || {
            let e = evaluate(&teacher, &test, Some(&budget), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let r = robustify_dataset(&teacher, &test, &robust_cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            (e, r.inputs)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn robustified_dataset_survives_disk() {
    let (train_set, _) = small_task();
    let (mut teacher, _) = train(&cfg(Method::Sat), &train_set, None).unwrap();
    teacher.freeze();
    let rob = robustify_dataset(
        &teacher,
        &train_set,
        &RobustifyConfig { steps: 5, ..Default::default() },
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rob.rrmd");
    save_dataset(&rob, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.inputs, rob.inputs);
    assert_eq!(back.labels, train_set.labels);
    assert_eq!(back.meta, train_set.meta);
}

#[test]
fn rrm_without_teacher_is_a_usage_error() {
    let (train_set, _) = small_task();
    let e = train(&cfg(Method::Rrm), &train_set, None).unwrap_err();
    assert!(e.is_usage());
    let zero = TrainConfig { lambda: 0.0, ..cfg(Method::Rrm) };
    assert!(matches!(zero.validate(), Err(Error::Config(_))));
}
