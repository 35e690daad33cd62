use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use servobot::detector::{DetectorModel, DetectorParams};
use servobot::robot::SimRobot;
use servobot::tfod::*;
use servobot::world::{ActuationNoise, CameraIntrinsics, CameraPose, Scene, SceneObject, Shape};

fn can(id: u32, x: f64) -> SceneObject {
    SceneObject {
        id,
        class_label: "chips_can".into(),
        shape: Shape::Cylinder { r: 0.0375, h: 0.25 },
        position: [x, 0.0],
        yaw: 0.0,
        support_height: 0.0,
        graspable: true,
        clutter_group: None,
    }
}

fn robot(objects: Vec<SceneObject>, trained: bool) -> SimRobot {
    let mut p = DetectorParams::default();
    p.covered.fp_rate = 0.0;
    p.uncovered.fp_rate = 0.0;
    p.novel.fp_rate = 0.0;
    let model = if trained {
        DetectorModel::fully_trained(p, &["chips_can"])
    } else {
        DetectorModel::new(p)
    };
    let mut r = SimRobot::new(
        Scene::new(objects).unwrap(),
        CameraIntrinsics::default(),
        ActuationNoise::none(),
        model,
        11,
    );
    r.set_pose(CameraPose::new(0.0, 0.0, 0.9, 0.0));
    r
}

fn poses() -> Vec<CameraPose> {
    (0..5).map(|i| CameraPose::new(i as f64 * 2.0, 0.0, 0.9, 0.0)).collect()
}

fn classes() -> Vec<String> {
    vec!["chips_can".to_string()]
}

fn find(r: &mut SimRobot, sentry: bool, id: u64) -> FindOutcome {
    run_find(r, &poses(), &classes(), sentry, TaskId::Find, id, &Motion::default()).unwrap()
}

#[test]
fn find_stops_at_first_pose_with_a_detection() {
    let mut r = robot(vec![can(1, 2.0)], true);
    match find(&mut r, false, 1) {
        FindOutcome::Found {
            pose_index, image_ids, ..
        } => {
            assert_eq!(pose_index, 1);
            assert_eq!(image_ids.len(), 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_scene_fails_with_every_image_unless_sentry() {
    let mut r = robot(vec![], true);
    match find(&mut r, false, 4) {
        FindOutcome::Failure(ev) => {
            assert_eq!(ev.image_ids.len(), 5);
            assert_eq!(ev.reason, FailureReason::NoDetectionAllPoses);
            assert_eq!(ev.event_id, 4);
        }
        other => panic!("{other:?}"),
    }
    let mut r = robot(vec![], true);
    assert!(matches!(find(&mut r, true, 5), FindOutcome::NotFound { .. }));
}

#[test]
fn store_keeps_find_images_and_rejects_duplicates() {
    let mut r = robot(vec![can(1, 0.0)], false);
    let FindOutcome::Failure(ev) = find(&mut r, false, 1) else {
        panic!("novel class should not be detected");
    };
    let mut store = FailureStore::in_memory();
    let entry = store.log_failure(ev.clone(), &r).unwrap();
    assert_eq!(entry.event.image_ids.len(), 5);
    assert!(entry.vocabulary.contains(&"chips_can".to_string()));
    for id in &ev.image_ids {
        assert!(store.image(*id).is_some());
    }
    assert_eq!(store.pending().len(), 1);
    assert_eq!(store.log_failure(ev, &r), Err(StoreError::DuplicateEvent(1)));
    store.resolve(1);
    assert!(store.pending().is_empty());
    assert!(store.is_resolved(1));
}

#[test]
fn servo_failure_stores_one_image_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = robot(vec![can(1, 0.0)], false);
    let d = r.observe(&classes()).unwrap();
    let ev = FailureEvent {
        event_id: 9,
        task: TaskId::Servo,
        image_ids: vec![d.image_id],
        reason: FailureReason::Discontinuity,
        timestamp: 0.0,
        task_classes: classes(),
    };
    let mut store = FailureStore::on_disk(dir.path()).unwrap();
    store.log_failure(ev, &r).unwrap();
    let png = dir.path().join(format!("{}.png", d.image_id));
    let side = dir.path().join(format!("{}.json", d.image_id));
    assert!(png.exists() && side.exists());
    let meta: ImageSidecar = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
    assert_eq!(meta.event_id, 9);
    assert_eq!((meta.width, meta.height), (640, 480));
}

#[test]
fn reason_must_match_task() {
    let r = robot(vec![], false);
    let ev = FailureEvent {
        event_id: 1,
        task: TaskId::Find,
        image_ids: vec![0],
        reason: FailureReason::Discontinuity,
        timestamp: 0.0,
        task_classes: classes(),
    };
    assert!(matches!(
        FailureStore::in_memory().log_failure(ev, &r),
        Err(StoreError::Invalid(_))
    ));
}

fn captured(objects: Vec<SceneObject>) -> (SimRobot, servobot::robot::CapturedImage) {
    let mut r = robot(objects, false);
    let d = r.observe(&classes()).unwrap();
    let img = r.capture(d.image_id).unwrap().unwrap();
    (r, img)
}

#[test]
fn oracle_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, img) = captured(vec![can(1, 0.0)]);
    let ex = oracle_annotate(&img, TaskId::Find, &classes(), 0.0, &mut rng);
    assert_eq!(ex.clicks, 1);
    let gt = &img.record.boxes[0];
    let b = &ex.boxes[0];
    assert_eq!((b.x, b.y, b.x + b.w, b.y + b.h), (gt.x_min, gt.y_min, gt.x_max, gt.y_max));

    let ex = oracle_annotate(&img, TaskId::Find, &classes(), 2.0, &mut rng);
    let b = &ex.boxes[0];
    assert!((b.x - gt.x_min).abs() <= 2.0 && (b.x + b.w - gt.x_max).abs() <= 2.0);

    let (_, empty) = captured(vec![]);
    let tn = oracle_annotate(&empty, TaskId::Find, &classes(), 2.0, &mut rng);
    assert!(!tn.is_positive());
    assert_eq!(tn.clicks, 0);
}

fn example(task: TaskId, n_boxes: usize) -> FewShotExample {
    let (_, img) = captured(vec![can(1, 0.0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ex = oracle_annotate(&img, task, &classes(), 0.0, &mut rng);
    ex.boxes.truncate(n_boxes);
    ex.clicks = ex.boxes.len() as u32;
    ex
}

#[test]
fn update_accounting() {
    let mut set = FewShotSet::default();
    let mut model = DetectorModel::new(DetectorParams::default());
    let cpu = apply_update(&mut set, 1, vec![example(TaskId::Grasp, 1)], &mut model).unwrap();
    assert_eq!(cpu, 227.0);
    assert_eq!(set.ledger.counters.grasp, 1);
    assert_eq!(set.ledger.updates, 1);
    assert_eq!(set.ledger.annotation_s, 7.0 * set.ledger.clicks as f64);
    assert!(model.knows_class("chips_can"));

    // a true negative is kept but does not retrain
    let cpu = apply_update(&mut set, 2, vec![example(TaskId::Find, 0)], &mut model).unwrap();
    assert_eq!(cpu, 0.0);
    assert_eq!(set.ledger.updates, 1);
    assert_eq!(set.len(), 2);

    let two = vec![example(TaskId::Find, 1), example(TaskId::Find, 1)];
    assert!(matches!(
        apply_update(&mut set, 3, two, &mut model),
        Err(TfodError::ViolatesOnePerUpdate(2))
    ));
    assert_eq!(set.len(), 2, "rejected updates leave the set untouched");
}

fn queued() -> (HumanQueue, u64, u64) {
    let mut r = robot(vec![can(1, 0.0)], false);
    let d = r.observe(&classes()).unwrap();
    let ev = FailureEvent {
        event_id: 3,
        task: TaskId::Grasp,
        image_ids: vec![d.image_id],
        reason: FailureReason::DetectionLost,
        timestamp: 1.5,
        task_classes: classes(),
    };
    let mut store = FailureStore::in_memory();
    let entry = store.log_failure(ev, &r).unwrap();
    let q = HumanQueue::new();
    q.post(entry, vec![store.image(d.image_id).unwrap().clone()]);
    (q, 3, d.image_id)
}

fn submission(event_id: u64, image_id: u64, boxes: Vec<WireBox>) -> AnnotationSubmission {
    AnnotationSubmission {
        event_id,
        image_id,
        true_negative: boxes.is_empty(),
        boxes,
    }
}

fn wire(x: i64, y: i64, w: i64, h: i64) -> WireBox {
    WireBox {
        class_label: "chips_can".into(),
        x,
        y,
        w,
        h,
    }
}

#[test]
fn human_queue_first_positive_wins() {
    let (q, ev, img) = queued();
    let pending = q.list_pending();
    assert_eq!(pending.len(), 1);
    assert_eq!(pending[0].image_urls, vec![format!("/api/v1/images/{img}")]);

    let ack = q.submit(&submission(ev, img, vec![wire(300, 220, 40, 40)])).unwrap();
    assert_eq!(ack.clicks, 1);
    assert!(q.list_pending().is_empty());
    assert_eq!(
        q.submit(&submission(ev, img, vec![wire(300, 220, 40, 40)])),
        Err(SubmitError::Conflict(ev))
    );
    let got = q.wait_for(ev, Duration::from_millis(10)).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].source, AnnotationSource::Human);
    assert_eq!(got[0].task, TaskId::Grasp);
}

#[test]
fn human_queue_rejects_malformed_submissions() {
    let (q, ev, img) = queued();
    assert_eq!(
        q.submit(&submission(99, img, vec![wire(0, 0, 5, 5)])),
        Err(SubmitError::UnknownEvent(99))
    );
    let bad = [
        submission(ev, img + 1000, vec![wire(0, 0, 5, 5)]),
        submission(ev, img, vec![wire(630, 0, 20, 5)]),
        submission(ev, img, vec![wire(0, 0, 0, 5)]),
        submission(
            ev,
            img,
            vec![WireBox {
                class_label: "unicorn".into(),
                ..wire(0, 0, 5, 5)
            }],
        ),
        AnnotationSubmission {
            true_negative: false,
            ..submission(ev, img, vec![])
        },
    ];
    for b in bad {
        assert!(matches!(q.submit(&b), Err(SubmitError::Invalid(_))), "{b:?}");
    }
    assert_eq!(q.list_pending().len(), 1, "nothing resolved");
}

#[test]
fn unserved_queue_starves() {
    let (q, ev, _) = queued();
    match q.wait_for(ev, Duration::from_millis(20)) {
        Err(AnnotateError::Starvation { event_id, waited_s }) => {
            assert_eq!(event_id, ev);
            assert!(waited_s >= 0.02);
        }
        other => panic!("{other:?}"),
    }
}
