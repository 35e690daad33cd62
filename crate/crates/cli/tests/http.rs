use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use servobot::detector::{DetectorModel, DetectorParams};
use servobot::robot::SimRobot;
use servobot::tfod::*;
use servobot::world::{ActuationNoise, CameraIntrinsics, CameraPose, Scene, SceneObject, Shape};
use servobot_cli::server::{router, ApiError};
use tower::ServiceExt;

fn queue_with_find_failure() -> (HumanQueue, u64, Vec<u64>) {
    let can = SceneObject {
        id: 1,
        class_label: "chips_can".into(),
        shape: Shape::Cylinder { r: 0.0375, h: 0.25 },
        position: [0.0, 0.0],
        yaw: 0.0,
        support_height: 0.0,
        graspable: true,
        clutter_group: None,
    };
    let mut robot = SimRobot::new(
        Scene::new(vec![can]).unwrap(),
        CameraIntrinsics::default(),
        ActuationNoise::none(),
        DetectorModel::new(DetectorParams::default()),
        3,
    );
    robot.set_pose(CameraPose::new(0.0, 0.0, 0.9, 0.0));
    let poses: Vec<CameraPose> = (0..5).map(|i| CameraPose::new(0.05 * i as f64, 0.0, 0.9, 0.0)).collect();
    let classes = vec!["chips_can".to_string()];
    let FindOutcome::Failure(ev) = run_find(&mut robot, &poses, &classes, false, TaskId::Find, 1, &Motion::default()).unwrap()
    else {
        panic!("an untrained detector should fail Find");
    };
    let mut store = FailureStore::in_memory();
    let entry = store.log_failure(ev.clone(), &robot).unwrap();
    let images = ev.image_ids.iter().map(|i| store.image(*i).unwrap().clone()).collect();
    let q = HumanQueue::new();
    q.post(entry, images);
    (q, ev.event_id, ev.image_ids)
}

async fn send(q: &HumanQueue, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = router(q.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: String) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .unwrap()
}

fn submission(event_id: u64, image_id: u64, boxes: Vec<WireBox>) -> String {
    serde_json::to_string(&AnnotationSubmission {
        event_id,
        image_id,
        true_negative: boxes.is_empty(),
        boxes,
    })
    .unwrap()
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

#[tokio::test]
async fn empty_queue_lists_nothing_on_both_prefixes() {
    let q = HumanQueue::new();
    for p in ["/api", "/api/v1"] {
        let (s, _, body) = send(&q, get(&format!("{p}/failures"))).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(body, b"[]");
    }
}

#[tokio::test]
async fn find_failure_lists_five_fetchable_images() {
    let (q, ev, ids) = queue_with_find_failure();
    let (s, _, body) = send(&q, get("/api/failures")).await;
    assert_eq!(s, StatusCode::OK);
    let pending: Vec<PendingFailure> = serde_json::from_slice(&body).unwrap();
    assert_eq!(pending.len(), 1);
    assert_eq!(pending[0].event_id, ev);
    assert_eq!(pending[0].task, TaskId::Find);
    assert_eq!(pending[0].image_urls.len(), 5);
    for url in &pending[0].image_urls {
        let (s, ctype, png) = send(&q, get(url)).await;
        assert_eq!(s, StatusCode::OK, "{url}");
        assert_eq!(ctype.as_deref(), Some("image/png"));
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
    let (_, _, again) = send(&q, get("/api/v1/failures")).await;
    assert_eq!(again, body, "listing is read-only");
    assert_eq!(send(&q, get(&format!("/api/images/{}", ids[4] + 99))).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn submission_status_codes() {
    let (q, ev, ids) = queue_with_find_failure();
    let bad = submission(ev, ids[0], vec![wire(600, 0, 100, 10)]);
    let (s, _, body) = send(&q, post_json("/api/annotations", bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ApiError = serde_json::from_slice(&body).unwrap();
    assert!(err.error.contains("outside"), "{}", err.error);

    let unknown = submission(ev + 7, ids[0], vec![wire(0, 0, 10, 10)]);
    assert_eq!(send(&q, post_json("/api/annotations", unknown)).await.0, StatusCode::NOT_FOUND);
    let (s, _, _) = send(&q, post_json("/api/annotations", "{\"event_id\": ".into())).await;
    assert!(s.is_client_error());

    let good = submission(ev, ids[0], vec![wire(300, 220, 40, 40)]);
    let (s, _, body) = send(&q, post_json("/api/v1/annotations", good.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    let ack: SubmissionAck = serde_json::from_slice(&body).unwrap();
    assert_eq!(ack.clicks, 1);
    assert_eq!(send(&q, post_json("/api/annotations", good)).await.0, StatusCode::CONFLICT);

    let late_tn = submission(ev, ids[1], vec![]);
    let (s, _, body) = send(&q, post_json("/api/annotations", late_tn)).await;
    assert_eq!(s, StatusCode::CREATED);
    let ack: SubmissionAck = serde_json::from_slice(&body).unwrap();
    assert_eq!(ack.clicks, 0);

    let got = q.wait_for(ev, std::time::Duration::from_millis(10)).unwrap();
    assert_eq!(got.len(), 2);
    assert_eq!((got[0].boxes[0].x, got[0].boxes[0].w), (300.0, 40.0), "boxes round-trip in integer pixels");
}

#[tokio::test]
async fn status_reports_phase_and_pending() {
    let (q, _, _) = queue_with_find_failure();
    q.set_status(TrialStatus {
        phase: "Find".into(),
        trial: 2,
        examples: 4,
        ..TrialStatus::default()
    });
    let (s, _, body) = send(&q, get("/api/v1/status")).await;
    assert_eq!(s, StatusCode::OK);
    let st: TrialStatus = serde_json::from_slice(&body).unwrap();
    assert_eq!((st.phase.as_str(), st.trial, st.examples, st.pending), ("Find", 2, 4, 1));
}
