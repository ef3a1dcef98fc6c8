use std::fs::OpenOptions;
use std::io::Write;

use ordepth_core::annotation::{AnnotationSession, Answer};
use ordepth_core::api::ItemRegistry;
use ordepth_core::synth::{annotate, default_camera, default_skeleton, sample_poses, PoseDistribution, SimulatedAnnotator};
use ordepth_service::store::replay_log;
use ordepth_service::{ServiceError, SessionStore};

fn registry() -> ItemRegistry {
    let poses = sample_poses(&PoseDistribution::default(), 4, 3).unwrap();
    ItemRegistry::from_poses(4, default_skeleton(), default_camera(), &poses).unwrap()
}

fn answer_n(store: &SessionStore, id: &str, pose_k: usize, n: usize) {
    let pose = store.registry().items[pose_k].pose_3d.clone().unwrap();
    let annotator = SimulatedAnnotator { error_rate: 0.1, ..SimulatedAnnotator::perfect() };
    for _ in 0..n {
        let (i, j) = match store.snapshot(id).unwrap().next_question() {
            Some(q) => q,
            None => return,
        };
        store.answer(id, annotate(&annotator, &pose, i, j, 9).unwrap(), None).unwrap();
    }
}

#[test]
fn reload_reproduces_identical_states() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let (a, b, c) = {
        let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
        let a = store.create("item-00000").unwrap().session_id;
        let b = store.create("item-00001").unwrap().session_id;
        let c = store.create("item-00000").unwrap().session_id;
        answer_n(&store, &a, 0, 5);
        answer_n(&store, &b, 1, 100);
        (
            store.snapshot(&a).unwrap(),
            store.snapshot(&b).unwrap(),
            (c.clone(), store.snapshot(&c).unwrap()),
        )
    };
    assert!(b.is_complete());
    let store = SessionStore::open(reg, dir.path()).unwrap();
    assert_eq!(store.session_count(), 3);
    assert_eq!(store.snapshot("s000001").unwrap(), a);
    assert_eq!(store.snapshot("s000002").unwrap(), b);
    assert_eq!(store.snapshot(&c.0).unwrap(), c.1);
    // New ids continue after the replayed ones.
    assert_eq!(store.create("item-00002").unwrap().session_id, "s000004");
}

#[test]
fn resumed_session_finishes_like_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    {
        let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
        store.create("item-00002").unwrap();
        answer_n(&store, "s000001", 2, 7);
    }
    let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
    answer_n(&store, "s000001", 2, 100);
    let resumed = store.snapshot("s000001").unwrap();

    let pose = reg.items[2].pose_3d.clone().unwrap();
    let annotator = SimulatedAnnotator { error_rate: 0.1, ..SimulatedAnnotator::perfect() };
    let mut direct = AnnotationSession::for_skeleton("item-00002", &reg.skeleton).unwrap();
    direct.drive(|i, j| annotate(&annotator, &pose, i, j, 9)).unwrap();
    assert_eq!(resumed, direct);
}

#[test]
fn torn_final_line_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let acknowledged = {
        let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
        store.create("item-00000").unwrap();
        answer_n(&store, "s000001", 0, 4);
        store.snapshot("s000001").unwrap()
    };
    let path = dir.path().join("sessions/s000001.jsonl");
    // A crash in the middle of writing the fifth answer.
    OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(br#"{"event":"answer","seq":4,"ans"#)
        .unwrap();
    let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
    assert_eq!(store.snapshot("s000001").unwrap(), acknowledged);
    // The log is usable again after truncation.
    answer_n(&store, "s000001", 0, 1);
    drop(store);
    let (_, s) = replay_log(&path, &reg).unwrap();
    assert_eq!(s.question_count, acknowledged.question_count + 1);
}

#[test]
fn rejected_answers_are_not_logged() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let store = SessionStore::open(reg.clone(), dir.path()).unwrap();
    store.create("item-00000").unwrap();
    store.answer("s000001", Answer::Closer, Some(0)).unwrap();
    assert!(matches!(store.answer("s000001", Answer::Closer, Some(0)), Err(ServiceError::Conflict(_))));
    let lines = std::fs::read_to_string(dir.path().join("sessions/s000001.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[test]
fn corrupt_log_fails_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    std::fs::create_dir_all(dir.path().join("sessions")).unwrap();
    std::fs::write(dir.path().join("sessions/s000001.jsonl"), "{\"event\":\"answer\",\"seq\":0,\"answer\":\"same\"}\n").unwrap();
    assert!(SessionStore::open(reg, dir.path()).is_err());
}
