use repforge_core::annotation::{parse_release, validate};
use repforge_core::{Source, Split};
use repforge_service::store::{ANNOTATION_LOG, VALIDITY_LOG};
use repforge_service::{
    AnnotationPayload, ClipSeed, Effect, Payload, ServiceError, Store, StoreConfig, Submission, TaskKind,
};

const T0: f64 = 1_700_000_000.0;

fn seed(video: &str) -> ClipSeed {
    ClipSeed {
        source: Source::Kinetics,
        video_id: video.into(),
        narration_timestamp: None,
        media: None,
    }
}

fn ann(start: f64, end: f64, count: u32) -> Payload {
    Payload::Annotation(AnnotationPayload {
        start,
        end,
        count,
        description: "stirring soup".into(),
    })
}

fn store_with(videos: &[&str]) -> Store {
    let mut s = Store::in_memory(StoreConfig::default());
    s.register(videos.iter().map(|v| seed(v)).collect()).unwrap();
    s
}

/// Leases the next task of `kind` for `rater` and answers it.
fn answer(s: &mut Store, rater: &str, kind: TaskKind, payload: Payload, now: f64) -> Result<Effect, ServiceError> {
    let task = s.next_task(rater, kind, now).expect("a task is available");
    s.submit(
        Submission {
            task_id: task.task_id,
            rater_id: rater.into(),
            payload,
            submitted_at: None,
        },
        now,
    )
    .map(|a| a.effect)
}

fn pass_validity(s: &mut Store) {
    answer(s, "v1", TaskKind::Validity, Payload::Validity(true), T0).unwrap();
    assert_eq!(
        answer(s, "v2", TaskKind::Validity, Payload::Validity(true), T0).unwrap(),
        Effect::ValidityPassed
    );
}

#[test]
fn fresh_pool_leases_first_task() {
    let mut s = store_with(&["k1", "k2"]);
    let t = s.next_task("a", TaskKind::Validity, T0).unwrap();
    assert_eq!(t.clip_id, "kinetics:k1");
    assert_eq!(t.lease.unwrap().rater_id, "a");
    assert_eq!(t.media_url, "/clips/kinetics:k1/media");
    // asking again returns the same lease
    assert_eq!(s.next_task("a", TaskKind::Validity, T0 + 5.0).unwrap().task_id, t.task_id);
    // the second slot of the same clip goes to someone else
    let u = s.next_task("b", TaskKind::Validity, T0).unwrap();
    assert_eq!(u.clip_id, "kinetics:k1");
    assert_ne!(u.task_id, t.task_id);
    assert!(s.next_task("a", TaskKind::FullAnnotation, T0).is_none());
}

#[test]
fn rater_never_sees_a_clip_twice() {
    let mut s = store_with(&["k1", "k2"]);
    answer(&mut s, "a", TaskKind::Validity, Payload::Validity(true), T0).unwrap();
    let t = s.next_task("a", TaskKind::Validity, T0).unwrap();
    assert_eq!(t.clip_id, "kinetics:k2");
    answer(&mut s, "b", TaskKind::Validity, Payload::Validity(true), T0).unwrap();
    assert_eq!(s.next_task("a", TaskKind::Validity, T0).unwrap().clip_id, "kinetics:k2");
}

#[test]
fn expired_lease_returns_to_pool() {
    let mut s = store_with(&["k1"]);
    let ttl = StoreConfig::default().lease_ttl_secs;
    let a = s.next_task("a", TaskKind::Validity, T0).unwrap();
    let b = s.next_task("b", TaskKind::Validity, T0).unwrap();
    assert!(s.next_task("c", TaskKind::Validity, T0 + 10.0).is_none());
    let c = s.next_task("c", TaskKind::Validity, T0 + ttl + 1.0).unwrap();
    assert!(c.task_id == a.task_id || c.task_id == b.task_id);
    let evicted = if c.task_id == a.task_id { "a" } else { "b" };
    let late = s.submit(
        Submission {
            task_id: c.task_id,
            rater_id: evicted.into(),
            payload: Payload::Validity(true),
            submitted_at: None,
        },
        T0 + ttl + 2.0,
    );
    assert!(matches!(late, Err(ServiceError::StaleLease(_))));
}

#[test]
fn agreeing_pair_resolves_consistent() {
    let mut s = store_with(&["k1"]);
    pass_validity(&mut s);
    assert_eq!(answer(&mut s, "a", TaskKind::FullAnnotation, ann(2.0, 6.0, 4), T0).unwrap(), Effect::Recorded);
    assert_eq!(
        answer(&mut s, "b", TaskKind::FullAnnotation, ann(2.2, 6.0, 5), T0).unwrap(),
        Effect::Resolved { consistent: true }
    );
    assert_eq!(s.pending(), 0);
    assert!(s.clip_record("kinetics:k1").unwrap().consistent);
}

#[test]
fn disagreement_spawns_third_task() {
    let mut s = store_with(&["k1"]);
    pass_validity(&mut s);
    answer(&mut s, "a", TaskKind::FullAnnotation, ann(2.0, 6.0, 4), T0).unwrap();
    assert_eq!(
        answer(&mut s, "b", TaskKind::FullAnnotation, ann(2.0, 6.0, 8), T0).unwrap(),
        Effect::ThirdRaterRequested
    );
    assert!(s.next_task("a", TaskKind::FullAnnotation, T0).is_none());
    assert!(s.next_task("b", TaskKind::FullAnnotation, T0).is_none());
    assert_eq!(
        answer(&mut s, "c", TaskKind::FullAnnotation, ann(2.1, 6.0, 7), T0).unwrap(),
        Effect::Resolved { consistent: true }
    );
}

#[test]
fn one_negative_vote_makes_clip_invalid() {
    let mut s = store_with(&["k1"]);
    answer(&mut s, "a", TaskKind::Validity, Payload::Validity(true), T0).unwrap();
    assert_eq!(answer(&mut s, "b", TaskKind::Validity, Payload::Validity(false), T0).unwrap(), Effect::Invalid);
    assert!(s.next_task("c", TaskKind::FullAnnotation, T0).is_none());
    assert_eq!(s.pending(), 0);
}

#[test]
fn count_one_is_rejected() {
    let mut s = store_with(&["k1"]);
    pass_validity(&mut s);
    match answer(&mut s, "a", TaskKind::FullAnnotation, ann(2.0, 6.0, 1), T0) {
        Err(ServiceError::Validation(v)) => assert_eq!(v[0].rule, "count ≥ 2"),
        other => panic!("expected validation failure, got {other:?}"),
    }
    match answer(&mut s, "a", TaskKind::FullAnnotation, ann(2.0, 12.0, 3), T0) {
        Err(ServiceError::Validation(v)) => assert_eq!(v[0].field, "end_time"),
        other => panic!("expected validation failure, got {other:?}"),
    }
    // the lease survives a rejected submission
    assert_eq!(answer(&mut s, "a", TaskKind::FullAnnotation, ann(2.0, 6.0, 3), T0).unwrap(), Effect::Recorded);
}

#[test]
fn duplicate_and_mismatched_submissions() {
    let mut s = store_with(&["k1"]);
    let t = s.next_task("a", TaskKind::Validity, T0).unwrap();
    let sub = |payload| Submission {
        task_id: t.task_id.clone(),
        rater_id: "a".into(),
        payload,
        submitted_at: None,
    };
    assert!(matches!(s.submit(sub(ann(1.0, 2.0, 3)), T0), Err(ServiceError::KindMismatch { .. })));
    s.submit(sub(Payload::Validity(true)), T0).unwrap();
    assert!(matches!(
        s.submit(sub(Payload::Validity(true)), T0),
        Err(ServiceError::DuplicateSubmission(_))
    ));
    let unknown = Submission {
        task_id: "kinetics:nope#validity-0".into(),
        ..sub(Payload::Validity(true))
    };
    assert!(matches!(s.submit(unknown, T0), Err(ServiceError::UnknownTask(_))));
}

fn run_session(s: &mut Store) {
    // k1 consistent, k2 inconsistent after a third rater, k3 invalid, k4 consistent
    for _ in 0..4 {
        answer(s, "v1", TaskKind::Validity, Payload::Validity(true), T0).unwrap();
    }
    for (i, vote) in [true, true, false, true].into_iter().enumerate() {
        let t = s.next_task("v2", TaskKind::Validity, T0).unwrap();
        assert!(t.clip_id.ends_with(&format!("k{}", i + 1)));
        s.submit(
            Submission {
                task_id: t.task_id,
                rater_id: "v2".into(),
                payload: Payload::Validity(vote),
                submitted_at: None,
            },
            T0,
        )
        .unwrap();
    }
    answer(s, "a", TaskKind::FullAnnotation, ann(1.0, 5.0, 6), T0).unwrap();
    answer(s, "b", TaskKind::FullAnnotation, ann(1.2, 5.0, 6), T0).unwrap();
    answer(s, "a", TaskKind::FullAnnotation, ann(3.0, 9.0, 4), T0).unwrap();
    answer(s, "b", TaskKind::FullAnnotation, ann(0.0, 2.0, 12), T0).unwrap();
    answer(s, "a", TaskKind::FullAnnotation, ann(0.5, 9.5, 10), T0).unwrap();
    answer(s, "b", TaskKind::FullAnnotation, ann(0.5, 9.0, 11), T0).unwrap();
    answer(s, "c", TaskKind::FullAnnotation, ann(6.0, 9.0, 20), T0).unwrap();
}

#[test]
fn replay_reconstructs_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Store::open(dir.path(), StoreConfig::default()).unwrap();
    s.register(["k1", "k2", "k3", "k4"].iter().map(|v| seed(v)).collect()).unwrap();
    run_session(&mut s);
    let before = s.snapshot();
    let export = s.export_release().unwrap();
    drop(s);
    let again = Store::open(dir.path(), StoreConfig::default()).unwrap();
    assert_eq!(again.snapshot(), before);
    assert_eq!(again.export_release().unwrap(), export);
    let lines = |f| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(lines(VALIDITY_LOG), 8);
    assert_eq!(lines(ANNOTATION_LOG), 7);
}

#[test]
fn export_round_trips_and_keeps_inconsistent_in_train() {
    let mut s = store_with(&["k1", "k2", "k3", "k4"]);
    run_session(&mut s);
    let bytes = s.export_release().unwrap();
    let records = parse_release(&bytes, Source::Kinetics).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| validate(r).is_empty()));
    let k2 = records.iter().find(|r| r.video_id == "k2").unwrap();
    assert_eq!(k2.annotations.len(), 3);
    assert!(!k2.consistent && k2.split == Split::Train);
    assert!(k2.annotations.iter().all(|a| a.agreement == Some(false)));
    assert!(records.iter().filter(|r| r.split == Split::Test).all(|r| r.consistent));
}

#[test]
fn export_needs_finished_pool() {
    let mut s = Store::in_memory(StoreConfig::default());
    assert!(matches!(s.export_release(), Err(ServiceError::EmptyStore)));
    s.register(vec![seed("k1"), seed("k2")]).unwrap();
    assert!(matches!(s.export_release(), Err(ServiceError::NotFinalized { pending: 2 })));
}
