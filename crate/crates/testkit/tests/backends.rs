//! Every object store and metastore backend against the same contract.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use spillway_core::config::JobConfig;
use spillway_core::metastore::{KvBackend, MemoryKv, MetaError, MetaStore, Phase, RedisKv};
use spillway_core::settings::Settings;
use spillway_core::storage::{
    multipart_put, read_object, ByteRange, LocalStore, MemoryStore, ObjectPath, ObjectStore, PartWriter, S3Store,
    StoreError,
};
use spillway_core::udf::{Catalog, FunctionRef};
use spillway_core::runtime::Deployment;
use spillway_testkit::fake_redis::FakeRedis;
use spillway_testkit::fake_s3::{FakeS3, FakeS3Options};
use spillway_testkit::harness::{final_output, put, run_job, wordcount_config};
use spillway_testkit::oracle::{count_diff, parse_counts};
use spillway_testkit::{generate_corpus, oracle_wordcount};

fn p(key: &str) -> ObjectPath {
    ObjectPath::new("bkt", key).unwrap()
}

fn conformance(store: &dyn ObjectStore) {
    store.put_object(&p("a/one"), b"hello world").unwrap();
    store.put_object(&p("a/two words"), b"x").unwrap();
    store.put_object(&p("b/three"), b"").unwrap();
    assert_eq!(store.object_size(&p("a/one")).unwrap(), 11);
    assert_eq!(store.object_size(&p("b/three")).unwrap(), 0);
    assert_eq!(
        store.get_object_range(&p("a/one"), ByteRange::new(6, 11).unwrap()).unwrap(),
        b"world"
    );
    assert_eq!(
        store.get_object_range(&p("a/one"), ByteRange::new(6, 400).unwrap()).unwrap(),
        b"world"
    );
    assert!(matches!(
        store.get_object_range(&p("a/one"), ByteRange::new(11, 12).unwrap()),
        Err(StoreError::InvalidRange { size: 11, .. })
    ));
    assert!(matches!(store.object_size(&p("nope")), Err(StoreError::NoSuchObject(_))));
    assert!(matches!(
        store.get_object_range(&p("nope"), ByteRange::new(0, 1).unwrap()),
        Err(StoreError::NoSuchObject(_))
    ));
    let keys: Vec<String> = store
        .list_objects("bkt", "a/")
        .unwrap()
        .into_iter()
        .map(|o| o.path.key().to_string())
        .collect();
    assert_eq!(keys, ["a/one", "a/two words"]);
    assert_eq!(store.list_objects("bkt", "").unwrap().len(), 3);
    assert!(store.list_objects("bkt", "zzz").unwrap().is_empty());

    store.put_object(&p("a/one"), b"replaced").unwrap();
    assert_eq!(read_object(store, &p("a/one")).unwrap(), b"replaced");
    assert_eq!(read_object(store, &p("b/three")).unwrap(), b"");

    multipart_put(store, &p("m/obj"), [b"aaaa".as_slice(), b"bbbb", b"cc"], 4).unwrap();
    assert_eq!(read_object(store, &p("m/obj")).unwrap(), b"aaaabbbbcc");
    let err = multipart_put(store, &p("m/bad"), [b"aa".as_slice(), b"bbbb"], 4).unwrap_err();
    assert!(matches!(err, StoreError::PartTooSmall { part_number: 1, .. }));
    assert!(matches!(store.object_size(&p("m/bad")), Err(StoreError::NoSuchObject(_))));

    // An aborted streaming write leaves nothing behind.
    let mut w = PartWriter::new(store, p("m/aborted"), 4);
    w.write(b"0123456789").unwrap();
    w.abort().unwrap();
    assert!(matches!(store.object_size(&p("m/aborted")), Err(StoreError::NoSuchObject(_))));

    let mut w = PartWriter::new(store, p("m/streamed"), 3);
    for chunk in [b"ab".as_slice(), b"cdefg", b"h"] {
        w.write(chunk).unwrap();
    }
    assert_eq!(w.finish().unwrap(), 8);
    assert_eq!(read_object(store, &p("m/streamed")).unwrap(), b"abcdefgh");

    store.delete_object(&p("a/one")).unwrap();
    store.delete_object(&p("a/one")).unwrap();
    assert!(matches!(store.object_size(&p("a/one")), Err(StoreError::NoSuchObject(_))));
}

#[test]
fn memory_store_conforms() {
    conformance(&MemoryStore::new());
}

#[test]
fn local_store_conforms() {
    let dir = tempfile::tempdir().unwrap();
    conformance(&LocalStore::new(dir.path()));
}

#[test]
fn s3_store_conforms() {
    let srv = FakeS3::start(FakeS3Options::default()).unwrap();
    conformance(&S3Store::new(srv.config()).unwrap());
    assert_eq!(srv.open_uploads(), 0);
}

#[test]
fn s3_listing_follows_continuation_tokens() {
    let srv = FakeS3::start(FakeS3Options {
        page_size: 2,
        min_part_bytes: 0,
    })
    .unwrap();
    let s = S3Store::new(srv.config()).unwrap();
    for i in (0..7).rev() {
        s.put_object(&p(&format!("k/{i:02}")), &[i as u8]).unwrap();
    }
    let listed: Vec<(String, u64)> = s
        .list_objects("bkt", "k/")
        .unwrap()
        .into_iter()
        .map(|o| (o.path.key().to_string(), o.size))
        .collect();
    assert_eq!(listed.len(), 7);
    assert_eq!(listed[0], ("k/00".to_string(), 1));
    assert!(listed.windows(2).all(|w| w[0].0 < w[1].0));
}

#[test]
fn s3_errors_map_to_store_errors() {
    let srv = FakeS3::start(FakeS3Options {
        page_size: 1000,
        min_part_bytes: 5,
    })
    .unwrap();
    let mut bad = srv.config();
    bad.secret_key = "wrong".into();
    let s = S3Store::new(bad).unwrap();
    assert!(matches!(s.put_object(&p("x"), b"1"), Err(StoreError::AccessDenied(_))));

    let s = S3Store::new(srv.config()).unwrap();
    // The server enforces its own minimum when the client's is laxer.
    assert!(multipart_put(&s, &p("small"), [b"ab".as_slice(), b"cd"], 1).is_err());
    srv.set_available(false);
    assert!(matches!(s.put_object(&p("x"), b"1"), Err(StoreError::StoreUnavailable(_))));
    srv.set_available(true);
    s.put_object(&p("x"), b"1").unwrap();
    assert_eq!(srv.object("bkt", "x").unwrap(), b"1");
}

fn job(id: &str) -> JobConfig {
    let mut c = JobConfig::new(
        vec!["in/".into()],
        "out",
        3,
        1,
        FunctionRef::new("wordcount_map"),
        Some(FunctionRef::new("sum_reduce")),
    );
    c.job_id = Some(id.into());
    c
}

fn metastore_contract(meta: &MetaStore) {
    meta.create_job(&job("j1")).unwrap();
    assert!(matches!(meta.create_job(&job("j1")), Err(MetaError::JobExists(_))));
    assert!(matches!(meta.job_state("zz"), Err(MetaError::NoSuchJob(_))));
    meta.transition("j1", Phase::Pending, Phase::Splitting, None).unwrap();
    assert!(meta.transition("j1", Phase::Pending, Phase::Splitting, None).is_err());
    assert!(matches!(
        meta.update_job_state("j1", Phase::Completed, None),
        Err(MetaError::IllegalTransition { .. })
    ));
    meta.transition("j1", Phase::Splitting, Phase::Mapping, None).unwrap();

    // Concurrent, duplicated completions count each worker once.
    let meta2 = meta.clone();
    let handles: Vec<_> = (0..12)
        .map(|i| {
            let m = meta2.clone();
            thread::spawn(move || m.record_completion("j1", Phase::Mapping, i % 3).unwrap())
        })
        .collect();
    let counts: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(counts.iter().all(|&c| (1..=3).contains(&c)));
    assert_eq!(meta.completion_count("j1", Phase::Mapping).unwrap(), 3);
    assert!(matches!(
        meta.record_completion("j1", Phase::Reducing, 0),
        Err(MetaError::PhaseMismatch { .. })
    ));

    // Exactly one of many racing compare-and-sets wins.
    let winners: usize = (0..8)
        .map(|_| {
            let m = meta.clone();
            thread::spawn(move || m.transition("j1", Phase::Mapping, Phase::Reducing, None).is_ok())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| usize::from(h.join().unwrap()))
        .sum();
    assert_eq!(winners, 1);

    meta.create_job(&job("j10")).unwrap();
    assert!(meta.delete_job("j1").unwrap() >= 2);
    assert!(matches!(meta.job_state("j1"), Err(MetaError::NoSuchJob(_))));
    assert_eq!(meta.job_state("j10").unwrap().phase, Phase::Pending);
}

#[test]
fn memory_metastore_conforms() {
    metastore_contract(&MetaStore::new(Arc::new(MemoryKv::new())));
}

#[test]
fn redis_metastore_conforms() {
    let srv = FakeRedis::start().unwrap();
    let kv = RedisKv::new("127.0.0.1", srv.addr().port(), Duration::from_secs(5)).unwrap();
    metastore_contract(&MetaStore::new(Arc::new(kv)));
    assert!(srv.keys().iter().all(|k| k.starts_with("job:j10:")));
}

#[test]
fn redis_update_retries_under_contention() {
    let srv = FakeRedis::start().unwrap();
    let kv = Arc::new(RedisKv::new("127.0.0.1", srv.addr().port(), Duration::from_secs(5)).unwrap());
    kv.set("n", b"0").unwrap();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let kv = kv.clone();
            thread::spawn(move || {
                for _ in 0..25 {
                    kv.update("n", &mut |cur| {
                        let n: u64 = std::str::from_utf8(cur.unwrap()).unwrap().parse().unwrap();
                        Ok((n + 1).to_string().into_bytes())
                    })
                    .unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(kv.get("n").unwrap().unwrap(), b"200");
}

#[test]
fn wordcount_over_s3_and_redis_from_settings() {
    let s3 = FakeS3::start(FakeS3Options {
        page_size: 3,
        min_part_bytes: 0,
    })
    .unwrap();
    let redis = FakeRedis::start().unwrap();
    let yaml = format!(
        "storage:\n  backend: s3\n  bucket: data\n  s3:\n    endpoint: {}\n    access_key: {}\n    secret_key: {}\n\
         metastore:\n  backend: redis\n  host: 127.0.0.1\n  port: {}\n\
         coordinator:\n  host: 127.0.0.1\n  port: 0\n",
        s3.endpoint(),
        spillway_testkit::fake_s3::ACCESS_KEY,
        spillway_testkit::fake_s3::SECRET_KEY,
        redis.addr().port()
    );
    let settings = Settings::from_yaml(&yaml).unwrap();
    let d = Deployment::from_settings(&settings, Catalog::builtin(), true).unwrap();
    let corpus = generate_corpus(200_000, 1_500, true, 21);
    put(d.store().as_ref(), "in/corpus.txt", &corpus);
    let mut cfg = wordcount_config("in/", "out/wc", 3, 2);
    cfg.output_buffer_bytes = 32 << 10;
    cfg.multipart_part_bytes = 8 << 10;
    let st = run_job(&d, cfg);
    assert_eq!(st.phase, Phase::Completed, "{:?}", st.failure_reason);
    let got = parse_counts(&final_output(&d, &st));
    assert_eq!(count_diff(&got, &oracle_wordcount(&corpus)), None);
    assert!(redis.keys().iter().any(|k| k.ends_with(":state")));
    assert!(s3.object("data", "out/wc/final").is_some());
}
