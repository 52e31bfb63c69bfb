use spillway_testkit::generate_corpus;
use spillway_testkit::harness::{final_output, intermediate_bytes, memory_builder, put, run_job, wordcount_config};
use spillway_testkit::oracle::{count_diff, parse_counts};
use spillway_testkit::oracle_wordcount;

fn spilled(locality: bool) -> u64 {
    let corpus = generate_corpus(4 << 20, 50_000, locality, 11);
    let d = memory_builder().start().unwrap();
    put(d.store().as_ref(), "in/c", &corpus);
    let mut cfg = wordcount_config("in/", "out", 4, 2);
    // Small buffers so each mapper spills many times.
    cfg.output_buffer_bytes = 64 << 10;
    cfg.multipart_part_bytes = 32 << 10;
    let st = run_job(&d, cfg);
    assert!(count_diff(&parse_counts(&final_output(&d, &st)), &oracle_wordcount(&corpus)).is_none());
    intermediate_bytes(d.store().as_ref(), &st.job_id)
}

#[test]
fn combiner_gains_more_from_local_text() {
    let (clustered, uniform) = (spilled(true), spilled(false));
    assert!(
        clustered < uniform,
        "locality {clustered} bytes, no locality {uniform} bytes"
    );
}
