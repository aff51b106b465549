mod common;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_match_golden_files() {
    let failures: Vec<String> = common::endpoint_script()
        .await
        .into_iter()
        .filter_map(|(name, r)| r.err().map(|e| format!("{name}: {e}")))
        .collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
