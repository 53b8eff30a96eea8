use std::sync::Arc;

use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use vizproto_pipeline::imagegen::{GenerationManifest, JobStatus, AUDIT_DIR};
use vizproto_pipeline::synthetic::{build_project, color_generator, SyntheticSpec};
use vizproto_pipeline::{ProjectLayout, PromptStyle};
use vizproto_service::{serve, AppState};

struct Server {
    base: String,
    state: AppState,
    layout: ProjectLayout,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
    _dir: tempfile::TempDir,
}

impl Server {
    async fn start(configure: impl FnOnce(AppState) -> AppState) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let layout = tokio::task::spawn_blocking(move || build_project(&root, &SyntheticSpec::default()).unwrap())
            .await
            .unwrap();
        let state = configure(AppState::new(layout.clone()));
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(serve(listener, state.clone(), async {
            let _ = rx.await;
        }));
        Server {
            base,
            state,
            layout,
            stop: Some(tx),
            handle,
            _dir: dir,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn get_json(&self, path: &str) -> Value {
        let resp = reqwest::get(self.url(path)).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK, "GET {path}");
        resp.json().await.unwrap()
    }

    fn manifest(&self) -> GenerationManifest {
        GenerationManifest::load(&self.layout, PromptStyle::CoarseToFine, "colors").unwrap()
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap();
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn browse_datasets_prompts_and_images() {
    let srv = Server::start(|s| s).await;
    let datasets = srv.get_json("/api/datasets").await;
    assert_eq!(datasets[0]["dataset_id"], "colors");
    assert_eq!(datasets[0]["generated_styles"], json!(["coarse_to_fine", "baseline"]));

    let classes = srv.get_json("/api/datasets/colors/classes").await;
    let ids: Vec<_> = classes.as_array().unwrap().iter().map(|c| c["class_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["blue", "green", "red"]);
    assert_eq!(classes[0]["prompts"], 5);
    assert_eq!(classes[0]["impact"]["calibrated_sources"], 5);

    let prompts = srv.get_json("/api/classes/red/prompts").await;
    assert_eq!(prompts["prompts"].as_array().unwrap().len(), 5);
    let baseline = srv.get_json("/api/classes/red/prompts?dataset=colors&style=baseline").await;
    assert_eq!(baseline["style"], "baseline");

    let gens = srv.get_json("/api/classes/red/generations").await;
    assert_eq!(gens["dataset_id"], "colors");
    assert_eq!(gens["calibration_changed"], false);
    let url = gens["generations"][0]["image_url"].as_str().unwrap().to_owned();
    assert_eq!(url, "/images/coarse_to_fine/colors/red/1.png");
    let resp = reqwest::get(srv.url(&url)).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let img = image::load_from_memory(&resp.bytes().await.unwrap()).unwrap();
    assert_eq!(img.width(), 40);

    let missing = reqwest::get(srv.url("/api/datasets/nope/classes")).await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    let body: Value = missing.json().await.unwrap();
    assert_eq!(body["kind"], "not_found");
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn image_route_rejects_escapes_and_non_images() {
    let srv = Server::start(|s| s).await;
    std::fs::write(srv.layout.root().join("secret.png"), b"x").unwrap();
    for path in [
        "/images/coarse_to_fine/..%2F..%2Fsecret.png",
        "/images/%2Fetc%2Fpasswd.png",
        "/images/coarse_to_fine/colors/manifest.json",
        "/images/coarse_to_fine/colors/red/99.png",
    ] {
        let resp = reqwest::get(srv.url(path)).await.unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND, "{path}");
    }
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn flag_and_unflag_generation() {
    let srv = Server::start(|s| s).await;
    let client = reqwest::Client::new();
    let before = std::fs::read(GenerationManifest::path(&srv.layout, PromptStyle::CoarseToFine, "colors")).unwrap();
    let gid = srv.manifest().class_jobs("green")[1].generation_id.clone();

    let resp = client
        .post(srv.url("/api/flags"))
        .json(&json!({"generation_id": gid, "category": "wrong_category", "reviewer_id": "ana"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let flag: Value = resp.json().await.unwrap();
    let flag_id = flag["id"].as_str().unwrap().to_owned();

    let gens = srv.get_json("/api/classes/green/generations").await;
    assert_eq!(gens["impact"]["calibrated_sources"], 4);
    assert_eq!(gens["impact"]["uncorrected_sources"], 5);
    assert_eq!(gens["calibration_changed"], true);
    assert_eq!(gens["generations"][1]["status"], "flagged");
    assert_eq!(gens["generations"][1]["flag"]["reviewer_id"], "ana");

    let resp = client.delete(srv.url(&format!("/api/flags/{flag_id}"))).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    let after = std::fs::read(GenerationManifest::path(&srv.layout, PromptStyle::CoarseToFine, "colors")).unwrap();
    assert_eq!(before, after);
    let again = client.delete(srv.url(&format!("/api/flags/{flag_id}"))).send().await.unwrap();
    assert_eq!(again.status(), StatusCode::NOT_FOUND);

    let bad = client
        .post(srv.url("/api/flags"))
        .json(&json!({"generation_id": gid, "category": "blurry"}))
        .send()
        .await
        .unwrap();
    assert!(bad.status().is_client_error());
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn prompt_flag_edit_and_error_report() {
    let srv = Server::start(|s| s).await;
    let client = reqwest::Client::new();
    let resp = client
        .post(srv.url("/api/flags?dataset=colors"))
        .json(&json!({"class_id": "blue", "prompt_no": 2, "category": "poor_composition"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);

    let resp = client
        .put(srv.url("/api/prompts/blue/2"))
        .json(&json!({"text": "a blue square, centred"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let entry: Value = resp.json().await.unwrap();
    assert_eq!(entry["replacement"], "a blue square, centred");

    let prompts = srv.get_json("/api/classes/blue/prompts").await;
    assert_eq!(prompts["prompts"][1]["replacement"], "a blue square, centred");
    assert_eq!(prompts["prompts"][1]["flag"]["category"], "poor_composition");

    let report = srv.get_json("/api/datasets/colors/errors").await;
    assert_eq!(report["prompt_errors"], 1);
    assert_eq!(report["overlap_deduplicated_total"], 1);

    let cleared: Value = client
        .put(srv.url("/api/prompts/blue/2"))
        .json(&json!({"text": "  "}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(cleared.get("replacement").is_none());

    let missing = client
        .put(srv.url("/api/prompts/blue/9"))
        .json(&json!({"text": "x"}))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn regeneration_runs_in_background_and_archives_parent() {
    let srv = Server::start(|s| s.with_generator(Arc::new(color_generator())).with_workers(2)).await;
    let client = reqwest::Client::new();
    let parent = srv.manifest().class_jobs("red")[0].clone();

    // only flagged or failed jobs can be regenerated
    let early = client
        .post(srv.url(&format!("/api/regenerate/{}", parent.generation_id)))
        .send()
        .await
        .unwrap();
    assert_eq!(early.status(), StatusCode::BAD_REQUEST);

    client
        .post(srv.url("/api/flags"))
        .json(&json!({"generation_id": parent.generation_id, "category": "poor_composition"}))
        .send()
        .await
        .unwrap()
        .error_for_status()
        .unwrap();
    let resp = client
        .post(srv.url(&format!("/api/regenerate/{}", parent.generation_id)))
        .json(&json!({"prompt_text": "a red ball on grass"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let accepted: Value = resp.json().await.unwrap();
    assert_eq!(accepted["executing"], true);
    assert_eq!(accepted["parent"], parent.generation_id.as_str());
    let child_id = accepted["job"]["generation_id"].as_str().unwrap().to_owned();
    assert_eq!(accepted["job"]["prompt_text"], "a red ball on grass");

    srv.state.drain().await;
    let manifest = srv.manifest();
    assert_eq!(manifest.job(&child_id).unwrap().status, JobStatus::Done);
    assert_eq!(manifest.job(&parent.generation_id).unwrap().status, JobStatus::Regenerated);
    let audit = manifest
        .store_dir(&srv.layout)
        .join(AUDIT_DIR)
        .join(format!("{}.png", parent.generation_id));
    assert!(audit.is_file());

    let gens = srv.get_json("/api/classes/red/generations").await;
    assert_eq!(gens["impact"]["calibrated_sources"], 5);
    assert_eq!(gens["impact"]["pending"], 0);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn regeneration_without_generator_stays_pending() {
    let srv = Server::start(|s| s).await;
    let client = reqwest::Client::new();
    let gid = srv.manifest().class_jobs("blue")[3].generation_id.clone();
    client
        .post(srv.url("/api/flags"))
        .json(&json!({"generation_id": gid, "category": "wrong_category"}))
        .send()
        .await
        .unwrap()
        .error_for_status()
        .unwrap();
    let accepted: Value = client
        .post(srv.url(&format!("/api/regenerate/{gid}")))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(accepted["executing"], false);
    assert_eq!(accepted["job"]["status"], "pending");
    let gens = srv.get_json("/api/classes/blue/generations").await;
    assert_eq!(gens["impact"]["pending"], 1);
    assert!(gens["generations"][5]["image_url"].is_null());
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn runs_are_started_and_served_verbatim() {
    let srv = Server::start(|s| s).await;
    let client = reqwest::Client::new();
    let config = json!({"dataset_id": "colors", "backend_id": "mock-11", "n_g": 5});
    let resp = client.post(srv.url("/api/runs")).json(&config).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let run: Value = resp.json().await.unwrap();
    assert_eq!(run["accuracy"]["overall"], 1.0);
    let run_id = run["run_id"].as_str().unwrap();

    let resp = reqwest::get(srv.url(&format!("/api/runs/{run_id}"))).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let served = resp.bytes().await.unwrap();
    let stored = std::fs::read(srv.layout.run_dir(run_id).join("report.json")).unwrap();
    assert_eq!(served.as_ref(), stored.as_slice());

    let unknown = client
        .post(srv.url("/api/runs"))
        .json(&json!({"dataset_id": "colors", "backend_id": "vit-z-99"}))
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), StatusCode::BAD_REQUEST);

    let gaps = client
        .post(srv.url("/api/runs"))
        .json(&json!({"dataset_id": "absent", "backend_id": "mock-11"}))
        .send()
        .await
        .unwrap();
    assert_eq!(gaps.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = gaps.json().await.unwrap();
    assert_eq!(body["kind"], "missing_assets");
    assert!(!body["gaps"].as_array().unwrap().is_empty());

    let none = reqwest::get(srv.url("/api/runs/never-ran")).await.unwrap();
    assert_eq!(none.status(), StatusCode::NOT_FOUND);
    srv.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn bearer_token_is_enforced() {
    let srv = Server::start(|s| s.with_token(Some("s3cret".into()))).await;
    let client = reqwest::Client::new();
    let anon = client.get(srv.url("/api/datasets")).send().await.unwrap();
    assert_eq!(anon.status(), StatusCode::UNAUTHORIZED);
    let wrong = client.get(srv.url("/api/datasets")).bearer_auth("nope").send().await.unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    let ok = client.get(srv.url("/api/datasets")).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    srv.stop().await;
}
