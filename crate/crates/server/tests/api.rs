use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use visitprep_server::{router, AppState, Config};

const TOKEN: &str = "test-admin-token";

const GUIDE_PAGES: &[&str] = &[
    "Breast cancer staging describes the size of the tumor and whether cancer cells have spread to lymph nodes. \
     Staging guides which treatments are offered.\n\nA biopsy removes a small sample of tissue so a pathologist can \
     confirm the diagnosis and measure hormone receptor status.",
    "Lumpectomy removes the tumor and a margin of healthy tissue while keeping most of the breast. \
     Radiation therapy usually follows lumpectomy to lower the chance of recurrence.\n\nMastectomy removes the whole \
     breast. Some patients choose reconstruction during the same operation or later.",
    "Chemotherapy uses medicines that travel through the bloodstream to destroy fast growing cells. \
     Common side effects include fatigue, nausea, hair loss and a higher risk of infection.\n\nAnti nausea medicines \
     work best when taken before symptoms start.",
    "Hormone therapy such as tamoxifen blocks estrogen from feeding receptor positive tumors. \
     Treatment often continues for five to ten years and may cause hot flashes and joint aches.",
    "Gentle exercise like walking can reduce treatment fatigue and improve mood. Physical therapists can help \
     with shoulder stiffness after surgery and with lymphedema, a swelling of the arm.",
    "Many patients feel anxious or low during treatment. Counseling, support groups and mindfulness programs \
     are available through the cancer center social work team.",
    "A balanced diet with vegetables, fruit, whole grains and lean protein helps the body heal. \
     Patients receiving chemotherapy should avoid raw fish and unpasteurized milk because of infection risk.",
    "After treatment ends, follow up visits usually happen every three to six months for the first years. \
     Yearly mammograms of the treated and untreated breast are recommended.",
    "Financial counselors explain insurance coverage, copayments and assistance programs. \
     Some foundations help with travel costs, parking and childcare during treatment.",
];

struct TestApp {
    router: Router,
    state: Arc<AppState>,
    data: tempfile::TempDir,
}

fn test_app() -> TestApp {
    let data = tempfile::tempdir().unwrap();
    let mut config = Config::stub(data.path());
    config.chunk_max = 220;
    config.chunk_overlap = 40;
    let state = Arc::new(AppState::build(&config, Some(TOKEN.into())).unwrap());
    TestApp {
        router: router(state.clone()),
        state,
        data,
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"));
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    send(app, req.body(body).unwrap()).await
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn write_guide(dir: &std::path::Path) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, text) in GUIDE_PAGES.iter().enumerate() {
        std::fs::write(dir.join(format!("{}.txt", i + 1)), text).unwrap();
    }
}

async fn wait_for_job(app: &Router, job_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut last = 0.0;
    loop {
        let (status, job) = call(app, Method::GET, &format!("/api/admin/ingest-jobs/{job_id}"), None).await;
        assert_eq!(status, StatusCode::OK, "{job}");
        let progress = job["progress"].as_f64().unwrap();
        assert!(progress >= last, "progress went from {last} to {progress}");
        last = progress;
        if matches!(job["status"].as_str(), Some("Done" | "Failed")) {
            return job;
        }
        assert!(Instant::now() < deadline, "ingest did not finish: {job}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn ingest_guide(t: &TestApp) {
    let folder = t.data.path().join("guide");
    write_guide(&folder);
    let (status, job) = call(
        &t.router,
        Method::POST,
        "/api/admin/books",
        Some(json!({ "book_id": "guide", "path": folder })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let job = wait_for_job(&t.router, job["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "Done", "{job}");
    assert_eq!(job["report"]["pages_extracted"], 9);
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, Method::POST, "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_owned()
}

#[tokio::test(flavor = "multi_thread")]
async fn start_session_lists_the_topic_menu() {
    let t = test_app();
    let (status, body) = call(&t.router, Method::POST, "/api/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["stage"], "TopicSelection");
    let topics = body["topics"].as_array().unwrap();
    assert_eq!(topics.len(), 8);
    assert_eq!(
        topics[0],
        json!({ "topic_id": "diagnosis_and_screening", "display_name": "Diagnosis and Screening" })
    );
    assert_eq!(topics[7]["display_name"], "Other Concerns");
}

#[tokio::test(flavor = "multi_thread")]
async fn premature_journey_is_a_conflict_naming_unanswered_prompts() {
    let t = test_app();
    ingest_guide(&t).await;
    let id = new_session(&t.router).await;
    let base = format!("/api/sessions/{id}");

    let (status, body) = call(&t.router, Method::POST, &format!("{base}/journey"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "WrongStage");

    call(
        &t.router,
        Method::POST,
        &format!("{base}/topics"),
        Some(json!({ "topic_ids": ["treatment_plan"] })),
    )
    .await;
    for text in ["I might need surgery.", "I worry about chemotherapy nausea."] {
        let (status, _) = call(
            &t.router,
            Method::POST,
            &format!("{base}/responses"),
            Some(json!({ "text": text })),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, _) = call(&t.router, Method::POST, &format!("{base}/reflection"), None).await;
    assert_eq!(status, StatusCode::OK);
    call(
        &t.router,
        Method::POST,
        &format!("{base}/responses"),
        Some(json!({ "text": "My kids." })),
    )
    .await;

    let (status, body) = call(&t.router, Method::POST, &format!("{base}/journey"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(body["code"], "ReflectionIncomplete");
    assert_eq!(body["retriable"], false);
    assert_eq!(body["details"]["unanswered"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_session_ends_with_five_and_five() {
    let t = test_app();
    ingest_guide(&t).await;
    let id = new_session(&t.router).await;
    let base = format!("/api/sessions/{id}");

    let (status, body) = call(
        &t.router,
        Method::POST,
        &format!("{base}/topics"),
        Some(json!({ "topic_ids": ["treatment_plan"] })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["stage"], "ElicitKnowledge");

    let (status, _) = call(&t.router, Method::GET, &format!("{base}/panel"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    for text in [
        "I know I might need surgery and radiation.",
        "I am unsure about chemotherapy side effects like nausea.",
    ] {
        call(
            &t.router,
            Method::POST,
            &format!("{base}/responses"),
            Some(json!({ "text": text })),
        )
        .await;
    }
    let (status, panel) = call(&t.router, Method::GET, &format!("{base}/panel"), None).await;
    assert_eq!(status, StatusCode::OK, "{panel}");
    assert!(!panel["panel"]["background_summary"].as_str().unwrap().is_empty());

    let (_, body) = call(&t.router, Method::POST, &format!("{base}/reflection"), None).await;
    assert_eq!(body["stage"], "Reflection");
    for text in [
        "Keeping my energy for my kids.",
        "Whether to have chemo.",
        "Recovering quickly.",
    ] {
        call(
            &t.router,
            Method::POST,
            &format!("{base}/responses"),
            Some(json!({ "text": text })),
        )
        .await;
    }
    let (status, body) = call(&t.router, Method::POST, &format!("{base}/journey"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let draft = body["narrative"]["original_text"].as_str().unwrap().to_owned();

    let edited = format!("{draft} I also want to ask about work.");
    let (status, body) = call(
        &t.router,
        Method::PUT,
        &format!("{base}/narrative"),
        Some(json!({ "text": edited })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let fraction = body["narrative"]["token_change_fraction"].as_f64().unwrap();
    assert!(fraction > 0.0 && fraction < 1.0);

    let (status, body) = call(&t.router, Method::POST, &format!("{base}/narrative/confirm"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["questions_error"], Value::Null, "{body}");
    assert_eq!(body["stage"], "QuestionsReady");

    let (status, out) = call(&t.router, Method::GET, &format!("{base}/questions"), None).await;
    assert_eq!(status, StatusCode::OK);
    let know = out["know_them"].as_array().unwrap();
    let ask = out["ask_them"].as_array().unwrap();
    assert_eq!((know.len(), ask.len()), (5, 5));
    assert_eq!(out["threshold_used"], 0.6);
    for q in know {
        assert!(q["score"].as_f64().unwrap() >= 0.6);
        assert!(!q["answer"].as_str().unwrap().is_empty());
        assert!(!q["sources"].as_array().unwrap().is_empty());
    }
    for q in ask {
        assert!(q["score"].as_f64().unwrap() < 0.6);
    }

    let (status, body) = call(&t.router, Method::POST, &format!("{base}/close"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["stage"], "Closed");

    // The session survives a restart from its event log alone.
    let (_, before) = call(&t.router, Method::GET, &base, None).await;
    let events = t.state.events.read(&id).unwrap();
    let replayed = visitprep_core::SessionState::replay(&events).unwrap();
    assert_eq!(visitprep_server::app::session_view(&replayed), before);
    assert_eq!(t.state.engine.reexecute(&events).unwrap(), events);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_reload_from_disk_in_a_new_process() {
    let t = test_app();
    let id = new_session(&t.router).await;
    call(
        &t.router,
        Method::POST,
        &format!("/api/sessions/{id}/topics"),
        Some(json!({ "topic_ids": ["physical_wellness"] })),
    )
    .await;
    let (_, before) = call(&t.router, Method::GET, &format!("/api/sessions/{id}"), None).await;

    let mut config = Config::stub(t.data.path());
    config.chunk_max = 220;
    config.chunk_overlap = 40;
    let fresh = router(Arc::new(AppState::build(&config, None).unwrap()));
    let (status, after) = call(&fresh, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
}

#[tokio::test(flavor = "multi_thread")]
async fn error_statuses() {
    let t = test_app();
    let (status, body) = call(&t.router, Method::GET, "/api/sessions/does-not-exist", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "SessionNotFound");

    let id = new_session(&t.router).await;
    let base = format!("/api/sessions/{id}");
    let (status, body) = call(
        &t.router,
        Method::POST,
        &format!("{base}/topics"),
        Some(json!({ "topic_ids": ["astrology"] })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "UnknownTopic");

    let (status, body) = call(
        &t.router,
        Method::POST,
        &format!("{base}/topics"),
        Some(json!({ "wrong": 1 })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "InvalidRequest");

    // No guidebook yet: the panel cannot be built.
    call(
        &t.router,
        Method::POST,
        &format!("{base}/topics"),
        Some(json!({ "topic_ids": ["treatment_plan"] })),
    )
    .await;
    call(
        &t.router,
        Method::POST,
        &format!("{base}/responses"),
        Some(json!({ "text": "one" })),
    )
    .await;
    let (status, body) = call(
        &t.router,
        Method::POST,
        &format!("{base}/responses"),
        Some(json!({ "text": "two" })),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["code"], "EmptyIndex");
    assert_eq!(body["retriable"], true);

    let req = Request::builder()
        .uri("/api/admin/ingest-jobs/x")
        .body(Body::empty())
        .unwrap();
    let (status, body) = send(&t.router, req).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "Unauthorized");

    let (status, _) = call(&t.router, Method::GET, "/api/admin/ingest-jobs/x", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn admin_is_disabled_without_a_token() {
    let data = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::build(&Config::stub(data.path()), None).unwrap()));
    let (status, body) = call(&app, Method::GET, "/api/admin/ingest-jobs/x", None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["code"], "AdminDisabled");
}

#[tokio::test(flavor = "multi_thread")]
async fn multipart_upload_is_ingested() {
    let t = test_app();
    let boundary = "visitprep-boundary";
    let mut body = Vec::new();
    let mut part = |headers: &str, content: &[u8]| {
        body.extend_from_slice(format!("--{boundary}\r\n{headers}\r\n\r\n").as_bytes());
        body.extend_from_slice(content);
        body.extend_from_slice(b"\r\n");
    };
    part("Content-Disposition: form-data; name=\"book_id\"", b"uploaded");
    for (i, text) in GUIDE_PAGES.iter().take(3).enumerate() {
        part(
            &format!(
                "Content-Disposition: form-data; name=\"pages\"; filename=\"guide/{}.txt\"\r\nContent-Type: text/plain",
                i + 1
            ),
            text.as_bytes(),
        );
    }
    part(
        "Content-Disposition: form-data; name=\"pages\"; filename=\"guide/readme.md\"",
        b"ignored",
    );
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());

    let req = Request::builder()
        .method(Method::POST)
        .uri("/api/admin/books")
        .header(header::AUTHORIZATION, format!("Bearer {TOKEN}"))
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .unwrap();
    let (status, job) = send(&t.router, req).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let job = wait_for_job(&t.router, job["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "Done", "{job}");
    assert_eq!(job["report"]["pages_extracted"], 3);
    assert_eq!(job["report"]["skipped_files"].as_array().unwrap().len(), 1);

    let (_, health) = call(&t.router, Method::GET, "/api/health", None).await;
    assert_eq!(health["index"]["book_ids"], json!(["uploaded"]));
}
