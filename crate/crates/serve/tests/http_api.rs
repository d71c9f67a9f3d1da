use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use flare_core::data::CorpusBundle;
use flare_core::flare::FlareModel;
use flare_core::synth::{make_synthetic_corpus, SyntheticSpec};
use flare_core::train::{load_preset, train};
use flare_serve::{
    cors, router, AppState, CategoriesResponse, ErrorBody, Fingerprint, HealthResponse,
    RecommendResponse, SearchResponse, Snapshot,
};

struct Fixture {
    bundle: CorpusBundle,
    model: FlareModel,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let bundle = make_synthetic_corpus(&SyntheticSpec::category_driven(96, 400, 5)).unwrap();
        let mut cfg = load_preset("desk-critique").unwrap();
        cfg.total_steps = 800;
        let model = train(&cfg, &bundle, None).unwrap().model;
        Fixture { bundle, model }
    })
}

fn fingerprint(tag: &str, b: &CorpusBundle) -> Fingerprint {
    Fingerprint {
        checkpoint_sha256: tag.into(),
        corpus_hash: b.content_hash().unwrap(),
        fusion: flare_core::flare::FusionMode::TextIdCritique,
        step: 800,
        n_items: b.items.len(),
    }
}

fn snapshot_with(bundle: &CorpusBundle, tag: &str) -> Snapshot {
    Snapshot::new(fixture().model.clone(), bundle, fingerprint(tag, bundle))
}

fn app() -> Router {
    let f = fixture();
    router(
        Arc::new(AppState::with_snapshot(snapshot_with(&f.bundle, "abc123"))),
        cors(None).unwrap(),
    )
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn history(n: usize) -> Vec<String> {
    let q = &fixture().bundle.split.test[n];
    q.history
        .iter()
        .map(|&i| fixture().bundle.items[i].item_id.clone())
        .collect()
}

#[tokio::test]
async fn health_reports_fingerprint() {
    let (status, body) = call(&app(), get("/v1/health")).await;
    assert_eq!(status, StatusCode::OK);
    let h: HealthResponse = serde_json::from_value(body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.fingerprint.checkpoint_sha256, "abc123");
}

#[tokio::test]
async fn every_route_is_503_without_a_model() {
    let app = router(Arc::new(AppState::empty()), cors(None).unwrap());
    for uri in ["/v1/health", "/v1/items/x", "/v1/items?q=a", "/v1/categories"] {
        assert_eq!(call(&app, get(uri)).await.0, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    let req = post_json("/v1/recommend", &json!({"history": ["C00001"]}));
    assert_eq!(call(&app, req).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn recommend_without_critique_is_plain_prediction() {
    let h = history(0);
    let (status, body) = call(&app(), post_json("/v1/recommend", &json!({ "history": h }))).await;
    assert_eq!(status, StatusCode::OK);
    let r: RecommendResponse = serde_json::from_value(body).unwrap();
    assert_eq!(r.k, 10);
    assert_eq!(r.items.len(), 10);
    assert!(r.critique.is_none());
    assert!(r.items.iter().all(|i| i.overlap.is_none()));
    assert!(r.items.windows(2).all(|w| w[0].score >= w[1].score));

    let f = fixture();
    let idx: Vec<usize> = f.bundle.split.test[0].history.clone();
    let direct = f.model.predict_topk(&idx, None, 10).unwrap();
    let served: Vec<(String, f64)> = r.items.iter().map(|i| (i.item_id.clone(), i.score)).collect();
    let expect: Vec<(String, f64)> = direct
        .iter()
        .map(|&(i, s)| (f.bundle.items[i].item_id.clone(), s))
        .collect();
    assert_eq!(served, expect);
}

#[tokio::test]
async fn blank_critique_equals_no_critique() {
    let app = app();
    let h = history(1);
    let a = call(&app, post_json("/v1/recommend", &json!({ "history": h, "k": 7 }))).await;
    let b = call(
        &app,
        post_json("/v1/recommend", &json!({ "history": h, "k": 7, "critique": "  " })),
    )
    .await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn identical_requests_identical_bodies() {
    let app = app();
    let body = json!({ "history": history(2), "critique": "Dept0 - Aisle0", "k": 25 });
    let mut handles = Vec::new();
    for _ in 0..8 {
        let (app, body) = (app.clone(), body.clone());
        handles.push(tokio::spawn(async move {
            call(&app, post_json("/v1/recommend", &body)).await
        }));
    }
    let first = handles.remove(0).await.unwrap();
    assert_eq!(first.0, StatusCode::OK);
    for h in handles {
        assert_eq!(h.await.unwrap(), first);
    }
}

#[tokio::test]
async fn critique_steers_toward_its_category() {
    let app = app();
    let f = fixture();
    let (mut with, mut without) = (0usize, 0usize);
    for n in 0..20 {
        let target = &f.bundle.items[f.bundle.split.test[n].target];
        let critique = target.category_prefix(4);
        let h = history(n);
        let plain: RecommendResponse = serde_json::from_value(
            call(&app, post_json("/v1/recommend", &json!({ "history": h }))).await.1,
        )
        .unwrap();
        let steered: RecommendResponse = serde_json::from_value(
            call(
                &app,
                post_json("/v1/recommend", &json!({ "history": h, "critique": critique })),
            )
            .await
            .1,
        )
        .unwrap();
        let levels: Vec<String> = target.categories.iter().take(4).cloned().collect();
        without += plain
            .items
            .iter()
            .map(|i| flare_core::eval::category_relevance(&i.categories, &levels))
            .sum::<usize>();
        let s: usize = steered.items.iter().map(|i| i.overlap.unwrap()).sum();
        with += s;
        // Server-side overlap is the category prefix relevance.
        for i in &steered.items {
            assert_eq!(
                i.overlap.unwrap(),
                flare_core::eval::category_relevance(&i.categories, &levels)
            );
        }
    }
    assert!(with >= without, "steered {with} < plain {without}");
}

#[tokio::test]
async fn unknown_history_id_is_400_with_field() {
    let mut h = history(0);
    h.insert(1, "NOPE".into());
    let (status, body) = call(&app(), post_json("/v1/recommend", &json!({ "history": h }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(e.field.as_deref(), Some("history[1]"));
    assert!(e.error.contains("NOPE"));
}

#[tokio::test]
async fn invalid_requests_are_400() {
    let app = app();
    let cases = [
        (json!({ "history": [] }), Some("history")),
        (json!({ "history": history(0), "k": 0 }), Some("k")),
        (json!({ "history": history(0), "k": 101 }), Some("k")),
        (json!({ "history": history(0), "extra": 1 }), None),
        (json!({ "critique": "x" }), None),
    ];
    for (body, field) in cases {
        let (status, resp) = call(&app, post_json("/v1/recommend", &body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let e: ErrorBody = serde_json::from_value(resp).unwrap();
        assert_eq!(e.field.as_deref(), field, "{body}");
    }
    let req = Request::post("/v1/recommend")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(call(&app, req).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn item_lookup() {
    let app = app();
    let id = &fixture().bundle.items[3].item_id;
    let (status, body) = call(&app, get(&format!("/v1/items/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["item_id"], json!(id));
    assert_eq!(body["categories"].as_array().unwrap().len(), 4);
    let (status, body) = call(&app, get("/v1/items/missing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("missing"));
}

#[tokio::test]
async fn title_search_is_case_insensitive_and_paginated() {
    let mut bundle = fixture().bundle.clone();
    bundle.items[4].title = "Heavy Duty STAPLER".into();
    bundle.items[9].title = "mini stapler, blue".into();
    bundle.items[11].title = "Staple remover".into();
    let app = router(
        Arc::new(AppState::with_snapshot(snapshot_with(&bundle, "s"))),
        cors(None).unwrap(),
    );
    let (status, body) = call(&app, get("/v1/items?q=stapler")).await;
    assert_eq!(status, StatusCode::OK);
    let r: SearchResponse = serde_json::from_value(body).unwrap();
    let ids: Vec<&str> = r.items.iter().map(|i| i.item_id.as_str()).collect();
    assert_eq!(ids, [&bundle.items[4].item_id, &bundle.items[9].item_id]);
    assert_eq!(r.total, 2);

    let r: SearchResponse =
        serde_json::from_value(call(&app, get("/v1/items?q=PRODUCT&offset=5&limit=3")).await.1)
            .unwrap();
    assert_eq!(r.total, bundle.items.len() - 3);
    assert_eq!(r.items.len(), 3);
    assert_eq!(r.items[0].title, "Product 6");

    assert_eq!(call(&app, get("/v1/items?q=a&limit=0")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, get("/v1/items?offset=x")).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn category_tree_counts_distinct_prefixes() {
    let (status, body) = call(&app(), get("/v1/categories")).await;
    assert_eq!(status, StatusCode::OK);
    let r: CategoriesResponse = serde_json::from_value(body).unwrap();
    let prefixes: BTreeSet<String> = fixture()
        .bundle
        .items
        .iter()
        .flat_map(|it| (1..=it.categories.len()).map(|n| it.categories[..n].join("\u{1f}")))
        .collect();
    assert_eq!(r.node_count, prefixes.len());
    let root_total: usize = r.roots.iter().map(|n| n.count).sum();
    assert_eq!(root_total, fixture().bundle.items.len());
}

#[tokio::test]
async fn cors_headers_present() {
    let req = Request::get("/v1/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN],
        "*"
    );
}

#[tokio::test]
async fn snapshot_hot_swap() {
    let f = fixture();
    let state = Arc::new(AppState::with_snapshot(snapshot_with(&f.bundle, "one")));
    let app = router(state.clone(), cors(None).unwrap());
    let before = call(&app, get("/v1/health")).await.1;
    state.install(snapshot_with(&f.bundle, "two"));
    let after = call(&app, get("/v1/health")).await.1;
    assert_eq!(before["fingerprint"]["checkpoint_sha256"], "one");
    assert_eq!(after["fingerprint"]["checkpoint_sha256"], "two");
}

fn schema(file: &str, def: Option<&str>) -> jsonschema::Validator {
    let path = format!("{}/../../docs/schemas/{file}", env!("CARGO_MANIFEST_DIR"));
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    if let Some(def) = def {
        let defs = doc["$defs"].clone();
        doc = json!({ "$defs": defs, "$ref": format!("#/$defs/{def}") });
    }
    jsonschema::validator_for(&doc).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, body: &Value, what: &str) {
    let errors: Vec<String> = v.iter_errors(body).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{what}: {errors:?}\n{body}");
}

#[tokio::test]
async fn responses_match_published_schemas() {
    let app = app();
    let request = json!({ "history": history(0), "critique": "Desk - A", "k": 5 });
    assert_valid(&schema("recommend_request.schema.json", None), &request, "request");
    assert!(!schema("recommend_request.schema.json", None).is_valid(&json!({ "history": [] })));

    let resp = schema("recommend_response.schema.json", None);
    let (s, with) = call(&app, post_json("/v1/recommend", &request)).await;
    assert_eq!(s, StatusCode::OK);
    assert_valid(&resp, &with, "recommend");
    let (_, without) = call(&app, post_json("/v1/recommend", &json!({ "history": history(0) }))).await;
    assert_valid(&resp, &without, "recommend without critique");

    let id = &fixture().bundle.items[0].item_id;
    let cases = [
        ("item", format!("/v1/items/{id}")),
        ("search", "/v1/items?q=a&limit=3".to_string()),
        ("categories", "/v1/categories".to_string()),
        ("health", "/v1/health".to_string()),
        ("error", "/v1/items/does-not-exist".to_string()),
    ];
    for (def, uri) in cases {
        let (_, body) = call(&app, get(&uri)).await;
        assert_valid(&schema("catalog.schema.json", Some(def)), &body, &uri);
    }
    let (s, bad) = call(&app, post_json("/v1/recommend", &json!({ "history": ["nope"] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_valid(&schema("catalog.schema.json", Some("error")), &bad, "400");
}
