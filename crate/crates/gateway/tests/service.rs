mod common;

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use serde_json::Value;
use tower::ServiceExt;

use same_core::detector::Detector;
use same_gateway::http::{router, PowRequest, PredictRequest};
use same_gateway::{difficulty, solve, DefensePolicy, Gateway, GatewayConfig, GatewayResponse, PolicyKind, PowChallenge, PowParams, REJECT_CODE};

fn detector() -> &'static Detector {
    static D: OnceLock<Detector> = OnceLock::new();
    D.get_or_init(common::detector)
}

fn gateway(kind: PolicyKind) -> Gateway {
    let policy = DefensePolicy {
        kind,
        pow: PowParams {
            base_bits: 2,
            max_bits: 10,
            slope: 2.0,
        },
    };
    Gateway::new(
        detector().clone(),
        GatewayConfig {
            policy,
            challenge_ttl_secs: 60,
            seed: 9,
        },
    )
    .unwrap()
}

async fn post(app: axum::Router, path: &str, body: String) -> (StatusCode, Value) {
    let req = Request::post(path).header("content-type", "application/json").body(Body::from(body)).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[test]
fn uncalibrated_detector_is_refused() {
    let mut d = detector().clone();
    d.cfg.threshold = None;
    let cfg = GatewayConfig {
        policy: DefensePolicy::new(PolicyKind::Monitor),
        challenge_ttl_secs: 1,
        seed: 0,
    };
    assert!(Gateway::new(d, cfg).is_err());
}

#[test]
fn monitor_predictions_match_the_victim_bit_for_bit() {
    let gw = gateway(PolicyKind::Monitor);
    for x in common::digits(20, "queries").samples().iter().chain(common::noise(5).samples()) {
        let GatewayResponse::Prediction { probs } = gw.handle(x, 0).unwrap() else {
            panic!("monitor must always predict");
        };
        let direct = detector().victim.predict(x).unwrap();
        assert_eq!(probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn reject_policy_blocks_noise_and_admits_most_digits() {
    let gw = gateway(PolicyKind::Reject);
    let noise = common::noise(50);
    let rejected = noise
        .samples()
        .iter()
        .filter(|x| matches!(gw.handle(x, 0).unwrap(), GatewayResponse::Rejected { ref code, .. } if code == REJECT_CODE))
        .count();
    assert!(rejected >= 48, "{rejected}/50 noise queries rejected");
    let clean = common::digits(100, "held-out");
    let admitted = clean
        .samples()
        .iter()
        .filter(|x| matches!(gw.handle(x, 0).unwrap(), GatewayResponse::Prediction { .. }))
        .count();
    assert!(admitted >= 80, "{admitted}/100 clean queries admitted");
}

#[test]
fn pow_flow_releases_the_withheld_prediction_once() {
    let gw = gateway(PolicyKind::Pow);
    let x = common::noise(1).samples()[0].clone();
    let x = &x;
    let GatewayResponse::Challenge {
        challenge_id,
        prefix,
        bits,
        expiry,
    } = gw.handle(x, 100).unwrap()
    else {
        panic!("expected a challenge");
    };
    let score = gw.score(x).unwrap().score;
    assert!(score > gw.threshold());
    assert_eq!(bits, difficulty(score, gw.threshold(), &gw.policy().pow));
    let c = PowChallenge {
        id: challenge_id.clone(),
        prefix: hex::decode(prefix).unwrap().try_into().unwrap(),
        bits,
        expiry,
        binding: Gateway::challenge_binding(x),
    };
    let (nonce, _) = solve(&c, 0);
    let Some(GatewayResponse::Prediction { probs }) = gw.redeem(&challenge_id, &nonce, 100).unwrap() else {
        panic!("solution should unlock the prediction");
    };
    assert_eq!(probs, detector().victim.predict(x).unwrap());
    assert!(gw.redeem(&challenge_id, &nonce, 100).is_err());
    assert_eq!(gw.pending_challenges(), 0);
}

#[test]
fn wrong_shape_is_malformed() {
    let gw = gateway(PolicyKind::Monitor);
    let x = same_core::data::ImageTensor::zeros(same_core::data::Shape::new(1, 8, 8));
    assert!(matches!(gw.handle(&x, 0), Err(same_gateway::GatewayError::Malformed(_))));
}

#[tokio::test]
async fn http_predict_reject_and_errors() {
    let app = router(Arc::new(gateway(PolicyKind::Reject)));
    let clean = common::digits(30, "http").samples()[3].clone();
    let clean = &clean;
    let (s, v) = post(app.clone(), "/v1/predict", serde_json::to_string(&PredictRequest::encode(clean)).unwrap()).await;
    if s == StatusCode::OK {
        assert_eq!(v["status"], "prediction");
        let probs: Vec<f32> = serde_json::from_value(v["probs"].clone()).unwrap();
        assert_eq!(probs, detector().victim.predict(clean).unwrap());
    }
    let noisy = common::noise(1).samples()[0].clone();
    let noisy = &noisy;
    let (s, v) = post(app.clone(), "/v1/predict", serde_json::to_string(&PredictRequest::encode(noisy)).unwrap()).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    assert_eq!(v["code"], REJECT_CODE);
    assert!(v["score"].as_f64().unwrap() > 0.0);

    let (s, v) = post(app.clone(), "/v1/predict", "{\"image\": \"***\", \"shape\": [1,28,28]}".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "MALFORMED_REQUEST");
    let (s, _) = post(app.clone(), "/v1/predict", "not json".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut short = PredictRequest::encode(clean);
    short.shape = [1, 27, 28];
    let (s, _) = post(app.clone(), "/v1/predict", serde_json::to_string(&short).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let body = serde_json::to_string(&PowRequest {
        challenge_id: "missing".into(),
        nonce: "00".into(),
    })
    .unwrap();
    let (s, v) = post(app.clone(), "/v1/pow", body).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "CHALLENGE_UNKNOWN");

    let resp = app.oneshot(Request::get("/v1/health").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn http_pow_round_trip() {
    let gw = Arc::new(gateway(PolicyKind::Pow));
    let app = router(gw.clone());
    let x = common::digits(4, "pow-http").samples()[0].clone();
    let x = &x;
    let (s, v) = post(app.clone(), "/v1/predict", serde_json::to_string(&PredictRequest::encode(x)).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "challenge");
    let c = PowChallenge {
        id: v["challenge_id"].as_str().unwrap().into(),
        prefix: hex::decode(v["prefix"].as_str().unwrap()).unwrap().try_into().unwrap(),
        bits: v["bits"].as_u64().unwrap() as u32,
        expiry: v["expiry"].as_u64().unwrap(),
        binding: Gateway::challenge_binding(x),
    };
    let (nonce, _) = solve(&c, 0);
    let body = serde_json::to_string(&PowRequest {
        challenge_id: c.id.clone(),
        nonce: hex::encode(&nonce),
    })
    .unwrap();
    let (s, v) = post(app.clone(), "/v1/pow", body.clone()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "prediction");
    let (s, _) = post(app, "/v1/pow", body).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_requests_are_independent() {
    let app = router(Arc::new(gateway(PolicyKind::Monitor)));
    let xs = common::digits(6, "concurrent");
    let bodies: Vec<String> = xs.samples().iter().map(|x| serde_json::to_string(&PredictRequest::encode(x)).unwrap()).collect();
    let forward = futures_join(app.clone(), bodies.clone()).await;
    let mut reversed = futures_join(app, bodies.iter().rev().cloned().collect()).await;
    reversed.reverse();
    assert_eq!(forward, reversed);
}

async fn futures_join(app: axum::Router, bodies: Vec<String>) -> Vec<Value> {
    let handles: Vec<_> = bodies
        .into_iter()
        .map(|b| {
            let app = app.clone();
            tokio::spawn(async move { post(app, "/v1/predict", b).await.1 })
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}
