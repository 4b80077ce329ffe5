use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use taxiplace::geodata::GeoPoint;
use taxiplace::traffic::*;

fn locs() -> Vec<GeoPoint> {
    vec![
        GeoPoint { lat: 28.60, lon: 77.10 },
        GeoPoint { lat: 28.65, lon: 77.15 },
        GeoPoint { lat: 28.70, lon: 77.20 },
    ]
}

#[test]
fn mock_peaks_at_one_pm_and_is_symmetric() {
    let m = MockTraffic::new(locs(), 7, 2.5, 0.0).unwrap();
    assert!((m.multiplier(0, 1, 13.0) - 2.5).abs() < 1e-12);
    assert!((m.multiplier(0, 1, 7.0) - 1.0).abs() < 1e-12);
    for h in 0..24 {
        let t = h as f64 + 0.5;
        let a = m.travel_time(0, 2, t).unwrap();
        let b = m.travel_time(2, 0, t).unwrap();
        assert_eq!(a, b);
        assert!(a.current_min >= a.free_flow_min);
    }
}

#[test]
fn mock_noise_is_bounded_and_seeded() {
    let a = MockTraffic::new(locs(), 1, 2.5, 0.3).unwrap();
    let b = MockTraffic::new(locs(), 1, 2.5, 0.3).unwrap();
    let c = MockTraffic::new(locs(), 2, 2.5, 0.3).unwrap();
    for (u, v) in [(0, 1), (0, 2), (1, 2)] {
        let n = a.edge_noise(u, v);
        assert!((0.0..0.3).contains(&n));
        assert_eq!(n, b.edge_noise(v, u));
    }
    assert_ne!(a.edge_noise(0, 1), c.edge_noise(0, 1));
}

#[test]
fn free_flow_uses_forty_kmh() {
    assert!((free_flow_minutes(20.0) - 30.0).abs() < 1e-12);
}

#[test]
fn travel_time_pair_validation() {
    assert!(TravelTimePair::new(5.0, 4.0).is_ok());
    assert!(TravelTimePair::new(3.0, 4.0).is_err());
    assert!(TravelTimePair::new(1.0, 0.0).is_err());
    assert!((TravelTimePair::new(6.0, 4.0).unwrap().ratio() - 1.5).abs() < 1e-12);
}

#[test]
fn self_pair_and_unknown_ids_rejected() {
    let m = MockTraffic::new(locs(), 1, 2.5, 0.3).unwrap();
    assert!(m.travel_time(1, 1, 9.0).is_err());
    assert!(m.travel_time(0, 9, 9.0).is_err());
}

#[test]
fn parse_fixed_schema() {
    let body = r#"{"rows":[{"elements":[{"duration":{"value":600},"duration_in_traffic":{"value":900}}]}]}"#;
    let p = parse_matrix_response(body).unwrap();
    assert_eq!((p.current_min, p.free_flow_min), (15.0, 10.0));
    assert!(parse_matrix_response("{\"rows\":[]}").is_err());
    assert!(parse_matrix_response("not json").is_err());
}

/// Minimal HTTP/1.1 server answering every request with `body` and `status`.
/// Returns the base URL and a request counter.
fn stub_server(status: u16, body: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/matrix", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 {
                if line == "\r\n" {
                    break;
                }
                line.clear();
            }
            counter.fetch_add(1, Ordering::SeqCst);
            let reason = if status == 200 { "OK" } else { "Error" };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (url, hits)
}

fn client(url: &str, interval_ms: u64, cache: TravelTimeCache) -> HttpTraffic {
    HttpTraffic::new(
        locs(),
        url,
        Some("test-key".to_string()),
        Duration::from_millis(interval_ms),
        Duration::from_secs(5),
        cache,
    )
}

#[test]
fn http_success_fills_cache() {
    let (url, hits) = stub_server(
        200,
        r#"{"rows":[{"elements":[{"duration":{"value":300},"duration_in_traffic":{"value":420}}]}]}"#,
    );
    let c = client(&url, 0, TravelTimeCache::default());
    let p = c.travel_time(0, 1, 8.2).unwrap();
    assert_eq!((p.current_min, p.free_flow_min), (7.0, 5.0));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(c.cache_snapshot().get(1, 0, 8.9), Some(p));
    assert!(!c.is_reproducible());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    c.save_cache(&path).unwrap();
    let file = FileTraffic::open(3, &path).unwrap();
    assert_eq!(file.travel_time(0, 1, 8.0).unwrap(), p);
    assert!(file.travel_time(0, 2, 8.0).is_err());
}

#[test]
fn http_malformed_body_is_a_provider_error() {
    let (url, _) = stub_server(200, r#"{"rows":[{"elements":[{"status":"NOT_FOUND"}]}]}"#);
    let c = client(&url, 0, TravelTimeCache::default());
    let err = c.travel_time(0, 1, 9.0).unwrap_err();
    assert!(matches!(err, taxiplace::Error::Provider(_)), "{err}");
}

#[test]
fn http_failure_falls_back_to_cache() {
    let (url, hits) = stub_server(500, "{}");
    let mut cache = TravelTimeCache::default();
    let cached = TravelTimePair::new(12.0, 10.0).unwrap();
    cache.insert(0, 2, 17.0, cached);
    let c = client(&url, 0, cache);
    assert_eq!(c.travel_time(2, 0, 17.5).unwrap(), cached);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert!(c.travel_time(0, 1, 17.5).is_err());
}

#[test]
fn http_requests_are_rate_limited() {
    let (url, hits) = stub_server(
        200,
        r#"{"rows":[{"elements":[{"duration":{"value":60},"duration_in_traffic":{"value":60}}]}]}"#,
    );
    let c = Arc::new(client(&url, 80, TravelTimeCache::default()));
    let start = Instant::now();
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let c = Arc::clone(&c);
            thread::spawn(move || c.travel_time(i % 2, 2, 10.0).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(hits.load(Ordering::SeqCst), 4);
    assert!(
        start.elapsed() >= Duration::from_millis(3 * 80),
        "{:?}",
        start.elapsed()
    );
}

#[test]
fn congestion_matrix_round_trip() {
    let m = MockTraffic::new(locs(), 3, 2.5, 0.3).unwrap();
    let cm = congestion_matrix(&m, 13.0).unwrap();
    for u in 0..3 {
        assert_eq!(cm.get(u, u), 1.0);
        for v in 0..3 {
            assert_eq!(cm.get(u, v), cm.get(v, u));
            assert!(cm.get(u, v) >= 1.0);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cm.json");
    cm.save(&path).unwrap();
    assert_eq!(CongestionMatrix::load(&path).unwrap(), cm);
}

#[test]
fn provider_config_selects_mode() {
    let cfg = TrafficProviderConfig::default();
    let p = build_provider(&cfg, locs(), None).unwrap();
    assert!(p.is_reproducible());
    assert_eq!(p.node_count(), 3);
    let missing = TrafficProviderConfig {
        mode: TrafficMode::File,
        ..TrafficProviderConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(build_provider(&missing, locs(), Some(&dir.path().join("none.json"))).is_err());
}
