mod common;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use archplate_service::protocol::{decode_binary_frame, Decimation, StreamMessage, BINARY_SUBPROTOCOL};
use archplate_service::server::{router, AppState};
use axum::http::Method;
use axum::Router;
use common::*;
use futures::StreamExt;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn serve() -> (Router, SocketAddr) {
    let state = Arc::new(AppState::new(None));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await });
    (router(state), addr)
}

async fn subscribe(addr: SocketAddr, id: &str, query: &str) -> (Client, StreamMessage) {
    let (mut ws, _) = connect_async(format!("ws://{addr}/sessions/{id}/stream{query}")).await.unwrap();
    let first = next_message(&mut ws).await;
    (ws, first)
}

async fn next_message(ws: &mut Client) -> StreamMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.expect("stream stalled").unwrap().unwrap();
        match msg {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

fn frame_step(msg: &StreamMessage) -> usize {
    match msg {
        StreamMessage::Frame(f) => f.step,
        other => panic!("expected a frame, got {other:?}"),
    }
}

#[tokio::test]
async fn subscriber_sees_each_new_frame_once_in_order() {
    let (app, addr) = serve().await;
    let id = create(&app, block([4, 4, 1], neo_hookean())).await;
    let (mut ws, hello) = subscribe(addr, &id, "").await;
    assert!(matches!(hello, StreamMessage::Subscribed { from_step: 1, index_map: None, .. }), "{hello:?}");
    for k in 0..3 {
        step(&app, &id, [1.0, 0.0, k as f64, 0.0]).await;
    }
    let mut steps = Vec::new();
    for _ in 0..3 {
        let msg = next_message(&mut ws).await;
        if let StreamMessage::Frame(f) = &msg {
            assert_eq!(f.decimation, Decimation::Full);
            assert_eq!(f.positions().unwrap().len(), 3 * 50);
            assert_eq!(f.von_mises().unwrap().len(), 50);
        }
        steps.push(frame_step(&msg));
    }
    assert_eq!(steps, vec![1, 2, 3]);
    call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert!(matches!(next_message(&mut ws).await, StreamMessage::Closed { .. }));
}

#[tokio::test]
async fn coarse_stream_sends_fixed_subset() {
    let (app, addr) = serve().await;
    let id = create(&app, block([24, 24, 8], neo_hookean())).await;
    let (mut ws, hello) = subscribe(addr, &id, "?decimation=coarse(512)").await;
    let StreamMessage::Subscribed { index_map: Some(map), total_nodes, .. } = hello else { panic!("{hello:?}") };
    assert_eq!(total_nodes, 25 * 25 * 9);
    assert!(total_nodes >= 5000);
    assert_eq!(map.len(), 512);
    let (_, again) = subscribe(addr, &id, "?decimation=coarse(512)").await;
    assert!(matches!(again, StreamMessage::Subscribed { index_map: Some(m), .. } if m == map));

    step(&app, &id, [1.0, 0.0, 0.0, 0.0]).await;
    let StreamMessage::Frame(f) = next_message(&mut ws).await else { panic!() };
    assert_eq!(f.node_count, 512);
    assert_eq!(f.von_mises().unwrap().len(), 512);
    assert_eq!(f.positions().unwrap().len(), 3 * 512);

    // the coarse arrays are the full frame restricted to the index map
    let (_, full) = call(&app, Method::GET, &format!("/sessions/{id}/frames/1"), None).await;
    let full: archplate_service::protocol::WireFrame = serde_json::from_value(full).unwrap();
    let (fp, fv) = (full.positions().unwrap(), full.von_mises().unwrap());
    let (cp, cv) = (f.positions().unwrap(), f.von_mises().unwrap());
    for (k, &n) in map.iter().enumerate() {
        assert_eq!(cv[k], fv[n]);
        assert_eq!(&cp[3 * k..3 * k + 3], &fp[3 * n..3 * n + 3]);
    }
}

#[tokio::test]
async fn reconnect_replays_from_requested_step() {
    let (app, addr) = serve().await;
    let id = create(&app, block([4, 4, 1], neo_hookean())).await;
    for _ in 0..3 {
        step(&app, &id, [0.0, 1.0, 0.0, 0.0]).await;
    }
    let (mut ws, hello) = subscribe(addr, &id, "?from=1").await;
    assert!(matches!(hello, StreamMessage::Subscribed { from_step: 1, .. }));
    let mut seen = Vec::new();
    for _ in 0..3 {
        seen.push(frame_step(&next_message(&mut ws).await));
    }
    step(&app, &id, [0.0, 1.0, 0.0, 0.0]).await;
    seen.push(frame_step(&next_message(&mut ws).await));
    assert_eq!(seen, vec![1, 2, 3, 4]);
    ws.close(None).await.unwrap();
}

#[tokio::test]
async fn binary_subprotocol_carries_raw_floats() {
    let (app, addr) = serve().await;
    let id = create(&app, block([4, 4, 1], neo_hookean())).await;
    let mut req = format!("ws://{addr}/sessions/{id}/stream?decimation=coarse(8)").into_client_request().unwrap();
    req.headers_mut().insert("sec-websocket-protocol", BINARY_SUBPROTOCOL.parse().unwrap());
    let (mut ws, resp) = connect_async(req).await.unwrap();
    assert_eq!(resp.headers().get("sec-websocket-protocol").unwrap(), BINARY_SUBPROTOCOL);
    assert!(matches!(next_message(&mut ws).await, StreamMessage::Subscribed { binary: true, .. }));
    step(&app, &id, [1.0, 0.0, 0.0, 0.0]).await;
    let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.unwrap().unwrap().unwrap();
    let Message::Binary(bytes) = msg else { panic!("{msg:?}") };
    let (header, positions, vm) = decode_binary_frame(&bytes).unwrap();
    assert_eq!((header.step, header.node_count, positions.len(), vm.len()), (1, 8, 24, 8));
}

#[tokio::test]
async fn bad_stream_requests() {
    let (app, addr) = serve().await;
    let id = create(&app, block([2, 2, 1], neo_hookean())).await;
    assert!(connect_async(format!("ws://{addr}/sessions/none/stream")).await.is_err());
    assert!(connect_async(format!("ws://{addr}/sessions/{id}/stream?decimation=coarse(5000)")).await.is_err());
    assert!(connect_async(format!("ws://{addr}/sessions/{id}/stream?decimation=half")).await.is_err());
}
