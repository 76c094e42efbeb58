mod common;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use common::live;
use cssasim_core::controller::Topic;
use cssasim_core::net::{HostId, SimTime};
use cssasim_core::sim::CommandQueue;
use cssasim_gateway::{serve, EventHub, Frame, Gateway, CLOSE_SLOW_CONSUMER};
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use serde_json::json;
use tokio::net::TcpStream;
use tokio::time::{sleep, timeout};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn any_addr() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

async fn connect(addr: SocketAddr, topics: &str) -> Ws {
    let (ws, _) = connect_async(format!("ws://{addr}/api/stream?topics={topics}")).await.unwrap();
    ws
}

async fn next_frame(ws: &mut Ws) -> Option<Frame> {
    loop {
        match timeout(Duration::from_secs(5), ws.next()).await.ok()?? {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(&t).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

async fn wait_for_subscribers(gw: &Gateway, n: usize) {
    for _ in 0..500 {
        if gw.hub().subscribers() >= n {
            return;
        }
        sleep(Duration::from_millis(5)).await;
    }
    panic!("subscribers never connected");
}

#[tokio::test]
async fn alert_reaches_each_subscriber_once() {
    let (mut sim, gw) = live();
    let server = serve(gw.clone(), any_addr()).await.unwrap();
    let mut a = connect(server.local_addr(), "alerts").await;
    let mut b = connect(server.local_addr(), "alerts,topology").await;
    let mut audit_only = connect(server.local_addr(), "audit").await;
    wait_for_subscribers(&gw, 3).await;

    sim.inject_packet(&HostId::new("ATK1"), common::spoofed(&sim, "ATK1")).unwrap();
    sim.run_until(SimTime::from_millis(50));
    gw.sync(&mut sim);
    let alert_id = sim.controller_state().alerts[0].alert_id;

    for ws in [&mut a, &mut b] {
        let f = next_frame(ws).await.unwrap();
        assert_eq!(f.topic, Topic::Alerts);
        assert_eq!(f.seq, 1);
        assert_eq!(f.body["event"], "new");
        assert_eq!(f.body["alert"]["alert_id"], alert_id);
    }
    let f = next_frame(&mut audit_only).await.unwrap();
    assert_eq!(f.topic, Topic::Audit);

    // no second frame for the same alert
    gw.hub().publish(Topic::Flows, json!("marker"));
    gw.hub().publish(Topic::Alerts, json!("end"));
    assert_eq!(next_frame(&mut a).await.unwrap().body, json!("end"));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn rejects_unknown_topics() {
    let gw = Gateway::new(CommandQueue::new(), vec![]);
    let server = serve(gw, any_addr()).await.unwrap();
    let url = format!("ws://{}/api/stream?topics=alerts,gossip", server.local_addr());
    assert!(connect_async(url).await.is_err());
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn late_subscriber_is_gapless_from_its_start() {
    let gw = Gateway::new(CommandQueue::new(), vec![]);
    let server = serve(gw.clone(), any_addr()).await.unwrap();
    for i in 0..10 {
        gw.hub().publish(Topic::Flows, json!(i));
    }
    let mut ws = connect(server.local_addr(), "flows").await;
    wait_for_subscribers(&gw, 1).await;
    for i in 10..20 {
        gw.hub().publish(Topic::Flows, json!(i));
    }
    let seqs: Vec<u64> = {
        let mut v = Vec::new();
        for _ in 0..10 {
            v.push(next_frame(&mut ws).await.unwrap().seq);
        }
        v
    };
    assert_eq!(seqs, (11..=20).collect::<Vec<_>>());
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn randomized_consumers_see_gapless_streams() {
    let gw = Gateway::new(CommandQueue::new(), vec![]);
    let server = serve(gw.clone(), any_addr()).await.unwrap();
    let addr = server.local_addr();
    let mut clients = Vec::new();
    for c in 0..4u64 {
        let topics = if c % 2 == 0 { "alerts,flows,audit" } else { "flows" };
        let ws = connect(addr, topics).await;
        clients.push(tokio::spawn(async move {
            let mut ws = ws;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c);
            let mut last: BTreeMap<Topic, u64> = BTreeMap::new();
            let mut got = 0usize;
            while let Some(f) = next_frame(&mut ws).await {
                let prev = last.insert(f.topic, f.seq).unwrap_or(0);
                assert_eq!(f.seq, prev + 1, "gap on {:?}", f.topic);
                got += 1;
                if rng.random_bool(0.1) {
                    sleep(Duration::from_micros(rng.random_range(0..500))).await;
                }
                if f.body == json!("done") {
                    break;
                }
            }
            got
        }));
    }
    wait_for_subscribers(&gw, 4).await;
    let topics = [Topic::Alerts, Topic::Flows, Topic::Audit];
    let mut per_topic: BTreeMap<Topic, usize> = BTreeMap::new();
    for i in 0..1000usize {
        let t = topics[i % 3];
        gw.hub().publish(t, json!(i));
        *per_topic.entry(t).or_default() += 1;
    }
    gw.hub().publish(Topic::Flows, json!("done"));
    let counts: Vec<usize> = futures::future::join_all(clients).await.into_iter().map(|r| r.unwrap()).collect();
    assert_eq!(counts[0], 1001);
    assert_eq!(counts[1], per_topic[&Topic::Flows] + 1);
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn slow_consumer_is_disconnected() {
    let gw = Gateway::with_hub(CommandQueue::new(), vec![], EventHub::with_backlog(16));
    let server = serve(gw.clone(), any_addr()).await.unwrap();
    let mut ws = connect(server.local_addr(), "flows").await;
    wait_for_subscribers(&gw, 1).await;
    // the session task cannot keep up with a burst published from this thread
    for i in 0..10_000 {
        gw.hub().publish(Topic::Flows, json!({ "i": i, "pad": "x".repeat(64) }));
    }
    let mut close_code = None;
    let mut frames = 0;
    while let Ok(Some(msg)) = timeout(Duration::from_secs(5), ws.next()).await {
        match msg {
            Ok(Message::Text(_)) => frames += 1,
            Ok(Message::Close(Some(cf))) => {
                close_code = Some(u16::from(cf.code));
                break;
            }
            _ => break,
        }
    }
    assert!(frames < 10_000);
    assert_eq!(close_code, Some(CLOSE_SLOW_CONSUMER));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn bind_failure_reported() {
    let gw = Gateway::new(CommandQueue::new(), vec![]);
    let first = serve(gw.clone(), any_addr()).await.unwrap();
    assert!(serve(gw, first.local_addr()).await.is_err());
    first.shutdown().await.unwrap();
}
