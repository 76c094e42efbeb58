//! Event fan-out to stream subscribers.

use std::collections::BTreeMap;
use std::sync::Mutex;

use cssasim_core::controller::{Notice, Topic};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

/// Backlog a subscriber may fall behind by before it is disconnected.
pub const STREAM_BACKLOG: usize = 1024;

/// One event on the stream. `seq` counts per topic, from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub seq: u64,
    pub topic: Topic,
    pub body: Value,
}

#[derive(Debug)]
pub struct EventHub {
    tx: broadcast::Sender<Frame>,
    seqs: Mutex<BTreeMap<Topic, u64>>,
}

impl Default for EventHub {
    fn default() -> Self {
        Self::with_backlog(STREAM_BACKLOG)
    }
}

impl EventHub {
    pub fn with_backlog(backlog: usize) -> Self {
        let (tx, _) = broadcast::channel(backlog);
        EventHub { tx, seqs: Mutex::new(BTreeMap::new()) }
    }

    /// Assigns the next sequence number for `topic` and fans the frame out.
    /// With no subscribers the frame is dropped, but its number is still used.
    pub fn publish(&self, topic: Topic, body: Value) -> u64 {
        let mut seqs = self.seqs.lock().expect("hub lock");
        let seq = seqs.entry(topic).or_insert(0);
        *seq += 1;
        let frame = Frame { seq: *seq, topic, body };
        // sending under the lock keeps every receiver's view in seq order
        let _ = self.tx.send(frame);
        *seq
    }

    pub fn publish_notices(&self, notices: impl IntoIterator<Item = Notice>) {
        for n in notices {
            self.publish(n.topic, n.body);
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Frame> {
        self.tx.subscribe()
    }

    pub fn last_seq(&self, topic: Topic) -> u64 {
        self.seqs.lock().expect("hub lock").get(&topic).copied().unwrap_or(0)
    }

    pub fn subscribers(&self) -> usize {
        self.tx.receiver_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn per_topic_sequence() {
        let hub = EventHub::default();
        let mut rx = hub.subscribe();
        assert_eq!(hub.publish(Topic::Alerts, json!(1)), 1);
        assert_eq!(hub.publish(Topic::Flows, json!(2)), 1);
        assert_eq!(hub.publish(Topic::Alerts, json!(3)), 2);
        let got: Vec<(Topic, u64)> = (0..3).map(|_| rx.try_recv().unwrap()).map(|f| (f.topic, f.seq)).collect();
        assert_eq!(got, [(Topic::Alerts, 1), (Topic::Flows, 1), (Topic::Alerts, 2)]);
        assert_eq!(hub.last_seq(Topic::Audit), 0);
    }

    #[test]
    fn lagging_receiver_is_detected() {
        let hub = EventHub::with_backlog(4);
        let mut rx = hub.subscribe();
        for i in 0..10 {
            hub.publish(Topic::Flows, json!(i));
        }
        assert!(matches!(rx.try_recv(), Err(broadcast::error::TryRecvError::Lagged(6))));
    }
}
