// SPDX-License-Identifier: Apache-2.0

//! Deterministic in-process transport: endpoints are names, delivery is
//! immediate and ordered, and "the network" is a couple of BTreeMaps.
//! Faults are injected by cutting an endpoint.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{ControlError, ControlMessage, DedupLedger, Envelope, RequestHandler};

/// Shared in-memory bus. One per simulated deployment.
#[derive(Default)]
pub struct MemoryBus {
    handlers: BTreeMap<String, Box<dyn RequestHandler>>,
    inboxes: BTreeMap<String, VecDeque<Envelope>>,
    subscriptions: BTreeMap<String, BTreeSet<String>>,
    dedup: BTreeMap<String, DedupLedger>,
    /// Endpoints currently unreachable (partition injection).
    cut: BTreeSet<String>,
}

impl MemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Install the rpc handler for an endpoint. Also creates its inbox.
    pub fn bind(&mut self, endpoint: &str, handler: Box<dyn RequestHandler>) {
        self.handlers.insert(endpoint.to_owned(), handler);
        self.inboxes.entry(endpoint.to_owned()).or_default();
    }

    /// Create an inbox-only endpoint (subscriber without rpc surface).
    pub fn attach(&mut self, endpoint: &str) {
        self.inboxes.entry(endpoint.to_owned()).or_default();
    }

    pub fn cut(&mut self, endpoint: &str) {
        self.cut.insert(endpoint.to_owned());
    }

    pub fn heal(&mut self, endpoint: &str) {
        self.cut.remove(endpoint);
    }

    fn check_reachable(&self, endpoint: &str) -> Result<(), ControlError> {
        if self.cut.contains(endpoint) {
            return Err(ControlError::PeerDown(endpoint.to_owned()));
        }
        Ok(())
    }

    /// Synchronous rpc against the endpoint's handler.
    pub fn request(
        &mut self,
        endpoint: &str,
        env: Envelope,
    ) -> Result<ControlMessage, ControlError> {
        self.check_reachable(endpoint)?;
        let handler = self
            .handlers
            .get_mut(endpoint)
            .ok_or_else(|| ControlError::NoSuchEndpoint(endpoint.to_owned()))?;
        Ok(handler.handle(env))
    }

    /// Fire-and-forget enqueue into an endpoint's inbox. Duplicate
    /// (sender, seq) pairs are dropped at the receiving side.
    pub fn send(&mut self, endpoint: &str, env: Envelope) -> Result<(), ControlError> {
        self.check_reachable(endpoint)?;
        let inbox = self
            .inboxes
            .get_mut(endpoint)
            .ok_or_else(|| ControlError::NoSuchEndpoint(endpoint.to_owned()))?;
        let fresh = self
            .dedup
            .entry(endpoint.to_owned())
            .or_default()
            .is_fresh(&env.sender, env.seq);
        if fresh {
            inbox.push_back(env);
        }
        Ok(())
    }

    pub fn subscribe(&mut self, topic: &str, endpoint: &str) {
        self.attach(endpoint);
        self.subscriptions
            .entry(topic.to_owned())
            .or_default()
            .insert(endpoint.to_owned());
    }

    /// Fan a message out to every reachable subscriber, in name order.
    pub fn publish(&mut self, topic: &str, env: &Envelope) {
        let targets: Vec<String> = self
            .subscriptions
            .get(topic)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        for t in targets {
            let _ = self.send(&t, env.clone());
        }
    }

    pub fn drain(&mut self, endpoint: &str) -> Vec<Envelope> {
        self.inboxes
            .get_mut(endpoint)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }
}
