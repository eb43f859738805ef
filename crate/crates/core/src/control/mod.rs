// SPDX-License-Identifier: Apache-2.0

//! Control-plane message vocabulary and transports. The same handler
//! logic runs behind an in-memory bus (deterministic, used by the
//! simulation) or TCP sockets (live daemons); which one is picked comes
//! from `OAK_TRANSPORT`.

pub mod memory;
pub mod socket;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::VivaldiCoordinate;
use crate::model::{ClusterId, InstanceId, ServiceDescriptor, ServiceId};
use crate::overlay::{OverlayAddr, PushUpdate};
use crate::resource::{AggregatePush, RegistrationRecord, TelemetryMsg};
use crate::system::{DeployReport, SystemStatus};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("peer {0} is down or unreachable")]
    PeerDown(String),
    #[error("no handler registered for endpoint {0}")]
    NoSuchEndpoint(String),
    #[error("message could not be encoded or decoded: {0}")]
    Codec(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("remote error: {0}")]
    Remote(String),
}

/// Everything that crosses a tier boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    /// Worker -> cluster orchestrator, once at startup.
    RegisterWorker {
        cluster: ClusterId,
        record: RegistrationRecord,
        vivaldi: VivaldiCoordinate,
    },
    /// Cluster -> worker: registration outcome with the assigned subnet
    /// prefix bits packed as the subnet's first instance address.
    RegisterAck { subnet_base: OverlayAddr },
    /// Worker -> cluster, periodic.
    Telemetry {
        cluster: ClusterId,
        msg: TelemetryMsg,
    },
    /// Cluster -> parent, periodic.
    Aggregate(AggregatePush),
    /// Client -> root.
    Deploy { descriptor: ServiceDescriptor },
    DeployAck(DeployReport),
    /// Client -> root.
    Status,
    StatusReply(SystemStatus),
    /// Worker -> cluster on a conversion-table miss.
    OverlayQuery {
        service_ip: OverlayAddr,
        asking_instance: InstanceId,
    },
    /// Cluster -> worker, resolution result or subscription update.
    OverlayPush(PushUpdate),
    /// Client -> root: undeploy a service.
    Undeploy { service_id: ServiceId },
    /// Any error outcome travelling back over an rpc.
    Error { detail: String },
}

/// Transport-level wrapper; `seq` is per-sender monotonic so receivers
/// can drop duplicates after redelivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: String,
    pub seq: u64,
    pub message: ControlMessage,
}

/// Server side of an rpc endpoint; both transports drive the same
/// handler, which is what makes the sim and live mode behave alike.
pub trait RequestHandler: Send {
    fn handle(&mut self, env: Envelope) -> ControlMessage;
}

impl<F> RequestHandler for F
where
    F: FnMut(Envelope) -> ControlMessage + Send,
{
    fn handle(&mut self, env: Envelope) -> ControlMessage {
        self(env)
    }
}

/// Per-sender duplicate suppression: a message is fresh only when its
/// seq is strictly newer than the last one seen from that sender.
#[derive(Debug, Default)]
pub struct DedupLedger {
    last_seen: BTreeMap<String, u64>,
}

impl DedupLedger {
    pub fn is_fresh(&mut self, sender: &str, seq: u64) -> bool {
        match self.last_seen.get(sender) {
            Some(prev) if seq <= *prev => false,
            _ => {
                self.last_seen.insert(sender.to_owned(), seq);
                true
            }
        }
    }
}
