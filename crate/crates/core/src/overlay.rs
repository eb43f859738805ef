// SPDX-License-Identifier: Apache-2.0

//! Semantic overlay networking: logical instance addresses, policy-bound
//! serviceIPs, per-worker conversion tables with miss-driven resolution
//! and pushed updates, and the proxy tunnel ledger with its
//! configured/active link split and LRU demotion.
//!
//! Address layout (32 bits): 8-bit cluster prefix, 12-bit worker subnet,
//! 12-bit instance suffix. serviceIPs live under the reserved prefix
//! 0xFF and never collide with instance addresses.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::{dist_euc, VivaldiCoordinate};
use crate::model::{InstanceId, ServiceId, WorkerId};

pub const SERVICE_PREFIX: u8 = 0xFF;
pub const SUBNET_BITS: u32 = 12;
pub const INSTANCE_BITS: u32 = 12;
/// Idle time after which a configured link is garbage collected.
pub const DEFAULT_IDLE_GC_MS: u64 = 60_000;

#[derive(Debug, Error, PartialEq)]
pub enum OverlayError {
    #[error("address {0} cannot be resolved anywhere in the hierarchy")]
    Unresolvable(OverlayAddr),
    #[error("no service registered under name {0:?}")]
    UnknownName(String),
    #[error("unknown balancing policy {0:?}")]
    UnknownPolicy(String),
    #[error("subnet pool exhausted")]
    SubnetExhausted,
    #[error("instance address space exhausted for subnet")]
    InstanceSpaceExhausted,
    #[error("peer {0} unreachable")]
    PeerUnreachable(WorkerId),
    #[error("network error during resolution")]
    Network,
    #[error("source {0} is not a local instance")]
    NotLocalInstance(OverlayAddr),
}

/// A 32-bit overlay address, shown dotted-quad style.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct OverlayAddr(pub u32);

impl OverlayAddr {
    pub fn is_service_ip(&self) -> bool {
        (self.0 >> 24) as u8 == SERVICE_PREFIX
    }
}

impl fmt::Display for OverlayAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0.to_be_bytes();
        write!(f, "{}.{}.{}.{}", b[0], b[1], b[2], b[3])
    }
}

/// The address range handed to one worker at registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSubnet {
    pub cluster_prefix: u8,
    pub subnet_index: u16,
}

impl WorkerSubnet {
    pub fn instance_addr(&self, instance_index: u16) -> Result<OverlayAddr, OverlayError> {
        if instance_index as u32 >= (1 << INSTANCE_BITS) {
            return Err(OverlayError::InstanceSpaceExhausted);
        }
        Ok(OverlayAddr(
            ((self.cluster_prefix as u32) << 24)
                | ((self.subnet_index as u32) << INSTANCE_BITS)
                | instance_index as u32,
        ))
    }

    pub fn contains(&self, addr: OverlayAddr) -> bool {
        (addr.0 >> 24) as u8 == self.cluster_prefix
            && ((addr.0 >> INSTANCE_BITS) & ((1 << SUBNET_BITS) - 1)) as u16 == self.subnet_index
    }
}

/// Per-cluster subnet pool. Allocation is injective for the lifetime of
/// the orchestrator process; subnets are never recycled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubnetAllocator {
    cluster_prefix: u8,
    next: u16,
}

impl SubnetAllocator {
    pub fn new(cluster_prefix: u8) -> Self {
        assert_ne!(cluster_prefix, SERVICE_PREFIX, "0xFF is reserved for serviceIPs");
        Self {
            cluster_prefix,
            next: 0,
        }
    }

    pub fn allocate(&mut self) -> Result<WorkerSubnet, OverlayError> {
        if self.next as u32 >= (1 << SUBNET_BITS) {
            return Err(OverlayError::SubnetExhausted);
        }
        let subnet = WorkerSubnet {
            cluster_prefix: self.cluster_prefix,
            subnet_index: self.next,
        };
        self.next += 1;
        Ok(subnet)
    }
}

/// Balancing policy a serviceIP is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Instance,
    RoundRobin,
    Closest,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy, OverlayError> {
        match s {
            "instance" => Ok(Policy::Instance),
            "round_robin" => Ok(Policy::RoundRobin),
            "closest" => Ok(Policy::Closest),
            other => Err(OverlayError::UnknownPolicy(other.to_owned())),
        }
    }
}

/// A semantic address bound to a service and a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceIp {
    pub address: OverlayAddr,
    pub policy: Policy,
    pub service_id: ServiceId,
}

/// One resolvable instance of a service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceBinding {
    pub instance_id: InstanceId,
    pub instance_ip: OverlayAddr,
    pub node: WorkerId,
    pub node_endpoint: String,
    pub vivaldi: VivaldiCoordinate,
}

/// Orchestrator-side registry: serviceIP allocation, instance bindings,
/// the `<name>.<policy>` grammar, and the push subscription ledger.
#[derive(Debug, Default)]
pub struct ServiceDirectory {
    next_service_index: u32,
    /// service id -> (semantic serviceIPs, live bindings)
    services: BTreeMap<ServiceId, ServiceEntry>,
    names: BTreeMap<String, ServiceId>,
    by_address: BTreeMap<OverlayAddr, (ServiceId, Policy)>,
    /// address -> workers subscribed by having resolved it.
    subscribers: BTreeMap<OverlayAddr, BTreeSet<WorkerId>>,
    version: u64,
}

#[derive(Debug)]
struct ServiceEntry {
    round_robin_ip: OverlayAddr,
    closest_ip: OverlayAddr,
    bindings: Vec<InstanceBinding>,
    instance_ips: BTreeMap<OverlayAddr, InstanceId>,
}

impl ServiceDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a service under a resolvable name and mint its semantic
    /// serviceIPs. Idempotent per service id.
    pub fn register_service(&mut self, service_id: &ServiceId, name: &str) -> (OverlayAddr, OverlayAddr) {
        if let Some(e) = self.services.get(service_id) {
            return (e.round_robin_ip, e.closest_ip);
        }
        let idx = self.next_service_index;
        self.next_service_index += 1;
        // Two semantic addresses per service in the reserved prefix.
        let rr = OverlayAddr(((SERVICE_PREFIX as u32) << 24) | (idx << 1));
        let closest = OverlayAddr(((SERVICE_PREFIX as u32) << 24) | (idx << 1) | 1);
        self.services.insert(
            service_id.clone(),
            ServiceEntry {
                round_robin_ip: rr,
                closest_ip: closest,
                bindings: Vec::new(),
                instance_ips: BTreeMap::new(),
            },
        );
        self.names.insert(name.to_owned(), service_id.clone());
        self.by_address.insert(rr, (service_id.clone(), Policy::RoundRobin));
        self.by_address.insert(closest, (service_id.clone(), Policy::Closest));
        (rr, closest)
    }

    /// `<service_name>.<policy>` resolution.
    pub fn resolve_name(&self, name: &str) -> Result<OverlayAddr, OverlayError> {
        let (service_name, policy_name) = name
            .rsplit_once('.')
            .ok_or_else(|| OverlayError::UnknownName(name.to_owned()))?;
        let policy = Policy::parse(policy_name)?;
        let service_id = self
            .names
            .get(service_name)
            .ok_or_else(|| OverlayError::UnknownName(service_name.to_owned()))?;
        let entry = &self.services[service_id];
        match policy {
            Policy::RoundRobin => Ok(entry.round_robin_ip),
            Policy::Closest => Ok(entry.closest_ip),
            Policy::Instance => Err(OverlayError::UnknownPolicy("instance".to_owned())),
        }
    }

    /// Add a live instance; returns the updates to push to subscribers.
    pub fn bind_instance(&mut self, service_id: &ServiceId, binding: InstanceBinding) -> Vec<PushUpdate> {
        self.by_address.insert(
            binding.instance_ip,
            (service_id.clone(), Policy::Instance),
        );
        if let Some(e) = self.services.get_mut(service_id) {
            e.instance_ips.insert(binding.instance_ip, binding.instance_id);
            e.bindings.retain(|b| b.instance_id != binding.instance_id);
            e.bindings.push(binding);
        }
        self.updates_for(service_id)
    }

    /// Drop an instance (termination, failure, migration source).
    pub fn unbind_instance(&mut self, service_id: &ServiceId, instance_id: InstanceId) -> Vec<PushUpdate> {
        if let Some(e) = self.services.get_mut(service_id) {
            e.bindings.retain(|b| b.instance_id != instance_id);
            e.instance_ips.retain(|_, id| *id != instance_id);
        }
        self.updates_for(service_id)
    }

    pub fn bindings(&self, service_id: &ServiceId) -> &[InstanceBinding] {
        self.services
            .get(service_id)
            .map(|e| e.bindings.as_slice())
            .unwrap_or(&[])
    }

    /// Authoritative resolution of any overlay address; also records the
    /// asking worker as a subscriber for future pushes.
    pub fn resolve_query(
        &mut self,
        addr: OverlayAddr,
        asking_worker: &WorkerId,
    ) -> Result<Vec<InstanceBinding>, OverlayError> {
        let (service_id, policy) = self
            .by_address
            .get(&addr)
            .cloned()
            .ok_or(OverlayError::Unresolvable(addr))?;
        let entry = &self.services[&service_id];
        let bindings = match policy {
            Policy::Instance => entry
                .bindings
                .iter()
                .filter(|b| b.instance_ip == addr)
                .cloned()
                .collect::<Vec<_>>(),
            _ => entry.bindings.clone(),
        };
        if bindings.is_empty() {
            return Err(OverlayError::Unresolvable(addr));
        }
        self.subscribers
            .entry(addr)
            .or_default()
            .insert(asking_worker.clone());
        Ok(bindings)
    }

    fn updates_for(&mut self, service_id: &ServiceId) -> Vec<PushUpdate> {
        self.version += 1;
        let entry = match self.services.get(service_id) {
            Some(e) => e,
            None => return Vec::new(),
        };
        let mut addrs: Vec<OverlayAddr> = vec![entry.round_robin_ip, entry.closest_ip];
        addrs.extend(entry.instance_ips.keys().copied());
        let mut out = Vec::new();
        for addr in addrs {
            if let Some(subs) = self.subscribers.get(&addr) {
                let bindings = match self.by_address.get(&addr) {
                    Some((_, Policy::Instance)) => entry
                        .bindings
                        .iter()
                        .filter(|b| b.instance_ip == addr)
                        .cloned()
                        .collect(),
                    _ => entry.bindings.clone(),
                };
                for w in subs {
                    out.push(PushUpdate {
                        worker: w.clone(),
                        address: addr,
                        bindings: bindings.clone(),
                        version: self.version,
                    });
                }
            }
        }
        out
    }
}

/// A binding update pushed to one subscribed worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushUpdate {
    pub worker: WorkerId,
    pub address: OverlayAddr,
    pub bindings: Vec<InstanceBinding>,
    pub version: u64,
}

/// Upstream resolution path a worker's table uses on a miss.
pub trait Resolver {
    fn query(&mut self, addr: OverlayAddr, asking: &WorkerId) -> Result<Vec<InstanceBinding>, OverlayError>;
}

impl Resolver for ServiceDirectory {
    fn query(&mut self, addr: OverlayAddr, asking: &WorkerId) -> Result<Vec<InstanceBinding>, OverlayError> {
        self.resolve_query(addr, asking)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionEntry {
    pub instances: Vec<InstanceBinding>,
    pub rr_cursor: usize,
    pub resolved: bool,
}

/// Per-worker address conversion table. Entries start unresolved and are
/// populated on miss; resolving subscribes the worker to pushes.
#[derive(Debug)]
pub struct ConversionTable {
    pub worker: WorkerId,
    pub local_vivaldi: VivaldiCoordinate,
    entries: BTreeMap<OverlayAddr, ResolutionEntry>,
    pub upward_queries: u64,
}

impl ConversionTable {
    pub fn new(worker: WorkerId, local_vivaldi: VivaldiCoordinate) -> Self {
        Self {
            worker,
            local_vivaldi,
            entries: BTreeMap::new(),
            upward_queries: 0,
        }
    }

    /// Pre-populate a local instance; local entries are born resolved.
    pub fn insert_local(&mut self, binding: InstanceBinding) {
        self.entries.insert(
            binding.instance_ip,
            ResolutionEntry {
                instances: vec![binding],
                rr_cursor: 0,
                resolved: true,
            },
        );
    }

    pub fn is_resolved(&self, addr: OverlayAddr) -> bool {
        self.entries.get(&addr).map(|e| e.resolved).unwrap_or(false)
    }

    /// Resolve a destination per its policy. Misses query upstream; a
    /// transient network error forces one table-refresh retry before
    /// failing.
    pub fn resolve(
        &mut self,
        addr: OverlayAddr,
        policy_hint: Policy,
        resolver: &mut dyn Resolver,
    ) -> Result<InstanceBinding, OverlayError> {
        if !self.is_resolved(addr) {
            self.refresh(addr, resolver)?;
        }
        let entry = self.entries.get_mut(&addr).expect("populated above");
        if entry.instances.is_empty() {
            return Err(OverlayError::Unresolvable(addr));
        }
        let chosen = match policy_hint {
            Policy::Instance => entry.instances[0].clone(),
            Policy::RoundRobin => {
                let b = entry.instances[entry.rr_cursor % entry.instances.len()].clone();
                entry.rr_cursor = (entry.rr_cursor + 1) % entry.instances.len();
                b
            }
            Policy::Closest => {
                let mut best: Option<(&InstanceBinding, f64)> = None;
                for b in &entry.instances {
                    let d = dist_euc(&self.local_vivaldi, &b.vivaldi)
                        .map_err(|_| OverlayError::Network)?;
                    let better = match best {
                        None => true,
                        Some((cur, bd)) => {
                            d < bd || (d == bd && b.instance_ip < cur.instance_ip)
                        }
                    };
                    if better {
                        best = Some((b, d));
                    }
                }
                best.expect("non-empty").0.clone()
            }
        };
        Ok(chosen)
    }

    /// Force-refresh one entry from upstream, retrying once on a network
    /// error.
    pub fn refresh(&mut self, addr: OverlayAddr, resolver: &mut dyn Resolver) -> Result<(), OverlayError> {
        let worker = self.worker.clone();
        self.upward_queries += 1;
        let bindings = match resolver.query(addr, &worker) {
            Ok(b) => b,
            Err(OverlayError::Network) => {
                self.upward_queries += 1;
                resolver.query(addr, &worker)?
            }
            Err(e) => return Err(e),
        };
        let entry = self.entries.entry(addr).or_insert(ResolutionEntry {
            instances: Vec::new(),
            rr_cursor: 0,
            resolved: false,
        });
        entry.instances = bindings;
        entry.resolved = true;
        if !entry.instances.is_empty() {
            entry.rr_cursor %= entry.instances.len();
        } else {
            entry.rr_cursor = 0;
        }
        Ok(())
    }

    /// Apply a pushed binding update. Updates for addresses this worker
    /// never resolved are ignored (push is subscription-scoped).
    pub fn apply_push(&mut self, update: &PushUpdate) {
        if let Some(entry) = self.entries.get_mut(&update.address) {
            if !entry.resolved {
                return;
            }
            entry.instances = update.bindings.clone();
            if entry.instances.is_empty() {
                entry.rr_cursor = 0;
            } else {
                entry.rr_cursor %= entry.instances.len();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkState {
    Configured,
    Active,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub state: LinkState,
    pub last_used: u64,
}

/// The proxy tunnel ledger of one worker. At most `k` links are active;
/// activating past the cap demotes the least recently used active link.
#[derive(Debug)]
pub struct TunnelSet {
    pub links: BTreeMap<WorkerId, Link>,
    pub k: usize,
    pub idle_gc_ms: u64,
}

impl TunnelSet {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1);
        Self {
            links: BTreeMap::new(),
            k,
            idle_gc_ms: DEFAULT_IDLE_GC_MS,
        }
    }

    pub fn active_count(&self) -> usize {
        self.links
            .values()
            .filter(|l| l.state == LinkState::Active)
            .count()
    }

    /// Open (or re-activate) a link to a peer. LRU demotion keeps the
    /// active set within `k`.
    pub fn open_link(&mut self, peer: &WorkerId, now: u64) {
        let needs_slot = match self.links.get(peer) {
            Some(l) if l.state == LinkState::Active => false,
            _ => true,
        };
        if needs_slot && self.active_count() >= self.k {
            // Demote the oldest active link; ties broken by lowest peer id
            // thanks to map ordering.
            let victim = self
                .links
                .iter()
                .filter(|(_, l)| l.state == LinkState::Active)
                .min_by_key(|(id, l)| (l.last_used, (*id).clone()))
                .map(|(id, _)| id.clone())
                .expect("active set non-empty");
            self.links.get_mut(&victim).unwrap().state = LinkState::Configured;
        }
        let link = self.links.entry(peer.clone()).or_insert(Link {
            state: LinkState::Active,
            last_used: now,
        });
        link.state = LinkState::Active;
        link.last_used = now;
    }

    pub fn touch(&mut self, peer: &WorkerId, now: u64) {
        if let Some(l) = self.links.get_mut(peer) {
            l.last_used = now;
        }
    }

    /// Drop configured links idle past the GC deadline.
    pub fn gc(&mut self, now: u64) {
        let idle = self.idle_gc_ms;
        self.links
            .retain(|_, l| l.state == LinkState::Active || now.saturating_sub(l.last_used) < idle);
    }

    pub fn state_of(&self, peer: &WorkerId) -> Option<LinkState> {
        self.links.get(peer).map(|l| l.state)
    }
}

/// Encapsulation header carried on every tunnel datagram. Bit-exact:
/// src (u32 BE), dst (u32 BE), seq (u64 BE) — 16 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatagramHeader {
    pub src_instance_ip: OverlayAddr,
    pub dst_instance_ip: OverlayAddr,
    pub seq: u64,
}

pub const HEADER_LEN: usize = 16;

impl DatagramHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&self.src_instance_ip.0.to_be_bytes());
        out[4..8].copy_from_slice(&self.dst_instance_ip.0.to_be_bytes());
        out[8..16].copy_from_slice(&self.seq.to_be_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Option<(DatagramHeader, &[u8])> {
        if buf.len() < HEADER_LEN {
            return None;
        }
        let src = u32::from_be_bytes(buf[0..4].try_into().unwrap());
        let dst = u32::from_be_bytes(buf[4..8].try_into().unwrap());
        let seq = u64::from_be_bytes(buf[8..16].try_into().unwrap());
        Some((
            DatagramHeader {
                src_instance_ip: OverlayAddr(src),
                dst_instance_ip: OverlayAddr(dst),
                seq,
            },
            &buf[HEADER_LEN..],
        ))
    }
}

/// How a worker's proxy hands datagrams to a peer worker's proxy. The
/// simulation uses an in-memory channel, live mode a UDP socket; both
/// carry the same encapsulation header.
pub trait PacketTransport {
    fn deliver(&mut self, peer: &WorkerId, datagram: &[u8]) -> Result<(), OverlayError>;
}

/// Audit record of one forwarded packet.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub chosen_instance: InstanceId,
    pub chosen_instance_ip: OverlayAddr,
    pub peer_node: WorkerId,
    pub via_tunnel: bool,
}

/// Worker-side network endpoint: conversion table + tunnel ledger + the
/// set of locally hosted instance addresses.
#[derive(Debug)]
pub struct WorkerNet {
    pub worker: WorkerId,
    pub table: ConversionTable,
    pub tunnels: TunnelSet,
    pub local_instances: BTreeSet<OverlayAddr>,
    seq: u64,
}

impl WorkerNet {
    pub fn new(worker: WorkerId, local_vivaldi: VivaldiCoordinate, k: usize) -> Self {
        Self {
            table: ConversionTable::new(worker.clone(), local_vivaldi),
            tunnels: TunnelSet::new(k),
            local_instances: BTreeSet::new(),
            worker,
            seq: 0,
        }
    }

    pub fn host_instance(&mut self, binding: InstanceBinding) {
        self.local_instances.insert(binding.instance_ip);
        self.table.insert_local(binding);
    }

    pub fn drop_instance(&mut self, instance_ip: OverlayAddr) {
        self.local_instances.remove(&instance_ip);
    }

    /// Translate, tunnel, and deliver one packet. Same-worker traffic
    /// short-circuits over loopback without touching the tunnel ledger.
    pub fn forward(
        &mut self,
        src_instance_ip: OverlayAddr,
        dst_address: OverlayAddr,
        policy: Policy,
        payload: &[u8],
        resolver: &mut dyn Resolver,
        transport: &mut dyn PacketTransport,
        now: u64,
    ) -> Result<DeliveryRecord, OverlayError> {
        if !self.local_instances.contains(&src_instance_ip) {
            return Err(OverlayError::NotLocalInstance(src_instance_ip));
        }
        let chosen = self.table.resolve(dst_address, policy, resolver)?;
        if chosen.node == self.worker {
            return Ok(DeliveryRecord {
                chosen_instance: chosen.instance_id,
                chosen_instance_ip: chosen.instance_ip,
                peer_node: chosen.node,
                via_tunnel: false,
            });
        }
        self.tunnels.open_link(&chosen.node, now);
        self.seq += 1;
        let header = DatagramHeader {
            src_instance_ip,
            dst_instance_ip: chosen.instance_ip,
            seq: self.seq,
        };
        let mut datagram = header.encode().to_vec();
        datagram.extend_from_slice(payload);
        match transport.deliver(&chosen.node, &datagram) {
            Ok(()) => {}
            Err(OverlayError::PeerUnreachable(_)) => {
                // Stale binding: force a refresh and retry once.
                self.table.refresh(dst_address, resolver)?;
                let retry = self.table.resolve(dst_address, policy, resolver)?;
                if retry.node == self.worker {
                    return Ok(DeliveryRecord {
                        chosen_instance: retry.instance_id,
                        chosen_instance_ip: retry.instance_ip,
                        peer_node: retry.node,
                        via_tunnel: false,
                    });
                }
                self.tunnels.open_link(&retry.node, now);
                self.seq += 1;
                let header = DatagramHeader {
                    src_instance_ip,
                    dst_instance_ip: retry.instance_ip,
                    seq: self.seq,
                };
                let mut datagram = header.encode().to_vec();
                datagram.extend_from_slice(payload);
                transport.deliver(&retry.node, &datagram)?;
                return Ok(DeliveryRecord {
                    chosen_instance: retry.instance_id,
                    chosen_instance_ip: retry.instance_ip,
                    peer_node: retry.node,
                    via_tunnel: true,
                });
            }
            Err(e) => return Err(e),
        }
        Ok(DeliveryRecord {
            chosen_instance: chosen.instance_id,
            chosen_instance_ip: chosen.instance_ip,
            peer_node: chosen.node,
            via_tunnel: true,
        })
    }
}
