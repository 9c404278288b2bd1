//! Dynamic, cloneable network structures.
//!
//! A [`NetworkSet`] stores nodes, links and networks. Networks may share
//! nodes; each link belongs to exactly one network, and both of its
//! endpoints are members of that network. Every element carries a
//! [`StateBag`] of attributes, and [`NetworkSet::clone_system`] copies the
//! whole system, states and ids included.
//!
//! Ids are allocated in increasing order and never reused. Neighbor lists
//! come back sorted by id so simulations iterate in a reproducible order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::config::is_identifier;
use crate::num::fmt_real_literal;

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(NodeId, "n");
id_type!(LinkId, "l");
id_type!(NetId, "g");

#[derive(Debug, Clone, PartialEq)]
pub enum Attr {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Attr {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Attr::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Attr::Int(i) => Some(*i as f64),
            Attr::Real(x) => Some(*x),
            Attr::Text(_) => None,
        }
    }
}

impl From<i64> for Attr {
    fn from(v: i64) -> Attr {
        Attr::Int(v)
    }
}

impl From<f64> for Attr {
    fn from(v: f64) -> Attr {
        Attr::Real(v)
    }
}

impl From<&str> for Attr {
    fn from(v: &str) -> Attr {
        Attr::Text(v.to_string())
    }
}

impl fmt::Display for Attr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attr::Int(i) => write!(f, "{}", i),
            Attr::Real(x) => f.write_str(&fmt_real_literal(*x)),
            Attr::Text(s) => write!(f, "{:?}", s),
        }
    }
}

/// Named attributes of one element.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateBag(BTreeMap<String, Attr>);

impl StateBag {
    pub fn new() -> StateBag {
        StateBag::default()
    }

    /// Builder-style insert.
    ///
    /// # Panics
    /// If `key` is not an identifier.
    pub fn with(mut self, key: &str, value: impl Into<Attr>) -> StateBag {
        self.set(key, value).expect("attribute name");
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<Attr>) -> Result<(), NetError> {
        if !is_identifier(key) {
            return Err(NetError::BadAttribute(key.to_string()));
        }
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Attr> {
        self.0.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Attr> {
        self.0.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Attr)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn write_pairs(&self, out: &mut String) {
        for (k, v) in &self.0 {
            out.push_str(&format!(" {}={}", k, v));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub state: StateBag,
    pub membership: BTreeSet<NetId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub src: NodeId,
    pub dst: NodeId,
    pub directed: bool,
    pub state: StateBag,
    pub owner: NetId,
}

impl Link {
    /// The endpoint opposite `node`, if the link can be traversed from it.
    fn traverse_from(&self, node: NodeId) -> Option<NodeId> {
        if self.src == node {
            Some(self.dst)
        } else if self.dst == node && !self.directed {
            Some(self.src)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub id: NetId,
    pub members: BTreeSet<NodeId>,
    pub links: BTreeSet<LinkId>,
    pub state: StateBag,
    /// Links of this network touching each member.
    incident: BTreeMap<NodeId, BTreeSet<LinkId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("unknown network {0}")]
    UnknownNetwork(NetId),
    #[error("node {node} is not a member of network {net}")]
    NotMember { net: NetId, node: NodeId },
    #[error("self-loop on node {0} (self-loops are disabled)")]
    SelfLoop(NodeId),
    #[error("merge needs at least two networks")]
    TooFewTargets,
    #[error("network {0} listed twice")]
    DuplicateTarget(NetId),
    #[error("invalid attribute name `{0}`")]
    BadAttribute(String),
}

/// Nodes, links and possibly overlapping networks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkSet {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, Link>,
    nets: BTreeMap<NetId, Network>,
    next_node: u64,
    next_link: u64,
    next_net: u64,
    allow_self_loops: bool,
    pub state: StateBag,
}

impl NetworkSet {
    pub fn new() -> NetworkSet {
        NetworkSet::default()
    }

    pub fn allowing_self_loops(allow: bool) -> NetworkSet {
        NetworkSet {
            allow_self_loops: allow,
            ..NetworkSet::default()
        }
    }

    /// Deep copy with identical ids and states; the copies share nothing.
    pub fn clone_system(&self) -> NetworkSet {
        self.clone()
    }

    pub fn add_network(&mut self, state: StateBag) -> NetId {
        let id = NetId(self.next_net);
        self.next_net += 1;
        self.nets.insert(
            id,
            Network {
                id,
                members: BTreeSet::new(),
                links: BTreeSet::new(),
                state,
                incident: BTreeMap::new(),
            },
        );
        id
    }

    /// Deletes a network, its links, and nodes that belonged only to it.
    pub fn remove_network(&mut self, net: NetId) -> Result<(), NetError> {
        let network = self.nets.remove(&net).ok_or(NetError::UnknownNetwork(net))?;
        for link in &network.links {
            self.links.remove(link);
        }
        for node in &network.members {
            self.drop_membership(*node, net);
        }
        Ok(())
    }

    pub fn add_node(&mut self, net: NetId, state: StateBag) -> Result<NodeId, NetError> {
        let network = self.nets.get_mut(&net).ok_or(NetError::UnknownNetwork(net))?;
        let id = NodeId(self.next_node);
        self.next_node += 1;
        network.members.insert(id);
        self.nodes.insert(
            id,
            Node {
                id,
                state,
                membership: BTreeSet::from([net]),
            },
        );
        Ok(id)
    }

    /// Adds an existing node to another network. Enrolling a member again
    /// is a no-op.
    pub fn enroll_node(&mut self, net: NetId, node: NodeId) -> Result<(), NetError> {
        let n = self.nodes.get_mut(&node).ok_or(NetError::UnknownNode(node))?;
        let network = self.nets.get_mut(&net).ok_or(NetError::UnknownNetwork(net))?;
        network.members.insert(node);
        n.membership.insert(net);
        Ok(())
    }

    /// Removes `node` and its links from `net`; the node is deleted once it
    /// belongs to no network.
    pub fn remove_node(&mut self, net: NetId, node: NodeId) -> Result<(), NetError> {
        let network = self.nets.get_mut(&net).ok_or(NetError::UnknownNetwork(net))?;
        if !network.members.remove(&node) {
            return Err(if self.nodes.contains_key(&node) {
                NetError::NotMember { net, node }
            } else {
                NetError::UnknownNode(node)
            });
        }
        let incident = network.incident.remove(&node).unwrap_or_default();
        for link_id in incident {
            let link = self.links.remove(&link_id).expect("incident link exists");
            network.links.remove(&link_id);
            let other = if link.src == node { link.dst } else { link.src };
            if let Some(set) = network.incident.get_mut(&other) {
                set.remove(&link_id);
                if set.is_empty() {
                    network.incident.remove(&other);
                }
            }
        }
        self.drop_membership(node, net);
        Ok(())
    }

    fn drop_membership(&mut self, node: NodeId, net: NetId) {
        if let Some(n) = self.nodes.get_mut(&node) {
            n.membership.remove(&net);
            if n.membership.is_empty() {
                self.nodes.remove(&node);
            }
        }
    }

    pub fn add_link(
        &mut self,
        net: NetId,
        src: NodeId,
        dst: NodeId,
        directed: bool,
        state: StateBag,
    ) -> Result<LinkId, NetError> {
        let network = self.nets.get_mut(&net).ok_or(NetError::UnknownNetwork(net))?;
        for end in [src, dst] {
            if !network.members.contains(&end) {
                return Err(if self.nodes.contains_key(&end) {
                    NetError::NotMember { net, node: end }
                } else {
                    NetError::UnknownNode(end)
                });
            }
        }
        if src == dst && !self.allow_self_loops {
            return Err(NetError::SelfLoop(src));
        }
        let id = LinkId(self.next_link);
        self.next_link += 1;
        network.links.insert(id);
        network.incident.entry(src).or_default().insert(id);
        network.incident.entry(dst).or_default().insert(id);
        self.links.insert(
            id,
            Link {
                id,
                src,
                dst,
                directed,
                state,
                owner: net,
            },
        );
        Ok(id)
    }

    pub fn remove_link(&mut self, link: LinkId) -> Result<(), NetError> {
        let l = self.links.remove(&link).ok_or(NetError::UnknownLink(link))?;
        let network = self.nets.get_mut(&l.owner).expect("owner exists");
        network.links.remove(&link);
        for end in [l.src, l.dst] {
            if let Some(set) = network.incident.get_mut(&end) {
                set.remove(&link);
                if set.is_empty() {
                    network.incident.remove(&end);
                }
            }
        }
        Ok(())
    }

    /// New network over the union of the targets' members, with copies of
    /// all their links (fresh ids, same states). Parallel links can result.
    pub fn merge(&mut self, targets: &[NetId]) -> Result<NetId, NetError> {
        if targets.len() < 2 {
            return Err(NetError::TooFewTargets);
        }
        for (i, t) in targets.iter().enumerate() {
            if !self.nets.contains_key(t) {
                return Err(NetError::UnknownNetwork(*t));
            }
            if targets[..i].contains(t) {
                return Err(NetError::DuplicateTarget(*t));
            }
        }
        let merged = self.add_network(StateBag::new());
        for t in targets {
            let members: Vec<NodeId> = self.nets[t].members.iter().copied().collect();
            for node in members {
                self.enroll_node(merged, node)?;
            }
        }
        for t in targets {
            let links: Vec<Link> = self.nets[t]
                .links
                .iter()
                .map(|l| self.links[l].clone())
                .collect();
            for l in links {
                self.add_link_unchecked(merged, l.src, l.dst, l.directed, l.state);
            }
        }
        Ok(merged)
    }

    fn add_link_unchecked(&mut self, net: NetId, src: NodeId, dst: NodeId, directed: bool, state: StateBag) {
        let allow = self.allow_self_loops;
        self.allow_self_loops = true;
        self.add_link(net, src, dst, directed, state)
            .expect("endpoints enrolled");
        self.allow_self_loops = allow;
    }

    fn network(&self, net: NetId) -> Result<&Network, NetError> {
        self.nets.get(&net).ok_or(NetError::UnknownNetwork(net))
    }

    fn member_check(&self, net: NetId, node: NodeId) -> Result<&Network, NetError> {
        let network = self.network(net)?;
        if !self.nodes.contains_key(&node) {
            return Err(NetError::UnknownNode(node));
        }
        if !network.members.contains(&node) {
            return Err(NetError::NotMember { net, node });
        }
        Ok(network)
    }

    /// Nodes reachable from `node` over one link of `net` (undirected
    /// links both ways, directed links forward), ascending.
    pub fn neighbors(&self, net: NetId, node: NodeId) -> Result<Vec<NodeId>, NetError> {
        let network = self.member_check(net, node)?;
        let set: BTreeSet<NodeId> = network
            .incident
            .get(&node)
            .into_iter()
            .flatten()
            .filter_map(|l| self.links[l].traverse_from(node))
            .collect();
        Ok(set.into_iter().collect())
    }

    /// Same as [`NetworkSet::neighbors`].
    pub fn out_neighbors(&self, net: NetId, node: NodeId) -> Result<Vec<NodeId>, NetError> {
        self.neighbors(net, node)
    }

    /// Nodes that reach `node` over one link of `net`, ascending.
    pub fn in_neighbors(&self, net: NetId, node: NodeId) -> Result<Vec<NodeId>, NetError> {
        let network = self.member_check(net, node)?;
        let set: BTreeSet<NodeId> = network
            .incident
            .get(&node)
            .into_iter()
            .flatten()
            .filter_map(|l| {
                let link = &self.links[l];
                if link.dst == node {
                    Some(link.src)
                } else if !link.directed {
                    Some(link.dst)
                } else {
                    None
                }
            })
            .collect();
        Ok(set.into_iter().collect())
    }

    /// Undirected link ends at `node` (a self-loop counts twice) plus
    /// directed links leaving it.
    pub fn degree(&self, net: NetId, node: NodeId) -> Result<usize, NetError> {
        let network = self.member_check(net, node)?;
        Ok(network
            .incident
            .get(&node)
            .into_iter()
            .flatten()
            .map(|l| {
                let link = &self.links[l];
                match (link.directed, link.src == node, link.dst == node) {
                    (false, true, true) => 2,
                    (false, _, _) => 1,
                    (true, true, _) => 1,
                    (true, false, _) => 0,
                }
            })
            .sum())
    }

    pub fn node(&self, node: NodeId) -> Result<&Node, NetError> {
        self.nodes.get(&node).ok_or(NetError::UnknownNode(node))
    }

    pub fn link(&self, link: LinkId) -> Result<&Link, NetError> {
        self.links.get(&link).ok_or(NetError::UnknownLink(link))
    }

    pub fn net(&self, net: NetId) -> Result<&Network, NetError> {
        self.network(net)
    }

    pub fn membership(&self, node: NodeId) -> Result<&BTreeSet<NetId>, NetError> {
        Ok(&self.node(node)?.membership)
    }

    pub fn node_state(&self, node: NodeId) -> Result<&StateBag, NetError> {
        Ok(&self.node(node)?.state)
    }

    pub fn node_state_mut(&mut self, node: NodeId) -> Result<&mut StateBag, NetError> {
        Ok(&mut self.nodes.get_mut(&node).ok_or(NetError::UnknownNode(node))?.state)
    }

    pub fn set_node_attr(&mut self, node: NodeId, key: &str, value: impl Into<Attr>) -> Result<(), NetError> {
        self.node_state_mut(node)?.set(key, value)
    }

    pub fn link_state_mut(&mut self, link: LinkId) -> Result<&mut StateBag, NetError> {
        Ok(&mut self.links.get_mut(&link).ok_or(NetError::UnknownLink(link))?.state)
    }

    pub fn net_state_mut(&mut self, net: NetId) -> Result<&mut StateBag, NetError> {
        Ok(&mut self.nets.get_mut(&net).ok_or(NetError::UnknownNetwork(net))?.state)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.links.keys().copied()
    }

    pub fn net_ids(&self) -> impl Iterator<Item = NetId> + '_ {
        self.nets.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Canonical text: `node`, `link`, `net` lines in ascending id order.
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::new();
        if !self.state.is_empty() {
            out.push_str("set");
            self.state.write_pairs(&mut out);
            out.push('\n');
        }
        for n in self.nodes.values() {
            out.push_str(&format!("node {}", n.id));
            n.state.write_pairs(&mut out);
            out.push('\n');
        }
        for l in self.links.values() {
            out.push_str(&format!(
                "link {} {} {} {} {}",
                l.id,
                l.src,
                l.dst,
                if l.directed { "d" } else { "u" },
                l.owner
            ));
            l.state.write_pairs(&mut out);
            out.push('\n');
        }
        for net in self.nets.values() {
            let members: Vec<String> = net.members.iter().map(|m| m.to_string()).collect();
            out.push_str(&format!("net {} members={}", net.id, members.join(",")));
            net.state.write_pairs(&mut out);
            out.push('\n');
        }
        out
    }

    /// Verifies every structural invariant; returns the first violation.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (id, node) in &self.nodes {
            if node.membership.is_empty() {
                return Err(format!("node {} belongs to no network", id));
            }
            for net in &node.membership {
                match self.nets.get(net) {
                    Some(n) if n.members.contains(id) => {}
                    _ => return Err(format!("node {} lists network {} wrongly", id, net)),
                }
            }
        }
        for (id, net) in &self.nets {
            for m in &net.members {
                match self.nodes.get(m) {
                    Some(n) if n.membership.contains(id) => {}
                    _ => return Err(format!("network {} lists member {} wrongly", id, m)),
                }
            }
            let mut expected: BTreeMap<NodeId, BTreeSet<LinkId>> = BTreeMap::new();
            for l in &net.links {
                let link = self
                    .links
                    .get(l)
                    .ok_or_else(|| format!("network {} lists missing link {}", id, l))?;
                if link.owner != *id {
                    return Err(format!("link {} owner mismatch", l));
                }
                if !net.members.contains(&link.src) || !net.members.contains(&link.dst) {
                    return Err(format!("link {} has a non-member endpoint", l));
                }
                expected.entry(link.src).or_default().insert(*l);
                expected.entry(link.dst).or_default().insert(*l);
            }
            if expected != net.incident {
                return Err(format!("network {} incidence index is stale", id));
            }
        }
        for (id, link) in &self.links {
            match self.nets.get(&link.owner) {
                Some(n) if n.links.contains(id) => {}
                _ => return Err(format!("link {} not listed by its owner", id)),
            }
        }
        if self.nodes.keys().next_back().is_some_and(|m| m.0 >= self.next_node)
            || self.links.keys().next_back().is_some_and(|m| m.0 >= self.next_link)
            || self.nets.keys().next_back().is_some_and(|m| m.0 >= self.next_net)
        {
            return Err("id allocator behind existing ids".into());
        }
        Ok(())
    }
}
