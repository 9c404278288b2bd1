//! A naive map-of-sets model of a network set, driven in lockstep with the
//! real structure by random operations.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_pcg::Pcg64;
use sweepforge::netstruct::{LinkId, NetId, NetworkSet, NodeId, StateBag};

#[derive(Default, Clone)]
pub struct ShadowNet {
    members: BTreeSet<u64>,
    links: BTreeMap<u64, (u64, u64, bool)>,
}

#[derive(Default, Clone)]
pub struct Shadow {
    nets: BTreeMap<u64, ShadowNet>,
    next_node: u64,
    next_link: u64,
    next_net: u64,
}

impl Shadow {
    fn alive(&self) -> BTreeSet<u64> {
        self.nets.values().flat_map(|n| n.members.iter().copied()).collect()
    }

    fn add_net(&mut self) -> u64 {
        let id = self.next_net;
        self.next_net += 1;
        self.nets.insert(id, ShadowNet::default());
        id
    }

    fn add_node(&mut self, net: u64) -> Option<u64> {
        let n = self.nets.get_mut(&net)?;
        let id = self.next_node;
        self.next_node += 1;
        n.members.insert(id);
        Some(id)
    }

    fn enroll(&mut self, net: u64, node: u64) -> bool {
        if !self.alive().contains(&node) {
            return false;
        }
        match self.nets.get_mut(&net) {
            Some(n) => {
                n.members.insert(node);
                true
            }
            None => false,
        }
    }

    fn remove_node(&mut self, net: u64, node: u64) -> bool {
        let Some(n) = self.nets.get_mut(&net) else { return false };
        if !n.members.remove(&node) {
            return false;
        }
        n.links.retain(|_, (s, d, _)| *s != node && *d != node);
        true
    }

    fn add_link(&mut self, net: u64, s: u64, d: u64, directed: bool) -> Option<u64> {
        let n = self.nets.get_mut(&net)?;
        if !n.members.contains(&s) || !n.members.contains(&d) || s == d {
            return None;
        }
        let id = self.next_link;
        self.next_link += 1;
        n.links.insert(id, (s, d, directed));
        Some(id)
    }

    fn remove_link(&mut self, link: u64) -> bool {
        self.nets.values_mut().any(|n| n.links.remove(&link).is_some())
    }

    fn merge(&mut self, targets: &[u64]) -> Option<u64> {
        let distinct: BTreeSet<u64> = targets.iter().copied().collect();
        if targets.len() < 2 || distinct.len() != targets.len() || targets.iter().any(|t| !self.nets.contains_key(t)) {
            return None;
        }
        let mut merged = ShadowNet::default();
        for t in targets {
            merged.members.extend(self.nets[t].members.iter().copied());
        }
        for t in targets {
            let links: Vec<(u64, u64, bool)> = self.nets[t].links.values().copied().collect();
            for l in links {
                merged.links.insert(self.next_link, l);
                self.next_link += 1;
            }
        }
        let id = self.next_net;
        self.next_net += 1;
        self.nets.insert(id, merged);
        Some(id)
    }

    fn remove_net(&mut self, net: u64) -> bool {
        self.nets.remove(&net).is_some()
    }
}

/// Full structural comparison of the real set against the model.
pub fn compare(real: &NetworkSet, shadow: &Shadow) -> Result<(), String> {
    real.check_integrity()?;
    let alive = shadow.alive();
    let real_nodes: BTreeSet<u64> = real.node_ids().map(|n| n.0).collect();
    if real_nodes != alive {
        return Err(format!("nodes {:?} != model {:?}", real_nodes, alive));
    }
    let real_nets: BTreeSet<u64> = real.net_ids().map(|n| n.0).collect();
    let model_nets: BTreeSet<u64> = shadow.nets.keys().copied().collect();
    if real_nets != model_nets {
        return Err(format!("networks {:?} != model {:?}", real_nets, model_nets));
    }
    for (&id, model) in &shadow.nets {
        let net = real.net(NetId(id)).map_err(|e| e.to_string())?;
        let members: BTreeSet<u64> = net.members.iter().map(|n| n.0).collect();
        if members != model.members {
            return Err(format!("net {} members {:?} != {:?}", id, members, model.members));
        }
        let links: BTreeMap<u64, (u64, u64, bool)> = net
            .links
            .iter()
            .map(|l| {
                let link = real.link(*l).unwrap();
                (l.0, (link.src.0, link.dst.0, link.directed))
            })
            .collect();
        if links != model.links {
            return Err(format!("net {} links differ", id));
        }
        let mut degree_sum = 0;
        for &m in &model.members {
            let mut expect: BTreeSet<u64> = BTreeSet::new();
            for &(s, d, directed) in model.links.values() {
                if s == m {
                    expect.insert(d);
                }
                if d == m && !directed {
                    expect.insert(s);
                }
            }
            let got: BTreeSet<u64> = real
                .neighbors(NetId(id), NodeId(m))
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|n| n.0)
                .collect();
            if got != expect {
                return Err(format!("net {} node {} neighbors {:?} != {:?}", id, m, got, expect));
            }
            degree_sum += real.degree(NetId(id), NodeId(m)).unwrap();
        }
        let undirected = model.links.values().filter(|l| !l.2).count();
        let directed = model.links.len() - undirected;
        if degree_sum != 2 * undirected + directed {
            return Err(format!("net {} degree sum {} != {}", id, degree_sum, 2 * undirected + directed));
        }
    }
    for node in alive {
        let membership: BTreeSet<u64> = real.membership(NodeId(node)).unwrap().iter().map(|n| n.0).collect();
        let expect: BTreeSet<u64> = shadow
            .nets
            .iter()
            .filter(|(_, n)| n.members.contains(&node))
            .map(|(id, _)| *id)
            .collect();
        if membership != expect {
            return Err(format!("node {} membership {:?} != {:?}", node, membership, expect));
        }
    }
    Ok(())
}

fn pick<T: Copy>(rng: &mut Pcg64, items: &[T]) -> Option<T> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.gen_range(0..items.len())])
    }
}

/// Applies one random operation to both sides; returns its name.
pub fn random_op(rng: &mut Pcg64, real: &mut NetworkSet, shadow: &mut Shadow) -> Result<&'static str, String> {
    let nets: Vec<u64> = shadow.nets.keys().copied().collect();
    // A few ids that do not exist, so error paths are exercised too.
    let net = pick(rng, &nets).filter(|_| rng.gen_bool(0.95)).unwrap_or(shadow.next_net + 3);
    let all_nodes: Vec<u64> = shadow.alive().into_iter().collect();
    let members: Vec<u64> = shadow.nets.get(&net).map(|n| n.members.iter().copied().collect()).unwrap_or_default();
    let ghost = shadow.next_node + 7;
    let node = |rng: &mut Pcg64, pool: &[u64]| {
        if rng.gen_bool(0.05) {
            ghost
        } else {
            pick(rng, pool).unwrap_or(0)
        }
    };
    let size = all_nodes.len();
    let roll = rng.gen_range(0..100);
    let agree = |what: &'static str, real_ok: bool, model_ok: bool| {
        if real_ok == model_ok {
            Ok(what)
        } else {
            Err(format!("{}: real ok={} model ok={}", what, real_ok, model_ok))
        }
    };
    match roll {
        0..=3 => {
            let id = real.add_network(StateBag::new());
            let want = shadow.add_net();
            if id.0 != want {
                return Err(format!("network id {} != {}", id, want));
            }
            Ok("add_network")
        }
        4..=29 if size < 60 => {
            let r = real.add_node(NetId(net), StateBag::new().with("v", rng.gen_range(0..10i64)));
            let m = shadow.add_node(net);
            if let (Ok(a), Some(b)) = (&r, m) {
                if a.0 != b {
                    return Err(format!("node id {} != {}", a, b));
                }
            }
            agree("add_node", r.is_ok(), m.is_some())
        }
        30..=39 => {
            let n = node(rng, &all_nodes);
            agree("enroll_node", real.enroll_node(NetId(net), NodeId(n)).is_ok(), shadow.enroll(net, n))
        }
        40..=54 => {
            let n = node(rng, &members);
            agree("remove_node", real.remove_node(NetId(net), NodeId(n)).is_ok(), shadow.remove_node(net, n))
        }
        55..=84 => {
            let (s, d) = (node(rng, &members), node(rng, &members));
            let directed = rng.gen_bool(0.3);
            let r = real.add_link(NetId(net), NodeId(s), NodeId(d), directed, StateBag::new());
            let m = shadow.add_link(net, s, d, directed);
            if let (Ok(a), Some(b)) = (&r, m) {
                if a.0 != b {
                    return Err(format!("link id {} != {}", a, b));
                }
            }
            agree("add_link", r.is_ok(), m.is_some())
        }
        85..=93 => {
            let links: Vec<u64> = shadow.nets.values().flat_map(|n| n.links.keys().copied()).collect();
            let l = pick(rng, &links).filter(|_| rng.gen_bool(0.95)).unwrap_or(shadow.next_link + 5);
            agree("remove_link", real.remove_link(LinkId(l)).is_ok(), shadow.remove_link(l))
        }
        94..=96 if size < 60 => {
            let k = rng.gen_range(1..=3);
            let targets: Vec<u64> = (0..k).map(|_| pick(rng, &nets).unwrap_or(0)).collect();
            let ids: Vec<NetId> = targets.iter().map(|&t| NetId(t)).collect();
            let r = real.merge(&ids);
            let m = shadow.merge(&targets);
            agree("merge", r.is_ok(), m.is_some())
        }
        _ => {
            let r = real.remove_network(NetId(net)).is_ok();
            let m = shadow.remove_net(net);
            agree("remove_network", r, m)
        }
    }
}

/// Runs `ops` random operations, comparing after each; returns how many
/// operations of each kind ran.
pub fn fuzz(rng: &mut Pcg64, ops: usize) -> Result<BTreeMap<&'static str, usize>, String> {
    let mut real = NetworkSet::new();
    let mut shadow = Shadow::default();
    let mut seen = BTreeMap::new();
    for i in 0..ops {
        let what = random_op(rng, &mut real, &mut shadow).map_err(|e| format!("op {}: {}", i, e))?;
        compare(&real, &shadow).map_err(|e| format!("op {} ({}): {}", i, what, e))?;
        *seen.entry(what).or_insert(0) += 1;
    }
    Ok(seen)
}

/// A random system built by `ops` operations.
pub fn random_system(rng: &mut Pcg64, ops: usize) -> NetworkSet {
    let mut real = NetworkSet::new();
    let mut shadow = Shadow::default();
    real.add_network(StateBag::new());
    shadow.add_net();
    for _ in 0..ops {
        random_op(rng, &mut real, &mut shadow).expect("model agrees");
    }
    real
}

/// Mutates a random node attribute and removes/adds random elements.
pub fn mutate(rng: &mut Pcg64, set: &mut NetworkSet, ops: usize) {
    for _ in 0..ops {
        let nodes: Vec<NodeId> = set.node_ids().collect();
        let nets: Vec<NetId> = set.net_ids().collect();
        match rng.gen_range(0..4) {
            0 => {
                if let Some(n) = pick(rng, &nodes) {
                    set.set_node_attr(n, "infected", 1).unwrap();
                }
            }
            1 => {
                if let Some(g) = pick(rng, &nets) {
                    let _ = set.add_node(g, StateBag::new());
                }
            }
            2 => {
                if let Some(n) = pick(rng, &nodes) {
                    let g = *set.membership(n).unwrap().iter().next().unwrap();
                    set.remove_node(g, n).unwrap();
                }
            }
            _ => {
                let links: Vec<LinkId> = set.link_ids().collect();
                if let Some(l) = pick(rng, &links) {
                    set.remove_link(l).unwrap();
                }
            }
        }
    }
}

/// Clones a random system, mutates one side, and checks the other side
/// still serializes exactly as before; then the other way round.
pub fn clone_independence(rng: &mut Pcg64) -> Result<(), String> {
    let ops = rng.gen_range(20..200);
    let mut original = random_system(rng, ops);
    let before = original.to_canonical_text();
    let mut copy = original.clone_system();
    if copy != original || copy.to_canonical_text() != before {
        return Err("clone differs from original".into());
    }
    mutate(rng, &mut copy, 10);
    if original.to_canonical_text() != before {
        return Err("mutating the clone changed the original".into());
    }
    let copy_text = copy.to_canonical_text();
    mutate(rng, &mut original, 10);
    if copy.to_canonical_text() != copy_text {
        return Err("mutating the original changed the clone".into());
    }
    Ok(())
}
