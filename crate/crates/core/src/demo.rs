//! Reference task: discrete-time SIR epidemics on networks.
//!
//! Every step is synchronous. A susceptible node with `k` infected
//! neighbors becomes infected with probability `1 - (1 - beta)^k`, an
//! infected node recovers with probability `gamma`, and all changes are
//! computed from the state at the start of the step. Nodes are visited in
//! ascending id order and a random number is drawn only when a transition
//! is possible, so a run is a pure function of its seed.
//!
//! Two tasks are provided. `sir` records `new_infections` after every
//! step, `final_size`, `final` (fraction) and `duration` after the run, and
//! `peak` at the user point `peak`. `sir_intervene` runs the epidemic for
//! `split` steps, clones the network once per strategy, and records
//! `size_<strategy>` at the user point `strategy_done`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::config::{ParamValue, ParameterPoint};
use crate::engine::{derive_seed, Hooks, RunContext, TaskLogic, TaskResult, TimePoint};
use crate::netstruct::{Attr, LinkId, NetId, NetworkSet, NodeId, StateBag};
use crate::session::TaskRegistry;

pub const SUSCEPTIBLE: i64 = 0;
pub const INFECTED: i64 = 1;
pub const RECOVERED: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Complete,
    Ring,
    /// Each pair linked independently with probability `p`.
    ErdosRenyi(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirParams {
    pub n: usize,
    pub topology: Topology,
    pub beta: f64,
    pub gamma: f64,
    pub i0: usize,
}

fn get_f64(point: &ParameterPoint, name: &str) -> Result<Option<f64>, String> {
    match point.get(name) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("parameter `{}` must be numeric", name)),
    }
}

fn get_count(point: &ParameterPoint, name: &str) -> Result<Option<usize>, String> {
    match point.get(name) {
        None => Ok(None),
        Some(ParamValue::Int(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(_) => Err(format!("parameter `{}` must be a non-negative integer", name)),
    }
}

impl SirParams {
    /// Reads `n`, `beta`, `gamma` and optionally `topology` (`complete`,
    /// `ring`, `er` with `p`; default `complete`) and `i0` (default 1).
    pub fn from_point(point: &ParameterPoint) -> Result<SirParams, String> {
        let n = get_count(point, "n")?.ok_or("missing parameter `n`")?;
        let beta = get_f64(point, "beta")?.ok_or("missing parameter `beta`")?;
        let gamma = get_f64(point, "gamma")?.ok_or("missing parameter `gamma`")?;
        let i0 = get_count(point, "i0")?.unwrap_or(1);
        let topology = match point.get("topology").map(|v| v.as_text()) {
            None | Some(Some("complete")) => Topology::Complete,
            Some(Some("ring")) => Topology::Ring,
            Some(Some("er")) => {
                Topology::ErdosRenyi(get_f64(point, "p")?.ok_or("topology `er` needs parameter `p`")?)
            }
            Some(other) => return Err(format!("unknown topology {:?}", other.unwrap_or("(number)"))),
        };
        let params = SirParams {
            n,
            topology,
            beta,
            gamma,
            i0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(format!("{} = {} is not a probability", name, x))
            }
        };
        unit("beta", self.beta)?;
        unit("gamma", self.gamma)?;
        if let Topology::ErdosRenyi(p) = self.topology {
            unit("p", p)?;
        }
        if self.i0 < 1 || self.i0 > self.n {
            return Err(format!("i0 = {} must be in 1..={}", self.i0, self.n));
        }
        Ok(())
    }

    /// Steps after which a run that still has infected nodes fails:
    /// `ceil(10 n / gamma)`, or `10 n` when `gamma` is 0.
    pub fn step_cap(&self) -> u64 {
        if self.gamma > 0.0 {
            (10.0 * self.n as f64 / self.gamma).ceil() as u64
        } else {
            10 * self.n as u64
        }
    }
}

/// A network whose nodes carry an `sir` attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SirState {
    pub net: NetworkSet,
    pub g: NetId,
    /// Members of `g`, ascending.
    pub nodes: Vec<NodeId>,
}

impl SirState {
    /// Wraps an existing network; nodes without `sir` count as susceptible.
    pub fn new(net: NetworkSet, g: NetId) -> SirState {
        let nodes = net.net(g).expect("network exists").members.iter().copied().collect();
        SirState { net, g, nodes }
    }

    /// All-susceptible network of the given topology.
    pub fn build<R: Rng + ?Sized>(n: usize, topology: Topology, rng: &mut R) -> SirState {
        let mut net = NetworkSet::new();
        let g = net.add_network(StateBag::new());
        let nodes: Vec<NodeId> = (0..n)
            .map(|_| net.add_node(g, StateBag::new().with("sir", SUSCEPTIBLE)).unwrap())
            .collect();
        let mut link = |a: usize, b: usize| {
            net.add_link(g, nodes[a], nodes[b], false, StateBag::new()).unwrap();
        };
        match topology {
            Topology::Complete => {
                for a in 0..n {
                    for b in a + 1..n {
                        link(a, b);
                    }
                }
            }
            Topology::Ring if n >= 3 => {
                for a in 0..n {
                    link(a, (a + 1) % n);
                }
            }
            Topology::Ring => {
                if n == 2 {
                    link(0, 1);
                }
            }
            Topology::ErdosRenyi(p) => {
                for a in 0..n {
                    for b in a + 1..n {
                        if rng.gen::<f64>() < p {
                            link(a, b);
                        }
                    }
                }
            }
        }
        SirState { net, g, nodes }
    }

    pub fn status(&self, node: NodeId) -> i64 {
        self.net
            .node_state(node)
            .ok()
            .and_then(|s| s.get("sir"))
            .and_then(Attr::as_i64)
            .unwrap_or(SUSCEPTIBLE)
    }

    pub fn set_status(&mut self, node: NodeId, status: i64) {
        self.net.set_node_attr(node, "sir", status).expect("node exists");
    }

    /// `[susceptible, infected, recovered]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &node in &self.nodes {
            c[self.status(node) as usize] += 1;
        }
        c
    }

    pub fn infected(&self) -> usize {
        self.counts()[1]
    }

    /// Nodes ever infected; vaccinated nodes are recovered but not counted.
    pub fn final_size(&self) -> usize {
        self.nodes
            .iter()
            .filter(|&&n| self.status(n) != SUSCEPTIBLE && !self.is_vaccinated(n))
            .count()
    }

    pub fn is_vaccinated(&self, node: NodeId) -> bool {
        self.net
            .node_state(node)
            .ok()
            .and_then(|s| s.get("vaccinated"))
            .is_some()
    }

    /// Moves a susceptible node straight to recovered.
    pub fn vaccinate(&mut self, node: NodeId) {
        self.set_status(node, RECOVERED);
        self.net.set_node_attr(node, "vaccinated", 1).expect("node exists");
    }

    /// One synchronous update; returns the number of new infections.
    pub fn step<R: Rng + ?Sized>(&mut self, beta: f64, gamma: f64, rng: &mut R) -> usize {
        let before: Vec<i64> = self.nodes.iter().map(|&n| self.status(n)).collect();
        let index_of = |id: NodeId| self.nodes.binary_search(&id).expect("member");
        let mut changes = Vec::new();
        for (i, &node) in self.nodes.iter().enumerate() {
            match before[i] {
                SUSCEPTIBLE => {
                    let k = self
                        .net
                        .neighbors(self.g, node)
                        .expect("member")
                        .into_iter()
                        .filter(|&m| m != node && before[index_of(m)] == INFECTED)
                        .count();
                    if k > 0 {
                        let q = 1.0 - (1.0 - beta).powi(k as i32);
                        if rng.gen::<f64>() < q {
                            changes.push((node, INFECTED));
                        }
                    }
                }
                INFECTED => {
                    if rng.gen::<f64>() < gamma {
                        changes.push((node, RECOVERED));
                    }
                }
                _ => {}
            }
        }
        let new = changes.iter().filter(|(_, s)| *s == INFECTED).count();
        for (node, s) in changes {
            self.set_status(node, s);
        }
        new
    }

    /// Steps until no node is infected; fails once `cap` steps are used.
    pub fn run_to_halt<R: Rng + ?Sized>(&mut self, beta: f64, gamma: f64, cap: u64, rng: &mut R) -> Result<u64, String> {
        let mut steps = 0;
        while self.infected() > 0 {
            if steps >= cap {
                return Err(format!("step cap {} reached with infected nodes left", cap));
            }
            self.step(beta, gamma, rng);
            steps += 1;
        }
        Ok(steps)
    }
}

/// Builds the topology and infects `i0` nodes chosen by `rng`.
pub fn sir_init<R: Rng + ?Sized>(params: &SirParams, rng: &mut R) -> Result<SirState, String> {
    params.validate()?;
    let mut state = SirState::build(params.n, params.topology, rng);
    let mut chosen = sample(rng, params.n, params.i0).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let node = state.nodes[i];
        state.set_status(node, INFECTED);
    }
    Ok(state)
}

/// The `sir` task.
pub struct SirTask {
    params: SirParams,
    state: Option<SirState>,
    steps: u64,
    last_new: usize,
    peak: usize,
}

impl SirTask {
    pub fn new(params: SirParams) -> SirTask {
        SirTask {
            params,
            state: None,
            steps: 0,
            last_new: 0,
            peak: 0,
        }
    }

    fn state(&self) -> &SirState {
        self.state.as_ref().expect("initialized")
    }
}

impl TaskLogic for SirTask {
    fn init_run(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<()> {
        let state = sir_init(&self.params, ctx.rng())?;
        self.peak = state.infected();
        self.state = Some(state);
        Ok(())
    }

    fn step(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<bool> {
        let (beta, gamma) = (self.params.beta, self.params.gamma);
        let state = self.state.as_mut().expect("initialized");
        self.last_new = state.step(beta, gamma, ctx.rng());
        self.steps += 1;
        let infected = state.infected();
        self.peak = self.peak.max(infected);
        if infected > 0 && self.steps >= self.params.step_cap() {
            return Err(format!("step cap {} reached with infected nodes left", self.params.step_cap()).into());
        }
        Ok(infected > 0)
    }

    fn finish_run(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<()> {
        let peak = self.peak as f64;
        ctx.fire("peak", |c| c.record("peak", peak));
        Ok(())
    }

    fn record(&mut self, tp: &TimePoint, ctx: &mut RunContext<'_>) -> TaskResult<()> {
        match tp {
            TimePoint::AfterStep => ctx.record("new_infections", self.last_new as f64),
            TimePoint::AfterRun => {
                let size = self.state().final_size();
                ctx.record("final_size", size as f64);
                ctx.record("final", size as f64 / self.params.n as f64);
                ctx.record("duration", self.steps as f64);
            }
            _ => {}
        }
        Ok(())
    }
}

/// What to do to one copy of the network before letting it run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Nothing,
    /// Vaccinate the `k` susceptible nodes of highest degree (ties by id).
    VaccinateTop(usize),
    VaccinateAll,
    /// Remove `k` links chosen at random.
    CutLinks(usize),
    VaccinateRandom(usize),
}

impl Strategy {
    /// The five strategies of the intervention task, with budget `k`.
    pub fn catalog(k: usize) -> [Strategy; 5] {
        [
            Strategy::Nothing,
            Strategy::VaccinateTop(k),
            Strategy::VaccinateAll,
            Strategy::CutLinks(k),
            Strategy::VaccinateRandom(k),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Nothing => "none",
            Strategy::VaccinateTop(_) => "vaccinate_top",
            Strategy::VaccinateAll => "vaccinate_all",
            Strategy::CutLinks(_) => "cut_links",
            Strategy::VaccinateRandom(_) => "vaccinate_random",
        }
    }

    /// Position in [`Strategy::catalog`]; selects the copy's sub-seed.
    pub fn catalog_index(&self) -> u64 {
        match self {
            Strategy::Nothing => 0,
            Strategy::VaccinateTop(_) => 1,
            Strategy::VaccinateAll => 2,
            Strategy::CutLinks(_) => 3,
            Strategy::VaccinateRandom(_) => 4,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, state: &mut SirState, rng: &mut R) {
        let susceptible: Vec<NodeId> = state
            .nodes
            .iter()
            .copied()
            .filter(|&n| state.status(n) == SUSCEPTIBLE)
            .collect();
        match *self {
            Strategy::Nothing => {}
            Strategy::VaccinateAll => {
                for n in susceptible {
                    state.vaccinate(n);
                }
            }
            Strategy::VaccinateTop(k) => {
                let mut ranked: Vec<(usize, NodeId)> = susceptible
                    .iter()
                    .map(|&n| (state.net.degree(state.g, n).expect("member"), n))
                    .collect();
                ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                for (_, n) in ranked.into_iter().take(k) {
                    state.vaccinate(n);
                }
            }
            Strategy::VaccinateRandom(k) => {
                let k = k.min(susceptible.len());
                let mut picks = sample(rng, susceptible.len(), k).into_vec();
                picks.sort_unstable();
                for i in picks {
                    state.vaccinate(susceptible[i]);
                }
            }
            Strategy::CutLinks(k) => {
                let links: Vec<LinkId> = state.net.net(state.g).expect("network").links.iter().copied().collect();
                let k = k.min(links.len());
                let mut picks = sample(rng, links.len(), k).into_vec();
                picks.sort_unstable();
                for i in picks {
                    state.net.remove_link(links[i]).expect("link exists");
                }
            }
        }
    }
}

/// Copies `state` once per strategy, applies it, and runs each copy to the
/// end. Copy `j` uses the sub-seed `derive_seed(unit_seed, c)` where `c` is
/// the strategy's catalog index, so equal strategies give equal outcomes.
/// Returns the final size per strategy; `state` itself is not touched.
pub fn sir_intervention_demo(
    state: &SirState,
    params: &SirParams,
    strategies: &[Strategy],
    unit_seed: u64,
) -> Result<Vec<(Strategy, usize)>, String> {
    strategies
        .iter()
        .map(|s| {
            let mut copy = SirState {
                net: state.net.clone_system(),
                g: state.g,
                nodes: state.nodes.clone(),
            };
            let mut rng = Pcg64::seed_from_u64(derive_seed(unit_seed, s.catalog_index()));
            s.apply(&mut copy, &mut rng);
            copy.run_to_halt(params.beta, params.gamma, params.step_cap(), &mut rng)?;
            Ok((*s, copy.final_size()))
        })
        .collect()
}

/// The `sir_intervene` task. Extra parameters: `split` (steps before the
/// intervention, default 2) and `budget` (default 1).
pub struct SirInterveneTask {
    params: SirParams,
    split: u64,
    budget: usize,
    state: Option<SirState>,
    steps: u64,
}

impl SirInterveneTask {
    pub fn from_point(point: &ParameterPoint) -> Result<SirInterveneTask, String> {
        Ok(SirInterveneTask {
            params: SirParams::from_point(point)?,
            split: get_count(point, "split")?.unwrap_or(2) as u64,
            budget: get_count(point, "budget")?.unwrap_or(1),
            state: None,
            steps: 0,
        })
    }
}

impl TaskLogic for SirInterveneTask {
    fn init_run(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<()> {
        self.state = Some(sir_init(&self.params, ctx.rng())?);
        Ok(())
    }

    fn step(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<bool> {
        let state = self.state.as_mut().expect("initialized");
        if self.steps >= self.split || state.infected() == 0 {
            return Ok(false);
        }
        state.step(self.params.beta, self.params.gamma, ctx.rng());
        self.steps += 1;
        Ok(self.steps < self.split && state.infected() > 0)
    }

    fn finish_run(&mut self, ctx: &mut RunContext<'_>) -> TaskResult<()> {
        let state = self.state.as_ref().expect("initialized");
        let seed = ctx.unit().seed;
        let sizes = sir_intervention_demo(state, &self.params, &Strategy::catalog(self.budget), seed)?;
        let before = state.final_size() as f64;
        ctx.fire("strategy_done", |c| {
            c.record("size_before", before);
            for (s, size) in &sizes {
                c.record(&format!("size_{}", s.name()), *size as f64);
            }
        });
        Ok(())
    }
}

/// Registry with `sir` and `sir_intervene`.
pub fn demo_registry() -> TaskRegistry {
    let mut reg = TaskRegistry::new();
    reg.register(
        "sir",
        |point: &ParameterPoint| -> TaskResult<Box<dyn TaskLogic>> {
            Ok(Box::new(SirTask::new(SirParams::from_point(point)?)))
        },
        Hooks::new(),
    );
    reg.register(
        "sir_intervene",
        |point: &ParameterPoint| -> TaskResult<Box<dyn TaskLogic>> {
            Ok(Box::new(SirInterveneTask::from_point(point)?))
        },
        Hooks::new(),
    );
    reg
}
