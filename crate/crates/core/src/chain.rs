//! Absorbing Markov chains describing what happens to a single NVM cell while
//! the PUF answers one challenge.
//!
//! A chain is a dense row-stochastic matrix over labeled states. States that
//! issue a write pulse are tagged [`OpTag::Set`] or [`OpTag::Reset`]; the
//! occupancy engine counts visits to those groups. Chains are either built in
//! ([`build_reap_nvm_chain`], [`build_ampuf_chain`]) or loaded from a JSON
//! document (see [`ChainDocument`]).
//!
//! The internal structure of the set loop is not observable from the design
//! alone, so two readings are offered through [`SetLoop`]: a single self-looping
//! state with a geometric number of pulses, or a level-expanded ladder where a
//! uniformly chosen target level `L` costs `max(L, 1)` pulses, optionally with
//! a per-pulse verify-retry probability.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Set,
    Reset,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub id: usize,
    pub label: String,
    pub op_tag: OpTag,
}

/// Raw, possibly invalid chain as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDocument {
    pub states: Vec<StateSpec>,
    pub transition: Vec<Vec<f64>>,
    pub initial: usize,
    pub terminal: Vec<usize>,
}

/// A single broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NonDenseId { position: usize, id: usize },
    NotSquare { row: usize, len: usize, expected: usize },
    ProbabilityOutOfRange { row: usize, col: usize, value: f64 },
    RowSum { row: usize, sum: f64 },
    InitialOutOfRange(usize),
    NoTerminal,
    TerminalOutOfRange(usize),
    DuplicateTerminal(usize),
    InitialIsTerminal,
    TerminalNotAbsorbing(usize),
    TerminalTagged(usize),
    TerminalUnreachable,
    Trapped(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "chain has no states"),
            Violation::NonDenseId { position, id } => {
                write!(f, "state at position {position} has id {id}, expected {position}")
            }
            Violation::NotSquare { row, len, expected } => {
                write!(f, "row {row} has {len} entries, expected {expected}")
            }
            Violation::ProbabilityOutOfRange { row, col, value } => {
                write!(f, "entry ({row}, {col}) = {value} is not a probability")
            }
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            Violation::InitialOutOfRange(id) => write!(f, "initial state {id} does not exist"),
            Violation::NoTerminal => write!(f, "no terminal state"),
            Violation::TerminalOutOfRange(id) => write!(f, "terminal state {id} does not exist"),
            Violation::DuplicateTerminal(id) => write!(f, "terminal state {id} listed twice"),
            Violation::InitialIsTerminal => write!(f, "initial state is terminal"),
            Violation::TerminalNotAbsorbing(id) => write!(f, "terminal not absorbing: state {id}"),
            Violation::TerminalTagged(id) => {
                write!(f, "terminal state {id} carries a set/reset tag")
            }
            Violation::TerminalUnreachable => {
                write!(f, "no terminal state is reachable from the initial state")
            }
            Violation::Trapped(id) => {
                write!(f, "state {id} is reachable but cannot reach a terminal state")
            }
        }
    }
}

/// Checks every structural invariant of a chain document. An empty report
/// means the document describes a valid absorbing chain.
pub fn validate(doc: &ChainDocument) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = doc.states.len();
    if n == 0 {
        out.push(Violation::Empty);
        return out;
    }
    for (position, s) in doc.states.iter().enumerate() {
        if s.id != position {
            out.push(Violation::NonDenseId { position, id: s.id });
        }
    }
    if doc.transition.len() != n {
        out.push(Violation::NotSquare {
            row: doc.transition.len(),
            len: 0,
            expected: n,
        });
        return out;
    }
    let mut square = true;
    for (r, row) in doc.transition.iter().enumerate() {
        if row.len() != n {
            out.push(Violation::NotSquare {
                row: r,
                len: row.len(),
                expected: n,
            });
            square = false;
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::ProbabilityOutOfRange { row: r, col: c, value: v });
            }
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            out.push(Violation::RowSum { row: r, sum });
        }
    }
    if doc.initial >= n {
        out.push(Violation::InitialOutOfRange(doc.initial));
    }
    if doc.terminal.is_empty() {
        out.push(Violation::NoTerminal);
    }
    let mut is_terminal = vec![false; n];
    for &t in &doc.terminal {
        if t >= n {
            out.push(Violation::TerminalOutOfRange(t));
            continue;
        }
        if is_terminal[t] {
            out.push(Violation::DuplicateTerminal(t));
        }
        is_terminal[t] = true;
        if square && doc.transition[t].iter().enumerate().any(|(c, &v)| v != if c == t { 1.0 } else { 0.0 }) {
            out.push(Violation::TerminalNotAbsorbing(t));
        }
        if doc.states[t].op_tag != OpTag::None {
            out.push(Violation::TerminalTagged(t));
        }
    }
    if doc.initial < n && is_terminal[doc.initial] {
        out.push(Violation::InitialIsTerminal);
    }
    if square && doc.initial < n && !doc.terminal.is_empty() {
        let reachable = reachable_from(&doc.transition, &[doc.initial], false);
        if !reachable.iter().zip(&is_terminal).any(|(&r, &t)| r && t) {
            out.push(Violation::TerminalUnreachable);
        } else {
            let terminals: Vec<usize> = (0..n).filter(|&i| is_terminal[i]).collect();
            let can_finish = reachable_from(&doc.transition, &terminals, true);
            for i in 0..n {
                if reachable[i] && !can_finish[i] {
                    out.push(Violation::Trapped(i));
                }
            }
        }
    }
    out
}

/// Breadth-first reachability over positive entries; `reverse` walks edges backwards.
fn reachable_from(m: &[Vec<f64>], seeds: &[usize], reverse: bool) -> Vec<bool> {
    let n = m.len();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = seeds.iter().copied().collect();
    for &s in seeds {
        seen[s] = true;
    }
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            let p = if reverse { m[v][u] } else { m[u][v] };
            if p > 0.0 && !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

/// A validated absorbing Markov chain. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChainSpec {
    doc: ChainDocument,
    terminal_mask: Vec<bool>,
}

impl MarkovChainSpec {
    pub fn from_document(doc: ChainDocument) -> Result<Self> {
        let violations = validate(&doc);
        if !violations.is_empty() {
            return Err(Error::InvalidChain(
                violations.iter().map(ToString::to_string).collect(),
            ));
        }
        let mut terminal_mask = vec![false; doc.states.len()];
        for &t in &doc.terminal {
            terminal_mask[t] = true;
        }
        Ok(MarkovChainSpec { doc, terminal_mask })
    }

    pub fn document(&self) -> &ChainDocument {
        &self.doc
    }

    pub fn len(&self) -> usize {
        self.doc.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc.states.is_empty()
    }

    pub fn states(&self) -> &[StateSpec] {
        &self.doc.states
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.doc.transition
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.doc.transition[from][to]
    }

    pub fn initial(&self) -> usize {
        self.doc.initial
    }

    pub fn terminal(&self) -> &[usize] {
        &self.doc.terminal
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_mask[s]
    }

    /// Ids of every state carrying `tag`.
    pub fn tagged(&self, tag: OpTag) -> Vec<usize> {
        self.doc
            .states
            .iter()
            .filter(|s| s.op_tag == tag)
            .map(|s| s.id)
            .collect()
    }

    /// Canonical JSON form; `load_chain_str(export_json(x))` reproduces `x`.
    pub fn export_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.doc).expect("chain document serializes");
        s.push('\n');
        s
    }
}

pub fn load_chain_str(text: &str) -> Result<MarkovChainSpec> {
    let doc: ChainDocument = serde_json::from_str(text)?;
    MarkovChainSpec::from_document(doc)
}

pub fn load_chain(path: &Path) -> Result<MarkovChainSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_chain_str(&text)
}

/// Internal structure of the set loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetLoop {
    /// One Set state with self-loop `1 - 1/mean_set_pulses`.
    Geometric,
    /// One Set state per pulse; target level uniform over `0..n_levels`,
    /// level `L` costs `max(L, 1)` pulses, each pulse repeated with
    /// probability `pulse_retry`.
    LevelExpanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub n_pairs: usize,
    pub n_levels: usize,
    pub mean_set_pulses: f64,
    pub reset_pulses: f64,
    pub set_loop: SetLoop,
    pub pulse_retry: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            n_pairs: 128,
            n_levels: 8,
            mean_set_pulses: 3.5,
            reset_pulses: 1.0,
            set_loop: SetLoop::Geometric,
            pulse_retry: 0.0,
        }
    }
}

/// Verify-retry probability that puts the level-expanded REAP-NVM set-mode
/// half-life at 21099 challenges (fitted with [`crate::lifetime::calibrate`]).
pub const REAP_NVM_CALIBRATED_RETRY: f64 = 0.3454;
/// Verify-retry probability that puts the level-expanded A-MPUF set-mode
/// half-life at 341 challenges, with [`AMPUF_CALIBRATED_LEVELS`] levels per cell.
pub const AMPUF_CALIBRATED_RETRY: f64 = 0.3813;
/// Geometric-loop mean pulse counts fitted to the same half-lives.
pub const REAP_NVM_CALIBRATED_MEAN_PULSES: f64 = 5.4826;
pub const AMPUF_CALIBRATED_MEAN_PULSES: f64 = 2.8079;
pub const AMPUF_CALIBRATED_LEVELS: usize = 4;

impl ChainParams {
    pub fn level_expanded() -> Self {
        ChainParams {
            set_loop: SetLoop::LevelExpanded,
            ..Default::default()
        }
    }

    pub fn reap_nvm_calibrated() -> Self {
        ChainParams {
            pulse_retry: REAP_NVM_CALIBRATED_RETRY,
            ..Self::level_expanded()
        }
    }

    pub fn ampuf_calibrated() -> Self {
        ChainParams {
            n_levels: AMPUF_CALIBRATED_LEVELS,
            pulse_retry: AMPUF_CALIBRATED_RETRY,
            ..Self::level_expanded()
        }
    }

    /// Geometric-loop counterparts of the calibrated presets.
    pub fn reap_nvm_calibrated_geometric() -> Self {
        ChainParams {
            mean_set_pulses: REAP_NVM_CALIBRATED_MEAN_PULSES,
            ..Default::default()
        }
    }

    pub fn ampuf_calibrated_geometric() -> Self {
        ChainParams {
            mean_set_pulses: AMPUF_CALIBRATED_MEAN_PULSES,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n_pairs < 1 {
            return bad("n_pairs must be at least 1".into());
        }
        if self.n_levels < 2 || !self.n_levels.is_power_of_two() {
            return bad(format!("n_levels must be a power of two >= 2, got {}", self.n_levels));
        }
        if !(self.mean_set_pulses >= 1.0 && self.mean_set_pulses.is_finite()) {
            return bad(format!("mean_set_pulses must be >= 1, got {}", self.mean_set_pulses));
        }
        if !(self.reset_pulses >= 1.0 && self.reset_pulses.is_finite()) {
            return bad(format!("reset_pulses must be >= 1, got {}", self.reset_pulses));
        }
        if !(0.0..1.0).contains(&self.pulse_retry) {
            return bad(format!("pulse_retry must be in [0, 1), got {}", self.pulse_retry));
        }
        Ok(())
    }
}

/// Incremental builder for chain documents.
struct Builder {
    states: Vec<StateSpec>,
    edges: Vec<(usize, usize, f64)>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            states: Vec::new(),
            edges: Vec::new(),
        }
    }

    fn state(&mut self, label: impl Into<String>, op_tag: OpTag) -> usize {
        let id = self.states.len();
        self.states.push(StateSpec {
            id,
            label: label.into(),
            op_tag,
        });
        id
    }

    fn edge(&mut self, from: usize, to: usize, p: f64) {
        if p > 0.0 {
            self.edges.push((from, to, p));
        }
    }

    fn finish(self, initial: usize, terminal: usize) -> Result<MarkovChainSpec> {
        let n = self.states.len();
        let mut m = vec![vec![0.0; n]; n];
        for (a, b, p) in self.edges {
            m[a][b] += p;
        }
        m[terminal][terminal] = 1.0;
        MarkovChainSpec::from_document(ChainDocument {
            states: self.states,
            transition: m,
            initial,
            terminal: vec![terminal],
        })
    }
}

const RECEIVE: &str = "Receive Challenge";
const PROPAGATE: &str = "Propagate Signals Through Cells";

/// Adds the set loop; returns its entry state and the list of (state, exit
/// probability) pairs whose exits still need to be wired.
fn add_set_loop(b: &mut Builder, params: &ChainParams) -> (usize, Vec<(usize, f64)>) {
    match params.set_loop {
        SetLoop::Geometric => {
            let s = b.state("Set Pulse", OpTag::Set);
            let stay = 1.0 - 1.0 / params.mean_set_pulses;
            b.edge(s, s, stay);
            (s, vec![(s, 1.0 - stay)])
        }
        SetLoop::LevelExpanded => {
            let n = params.n_levels;
            let max_pulses = n - 1;
            let ids: Vec<usize> = (1..=max_pulses)
                .map(|j| b.state(format!("Set Pulse {j}"), OpTag::Set))
                .collect();
            let r = params.pulse_retry;
            let mut exits = Vec::new();
            for (idx, &s) in ids.iter().enumerate() {
                let j = idx + 1;
                // P(more pulses | reached pulse j) for levels uniform on 0..n,
                // pulses(L) = max(L, 1).
                let cont = if j == 1 {
                    (n - 2) as f64 / n as f64
                } else {
                    (n - j - 1) as f64 / (n - j) as f64
                };
                b.edge(s, s, r);
                if j < max_pulses {
                    b.edge(s, ids[idx + 1], (1.0 - r) * cont);
                }
                exits.push((s, (1.0 - r) * (1.0 - cont)));
            }
            (ids[0], exits)
        }
    }
}

fn add_reset(b: &mut Builder, params: &ChainParams) -> (usize, f64, usize) {
    let s = b.state("Reset Pulse", OpTag::Reset);
    let stay = 1.0 - 1.0 / params.reset_pulses;
    b.edge(s, s, stay);
    (s, 1.0 - stay, s)
}

/// Per-cell chain of the REAP-NVM design: each challenge programs one of
/// `n_pairs` cell pairs and resets the pair used by the previous challenge.
pub fn build_reap_nvm_chain(params: &ChainParams) -> Result<MarkovChainSpec> {
    params.check()?;
    if params.n_pairs < 2 {
        return Err(Error::InvalidParams(
            "REAP-NVM chain needs n_pairs >= 2 (set and reset branches each take 1/n_pairs)".into(),
        ));
    }
    let mut b = Builder::new();
    let rc = b.state(RECEIVE, OpTag::None);
    let (set_entry, set_exits) = add_set_loop(&mut b, params);
    let (reset, reset_exit, _) = add_reset(&mut b, params);
    let term = b.state(PROPAGATE, OpTag::None);

    let branch = 1.0 / params.n_pairs as f64;
    b.edge(rc, set_entry, branch);
    b.edge(rc, reset, branch);
    b.edge(rc, term, (params.n_pairs - 2) as f64 / params.n_pairs as f64);
    for (s, p) in set_exits {
        b.edge(s, term, p);
    }
    b.edge(reset, term, reset_exit);
    b.finish(rc, term)
}

/// Per-cell chain of the A-MPUF baseline: every cell is programmed on every
/// challenge and reset afterwards.
pub fn build_ampuf_chain(params: &ChainParams) -> Result<MarkovChainSpec> {
    params.check()?;
    let mut b = Builder::new();
    let rc = b.state(RECEIVE, OpTag::None);
    let (set_entry, set_exits) = add_set_loop(&mut b, params);
    let (reset, reset_exit, _) = add_reset(&mut b, params);
    let term = b.state(PROPAGATE, OpTag::None);

    b.edge(rc, set_entry, 1.0);
    for (s, p) in set_exits {
        b.edge(s, reset, p);
    }
    b.edge(reset, term, reset_exit);
    b.finish(rc, term)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinPuf {
    ReapNvm,
    AMpuf,
}

impl BuiltinPuf {
    pub fn name(self) -> &'static str {
        match self {
            BuiltinPuf::ReapNvm => "reap-nvm",
            BuiltinPuf::AMpuf => "a-mpuf",
        }
    }

    pub fn build(self, params: &ChainParams) -> Result<MarkovChainSpec> {
        match self {
            BuiltinPuf::ReapNvm => build_reap_nvm_chain(params),
            BuiltinPuf::AMpuf => build_ampuf_chain(params),
        }
    }

    pub fn calibrated_params(self) -> ChainParams {
        match self {
            BuiltinPuf::ReapNvm => ChainParams::reap_nvm_calibrated(),
            BuiltinPuf::AMpuf => ChainParams::ampuf_calibrated(),
        }
    }
}

impl std::str::FromStr for BuiltinPuf {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reap-nvm" | "reap" => Ok(BuiltinPuf::ReapNvm),
            "a-mpuf" | "ampuf" => Ok(BuiltinPuf::AMpuf),
            other => Err(Error::InvalidParams(format!("unknown built-in PUF '{other}'"))),
        }
    }
}
