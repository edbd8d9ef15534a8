//! Network topologies and their text file format.
//!
//! ```text
//! # comment
//! nodes 3
//! link 0 1 10
//! link 1 2 10
//! link 0 2 10
//! ```
//!
//! Links are undirected and numbered in file order; both directions draw on
//! one shared capacity.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type NodeId = usize;
pub type LinkId = usize;

pub const NSFNET: &str = include_str!("../data/nsfnet.topo");
pub const GEANT2: &str = include_str!("../data/geant2.topo");
pub const TRIANGLE: &str = include_str!("../data/triangle.topo");

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing `nodes <N>` declaration")]
    MissingNodes,
    #[error("link {link} ({a}-{b}): endpoint out of range for {nodes} nodes")]
    NodeOutOfRange { link: LinkId, a: NodeId, b: NodeId, nodes: usize },
    #[error("link {link}: self-loop on node {node}")]
    SelfLoop { link: LinkId, node: NodeId },
    #[error("link {link} ({a}-{b}) duplicates link {first}")]
    DuplicateLink { link: LinkId, first: LinkId, a: NodeId, b: NodeId },
    #[error("link {link} ({a}-{b}): capacity {capacity} must be positive and finite")]
    InvalidCapacity { link: LinkId, a: NodeId, b: NodeId, capacity: f64 },
    #[error("graph is disconnected: node {node} unreachable from node 0")]
    Disconnected { node: NodeId },
    #[error("topology must have at least 2 nodes, got {0}")]
    TooSmall(usize),
    #[error("unknown bundled topology `{0}`")]
    UnknownBundled(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub capacity: f64,
}

impl Link {
    pub fn touches(&self, node: NodeId) -> bool {
        self.a == node || self.b == node
    }

    /// The endpoint opposite `node`. `node` must be an endpoint.
    pub fn other(&self, node: NodeId) -> NodeId {
        if self.a == node {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    name: String,
    node_count: usize,
    links: Vec<Link>,
    /// `incident[n]` lists `(link id, neighbour)` sorted by link id.
    incident: Vec<Vec<(LinkId, NodeId)>>,
}

impl Topology {
    /// Builds and validates a topology.
    pub fn new(
        name: impl Into<String>,
        node_count: usize,
        links: Vec<Link>,
    ) -> Result<Self, TopologyError> {
        if node_count < 2 {
            return Err(TopologyError::TooSmall(node_count));
        }
        let mut seen = std::collections::HashMap::new();
        for (id, l) in links.iter().enumerate() {
            if l.a >= node_count || l.b >= node_count {
                return Err(TopologyError::NodeOutOfRange {
                    link: id,
                    a: l.a,
                    b: l.b,
                    nodes: node_count,
                });
            }
            if l.a == l.b {
                return Err(TopologyError::SelfLoop { link: id, node: l.a });
            }
            if !(l.capacity > 0.0 && l.capacity.is_finite()) {
                return Err(TopologyError::InvalidCapacity {
                    link: id,
                    a: l.a,
                    b: l.b,
                    capacity: l.capacity,
                });
            }
            let key = (l.a.min(l.b), l.a.max(l.b));
            if let Some(&first) = seen.get(&key) {
                return Err(TopologyError::DuplicateLink { link: id, first, a: l.a, b: l.b });
            }
            seen.insert(key, id);
        }
        let mut incident = vec![Vec::new(); node_count];
        for (id, l) in links.iter().enumerate() {
            incident[l.a].push((id, l.b));
            incident[l.b].push((id, l.a));
        }
        let topo = Self { name: name.into(), node_count, links, incident };
        if let Some(node) = topo.first_unreachable() {
            return Err(TopologyError::Disconnected { node });
        }
        Ok(topo)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn incident(&self, node: NodeId) -> &[(LinkId, NodeId)] {
        &self.incident[node]
    }

    pub fn capacities(&self) -> Vec<f64> {
        self.links.iter().map(|l| l.capacity).collect()
    }

    pub fn min_capacity(&self) -> f64 {
        self.links.iter().map(|l| l.capacity).fold(f64::INFINITY, f64::min)
    }

    pub fn max_capacity(&self) -> f64 {
        self.links.iter().map(|l| l.capacity).fold(0.0, f64::max)
    }

    /// Returns a copy with every link capacity replaced by `capacity`.
    pub fn with_uniform_capacity(&self, capacity: f64) -> Result<Self, TopologyError> {
        let links = self.links.iter().map(|l| Link { capacity, ..*l }).collect();
        Self::new(self.name.clone(), self.node_count, links)
    }

    /// Hop distances from `src` by breadth-first search.
    pub fn bfs_hops(&self, src: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &(_, v) in &self.incident[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    fn first_unreachable(&self) -> Option<NodeId> {
        self.bfs_hops(0).iter().position(Option::is_none)
    }

    /// Line-graph adjacency: two links are adjacent iff they share an endpoint.
    /// Each list is sorted by link id.
    pub fn link_adjacency(&self) -> Vec<Vec<LinkId>> {
        self.links
            .iter()
            .enumerate()
            .map(|(id, l)| {
                let mut adj: Vec<LinkId> = self.incident[l.a]
                    .iter()
                    .chain(&self.incident[l.b])
                    .map(|&(other, _)| other)
                    .filter(|&other| other != id)
                    .collect::<HashSet<_>>()
                    .into_iter()
                    .collect();
                adj.sort_unstable();
                adj
            })
            .collect()
    }

    /// Serializes back to the text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("nodes {}\n", self.node_count);
        for l in &self.links {
            out.push_str(&format!("link {} {} {}\n", l.a, l.b, l.capacity));
        }
        out
    }
}

/// Parses topology file content.
pub fn load_topology(name: &str, source: &str) -> Result<Topology, TopologyError> {
    let mut nodes: Option<usize> = None;
    let mut links = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| TopologyError::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match (fields[0], nodes) {
            ("nodes", None) => {
                if fields.len() != 2 {
                    return Err(parse_err("expected `nodes <N>`".into()));
                }
                let n = fields[1]
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("invalid node count `{}`", fields[1])))?;
                nodes = Some(n);
            }
            ("nodes", Some(_)) => return Err(parse_err("duplicate `nodes` declaration".into())),
            ("link", None) => return Err(parse_err("`link` before `nodes` declaration".into())),
            ("link", Some(_)) => {
                if fields.len() != 4 {
                    return Err(parse_err("expected `link <a> <b> <capacity>`".into()));
                }
                let node = |s: &str| {
                    s.parse::<usize>().map_err(|_| parse_err(format!("invalid node id `{s}`")))
                };
                let a = node(fields[1])?;
                let b = node(fields[2])?;
                let capacity = fields[3]
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("invalid capacity `{}`", fields[3])))?;
                links.push(Link { a, b, capacity });
            }
            (other, _) => return Err(parse_err(format!("unknown directive `{other}`"))),
        }
    }
    let node_count = nodes.ok_or(TopologyError::MissingNodes)?;
    Topology::new(name, node_count, links)
}

/// Resolves `nsfnet`, `geant2`, or a path to a topology file.
pub fn resolve_topology(spec: &str) -> Result<Topology, TopologyError> {
    match spec.to_ascii_lowercase().as_str() {
        "nsfnet" => load_topology("nsfnet", NSFNET),
        "geant2" => load_topology("geant2", GEANT2),
        "triangle" => load_topology("triangle", TRIANGLE),
        _ => {
            let path = Path::new(spec);
            if !path.exists() {
                return Err(TopologyError::UnknownBundled(spec.to_string()));
            }
            let text = fs::read_to_string(path).map_err(|e| TopologyError::Io {
                path: spec.to_string(),
                message: e.to_string(),
            })?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
            load_topology(name, &text)
        }
    }
}
