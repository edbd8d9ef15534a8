//! Candidate path tables: the k shortest loop-free paths for every ordered
//! node pair, found with Yen's algorithm.
//!
//! Paths are ranked by hop count, then by their link-id sequence compared
//! lexicographically. Because two paths sharing a root prefix compare the
//! same way their suffixes do, Yen's deviation search returns exactly the
//! first `k` paths of this total order.

use std::collections::{BTreeSet, HashSet, VecDeque};

use crate::topology::{LinkId, NodeId, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.links.len()
    }

    pub fn src(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn dst(&self) -> NodeId {
        *self.nodes.last().unwrap()
    }

    fn order_key(&self) -> (usize, &[LinkId]) {
        (self.links.len(), &self.links)
    }
}

impl Ord for Path {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for Path {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePathTable {
    k: usize,
    node_count: usize,
    entries: Vec<Vec<Path>>,
}

impl CandidatePathTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Candidate paths for `(src, dst)`, best first. Empty when `src == dst`.
    pub fn paths(&self, src: NodeId, dst: NodeId) -> &[Path] {
        &self.entries[src * self.node_count + dst]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        let n = self.node_count;
        (0..n).flat_map(move |s| (0..n).filter(move |&d| d != s).map(move |d| (s, d)))
    }

    /// A canonical text dump, one line per path.
    pub fn to_text(&self) -> String {
        let mut out = format!("k {}\n", self.k);
        for (s, d) in self.pairs() {
            for (i, p) in self.paths(s, d).iter().enumerate() {
                let links: Vec<String> = p.links.iter().map(|l| l.to_string()).collect();
                out.push_str(&format!("{s} {d} {i} {}\n", links.join(",")));
            }
        }
        out
    }
}

/// Precomputes up to `k` loop-free paths for every ordered pair.
pub fn compute_candidate_paths(topology: &Topology, k: usize) -> CandidatePathTable {
    assert!(k >= 1, "k must be at least 1");
    let n = topology.node_count();
    let mut entries = Vec::with_capacity(n * n);
    for s in 0..n {
        for d in 0..n {
            entries.push(if s == d { Vec::new() } else { k_shortest_paths(topology, s, d, k) });
        }
    }
    CandidatePathTable { k, node_count: n, entries }
}

/// Yen's k shortest loopless paths under (hop count, link-id sequence) order.
pub fn k_shortest_paths(topology: &Topology, src: NodeId, dst: NodeId, k: usize) -> Vec<Path> {
    let none_nodes = vec![false; topology.node_count()];
    let none_links = HashSet::new();
    let Some(first) = lexmin_shortest_path(topology, src, dst, &none_nodes, &none_links) else {
        return Vec::new();
    };
    let mut accepted = vec![first];
    let mut candidates: BTreeSet<Path> = BTreeSet::new();

    while accepted.len() < k {
        let last = accepted.last().unwrap().clone();
        for i in 0..last.hops() {
            let spur_node = last.nodes[i];
            let root_links = &last.links[..i];

            let banned_links: HashSet<LinkId> = accepted
                .iter()
                .filter(|p| p.hops() > i && &p.links[..i] == root_links)
                .map(|p| p.links[i])
                .collect();
            let mut banned_nodes = vec![false; topology.node_count()];
            for &node in &last.nodes[..i] {
                banned_nodes[node] = true;
            }

            if let Some(spur) =
                lexmin_shortest_path(topology, spur_node, dst, &banned_nodes, &banned_links)
            {
                let mut nodes = last.nodes[..i].to_vec();
                nodes.extend_from_slice(&spur.nodes);
                let mut links = root_links.to_vec();
                links.extend_from_slice(&spur.links);
                let path = Path { nodes, links };
                if !accepted.contains(&path) {
                    candidates.insert(path);
                }
            }
        }
        match candidates.pop_first() {
            Some(next) => accepted.push(next),
            None => break,
        }
    }
    accepted
}

/// The lexicographically smallest minimum-hop path avoiding banned elements.
fn lexmin_shortest_path(
    topology: &Topology,
    src: NodeId,
    dst: NodeId,
    banned_nodes: &[bool],
    banned_links: &HashSet<LinkId>,
) -> Option<Path> {
    // Distances to dst over the allowed subgraph.
    let n = topology.node_count();
    let mut dist = vec![usize::MAX; n];
    dist[dst] = 0;
    let mut queue = VecDeque::from([dst]);
    while let Some(u) = queue.pop_front() {
        for &(link, v) in topology.incident(u) {
            if banned_nodes[v] || banned_links.contains(&link) || dist[v] != usize::MAX {
                continue;
            }
            dist[v] = dist[u] + 1;
            queue.push_back(v);
        }
    }
    if dist[src] == usize::MAX {
        return None;
    }
    let mut nodes = vec![src];
    let mut links = Vec::with_capacity(dist[src]);
    let mut u = src;
    while u != dst {
        // Incident lists are sorted by link id, so the first match is lex-min.
        let &(link, v) = topology
            .incident(u)
            .iter()
            .find(|&&(link, v)| {
                !banned_nodes[v] && !banned_links.contains(&link) && dist[v] + 1 == dist[u]
            })
            .expect("BFS distance guarantees a descending neighbour");
        links.push(link);
        nodes.push(v);
        u = v;
    }
    Some(Path { nodes, links })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{load_topology, resolve_topology};

    /// Independent oracle: every simple path by DFS, sorted, truncated.
    fn brute_force(t: &Topology, s: NodeId, d: NodeId, k: usize) -> Vec<Vec<LinkId>> {
        fn dfs(
            t: &Topology,
            u: NodeId,
            d: NodeId,
            seen: &mut Vec<bool>,
            links: &mut Vec<LinkId>,
            out: &mut Vec<Vec<LinkId>>,
        ) {
            if u == d {
                out.push(links.clone());
                return;
            }
            for &(l, v) in t.incident(u) {
                if !seen[v] {
                    seen[v] = true;
                    links.push(l);
                    dfs(t, v, d, seen, links, out);
                    links.pop();
                    seen[v] = false;
                }
            }
        }
        let mut seen = vec![false; t.node_count()];
        seen[s] = true;
        let mut out = Vec::new();
        dfs(t, s, d, &mut seen, &mut Vec::new(), &mut out);
        out.sort_by(|a, b| (a.len(), a).cmp(&(b.len(), b)));
        out.truncate(k);
        out
    }

    fn triangle() -> Topology {
        load_topology("tri", "nodes 3\nlink 0 1 10\nlink 1 2 10\nlink 0 2 10\n").unwrap()
    }

    #[test]
    fn triangle_two_paths() {
        let table = compute_candidate_paths(&triangle(), 2);
        let paths = table.paths(0, 2);
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].links, vec![2]);
        assert_eq!(paths[1].links, vec![0, 1]);
        assert_eq!(paths[1].nodes, vec![0, 1, 2]);
    }

    #[test]
    fn path_graph_has_unique_path() {
        let t = load_topology("p", "nodes 3\nlink 0 1 1\nlink 1 2 1\n").unwrap();
        let table = compute_candidate_paths(&t, 4);
        assert_eq!(table.paths(0, 2).len(), 1);
        assert_eq!(table.paths(2, 0)[0].nodes, vec![2, 1, 0]);
        assert!(table.paths(1, 1).is_empty());
    }

    #[test]
    fn nsfnet_matches_exhaustive_enumeration() {
        let t = resolve_topology("nsfnet").unwrap();
        let table = compute_candidate_paths(&t, 4);
        for (s, d) in table.pairs() {
            let got: Vec<Vec<LinkId>> = table.paths(s, d).iter().map(|p| p.links.clone()).collect();
            assert_eq!(got, brute_force(&t, s, d, 4), "pair ({s},{d})");
            assert_eq!(got.len(), 4);
        }
    }

    #[test]
    fn geant2_larger_k_matches_exhaustive_on_sample_pairs() {
        let t = resolve_topology("geant2").unwrap();
        for (s, d) in [(0, 23), (5, 14), (16, 2), (10, 19)] {
            let got: Vec<Vec<LinkId>> =
                k_shortest_paths(&t, s, d, 12).iter().map(|p| p.links.clone()).collect();
            assert_eq!(got, brute_force(&t, s, d, 12), "pair ({s},{d})");
        }
    }

    #[test]
    fn first_path_is_bfs_shortest_and_paths_reconstruct() {
        let t = resolve_topology("geant2").unwrap();
        let table = compute_candidate_paths(&t, 4);
        for s in 0..t.node_count() {
            let hops = t.bfs_hops(s);
            for d in (0..t.node_count()).filter(|&d| d != s) {
                let paths = table.paths(s, d);
                assert_eq!(Some(paths[0].hops()), hops[d]);
                for p in paths {
                    let mut at = s;
                    let mut visited = vec![at];
                    for &l in &p.links {
                        let link = t.link(l);
                        assert!(link.touches(at));
                        at = link.other(at);
                        assert!(!visited.contains(&at));
                        visited.push(at);
                    }
                    assert_eq!(at, d);
                    assert_eq!(visited, p.nodes);
                }
                assert!(paths.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn deterministic_text_dump() {
        let t = resolve_topology("nsfnet").unwrap();
        assert_eq!(
            compute_candidate_paths(&t, 4).to_text(),
            compute_candidate_paths(&t, 4).to_text()
        );
    }

    mod props {
        use super::*;
        use crate::topology::Link;
        use proptest::prelude::*;

        fn connected_graph() -> impl Strategy<Value = Topology> {
            (3usize..8).prop_flat_map(|n| {
                let extra = proptest::collection::vec((0..n, 0..n), 0..10);
                (Just(n), proptest::collection::vec(any::<u64>(), n - 1), extra).prop_map(
                    |(n, tree, extra)| {
                        let mut edges = std::collections::BTreeSet::new();
                        for (v, r) in tree.iter().enumerate() {
                            let child = v + 1;
                            let parent = (*r as usize) % child;
                            edges.insert((parent, child));
                        }
                        for (a, b) in extra {
                            if a != b {
                                edges.insert((a.min(b), a.max(b)));
                            }
                        }
                        let links = edges
                            .into_iter()
                            .map(|(a, b)| Link { a, b, capacity: 1.0 })
                            .collect();
                        Topology::new("rand", n, links).unwrap()
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn yen_agrees_with_enumeration(t in connected_graph(), k in 1usize..7) {
                for s in 0..t.node_count() {
                    for d in 0..t.node_count() {
                        if s == d { continue; }
                        let got: Vec<Vec<LinkId>> =
                            k_shortest_paths(&t, s, d, k).iter().map(|p| p.links.clone()).collect();
                        prop_assert_eq!(got, brute_force(&t, s, d, k));
                    }
                }
            }
        }
    }
}
