//! Exact maximum clique search.
//!
//! Branch and bound over bitsets with a greedy-colouring bound, vertices
//! ordered by core number and pruned by degeneracy. A second pass picks the
//! lexicographically smallest clique among all maximum ones so that the
//! answer does not depend on search order.

/// Undirected simple graph stored as adjacency bitsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    words: usize,
    adj: Vec<u64>,
}

fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

fn set_bit(bits: &mut [u64], i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

fn clear_bit(bits: &mut [u64], i: usize) {
    bits[i / 64] &= !(1 << (i % 64));
}

fn test_bit(bits: &[u64], i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

fn first_bit(bits: &[u64]) -> Option<usize> {
    bits.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

fn popcount(bits: &[u64]) -> usize {
    bits.iter().map(|w| w.count_ones() as usize).sum()
}

fn iter_bits(bits: &[u64]) -> impl Iterator<Item = usize> + '_ {
    bits.iter().enumerate().flat_map(|(wi, &w)| {
        let mut w = w;
        std::iter::from_fn(move || {
            (w != 0).then(|| {
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                wi * 64 + b
            })
        })
    })
}

impl Graph {
    pub fn new(n: usize) -> Self {
        let words = words_for(n);
        Self {
            n,
            words,
            adj: vec![0; n * words],
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut g = Self::new(n);
        for (i, j) in edges {
            g.add_edge(i, j);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Self-loops are ignored.
    pub fn add_edge(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        let w = self.words;
        set_bit(&mut self.adj[i * w..(i + 1) * w], j);
        set_bit(&mut self.adj[j * w..(j + 1) * w], i);
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        test_bit(self.row(i), j)
    }

    pub fn degree(&self, i: usize) -> usize {
        popcount(self.row(i))
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).sum::<usize>() / 2
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.adj[i * self.words..(i + 1) * self.words]
    }

    pub fn is_clique(&self, vertices: &[usize]) -> bool {
        vertices
            .iter()
            .enumerate()
            .all(|(a, &u)| vertices[a + 1..].iter().all(|&v| u != v && self.has_edge(u, v)))
    }
}

/// Core numbers of the subgraph induced by `allowed` (0 for excluded
/// vertices), by repeated removal of a minimum-degree vertex.
pub fn core_numbers(g: &Graph, allowed: &[bool]) -> Vec<usize> {
    let n = g.len();
    let mut mask = vec![0u64; g.words];
    for v in (0..n).filter(|&v| allowed[v]) {
        set_bit(&mut mask, v);
    }
    let mut degree: Vec<usize> = (0..n)
        .map(|v| {
            if allowed[v] {
                g.row(v).iter().zip(&mask).map(|(a, b)| (a & b).count_ones() as usize).sum()
            } else {
                0
            }
        })
        .collect();
    let mut removed: Vec<bool> = allowed.iter().map(|a| !a).collect();
    let mut core = vec![0usize; n];
    let mut current = 0usize;
    // Bucket queue keyed by current degree.
    let max_deg = degree.iter().copied().max().unwrap_or(0);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); max_deg + 1];
    for v in (0..n).filter(|&v| allowed[v]) {
        buckets[degree[v]].push(v);
    }
    let mut d = 0usize;
    let mut remaining = allowed.iter().filter(|a| **a).count();
    while remaining > 0 {
        while buckets[d].is_empty() {
            d += 1;
        }
        let v = buckets[d].pop().unwrap();
        if removed[v] || degree[v] != d {
            continue;
        }
        removed[v] = true;
        remaining -= 1;
        current = current.max(d);
        core[v] = current;
        for u in iter_bits(g.row(v)) {
            if !removed[u] && degree[u] > 0 {
                degree[u] -= 1;
                buckets[degree[u]].push(u);
                if degree[u] < d {
                    d = degree[u];
                }
            }
        }
    }
    core
}

/// Search state over a renumbered copy of the graph.
struct Search {
    words: usize,
    adj: Vec<u64>,
    best: Vec<usize>,
    best_len: usize,
    /// Stop as soon as a clique longer than `best_len` is found.
    decision: bool,
    found: bool,
}

impl Search {
    fn row(&self, v: usize) -> &[u64] {
        &self.adj[v * self.words..(v + 1) * self.words]
    }

    fn expand(&mut self, clique: &mut Vec<usize>, mut cand: Vec<u64>) {
        // Greedy sequential colouring in bit order.
        let mut order = Vec::new();
        let mut colours = Vec::new();
        let mut uncoloured = cand.clone();
        let mut k = 0usize;
        let mut q = vec![0u64; self.words];
        while first_bit(&uncoloured).is_some() {
            k += 1;
            q.copy_from_slice(&uncoloured);
            while let Some(v) = first_bit(&q) {
                clear_bit(&mut uncoloured, v);
                clear_bit(&mut q, v);
                for (qw, aw) in q.iter_mut().zip(self.row(v)) {
                    *qw &= !aw;
                }
                order.push(v);
                colours.push(k);
            }
        }
        for idx in (0..order.len()).rev() {
            if clique.len() + colours[idx] <= self.best_len {
                return;
            }
            let v = order[idx];
            let next: Vec<u64> = cand.iter().zip(self.row(v)).map(|(c, a)| c & a).collect();
            clique.push(v);
            if first_bit(&next).is_none() {
                if clique.len() > self.best_len {
                    self.best_len = clique.len();
                    self.best = clique.clone();
                    if self.decision {
                        self.found = true;
                    }
                }
            } else {
                self.expand(clique, next);
            }
            clique.pop();
            if self.found {
                return;
            }
            clear_bit(&mut cand, v);
        }
    }
}

/// Maximum clique of `g` restricted to vertices with `allowed[v]`.
///
/// `incumbent` must be a clique; the result is never smaller. Among all
/// maximum cliques the lexicographically smallest sorted vertex list is
/// returned.
pub fn max_clique_within(g: &Graph, allowed: &[bool], incumbent: &[usize]) -> Vec<usize> {
    let n = g.len();
    debug_assert!(g.is_clique(incumbent));
    if n == 0 || !allowed.iter().any(|a| *a) {
        let mut inc = incumbent.to_vec();
        inc.sort_unstable();
        return inc;
    }
    let core = core_numbers(g, allowed);

    // Greedy lower bound along decreasing core number.
    let mut by_core: Vec<usize> = (0..n).filter(|&v| allowed[v]).collect();
    by_core.sort_by(|&a, &b| core[b].cmp(&core[a]).then(g.degree(b).cmp(&g.degree(a))).then(a.cmp(&b)));
    let mut greedy: Vec<usize> = Vec::new();
    for &v in &by_core {
        if greedy.iter().all(|&u| g.has_edge(u, v)) {
            greedy.push(v);
        }
    }
    let lower = greedy.len().max(incumbent.len());

    // A vertex in a clique of size q has core number at least q - 1.
    let keep: Vec<usize> = by_core.iter().copied().filter(|&v| core[v] + 1 >= lower).collect();
    let m = keep.len();
    let words = words_for(m);
    let mut new_of = vec![usize::MAX; n];
    for (i, &v) in keep.iter().enumerate() {
        new_of[v] = i;
    }
    let mut adj = vec![0u64; m * words];
    for (i, &v) in keep.iter().enumerate() {
        for u in iter_bits(g.row(v)) {
            if new_of[u] != usize::MAX {
                set_bit(&mut adj[i * words..(i + 1) * words], new_of[u]);
            }
        }
    }
    let mut search = Search {
        words,
        adj,
        best: Vec::new(),
        best_len: lower,
        decision: false,
        found: false,
    };
    let mut all = vec![0u64; words];
    for i in 0..m {
        set_bit(&mut all, i);
    }
    search.expand(&mut Vec::new(), all.clone());
    let omega = search.best_len;

    lexicographic_clique(&mut search, &keep, &new_of, omega)
}

/// Builds the lexicographically smallest clique of size `omega` one vertex
/// at a time, checking feasibility of each prefix with a decision search.
fn lexicographic_clique(search: &mut Search, keep: &[usize], new_of: &[usize], omega: usize) -> Vec<usize> {
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    let words = search.words;
    let mut cand = vec![0u64; words];
    for &v in &sorted {
        set_bit(&mut cand, new_of[v]);
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut last: Option<usize> = None;
    while chosen.len() < omega {
        let need = omega - chosen.len() - 1;
        let mut picked = false;
        for &v in sorted.iter().filter(|&&v| last.map_or(true, |l| v > l)) {
            let nv = new_of[v];
            if !test_bit(&cand, nv) {
                continue;
            }
            let mut next: Vec<u64> = cand.iter().zip(search.row(nv)).map(|(c, a)| c & a).collect();
            for &u in sorted.iter().take_while(|&&u| u <= v) {
                clear_bit(&mut next, new_of[u]);
            }
            let feasible = need == 0
                || (popcount(&next) >= need && {
                    search.best_len = need - 1;
                    search.decision = true;
                    search.found = false;
                    search.expand(&mut Vec::new(), next.clone());
                    search.found
                });
            if feasible {
                chosen.push(v);
                last = Some(v);
                cand = next;
                picked = true;
                break;
            }
        }
        assert!(picked, "maximum clique of size {omega} vanished during reconstruction");
    }
    chosen
}

/// Maximum clique of the whole graph, seeded with `incumbent`.
pub fn max_clique_bnb(g: &Graph, incumbent: &[usize]) -> Vec<usize> {
    max_clique_within(g, &vec![true; g.len()], incumbent)
}
