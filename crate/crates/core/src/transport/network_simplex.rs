//! Primal network simplex for the dense transportation problem.
//!
//! The spanning-tree bookkeeping follows the classic formulation with an
//! artificial root: every node starts as a child of the root through an
//! artificial arc, which yields a strongly feasible initial tree. Leaving arcs
//! are chosen with the strongly-feasible-tree rule (strict comparison on the
//! first side of the cycle, non-strict on the second), which prevents cycling
//! under degenerate pivots. Entering arcs come from block-search pricing.

/// Result of a solve on a dense cost matrix.
#[derive(Debug, Clone)]
pub(crate) struct SimplexSolution {
    /// Row-major n×m flows on the real arcs.
    pub flow: Vec<f64>,
    /// Node potentials; reduced cost of arc (i, j) is c_ij + pi_i - pi_{n+j}.
    pub pi: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SimplexFailure {
    IterationLimit(usize),
    Unbounded,
}

const UP: i8 = 1;
const DOWN: i8 = -1;

struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// UP: pred arc goes from the node to its parent; DOWN: from parent to node.
    pred_dir: Vec<i8>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    child_pos: Vec<usize>,
}

impl Tree {
    fn detach(&mut self, u: usize) {
        let p = self.parent[u];
        let pos = self.child_pos[u];
        let last = self.children[p].pop().expect("child list cannot be empty");
        if last != u {
            self.children[p][pos] = last;
            self.child_pos[last] = pos;
        }
    }

    fn attach(&mut self, u: usize, p: usize) {
        self.parent[u] = p;
        self.child_pos[u] = self.children[p].len();
        self.children[p].push(u);
    }
}

/// Solves min Σ c_ij x_ij subject to Σ_j x_ij = supply_i, Σ_i x_ij = demand_j,
/// x ≥ 0. Totals must agree up to rounding.
pub(crate) fn solve(
    supply: &[f64],
    demand: &[f64],
    cost: &[f64],
    max_iterations: usize,
) -> Result<SimplexSolution, SimplexFailure> {
    let n = supply.len();
    let m = demand.len();
    let real_arcs = n * m;
    let node_count = n + m + 1;
    let root = n + m;
    debug_assert_eq!(cost.len(), real_arcs);

    let max_cost = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    let art_cost = (max_cost + 1.0) * (n + m) as f64;
    // Potentials reach magnitude ~art_cost, so reduced costs carry absolute
    // rounding error of a few ulps of art_cost.
    let tol = 64.0 * f64::EPSILON * art_cost;

    let mut flow = vec![0.0; real_arcs + n + m];
    let mut in_tree = vec![false; real_arcs];
    let mut art_arc_cost = vec![0.0; n + m];
    let mut pi = vec![0.0; node_count];
    let mut tree = Tree {
        parent: vec![root; node_count],
        pred: vec![usize::MAX; node_count],
        pred_dir: vec![UP; node_count],
        depth: vec![1; node_count],
        children: vec![Vec::new(); node_count],
        child_pos: vec![0; node_count],
    };
    tree.depth[root] = 0;
    tree.children[root] = (0..n + m).collect();
    for u in 0..n + m {
        tree.child_pos[u] = u;
        tree.pred[u] = real_arcs + u;
        if u < n {
            flow[real_arcs + u] = supply[u];
            tree.pred_dir[u] = UP;
        } else {
            art_arc_cost[u] = art_cost;
            flow[real_arcs + u] = demand[u - n];
            tree.pred_dir[u] = DOWN;
            pi[u] = art_cost;
        }
    }

    let arc_cost = |a: usize| if a < real_arcs { cost[a] } else { art_arc_cost[a - real_arcs] };

    let block = ((real_arcs as f64).sqrt().ceil() as usize).max(10).min(real_arcs.max(1));
    let mut next_arc = 0usize;
    let mut iterations = 0usize;
    let mut stack: Vec<usize> = Vec::new();
    let mut path: Vec<usize> = Vec::new();

    loop {
        // Block-search pricing over the real arcs.
        let mut best = -tol;
        let mut entering = usize::MAX;
        let mut left_in_block = block;
        let mut a = next_arc;
        for _ in 0..real_arcs {
            if !in_tree[a] {
                let (i, j) = (a / m, n + a % m);
                let r = cost[a] + pi[i] - pi[j];
                if r < best {
                    best = r;
                    entering = a;
                }
            }
            a += 1;
            if a == real_arcs {
                a = 0;
            }
            left_in_block -= 1;
            if left_in_block == 0 {
                if entering != usize::MAX {
                    break;
                }
                left_in_block = block;
            }
        }
        if entering == usize::MAX {
            break;
        }
        next_arc = a;
        iterations += 1;
        if iterations > max_iterations {
            return Err(SimplexFailure::IterationLimit(max_iterations));
        }

        let first = entering / m;
        let second = n + entering % m;

        // Join node of the cycle.
        let (mut u, mut v) = (first, second);
        while u != v {
            if tree.depth[u] > tree.depth[v] {
                u = tree.parent[u];
            } else if tree.depth[v] > tree.depth[u] {
                v = tree.parent[v];
            } else {
                u = tree.parent[u];
                v = tree.parent[v];
            }
        }
        let join = u;

        // Leaving arc: strict on the first side, non-strict on the second.
        let mut delta = f64::INFINITY;
        let mut u_out = usize::MAX;
        let mut out_on_first = true;
        let mut w = first;
        while w != join {
            if tree.pred_dir[w] == UP {
                let d = flow[tree.pred[w]];
                if d < delta {
                    delta = d;
                    u_out = w;
                }
            }
            w = tree.parent[w];
        }
        let mut w = second;
        while w != join {
            if tree.pred_dir[w] == DOWN {
                let d = flow[tree.pred[w]];
                if d <= delta {
                    delta = d;
                    u_out = w;
                    out_on_first = false;
                }
            }
            w = tree.parent[w];
        }
        if u_out == usize::MAX {
            return Err(SimplexFailure::Unbounded);
        }

        // Augment along the cycle.
        if delta > 0.0 {
            flow[entering] += delta;
            let mut w = first;
            while w != join {
                let e = tree.pred[w];
                if tree.pred_dir[w] == UP {
                    flow[e] -= delta;
                } else {
                    flow[e] += delta;
                }
                w = tree.parent[w];
            }
            let mut w = second;
            while w != join {
                let e = tree.pred[w];
                if tree.pred_dir[w] == UP {
                    flow[e] += delta;
                } else {
                    flow[e] -= delta;
                }
                w = tree.parent[w];
            }
        }
        let leaving = tree.pred[u_out];
        flow[leaving] = 0.0;
        if leaving < real_arcs {
            in_tree[leaving] = false;
        }
        in_tree[entering] = true;

        // Re-hang the subtree below the leaving arc from the entering arc.
        let (u_in, v_in) = if out_on_first { (first, second) } else { (second, first) };
        path.clear();
        let mut w = u_in;
        loop {
            path.push(w);
            if w == u_out {
                break;
            }
            w = tree.parent[w];
        }
        for &node in &path {
            tree.detach(node);
        }
        for k in (0..path.len() - 1).rev() {
            let (child, new_parent) = (path[k + 1], path[k]);
            tree.pred[child] = tree.pred[new_parent];
            tree.pred_dir[child] = -tree.pred_dir[new_parent];
            tree.attach(child, new_parent);
        }
        tree.pred[u_in] = entering;
        tree.pred_dir[u_in] = if u_in == first { UP } else { DOWN };
        tree.attach(u_in, v_in);

        // Shift potentials of the moved subtree so the entering arc has zero
        // reduced cost, and refresh depths.
        let (s, t) = (first, second);
        let shift = if u_in == s {
            // c + pi_s' - pi_t = 0
            pi[t] - cost[entering] - pi[s]
        } else {
            cost[entering] + pi[s] - pi[t]
        };
        stack.clear();
        stack.push(u_in);
        while let Some(x) = stack.pop() {
            pi[x] += shift;
            tree.depth[x] = tree.depth[tree.parent[x]] + 1;
            stack.extend_from_slice(&tree.children[x]);
        }
        // Incremental shifts accumulate rounding; refresh from the tree now and then.
        if iterations.is_multiple_of(n + m) {
            recompute_potentials(&tree, &mut pi, root, &arc_cost);
        }
    }

    recompute_potentials(&tree, &mut pi, root, &arc_cost);
    flow.truncate(real_arcs);
    Ok(SimplexSolution { flow, pi, iterations })
}

/// Potentials making every tree arc tight, with pi(root) = 0.
fn recompute_potentials<F: Fn(usize) -> f64>(tree: &Tree, pi: &mut [f64], root: usize, arc_cost: &F) {
    pi[root] = 0.0;
    let mut stack = tree.children[root].clone();
    while let Some(x) = stack.pop() {
        let p = tree.parent[x];
        let c = arc_cost(tree.pred[x]);
        pi[x] = if tree.pred_dir[x] == UP { pi[p] - c } else { pi[p] + c };
        stack.extend_from_slice(&tree.children[x]);
    }
}
