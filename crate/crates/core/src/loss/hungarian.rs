use crate::error::{Error, Result};

/// Assignment of group tokens to ground-truth groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    token_of_group: Vec<usize>,
    group_of_token: Vec<Option<usize>>,
}

impl Matching {
    /// `token_of_group[g]` is the token matched to group `g`.
    pub fn new(tokens: usize, token_of_group: Vec<usize>) -> Result<Self> {
        let mut group_of_token = vec![None; tokens];
        for (g, &t) in token_of_group.iter().enumerate() {
            match group_of_token.get_mut(t) {
                Some(slot @ None) => *slot = Some(g),
                Some(Some(_)) => return Err(Error::Validation(format!("token {t} matched twice"))),
                None => return Err(Error::Index { what: "token", index: t, len: tokens }),
            }
        }
        Ok(Matching { token_of_group, group_of_token })
    }

    pub fn num_tokens(&self) -> usize {
        self.group_of_token.len()
    }

    pub fn num_groups(&self) -> usize {
        self.token_of_group.len()
    }

    pub fn token_of_group(&self) -> &[usize] {
        &self.token_of_group
    }

    pub fn group_of_token(&self) -> &[Option<usize>] {
        &self.group_of_token
    }

    /// `(token, group)` pairs sorted by token.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.group_of_token.iter().enumerate().filter_map(|(t, g)| g.map(|g| (t, g))).collect()
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.token_of_group.iter().enumerate().map(|(g, &t)| cost[t][g]).sum()
    }
}

fn tie_tolerance(best: f64) -> f64 {
    1e-9 * best.abs().max(1.0)
}

/// Minimum-cost assignment of every column (group) of a `K x G` cost matrix to
/// a distinct row (token). Among optimal assignments the one whose
/// token-sorted `(token, group)` list is lexicographically smallest wins.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let k = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != g) {
        return Err(Error::Validation("ragged cost matrix".into()));
    }
    if g > k {
        return Err(Error::Infeasible { tokens: k, groups: g });
    }
    if let Some(x) = cost.iter().flatten().find(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("non-finite matching cost {x}")));
    }
    if g == 0 {
        return Matching::new(k, vec![]);
    }
    let all_tokens: Vec<usize> = (0..k).collect();
    let all_groups: Vec<usize> = (0..g).collect();
    let best = solve(cost, &all_tokens, &all_groups).0;
    let tol = tie_tolerance(best);

    // fix tokens in index order, each to the smallest group (or none) that
    // still admits an optimal completion
    let mut token_of_group = vec![usize::MAX; g];
    let mut fixed = 0.0;
    let mut open: Vec<usize> = all_groups;
    for t in 0..k {
        if open.is_empty() {
            break;
        }
        let rest: Vec<usize> = (t + 1..k).collect();
        let mut chosen = None;
        for (i, &grp) in open.iter().enumerate() {
            let mut remaining = open.clone();
            remaining.remove(i);
            if remaining.len() > rest.len() {
                continue;
            }
            let c = fixed + cost[t][grp] + solve(cost, &rest, &remaining).0;
            if c <= best + tol {
                chosen = Some(i);
                break;
            }
        }
        if let Some(i) = chosen {
            let grp = open.remove(i);
            fixed += cost[t][grp];
            token_of_group[grp] = t;
        }
    }
    if !open.is_empty() {
        return Err(Error::Internal("tie-breaking left groups unmatched".into()));
    }
    Matching::new(k, token_of_group)
}

/// Optimal cost of assigning every group in `groups` to a distinct token in
/// `tokens`, via shortest augmenting paths. Returns `(cost, token per group)`.
fn solve(cost: &[Vec<f64>], tokens: &[usize], groups: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (groups.len(), tokens.len());
    if n == 0 {
        return (0.0, vec![]);
    }
    let a = |i: usize, j: usize| cost[tokens[j - 1]][groups[i - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = tokens[j - 1];
        }
    }
    let total = assign.iter().enumerate().map(|(i, &t)| cost[t][groups[i]]).sum();
    (total, assign)
}

/// Exhaustive reference: every injection of groups into tokens, same
/// tie-breaking rule. Exponential; for verification only.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Result<Matching> {
    let k = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    if g > k {
        return Err(Error::Infeasible { tokens: k, groups: g });
    }
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(g);
    let mut used = vec![false; k];
    enumerate(k, g, &mut current, &mut used, &mut all);
    let costs: Vec<f64> =
        all.iter().map(|tog: &Vec<usize>| tog.iter().enumerate().map(|(gi, &t)| cost[t][gi]).sum()).collect();
    let best = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = tie_tolerance(best);
    let winner = all
        .into_iter()
        .zip(costs)
        .filter(|(_, c)| *c <= best + tol)
        .map(|(tog, _)| Matching::new(k, tog).expect("injective"))
        .min_by(|a, b| a.pairs().cmp(&b.pairs()))
        .expect("at least one assignment");
    Ok(winner)
}

fn enumerate(k: usize, g: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
    if current.len() == g {
        out.push(current.clone());
        return;
    }
    for t in 0..k {
        if !used[t] {
            used[t] = true;
            current.push(t);
            enumerate(k, g, current, used, out);
            current.pop();
            used[t] = false;
        }
    }
}
