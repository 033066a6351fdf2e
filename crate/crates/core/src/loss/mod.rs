//! Set matching and the training objective.

mod hungarian;

pub use hungarian::{brute_force_assignment, hungarian, Matching};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::scene::{SceneClip, Taxonomy};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub group: f64,
    pub membership: f64,
    pub consistency: f64,
    pub act: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { group: 2.0, membership: 5.0, consistency: 2.0, act: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.group, self.membership, self.consistency, self.act];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

fn softmax_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// `K x G` matching cost: class NLL of the group's activity plus
/// `mu * (1 - soft IoU)` between the token's membership column and the
/// group's member set.
pub fn matching_cost(
    group_logits: &Tensor<f64>,
    membership_logits: &Tensor<f64>,
    clip: &SceneClip,
    mu: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = group_logits.rows();
    let a = clip.actors.len();
    if membership_logits.rows() != a || membership_logits.cols() != k + 1 {
        return Err(Error::dim("matching cost", &[a, k + 1], membership_logits.shape()));
    }
    let cls = softmax_rows(group_logits);
    let mem = softmax_rows(membership_logits);
    let group_of = clip.group_of_actors();
    let mut cost = vec![vec![0.0; clip.groups.len()]; k];
    for (t, row) in cost.iter_mut().enumerate() {
        let col_total: f64 = mem.iter().map(|r| r[t]).sum();
        for (gi, grp) in clip.groups.iter().enumerate() {
            let inside: f64 = (0..a).filter(|&i| group_of[i] == Some(gi)).map(|i| mem[i][t]).sum();
            let union = grp.member_ids.len() as f64 + col_total - inside;
            let soft_iou = if union > 0.0 { inside / union } else { 0.0 };
            let nll = -cls[t][grp.activity].max(f64::MIN_POSITIVE).ln();
            row[gi] = nll + mu * (1.0 - soft_iou);
        }
    }
    Ok(cost)
}

/// Mean CE over tokens: matched tokens target their group's activity, the
/// rest the trailing no-group class.
pub fn group_activity_loss<S: Scalar>(
    g: &mut Graph<S>,
    group_logits: Var,
    matching: &Matching,
    clip: &SceneClip,
) -> Result<Var> {
    let none = g.value(group_logits).cols() - 1;
    let targets: Vec<usize> =
        matching.group_of_token().iter().map(|m| m.map_or(none, |gi| clip.groups[gi].activity)).collect();
    g.tape.cross_entropy(group_logits, &targets)
}

/// Membership target per actor: the matched token of its group, or the
/// outlier slot `K`.
pub fn membership_targets(matching: &Matching, clip: &SceneClip) -> Result<Vec<usize>> {
    let k = matching.num_tokens();
    clip.group_of_actors()
        .iter()
        .zip(&clip.actors)
        .map(|(grp, actor)| match grp {
            Some(gi) => Ok(matching.token_of_group()[*gi]),
            None if clip.outlier_actor_ids.contains(&actor.actor_id) => Ok(k),
            None => Err(Error::Validation(format!(
                "clip {}: actor {} is neither grouped nor an outlier",
                clip.clip_id, actor.actor_id
            ))),
        })
        .collect()
}

/// Mean CE over actors across the `K + 1` membership slots.
pub fn membership_loss<S: Scalar>(
    g: &mut Graph<S>,
    membership_logits: Var,
    matching: &Matching,
    clip: &SceneClip,
) -> Result<Var> {
    let targets = membership_targets(matching, clip)?;
    g.tape.cross_entropy(membership_logits, &targets)
}

/// Mean over matched groups of the mean squared difference between the group
/// token's feature and the mean feature of the group's members.
pub fn consistency_loss<S: Scalar>(
    g: &mut Graph<S>,
    v_a: Var,
    v_g: Var,
    matching: &Matching,
    clip: &SceneClip,
) -> Result<Var> {
    let d = g.value(v_g).cols();
    let mut terms = Vec::with_capacity(clip.groups.len());
    for (gi, grp) in clip.groups.iter().enumerate() {
        let rows: Vec<usize> = grp
            .member_ids
            .iter()
            .map(|&id| {
                clip.actor_index(id)
                    .ok_or_else(|| Error::Validation(format!("clip {}: unknown member {id}", clip.clip_id)))
            })
            .collect::<Result<_>>()?;
        let members = g.tape.gather_rows(v_a, &rows)?;
        let centre = g.tape.mean_rows(members);
        let token = g.tape.gather_rows(v_g, &[matching.token_of_group()[gi]])?;
        let diff = g.tape.sub(token, centre)?;
        let sq = g.tape.mul(diff, diff)?;
        let s = g.tape.sum(sq);
        terms.push(g.tape.scale(s, S::lit(1.0 / d as f64)));
    }
    if terms.is_empty() {
        return Ok(g.input(Tensor::scalar(S::zero())));
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.tape.add(total, t)?;
    }
    Ok(g.tape.scale(total, S::lit(1.0 / n as f64)))
}

/// Mean CE over actors against their individual actions.
pub fn individual_action_loss<S: Scalar>(g: &mut Graph<S>, action_logits: Var, clip: &SceneClip) -> Result<Var> {
    let targets: Vec<usize> = clip.actors.iter().map(|a| a.individual_action).collect();
    g.tape.cross_entropy(action_logits, &targets)
}

/// Multi-label BCE of the activity logits against the clip's multi-hot label.
pub fn act_multilabel_loss<S: Scalar>(g: &mut Graph<S>, z: Var, y: &[f64]) -> Result<Var> {
    let y: Vec<S> = y.iter().map(|&v| S::lit(v)).collect();
    g.tape.bce_with_logits(z, &y)
}

/// Multi-hot label: one per group activity present, plus the outlier entry.
pub fn multi_hot(clip: &SceneClip, taxonomy: &Taxonomy) -> Vec<f64> {
    clip.multi_hot(taxonomy)
}

/// Individual loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ind: Var,
    pub group: Var,
    pub membership: Var,
    pub consistency: Var,
    pub act: Var,
    pub nll: Option<Var>,
}

/// `ind + wg*group + wm*membership + wc*consistency + wa*act (+ nll)`,
/// accumulated left to right.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut total = parts.ind;
    for (v, wt) in [
        (parts.group, w.group),
        (parts.membership, w.membership),
        (parts.consistency, w.consistency),
        (parts.act, w.act),
    ] {
        let s = g.tape.scale(v, S::lit(wt));
        total = g.tape.add(total, s)?;
    }
    if let Some(n) = parts.nll {
        total = g.tape.add(total, n)?;
    }
    Ok(total)
}

/// Scalar values of every term, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ind: f64,
    pub group: f64,
    pub membership: f64,
    pub consistency: f64,
    pub act: f64,
    pub nll: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<S: Scalar>(g: &Graph<S>, parts: &LossParts, total: Var) -> Self {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            ind: v(parts.ind),
            group: v(parts.group),
            membership: v(parts.membership),
            consistency: v(parts.consistency),
            act: v(parts.act),
            nll: parts.nll.map_or(0.0, v),
            total: v(total),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ind, self.group, self.membership, self.consistency, self.act, self.nll, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, o: &LossValues) {
        self.ind += o.ind;
        self.group += o.group;
        self.membership += o.membership;
        self.consistency += o.consistency;
        self.act += o.act;
        self.nll += o.nll;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> LossValues {
        LossValues {
            ind: self.ind * c,
            group: self.group * c,
            membership: self.membership * c,
            consistency: self.consistency * c,
            act: self.act * c,
            nll: self.nll * c,
            total: self.total * c,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;
    use crate::scene::{ActorTrack, BBox, GroupGt};

    fn lse(row: &[f64]) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    fn ce(row: &[f64], t: usize) -> f64 {
        lse(row) - row[t]
    }

    fn actor(id: u32, action: usize) -> ActorTrack {
        ActorTrack { actor_id: id, boxes: vec![BBox { x1: 0.1, y1: 0.1, x2: 0.2, y2: 0.3 }], individual_action: action }
    }

    /// Actors 0,1 in one `Eating` group, actor 2 an outlier.
    fn clip3() -> SceneClip {
        SceneClip {
            clip_id: "c".into(),
            frames: 1,
            actors: vec![actor(0, 2), actor(1, 2), actor(2, 6)],
            groups: vec![GroupGt { member_ids: BTreeSet::from([0, 1]), activity: 2 }],
            outlier_actor_ids: BTreeSet::from([2]),
        }
    }

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn group_loss_oracles() {
        let s = store();
        let clip = clip3();
        let m = Matching::new(2, vec![1]).unwrap();
        let mut g = Graph::new(&s);
        let uniform = g.input(Tensor::zeros(&[2, 7]));
        let l = group_activity_loss(&mut g, uniform, &m, &clip).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let rows = vec![vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.5, -0.2], vec![1.0, 0.0, -0.5, 0.2, 0.1, 0.0, 0.7]];
        let logits = g.input(Tensor::from_rows(&rows).unwrap());
        let l = group_activity_loss(&mut g, logits, &m, &clip).unwrap();
        // token 0 unmatched -> no-group (6); token 1 -> Eating (2)
        let expected = (ce(&rows[0], 6) + ce(&rows[1], 2)) / 2.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let mut perfect = vec![vec![-50.0; 7]; 2];
        perfect[0][6] = 50.0;
        perfect[1][2] = 50.0;
        let p = g.input(Tensor::from_rows(&perfect).unwrap());
        let l = group_activity_loss(&mut g, p, &m, &clip).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn membership_loss_oracles() {
        let s = store();
        let clip = clip3();
        let m = Matching::new(3, vec![2]).unwrap();
        assert_eq!(membership_targets(&m, &clip).unwrap(), vec![2, 2, 3]);
        let mut g = Graph::new(&s);
        let uniform = g.input(Tensor::zeros(&[3, 4]));
        let l = membership_loss(&mut g, uniform, &m, &clip).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let rows = vec![vec![0.1, 0.2, 1.0, -1.0], vec![0.0, 0.0, 0.0, 2.0], vec![-0.5, 0.3, 0.9, 0.4]];
        let v = g.input(Tensor::from_rows(&rows).unwrap());
        let l = membership_loss(&mut g, v, &m, &clip).unwrap();
        let expected = (ce(&rows[0], 2) + ce(&rows[1], 2) + ce(&rows[2], 3)) / 3.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let mut bad = clip3();
        bad.outlier_actor_ids.clear();
        assert!(matches!(membership_targets(&m, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn consistency_oracles() {
        let s = store();
        let mut clip = clip3();
        clip.groups.push(GroupGt { member_ids: BTreeSet::from([2]), activity: 4 });
        clip.outlier_actor_ids.clear();
        let va = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![-1.0, 1.0]];
        let vg = vec![vec![0.0, 0.0], vec![2.0, 1.0], vec![0.5, 0.5]];
        let m = Matching::new(3, vec![1, 2]).unwrap();
        let mut g = Graph::new(&s);
        let (a, gv) = (g.input(Tensor::from_rows(&va).unwrap()), g.input(Tensor::from_rows(&vg).unwrap()));
        let l = consistency_loss(&mut g, a, gv, &m, &clip).unwrap();
        // group 0: mean (2,1) vs token 1 (2,1) -> 0; group 1: (-1,1) vs (0.5,0.5) -> (2.25+0.25)/2
        assert!((g.value(l).item() - (0.0 + 1.25) / 2.0).abs() < 1e-12);

        let m1 = Matching::new(3, vec![1]).unwrap();
        let l = consistency_loss(&mut g, a, gv, &m1, &clip3()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut lonely = clip3();
        lonely.groups.clear();
        lonely.outlier_actor_ids = BTreeSet::from([0, 1, 2]);
        let l = consistency_loss(&mut g, a, gv, &Matching::new(3, vec![]).unwrap(), &lonely).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn individual_action_oracles() {
        let s = store();
        let mut clip = clip3();
        clip.actors.truncate(2);
        clip.actors[1].individual_action = 5;
        let rows = vec![vec![0.2, 0.1, 0.0, 1.0, -1.0, 0.3, 0.4], vec![0.0, 0.5, 0.5, 0.0, 0.0, 2.0, 0.1]];
        let mut g = Graph::new(&s);
        let v = g.input(Tensor::from_rows(&rows).unwrap());
        let l = individual_action_loss(&mut g, v, &clip).unwrap();
        assert!((g.value(l).item() - (ce(&rows[0], 2) + ce(&rows[1], 5)) / 2.0).abs() < 1e-12);
        let u = g.input(Tensor::zeros(&[2, 7]));
        let l = individual_action_loss(&mut g, u, &clip).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn multilabel_loss() {
        let s = store();
        let tax = Taxonomy::default();
        let mut clip = clip3();
        let studying = tax.activities.iter().position(|a| a == "Studying").unwrap();
        clip.groups[0].activity = studying;
        let y = multi_hot(&clip, &tax);
        let mut expect = vec![0.0; 7];
        expect[studying] = 1.0;
        expect[tax.outlier_id()] = 1.0;
        assert_eq!(y, expect);

        let mut g = Graph::new(&s);
        let z0 = g.input(Tensor::zeros(&[1, 7]));
        let l = act_multilabel_loss(&mut g, z0, &y).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let z: Vec<f64> = (0..7).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let y: Vec<f64> = (0..7).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
            let zv = g.input(Tensor::matrix(1, 7, z.clone()).unwrap());
            let l = act_multilabel_loss(&mut g, zv, &y).unwrap();
            let direct: f64 = z
                .iter()
                .zip(&y)
                .map(|(&z, &y)| {
                    let s = 1.0 / (1.0 + (-z).exp());
                    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / 7.0;
            assert!((g.value(l).item() - direct).abs() < 1e-12);
        }
        let short = g.input(Tensor::zeros(&[1, 6]));
        assert!(matches!(act_multilabel_loss(&mut g, short, &y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let s = store();
        let w = LossWeights::default();
        assert_eq!((w.group, w.membership, w.consistency, w.act), (2.0, 5.0, 2.0, 2.0));
        let mut g = Graph::new(&s);
        let mut mk = |x: f64| g.input(Tensor::scalar(x));
        let ones = LossParts {
            ind: mk(1.0),
            group: mk(1.0),
            membership: mk(1.0),
            consistency: mk(1.0),
            act: mk(1.0),
            nll: None,
        };
        let t = total_loss(&mut g, &ones, &w).unwrap();
        assert_eq!(g.value(t).item(), 12.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..10.0)).collect();
            let parts = LossParts {
                ind: g.input(Tensor::scalar(v[0])),
                group: g.input(Tensor::scalar(v[1])),
                membership: g.input(Tensor::scalar(v[2])),
                consistency: g.input(Tensor::scalar(v[3])),
                act: g.input(Tensor::scalar(v[4])),
                nll: None,
            };
            let t = total_loss(&mut g, &parts, &w).unwrap();
            let expected = v[0] + 2.0 * v[1] + 5.0 * v[2] + 2.0 * v[3] + 2.0 * v[4];
            assert_eq!(g.value(t).item().to_bits(), expected.to_bits());
        }
        assert!(LossWeights { act: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn matching_cost_prefers_the_right_token() {
        let clip = clip3();
        let mut gl = Tensor::zeros(&[3, 7]);
        gl.data_mut()[7 + 2] = 5.0;
        let mut ml = Tensor::zeros(&[3, 4]);
        for (r, c) in [(0, 1), (1, 1), (2, 3)] {
            ml.data_mut()[r * 4 + c] = 8.0;
        }
        let cost = matching_cost(&gl, &ml, &clip, 1.0).unwrap();
        assert_eq!(cost.len(), 3);
        assert!(cost[1][0] < cost[0][0] && cost[1][0] < cost[2][0]);
        assert!(cost.iter().flatten().all(|c| c.is_finite() && *c >= 0.0));
        assert_eq!(hungarian(&cost).unwrap().token_of_group(), &[1]);
    }
}
