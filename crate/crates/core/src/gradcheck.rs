//! Central finite-difference checks of every differentiable tape operation and
//! of the end-to-end objective on a miniature model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::loss::total_loss;
use crate::mdaf::MdafVariant;
use crate::model::{GadModel, ModelConfig, PreparedClip};
use crate::nn::{Graph, ParamStore};
use crate::reasoning::Vocabulary;
use crate::scene::{generate_scene, Featurizer, GeneratorParams};
use crate::tensor::{Mask, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at this step
/// carry roughly 1e-10 absolute rounding noise on O(10) objectives.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Result for one operation or model.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One registered operation: a builder and the input shapes to try.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<Vec<usize>>>,
    build: Build,
}

fn case(
    name: &'static str,
    shapes: Vec<Vec<Vec<usize>>>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase { name, shapes, build: Box::new(build) }
}

fn s(dims: &[usize]) -> Vec<usize> {
    dims.to_vec()
}

/// Every differentiable tape operation with at least three input shapes.
pub fn registered_ops() -> Vec<OpCase> {
    let mats = |pairs: &[(usize, usize)]| pairs.iter().map(|&(m, n)| vec![s(&[m, n])]).collect::<Vec<_>>();
    let pairs = |pairs: &[(usize, usize)]| pairs.iter().map(|&(m, n)| vec![s(&[m, n]), s(&[m, n])]).collect::<Vec<_>>();
    vec![
        case(
            "matmul",
            vec![vec![s(&[2, 3]), s(&[3, 4])], vec![s(&[1, 5]), s(&[5, 1])], vec![s(&[4, 2]), s(&[2, 6])]],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_nt",
            vec![vec![s(&[2, 3]), s(&[4, 3])], vec![s(&[1, 5]), s(&[1, 5])], vec![s(&[5, 2]), s(&[3, 2])]],
            |t, v| t.matmul_nt(v[0], v[1]),
        ),
        case("add", pairs(&[(2, 3), (1, 1), (4, 5)]), |t, v| t.add(v[0], v[1])),
        case("sub", pairs(&[(2, 3), (1, 4), (3, 3)]), |t, v| t.sub(v[0], v[1])),
        case("mul", pairs(&[(2, 3), (1, 4), (5, 2)]), |t, v| t.mul(v[0], v[1])),
        case(
            "add_row",
            vec![vec![s(&[2, 3]), s(&[3])], vec![s(&[1, 4]), s(&[4])], vec![s(&[5, 2]), s(&[2])]],
            |t, v| t.add_row(v[0], v[1]),
        ),
        case("scale", mats(&[(2, 3), (1, 1), (4, 2)]), |t, v| Ok(t.scale(v[0], -1.7))),
        case("gelu", mats(&[(2, 3), (1, 6), (4, 4)]), |t, v| Ok(t.gelu(v[0]))),
        case("softmax_rows", mats(&[(2, 3), (1, 5), (4, 4)]), |t, v| t.softmax_rows(v[0], None)),
        case("softmax_rows_causal", mats(&[(3, 3), (1, 1), (5, 5)]), |t, v| {
            let n = t.value(v[0]).rows();
            t.softmax_rows(v[0], Some(&Mask::causal(n)))
        }),
        case(
            "layer_norm",
            vec![
                vec![s(&[2, 4]), s(&[4]), s(&[4])],
                vec![s(&[1, 3]), s(&[3]), s(&[3])],
                vec![s(&[5, 6]), s(&[6]), s(&[6])],
            ],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        case("slice_cols", mats(&[(2, 5), (1, 3), (4, 6)]), |t, v| {
            let n = t.value(v[0]).cols();
            t.slice_cols(v[0], 1, n - 2)
        }),
        case("slice_rows", mats(&[(4, 2), (3, 3), (6, 1)]), |t, v| {
            let m = t.value(v[0]).rows();
            t.slice_rows(v[0], 1, m - 2)
        }),
        case(
            "concat_cols",
            vec![vec![s(&[2, 3]), s(&[2, 1])], vec![s(&[1, 2]), s(&[1, 2])], vec![s(&[4, 1]), s(&[4, 3])]],
            |t, v| t.concat_cols(v),
        ),
        case(
            "concat_rows",
            vec![vec![s(&[2, 3]), s(&[1, 3])], vec![s(&[1, 2]), s(&[1, 2])], vec![s(&[3, 4]), s(&[2, 4])]],
            |t, v| t.concat_rows(v),
        ),
        case("gather_rows", mats(&[(3, 2), (4, 3), (2, 5)]), |t, v| {
            let m = t.value(v[0]).rows();
            t.gather_rows(v[0], &[m - 1, 0, m - 1, 1])
        }),
        case("sum", mats(&[(2, 3), (1, 1), (3, 4)]), |t, v| Ok(t.sum(v[0]))),
        case("mean", mats(&[(2, 3), (1, 1), (3, 4)]), |t, v| Ok(t.mean(v[0]))),
        case("mean_rows", mats(&[(2, 3), (1, 4), (5, 2)]), |t, v| Ok(t.mean_rows(v[0]))),
        case("cross_entropy", mats(&[(2, 3), (1, 5), (4, 4)]), |t, v| {
            let (m, n) = (t.value(v[0]).rows(), t.value(v[0]).cols());
            let targets: Vec<usize> = (0..m).map(|r| (r * 7 + 1) % n).collect();
            t.cross_entropy(v[0], &targets)
        }),
        case("cross_entropy_with_logits", mats(&[(1, 2), (1, 5), (1, 9)]), |t, v| {
            let n = t.value(v[0]).cols();
            t.cross_entropy_with_logits(v[0], n / 2)
        }),
        case("bce_with_logits", mats(&[(1, 7), (2, 3), (1, 1)]), |t, v| {
            let n = t.value(v[0]).len();
            let y: Vec<f64> = (0..n).map(|i| f64::from((i % 3 == 0) as u8)).collect();
            t.bce_with_logits(v[0], &y)
        }),
        case(
            "attention",
            vec![
                vec![s(&[2, 4]), s(&[3, 4]), s(&[3, 4])],
                vec![s(&[1, 2]), s(&[1, 2]), s(&[1, 2])],
                vec![s(&[4, 6]), s(&[4, 6]), s(&[4, 6])],
            ],
            |t, v| {
                let (q, k) = (t.value(v[0]).rows(), t.value(v[1]).rows());
                let mask = (q == k).then(|| Mask::causal(q));
                let heads = if t.value(v[0]).cols() % 2 == 0 { 2 } else { 1 };
                t.attention(v[0], v[1], v[2], mask.as_ref(), heads)
            },
        ),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(op(inputs) * weights)` for fixed random weights.
fn projected(build: &Build, inputs: &[Tensor<f64>], weights_seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Checks one operation over all its shapes. `corrupt` perturbs the analytic
/// gradient before comparison (negative control).
pub fn check_op(op: &OpCase, seed: u64, corrupt: Option<&dyn Fn(&mut [f64])>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for shapes in &op.shapes {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|sh| random_tensor(&mut rng, sh)).collect();
        let wseed = rng.gen();
        let (mut tape, vars, loss) = projected(&op.build, &inputs, wseed)?;
        tape.backward(loss)?;
        for (i, v) in vars.iter().enumerate() {
            let mut analytic = tape.grad(*v).map_or_else(|| vec![0.0; inputs[i].len()], <[f64]>::to_vec);
            if let Some(c) = corrupt {
                c(&mut analytic);
            }
            for j in 0..inputs[i].len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut moved = inputs.to_vec();
                    moved[i].data_mut()[j] += delta;
                    let (t, _, l) = projected(&op.build, &moved, wseed)?;
                    Ok(t.value(l).item())
                };
                let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(analytic[j], numeric));
                checked += 1;
            }
        }
    }
    Ok(CheckResult { name: op.name.to_string(), max_rel_err: worst, checked })
}

/// Miniature model used by the end-to-end check: `K = 3`, four actors,
/// width 16.
pub fn miniature_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.k = 3;
    cfg.grouping.d_vis = 16;
    cfg.decoder.d_text = 16;
    cfg.decoder.adapter_rank = 2;
    cfg.mdaf_variant = MdafVariant::Sp2;
    cfg.train_reasoning = true;
    cfg
}

pub fn miniature_clip(cfg: &ModelConfig, seed: u64) -> Result<PreparedClip> {
    // one group of three plus one outlier: four actors
    let params = GeneratorParams {
        frames: 2,
        min_groups: 1,
        max_groups: 1,
        min_group_size: 3,
        max_group_size: 3,
        max_outliers: 1,
        outlier_prob: 1.0,
        max_groups_bound: cfg.k,
        ..Default::default()
    };
    let clip = generate_scene(seed, &params)?;
    let f = Featurizer::new(seed, cfg.grouping.d_vis, 0.1, &cfg.taxonomy)?;
    PreparedClip::new(clip, &f, &Vocabulary::new(cfg.k), &cfg.taxonomy)
}

/// End-to-end check of the total objective with respect to every trainable
/// tensor, sampling up to `per_tensor` entries of each. Zero-initialised
/// weights are first replaced by small random values so gradients reach
/// every path; the matching is computed once and held fixed.
pub fn check_model(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let mut store = ParamStore::<f64>::new();
    let model = GadModel::new(cfg, &mut store, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let zero: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable && !p.name.ends_with(".bias") && p.value.data().iter().all(|&x| x == 0.0))
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in zero {
        let shape = store.get(store.id(&name).expect("name")).value.shape().to_vec();
        let t = random_tensor(&mut rng, &shape).map(|x| 0.2 * x);
        store.assign(&name, t)?;
    }
    let prep = miniature_clip(cfg, seed)?;
    let matching = {
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &prep, None)?;
        model.match_groups(&out.heads.values(&g), &prep.clip)?
    };
    let objective = |store: &ParamStore<f64>| -> Result<(f64, Vec<(crate::nn::ParamId, Vec<f64>)>)> {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &prep, None)?;
        let parts = model.loss_parts(&mut g, &prep, &out, &matching)?;
        let total = total_loss(&mut g, &parts, &model.cfg.weights)?;
        let v = g.value(total).item();
        g.backward(total)?;
        Ok((v, g.param_grads()))
    };
    let (_, grads) = objective(&store)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.trainable_ids() {
        let len = store.get(id).value.len();
        let analytic = grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone()).unwrap_or_else(|| vec![0.0; len]);
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in picks {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = objective(&store)?.0;
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = objective(&store)?.0;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult { name: "miniature_model".into(), max_rel_err: worst, checked })
}

/// Full suite: every registered op, then the miniature model.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, op) in registered_ops().iter().enumerate() {
        out.push(check_op(op, seed.wrapping_add(i as u64), None)?);
    }
    out.push(check_model(&miniature_config(), seed, 6)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_and_is_listed_once() {
        let ops = registered_ops();
        let mut names: Vec<&str> = ops.iter().map(|o| o.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), ops.len());
        for (i, op) in ops.iter().enumerate() {
            assert!(op.shapes.len() >= 3);
            let r = check_op(op, i as u64, None).unwrap();
            assert!(r.passed(), "{} {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let ops = registered_ops();
        let op = ops.iter().find(|o| o.name == "matmul").unwrap();
        let bump = |g: &mut [f64]| g[0] += 1e-2;
        let r = check_op(op, 0, Some(&bump)).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn miniature_model_sampled_entries() {
        let r = check_model(&miniature_config(), 4, 1).unwrap();
        assert!(r.checked > 50);
        assert!(r.passed(), "{}", r.max_rel_err);
    }
}
