use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SceneClip, Taxonomy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame and actor features for one clip, the inputs of the grouping stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `T x D_vis`
    pub frame_features: Tensor<f64>,
    /// `A x D_vis`, rows in the clip's actor order.
    pub actor_features: Tensor<f64>,
}

/// Frozen random projections standing in for a pretrained visual backbone.
///
/// Actor descriptor: mean box centre, mean box size, velocity, one-hot of the
/// actor's group activity (or `Outlier`) and one-hot of its individual action.
/// Frame descriptor: per-frame centre mean/std, mean size, actor count and the
/// share of actors per activity class.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub d_vis: usize,
    pub noise_sigma: f64,
    seed: u64,
    actor_proj: Vec<f64>,
    frame_proj: Vec<f64>,
    actor_in: usize,
    frame_in: usize,
    taxonomy: Taxonomy,
}

const VELOCITY_GAIN: f64 = 10.0;

impl Featurizer {
    pub fn new(seed: u64, d_vis: usize, noise_sigma: f64, taxonomy: &Taxonomy) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {noise_sigma} must be nonnegative")));
        }
        let c = taxonomy.num_classes();
        let actor_in = 6 + c + taxonomy.num_actions();
        let frame_in = 7 + c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_cafe_0001);
        let mut draw = |rows: usize| {
            let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("std");
            (0..rows * d_vis).map(|_| n.sample(&mut rng)).collect::<Vec<_>>()
        };
        let actor_proj = draw(actor_in);
        let frame_proj = draw(frame_in);
        Ok(Featurizer {
            d_vis,
            noise_sigma,
            seed,
            actor_proj,
            frame_proj,
            actor_in,
            frame_in,
            taxonomy: taxonomy.clone(),
        })
    }

    pub fn actor_descriptor(&self, clip: &SceneClip, row: usize) -> Vec<f64> {
        let a = &clip.actors[row];
        let n = a.boxes.len() as f64;
        let mut d = vec![0.0; self.actor_in];
        for b in &a.boxes {
            let (cx, cy) = b.center();
            let (w, h) = b.size();
            d[0] += cx / n;
            d[1] += cy / n;
            d[2] += w / n;
            d[3] += h / n;
        }
        if a.boxes.len() > 1 {
            let (f, l) = (a.boxes[0].center(), a.boxes[a.boxes.len() - 1].center());
            d[4] = VELOCITY_GAIN * (l.0 - f.0) / (n - 1.0);
            d[5] = VELOCITY_GAIN * (l.1 - f.1) / (n - 1.0);
        }
        let class = clip
            .groups
            .iter()
            .find(|g| g.member_ids.contains(&a.actor_id))
            .map_or(self.taxonomy.outlier_id(), |g| g.activity);
        d[6 + class] = 1.0;
        d[6 + self.taxonomy.num_classes() + a.individual_action] = 1.0;
        d
    }

    pub fn frame_descriptor(&self, clip: &SceneClip, t: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.frame_in];
        let na = clip.actors.len();
        if na > 0 {
            let inv = 1.0 / na as f64;
            let centers: Vec<(f64, f64)> = clip.actors.iter().map(|a| a.boxes[t].center()).collect();
            let (mx, my) = centers.iter().fold((0.0, 0.0), |s, c| (s.0 + c.0 * inv, s.1 + c.1 * inv));
            let (vx, vy) = centers
                .iter()
                .fold((0.0, 0.0), |s, c| (s.0 + (c.0 - mx).powi(2) * inv, s.1 + (c.1 - my).powi(2) * inv));
            d[0] = mx;
            d[1] = my;
            d[2] = vx.sqrt();
            d[3] = vy.sqrt();
            for a in &clip.actors {
                let (w, h) = a.boxes[t].size();
                d[4] += w * inv;
                d[5] += h * inv;
            }
            for g in &clip.groups {
                d[7 + g.activity] += g.member_ids.len() as f64 * inv;
            }
            d[7 + self.taxonomy.outlier_id()] += clip.outlier_actor_ids.len() as f64 * inv;
        }
        d[6] = na as f64 / 10.0;
        d
    }

    fn project(desc: &[f64], proj: &[f64], d_vis: usize, out: &mut [f64]) {
        for (i, &x) in desc.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(&proj[i * d_vis..(i + 1) * d_vis]) {
                *o += x * p;
            }
        }
    }

    pub fn featurize(&self, clip: &SceneClip) -> FeatureBundle {
        let d = self.d_vis;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(clip.clip_id.as_bytes()));
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("sigma");
        let mut sample = |out: &mut [f64]| {
            if self.noise_sigma > 0.0 {
                out.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
        };
        let mut frames = vec![0.0; clip.frames * d];
        for t in 0..clip.frames {
            let row = &mut frames[t * d..(t + 1) * d];
            Self::project(&self.frame_descriptor(clip, t), &self.frame_proj, d, row);
            sample(row);
        }
        let mut actors = vec![0.0; clip.actors.len() * d];
        for r in 0..clip.actors.len() {
            let row = &mut actors[r * d..(r + 1) * d];
            Self::project(&self.actor_descriptor(clip, r), &self.actor_proj, d, row);
            sample(row);
        }
        FeatureBundle {
            frame_features: Tensor::new(vec![clip.frames, d], frames).expect("shape"),
            actor_features: Tensor::new(vec![clip.actors.len(), d], actors).expect("shape"),
        }
    }
}

/// One-off featurisation with projections drawn from `seed`.
pub fn featurize(
    clip: &SceneClip,
    seed: u64,
    noise_sigma: f64,
    d_vis: usize,
    taxonomy: &Taxonomy,
) -> Result<FeatureBundle> {
    Ok(Featurizer::new(seed, d_vis, noise_sigma, taxonomy)?.featurize(clip))
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorParams};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn shapes_and_determinism() {
        let p = GeneratorParams {
            min_groups: 2,
            max_groups: 2,
            min_group_size: 3,
            max_group_size: 3,
            max_outliers: 1,
            outlier_prob: 1.0,
            ..Default::default()
        };
        let clip = generate_scene(1, &p).unwrap();
        let tax = Taxonomy::default();
        let a = featurize(&clip, 9, 0.0, 64, &tax).unwrap();
        let b = featurize(&clip, 9, 0.0, 64, &tax).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.actor_features.shape(), &[7, 64]);
        assert_eq!(a.frame_features.shape(), &[5, 64]);
        assert!(a.actor_features.is_finite());
        assert!(featurize(&clip, 9, -1.0, 64, &tax).is_err());
    }

    #[test]
    fn same_group_actors_are_more_similar_than_outliers() {
        let tax = Taxonomy::default();
        let p = GeneratorParams { outlier_prob: 1.0, ..Default::default() };
        let f = Featurizer::new(11, 64, 0.0, &tax).unwrap();
        let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0, 0.0, 0);
        for s in 0..100 {
            let clip = generate_scene(1000 + s, &p).unwrap();
            let feats = f.featurize(&clip);
            let groups = clip.group_of_actors();
            for i in 0..clip.actors.len() {
                for j in i + 1..clip.actors.len() {
                    let c = cosine(feats.actor_features.row(i), feats.actor_features.row(j));
                    match (groups[i], groups[j]) {
                        (Some(a), Some(b)) if a == b => {
                            same += c;
                            n_same += 1;
                        }
                        (Some(_), None) | (None, Some(_)) => {
                            cross += c;
                            n_cross += 1;
                        }
                        _ => {}
                    }
                }
            }
        }
        let (same, cross) = (same / n_same as f64, cross / n_cross as f64);
        assert!(same > cross, "same-group {same} vs actor/outlier {cross}");
    }
}
