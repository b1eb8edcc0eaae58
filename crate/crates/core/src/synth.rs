//! Seeded source/target datasets with planted moments and a controllable
//! domain shift.
//!
//! Every sample describes one event, a sum of a few concept vectors. Frames
//! inside the planted moment show a linear image of that event, frames
//! outside show distractor events, both with Gaussian noise. The query names
//! the event's concepts (one synonym token each) mixed with filler words.
//! Target-domain frames additionally pass through an affine shift.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Domain, DomainDataset, Sample};
use crate::diff::Matrix;
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::MomentBoundary;

/// Size and shape of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub count: usize,
    /// Inclusive frame count range.
    pub frames: (usize, usize),
    /// Inclusive query length range.
    pub words: (usize, usize),
    /// Moment length as a fraction of the video.
    pub moment_fraction: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Long videos with long moments.
    Activity,
    /// Short videos with short moments.
    Charades,
    /// Few, long videos with tiny moments.
    Tacos,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "activity" => Ok(Preset::Activity),
            "charades" => Ok(Preset::Charades),
            "tacos" => Ok(Preset::Tacos),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected activity, charades or tacos)"
            ))),
        }
    }

    pub fn profile(self) -> DomainProfile {
        match self {
            Preset::Activity => DomainProfile {
                count: 200,
                frames: (20, 32),
                words: (4, 7),
                moment_fraction: (0.25, 0.5),
            },
            Preset::Charades => DomainProfile {
                count: 200,
                frames: (12, 20),
                words: (3, 6),
                moment_fraction: (0.15, 0.35),
            },
            Preset::Tacos => DomainProfile {
                count: 60,
                frames: (36, 48),
                words: (4, 7),
                moment_fraction: (0.05, 0.15),
            },
        }
    }

    /// Default inference threshold for data shaped like this preset.
    pub fn threshold(self) -> f64 {
        match self {
            Preset::Charades => 0.9,
            Preset::Activity | Preset::Tacos => 0.8,
        }
    }
}

/// Affine shift applied to target frames: rotation in a random 2-plane, then
/// per-dimension scaling, then translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    /// Length of the translation vector (random direction).
    pub translation: f64,
    /// Rotation angle in radians.
    pub rotation: f64,
    /// Log-scale spread: each dimension is scaled by `exp(u * scale)`,
    /// `u ~ U(-1, 1)`.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub source: DomainProfile,
    pub target: DomainProfile,
    pub feature_dim: usize,
    pub event_dim: usize,
    pub concepts: usize,
    pub concepts_per_event: usize,
    pub synonyms: usize,
    pub filler_tokens: usize,
    /// Inclusive distractor segment length range.
    pub distractor_frames: (usize, usize),
    pub noise: f64,
    pub shift: ShiftSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            source: Preset::Activity.profile(),
            target: Preset::Charades.profile(),
            feature_dim: 16,
            event_dim: 8,
            concepts: 12,
            concepts_per_event: 2,
            synonyms: 2,
            filler_tokens: 8,
            distractor_frames: (3, 6),
            noise: 0.1,
            shift: ShiftSpec {
                translation: 3.0,
                rotation: 0.0,
                scale: 0.0,
            },
        }
    }
}

impl GenConfig {
    pub fn with_presets(source: Preset, target: Preset, seed: u64) -> Self {
        GenConfig {
            seed,
            source: source.profile(),
            target: target.profile(),
            ..GenConfig::default()
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.concepts * self.synonyms + self.filler_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [("source", &self.source), ("target", &self.target)] {
            if p.count == 0 {
                return bad(format!("{name} count must be at least 1"));
            }
            if p.frames.0 == 0 || p.frames.0 > p.frames.1 {
                return bad(format!("{name} frame range {:?} is invalid", p.frames));
            }
            if p.words.0 < self.concepts_per_event || p.words.0 > p.words.1 {
                return bad(format!(
                    "{name} word range {:?} must start at or above concepts_per_event ({})",
                    p.words, self.concepts_per_event
                ));
            }
            let (lo, hi) = p.moment_fraction;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} moment fraction {:?} outside (0, 1]", p.moment_fraction));
            }
        }
        if self.feature_dim < 2 || self.event_dim == 0 {
            return bad("feature_dim must be >= 2 and event_dim >= 1".into());
        }
        if self.concepts_per_event == 0 || 2 * self.concepts_per_event > self.concepts || self.synonyms == 0 {
            return bad("concepts must be at least twice concepts_per_event (distractors avoid the moment's concepts) and synonyms >= 1".into());
        }
        if self.distractor_frames.0 == 0 || self.distractor_frames.0 > self.distractor_frames.1 {
            return bad(format!("distractor range {:?} is invalid", self.distractor_frames));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        let s = self.shift;
        if ![s.translation, s.rotation, s.scale].iter().all(|v| v.is_finite()) || s.translation < 0.0 || s.scale < 0.0 {
            return bad("shift parameters must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Hidden generative variables of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLatent {
    pub concepts: Vec<usize>,
    /// Noise-free in-moment frame before any domain shift.
    pub event: Vec<f64>,
}

/// Shared generative structure derived from the master seed.
struct World {
    concepts: Vec<Vec<f64>>,
    mixing: Matrix,
    rotation_plane: (Vec<f64>, Vec<f64>),
    scales: Vec<f64>,
    translation: Vec<f64>,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finaliser
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn child_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(stream)) ^ index))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl World {
    fn new(c: &GenConfig) -> Self {
        let mut rng = child_rng(c.seed, 0, 0);
        let concepts = (0..c.concepts).map(|_| normal_vec(&mut rng, c.event_dim)).collect();
        let sd = 1.0 / ((c.event_dim * c.concepts_per_event) as f64).sqrt();
        let mixing = Matrix::from_vec(
            c.feature_dim,
            c.event_dim,
            normal_vec(&mut rng, c.feature_dim * c.event_dim)
                .into_iter()
                .map(|v| v * sd)
                .collect(),
        )
        .expect("sized");
        let mut u = normal_vec(&mut rng, c.feature_dim);
        unit(&mut u);
        let mut w = normal_vec(&mut rng, c.feature_dim);
        let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(x, y)| *x -= dot * y);
        unit(&mut w);
        let scales = (0..c.feature_dim)
            .map(|_| (rng.random_range(-1.0..=1.0) * c.shift.scale).exp())
            .collect();
        let mut translation = normal_vec(&mut rng, c.feature_dim);
        unit(&mut translation);
        translation.iter_mut().for_each(|x| *x *= c.shift.translation);
        World {
            concepts,
            mixing,
            rotation_plane: (u, w),
            scales,
            translation,
        }
    }

    fn event(&self, concepts: &[usize]) -> Vec<f64> {
        let e_dim = self.mixing.cols();
        let mut latent = vec![0.0; e_dim];
        for &k in concepts {
            latent.iter_mut().zip(&self.concepts[k]).for_each(|(a, b)| *a += b);
        }
        (0..self.mixing.rows())
            .map(|r| (0..e_dim).map(|j| self.mixing.get(r, j) * latent[j]).sum())
            .collect()
    }

    fn shift(&self, x: &mut [f64], angle: f64) {
        if angle != 0.0 {
            let (u, w) = &self.rotation_plane;
            let a: f64 = x.iter().zip(u).map(|(p, q)| p * q).sum();
            let b: f64 = x.iter().zip(w).map(|(p, q)| p * q).sum();
            let (s, c) = angle.sin_cos();
            let (a2, b2) = (c * a - s * b, s * a + c * b);
            for i in 0..x.len() {
                x[i] += (a2 - a) * u[i] + (b2 - b) * w[i];
            }
        }
        for i in 0..x.len() {
            x[i] = x[i] * self.scales[i] + self.translation[i];
        }
    }
}

fn draw_concepts(rng: &mut ChaCha8Rng, c: &GenConfig) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..c.concepts).collect();
    pool.partial_shuffle(rng, c.concepts_per_event);
    let mut chosen = pool[..c.concepts_per_event].to_vec();
    chosen.sort_unstable();
    chosen
}

fn sample(world: &World, c: &GenConfig, domain: Domain, index: usize) -> Result<(Sample, SampleLatent)> {
    let (profile, stream, prefix) = match domain {
        Domain::Source => (&c.source, 1, "src"),
        Domain::Target => (&c.target, 2, "tgt"),
    };
    let mut rng = child_rng(c.seed, stream, index as u64);
    let frames = rng.random_range(profile.frames.0..=profile.frames.1);
    let words = rng.random_range(profile.words.0..=profile.words.1);
    let frac = rng.random_range(profile.moment_fraction.0..=profile.moment_fraction.1);
    let len = ((frac * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    let boundary = MomentBoundary::new(start, start + len - 1, frames)?;

    let concepts = draw_concepts(&mut rng, c);
    let event = world.event(&concepts);
    let mut per_frame: Vec<Vec<f64>> = vec![event.clone(); frames];
    // distractor segments left and right of the moment
    for (lo, hi) in [(0, start), (start + len, frames)] {
        let mut t = lo;
        while t < hi {
            let seg = rng
                .random_range(c.distractor_frames.0..=c.distractor_frames.1)
                .min(hi - t);
            let mut other = draw_concepts(&mut rng, c);
            while other.iter().any(|k| concepts.contains(k)) {
                other = draw_concepts(&mut rng, c);
            }
            let v = world.event(&other);
            for f in &mut per_frame[t..t + seg] {
                f.clone_from(&v);
            }
            t += seg;
        }
    }
    let noise = Normal::new(0.0, c.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(frames * c.feature_dim);
    for mut f in per_frame {
        f.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        if domain == Domain::Target {
            world.shift(&mut f, c.shift.rotation);
        }
        data.extend(f.into_iter().map(|x| x as f32 as f64));
    }

    let mut query: Vec<usize> = concepts
        .iter()
        .map(|&k| k * c.synonyms + rng.random_range(0..c.synonyms))
        .collect();
    let filler: Vec<usize> = (0..c.filler_tokens).map(|f| c.concepts * c.synonyms + f).collect();
    while query.len() < words {
        match filler.choose(&mut rng) {
            Some(&f) => query.push(f),
            None => break,
        }
    }
    query.shuffle(&mut rng);

    Ok((
        Sample {
            id: format!("{prefix}-{index:04}"),
            video: FeatureSequence::new(Matrix::from_vec(frames, c.feature_dim, data)?)?,
            query,
            boundary: Some(boundary),
        },
        SampleLatent { concepts, event },
    ))
}

/// Source and target datasets plus the latents behind every sample.
pub struct Generated {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub source_latents: Vec<SampleLatent>,
    pub target_latents: Vec<SampleLatent>,
}

pub fn generate_with_latents(config: &GenConfig, exec: Execution) -> Result<Generated> {
    config.validate()?;
    let world = World::new(config);
    let build = |domain: Domain, count: usize| -> Result<(DomainDataset, Vec<SampleLatent>)> {
        let pairs = exec.try_map(count, |i| sample(&world, config, domain, i))?;
        let (samples, latents) = pairs.into_iter().unzip();
        Ok((
            DomainDataset {
                domain,
                dim: config.feature_dim,
                vocab_size: config.vocab_size(),
                seed: Some(config.seed),
                samples,
            },
            latents,
        ))
    };
    let (source, source_latents) = build(Domain::Source, config.source.count)?;
    let (target, target_latents) = build(Domain::Target, config.target.count)?;
    Ok(Generated {
        source,
        target,
        source_latents,
        target_latents,
    })
}

pub fn generate(config: &GenConfig) -> Result<(DomainDataset, DomainDataset)> {
    let g = generate_with_latents(config, Execution::default())?;
    Ok((g.source, g.target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{mmd, MmdConfig};

    fn small(seed: u64) -> GenConfig {
        let mut c = GenConfig::with_presets(Preset::Activity, Preset::Charades, seed);
        c.source.count = 30;
        c.target.count = 30;
        c
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, generate(&small(5)).unwrap().0);
    }

    #[test]
    fn sequential_and_default_execution_agree() {
        let a = generate_with_latents(&small(1), Execution::Sequential).unwrap();
        let b = generate_with_latents(&small(1), Execution::default()).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn boundaries_and_tokens_are_valid() {
        let (s, t) = generate(&small(2)).unwrap();
        s.validate().unwrap();
        t.validate().unwrap();
        assert!(s.is_annotated() && t.is_annotated());
    }

    #[test]
    fn null_shift_keeps_moment_statistics() {
        let mut c = small(3);
        c.noise = 0.0;
        c.shift = ShiftSpec::default();
        c.target = c.source;
        let g = generate_with_latents(&c, Execution::Sequential).unwrap();
        // identical profile and no shift: moment frames equal the f32-rounded event
        for (set, lat) in [(&g.source, &g.source_latents), (&g.target, &g.target_latents)] {
            for (s, l) in set.samples.iter().zip(lat) {
                let b = s.boundary.unwrap();
                for t in b.start..=b.end {
                    let want: Vec<f64> = l.event.iter().map(|&x| x as f32 as f64).collect();
                    assert_eq!(s.video.values().row(t), want.as_slice());
                }
            }
        }
    }

    fn frame_means(ds: &DomainDataset) -> Vec<Vec<f64>> {
        ds.samples.iter().map(|s| s.video.values().mean_rows()).collect()
    }

    #[test]
    fn translation_increases_mmd() {
        let mut c = small(6);
        c.shift = ShiftSpec::default();
        let (s0, t0) = generate(&c).unwrap();
        c.shift.translation = 5.0;
        let (s5, t5) = generate(&c).unwrap();
        let base = mmd(&frame_means(&s0), &frame_means(&t0), MmdConfig::default()).unwrap();
        let shifted = mmd(&frame_means(&s5), &frame_means(&t5), MmdConfig::default()).unwrap();
        assert!(shifted > base, "{shifted} <= {base}");
    }

    #[test]
    fn moment_frames_resemble_the_event() {
        let mut c = small(8);
        c.source.count = 120;
        let g = generate_with_latents(&c, Execution::default()).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (s, l) in g.source.samples.iter().zip(&g.source_latents) {
            let b = s.boundary.unwrap();
            for t in 0..s.video.len() {
                let v = cos(s.video.values().row(t), &l.event);
                if b.contains(t) {
                    inside.push(v)
                } else {
                    outside.push(v)
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&inside) > mean(&outside));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(0);
        c.source.count = 0;
        assert!(generate(&c).is_err());
        let mut c = small(0);
        c.noise = -1.0;
        assert!(generate(&c).is_err());
        assert!(Preset::parse("kinetics").is_err());
    }
}
