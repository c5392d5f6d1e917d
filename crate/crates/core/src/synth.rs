//! Seeded synthetic datasets with known topology, used by tests and the
//! `synth` command.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, LayerEmbeddings, PointId, SentenceRecord, TokenOccurrence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Blobs,
    OffsetCircle,
    Grid,
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(Shape::Blobs),
            "offset-circle" => Ok(Shape::OffsetCircle),
            "grid" => Ok(Shape::Grid),
            other => Err(format!(
                "invalid shape `{other}` (expected blobs, offset-circle or grid)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: Shape,
    /// Points in total (blobs: split evenly; grid: rounded to a square).
    pub n: usize,
    /// Number of blobs.
    pub k: usize,
    /// Distance between consecutive blob centres.
    pub sep: f64,
    /// Blob radius or circle radius.
    pub radius: f64,
    pub dim: usize,
    /// Layers to emit. Layer `l` is layer 1 scaled by `1 + 0.1 (l - 1)`.
    pub layers: u32,
    pub seed: u64,
    pub name: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: Shape::Blobs,
            n: 200,
            k: 2,
            sep: 10.0,
            radius: 1.0,
            dim: 2,
            layers: 1,
            seed: 0,
            name: None,
        }
    }
}

/// Angular jitter of circle samples, as a fraction of the arc segment.
const CIRCLE_JITTER: f64 = 0.15;

/// Lattice jitter of blob samples, as a fraction of the lattice spacing.
const BLOB_JITTER: f64 = 0.15;

const FOCUS_WORDS: &[&str] = &["as", "my", "until", "bank", "play", "light", "run", "set"];
const FILLER: &[&str] = &[
    "we", "saw", "the", "river", "quietly", "after", "lunch", "she", "said", "it", "was", "late",
    "again", "today", "people", "often", "think", "that", "nothing", "changes",
];

/// About `count` jittered square-lattice points filling the disk of `radius`
/// in the first two axes; remaining axes carry only jitter.
fn disk_lattice(rng: &mut ChaCha8Rng, dim: usize, radius: f64, count: usize) -> Vec<Vec<f64>> {
    let spacing = radius * (std::f64::consts::PI / count as f64).sqrt();
    let steps = (radius / spacing).ceil() as i64;
    let mut out = Vec::new();
    for i in -steps..=steps {
        for j in -steps..=steps {
            let (x, y) = (i as f64 * spacing, j as f64 * spacing);
            if x * x + y * y > radius * radius {
                continue;
            }
            let mut v: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(-BLOB_JITTER..=BLOB_JITTER) * spacing)
                .collect();
            v[0] += x;
            v[1] += y;
            out.push(v);
        }
    }
    out
}

/// Geometry only: `(group, vector)` per point.
pub fn points(config: &SynthConfig) -> Result<Vec<(usize, Vec<f64>)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim.max(2);
    match config.shape {
        Shape::Blobs => {
            if config.k == 0 {
                return Err("blobs need k >= 1".into());
            }
            let per = config.n.div_ceil(config.k).max(1);
            let offsets = disk_lattice(&mut rng, dim, config.radius, per);
            Ok((0..config.k)
                .flat_map(|b| {
                    offsets.iter().map(move |o| {
                        let mut v = o.clone();
                        // centres on the first axis, away from the origin, so lens ranges separate
                        v[0] += config.sep * (b + 1) as f64;
                        (b, v)
                    })
                })
                .collect())
        }
        Shape::OffsetCircle => Ok((0..config.n)
            .map(|i| {
                // stratified angles: one jittered sample per arc segment
                let jitter: f64 = rng.random_range(-CIRCLE_JITTER..=CIRCLE_JITTER);
                let theta = TAU * (i as f64 + 0.5 + jitter) / config.n as f64;
                let mut v = vec![0.0; dim];
                v[0] = 3.0 + config.radius * theta.cos();
                v[1] = config.radius * theta.sin();
                (0, v)
            })
            .collect()),
        Shape::Grid => {
            let side = (config.n as f64).sqrt().ceil().max(1.0) as usize;
            Ok((0..side * side)
                .map(|i| {
                    let mut v = vec![0.0; dim];
                    v[0] = 1.0 + (i % side) as f64;
                    v[1] = 1.0 + (i / side) as f64;
                    (0, v)
                })
                .collect())
        }
    }
}

/// Full dataset: one sentence per point with the group's focus word.
pub fn generate(config: &SynthConfig) -> Result<Dataset, String> {
    let pts = points(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut sentences = Vec::with_capacity(pts.len());
    let mut occurrences = Vec::with_capacity(pts.len());
    for (i, (group, _)) in pts.iter().enumerate() {
        let focus = FOCUS_WORDS[group % FOCUS_WORDS.len()];
        let len = rng.random_range(4..8usize);
        let focus_at = rng.random_range(0..len);
        let tokens: Vec<String> = (0..len)
            .map(|j| {
                if j == focus_at {
                    focus.to_string()
                } else {
                    FILLER[rng.random_range(0..FILLER.len())].to_string()
                }
            })
            .collect();
        sentences.push(SentenceRecord {
            sentence_id: i as u64,
            tokens,
        });
        let half = match config.shape {
            Shape::OffsetCircle | Shape::Grid => {
                if pts[i].1[1] >= 0.0 { "upper" } else { "lower" }
            }
            Shape::Blobs => "core",
        };
        occurrences.push(TokenOccurrence {
            point_id: i as PointId,
            token: focus.to_string(),
            sentence_id: i as u64,
            token_index: focus_at,
            labels: BTreeMap::from([
                ("group".to_string(), format!("g{group}")),
                ("region".to_string(), half.to_string()),
            ]),
        });
    }
    let layers = (1..=config.layers.max(1))
        .map(|l| {
            let scale = 1.0 + 0.1 * (l - 1) as f64;
            LayerEmbeddings::new(
                l,
                pts.iter()
                    .enumerate()
                    .map(|(i, (_, v))| (i as PointId, v.iter().map(|x| x * scale).collect()))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>, DatasetError>>()
        .map_err(|e| e.to_string())?;
    let name = config.name.clone().unwrap_or_else(|| {
        match config.shape {
            Shape::Blobs => "blobs",
            Shape::OffsetCircle => "offset-circle",
            Shape::Grid => "grid",
        }
        .to_string()
    });
    Dataset::from_parts(name, sentences, occurrences, layers).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_lens_range() {
        let cfg = SynthConfig {
            shape: Shape::OffsetCircle,
            n: 400,
            seed: 1,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let (lo, hi) = ds.layer(1).unwrap().lens_range().unwrap();
        // |x| on the unit circle about (3,0) spans [2, 4]
        assert!(lo >= 2.0 - 1e-12 && lo < 2.01, "{lo}");
        assert!(hi <= 4.0 + 1e-12 && hi > 3.99, "{hi}");
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SynthConfig { seed: 7, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..Default::default() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn focus_tokens_sit_at_their_index() {
        let ds = generate(&SynthConfig { k: 3, n: 30, ..Default::default() }).unwrap();
        for o in ds.occurrences() {
            assert_eq!(ds.sentence_tokens(o.sentence_id).unwrap()[o.token_index], o.token);
        }
    }
}
