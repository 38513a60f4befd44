use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FeatureGrid;
use crate::error::{Error, Result};

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"];
pub const OBJECTS: [&str; 8] = ["ball", "cube", "cone", "ring", "star", "box", "cup", "disk"];

/// Caption frames as (prefix, suffix) around the enumerated object list.
pub const TEMPLATES: [(&str, &str); 5] = [
    ("", ""),
    ("there is ", ""),
    ("a photo of ", ""),
    ("an image with ", ""),
    ("", " on a table"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    pub objects_per_image: usize,
    pub refs_per_image: usize,
    pub num_colors: usize,
    pub num_objects: usize,
    pub grid_size: usize,
    pub feature_dim: usize,
    /// Amplitude of the Gaussian noise added to every feature entry.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            num_images: 260,
            objects_per_image: 2,
            refs_per_image: 5,
            num_colors: 6,
            num_objects: 6,
            grid_size: 9,
            feature_dim: 32,
            noise: 0.1,
        }
    }
}

/// One generated image: its (color, object) multiset, features and captions.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: u64,
    pub pairs: Vec<(usize, usize)>,
    pub features: FeatureGrid,
    pub captions: Vec<String>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

fn enumerate_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(" , ")),
    }
}

/// The fixed projection from concatenated one-hot (color, object) codes to
/// feature space: row `c` embeds color `c`, row `num_colors + o` embeds object `o`.
pub fn projection(config: &SynthConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let scale = 1.0 / ((2.0f64).sqrt());
    (0..config.num_colors + config.num_objects)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
                .collect()
        })
        .collect()
}

/// Noise-free embedding of one (color, object) pair.
pub fn pair_embedding(projection: &[Vec<f32>], num_colors: usize, color: usize, object: usize) -> Vec<f32> {
    projection[color]
        .iter()
        .zip(&projection[num_colors + object])
        .map(|(a, b)| a + b)
        .collect()
}

pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Vec<SynthImage>> {
    if config.refs_per_image == 0 {
        return Err(Error::Config("refs_per_image must be at least 1".into()));
    }
    if config.objects_per_image == 0 {
        return Err(Error::Config("objects_per_image must be at least 1".into()));
    }
    if config.objects_per_image > config.grid_size {
        return Err(Error::Config(format!(
            "{} objects do not fit in a grid of {} cells",
            config.objects_per_image, config.grid_size
        )));
    }
    if config.num_colors == 0
        || config.num_objects == 0
        || config.num_colors > COLORS.len()
        || config.num_objects > OBJECTS.len()
    {
        return Err(Error::Config(format!(
            "color/object set sizes must be in 1..={} and 1..={}",
            COLORS.len(),
            OBJECTS.len()
        )));
    }
    let perms = permutations(config.objects_per_image);
    let phrasings = perms.len() * TEMPLATES.len();
    if config.refs_per_image > phrasings {
        return Err(Error::Config(format!(
            "{} references per image requested but only {phrasings} distinct phrasings exist",
            config.refs_per_image
        )));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::Config("noise must be a finite non-negative number".into()));
    }

    let proj = projection(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut images = Vec::with_capacity(config.num_images);
    for id in 0..config.num_images as u64 {
        let pairs: Vec<(usize, usize)> = (0..config.objects_per_image)
            .map(|_| {
                (
                    rng.random_range(0..config.num_colors),
                    rng.random_range(0..config.num_objects),
                )
            })
            .collect();

        let mut cells: Vec<usize> = (0..config.grid_size).collect();
        cells.shuffle(&mut rng);
        let mut data = vec![0.0f32; config.grid_size * config.feature_dim];
        for (&(c, o), &cell) in pairs.iter().zip(&cells) {
            let e = pair_embedding(&proj, config.num_colors, c, o);
            data[cell * config.feature_dim..(cell + 1) * config.feature_dim].copy_from_slice(&e);
        }
        if config.noise > 0.0 {
            for v in data.iter_mut() {
                *v += (rng.sample::<f64, _>(StandardNormal) * config.noise) as f32;
            }
        }
        let features = FeatureGrid::new(id, config.grid_size, config.feature_dim, data)?;

        let mut combos: Vec<(usize, usize)> = (0..TEMPLATES.len())
            .flat_map(|t| (0..perms.len()).map(move |p| (t, p)))
            .collect();
        combos.shuffle(&mut rng);
        let captions = combos[..config.refs_per_image]
            .iter()
            .map(|&(t, p)| {
                let items: Vec<String> = perms[p]
                    .iter()
                    .map(|&i| {
                        let (c, o) = pairs[i];
                        format!("a {} {}", COLORS[c], OBJECTS[o])
                    })
                    .collect();
                let (pre, post) = TEMPLATES[t];
                format!("{pre}{}{post}", enumerate_list(&items))
            })
            .collect();
        images.push(SynthImage {
            id,
            pairs,
            features,
            captions,
        });
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_counts() {
        assert_eq!(permutations(1).len(), 1);
        assert_eq!(permutations(3).len(), 6);
    }

    #[test]
    fn list_enumeration() {
        let items: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        assert_eq!(enumerate_list(&items[..1]), "x");
        assert_eq!(enumerate_list(&items[..2]), "x and y");
        assert_eq!(enumerate_list(&items), "x , y and z");
    }

    #[test]
    fn rejects_insufficient_diversity() {
        let cfg = SynthConfig {
            objects_per_image: 1,
            refs_per_image: 6,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
        let cfg = SynthConfig {
            objects_per_image: 10,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
        let cfg = SynthConfig {
            refs_per_image: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn noise_free_single_object_cell_is_exact() {
        let cfg = SynthConfig {
            num_images: 4,
            objects_per_image: 1,
            refs_per_image: 3,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let proj = projection(&cfg);
        for img in generate_synthetic_dataset(&cfg).unwrap() {
            let (c, o) = img.pairs[0];
            let e = pair_embedding(&proj, cfg.num_colors, c, o);
            let nonzero: Vec<usize> = (0..cfg.grid_size)
                .filter(|&i| img.features.cell(i).iter().any(|&v| v != 0.0))
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(img.features.cell(nonzero[0]), e.as_slice());
        }
    }

    #[test]
    fn references_are_distinct() {
        let images = generate_synthetic_dataset(&SynthConfig {
            num_images: 20,
            ..SynthConfig::default()
        })
        .unwrap();
        for img in images {
            let mut caps = img.captions.clone();
            caps.sort();
            caps.dedup();
            assert_eq!(caps.len(), img.captions.len());
        }
    }
}
