//! Planted-community datasets for smoke runs and tests.
//!
//! Users and items are split into communities. Users mostly consume items
//! and befriend users of their own community; a `noise` share of both is
//! drawn uniformly from everything.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{InteractionLog, LabelIndex, SocialDataset, SocialLog};
use crate::error::{input, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    pub items_per_user: usize,
    pub friends_per_user: usize,
    /// Share of off-community items and friends.
    pub noise: f64,
    /// Probability that a friendship is mutual.
    pub reciprocity: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            users: 60,
            items: 80,
            communities: 4,
            items_per_user: 10,
            friends_per_user: 4,
            noise: 0.1,
            reciprocity: 0.5,
            seed: 0,
        }
    }
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize], others: usize, noise: f64, exclude: usize) -> usize {
    loop {
        let c = if rng.gen_bool(noise) || pool.is_empty() {
            rng.gen_range(0..others)
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        if c != exclude {
            return c;
        }
    }
}

/// Generates the dataset; the community of user `u` (item `i`) is
/// `u % communities` (`i % communities`).
pub fn planted(config: &PlantedConfig) -> Result<SocialDataset> {
    let c = config.communities;
    if c == 0 || config.users < 2 || config.items == 0 {
        return input("planted dataset needs communities, two users and an item");
    }
    if config.items_per_user > config.items / c || config.friends_per_user >= config.users / c {
        return input("communities are too small for the requested degrees");
    }
    if !(0.0..=1.0).contains(&config.noise) || !(0.0..=1.0).contains(&config.reciprocity) {
        return input("noise and reciprocity must be probabilities");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let item_pool: Vec<Vec<usize>> = (0..c).map(|k| (k..config.items).step_by(c).collect()).collect();
    let user_pool: Vec<Vec<usize>> = (0..c).map(|k| (k..config.users).step_by(c).collect()).collect();
    let mut pairs = Vec::new();
    for u in 0..config.users {
        let own = &item_pool[u % c];
        let mut chosen: Vec<usize> = index::sample(&mut rng, own.len(), config.items_per_user)
            .into_iter()
            .map(|j| own[j])
            .collect();
        for slot in chosen.iter_mut() {
            if rng.gen_bool(config.noise) {
                *slot = rng.gen_range(0..config.items);
            }
        }
        pairs.extend(chosen.into_iter().map(|i| (u, i)));
    }
    let mut edges = Vec::new();
    for u in 0..config.users {
        for _ in 0..config.friends_per_user {
            let v = pick(&mut rng, &user_pool[u % c], config.users, config.noise, u);
            edges.push((u, v, 1.0));
            if rng.gen_bool(config.reciprocity) {
                edges.push((v, u, 1.0));
            }
        }
    }
    let users = LabelIndex::from_labels((0..config.users).map(|u| format!("u{u}")))?;
    let items = LabelIndex::from_labels((0..config.items).map(|i| format!("i{i}")))?;
    let feedback = InteractionLog::new(Arc::new(users), Arc::new(items), pairs)?;
    let s = SparseMatrix::from_triplets(config.users, config.users, &edges)?.binarized();
    Ok(SocialDataset {
        feedback,
        social: SocialLog { s },
    })
}

/// Writes `ratings.tsv` (`user<TAB>item<TAB>1`) and `trust.tsv`.
pub fn write_dataset(data: &SocialDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fb = &data.feedback;
    let mut ratings = fs::File::create(dir.join("ratings.tsv"))?;
    for &(u, i) in &fb.positives {
        writeln!(ratings, "{}\t{}\t1", fb.users.label(u), fb.items.label(i))?;
    }
    let mut trust = fs::File::create(dir.join("trust.tsv"))?;
    for (a, b, _) in data.social.s.iter() {
        writeln!(trust, "{}\t{}", fb.users.label(a), fb.users.label(b))?;
    }
    Ok(())
}
