//! N-way K-shot episode sampling.
//!
//! Episode `i` of a run with base seed `s` uses `rng::seeded(s + i, stream)`
//! (wrapping integer addition). Classes are drawn first, without
//! replacement; then, per drawn class in draw order, `K + Q` rows without
//! replacement, the first `K` for support and the next `Q` for query. The
//! `n`-th drawn class is relabelled `n`.

use serde::{Deserialize, Serialize};

use crate::dataio::ClassPool;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub base_seed: u64,
    pub episode_index: u64,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize, base_seed: u64) -> Result<Self> {
        if n_way < 2 || k_shot < 1 || q_query < 1 {
            return Err(Error::Config(format!(
                "episode needs N >= 2, K >= 1, Q >= 1 (got N={n_way}, K={k_shot}, Q={q_query})"
            )));
        }
        Ok(Self {
            n_way,
            k_shot,
            q_query,
            base_seed,
            episode_index: 0,
        })
    }

    pub fn at(&self, episode_index: u64) -> Self {
        Self {
            episode_index,
            ..*self
        }
    }

    pub fn seed(&self) -> u64 {
        self.base_seed.wrapping_add(self.episode_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeItem {
    /// Row in the feature table the pool was built from.
    pub row: usize,
    /// Relabelled class in `0..N`.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// `class_map[n]` is the original class id relabelled as `n`.
    pub class_map: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_rows(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.row).collect()
    }

    pub fn query_rows(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.row).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }
}

pub fn sample_episode(pool: &ClassPool, spec: &EpisodeSpec) -> Result<Episode> {
    sample_episode_in_stream(pool, spec, rng::stream::EPISODE)
}

pub fn sample_episode_in_stream(pool: &ClassPool, spec: &EpisodeSpec, stream: u64) -> Result<Episode> {
    if pool.len() < spec.n_way {
        return Err(Error::InsufficientClasses {
            needed: spec.n_way,
            available: pool.len(),
        });
    }
    let per_class = spec.k_shot + spec.q_query;
    if let Some(c) = pool.classes.iter().find(|c| c.rows.len() < per_class) {
        return Err(Error::InsufficientSamples {
            class_id: c.class_id,
            needed: per_class,
            available: c.rows.len(),
        });
    }

    let mut rng = rng::seeded(spec.seed(), stream);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng::choose_prefix(&mut rng, &mut order, spec.n_way);

    let mut class_map = Vec::with_capacity(spec.n_way);
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_query);
    for (label, &slot) in order[..spec.n_way].iter().enumerate() {
        let class = &pool.classes[slot];
        class_map.push(class.class_id);
        let mut rows = class.rows.clone();
        rng::choose_prefix(&mut rng, &mut rows, per_class);
        support.extend(rows[..spec.k_shot].iter().map(|&row| EpisodeItem { row, label }));
        query.extend(
            rows[spec.k_shot..per_class]
                .iter()
                .map(|&row| EpisodeItem { row, label }),
        );
    }
    Ok(Episode {
        class_map,
        support,
        query,
    })
}
