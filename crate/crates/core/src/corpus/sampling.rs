use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DocumentRecord, IdeologyLabel, NewsTriplet, StoryCluster};

/// Keeps `min_class_count` records of every label, chosen uniformly without
/// replacement; the original relative order is preserved.
pub fn balance_subsample(records: &[DocumentRecord], seed: u64) -> Vec<DocumentRecord> {
    let mut by_label: BTreeMap<IdeologyLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_label.entry(r.label).or_default().push(i);
    }
    let Some(target) = by_label.values().map(Vec::len).min() else { return Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for positions in by_label.values() {
        if positions.len() == target {
            positions.iter().for_each(|&p| keep[p] = true);
            continue;
        }
        for k in index::sample(&mut rng, positions.len(), target) {
            keep[positions[k]] = true;
        }
    }
    records.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletOptions {
    /// When a cluster has no differently-labelled member, draw the negative
    /// from other clusters instead of skipping the cluster.
    pub cross_cluster_negatives: bool,
}

/// Every ordered (anchor, positive) pair of equally-labelled members of a
/// cluster, each with one negative drawn uniformly from the cluster's
/// differently-labelled members.
pub fn sample_triplets(clusters: &[StoryCluster], seed: u64, options: TripletOptions) -> Vec<NewsTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        for (ai, a) in cluster.members.iter().enumerate() {
            let mut local: Vec<&str> =
                cluster.members.iter().filter(|m| m.label != a.label && m.id != a.id).map(|m| m.id.as_str()).collect();
            let fallback;
            if local.is_empty() && options.cross_cluster_negatives {
                fallback = clusters
                    .iter()
                    .enumerate()
                    .filter(|&(cj, _)| cj != ci)
                    .flat_map(|(_, c)| c.members.iter())
                    .filter(|m| m.label != a.label && m.id != a.id)
                    .map(|m| m.id.as_str())
                    .collect::<Vec<_>>();
                local = fallback;
            }
            for (pi, p) in cluster.members.iter().enumerate() {
                if pi == ai || p.label != a.label || p.id == a.id {
                    continue;
                }
                let candidates: Vec<&str> = local.iter().copied().filter(|&n| n != p.id).collect();
                let Some(&neg) = candidates.choose(&mut rng) else { continue };
                triplets.push(NewsTriplet { anchor: a.id.clone(), positive: p.id.clone(), negative: neg.to_string() });
            }
        }
    }
    triplets
}

/// Splits records into `(train, validation, test)` by story so that no story
/// spans two splits. Records without a story are assigned individually.
/// `fractions` are the train and validation shares; the rest is test.
pub fn split_by_cluster(
    records: &[DocumentRecord],
    fractions: (f64, f64),
    seed: u64,
) -> (Vec<DocumentRecord>, Vec<DocumentRecord>, Vec<DocumentRecord>) {
    let mut groups: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        let key = r.story_id.clone().unwrap_or_else(|| format!("\u{0}{}", r.id));
        if seen.insert(key.clone()) {
            groups.push(key);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n = groups.len() as f64;
    let n_train = (n * fractions.0).round() as usize;
    let n_val = ((n * fractions.1).round() as usize).min(groups.len() - n_train.min(groups.len()));
    let mut split_of: BTreeMap<String, u8> = BTreeMap::new();
    for (i, g) in groups.into_iter().enumerate() {
        let s = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        split_of.insert(g, s);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        let key = r.story_id.clone().unwrap_or_else(|| format!("\u{0}{}", r.id));
        match split_of[&key] {
            0 => train.push(r.clone()),
            1 => val.push(r.clone()),
            _ => test.push(r.clone()),
        }
    }
    (train, val, test)
}
