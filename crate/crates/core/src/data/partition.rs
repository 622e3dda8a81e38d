use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClientShard, DataError, Segment};

/// Splits `len` items into `parts` contiguous ranges whose sizes differ by
/// at most one; the leading ranges take the remainder.
fn chunk_bounds(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Contiguous, near-equal, order-preserving split across `clients` devices.
pub fn partition_sequential(segments: &[Segment], clients: usize) -> Result<Vec<ClientShard>, DataError> {
    if clients == 0 || clients > segments.len() {
        return Err(DataError::TooManyClients {
            clients,
            segments: segments.len(),
        });
    }
    Ok(chunk_bounds(segments.len(), clients)
        .into_iter()
        .enumerate()
        .map(|(id, r)| ClientShard::from_train(id, segments[r].to_vec()))
        .collect())
}

/// How normal modes are handed to clients in [`partition_by_mode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeAssignment {
    /// Each client draws its own random subset; subsets may overlap.
    Random { modes_per_client: usize },
    /// Modes are dealt from one shuffled deck so no two clients share a mode.
    Disjoint { modes_per_client: usize },
}

impl ModeAssignment {
    pub fn modes_per_client(self) -> usize {
        match self {
            ModeAssignment::Random { modes_per_client } | ModeAssignment::Disjoint { modes_per_client } => {
                modes_per_client
            }
        }
    }
}

/// Result of [`partition_by_mode`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModePartition {
    pub shards: Vec<ClientShard>,
    /// Sorted normal modes held by each client.
    pub client_modes: Vec<Vec<usize>>,
}

/// Heterogeneous split: each client only sees a seeded subset of the normal
/// modes.
///
/// `modes[i]` tags segment `i` with its normal mode, or `None` for
/// segments outside every mode (contamination); untagged segments are dealt
/// round-robin. Segments of a mode held by several clients are split
/// contiguously between them. Segments of a mode no client drew are dropped.
pub fn partition_by_mode(
    segments: &[Segment],
    modes: &[Option<usize>],
    clients: usize,
    assignment: ModeAssignment,
    seed: u64,
) -> Result<ModePartition, DataError> {
    if modes.len() != segments.len() {
        return Err(DataError::TagMismatch {
            tags: modes.len(),
            segments: segments.len(),
        });
    }
    if clients == 0 || clients > segments.len() {
        return Err(DataError::TooManyClients {
            clients,
            segments: segments.len(),
        });
    }
    let available = modes.iter().flatten().max().map_or(0, |m| m + 1);
    let per_client = assignment.modes_per_client();
    if per_client > available || per_client == 0 {
        return Err(DataError::TooManyModes {
            requested: per_client,
            available,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let client_modes: Vec<Vec<usize>> = match assignment {
        ModeAssignment::Random { .. } => (0..clients)
            .map(|_| {
                let mut picked = index::sample(&mut rng, available, per_client).into_vec();
                picked.sort_unstable();
                picked
            })
            .collect(),
        ModeAssignment::Disjoint { .. } => {
            let needed = per_client * clients;
            if needed > available {
                return Err(DataError::NotEnoughModesForDisjoint { needed, available });
            }
            let mut deck: Vec<usize> = (0..available).collect();
            deck.shuffle(&mut rng);
            deck.chunks(per_client)
                .take(clients)
                .map(|c| {
                    let mut c = c.to_vec();
                    c.sort_unstable();
                    c
                })
                .collect()
        }
    };

    let mut buckets: Vec<Vec<Segment>> = vec![Vec::new(); clients];
    for mode in 0..available {
        let holders: Vec<usize> = (0..clients).filter(|&c| client_modes[c].contains(&mode)).collect();
        if holders.is_empty() {
            continue;
        }
        let members: Vec<&Segment> = segments
            .iter()
            .zip(modes)
            .filter(|(_, m)| **m == Some(mode))
            .map(|(s, _)| s)
            .collect();
        for (holder, range) in holders.iter().zip(chunk_bounds(members.len(), holders.len())) {
            buckets[*holder].extend(members[range].iter().map(|s| (*s).clone()));
        }
    }
    let untagged = segments.iter().zip(modes).filter(|(_, m)| m.is_none());
    for (i, (s, _)) in untagged.enumerate() {
        buckets[i % clients].push(s.clone());
    }
    // restore temporal order inside each shard
    for b in &mut buckets {
        b.sort_by(|a, b| (&a.origin.source, a.origin.start).cmp(&(&b.origin.source, b.origin.start)));
    }

    Ok(ModePartition {
        shards: buckets
            .into_iter()
            .enumerate()
            .map(|(id, b)| ClientShard::from_train(id, b))
            .collect(),
        client_modes,
    })
}
