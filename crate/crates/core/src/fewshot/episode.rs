use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Clips grouped by class. Classes are ordered by label and clips by id,
/// so episodes depend only on identifiers, never on input order.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    classes: Vec<(String, Vec<usize>)>,
}

impl ClassIndex {
    /// `items` yields `(clip id, label)`; positions are returned by
    /// [`sample_episode`].
    pub fn new<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut map: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
        for (pos, (id, label)) in items.into_iter().enumerate() {
            map.entry(label).or_default().push((id, pos));
        }
        let classes = map
            .into_iter()
            .map(|(label, mut clips)| {
                clips.sort();
                (label.to_string(), clips.into_iter().map(|(_, p)| p).collect())
            })
            .collect();
        ClassIndex { classes }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(l, _)| l.as_str())
    }

    pub fn clips_in(&self, label: &str) -> Option<&[usize]> {
        self.classes.iter().find(|(l, _)| l == label).map(|(_, c)| c.as_slice())
    }

    /// Every class must hold `k + q` clips and there must be `n` classes.
    pub fn check(&self, n: usize, k: usize, q: usize) -> Result<()> {
        if n == 0 || k == 0 || q == 0 {
            return Err(Error::Config(format!("n-way, k-shot and q must be >= 1, got {n}, {k}, {q}")));
        }
        if self.classes.len() < n {
            return Err(Error::Data(format!(
                "{n}-way episodes need {n} classes, dataset has {}",
                self.classes.len()
            )));
        }
        if let Some((label, clips)) = self.classes.iter().find(|(_, c)| c.len() < k + q) {
            return Err(Error::Data(format!(
                "class '{label}' has {} clips, episodes need k + q = {}",
                clips.len(),
                k + q
            )));
        }
        Ok(())
    }
}

/// One N-way K-shot task; classes are relabeled `0..n` in draw order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub labels: Vec<String>,
    /// `(clip position, episode class)`
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

pub fn sample_episode(index: &ClassIndex, n: usize, k: usize, q: usize, rng: &mut impl Rng) -> Result<Episode> {
    index.check(n, k, q)?;
    let mut ep = Episode {
        labels: Vec::with_capacity(n),
        support: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * q),
    };
    for (c, ci) in sample(rng, index.classes.len(), n).into_iter().enumerate() {
        let (label, clips) = &index.classes[ci];
        ep.labels.push(label.clone());
        for (j, pick) in sample(rng, clips.len(), k + q).into_iter().enumerate() {
            let slot = if j < k { &mut ep.support } else { &mut ep.query };
            slot.push((clips[pick], c));
        }
    }
    Ok(ep)
}
