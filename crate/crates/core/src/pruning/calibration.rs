use autograd::{Element, Tape, Tensor};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::{purpose, Stream};

/// One recorded `(x_l, PRM_l(x_l))` pair.
#[derive(Debug, Clone)]
pub struct PrmPair<E> {
    pub input: Tensor<E>,
    pub output: Tensor<E>,
}

/// Per-PRM input/output pairs captured with the branch configuration at build time.
#[derive(Debug, Clone)]
pub struct CalibrationCache<E> {
    /// `pairs[l]` holds one pair per calibration sample for PRM `l`.
    pub pairs: Vec<Vec<PrmPair<E>>>,
    pub sample_ids: Vec<usize>,
    pub seed: u64,
}

/// Deterministic sample of `count` ids out of `available`: without
/// replacement when possible, with replacement otherwise.
pub fn sample_ids(available: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::Data("calibration needs a nonempty dataset".into()));
    }
    let mut rng = Stream::new(seed, purpose::CALIBRATION);
    if count <= available {
        let mut ids: Vec<usize> = (0..available).collect();
        for i in 0..count {
            let j = i + rng.below(available - i);
            ids.swap(i, j);
        }
        ids.truncate(count);
        Ok(ids)
    } else {
        Ok((0..count).map(|_| rng.below(available)).collect())
    }
}

impl<E: Element> CalibrationCache<E> {
    /// Runs gradient-free forwards over `count` sampled items; `fetch(id)`
    /// returns the network input for dataset item `id`.
    pub fn build(
        net: &Network<E>,
        available: usize,
        count: usize,
        seed: u64,
        mut fetch: impl FnMut(usize) -> Result<Tensor<E>>,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("calibration count must be positive".into()));
        }
        let ids = sample_ids(available, count, seed)?;
        let mut pairs: Vec<Vec<PrmPair<E>>> = vec![Vec::with_capacity(count); net.num_prms()];
        for &id in &ids {
            let x = fetch(id)?;
            let mut tape = Tape::inference();
            let xv = tape.leaf(x, false);
            let out = net.forward(&mut tape, xv)?;
            for (l, &(i, o)) in out.prm_io.iter().enumerate() {
                pairs[l].push(PrmPair {
                    input: tape.value(i).clone(),
                    output: tape.value(o).clone(),
                });
            }
        }
        Ok(Self {
            pairs,
            sample_ids: ids,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}
