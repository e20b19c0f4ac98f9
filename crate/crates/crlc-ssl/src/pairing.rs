//! Positive-pair construction: the three strategies for deriving two
//! views of the same underlying instance, plus batched assembly.

use crate::augment::{augment, AugmentSpec};
use crate::data::{Dataset, Window};
use crate::error::{Error, Result};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Random disjoint channel subsets of one window.
    Crlc,
    /// Temporally adjacent windows (explicit pair or halves).
    Csc,
    /// Two independent augmentations of the same window.
    Cac,
}

/// Aligned two-view batch: view1[i] and view2[i] derive from instance i.
/// Channel counts are uniform within a view but may differ across views.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub view1: Vec<Window>,
    pub view2: Vec<Window>,
}

impl PairBatch {
    pub fn new(view1: Vec<Window>, view2: Vec<Window>) -> Result<Self> {
        if view1.len() != view2.len() || view1.is_empty() {
            return Err(Error::invalid("views must be nonempty and equal-length"));
        }
        for views in [&view1, &view2] {
            let (c, t) = (views[0].channels(), views[0].len());
            if views.iter().any(|w| w.channels() != c || w.len() != t) {
                return Err(Error::invalid("windows within a view must share C and T"));
            }
        }
        Ok(Self { view1, view2 })
    }

    pub fn len(&self) -> usize {
        self.view1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view1.is_empty()
    }
}

/// Splits the window's channels into two disjoint, exhaustive subsets of
/// sizes c1 and C - c1, membership uniform; values copied verbatim.
pub fn crlc_partition(w: &Window, c1: usize, rng: &mut impl Rng) -> Result<(Window, Window)> {
    let c = w.channels();
    if !(2..=c.saturating_sub(2)).contains(&c1) {
        return Err(Error::invalid("subset sizes must both be at least 2"));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(rng);
    let (mut first, mut second) = (order[..c1].to_vec(), order[c1..].to_vec());
    first.sort_unstable();
    second.sort_unstable();
    let v1 = w.values().select(Axis(0), &first);
    let v2 = w.values().select(Axis(0), &second);
    Ok((Window::new(v1)?, Window::new(v2)?))
}

/// Random-subset views: subset size C1 uniform over {2, ..., C-2}.
pub fn crlc_pair(w: &Window, rng: &mut impl Rng) -> Result<(Window, Window)> {
    let c = w.channels();
    if c < 4 {
        return Err(Error::StrategyInapplicable(format!(
            "channel-subset pairing needs at least 4 channels, got {c}"
        )));
    }
    let c1 = rng.gen_range(2..=c - 2);
    crlc_partition(w, c1, rng)
}

/// Adjacent-window views: the explicit paired window when present,
/// otherwise the two halves of the window along time.
pub fn csc_pair(w: &Window, paired: Option<&Window>) -> Result<(Window, Window)> {
    if let Some(p) = paired {
        if p.channels() != w.channels() || p.len() != w.len() {
            return Err(Error::invalid("paired window shape mismatch"));
        }
        return Ok((w.clone(), p.clone()));
    }
    let t = w.len();
    if t % 2 != 0 {
        return Err(Error::invalid(
            "splitting a window into halves needs even T",
        ));
    }
    let v1 = w.values().slice_axis(Axis(1), (0..t / 2).into()).to_owned();
    let v2 = w.values().slice_axis(Axis(1), (t / 2..t).into()).to_owned();
    Ok((Window::new(v1)?, Window::new(v2)?))
}

/// Augmentation views: two independent pipeline applications to w.
pub fn cac_pair(
    w: &Window,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<(Window, Window)> {
    Ok((augment(w, spec, rng)?, augment(w, spec, rng)?))
}

/// Builds an aligned batch over the given dataset indices. A single
/// subset size is drawn per batch under the channel-subset strategy so
/// each view has a uniform channel count; membership is still drawn per
/// window.
pub fn build_batch(
    ds: &Dataset,
    indices: &[usize],
    strategy: Strategy,
    augment_spec: Option<&AugmentSpec>,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut view1 = Vec::with_capacity(indices.len());
    let mut view2 = Vec::with_capacity(indices.len());
    match strategy {
        Strategy::Crlc => {
            let c = ds.channels();
            if c < 4 {
                return Err(Error::StrategyInapplicable(format!(
                    "channel-subset pairing needs at least 4 channels, got {c}"
                )));
            }
            let c1 = rng.gen_range(2..=c - 2);
            for &i in indices {
                let (a, b) = crlc_partition(&ds.windows[i], c1, rng)?;
                view1.push(a);
                view2.push(b);
            }
        }
        Strategy::Csc => {
            for &i in indices {
                let paired = ds.paired.as_ref().map(|p| &p[i]);
                let (a, b) = csc_pair(&ds.windows[i], paired)?;
                view1.push(a);
                view2.push(b);
            }
        }
        Strategy::Cac => {
            let spec = augment_spec
                .ok_or_else(|| Error::invalid("augmentation strategy needs an AugmentSpec"))?;
            for &i in indices {
                let (a, b) = cac_pair(&ds.windows[i], spec, rng)?;
                view1.push(a);
                view2.push(b);
            }
        }
    }
    PairBatch::new(view1, view2)
}
