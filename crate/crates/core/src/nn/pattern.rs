use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::DimSubset;

/// Which averaging subsets each MDE layer keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Pattern {
    /// The full power set in every layer.
    #[default]
    Full,
    /// `{∅, {1}, …, {N}}` in every layer.
    P1,
    /// Two singletons per layer, rotating over the dimensions.
    P2,
    /// One singleton per layer, rotating over the dimensions.
    P3,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Full, Pattern::P1, Pattern::P2, Pattern::P3];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Full => "full",
            Pattern::P1 => "p1",
            Pattern::P2 => "p2",
            Pattern::P3 => "p3",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Pattern::Full),
            "p1" => Ok(Pattern::P1),
            "p2" => Ok(Pattern::P2),
            "p3" => Ok(Pattern::P3),
            _ => Err(Error::Invalid(format!("unknown pattern {s:?}"))),
        }
    }
}

fn check_schedule(pattern: Pattern, n: usize, schedule: &[Vec<DimSubset>]) -> Result<()> {
    let mut covered = BTreeSet::new();
    for (l, layer) in schedule.iter().enumerate() {
        if !layer.contains(&DimSubset::empty()) {
            return Err(Error::Coverage(format!("layer {} lacks the identity subset", l + 1)));
        }
        for s in layer {
            if s.max_dim().is_some_and(|d| d > n) {
                return Err(Error::Coverage(format!("subset {s} exceeds N = {n}")));
            }
            let singleton_only = matches!(pattern, Pattern::P2 | Pattern::P3);
            if singleton_only && s.len() > 1 {
                return Err(Error::Coverage(format!("pattern {pattern} allows only singletons, got {s}")));
            }
            covered.extend(s.iter());
        }
        let non_empty = layer.iter().filter(|s| !s.is_empty()).count();
        if pattern == Pattern::P3 && non_empty != 1 {
            return Err(Error::Coverage(format!("pattern p3 needs exactly one singleton in layer {}", l + 1)));
        }
    }
    if covered.len() != n {
        let missing: Vec<usize> = (1..=n).filter(|d| !covered.contains(d)).collect();
        return Err(Error::Coverage(format!("dimensions {missing:?} are never averaged")));
    }
    Ok(())
}

/// Per-layer subset families for an `L`-layer stack over `N` dimensions.
///
/// A supplied `schedule` replaces the default rotation and must contain the
/// identity subset in every layer and average every dimension somewhere.
pub fn pattern_subsets(
    pattern: Pattern,
    n: usize,
    layers: usize,
    schedule: Option<&[Vec<DimSubset>]>,
) -> Result<Vec<Vec<DimSubset>>> {
    if n == 0 || layers == 0 {
        return Err(Error::Invalid("pattern needs N ≥ 1 and L ≥ 1".into()));
    }
    let mut out: Vec<Vec<DimSubset>> = match (pattern, schedule) {
        (_, Some(s)) => {
            if s.len() != layers {
                return Err(Error::Invalid(format!("schedule has {} layers, expected {layers}", s.len())));
            }
            s.to_vec()
        }
        (Pattern::Full, None) => vec![DimSubset::power_set(n); layers],
        (Pattern::P1, None) => {
            let layer: Vec<DimSubset> = std::iter::once(DimSubset::empty())
                .chain((1..=n).map(DimSubset::singleton))
                .collect();
            vec![layer; layers]
        }
        (Pattern::P2, None) => (0..layers)
            .map(|l| {
                vec![
                    DimSubset::empty(),
                    DimSubset::singleton(l % n + 1),
                    DimSubset::singleton((l + 1) % n + 1),
                ]
            })
            .collect(),
        (Pattern::P3, None) => (0..layers)
            .map(|l| vec![DimSubset::empty(), DimSubset::singleton(l % n + 1)])
            .collect(),
    };
    for layer in &mut out {
        layer.sort();
        layer.dedup();
    }
    check_schedule(pattern, n, &out)?;
    Ok(out)
}
