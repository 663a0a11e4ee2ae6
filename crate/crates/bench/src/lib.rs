//! Fixtures shared by the benchmark targets.

use hawkes_causal::{simulate_pgem, Dataset, IsahpConfig, IsahpModel, PgemSpec, SimConfig};

/// Synergy data at a fixed seed, `n` sequences over `[0, 20]`.
pub fn synergy(n: usize) -> Dataset {
    simulate_pgem(&PgemSpec::synergy(), &SimConfig::new(n, 20.0, 7)).expect("default spec is valid")
}

/// Freshly initialized model with default sizes.
pub fn isahp(ds: &Dataset) -> IsahpModel {
    IsahpModel::init(ds, IsahpConfig::default(), 0).expect("default config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        let (a, b) = (synergy(3), synergy(3));
        assert_eq!(a.sequences(), b.sequences());
        assert_eq!(isahp(&a).store().flat(), isahp(&b).store().flat());
    }
}
