//! Two-stage parameter screening: factorial grids, non-monotonic dispatch
//! schedules, a resumable quorum-aggregating study server with TCP clients,
//! an in-process local mode, and the stage selection rules.

pub mod client;
pub mod grid;
pub mod local;
pub mod protocol;
pub mod schedule;
pub mod select;
pub mod server;
pub mod study;

pub use client::{client_run, ClientOptions, ClientSummary};
pub use grid::{build_grid, top_combos, EncodingCombo, ParameterGrid, Stage};
pub use local::{run_local_study, LocalOptions};
pub use schedule::{schedule, TrialAssignment};
pub use select::{stage1_select, stage2_select, ConsistencyRule, SelectionOutcome};
pub use server::{serve, ServeOptions, StudyServer};
pub use study::{aggregate, AggregateScore, StudyHeader, StudyLog, StudyOutcome, StudyRecord};

use sha2::{Digest, Sha256};

/// Deterministic sub-seed: first eight little-endian bytes of
/// sha256(seed_le || tag).
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_seed_separates_tags_and_seeds() {
        assert_eq!(mix_seed(1, "a"), mix_seed(1, "a"));
        assert_ne!(mix_seed(1, "a"), mix_seed(1, "b"));
        assert_ne!(mix_seed(1, "a"), mix_seed(2, "a"));
    }
}
