pub mod appraisal;
pub mod artifacts;
pub mod emobank;
pub mod event_ingest;
pub mod orchestrator;
pub mod prompt_patch;
pub mod proposal_engine;
pub mod rbt;
pub mod robin_sim;
pub mod timefmt;
