pub mod backend;
pub mod compose;
pub mod counterfactual;
pub mod export;
pub mod extract;
pub mod fsio;
pub mod generation;
pub mod ingest;
pub mod ledger;
pub mod metrics;
pub mod normalize;
pub mod orchestrator;
pub mod prompts;
pub mod quality_control;
