//! Federated dynamic GNN training for moving-object trajectory prediction,
//! with optional secure aggregation of client contributions.

pub mod bench;
pub mod dynamic_gnn;
pub mod federated;
pub mod graph_model;
pub mod ingest;
pub mod secure_agg;
