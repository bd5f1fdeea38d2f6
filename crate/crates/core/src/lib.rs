pub mod dp;
pub mod forecast;
pub mod hems;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod qlearn;
pub mod timeseries;
pub mod varma;
