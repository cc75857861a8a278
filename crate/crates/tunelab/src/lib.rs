//! tunelab: a config-driven hub for training and sampling symbolic music
//! generative models.
//!
//! One YAML experiment file selects a model (stacked-LSTM language model,
//! hierarchical recurrent VAE, or causal transformer), the datasets and
//! transform chains that feed it, the trainer settings, and the callbacks
//! that run during training. Every swappable component lives behind a trait
//! and is resolved by name through a [`config::Registry`], so switching
//! experiments means editing the config file, not the code.

pub mod config;
pub mod data;
pub mod models;
pub mod tokenize;
pub mod training;

pub mod cli;
