//! Command-line front end, query service and HTTP ranker client for
//! [`sap_core`].

pub mod config;
pub mod http_ranker;
pub mod loading;
pub mod mock_server;
pub mod rankers;
pub mod service;
