//! Test support: reference oracles, a corpus generator, event and notice
//! wrappers, an end-to-end harness, and stand-in Redis and S3 servers.

pub mod corpus;
pub mod fake_redis;
pub mod fake_s3;
pub mod harness;
pub mod oracle;
pub mod wrappers;

pub use corpus::generate_corpus;
pub use oracle::{oracle_wordcount, sort_oracle};
