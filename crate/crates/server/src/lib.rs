//! REST service over the memory engine.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/v1/users/{user_id}/memory:process` | `{turns, agent_id?, flow_id?}` |
//! | POST | `/v1/users/{user_id}/memory:context` | `{cap?, touch?}` |
//! | GET | `/v1/users/{user_id}/facts` | query parameters |
//! | GET | `/v1/users/{user_id}/facts/summary` | |
//! | POST | `/v1/users/{user_id}/facts:clear` | `{scope?, agent_id?, flow_id?}` |
//! | PATCH | `/v1/facts/{id}` | editable fact fields |
//! | DELETE | `/v1/facts/{id}` | |
//!
//! Every `/v1` request needs `Authorization: Bearer <token>`.

pub mod app;
pub mod auth;
pub mod config;
pub mod contract;
pub mod error;
pub mod routes;

pub use app::{bind, serve, App, ServeError};
pub use auth::{Auth, Principal, Role};
pub use config::{ConfigError, ServerConfig};
pub use error::ApiError;
