//! Static bearer tokens mapped to principals.

use std::collections::HashMap;

use axum::http::{header, HeaderMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Principal {
    /// The only user a user-role principal may address; `None` for admins.
    pub user_id: Option<String>,
    pub role: Role,
    /// Short hash of the token, safe to log.
    pub fingerprint: String,
}

pub fn fingerprint(token: &str) -> String {
    let digest = Sha256::digest(token.as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

impl Principal {
    pub fn new(token: &str, role: Role, user_id: Option<String>) -> Self {
        Self {
            user_id,
            role,
            fingerprint: fingerprint(token),
        }
    }

    pub fn may_address(&self, user_id: &str) -> bool {
        match self.role {
            Role::Admin => true,
            Role::User => self.user_id.as_deref() == Some(user_id),
        }
    }

    pub fn authorize(&self, user_id: &str) -> Result<(), ApiError> {
        if self.may_address(user_id) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("principal may not access user `{user_id}`")))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Auth {
    by_token: HashMap<String, Principal>,
}

impl Auth {
    pub fn new(entries: impl IntoIterator<Item = (String, Principal)>) -> Result<Self, String> {
        let mut by_token = HashMap::new();
        for (token, principal) in entries {
            if by_token.insert(token, principal.clone()).is_some() {
                return Err(format!("token {} is listed twice", principal.fingerprint));
            }
        }
        Ok(Self { by_token })
    }

    pub fn len(&self) -> usize {
        self.by_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_token.is_empty()
    }

    pub fn authenticate(&self, headers: &HeaderMap) -> Result<Principal, ApiError> {
        let value = headers
            .get(header::AUTHORIZATION)
            .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        let token = value
            .to_str()
            .ok()
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| ApiError::unauthorized("malformed authorization header"))?;
        self.by_token
            .get(token)
            .cloned()
            .ok_or_else(|| ApiError::unauthorized("unknown token"))
    }
}
