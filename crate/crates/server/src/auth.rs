//! Bearer tokens and administrator accounts.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use echo_core::ids::{SessionId, StudyId};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Admin { username: String },
    Participant { study_id: StudyId, session_id: SessionId },
}

impl Principal {
    pub fn kind(&self) -> &'static str {
        match self {
            Principal::Admin { .. } => "admin",
            Principal::Participant { .. } => "participant",
        }
    }
}

struct Grant {
    principal: Principal,
    expires: Instant,
    requests: u64,
}

/// Issued tokens, held in memory only. A restart signs everyone out.
pub struct Tokens {
    grants: Mutex<HashMap<String, Grant>>,
    ttl: Duration,
    request_cap: u64,
}

pub fn random_token() -> String {
    format!("{}{}", uuid::Uuid::new_v4().simple(), uuid::Uuid::new_v4().simple())
}

impl Tokens {
    pub fn new(ttl: Duration, request_cap: u64) -> Self {
        Self { grants: Mutex::new(HashMap::new()), ttl, request_cap }
    }

    pub fn issue(&self, principal: Principal) -> String {
        let token = random_token();
        let grant = Grant { principal, expires: Instant::now() + self.ttl, requests: 0 };
        self.grants.lock().expect("token table poisoned").insert(token.clone(), grant);
        token
    }

    /// Resolves a token and counts the request against its cap.
    pub fn check(&self, token: &str) -> Result<Principal, ApiError> {
        let mut grants = self.grants.lock().expect("token table poisoned");
        let Some(grant) = grants.get_mut(token) else {
            return Err(ApiError::unauthorized());
        };
        if grant.expires <= Instant::now() {
            grants.remove(token);
            return Err(ApiError::unauthorized());
        }
        grant.requests += 1;
        if grant.requests > self.request_cap {
            return Err(ApiError::new(
                axum::http::StatusCode::TOO_MANY_REQUESTS,
                "request_cap",
                format!("token exceeded its cap of {} requests", self.request_cap),
            ));
        }
        Ok(grant.principal.clone())
    }

    pub fn revoke(&self, token: &str) {
        self.grants.lock().expect("token table poisoned").remove(token);
    }
}

/// Stored form of an administrator account.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdminAccount {
    pub username: String,
    /// PHC-format argon2 hash.
    pub password_hash: String,
}

impl AdminAccount {
    pub fn new(username: &str, password: &str) -> Result<Self, ApiError> {
        let salt = SaltString::from_b64(&uuid::Uuid::new_v4().simple().to_string())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let hash = Argon2::default()
            .hash_password(password.as_bytes(), &salt)
            .map_err(|e| ApiError::internal(e.to_string()))?
            .to_string();
        Ok(Self { username: username.to_string(), password_hash: hash })
    }

    pub fn verify(&self, password: &str) -> bool {
        PasswordHash::new(&self.password_hash)
            .is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
    }
}
