//! Accounts and sessions. Kept apart from simulation data: purging a user's
//! data never touches this store.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::clock::SharedClock;

pub type UserId = String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    /// Unknown login, wrong secret, and expired or unknown tokens all look
    /// the same to the caller.
    #[error("authentication failed")]
    Denied,
    #[error("login already registered")]
    Taken,
    #[error("invalid credentials: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Argon2id work factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashCost {
    pub memory_kib: u32,
    pub iterations: u32,
    pub lanes: u32,
}

impl HashCost {
    /// Cheap settings for tests and local development.
    pub const FAST: HashCost = HashCost {
        memory_kib: 64,
        iterations: 1,
        lanes: 1,
    };
}

impl Default for HashCost {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
            lanes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct UserRecord {
    user_id: UserId,
    login: String,
    /// PHC string; carries its own salt and parameters.
    secret_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: UserId,
    pub expires_at_secs: f64,
}

pub struct CredentialStore {
    path: Option<PathBuf>,
    hasher: Argon2<'static>,
    users: Mutex<HashMap<String, UserRecord>>,
    sessions: Mutex<HashMap<String, (UserId, Duration)>>,
    dummy_hash: String,
    clock: SharedClock,
    session_ttl: Duration,
}

fn random_hex(bytes: usize) -> String {
    let mut rng = rand::rng();
    let buf: Vec<u8> = (0..bytes).map(|_| rng.random()).collect();
    hex::encode(buf)
}

fn fresh_salt() -> SaltString {
    let bytes: [u8; 16] = rand::rng().random();
    SaltString::encode_b64(&bytes).expect("16 bytes is a valid salt length")
}

impl CredentialStore {
    /// `dir` of `None` keeps accounts in memory only.
    pub fn open(dir: Option<PathBuf>, cost: HashCost, clock: SharedClock, session_ttl: Duration) -> Result<Self, StoreError> {
        let params = Params::new(cost.memory_kib, cost.iterations, cost.lanes, None)
            .map_err(|e| StoreError::Corrupt(format!("hash parameters: {e}")))?;
        let hasher = Argon2::new(Algorithm::Argon2id, Version::V0x13, params);
        let salt = fresh_salt();
        let dummy_hash = hasher
            .hash_password(b"placeholder secret", &salt)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?
            .to_string();
        let mut users = HashMap::new();
        let path = match dir {
            Some(dir) => {
                fs::create_dir_all(&dir)?;
                let path = dir.join("users.jsonl");
                if path.exists() {
                    for line in fs::read_to_string(&path)?.lines() {
                        if let Ok(u) = serde_json::from_str::<UserRecord>(line) {
                            users.insert(u.login.clone(), u);
                        }
                    }
                }
                Some(path)
            }
            None => None,
        };
        Ok(Self {
            path,
            hasher,
            users: Mutex::new(users),
            sessions: Mutex::new(HashMap::new()),
            dummy_hash,
            clock,
            session_ttl,
        })
    }

    pub fn register(&self, login: &str, secret: &str) -> Result<UserId, AuthError> {
        let login = login.trim();
        if login.is_empty() || login.len() > 128 || login.chars().any(char::is_control) {
            return Err(AuthError::Invalid("login must be 1-128 printable characters".into()));
        }
        if secret.len() < 8 {
            return Err(AuthError::Invalid("secret must be at least 8 bytes".into()));
        }
        if self.users.lock().contains_key(login) {
            return Err(AuthError::Taken);
        }
        let salt = fresh_salt();
        let secret_hash = self
            .hasher
            .hash_password(secret.as_bytes(), &salt)
            .map_err(|e| AuthError::Invalid(e.to_string()))?
            .to_string();
        let record = UserRecord {
            user_id: format!("u{}", random_hex(8)),
            login: login.to_owned(),
            secret_hash,
        };
        let mut users = self.users.lock();
        if users.contains_key(login) {
            return Err(AuthError::Taken);
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(StoreError::from)?;
            let line = serde_json::to_string(&record).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            writeln!(f, "{line}").map_err(StoreError::from)?;
            f.sync_data().map_err(StoreError::from)?;
        }
        let id = record.user_id.clone();
        users.insert(record.login.clone(), record);
        Ok(id)
    }

    pub fn login(&self, login: &str, secret: &str) -> Result<Session, AuthError> {
        let record = self.users.lock().get(login.trim()).cloned();
        let (hash, user) = match &record {
            Some(r) => (r.secret_hash.as_str(), Some(r.user_id.clone())),
            None => (self.dummy_hash.as_str(), None),
        };
        let parsed = PasswordHash::new(hash).map_err(|_| AuthError::Denied)?;
        let ok = self.hasher.verify_password(secret.as_bytes(), &parsed).is_ok();
        let user_id = match (ok, user) {
            (true, Some(u)) => u,
            _ => return Err(AuthError::Denied),
        };
        let token = random_hex(32);
        let expires = self.clock.now() + self.session_ttl;
        self.sessions.lock().insert(token.clone(), (user_id.clone(), expires));
        Ok(Session {
            token,
            user_id,
            expires_at_secs: expires.as_secs_f64(),
        })
    }

    pub fn authenticate(&self, token: &str) -> Result<UserId, AuthError> {
        let mut sessions = self.sessions.lock();
        match sessions.get(token) {
            Some((user, expires)) if self.clock.now() < *expires => Ok(user.clone()),
            Some(_) => {
                sessions.remove(token);
                Err(AuthError::Denied)
            }
            None => Err(AuthError::Denied),
        }
    }

    pub fn logout(&self, token: &str) {
        self.sessions.lock().remove(token);
    }

    /// Raw bytes of the account file, for checking that secrets are never
    /// stored in the clear.
    pub fn persisted_bytes(&self) -> Option<Vec<u8>> {
        self.path.as_ref().and_then(|p| fs::read(p).ok())
    }
}
