//! SayHello handshake.
//!
//! The client opens with `{"magic":"A2M1","version":1,"nonce":"<hex>"}`.
//! The server answers with the same shape, echoing the nonce, or with an
//! `error` field followed by closing the connection.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &str = "A2M1";
pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_HELLO_TIMEOUT: Duration = Duration::from_secs(5);
const MAX_NONCE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub magic: String,
    pub version: u32,
    pub nonce: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HelloError {
    #[error("hello is not valid JSON: {0}")]
    Malformed(String),
    #[error("bad magic {0:?}")]
    BadMagic(String),
    #[error("protocol version mismatch: peer {peer}, local {local}")]
    VersionMismatch { peer: u32, local: u32 },
    #[error("nonce must be 1..={MAX_NONCE_LEN} lowercase hex characters")]
    BadNonce,
    #[error("server echoed a different nonce")]
    NonceMismatch,
    #[error("server refused handshake: {0}")]
    Refused(String),
    #[error("no hello within {0:?}")]
    Timeout(Duration),
}

impl Hello {
    pub fn new(nonce: impl Into<String>) -> Self {
        Self::with_version(nonce, PROTOCOL_VERSION)
    }

    pub fn with_version(nonce: impl Into<String>, version: u32) -> Self {
        Self {
            magic: MAGIC.to_string(),
            version,
            nonce: nonce.into(),
            error: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("hello serializes")
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, HelloError> {
        serde_json::from_slice(bytes).map_err(|e| HelloError::Malformed(e.to_string()))
    }
}

pub fn random_nonce() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

fn valid_nonce(nonce: &str) -> bool {
    !nonce.is_empty()
        && nonce.len() <= MAX_NONCE_LEN
        && nonce.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Server side: validates the client's hello and builds the reply. On
/// error the reply still carries the server's version so the client can
/// report the mismatch; the caller must close after sending it.
pub fn accept_hello(bytes: &[u8]) -> (Hello, Result<String, HelloError>) {
    let fail = |nonce: String, err: HelloError| {
        let mut reply = Hello::new(nonce);
        reply.error = Some(err.to_string());
        (reply, Err(err))
    };
    let hello = match Hello::parse(bytes) {
        Ok(h) => h,
        Err(e) => return fail(String::new(), e),
    };
    if hello.magic != MAGIC {
        return fail(String::new(), HelloError::BadMagic(hello.magic));
    }
    if hello.version != PROTOCOL_VERSION {
        return fail(
            hello.nonce,
            HelloError::VersionMismatch {
                peer: hello.version,
                local: PROTOCOL_VERSION,
            },
        );
    }
    if !valid_nonce(&hello.nonce) {
        return fail(String::new(), HelloError::BadNonce);
    }
    let nonce = hello.nonce.clone();
    (Hello::new(hello.nonce), Ok(nonce))
}

/// Client side: checks the server's reply against what was sent.
pub fn check_reply(sent: &Hello, reply_bytes: &[u8]) -> Result<(), HelloError> {
    let reply = Hello::parse(reply_bytes)?;
    if let Some(err) = reply.error {
        return Err(HelloError::Refused(err));
    }
    if reply.magic != MAGIC {
        return Err(HelloError::BadMagic(reply.magic));
    }
    if reply.version != sent.version {
        return Err(HelloError::VersionMismatch {
            peer: reply.version,
            local: sent.version,
        });
    }
    if reply.nonce != sent.nonce {
        return Err(HelloError::NonceMismatch);
    }
    Ok(())
}
