//! Request/response payloads carried inside frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::status::Operand;
use crate::model::{Action, AgentBasicInfo, EnforcementOutcome, Message};

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("payload is not valid JSON for this message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("operand {operand:?} carries invalid data: {reason}")]
    BadData { operand: Operand, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub request_id: u64,
    pub operand: Operand,
    #[serde(default)]
    pub data: serde_json::Value,
}

/// Data of a `send_new_tool_use` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolUseBatch {
    #[serde(default)]
    pub messages: Vec<Message>,
    pub action: Action,
}

/// Typed view of a request's data, checked against its operand.
#[derive(Debug, Clone, PartialEq)]
pub enum RequestBody {
    Connect(AgentBasicInfo),
    StartPassiveTracing,
    SendNewToolUse(ToolUseBatch),
    GetEnforcementInfo,
}

impl ClientRequest {
    pub fn new(request_id: u64, operand: Operand, data: serde_json::Value) -> Self {
        Self {
            request_id,
            operand,
            data,
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PayloadError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }

    pub fn body(&self) -> Result<RequestBody, PayloadError> {
        let bad = |reason: String| PayloadError::BadData {
            operand: self.operand,
            reason,
        };
        match self.operand {
            Operand::Connect => {
                let info: AgentBasicInfo =
                    serde_json::from_value(self.data.clone()).map_err(|e| bad(e.to_string()))?;
                info.validate().map_err(|e| bad(e.to_string()))?;
                Ok(RequestBody::Connect(info))
            }
            Operand::SendNewToolUse => {
                let batch: ToolUseBatch =
                    serde_json::from_value(self.data.clone()).map_err(|e| bad(e.to_string()))?;
                batch.action.validate().map_err(|e| bad(e.to_string()))?;
                if batch.messages.windows(2).any(|w| w[0].seq >= w[1].seq) {
                    return Err(bad("message seq must be strictly increasing".into()));
                }
                Ok(RequestBody::SendNewToolUse(batch))
            }
            Operand::StartPassiveTracing | Operand::GetEnforcementInfo => {
                if !is_empty_data(&self.data) {
                    return Err(bad("expected empty data".into()));
                }
                Ok(match self.operand {
                    Operand::StartPassiveTracing => RequestBody::StartPassiveTracing,
                    _ => RequestBody::GetEnforcementInfo,
                })
            }
        }
    }
}

fn is_empty_data(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Null => true,
        serde_json::Value::Object(m) => m.is_empty(),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultCode {
    Ok,
    AlertPending,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerResponse {
    pub request_id: u64,
    pub result: ResultCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<EnforcementOutcome>,
    /// Human-readable reason, only on `protocol_error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ServerResponse {
    pub fn ok(request_id: u64) -> Self {
        Self {
            request_id,
            result: ResultCode::Ok,
            payload: None,
            message: None,
        }
    }

    pub fn alert(request_id: u64, outcome: EnforcementOutcome) -> Self {
        Self {
            request_id,
            result: ResultCode::AlertPending,
            payload: Some(outcome),
            message: None,
        }
    }

    pub fn protocol_error(request_id: u64, message: impl Into<String>) -> Self {
        Self {
            request_id,
            result: ResultCode::ProtocolError,
            payload: None,
            message: Some(message.into()),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PayloadError> {
        let resp: Self = serde_json::from_slice(bytes)?;
        if resp.payload.is_some() != (resp.result == ResultCode::AlertPending) {
            return Err(PayloadError::Json(serde::de::Error::custom(
                "payload must be present iff result is alert_pending",
            )));
        }
        Ok(resp)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }
}
