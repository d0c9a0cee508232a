use serde::{Deserialize, Serialize};

/// The four request operands. None of them lowers the server status, so
/// once tracing is on, no request can switch it off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Connect,
    StartPassiveTracing,
    SendNewToolUse,
    GetEnforcementInfo,
}

impl Operand {
    pub const ALL: [Operand; 4] = [
        Operand::Connect,
        Operand::StartPassiveTracing,
        Operand::SendNewToolUse,
        Operand::GetEnforcementInfo,
    ];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ServerStatus {
    #[default]
    Fresh = 0,
    Connected = 1,
    Tracing = 2,
}

impl ServerStatus {
    pub const ALL: [ServerStatus; 3] = [
        ServerStatus::Fresh,
        ServerStatus::Connected,
        ServerStatus::Tracing,
    ];

    pub fn value(self) -> u8 {
        self as u8
    }
}

/// Server-side status machine. Only `connect` (fresh -> connected) and
/// `start_passive_tracing` (connected -> tracing) move the status; the two
/// data operands are accepted only while tracing. Everything else is
/// rejected and leaves the status where it was.
pub fn step_status(status: ServerStatus, op: Operand) -> (ServerStatus, bool) {
    use Operand::*;
    use ServerStatus::*;
    match (status, op) {
        (Fresh, Connect) => (Connected, true),
        (Connected, StartPassiveTracing) => (Tracing, true),
        (Tracing, SendNewToolUse | GetEnforcementInfo) => (Tracing, true),
        (s, _) => (s, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guarded_transitions() {
        assert_eq!(
            step_status(ServerStatus::Fresh, Operand::Connect),
            (ServerStatus::Connected, true)
        );
        assert_eq!(
            step_status(ServerStatus::Connected, Operand::StartPassiveTracing),
            (ServerStatus::Tracing, true)
        );
        assert_eq!(
            step_status(ServerStatus::Fresh, Operand::SendNewToolUse),
            (ServerStatus::Fresh, false)
        );
        assert_eq!(
            step_status(ServerStatus::Tracing, Operand::Connect),
            (ServerStatus::Tracing, false)
        );
    }

    #[test]
    fn status_values_match_wire_numbers() {
        assert_eq!(ServerStatus::Fresh.value(), 0);
        assert_eq!(ServerStatus::Connected.value(), 1);
        assert_eq!(ServerStatus::Tracing.value(), 2);
    }
}
