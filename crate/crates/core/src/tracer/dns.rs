use std::collections::HashMap;
use std::net::IpAddr;

/// Reverse map from resolved address to the domain that produced it.
/// The latest resolution for an address wins.
#[derive(Debug, Default, Clone)]
pub struct DnsMappingTable {
    entries: HashMap<IpAddr, (String, u64)>,
}

impl DnsMappingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, domain: &str, addresses: &[IpAddr], timestamp: u64) {
        for addr in addresses {
            self.entries.insert(*addr, (domain.to_string(), timestamp));
        }
    }

    pub fn lookup(&self, addr: &IpAddr) -> Option<&str> {
        self.entries.get(addr).map(|(d, _)| d.as_str())
    }

    pub fn resolved_at(&self, addr: &IpAddr) -> Option<u64> {
        self.entries.get(addr).map(|(_, ts)| *ts)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latest_resolution_wins() {
        let ip: IpAddr = "93.184.216.34".parse().unwrap();
        let mut t = DnsMappingTable::new();
        assert_eq!(t.lookup(&ip), None);
        t.record("a.com", &[ip], 1);
        t.record("b.com", &[ip], 2);
        assert_eq!(t.lookup(&ip), Some("b.com"));
        assert_eq!(t.resolved_at(&ip), Some(2));
        assert_eq!(t.lookup(&"10.0.0.1".parse().unwrap()), None);
    }
}
