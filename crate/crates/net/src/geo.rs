//! Address to country lookup and client identity hashing.

use std::io::Read;
use std::net::{IpAddr, Ipv6Addr};

use crossprobe_core::Region;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub trait GeoLookup: Send + Sync {
    /// Region for an address; [`Region::UNKNOWN`] on a miss.
    fn lookup(&self, ip: IpAddr) -> Region;
}

/// Answers every lookup with the same region.
#[derive(Debug, Clone, Copy)]
pub struct FixedGeo(pub Region);

impl GeoLookup for FixedGeo {
    fn lookup(&self, _ip: IpAddr) -> Region {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("geolocation csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("geolocation csv line {line}: {reason}")]
    Row { line: u64, reason: String },
}

/// Inclusive address ranges loaded from `start,end,CC` rows.
#[derive(Debug, Clone, Default)]
pub struct RangeGeo {
    ranges: Vec<(u128, u128, Region)>,
}

fn key(ip: IpAddr) -> u128 {
    match ip {
        IpAddr::V4(v4) => u128::from(v4.to_ipv6_mapped()),
        IpAddr::V6(v6) => u128::from(v6),
    }
}

impl RangeGeo {
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, GeoError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut ranges = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |reason: String| GeoError::Row { line, reason };
            if row.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", row.len())));
            }
            let start: IpAddr = row[0].parse().map_err(|_| bad(format!("bad address {:?}", &row[0])))?;
            let end: IpAddr = row[1].parse().map_err(|_| bad(format!("bad address {:?}", &row[1])))?;
            let region: Region = row[2].parse().map_err(|_| bad(format!("bad region {:?}", &row[2])))?;
            let (s, e) = (key(start), key(end));
            if s > e {
                return Err(bad("range start after end".into()));
            }
            ranges.push((s, e, region));
        }
        ranges.sort_by_key(|r| r.0);
        if let Some(w) = ranges.windows(2).find(|w| w[1].0 <= w[0].1) {
            return Err(GeoError::Row {
                line: 0,
                reason: format!(
                    "overlapping ranges starting at {} and {}",
                    Ipv6Addr::from(w[0].0),
                    Ipv6Addr::from(w[1].0)
                ),
            });
        }
        Ok(Self { ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

impl GeoLookup for RangeGeo {
    fn lookup(&self, ip: IpAddr) -> Region {
        let k = key(ip);
        let idx = self.ranges.partition_point(|r| r.0 <= k);
        match idx.checked_sub(1).map(|i| self.ranges[i]) {
            Some((_, end, region)) if k <= end => region,
            _ => Region::UNKNOWN,
        }
    }
}

/// Opaque client token: truncated SHA-256 of salt and address.
pub fn client_id(salt: &str, ip: IpAddr) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(ip.to_string().as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
