//! Versioned, checksummed perceptual-model tables.
//!
//! The tables ship as a plain-text data file compiled into the crate; an
//! alternative file with the same layout can be loaded at runtime. Every
//! load verifies the embedded sha256 checksum before any value is used.

use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of Bark bands in the perceptual model.
pub const BARK_BANDS: usize = 49;

/// Environment variable naming an alternative table-data file.
pub const TABLES_ENV_VAR: &str = "SPEECHLOSS_PESQ_TABLES";

const STANDARD_SOURCE: &str = include_str!("tables.txt");

const SECTIONS: [&str; 7] = [
    "band_edges",
    "silence_threshold_clean",
    "silence_threshold_noisy",
    "band_weights",
    "hearing_threshold",
    "loudness_scale",
    "zwicker_power",
];

/// Constants of the perceptual model for a 512-point, 16 kHz spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PesqTables {
    /// Free-text revision line from the data file header.
    pub revision: String,
    /// `BARK_BANDS + 1` bin edges; band `i` covers bins `[edges[i], edges[i+1])`.
    pub band_edges: Vec<usize>,
    /// Per-band power thresholds gating the clean-side equalization average.
    pub silence_threshold_clean: Vec<f64>,
    /// Per-band power thresholds gating the estimate-side equalization average.
    pub silence_threshold_noisy: Vec<f64>,
    /// Per-band weights of the frame-disturbance norms.
    pub band_weights: Vec<f64>,
    /// Absolute hearing threshold power per band.
    pub hearing_threshold: Vec<f64>,
    /// Loudness scaling per band.
    pub loudness_scale: Vec<f64>,
    /// Exponent of the loudness law.
    pub zwicker_power: f64,
    /// Hex sha256 of the canonical table body.
    pub checksum: String,
}

impl PesqTables {
    /// The tables compiled into the crate.
    pub fn standard() -> &'static PesqTables {
        static TABLES: OnceLock<PesqTables> = OnceLock::new();
        TABLES.get_or_init(|| {
            PesqTables::parse(STANDARD_SOURCE).expect("embedded table data is valid")
        })
    }

    /// Loads and verifies a table-data file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<PesqTables> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PesqTables::parse(&text)
    }

    /// Loads the file named by [`TABLES_ENV_VAR`] if set, else the standard tables.
    pub fn from_env_or_standard() -> Result<PesqTables> {
        match std::env::var_os(TABLES_ENV_VAR) {
            Some(path) if !path.is_empty() => PesqTables::from_file(path),
            _ => Ok(PesqTables::standard().clone()),
        }
    }

    /// Parses table data, verifying the checksum and every invariant.
    pub fn parse(text: &str) -> Result<PesqTables> {
        let mut revision = String::new();
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(rev) = comment.trim().strip_prefix("revision:") {
                    revision = rev.trim().to_string();
                }
                continue;
            }
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(Error::Tables(format!("duplicate section `{name}`")));
                }
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            match sections.last_mut() {
                Some((_, tokens)) => tokens.extend(line.split_whitespace().map(str::to_string)),
                None => return Err(Error::Tables(format!("value outside a section: `{line}`"))),
            }
        }

        let checksum = match sections.iter().position(|(n, _)| n == "checksum") {
            Some(i) => {
                let (_, tokens) = sections.remove(i);
                match tokens.as_slice() {
                    [t] => t
                        .strip_prefix("sha256:")
                        .ok_or_else(|| Error::Tables("checksum must be `sha256:<hex>`".into()))?
                        .to_ascii_lowercase(),
                    _ => return Err(Error::Tables("checksum section needs one token".into())),
                }
            }
            None => return Err(Error::Tables("missing checksum section".into())),
        };
        let mut hasher = Sha256::new();
        for (name, tokens) in &sections {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
            hasher.update(tokens.join(" ").as_bytes());
            hasher.update(b"\n");
        }
        let actual = hex::encode(hasher.finalize());
        if actual != checksum {
            return Err(Error::Tables(format!(
                "checksum mismatch: file declares {checksum}, body hashes to {actual}"
            )));
        }

        let names: Vec<&str> = sections.iter().map(|(n, _)| n.as_str()).collect();
        if names != SECTIONS {
            return Err(Error::Tables(format!(
                "expected sections {SECTIONS:?} in order, found {names:?}"
            )));
        }
        let floats = |i: usize| -> Result<Vec<f64>> {
            let (name, tokens) = &sections[i];
            tokens
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Tables(format!("bad number `{t}` in `{name}`")))
                })
                .collect()
        };
        let band_edges = sections[0]
            .1
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Tables(format!("bad bin index `{t}` in `band_edges`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let zwicker = floats(6)?;
        let tables = PesqTables {
            revision,
            band_edges,
            silence_threshold_clean: floats(1)?,
            silence_threshold_noisy: floats(2)?,
            band_weights: floats(3)?,
            hearing_threshold: floats(4)?,
            loudness_scale: floats(5)?,
            zwicker_power: match zwicker.as_slice() {
                [v] => *v,
                _ => return Err(Error::Tables("zwicker_power needs one value".into())),
            },
            checksum: actual,
        };
        tables.validate()?;
        Ok(tables)
    }

    fn validate(&self) -> Result<()> {
        if self.band_edges.len() != BARK_BANDS + 1 {
            return Err(Error::Tables(format!(
                "band_edges needs {} entries, found {}",
                BARK_BANDS + 1,
                self.band_edges.len()
            )));
        }
        if self.band_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Tables("band_edges must be strictly increasing".into()));
        }
        for (name, values) in [
            ("silence_threshold_clean", &self.silence_threshold_clean),
            ("silence_threshold_noisy", &self.silence_threshold_noisy),
            ("band_weights", &self.band_weights),
            ("hearing_threshold", &self.hearing_threshold),
            ("loudness_scale", &self.loudness_scale),
        ] {
            if values.len() != BARK_BANDS {
                return Err(Error::Tables(format!(
                    "{name} needs {BARK_BANDS} values, found {}",
                    values.len()
                )));
            }
            if values.iter().any(|&v| v <= 0.0) {
                return Err(Error::Tables(format!("{name} values must be positive")));
            }
        }
        if self.zwicker_power <= 0.0 {
            return Err(Error::Tables("zwicker_power must be positive".into()));
        }
        Ok(())
    }

    /// Bins `[start, end)` of band `i`.
    pub fn band(&self, i: usize) -> std::ops::Range<usize> {
        self.band_edges[i]..self.band_edges[i + 1]
    }

    /// Number of spectrum bins the tables expect (one past the last band).
    pub fn bins_required(&self) -> usize {
        self.band_edges[BARK_BANDS]
    }
}
