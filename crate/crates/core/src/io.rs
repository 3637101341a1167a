//! Chain record files and run manifests.
//!
//! A chain CSV starts with one provenance line
//! `# mlmcmc <version> config_hash=<hex> data_hash=<hex> mode=<mode> chain=<k>`
//! followed by a header row and one row per step of any level.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{CoarseMode, RunSummary, SampleRecord};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHAIN_COLUMNS: [&str; 7] = [
    "sample_index",
    "level",
    "Q",
    "Y",
    "accepted",
    "stage1_accepted",
    "wall_ms",
];
const MAGIC: &str = "# mlmcmc";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub tool_version: String,
    pub config_hash: String,
    pub data_hash: String,
    pub mode: CoarseMode,
    pub chain: usize,
}

impl ChainHeader {
    pub fn to_line(&self) -> String {
        format!(
            "{MAGIC} {} config_hash={} data_hash={} mode={} chain={}",
            self.tool_version, self.config_hash, self.data_hash, self.mode, self.chain
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("chain header: {what}"));
        let rest = line
            .trim_end()
            .strip_prefix(MAGIC)
            .ok_or_else(|| bad("missing '# mlmcmc' prefix"))?;
        let mut parts = rest.split_whitespace();
        let tool_version = parts.next().ok_or_else(|| bad("missing version"))?.to_string();
        let mut field = |key: &str| -> Result<String> {
            let token = parts.next().ok_or_else(|| bad(&format!("missing {key}")))?;
            token
                .strip_prefix(key)
                .and_then(|t| t.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}=..., got '{token}'")))
        };
        let config_hash = field("config_hash")?;
        let data_hash = field("data_hash")?;
        let mode = field("mode")?.parse().map_err(|_| bad("unknown mode"))?;
        let chain = field("chain")?
            .parse()
            .map_err(|_| bad("chain index is not an integer"))?;
        if parts.next().is_some() {
            return Err(bad("trailing fields"));
        }
        for hash in [&config_hash, &data_hash] {
            if hash.is_empty() || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(bad("hashes must be hexadecimal"));
            }
        }
        Ok(Self {
            tool_version,
            config_hash,
            data_hash,
            mode,
            chain,
        })
    }
}

/// Streams records to CSV.
pub struct ChainWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ChainWriter<W> {
    pub fn new(mut sink: W, header: &ChainHeader) -> Result<Self> {
        writeln!(sink, "{}", header.to_line())?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(CHAIN_COLUMNS).map_err(csv_error)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &SampleRecord) -> Result<()> {
        self.inner.serialize(record).map_err(csv_error)
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.inner.flush()?)
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::new(e.error().kind(), e.to_string())))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Reads a chain CSV written by [`ChainWriter`].
pub fn read_chain<R: BufRead>(mut source: R) -> Result<(ChainHeader, Vec<SampleRecord>)> {
    let mut first = String::new();
    source.read_line(&mut first)?;
    let header = ChainHeader::parse(&first)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let columns = reader.headers().map_err(csv_error)?;
    if columns.iter().ne(CHAIN_COLUMNS) {
        return Err(Error::Format(format!(
            "chain columns must be {}",
            CHAIN_COLUMNS.join(",")
        )));
    }
    let mut records = Vec::new();
    for row in reader.deserialize::<SampleRecord>() {
        let r = row.map_err(csv_error)?;
        if !(r.qoi.is_finite() && r.y.is_finite()) {
            return Err(Error::Format(format!("non-finite value in record {}", records.len())));
        }
        if !(r.wall_ms.is_finite() && r.wall_ms >= 0.0) {
            return Err(Error::Format(format!("invalid wall time in record {}", records.len())));
        }
        if r.accepted && !r.stage1_accepted {
            return Err(Error::Format(format!(
                "record {} is accepted without a first-stage acceptance",
                records.len()
            )));
        }
        records.push(r);
    }
    Ok((header, records))
}

pub fn read_chain_file(path: &std::path::Path) -> Result<(ChainHeader, Vec<SampleRecord>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingDependency(format!("cannot open {}: {e}", path.display())))?;
    read_chain(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Aborted,
}

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// What produced one chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub data_hash: String,
    pub surrogate_hash: Option<String>,
    pub mode: CoarseMode,
    pub chain: usize,
    pub seed: u64,
    pub top_level: usize,
    pub betas: Vec<f64>,
    pub subsample: Vec<usize>,
    pub n_fine_samples: usize,
    pub records: u64,
    pub chain_file: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub summary: Option<RunSummary>,
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                m.format_version
            )));
        }
        if m.betas.len() != m.top_level + 1 || m.subsample.len() != m.top_level {
            return Err(Error::Format("manifest level counts disagree".into()));
        }
        if m.status == RunStatus::Aborted && m.error.is_none() {
            return Err(Error::Format("aborted run without an error message".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
