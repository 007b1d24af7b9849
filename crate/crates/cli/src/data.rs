//! `--data` specs: `cifar10:PATH`, `cifar100:PATH`, `dir:PATH`,
//! `synthetic-colour:N[:SIDE[:SEED]]` and `synthetic-chips:N[:SEED]`.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use cqlab::dataset::{all_chips, ingest_dataset, synthetic_chip_dataset, synthetic_colour_classes, Dataset, DatasetFormat};
use cqlab::wcs::HumanWcsMap;

use crate::manifest::{hash_path, InputRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Files { format: DatasetFormat, path: PathBuf },
    SyntheticColour { n: usize, side: usize, seed: u64 },
    SyntheticChips { n: usize, seed: u64 },
}

impl FromStr for DataSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| anyhow!("data spec {s:?} needs the form KIND:ARGS"))?;
        let nums = |rest: &str| -> Result<Vec<u64>> {
            rest.split(':').map(|p| p.parse::<u64>().map_err(|_| anyhow!("bad number {p:?} in data spec {s:?}"))).collect()
        };
        Ok(match kind {
            "cifar10" | "cifar100" | "dir" => DataSpec::Files { format: kind.parse()?, path: PathBuf::from(rest) },
            "synthetic-colour" => {
                let v = nums(rest)?;
                if v.is_empty() || v.len() > 3 || v[0] == 0 {
                    bail!("synthetic-colour takes N[:SIDE[:SEED]] with N > 0");
                }
                DataSpec::SyntheticColour { n: v[0] as usize, side: v.get(1).copied().unwrap_or(32) as usize, seed: v.get(2).copied().unwrap_or(7) }
            }
            "synthetic-chips" => {
                let v = nums(rest)?;
                if v.is_empty() || v.len() > 2 || v[0] == 0 {
                    bail!("synthetic-chips takes N[:SEED] with N > 0");
                }
                DataSpec::SyntheticChips { n: v[0] as usize, seed: v.get(1).copied().unwrap_or(11) }
            }
            other => bail!("unknown data kind {other:?}"),
        })
    }
}

impl DataSpec {
    /// Chip datasets label images by majority term of `hmap`.
    pub fn load(&self, hmap: Option<&HumanWcsMap>) -> Result<Dataset> {
        Ok(match self {
            DataSpec::Files { format, path } => ingest_dataset(path, *format)?,
            DataSpec::SyntheticColour { n, side, seed } => synthetic_colour_classes(*n, *side, *seed),
            DataSpec::SyntheticChips { n, seed } => {
                let hmap = hmap.ok_or_else(|| anyhow!("synthetic-chips data needs a human map (--hmap)"))?;
                synthetic_chip_dataset(*n, 32, 4, &all_chips(), &hmap.argmax(), hmap.colours(), *seed)?
            }
        })
    }

    pub fn record(&self, role: &str, raw: &str) -> Result<InputRecord> {
        let hash = match self {
            DataSpec::Files { path, .. } => hash_path(path)?,
            _ => cqlab::io::blob_hash(raw.as_bytes()),
        };
        Ok(InputRecord { role: role.into(), source: raw.into(), hash })
    }
}
