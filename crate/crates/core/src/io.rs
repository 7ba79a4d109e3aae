//! Run artifacts: config hashing, CSV tables stamped with the config hash
//! and seed, and parameter checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// SHA-256 of the canonical JSON of `cfg` (object keys sorted, no
/// whitespace), hex encoded.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    // serde_json's default map is ordered, so re-serializing a Value sorts keys.
    let canonical = serde_json::to_string(&serde_json::to_value(cfg)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Provenance stamped on every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new<T: Serialize>(cfg: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            config_hash: config_hash(cfg)?,
            seed,
        })
    }

    fn header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }

    fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?;
        let mut hash = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=')? {
                ("config_hash", v) => hash = Some(v.to_string()),
                ("seed", v) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(Self {
            config_hash: hash?,
            seed: seed?,
        })
    }
}

/// A CSV table held as strings; numbers are written in shortest
/// round-trip form so reruns compare bitwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

pub fn num(x: f64) -> String {
    format!("{x:?}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument {
            arg: "csv",
            reason: format!("{other:?}"),
        },
    }
}

/// Writes the stamp line followed by the table; creates parent directories.
pub fn write_csv(path: &Path, stamp: &Stamp, table: &Table) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = stamp.header().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(&table.header).map_err(csv_err)?;
        for r in &table.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Stamp, Table)> {
    let text = fs::read_to_string(path)?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let stamp = Stamp::parse(first).ok_or_else(|| Error::InvalidArgument {
        arg: "csv",
        reason: format!("{} lacks the config_hash/seed line", path.display()),
    })?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    Ok((stamp, Table { header, rows }))
}

/// Pretty JSON with the stamp merged in as top-level fields.
pub fn write_json<T: Serialize>(path: &Path, stamp: &Stamp, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("config_hash".into(), stamp.config_hash.clone().into());
        m.insert("seed".into(), stamp.seed.into());
    }
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    /// Shapes of w1, b1, w2, b2 and the token table, in file order.
    pub shapes: Vec<(String, Vec<usize>)>,
    pub n_values: usize,
    pub seed: u64,
    pub step: usize,
    pub config_hash: String,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `params.flat()` as little-endian f64 to `path` (conventionally
/// `.bin`) and the metadata next to it with a `.json` extension.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, stamp: &Stamp, step: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let flat = params.flat();
    let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let mut shapes = vec![
        ("w1".to_string(), params.w1.shape().to_vec()),
        ("b1".to_string(), params.b1.shape().to_vec()),
        ("w2".to_string(), params.w2.shape().to_vec()),
        ("b2".to_string(), params.b2.shape().to_vec()),
    ];
    if let Some(t) = &params.token_emb {
        shapes.push(("token_emb".into(), t.shape().to_vec()));
    }
    if params.gamma_trainable {
        shapes.push(("gamma".into(), vec![1]));
    }
    let meta = CheckpointMeta {
        encoder: params.config(),
        shapes,
        n_values: flat.len(),
        seed: stamp.seed,
        step,
        config_hash: stamp.config_hash.clone(),
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != 8 * meta.n_values {
        return Err(Error::DimensionMismatch {
            expected: 8 * meta.n_values,
            got: bytes.len(),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = EncoderParams::init(&meta.encoder, SeedStream::new(0))?;
    params.set_flat(&flat)?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn hash_ignores_key_order() {
        let mut a = serde_json::Map::new();
        a.insert("x".into(), 1.into());
        a.insert("y".into(), 2.into());
        let b: BTreeMap<&str, i32> = [("y", 2), ("x", 1)].into_iter().collect();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&b).unwrap(), config_hash(&[1, 2]).unwrap());
        assert_eq!(config_hash(&b).unwrap().len(), 64);
    }

    #[test]
    fn csv_round_trip_keeps_stamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/t.csv");
        let stamp = Stamp {
            config_hash: "ab".repeat(32),
            seed: 9,
        };
        let mut t = Table::new(["a", "b"]);
        t.push(vec![num(0.1 + 0.2), "x,y".into()]);
        write_csv(&path, &stamp, &t).unwrap();
        let (s, back) = read_csv(&path).unwrap();
        assert_eq!(s, stamp);
        assert_eq!(back, t);
        assert_eq!(back.rows[0][0].parse::<f64>().unwrap(), 0.1 + 0.2);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EncoderConfig::new(3, 5, 4, 10.0).with_vocab(7);
        cfg.gamma_trainable = true;
        let mut p = EncoderParams::init(&cfg, SeedStream::new(4)).unwrap();
        p.gamma = 8.25;
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &p, &Stamp { config_hash: "0".into(), seed: 4 }, 12).unwrap();
        let (q, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.step, 12);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 8 * p.n_params());
    }
}
