//! On-disk formats: `EMB1` embedding files, metadata CSV tables and the JSON
//! manifest tying them together.
//!
//! `EMB1` layout, little-endian:
//!
//! ```text
//! "EMB1" | u32 version = 1 | u32 dim | u64 count
//! count x ( u16 id_len | id bytes (UTF-8) | dim x f32 )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Metadata, ObservationRecord, TAXONOMY_RANKS};
use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const REQUIRED_COLUMNS: [&str; 3] = ["observation_id", "species", "poisonous"];
const METADATA_COLUMNS: [&str; 15] = [
    "observation_id",
    "species",
    "poisonous",
    "substrate",
    "metasubstrate",
    "habitat",
    "month",
    "day",
    "latitude",
    "longitude",
    "phylum",
    "class",
    "order",
    "family",
    "genus",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub name: String,
    pub embeddings: PathBuf,
    pub metadata: PathBuf,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dim: usize,
    pub pools: Vec<PoolEntry>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest schema_version {}", manifest.schema_version),
            ));
        }
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Loaded pools keyed by name, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub pools: Vec<(String, Vec<ObservationRecord>)>,
}

impl Dataset {
    pub fn pool(&self, name: &str) -> Result<&[ObservationRecord]> {
        self.pools
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.as_slice())
            .ok_or_else(|| Error::invalid("pool", format!("manifest has no pool named `{name}`")))
    }
}

/// Number of worker threads for file loading, from `EMBEDHEAD_THREADS`.
pub fn worker_threads() -> usize {
    std::env::var("EMBEDHEAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let threads = worker_threads().min(manifest.pools.len()).max(1);
    let mut pools: Vec<Result<Vec<ObservationRecord>>> = Vec::with_capacity(manifest.pools.len());
    for group in manifest.pools.chunks(threads) {
        std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|p| s.spawn(move || load_pool(manifest, p))).collect();
            pools.extend(handles.into_iter().map(|h| h.join().expect("loader thread panicked")));
        });
    }
    let mut out = Vec::with_capacity(pools.len());
    for (entry, records) in manifest.pools.iter().zip(pools) {
        out.push((entry.name.clone(), records?));
    }
    Ok(Dataset { dim: manifest.dim, pools: out })
}

fn load_pool(manifest: &DatasetManifest, entry: &PoolEntry) -> Result<Vec<ObservationRecord>> {
    let emb_path = manifest.resolve(&entry.embeddings);
    let (dim, embeddings) = read_embeddings(&emb_path)?;
    if dim != manifest.dim {
        return Err(Error::Dimension {
            context: format!("embedding dimension of {}", emb_path.display()),
            expected: manifest.dim,
            actual: dim,
        });
    }
    if embeddings.len() != entry.count {
        return Err(Error::Dimension {
            context: format!("record count of pool `{}`", entry.name),
            expected: entry.count,
            actual: embeddings.len(),
        });
    }
    let meta_path = manifest.resolve(&entry.metadata);
    let rows = read_metadata(&meta_path)?;

    let mut by_id: HashMap<String, Vec<f32>> = HashMap::with_capacity(embeddings.len());
    for (id, v) in embeddings {
        if by_id.insert(id.clone(), v).is_some() {
            return Err(Error::format(&emb_path, format!("duplicate observation id `{id}`")));
        }
    }
    let mut records = Vec::with_capacity(rows.len());
    for mut r in rows {
        let emb = by_id.remove(&r.observation_id).ok_or_else(|| Error::Join {
            id: r.observation_id.clone(),
            missing: "embedding",
        })?;
        r.embedding = emb;
        r.validate(manifest.dim)?;
        records.push(r);
    }
    if let Some(id) = by_id.keys().min() {
        return Err(Error::Join {
            id: id.clone(),
            missing: "metadata row",
        });
    }
    Ok(records)
}

pub fn write_embeddings<'a>(path: &Path, dim: usize, items: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<()> {
    let items: Vec<_> = items.into_iter().collect();
    let mut buf = Vec::with_capacity(20 + items.len() * (8 + 4 * dim));
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(dim).map_err(|_| Error::invalid("dim", "exceeds u32"))?.to_le_bytes());
    buf.extend_from_slice(&(items.len() as u64).to_le_bytes());
    for (id, v) in items {
        if v.len() != dim {
            return Err(Error::Dimension {
                context: format!("embedding of `{id}`"),
                expected: dim,
                actual: v.len(),
            });
        }
        let len = u16::try_from(id.len()).map_err(|_| Error::invalid("observation_id", format!("`{id}` longer than 65535 bytes")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads an `EMB1` file into `(dim, [(id, embedding)])`. Nothing is returned
/// unless the whole file parses.
pub fn read_embeddings(path: &Path) -> Result<(usize, Vec<(String, Vec<f32>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4).ok() != Some(EMB_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad magic, expected EMB1"));
    }
    let version = cur.u32()?;
    if version != EMB_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let count = cur.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / (2 + 4 * dim.max(1))));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format(path, format!("observation id at byte {} is not UTF-8", cur.pos)))?
            .to_owned();
        let raw = cur.take(4 * dim)?;
        let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding of `{id}` in {}", path.display()),
            });
        }
        out.push((id, v));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((dim, out))
}

fn opt(s: &str) -> Option<String> {
    (!s.is_empty()).then(|| s.to_owned())
}

fn parse_opt<T: std::str::FromStr>(path: &Path, row: usize, column: &str, s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format(path, format!("row {row}: cannot parse {column} value {s:?}")))
}

/// Reads the metadata table. Embeddings of the returned records are empty.
pub fn read_metadata(path: &Path) -> Result<Vec<ObservationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers()?.clone();
    let col: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    for required in REQUIRED_COLUMNS {
        if !col.contains_key(required) {
            return Err(Error::format(path, format!("missing required column `{required}`")));
        }
    }
    let mut out = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 2;
        let get = |name: &str| col.get(name).and_then(|&i| row.get(i)).unwrap_or("");
        let id = get("observation_id");
        if id.is_empty() {
            return Err(Error::format(path, format!("row {row_no}: empty observation_id")));
        }
        let poisonous = match get("poisonous") {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(path, format!("row {row_no}: poisonous must be 0 or 1, got {other:?}"))),
        };
        let metadata = Metadata {
            substrate: opt(get("substrate")),
            metasubstrate: opt(get("metasubstrate")),
            habitat: opt(get("habitat")),
            month: parse_opt(path, row_no, "month", get("month"))?,
            day: parse_opt(path, row_no, "day", get("day"))?,
            latitude: parse_opt(path, row_no, "latitude", get("latitude"))?,
            longitude: parse_opt(path, row_no, "longitude", get("longitude"))?,
        };
        let taxonomy = TAXONOMY_RANKS
            .iter()
            .filter_map(|&rank| opt(get(rank)).map(|v| (rank.to_owned(), v)))
            .collect();
        out.push(ObservationRecord {
            observation_id: id.to_owned(),
            embedding: Vec::new(),
            species: get("species").to_owned(),
            poisonous,
            metadata,
            taxonomy,
        });
    }
    Ok(out)
}

pub fn write_metadata<'a>(path: &Path, records: impl IntoIterator<Item = &'a ObservationRecord>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(METADATA_COLUMNS)?;
    let show = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        let m = &r.metadata;
        let mut row = vec![
            r.observation_id.clone(),
            r.species.clone(),
            if r.poisonous { "1".into() } else { "0".into() },
            show(m.substrate.clone()),
            show(m.metasubstrate.clone()),
            show(m.habitat.clone()),
            show(m.month.map(|v| v.to_string())),
            show(m.day.map(|v| v.to_string())),
            show(m.latitude.map(|v| v.to_string())),
            show(m.longitude.map(|v| v.to_string())),
        ];
        row.extend(TAXONOMY_RANKS.iter().map(|rank| show(r.taxonomy.get(*rank).cloned())));
        w.write_record(&row)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::rec;

    fn write_pool(dir: &Path, name: &str, records: &[ObservationRecord], dim: usize) -> PoolEntry {
        let emb = format!("{name}.emb");
        let meta = format!("{name}.csv");
        write_embeddings(&dir.join(&emb), dim, records.iter().map(|r| (r.observation_id.as_str(), r.embedding.as_slice()))).unwrap();
        write_metadata(&dir.join(&meta), records).unwrap();
        PoolEntry {
            name: name.into(),
            embeddings: emb.into(),
            metadata: meta.into(),
            count: records.len(),
        }
    }

    fn fixture(dir: &Path) -> (PathBuf, Vec<ObservationRecord>) {
        let mut records = vec![rec("a", "S1"), rec("b", "S2"), rec("c", "S1")];
        for (i, r) in records.iter_mut().enumerate() {
            r.embedding = vec![i as f32, 0.5, -1.0, 2.0];
        }
        records[1].metadata.month = Some(4);
        records[1].metadata.latitude = Some(55.25);
        records[1].metadata.substrate = Some("bark, with moss".into());
        records[2].taxonomy.insert("genus".into(), "Boletus".into());
        records[2].poisonous = true;
        let entry = write_pool(dir, "train", &records, 4);
        let manifest = DatasetManifest {
            schema_version: MANIFEST_VERSION,
            dim: 4,
            pools: vec![entry],
            base_dir: PathBuf::new(),
        };
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        (path, records)
    }

    #[test]
    fn loads_and_joins() {
        let dir = tempfile::tempdir().unwrap();
        let (path, records) = fixture(dir.path());
        let ds = load_dataset(&DatasetManifest::load(&path).unwrap()).unwrap();
        let pool = ds.pool("train").unwrap();
        assert_eq!(pool.len(), 3);
        assert!(pool.iter().all(|r| r.embedding.len() == 4));
        assert_eq!(pool, records.as_slice());
    }

    #[test]
    fn metadata_without_embedding_is_a_join_error() {
        let dir = tempfile::tempdir().unwrap();
        let (path, records) = fixture(dir.path());
        let mut extra = records.clone();
        extra.push(rec("orphan", "S1"));
        write_metadata(&dir.path().join("train.csv"), &extra).unwrap();
        let err = load_dataset(&DatasetManifest::load(&path).unwrap()).unwrap_err();
        assert!(matches!(&err, Error::Join { id, .. } if id == "orphan"), "{err}");
    }

    #[test]
    fn embedding_without_metadata_is_a_join_error() {
        let dir = tempfile::tempdir().unwrap();
        let (path, records) = fixture(dir.path());
        write_metadata(&dir.path().join("train.csv"), &records[..2]).unwrap();
        let err = load_dataset(&DatasetManifest::load(&path).unwrap()).unwrap_err();
        assert!(matches!(&err, Error::Join { id, .. } if id == "c"), "{err}");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = fixture(dir.path());
        let emb = dir.path().join("train.emb");
        let mut bytes = fs::read(&emb).unwrap();
        bytes[0] = b'X';
        fs::write(&emb, bytes).unwrap();
        let err = load_dataset(&DatasetManifest::load(&path).unwrap()).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_and_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (path, _) = fixture(dir.path());
        let emb = dir.path().join("train.emb");
        let bytes = fs::read(&emb).unwrap();
        fs::write(&emb, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_embeddings(&emb).unwrap_err().to_string().contains("truncated"));
        fs::write(&emb, &bytes).unwrap();
        let mut m = DatasetManifest::load(&path).unwrap();
        m.dim = 5;
        assert!(matches!(load_dataset(&m), Err(Error::Dimension { expected: 5, actual: 4, .. })));
    }

    #[test]
    fn non_finite_embedding_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let v = [1.0f32, f32::INFINITY];
        write_embeddings(&p, 2, [("bad-id", v.as_slice())]).unwrap();
        let err = read_embeddings(&p).unwrap_err();
        assert!(err.to_string().contains("bad-id"), "{err}");
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let v = [1.0f32, -2.0];
        write_embeddings(&p, 2, [("ab", v.as_slice())]).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut want = b"EMB1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"ab");
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn parallel_loading_matches_serial() {
        let dir = tempfile::tempdir().unwrap();
        let (path, records) = fixture(dir.path());
        let mut m = DatasetManifest::load(&path).unwrap();
        m.pools.push(write_pool(dir.path(), "val", &records, 4));
        m.pools.push(write_pool(dir.path(), "test", &records[..1], 4));
        let serial = load_dataset(&m).unwrap();
        std::env::set_var("EMBEDHEAD_THREADS", "3");
        let parallel = load_dataset(&m).unwrap();
        std::env::remove_var("EMBEDHEAD_THREADS");
        assert_eq!(serial, parallel);
    }
}
