//! Knowledge-base feature store and query sets.
//!
//! A store is a directory holding `store.wcft` and `manifest.json`. The binary file is
//!
//! ```text
//! header  "WCFT" | version u32 | D u32 | D_t u32 | N_t_max u32 | entities u64 | crc32 u32
//! record  payload_len u64 | payload | crc32(payload_len bytes ++ payload) u32
//! payload id_len u32 | id utf-8 | valid_len u32 | n_tokens u32 | tokens f32[n_tokens·D_t]
//!         | n_images u32 | per image: n_patches u32 | patches f32[n_patches·D] | pooled f32[D]
//! ```
//!
//! All integers and floats are little-endian; matrices are row-major. The manifest repeats
//! the header fields plus each record's byte offset, length and checksum, and is what
//! random-access reads seek by. Image 0 of every entity is its primary image.

use crate::codec::{crc32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};
use crate::vgka::{PatchFeatures, TokenEmbeddings};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub const STORE_MAGIC: &[u8; 4] = b"WCFT";
pub const STORE_VERSION: u32 = 1;
pub const STORE_FILE: &str = "store.wcft";
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 32;
/// Allowed deviation of a pooled image vector from unit norm.
pub const UNIT_NORM_TOL: f32 = 1e-4;

/// Every ingested tensor of one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub entity_id: String,
    pub tokens: TokenEmbeddings<f32>,
    /// Patch features per image; index 0 is the primary image.
    pub images: Vec<PatchFeatures<f32>>,
    /// Unit-norm pooled feature per image, same order as `images`.
    pub pooled: Vec<Vec<f32>>,
}

impl FeatureBundle {
    pub fn primary(&self) -> &PatchFeatures<f32> {
        &self.images[0]
    }
}

/// Store-wide dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDims {
    pub d_model: usize,
    pub d_text: usize,
    pub n_t_max: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub entity_id: String,
    /// Byte offset of the record's length prefix.
    pub offset: u64,
    /// Total record size including length prefix and checksum.
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    #[serde(flatten)]
    pub dims: StoreDims,
    pub entity_count: u64,
    pub records: Vec<RecordEntry>,
}

/// Keeps the first `min(valid_len, n_t_max)` rows.
pub fn truncate_tokens(t: &TokenEmbeddings<f32>, n_t_max: usize) -> TokenEmbeddings<f32> {
    let keep = t.valid_len.min(n_t_max).min(t.tokens.rows());
    TokenEmbeddings {
        tokens: t.tokens.truncate_rows(keep),
        valid_len: keep,
    }
}

fn check_bundle(b: &FeatureBundle, dims: &StoreDims) -> std::result::Result<(), String> {
    let (t, vl) = (&b.tokens.tokens, b.tokens.valid_len);
    if t.cols() != dims.d_text {
        return Err(format!("token width {} != D_t {}", t.cols(), dims.d_text));
    }
    if t.rows() > dims.n_t_max {
        return Err(format!(
            "{} tokens exceed N_t_max {}",
            t.rows(),
            dims.n_t_max
        ));
    }
    if vl > t.rows() {
        return Err(format!("valid_len {vl} exceeds {} token rows", t.rows()));
    }
    if !t.is_finite() {
        return Err("token embeddings contain non-finite values".into());
    }
    if b.images.is_empty() {
        return Err("entity has no images".into());
    }
    if b.images.len() != b.pooled.len() {
        return Err(format!(
            "{} images but {} pooled vectors",
            b.images.len(),
            b.pooled.len()
        ));
    }
    for (i, (img, pooled)) in b.images.iter().zip(&b.pooled).enumerate() {
        let p = &img.patches;
        if p.rows() == 0 || p.cols() != dims.d_model {
            return Err(format!(
                "image {i} patches are {}x{}, expected Nx{}",
                p.rows(),
                p.cols(),
                dims.d_model
            ));
        }
        if !p.is_finite() {
            return Err(format!("image {i} patches contain non-finite values"));
        }
        if pooled.len() != dims.d_model {
            return Err(format!(
                "image {i} pooled vector has length {}",
                pooled.len()
            ));
        }
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(format!(
                "image {i} pooled vector contains non-finite values"
            ));
        }
        let n = norm(pooled);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(format!("image {i} pooled vector has norm {n}, expected 1"));
        }
    }
    Ok(())
}

fn encode_payload(b: &FeatureBundle) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.str(&b.entity_id);
    w.len_u32(b.tokens.valid_len);
    w.len_u32(b.tokens.tokens.rows());
    w.reals(b.tokens.tokens.data());
    w.len_u32(b.images.len());
    for (img, pooled) in b.images.iter().zip(&b.pooled) {
        w.len_u32(img.patches.rows());
        w.reals(img.patches.data());
        w.reals(pooled);
    }
    w.buf
}

fn decode_payload(r: &mut ByteReader, dims: &StoreDims) -> Result<FeatureBundle> {
    let entity_id = r.str("entity id")?;
    r.set_record(entity_id.clone());
    let valid_len = r.u32("valid_len")? as usize;
    let n_tokens = r.count(4 * dims.d_text, "token count")?;
    if valid_len > n_tokens {
        return Err(r.err(format!("valid_len {valid_len} exceeds {n_tokens} tokens")));
    }
    if n_tokens > dims.n_t_max {
        return Err(r.err(format!("{n_tokens} tokens exceed N_t_max {}", dims.n_t_max)));
    }
    let tokens = Matrix::new(
        n_tokens,
        dims.d_text,
        r.reals(n_tokens * dims.d_text, "tokens")?,
    )?;
    let n_images = r.count(4 + 8 * dims.d_model, "image count")?;
    let mut images = Vec::with_capacity(n_images);
    let mut pooled = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let n_p = r.count(4 * dims.d_model, "patch count")?;
        if n_p == 0 {
            return Err(r.err("image with zero patches"));
        }
        let patches = Matrix::new(n_p, dims.d_model, r.reals(n_p * dims.d_model, "patches")?)?;
        images.push(PatchFeatures { patches });
        pooled.push(r.reals(dims.d_model, "pooled vector")?);
    }
    if r.remaining() != 0 {
        return Err(r.err(format!(
            "{} unexpected bytes after record payload",
            r.remaining()
        )));
    }
    Ok(FeatureBundle {
        entity_id,
        tokens: TokenEmbeddings { tokens, valid_len },
        images,
        pooled,
    })
}

fn encode_header(dims: &StoreDims, count: u64) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.len_u32(dims.d_model);
    w.len_u32(dims.d_text);
    w.len_u32(dims.n_t_max);
    w.u64(count);
    let c = crc32(&[&w.buf]);
    w.u32(c);
    w.buf
}

fn decode_header(data: &[u8]) -> Result<(StoreDims, u64)> {
    let mut r = ByteReader::new(data, 0);
    let magic = r.take(4, "magic")?;
    if magic != STORE_MAGIC {
        return Err(Error::format(
            0,
            None,
            format!("bad magic {magic:?}, expected \"WCFT\""),
        ));
    }
    let version = r.u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::format(
            4,
            None,
            format!("unsupported store version {version}, this build reads {STORE_VERSION}"),
        ));
    }
    let d_model = r.u32("D")? as usize;
    let d_text = r.u32("D_t")? as usize;
    let n_t_max = r.u32("N_t_max")? as usize;
    let count = r.u64("entity count")?;
    let stored = r.u32("header checksum")?;
    if crc32(&[&data[..HEADER_LEN - 4]]) != stored {
        return Err(Error::Checksum {
            record: "header".into(),
            offset: 0,
        });
    }
    if d_model == 0 || d_text == 0 {
        return Err(Error::format(8, None, "zero embedding dimension"));
    }
    Ok((
        StoreDims {
            d_model,
            d_text,
            n_t_max,
        },
        count,
    ))
}

fn store_paths(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        (path.join(STORE_FILE), Some(path.join(MANIFEST_FILE)))
    } else {
        let sidecar = path.with_file_name(MANIFEST_FILE);
        (path.to_path_buf(), sidecar.exists().then_some(sidecar))
    }
}

/// Writes `bundles` as a store directory at `dir` (created if missing).
pub fn write_store(
    dir: &Path,
    dims: StoreDims,
    bundles: &[FeatureBundle],
) -> Result<StoreManifest> {
    if dims.d_model == 0 || dims.d_text == 0 {
        return Err(Error::Ingestion("store dimensions must be >= 1".into()));
    }
    let mut ids = HashSet::new();
    for b in bundles {
        if !ids.insert(b.entity_id.as_str()) {
            return Err(Error::Ingestion(format!(
                "duplicate entity id {:?}",
                b.entity_id
            )));
        }
        check_bundle(b, &dims)
            .map_err(|m| Error::Ingestion(format!("entity {:?}: {m}", b.entity_id)))?;
    }
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(STORE_FILE))?);
    let header = encode_header(&dims, bundles.len() as u64);
    out.write_all(&header)?;
    let mut offset = header.len() as u64;
    let mut records = Vec::with_capacity(bundles.len());
    for b in bundles {
        let payload = encode_payload(b);
        let len = (payload.len() as u64).to_le_bytes();
        let c = crc32(&[&len, &payload]);
        out.write_all(&len)?;
        out.write_all(&payload)?;
        out.write_all(&c.to_le_bytes())?;
        let length = 8 + payload.len() as u64 + 4;
        records.push(RecordEntry {
            entity_id: b.entity_id.clone(),
            offset,
            length,
            crc32: c,
        });
        offset += length;
    }
    out.flush()?;
    let manifest = StoreManifest {
        version: STORE_VERSION,
        dims,
        entity_count: bundles.len() as u64,
        records,
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// An opened store. Reads open their own file handle, so one `Store` can serve many threads.
#[derive(Debug, Clone)]
pub struct Store {
    path: PathBuf,
    manifest: StoreManifest,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self> {
        let (file, manifest_path) = store_paths(dir);
        let manifest_path = manifest_path
            .ok_or_else(|| Error::NotFound(format!("{} has no {MANIFEST_FILE}", dir.display())))?;
        if !file.exists() {
            return Err(Error::NotFound(format!(
                "store file {} does not exist",
                file.display()
            )));
        }
        let manifest: StoreManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)
            .map_err(|e| {
                Error::format(
                    0,
                    None,
                    format!("manifest {}: {e}", manifest_path.display()),
                )
            })?;
        let mut head = [0u8; HEADER_LEN];
        File::open(&file)?
            .read_exact(&mut head)
            .map_err(|_| Error::format(0, None, "file shorter than the store header"))?;
        let (dims, count) = decode_header(&head)?;
        if dims != manifest.dims
            || count != manifest.entity_count
            || manifest.records.len() as u64 != count
        {
            return Err(Error::format(
                0,
                None,
                "manifest disagrees with the store header",
            ));
        }
        Ok(Self {
            path: file,
            manifest,
        })
    }

    pub fn dims(&self) -> StoreDims {
        self.manifest.dims
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.records.iter().map(|r| r.entity_id.as_str())
    }

    fn read_record(&self, file: &mut File, entry: &RecordEntry) -> Result<FeatureBundle> {
        file.seek(SeekFrom::Start(entry.offset))?;
        let mut buf = vec![0u8; entry.length as usize];
        file.read_exact(&mut buf).map_err(|_| {
            Error::format(
                entry.offset,
                Some(&entry.entity_id),
                "record runs past end of file",
            )
        })?;
        parse_record(
            &buf,
            entry.offset,
            &self.manifest.dims,
            Some(&entry.entity_id),
        )
    }

    /// Random access by id through the manifest offsets.
    pub fn read_entity(&self, entity_id: &str) -> Result<FeatureBundle> {
        let entry = self
            .manifest
            .records
            .iter()
            .find(|r| r.entity_id == entity_id)
            .ok_or_else(|| Error::NotFound(format!("entity {entity_id:?} is not in the store")))?;
        self.read_record(&mut File::open(&self.path)?, entry)
    }

    /// Record `i` in file order.
    pub fn read_index(&self, i: usize) -> Result<FeatureBundle> {
        let entry = self
            .manifest
            .records
            .get(i)
            .ok_or_else(|| Error::NotFound(format!("record {i} of {}", self.len())))?;
        self.read_record(&mut File::open(&self.path)?, entry)
    }

    /// Sequential scan of the whole file, independent of the manifest offsets.
    pub fn read_all(&self) -> Result<Vec<FeatureBundle>> {
        let data = std::fs::read(&self.path)?;
        let (dims, count) = decode_header(&data)?;
        let mut pos = HEADER_LEN;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = frame_len(&data, pos)?;
            out.push(parse_record(
                &data[pos..pos + len],
                pos as u64,
                &dims,
                None,
            )?);
            pos += len;
        }
        if pos != data.len() {
            return Err(Error::format(
                pos as u64,
                None,
                "trailing bytes after last record",
            ));
        }
        Ok(out)
    }
}

/// Total size of the record starting at `pos`, bounds-checked.
fn frame_len(data: &[u8], pos: usize) -> Result<usize> {
    let avail = data.len().saturating_sub(pos);
    if avail < 12 {
        return Err(Error::format(pos as u64, None, "truncated record frame"));
    }
    let payload = u64::from_le_bytes(data[pos..pos + 8].try_into().expect("8 bytes"));
    if payload > (avail - 12) as u64 {
        return Err(Error::format(
            pos as u64,
            None,
            format!("record length {payload} runs past end of file"),
        ));
    }
    Ok(payload as usize + 12)
}

fn parse_record(
    buf: &[u8],
    offset: u64,
    dims: &StoreDims,
    expect_id: Option<&str>,
) -> Result<FeatureBundle> {
    let name = expect_id.unwrap_or("?").to_string();
    if buf.len() < 12 {
        return Err(Error::format(offset, expect_id, "truncated record frame"));
    }
    let payload_len = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
    if payload_len != (buf.len() - 12) as u64 {
        return Err(Error::format(
            offset,
            expect_id,
            "record length prefix disagrees with manifest",
        ));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32(&[body]) != stored {
        let record = ByteReader::new(&body[8..], offset + 8)
            .str("entity id")
            .unwrap_or(name);
        return Err(Error::Checksum { record, offset });
    }
    let mut r = ByteReader::new(&body[8..], offset + 8);
    if let Some(id) = expect_id {
        r.set_record(id);
    }
    let b = decode_payload(&mut r, dims)?;
    if let Some(id) = expect_id {
        if b.entity_id != id {
            return Err(Error::format(
                offset,
                Some(id),
                format!("record holds entity {:?}", b.entity_id),
            ));
        }
    }
    Ok(b)
}

/// One problem found by a validator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub record: Option<String>,
    pub offset: u64,
    pub message: String,
}

impl Finding {
    pub(crate) fn from_error(e: &Error, fallback_offset: u64) -> Self {
        match e {
            Error::Format {
                offset,
                record,
                message,
            } => Finding {
                record: record.clone(),
                offset: *offset,
                message: message.clone(),
            },
            Error::Checksum { record, offset } => Finding {
                record: Some(record.clone()),
                offset: *offset,
                message: "checksum mismatch".into(),
            },
            other => Finding {
                record: None,
                offset: fallback_offset,
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: String,
    pub records_checked: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks magic, header, framing, checksums, dimensions, finiteness, pooled-vector norms and
/// agreement with the manifest. Every problem is reported with its record and byte offset.
///
/// `path` may be the store directory or the `.wcft` file. Only a missing file is an error;
/// everything else becomes a finding.
pub fn validate_store(path: &Path) -> Result<ValidationReport> {
    let (file, manifest_path) = store_paths(path);
    let data = std::fs::read(&file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("store file {} does not exist", file.display()))
        }
        _ => e.into(),
    })?;
    let mut report = ValidationReport {
        path: file.display().to_string(),
        records_checked: 0,
        findings: Vec::new(),
    };
    let mut push = |f: Finding| report.findings.push(f);
    if data.len() < HEADER_LEN {
        push(Finding {
            record: None,
            offset: 0,
            message: format!("file is {} bytes, shorter than the header", data.len()),
        });
        return Ok(report);
    }
    let (dims, count) = match decode_header(&data) {
        Ok(h) => h,
        Err(e) => {
            push(Finding::from_error(&e, 0));
            return Ok(report);
        }
    };

    let mut seen = HashSet::new();
    let mut frames: Vec<RecordEntry> = Vec::new();
    let mut pos = HEADER_LEN;
    let mut checked = 0;
    for i in 0..count {
        let len = match frame_len(&data, pos) {
            Ok(l) => l,
            Err(e) => {
                push(Finding::from_error(&e, pos as u64));
                break;
            }
        };
        let buf = &data[pos..pos + len];
        checked += 1;
        let crc = u32::from_le_bytes(buf[len - 4..].try_into().expect("4 bytes"));
        match parse_record(buf, pos as u64, &dims, None) {
            Ok(b) => {
                if let Err(m) = check_bundle(&b, &dims) {
                    push(Finding {
                        record: Some(b.entity_id.clone()),
                        offset: pos as u64,
                        message: m,
                    });
                }
                if !seen.insert(b.entity_id.clone()) {
                    push(Finding {
                        record: Some(b.entity_id.clone()),
                        offset: pos as u64,
                        message: "duplicate entity id".into(),
                    });
                }
                frames.push(RecordEntry {
                    entity_id: b.entity_id,
                    offset: pos as u64,
                    length: len as u64,
                    crc32: crc,
                });
            }
            Err(e) => {
                let mut f = Finding::from_error(&e, pos as u64);
                if f.record.is_none() {
                    f.record = Some(format!("#{i}"));
                }
                push(f);
                frames.push(RecordEntry {
                    entity_id: String::new(),
                    offset: pos as u64,
                    length: len as u64,
                    crc32: crc,
                });
            }
        }
        pos += len;
    }
    if frames.len() as u64 == count && pos != data.len() {
        push(Finding {
            record: None,
            offset: pos as u64,
            message: format!("{} trailing bytes after the last record", data.len() - pos),
        });
    }

    match manifest_path {
        None if path.is_dir() => push(Finding {
            record: None,
            offset: 0,
            message: format!("{MANIFEST_FILE} is missing"),
        }),
        None => {}
        Some(mp) => match std::fs::read(&mp)
            .ok()
            .and_then(|b| serde_json::from_slice::<StoreManifest>(&b).ok())
        {
            None => push(Finding {
                record: None,
                offset: 0,
                message: format!("{} is unreadable or malformed", mp.display()),
            }),
            Some(m) => {
                if m.version != STORE_VERSION
                    || m.dims != dims
                    || m.entity_count != count
                    || m.records.len() as u64 != count
                {
                    push(Finding {
                        record: None,
                        offset: 0,
                        message: "manifest header fields disagree with the store".into(),
                    });
                }
                let mut prev = None;
                for (i, (e, f)) in m.records.iter().zip(&frames).enumerate() {
                    if prev.is_some_and(|p| e.offset <= p) {
                        push(Finding {
                            record: Some(e.entity_id.clone()),
                            offset: e.offset,
                            message: "manifest offsets are not strictly increasing".into(),
                        });
                    }
                    prev = Some(e.offset);
                    let name_ok = f.entity_id.is_empty() || f.entity_id == e.entity_id;
                    if e.offset != f.offset
                        || e.length != f.length
                        || e.crc32 != f.crc32
                        || !name_ok
                    {
                        push(Finding {
                            record: Some(e.entity_id.clone()),
                            offset: f.offset,
                            message: format!(
                                "manifest entry {i} does not match the record on disk"
                            ),
                        });
                    }
                }
            }
        },
    }
    report.records_checked = checked;
    Ok(report)
}

/// Evaluation split of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

/// One query image: its pooled feature and the entity it depicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub entity_id: String,
    pub split: Split,
    /// Base64 of little-endian f32 values in the JSON form.
    #[serde(with = "b64_f32")]
    pub vector: Vec<f32>,
}

mod b64_f32 {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f32>, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = B64.decode(s.as_bytes()).map_err(de::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(de::Error::custom(
                "vector byte length is not a multiple of 4",
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Writes one JSON object per line.
pub fn write_queries(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for q in queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines query set. Blank lines are skipped; errors carry the line's byte offset.
pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("query file {} does not exist", path.display()))
        }
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            let q: QueryRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format(
                    offset,
                    None,
                    format!("{}: line {}: {e}", path.display(), n + 1),
                )
            })?;
            out.push(q);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
