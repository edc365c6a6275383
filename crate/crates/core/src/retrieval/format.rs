//! On-disk index shards.
//!
//! ```text
//! header:  "WCIX" | version u32 | D u32 | image_mode u8 | has_ivf u8 | reserved u16
//!          | entities u64 | rows u64 | crc32 of the preceding header bytes
//! section: tag [u8; 4] | len u64 | body | crc32(tag ++ len ++ body)
//! ```
//!
//! Sections follow the header in a fixed order: `ENTS` (entity ids as length-prefixed utf-8),
//! `RMAP` (entity u32, image u32 per row), `ROWS` (row-major f32), and `IVFQ` when the
//! quantizer is present (n_lists u32, n_probe u32, centroids f32, then per list a u32 count
//! and that many row ids).

use super::{ImageMode, IndexShard, IvfIndex, RowRef, ROW_NORM_TOL};
use crate::codec::{crc32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kb::{Finding, ValidationReport};
use crate::tensor::Matrix;
use std::path::Path;

pub const INDEX_MAGIC: &[u8; 4] = b"WCIX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

fn section(w: &mut ByteWriter, tag: &[u8; 4], body: &[u8]) {
    let start = w.len();
    w.bytes(tag);
    w.u64(body.len() as u64);
    w.bytes(body);
    let c = crc32(&[&w.buf[start..]]);
    w.u32(c);
}

fn encode(shard: &IndexShard) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(INDEX_MAGIC);
    w.u32(INDEX_VERSION);
    w.len_u32(shard.dim());
    w.u8(shard.image_mode.code());
    w.u8(shard.ivf.is_some() as u8);
    w.bytes(&[0, 0]);
    w.u64(shard.entity_ids.len() as u64);
    w.u64(shard.len() as u64);
    let c = crc32(&[&w.buf]);
    w.u32(c);

    let mut b = ByteWriter::new();
    for id in &shard.entity_ids {
        b.str(id);
    }
    section(&mut w, b"ENTS", &b.buf);
    let mut b = ByteWriter::new();
    for r in &shard.row_map {
        b.u32(r.entity);
        b.u32(r.image);
    }
    section(&mut w, b"RMAP", &b.buf);
    let mut b = ByteWriter::new();
    b.reals(shard.rows.data());
    section(&mut w, b"ROWS", &b.buf);
    if let Some(ivf) = &shard.ivf {
        let mut b = ByteWriter::new();
        b.len_u32(ivf.n_lists());
        b.len_u32(ivf.n_probe);
        b.reals(ivf.centroids.data());
        for l in &ivf.lists {
            b.len_u32(l.len());
            for &r in l {
                b.u32(r);
            }
        }
        section(&mut w, b"IVFQ", &b.buf);
    }
    w.buf
}

pub fn save_index(path: &Path, shard: &IndexShard) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    // write then rename so a crash never leaves a half-written shard under the final name
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, encode(shard))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Header {
    dim: usize,
    image_mode: ImageMode,
    has_ivf: bool,
    entities: usize,
    rows: usize,
}

fn read_header(data: &[u8]) -> Result<Header> {
    let mut r = ByteReader::new(data, 0);
    r.set_record("header");
    if r.take(4, "magic")? != INDEX_MAGIC {
        return Err(Error::format(
            0,
            Some("header"),
            "bad magic, expected \"WCIX\"",
        ));
    }
    let version = r.u32("version")?;
    if version != INDEX_VERSION {
        return Err(Error::format(
            4,
            Some("header"),
            format!("unsupported index version {version}, this build reads {INDEX_VERSION}"),
        ));
    }
    if data.len() < HEADER_LEN {
        return Err(r.err("truncated header"));
    }
    let stored = u32::from_le_bytes(
        data[HEADER_LEN - 4..HEADER_LEN]
            .try_into()
            .expect("4 bytes"),
    );
    if crc32(&[&data[..HEADER_LEN - 4]]) != stored {
        return Err(Error::Checksum {
            record: "header".into(),
            offset: (HEADER_LEN - 4) as u64,
        });
    }
    let dim = r.u32("dim")? as usize;
    let mode_at = r.offset();
    let image_mode = ImageMode::from_code(r.u8("image mode")?)
        .ok_or_else(|| Error::format(mode_at, Some("header"), "unknown image mode"))?;
    let has_ivf = match r.u8("ivf flag")? {
        0 => false,
        1 => true,
        _ => return Err(r.err("ivf flag must be 0 or 1")),
    };
    r.take(2, "reserved")?;
    let entities = r.u64("entity count")? as usize;
    let rows = r.u64("row count")? as usize;
    if dim == 0 {
        return Err(Error::format(8, Some("header"), "dimension is zero"));
    }
    Ok(Header {
        dim,
        image_mode,
        has_ivf,
        entities,
        rows,
    })
}

/// Reads one section. Framing problems are fatal; a checksum mismatch is recorded in `issues`
/// and the body is still returned so later sections can be checked.
fn read_section<'a>(
    r: &mut ByteReader<'a>,
    tag: &[u8; 4],
    issues: &mut Vec<Error>,
) -> Result<(u64, &'a [u8])> {
    let name = String::from_utf8_lossy(tag).into_owned();
    r.set_record(name.clone());
    let start = r.offset();
    let head = r.take(12, "section header")?;
    if &head[..4] != tag {
        return Err(Error::format(
            start,
            Some(&name),
            format!("expected section {name}"),
        ));
    }
    let len = u64::from_le_bytes(head[4..12].try_into().expect("8 bytes"));
    if len > r.remaining().saturating_sub(4) as u64 {
        return Err(Error::format(
            start + 4,
            Some(&name),
            format!("section length {len} overruns the file"),
        ));
    }
    let body_at = r.offset();
    let body = r.take(len as usize, "section body")?;
    let crc_at = r.offset();
    let stored = r.u32("section checksum")?;
    if crc32(&[head, body]) != stored {
        issues.push(Error::Checksum {
            record: name,
            offset: crc_at,
        });
    }
    Ok((body_at, body))
}

/// Decodes a shard. Structural failures return `Err`; content problems (checksums, norms,
/// ranges) accumulate in `issues`.
fn decode(data: &[u8], issues: &mut Vec<Error>) -> Result<IndexShard> {
    let h = read_header(data)?;
    let mut r = ByteReader::new(&data[HEADER_LEN..], HEADER_LEN as u64);

    let (at, body) = read_section(&mut r, b"ENTS", issues)?;
    let mut b = ByteReader::new(body, at);
    b.set_record("ENTS");
    let mut entity_ids = Vec::with_capacity(h.entities.min(body.len() / 4));
    for _ in 0..h.entities {
        entity_ids.push(b.str("entity id")?);
    }
    if b.remaining() != 0 {
        return Err(b.err("entity table longer than the header count"));
    }

    let (at, body) = read_section(&mut r, b"RMAP", issues)?;
    if Some(body.len()) != h.rows.checked_mul(8) {
        return Err(Error::format(
            at,
            Some("RMAP"),
            format!("{} bytes for {} rows", body.len(), h.rows),
        ));
    }
    let mut row_map = Vec::with_capacity(h.rows);
    for (i, c) in body.chunks_exact(8).enumerate() {
        let entity = u32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
        let image = u32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
        if entity as usize >= h.entities {
            issues.push(Error::format(
                at + 8 * i as u64,
                Some("RMAP"),
                format!("row {i} refers to entity {entity} of {}", h.entities),
            ));
        }
        row_map.push(RowRef { entity, image });
    }

    let (at, body) = read_section(&mut r, b"ROWS", issues)?;
    if Some(body.len()) != h.rows.checked_mul(h.dim).and_then(|n| n.checked_mul(4)) {
        return Err(Error::format(
            at,
            Some("ROWS"),
            format!("{} bytes for {}×{} f32", body.len(), h.rows, h.dim),
        ));
    }
    let mut b = ByteReader::new(body, at);
    let rows = Matrix::new(h.rows, h.dim, b.reals::<f32>(h.rows * h.dim, "rows")?)?;
    for i in 0..h.rows {
        let row = rows.row(i);
        let off = at + (i * h.dim * 4) as u64;
        if !row.iter().all(|x| x.is_finite()) {
            issues.push(Error::format(
                off,
                Some("ROWS"),
                format!("row {i} is not finite"),
            ));
            continue;
        }
        let n = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (n - 1.0).abs() > ROW_NORM_TOL as f64 {
            issues.push(Error::format(
                off,
                Some("ROWS"),
                format!("row {i} has norm {n:.7}"),
            ));
        }
    }

    let ivf = if h.has_ivf {
        let (at, body) = read_section(&mut r, b"IVFQ", issues)?;
        let mut b = ByteReader::new(body, at);
        b.set_record("IVFQ");
        let n_lists = b.u32("n_lists")? as usize;
        let n_probe = b.u32("n_probe")? as usize;
        let cent = b.reals::<f32>(n_lists.saturating_mul(h.dim), "centroids")?;
        let centroids = Matrix::new(n_lists, h.dim, cent)?;
        let mut lists = Vec::with_capacity(n_lists);
        let mut seen = vec![false; h.rows];
        for l in 0..n_lists {
            let n = b.count(4, "list length")?;
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                let at = b.offset();
                let id = b.u32("row id")?;
                match seen.get_mut(id as usize) {
                    Some(s) if !*s => *s = true,
                    Some(_) => issues.push(Error::format(
                        at,
                        Some("IVFQ"),
                        format!("row {id} appears in two lists"),
                    )),
                    None => issues.push(Error::format(
                        at,
                        Some("IVFQ"),
                        format!("list {l} names row {id} of {}", h.rows),
                    )),
                }
                ids.push(id);
            }
            lists.push(ids);
        }
        if b.remaining() != 0 {
            return Err(b.err("trailing bytes in the quantizer section"));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            issues.push(Error::format(
                at,
                Some("IVFQ"),
                format!("row {missing} is in no list"),
            ));
        }
        if n_lists == 0 || n_probe == 0 || n_probe > n_lists {
            issues.push(Error::format(
                at,
                Some("IVFQ"),
                format!("n_probe {n_probe} with {n_lists} lists"),
            ));
        }
        Some(IvfIndex {
            centroids,
            lists,
            n_probe,
        })
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(r.err("trailing bytes after the last section"));
    }
    Ok(IndexShard {
        entity_ids,
        rows,
        row_map,
        image_mode: h.image_mode,
        ivf,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("index {} does not exist", path.display()))
        }
        _ => e.into(),
    })
}

/// Loads a shard, failing on the first structural or content problem.
pub fn load_index(path: &Path) -> Result<IndexShard> {
    let data = read_file(path)?;
    let mut issues = Vec::new();
    let shard = decode(&data, &mut issues)?;
    match issues.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(shard),
    }
}

/// Checks an index file and reports every problem with its section and byte offset. Only a
/// missing file is an error.
pub fn validate_index(path: &Path) -> Result<ValidationReport> {
    let data = read_file(path)?;
    let mut issues = Vec::new();
    let records = match decode(&data, &mut issues) {
        Ok(s) => s.len(),
        Err(e) => {
            issues.push(e);
            0
        }
    };
    Ok(ValidationReport {
        path: path.display().to_string(),
        records_checked: records,
        findings: issues.iter().map(|e| Finding::from_error(e, 0)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard() -> IndexShard {
        let rows = vec![
            (0, 0, vec![1.0, 0.0, 0.0]),
            (0, 1, vec![0.0, 1.0, 0.0]),
            (1, 0, vec![0.0, 0.0, 1.0]),
            (2, 0, vec![1.0, 1.0, 0.0]),
        ];
        let mut s =
            IndexShard::from_rows(vec!["a".into(), "b".into(), "c".into()], rows, 3).unwrap();
        s.build_ivf(2, 1, 3).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wcix");
        let mut s = shard();
        save_index(&p, &s).unwrap();
        assert_eq!(load_index(&p).unwrap(), s);
        assert!(validate_index(&p).unwrap().is_clean());
        s.ivf = None;
        save_index(&p, &s).unwrap();
        assert_eq!(load_index(&p).unwrap(), s);
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = encode(&shard());
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            let mut issues = Vec::new();
            let clean = decode(&b, &mut issues).is_ok() && issues.is_empty();
            assert!(!clean, "flip at byte {i} went unnoticed");
        }
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let bytes = encode(&shard());
        for cut in [0, 3, 20, HEADER_LEN + 5, bytes.len() - 1] {
            assert!(decode(&bytes[..cut], &mut Vec::new()).is_err(), "cut {cut}");
        }
        let mut v2 = bytes;
        v2[4] = 2;
        let e = decode(&v2, &mut Vec::new()).unwrap_err().to_string();
        assert!(e.contains("unsupported index version 2"), "{e}");
    }

    #[test]
    fn validation_locates_a_corrupt_row_section() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wcix");
        let mut bytes = encode(&shard());
        let pos = bytes.windows(4).position(|w| w == b"ROWS").unwrap();
        bytes[pos + 20] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        let rep = validate_index(&p).unwrap();
        assert!(
            rep.findings
                .iter()
                .any(|f| f.record.as_deref() == Some("ROWS")),
            "{rep:?}"
        );
        assert!(matches!(
            load_index(&p),
            Err(Error::Checksum { .. }) | Err(Error::Format { .. })
        ));
        assert!(matches!(
            validate_index(&dir.path().join("none")),
            Err(Error::NotFound(_))
        ));
    }
}
