//! Binary record files holding preprocessed samples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MEM1" | u16 version = 1
//! per record:
//!   u32 payload_len | payload | u32 crc32(payload)
//! payload:
//!   u16 id_len | id utf-8 bytes
//!   u16 height | u16 width | u8 channels | C*H*W f32 values (CHW order)
//!   u16 token_count | token_count * u32 ids
//!   token_count u8 mask bytes | token_count u8 segment bytes
//!   5 label bytes: sentiment, humor, sarcasm, offense, motivation
//! ```
//!
//! Reads stream one record at a time and verify the CRC before decoding, so
//! corruption is reported by record index rather than surfacing as garbage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{LabelSet, MemeSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::EncodedText;

const MAGIC: &[u8; 4] = b"MEM1";
const VERSION: u16 = 1;

fn build_payload(sample: &MemeSample) -> Result<Vec<u8>> {
    let shape = sample.image.shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!(
            "sample {} image must be CxHxW, got {shape:?}",
            sample.id
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c > u8::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Input(format!("image dimensions {shape:?} overflow the format")));
    }
    let id_bytes = sample.id.as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(Error::Input(format!("sample id of {} bytes too long", id_bytes.len())));
    }
    let tokens = &sample.text;
    let n = tokens.input_ids.len();
    if n > u16::MAX as usize {
        return Err(Error::Input(format!("token count {n} overflows the format")));
    }
    if tokens.input_mask.len() != n || tokens.segment_ids.len() != n {
        return Err(Error::Input("ids/mask/segments lengths differ".into()));
    }
    sample.labels.validate()?;

    let mut p = Vec::with_capacity(16 + id_bytes.len() + 4 * c * h * w + 6 * n + 5);
    p.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
    p.extend_from_slice(id_bytes);
    p.extend_from_slice(&(h as u16).to_le_bytes());
    p.extend_from_slice(&(w as u16).to_le_bytes());
    p.push(c as u8);
    for v in sample.image.values() {
        p.extend_from_slice(&v.to_le_bytes());
    }
    p.extend_from_slice(&(n as u16).to_le_bytes());
    for id in &tokens.input_ids {
        p.extend_from_slice(&id.to_le_bytes());
    }
    p.extend_from_slice(&tokens.input_mask);
    p.extend_from_slice(&tokens.segment_ids);
    p.extend_from_slice(&[
        sample.labels.sentiment,
        sample.labels.humor,
        sample.labels.sarcasm,
        sample.labels.offense,
        sample.labels.motivation,
    ]);
    Ok(p)
}

struct PayloadCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> PayloadCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "record {}: payload ends {} bytes short",
                self.record,
                self.pos + n - self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn parse_payload(bytes: &[u8], record: usize) -> Result<MemeSample> {
    let mut cur = PayloadCursor {
        bytes,
        pos: 0,
        record,
    };
    let id_len = cur.u16()? as usize;
    let id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| Error::Format(format!("record {record}: id is not UTF-8")))?
        .to_string();
    let h = cur.u16()? as usize;
    let w = cur.u16()? as usize;
    let c = cur.u8()? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!(
            "record {record}: zero image dimension {c}x{h}x{w}"
        )));
    }
    let mut values = Vec::with_capacity(c * h * w);
    for chunk in cur.take(4 * c * h * w)?.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let image = Tensor::new(&[c, h, w], values)?;
    let n = cur.u16()? as usize;
    let mut input_ids = Vec::with_capacity(n);
    for chunk in cur.take(4 * n)?.chunks_exact(4) {
        input_ids.push(u32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let input_mask = cur.take(n)?.to_vec();
    let segment_ids = cur.take(n)?.to_vec();
    let labels = LabelSet::new(cur.u8()?, cur.u8()?, cur.u8()?, cur.u8()?, cur.u8()?)
        .map_err(|e| Error::Format(format!("record {record}: {e}")))?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "record {record}: {} trailing payload bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(MemeSample {
        id,
        image,
        text: EncodedText {
            input_ids,
            input_mask,
            segment_ids,
        },
        labels,
    })
}

/// Write samples to a record file. A single writer owns the file.
pub fn write_records(path: &Path, samples: &[MemeSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for sample in samples {
        let payload = build_payload(sample)?;
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        out.write_all(&payload)?;
        out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader; yields one sample at a time.
pub struct RecordReader {
    reader: BufReader<File>,
    next_index: usize,
}

impl RecordReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut header = [0u8; 6];
        reader
            .read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{}: missing header", path.display())))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}",
                path.display(),
                &header[..4]
            )));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        Ok(RecordReader {
            reader,
            next_index: 0,
        })
    }

    fn read_one(&mut self) -> Result<Option<MemeSample>> {
        let mut len_bytes = [0u8; 4];
        match self.reader.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let record = self.next_index;
        let len = u32::from_le_bytes(len_bytes) as usize;
        let mut payload = vec![0u8; len];
        self.reader
            .read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("record {record}: truncated payload")))?;
        let mut crc_bytes = [0u8; 4];
        self.reader
            .read_exact(&mut crc_bytes)
            .map_err(|_| Error::Format(format!("record {record}: missing checksum")))?;
        if crc32fast::hash(&payload) != u32::from_le_bytes(crc_bytes) {
            return Err(Error::Corrupt { record });
        }
        let sample = parse_payload(&payload, record)?;
        self.next_index += 1;
        Ok(Some(sample))
    }
}

impl Iterator for RecordReader {
    type Item = Result<MemeSample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_one().transpose()
    }
}

/// Read a whole record file into memory.
pub fn read_records(path: &Path) -> Result<Vec<MemeSample>> {
    RecordReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, seed: u64) -> MemeSample {
        let mut rng = crate::rng::Rng::seed_from(seed);
        MemeSample {
            id: id.to_string(),
            image: Tensor::new(&[2, 3, 3], (0..18).map(|_| rng.uniform(-0.5, 0.5)).collect())
                .unwrap(),
            text: EncodedText {
                input_ids: vec![2, 9, 4, 3, 0, 0],
                input_mask: vec![1, 1, 1, 1, 0, 0],
                segment_ids: vec![0; 6],
            },
            labels: LabelSet::new(2, 1, 3, 0, 1).unwrap(),
        }
    }

    fn temp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("memefuse-rec-{name}-{}", std::process::id()))
    }

    #[test]
    fn empty_file_roundtrips_zero_samples() {
        let path = temp("empty");
        write_records(&path, &[]).unwrap();
        let got = read_records(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn three_samples_roundtrip_bitwise() {
        let path = temp("three");
        let samples = vec![sample("a", 1), sample("b", 2), sample("c", 3)];
        write_records(&path, &samples).unwrap();
        let got = read_records(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(got.len(), 3);
        for (orig, back) in samples.iter().zip(&got) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.image.shape(), back.image.shape());
            // bitwise: compare the raw bit patterns, not float equality
            let a: Vec<u32> = orig.image.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.image.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(orig.text, back.text);
            assert_eq!(orig.labels, back.labels);
        }
    }

    #[test]
    fn payload_byte_flip_is_detected_with_record_index() {
        let path = temp("flip");
        write_records(&path, &[sample("a", 1), sample("b", 2)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // header 6 bytes, then record 0: flip a byte in the middle of its payload
        let len0 = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let second_payload_at = 6 + 4 + len0 + 4 + 4;
        bytes[second_payload_at + 10] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let mut reader = RecordReader::open(&path).unwrap();
        assert!(reader.next().unwrap().is_ok());
        let err = reader.next().unwrap().unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(err, Error::Corrupt { record: 1 }));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let path = temp("magic");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(RecordReader::open(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"MEM1\x02\x00").unwrap();
        let err = RecordReader::open(&path).err().unwrap();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn streaming_reader_yields_in_order() {
        let path = temp("stream");
        let samples: Vec<MemeSample> = (0..5).map(|i| sample(&format!("s{i}"), i)).collect();
        write_records(&path, &samples).unwrap();
        let reader = RecordReader::open(&path).unwrap();
        let ids: Vec<String> = reader.map(|r| r.unwrap().id).collect();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(ids, vec!["s0", "s1", "s2", "s3", "s4"]);
    }
}
